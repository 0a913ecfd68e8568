"""Built-in English stop-word list (127 entries).

This is the classic 127-word English function-word list. It is kept verbatim
so canonical action names are reproducible; pass a file to
:func:`load_stopwords` to override it.
"""

from pathlib import Path

ENGLISH_STOPWORDS = (
    "i me my myself we our ours ourselves you your yours yourself yourselves "
    "he him his himself she her hers herself it its itself they them their "
    "theirs themselves what which who whom this that these those am is are was "
    "were be been being have has had having do does did doing a an the and but "
    "if or because as until while of at by for with about against between into "
    "through during before after above below to from up down in out on off over "
    "under again further then once here there when where why how all any both "
    "each few more most other some such no nor not only own same so than too "
    "very s t can will just don should now"
).split()

DEFAULT_STOPWORDS = frozenset(ENGLISH_STOPWORDS)


def load_stopwords(path) -> frozenset:
    """One word per line; blank lines and '#' comments are skipped."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            words.add(line)
    return frozenset(words)
