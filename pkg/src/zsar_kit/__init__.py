"""Zero-shot action recognition over precomputed features: dual text alignment
(definitions + video descriptions), cycle reconstruction through unseen classes,
corpus tooling and a synthetic benchmark."""

__version__ = "0.1.0"
