import json
import subprocess
import sys
from pathlib import Path

import pytest

from zsar_kit.cli import build_parser, main, staged_dir
from zsar_kit.datamodel import ActionClass, load_feature_store, save_classes

FIXTURES = Path(__file__).parent / "fixtures"
SMALL = ["--set", "n_seen=5", "--set", "n_unseen=3", "--set", "videos_per_class=12",
         "--set", "descriptions_per_class=4"]
FAST = ["--set", "d=8", "--set", "epochs=3", "--set", "batch_size=16", "--set", "k=4"]


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--out", str(out), "--seed", "1", *SMALL]) == 0
    return out


def metrics_without_wallclock(path):
    rows = [json.loads(ln) for ln in Path(path).read_text().splitlines()]
    for r in rows:
        r.pop("wallclock")
    return rows


class TestExitCodes:
    def test_missing_config_names_path(self, tmp_path, capsys):
        assert main(["train", "--config", "missing.cfg", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
        assert "missing.cfg" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["gradcheck", "--bogus"]) == 2
        assert "--bogus" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "r.cfg"
        cfg.write_text("temperature = 3\n")
        assert main(["gradcheck", "--config", str(cfg), "--instances", "1"]) == 1
        assert "temperature" in capsys.readouterr().err

    def test_bad_variant_is_validation_error(self, data, tmp_path):
        assert main(["ablate", "--data", str(data), "--variants", "Nope", "--out", str(tmp_path / "a")]) == 1

    def test_help_lists_every_flag_with_default(self):
        parser = build_parser()
        sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
        for name, p in sub.choices.items():
            text = p.format_help()
            for action in p._actions:
                for flag in action.option_strings:
                    assert flag in text, (name, flag)
                if action.option_strings and action.default is not None and action.help:
                    assert "default:" in text, name
            assert "--config" in text and "--seed" in text

    def test_help_exit_zero(self, capsys):
        assert main(["train", "--help"]) == 0
        out = capsys.readouterr().out
        assert "--data" in out and "--rankings" in out and "default: None" in out


class TestGradcheck:
    def test_seed_7(self, capsys):
        assert main(["gradcheck", "--seed", "7"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [ln.split("\t")[0] for ln in lines] == ["W_v", "b_v", "W_s", "b_s"]
        for ln in lines:
            name, err, flag = ln.split("\t")
            assert float(err.split("=")[1]) <= 1e-6 and flag == "ok"

    def test_impossible_tolerance_fails(self):
        assert main(["gradcheck", "--instances", "1", "--tol", "0"]) == 1


class TestText:
    def test_dedup_fixture(self, capsys, tmp_path):
        assert main(["dedup", "--classes", str(FIXTURES / "actions20.txt"),
                     "--out", str(tmp_path / "kept.jsonl")]) == 0
        out = capsys.readouterr()
        assert len(out.out.splitlines()) == 14
        assert "20 actions -> 14 canonical actions" in out.err
        assert len((tmp_path / "kept.jsonl").read_text().splitlines()) == 14

    def test_rank_and_stats(self, tmp_path, capsys):
        classes = [ActionClass.create(0, "kick ball", "", ["kick the ball. again!", "ball", "nothing here"])]
        save_classes(classes, tmp_path / "c.jsonl")
        (tmp_path / "e.txt").write_text("3 2\nkick 1 0\nball 0 1\nthe 5 5\n")
        assert main(["rank", "--classes", str(tmp_path / "c.jsonl"), "--embeddings", str(tmp_path / "e.txt"),
                     "--remove-stopwords", "--out", str(tmp_path / "r")]) == 0
        lines = (tmp_path / "r" / "0.rank").read_text().splitlines()
        assert lines[0].startswith("0, 0, ")
        assert lines[-1] == "0, 2, excluded"
        assert main(["stats", "--classes", str(tmp_path / "c.jsonl"), "--out", str(tmp_path / "s.json")]) == 0
        doc = json.loads((tmp_path / "s.json").read_text())
        assert doc["total_descriptions"] == 3 and doc["total_sentences"] == 4


class TestPipeline:
    def test_train_eval_export(self, data, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--data", str(data), "--out", str(run), *FAST]) == 0
        assert sorted(p.name for p in run.iterdir()) == [
            "checkpoint.zck", "config.cfg", "metrics.jsonl", "split.json",
        ]
        assert "epochs = 3" in (run / "config.cfg").read_text()
        assert len(metrics_without_wallclock(run / "metrics.jsonl")) == 3

        ev = tmp_path / "eval"
        assert main(["eval", "--data", str(data), "--run", str(run), "--out", str(ev)]) == 0
        assert {"metrics.tsv", "metrics.json", "config.cfg"} <= {p.name for p in ev.iterdir()}

        ex = tmp_path / "emb"
        assert main(["export-embeddings", "--data", str(data), "--run", str(run), "--out", str(ex)]) == 0
        vids = load_feature_store(ex / "videos.zsf")
        classes = load_feature_store(ex / "classes.zsf")
        assert vids.d_in == 8 and classes.n == 8

    def test_ablate_three_rows(self, data, tmp_path, capsys):
        out = tmp_path / "abl"
        assert main(["ablate", "--data", str(data), "--variants", "AD-only,AD+VC,AD+VC+CIM",
                     "--out", str(out), *FAST]) == 0
        lines = (out / "metrics.tsv").read_text().splitlines()
        per_split = [ln for ln in lines[1:] if "\taggregate\t" not in ln]
        assert [ln.split("\t")[0] for ln in per_split] == ["AD-only", "AD+VC", "AD+VC+CIM"]
        assert capsys.readouterr().out == (out / "metrics.tsv").read_text()

    def test_ablate_with_rankings(self, data, tmp_path):
        rank_dir = tmp_path / "ranks"
        rank_dir.mkdir()
        for cid in range(8):
            (rank_dir / f"{cid}.rank").write_text(f"{cid}, 3, 0.9\n{cid}, 1, 0.5\n")
        assert main(["ablate", "--data", str(data), "--variants", "VC-only", "--rankings", str(rank_dir),
                     "--k-sweep", "1,2", "--out", str(tmp_path / "a"), *FAST]) == 0

    def test_determinism(self, tmp_path):
        for tag in ("a", "b"):
            assert main(["gen", "--out", str(tmp_path / f"d{tag}"), "--seed", "3", *SMALL]) == 0
            assert main(["train", "--data", str(tmp_path / f"d{tag}"), "--out", str(tmp_path / f"r{tag}"),
                         *FAST]) == 0
        for f in sorted((tmp_path / "da").iterdir()):
            assert f.read_bytes() == (tmp_path / "db" / f.name).read_bytes(), f.name
        for name in ("checkpoint.zck", "config.cfg", "split.json"):
            assert (tmp_path / "ra" / name).read_bytes() == (tmp_path / "rb" / name).read_bytes()
        assert metrics_without_wallclock(tmp_path / "ra" / "metrics.jsonl") == \
            metrics_without_wallclock(tmp_path / "rb" / "metrics.jsonl")


class TestNoPartialOutput:
    def test_failed_train_leaves_nothing(self, data, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"split_id": "x", "seen_classes": [0], "unseen_classes": [0]}))
        out = tmp_path / "run"
        assert main(["train", "--data", str(data), "--split", str(bad), "--out", str(out), *FAST]) == 1
        assert not out.exists()
        assert list(tmp_path.glob(".run.tmp-*")) == []

    def test_staged_dir_cleans_up(self, tmp_path):
        with pytest.raises(RuntimeError):
            with staged_dir(tmp_path / "t") as tmp:
                (tmp / "half").write_text("x")
                raise RuntimeError
        assert sorted(p.name for p in tmp_path.iterdir()) == []

    def test_refuses_non_empty_target(self, data, tmp_path):
        assert main(["gen", "--out", str(data), *SMALL]) == 1
        assert main(["gen", "--out", str(data), "--overwrite", *SMALL]) == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "zsar_kit", "gradcheck", "--instances", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.count("\tok") == 4
