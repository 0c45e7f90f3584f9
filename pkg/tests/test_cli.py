import json

import numpy as np
import pytest

from charcorrect.alphabet import EMPTY, N_CLASSES, char_index
from charcorrect.cli import main
from charcorrect.seq2seq import CorrectorModel, get_architecture, load_checkpoint, read_dataset
from charcorrect.tensor import format_tensor
from charcorrect.traffic import SceneParams, synthesize_scene, write_scene

WORDS = ["sony", "cat", "apple", "dog", "go"]


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "words.txt"
    path.write_text("\n".join(WORDS) + "\n")
    return path


def run(*argv):
    return main([str(a) for a in argv])


def gen(corpus, out, *extra):
    assert run("gen-data", "--corpus", corpus, "--out", out, "--n-per-word", 2, *extra) == 0


def files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


class TestGenData:
    def test_deterministic(self, corpus, tmp_path):
        for d in ("a", "b"):
            gen(corpus, tmp_path / d, "--seed", 7, "--psub", 0.10, "--pins", 0.05, "--pdel", 0.05)
        assert files(tmp_path / "a") == files(tmp_path / "b")

    def test_seed_changes_output(self, corpus, tmp_path):
        gen(corpus, tmp_path / "a", "--seed", 1)
        gen(corpus, tmp_path / "b", "--seed", 2)
        assert (tmp_path / "a/train.jsonl").read_bytes() != (tmp_path / "b/train.jsonl").read_bytes()

    def test_holdout_file(self, corpus, tmp_path):
        (tmp_path / "hold.txt").write_text("cat\ndog\n")
        gen(corpus, tmp_path / "d", "--holdout", tmp_path / "hold.txt")
        assert not {p.word for p in read_dataset(tmp_path / "d/train.jsonl")} & {"cat", "dog"}
        assert {p.word for p in read_dataset(tmp_path / "d/test.jsonl")} == set(WORDS)

    def test_holdout_n(self, corpus, tmp_path):
        gen(corpus, tmp_path / "d", "--holdout-n", 2)
        manifest = json.loads((tmp_path / "d/manifest.json").read_text())
        assert len(manifest["holdout"]) == 2
        assert not {p.word for p in read_dataset(tmp_path / "d/train.jsonl")} & set(manifest["holdout"])

    def test_config_file_and_flag_precedence(self, corpus, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"n_per_word": 3, "psub": 0.0}))
        assert run("gen-data", "--corpus", corpus, "--out", tmp_path / "d", "--config", tmp_path / "c.json",
                   "--n-per-word", 1) == 0
        cfg = json.loads((tmp_path / "d/config.json").read_text())
        assert cfg["n_per_word"] == 1 and cfg["psub"] == 0.0
        assert len(read_dataset(tmp_path / "d/train.jsonl")) == len(WORDS)

    def test_unknown_config_key(self, corpus, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
        assert run("gen-data", "--corpus", corpus, "--out", tmp_path / "d", "--config", tmp_path / "c.json") == 2
        assert "bogus" in capsys.readouterr().err

    def test_missing_corpus(self, tmp_path, capsys):
        assert run("gen-data", "--corpus", tmp_path / "nope.txt", "--out", tmp_path / "d") == 2
        assert "corpus not found" in capsys.readouterr().err


class TestTrainAndEval:
    @pytest.fixture
    def clean(self, corpus, tmp_path):
        out = tmp_path / "clean"
        gen(corpus, out, "--psub", 0, "--pins", 0, "--pdel", 0, "--confidence", 1.0)
        return out

    def train(self, data, out, *extra):
        return run("train", "--data", data, "--out", out, "--epochs", 1, "--batch-size", 4, *extra)

    def test_unknown_arch(self, clean, tmp_path, capsys):
        assert self.train(clean, tmp_path / "t", "--arch", "model-99") == 2
        err = capsys.readouterr().err
        assert "model-99" in err and "model-17" in err and "17-mini" in err

    def test_missing_data_flag(self, tmp_path, capsys):
        assert run("train", "--out", tmp_path / "t") == 2
        assert "--data is required" in capsys.readouterr().err

    def test_zero_lr_keeps_initial_params(self, clean, tmp_path):
        assert self.train(clean, tmp_path / "t", "--lr", 0, "--seed", 5) == 0
        model, cfg = load_checkpoint(tmp_path / "t/checkpoint.json")
        ref = CorrectorModel.init(get_architecture("17-mini"), 5)
        for name, value in ref.params().items():
            np.testing.assert_array_equal(model.params()[name], value)
        lines = (tmp_path / "t/history.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_seq_accuracy" and len(lines) == 2

    def test_train_and_eval_deterministic(self, clean, tmp_path, capsys):
        for d in ("a", "b"):
            assert self.train(clean, tmp_path / d / "model", "--seed", 3) == 0
            assert run("eval", "--checkpoint", tmp_path / d / "model/checkpoint.json", "--data", clean,
                       "--out", tmp_path / d / "eval") == 0
        a, b = files(tmp_path / "a"), files(tmp_path / "b")
        del a["eval/config.json"], b["eval/config.json"]  # echoes the differing checkpoint path
        assert a == b
        names = set(files(tmp_path / "a/eval"))
        assert {"buckets.csv", "lcs.csv", "diff_corrected.csv", "diff_broken.csv", "summary.txt",
                "config.json", "predictions.csv"} <= names
        assert "sequence_accuracy" in capsys.readouterr().out

    def test_zero_noise_baseline_is_perfect(self, clean, tmp_path):
        assert self.train(clean, tmp_path / "m", "--lr", 0) == 0
        assert run("eval", "--checkpoint", tmp_path / "m/checkpoint.json", "--data", clean, "--out", tmp_path / "e") == 0
        rows = (tmp_path / "e/buckets.csv").read_text().splitlines()
        assert rows[1].startswith("CNN,100.0,0.0,0.0,0.0,0.0")
        assert "baseline_word_accuracy 1.0000" in (tmp_path / "e/summary.txt").read_text()

    def test_eval_missing_checkpoint(self, clean, tmp_path, capsys):
        assert run("eval", "--checkpoint", tmp_path / "none.json", "--data", clean, "--out", tmp_path / "e") == 2
        assert "checkpoint not found" in capsys.readouterr().err


class TestTraffic:
    def test_synthesize_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert run("traffic", "--synthesize", 3, "--seed", 3, "--out", tmp_path / d) == 0
        assert files(tmp_path / "a") == files(tmp_path / "b")
        summary = json.loads((tmp_path / "a/summary.json").read_text())
        assert summary["count"] == summary["true_count"] == 3

    def test_scene_directory_rerun(self, tmp_path):
        write_scene(synthesize_scene(SceneParams(n_vehicles=2, seed=1, lanes=1, width=200)), tmp_path / "scene")
        for d in ("a", "b"):
            assert run("traffic", "--scene", tmp_path / "scene", "--out", tmp_path / d) == 0
        assert (tmp_path / "a/stamps.csv").read_bytes() == (tmp_path / "b/stamps.csv").read_bytes()
        assert json.loads((tmp_path / "a/summary.json").read_text())["count"] == 2

    def test_empty_scene(self, tmp_path):
        scene = tmp_path / "scene"
        (scene / "frames").mkdir(parents=True)
        (scene / "scene.json").write_text(json.dumps({"zone": {"row0": 0, "col0": 0, "row1": 9, "col1": 9}}))
        assert run("traffic", "--scene", scene, "--out", tmp_path / "o") == 0
        assert json.loads((tmp_path / "o/summary.json").read_text())["count"] == 0

    def test_malformed_csv(self, tmp_path, capsys):
        scene = tmp_path / "scene"
        (scene / "frames").mkdir(parents=True)
        (scene / "scene.json").write_text(json.dumps({"zone": {"row0": 0, "col0": 0, "row1": 9, "col1": 9}}))
        (scene / "trajectories.csv").write_text("t,id,x,y\n0,0,1,1\n1,0,oops,2\n")
        assert run("traffic", "--scene", scene, "--out", tmp_path / "o") == 2
        assert ":3:" in capsys.readouterr().err

    def test_needs_one_source(self, tmp_path, capsys):
        assert run("traffic", "--out", tmp_path / "o") == 2
        assert "exactly one" in capsys.readouterr().err

    def test_bad_zone(self, tmp_path, capsys):
        assert run("traffic", "--synthesize", 1, "--zone", "1,2,3", "--out", tmp_path / "o") == 2
        assert "--zone" in capsys.readouterr().err


class TestPostproc:
    def test_maps_to_boxes(self, tmp_path):
        labels = np.full((8, 30), EMPTY)
        labels[2:6, 2:6] = char_index("a")
        labels[2:6, 20:24] = char_index("b")
        maps = np.full((N_CLASSES, 8, 30), 0.1 / (N_CLASSES - 1))
        maps[labels, np.arange(8)[:, None], np.arange(30)] = 0.9
        (tmp_path / "maps.txt").write_text(format_tensor(maps))
        assert run("postproc", "--maps", tmp_path / "maps.txt", "--out", tmp_path / "o") == 0
        assert (tmp_path / "o/words.txt").read_text().split() == ["a", "b"]
        assert len((tmp_path / "o/boxes.csv").read_text().splitlines()) == 3


class TestHelp:
    @pytest.mark.parametrize("argv", [["--help"], ["gen-data", "--help"], ["train", "--help"],
                                      ["eval", "--help"], ["traffic", "--help"], ["postproc", "--help"]])
    def test_help_exits_zero(self, argv, capsys):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_no_command(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
