"""Command-line entry point: ``charcorrect {gen-data,train,eval,traffic,postproc}``.

Every command writes ``config.json`` (the effective parameters) into its
output directory. Values come from built-in defaults, then ``--config``
(a JSON object), then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corrupt, evaluation, postproc, seq2seq, traffic
from ._validation import DivergenceError, GeometryError, ShapeError
from .classify import TrainingHyper
from .cnn import predict_word

log = logging.getLogger("charcorrect")

EXIT_ERROR = 2

DEFAULTS = {
    "gen-data": {
        "seed": 0, "corpus": None, "n_per_word": 20, "n_test_per_word": 2, "psub": 0.10, "pins": 0.05,
        "pdel": 0.05, "confidence": 0.8, "confusion_share": 0.75, "holdout": None, "holdout_n": 0,
        "context_min": seq2seq.DEFAULT_CONTEXT,
    },
    "train": {
        "seed": 0, "data": None, "arch": seq2seq.DEFAULT_ARCH, "lr": seq2seq.RECIPE_LR,
        "momentum": 0.9, "batch_size": seq2seq.RECIPE_BATCH, "epochs": seq2seq.RECIPE_EPOCHS,
        "clip_norm": seq2seq.RECIPE_CLIP,
        "onehot": False, "validate": True,
    },
    "eval": {"seed": 0, "checkpoint": None, "data": None, "onehot": None},
    "traffic": {
        "seed": 0, "scene": None, "synthesize": None, "zone": None, "rect_height": 64, "rect_width": 96,
        "c_max": 100, "hue_tol": 0.05, "angle_thresh": 0.35, "dist_thresh": 80.0, "parallel_thresh": 4.0,
        "save_scene": False,
    },
    "postproc": {"seed": 0, "maps": None, "nms": postproc.NMS_THRESHOLD},
}

REQUIRED = {"train": ["data"], "eval": ["checkpoint", "data"], "postproc": ["maps"]}


class CliError(Exception):
    pass


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _effective(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.config}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise CliError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise CliError(f"{args.config}: unknown keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in REQUIRED.get(command, []):
        if cfg[key] is None:
            raise CliError(f"{command}: --{key.replace('_', '-')} is required")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: dict, out: Path) -> int:
    corpus = _existing(cfg["corpus"], "corpus") if cfg["corpus"] else None
    words = corrupt.load_corpus(corpus)
    holdout: list[str] = []
    if cfg["holdout"]:
        holdout = corrupt.load_corpus(_existing(cfg["holdout"], "holdout list"))
    elif cfg["holdout_n"]:
        holdout = corrupt.choose_holdout(words, cfg["holdout_n"], cfg["seed"])
    params = corrupt.ChannelParams(cfg["psub"], cfg["pins"], cfg["pdel"], cfg["confidence"],
                                   cfg["confusion_share"], seed=cfg["seed"])
    _, _, manifest = corrupt.gen_dataset(words, cfg["n_per_word"], None, params, holdout, out,
                                         cfg["n_test_per_word"], cfg["context_min"])
    _write_json(out / "config.json", cfg)
    c = manifest["counts"]
    print(f"wrote {c['train']} train and {c['test']} test records for {c['words']} words to {out}")
    return 0


def _dataset_paths(data) -> tuple[Path, Path | None]:
    p = _existing(data, "dataset")
    if p.is_dir():
        train = _existing(p / "train.jsonl", "training file")
        test = p / "test.jsonl"
        return train, (test if test.exists() else None)
    return p, None


def cmd_train(cfg: dict, out: Path) -> int:
    try:
        spec = seq2seq.get_architecture(cfg["arch"])
    except KeyError as exc:
        raise CliError(exc.args[0]) from None
    train_path, test_path = _dataset_paths(cfg["data"])
    X, Y, _ = seq2seq.stack_pairs(seq2seq.read_dataset(train_path))
    if len(X) == 0:
        raise CliError(f"{train_path}: no training records")
    validation = None
    if cfg["validate"] and test_path is not None:
        Xt, Yt, _ = seq2seq.stack_pairs(seq2seq.read_dataset(test_path))
        if cfg["onehot"]:
            Xt = seq2seq.onehot_maps(Xt)
        validation = (Xt, Yt)
    if cfg["onehot"]:
        X = seq2seq.onehot_maps(X)
    model = seq2seq.CorrectorModel.init(spec, cfg["seed"])
    hyper = TrainingHyper(cfg["lr"], cfg["momentum"], cfg["batch_size"])
    history = seq2seq.train_corrector(model, X, Y, hyper, cfg["epochs"], cfg["seed"], validation,
                                      callback=lambda r: log.info("epoch %d loss %.4f", r.epoch, r.train_loss),
                                      clip_norm=cfg["clip_norm"] or None)
    seq2seq.save_checkpoint(model, out / "checkpoint.json", {"onehot_inputs": bool(cfg["onehot"])})
    rows = [[r.epoch, repr(r.train_loss), "" if r.val_seq_accuracy is None else repr(r.val_seq_accuracy)]
            for r in history]
    (out / "history.csv").write_text(evaluation.rows_to_csv(["epoch", "train_loss", "val_seq_accuracy"], rows))
    _write_json(out / "config.json", cfg)
    last = history[-1]
    val = "" if last.val_seq_accuracy is None else f" val_seq_accuracy {last.val_seq_accuracy:.4f}"
    print(f"trained {spec.name} for {last.epoch} epochs: train_loss {last.train_loss:.4f}{val}")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    model, mcfg = seq2seq.load_checkpoint(_existing(cfg["checkpoint"], "checkpoint"))
    data = _existing(cfg["data"], "test set")
    if data.is_dir():
        data = _existing(data / "test.jsonl", "test file")
    pairs = seq2seq.read_dataset(data)
    if not pairs:
        raise CliError(f"{data}: no records")
    X, Y, words = seq2seq.stack_pairs(pairs)
    onehot = mcfg.get("onehot_inputs", False) if cfg["onehot"] is None else cfg["onehot"]
    before = [predict_word(m) for m in X]
    after = seq2seq.correct(model, seq2seq.onehot_maps(X) if onehot else X)
    before_pairs = list(zip(before, words))
    after_pairs = list(zip(after, words))

    b_cnn, b_lstm = evaluation.bucket_report(before_pairs), evaluation.bucket_report(after_pairs)
    header = ["system", *evaluation.BUCKETS, "total"]
    rows = [["CNN", *b_cnn.as_row().values()], ["LSTM", *b_lstm.as_row().values()]]
    (out / "buckets.csv").write_text(evaluation.rows_to_csv(header, rows))

    l_cnn, l_lstm = evaluation.lcs_metrics(before_pairs), evaluation.lcs_metrics(after_pairs)
    lrows = [[name, repr(r.precision), repr(r.recall), repr(r.f_measure), r.tp, r.fp, r.fn]
             for name, r in (("CNN", l_cnn), ("LSTM", l_lstm))]
    (out / "lcs.csv").write_text(
        evaluation.rows_to_csv(["system", "precision", "recall", "f_measure", "tp", "fp", "fn"], lrows))

    fixed, broken = evaluation.diff_report(before_pairs, after_pairs)
    for name, entries in (("corrected", fixed), ("broken", broken)):
        h, r = evaluation.diff_rows(entries)
        (out / f"diff_{name}.csv").write_text(evaluation.rows_to_csv(h, r))
        (out / f"diff_{name}.txt").write_text(evaluation.text_table(h, r))
    (out / "predictions.csv").write_text(
        evaluation.rows_to_csv(["ground_truth", "cnn", "lstm"], [[w, b, a] for w, b, a in zip(words, before, after)]))

    seq_acc = seq2seq.sequence_accuracy(model, seq2seq.onehot_maps(X) if onehot else X, Y)
    summary = (f"sequence_accuracy {seq_acc:.4f} baseline_word_accuracy {b_cnn.PM / 100:.4f} "
               f"corrected {len(fixed)} broken {len(broken)} n {len(words)}")
    (out / "summary.txt").write_text(summary + "\n")
    _write_json(out / "config.json", cfg)
    print(summary)
    return 0


def _parse_zone(text) -> traffic.Rect:
    if isinstance(text, (list, tuple)):
        values = list(text)
    else:
        try:
            values = [int(v) for v in str(text).split(",")]
        except ValueError:
            raise CliError(f"--zone expects row0,col0,row1,col1 integers, got {text!r}") from None
    if len(values) != 4:
        raise CliError("--zone expects four integers row0,col0,row1,col1")
    return traffic.Rect(*values)


def cmd_traffic(cfg: dict, out: Path) -> int:
    if (cfg["scene"] is None) == (cfg["synthesize"] is None):
        raise CliError("traffic needs exactly one of --scene DIR or --synthesize K")
    if cfg["synthesize"] is not None:
        if cfg["synthesize"] < 0:
            raise CliError("--synthesize needs a non-negative vehicle count")
        scene = traffic.synthesize_scene(traffic.SceneParams(n_vehicles=cfg["synthesize"], seed=cfg["seed"]))
        if cfg["save_scene"]:
            traffic.write_scene(scene, out / "scene")
    else:
        scene = traffic.read_scene(_existing(cfg["scene"], "scene directory"))
    zone = _parse_zone(cfg["zone"]) if cfg["zone"] is not None else scene.zone
    params = traffic.CountParams(
        traffic.ClusterParams(cfg["angle_thresh"], cfg["dist_thresh"], cfg["parallel_thresh"]),
        cfg["rect_height"], cfg["rect_width"], cfg["c_max"], cfg["hue_tol"])
    result = traffic.count_vehicles(scene.trajectories, scene.frames, zone, params)
    (out / "stamps.csv").write_text(result.stamps_csv())
    summary = {"count": result.count, "true_count": scene.true_count, "clusters": len(result.clusters),
               "frames": len(scene.frames), "zone": [zone.row0, zone.col0, zone.row1, zone.col1]}
    _write_json(out / "summary.json", summary)
    _write_json(out / "config.json", cfg)
    truth = "" if scene.true_count is None else f" (true {scene.true_count})"
    print(f"count {result.count}{truth}")
    return 0


def cmd_postproc(cfg: dict, out: Path) -> int:
    maps = postproc.read_pixel_maps(_existing(cfg["maps"], "maps file"))
    words = postproc.detect_words(maps, cfg["nms"])
    postproc.write_boxes_csv(out / "boxes.csv", words)
    (out / "words.txt").write_text("".join(w.text + "\n" for w in words))
    _write_json(out / "config.json", cfg)
    print(f"{len(words)} words, {sum(len(w.chars) for w in words)} characters")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "traffic": cmd_traffic, "postproc": cmd_postproc}


# ---------------------------------------------------------------------------
# argument parsing

def _bool_flag(p, name, help_text):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="charcorrect", description="Character-sequence correction and vehicle counting experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, help="run seed (default 0)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON file of parameter overrides")

    g = sub.add_parser("gen-data", help="render a corrupted train/test split")
    common(g)
    g.add_argument("--corpus", help="word list, one per line (default: bundled 1000 words)")
    g.add_argument("--n-per-word", type=int)
    g.add_argument("--n-test-per-word", type=int)
    g.add_argument("--psub", type=float, help="substitution probability per character")
    g.add_argument("--pins", type=float, help="insertion probability per character")
    g.add_argument("--pdel", type=float, help="deletion probability per character")
    g.add_argument("--confidence", type=float, help="probability of the rendered symbol")
    g.add_argument("--confusion-share", type=float)
    g.add_argument("--holdout", help="word list excluded from the train split")
    g.add_argument("--holdout-n", type=int, help="hold out this many seeded random corpus words")
    g.add_argument("--context-min", type=int)

    t = sub.add_parser("train", help="train a BLSTM corrector")
    common(t)
    t.add_argument("--data", help="dataset directory (train.jsonl [+ test.jsonl]) or a JSONL file")
    t.add_argument("--arch", help=f"architecture name (default {seq2seq.DEFAULT_ARCH})")
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--clip-norm", type=float, help="gradient norm cap per minibatch (0 disables)")
    _bool_flag(t, "onehot", "feed argmax one-hot rows instead of raw probabilities")
    _bool_flag(t, "validate", "score test.jsonl after every epoch")

    e = sub.add_parser("eval", help="score a checkpoint against a test set")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="test JSONL file or dataset directory")
    _bool_flag(e, "onehot", "override the checkpoint's input mode")

    r = sub.add_parser("traffic", help="count vehicles crossing a zone")
    common(r)
    r.add_argument("--scene", help="directory with scene.json, trajectories.csv, frames/*.pfm")
    r.add_argument("--synthesize", type=int, metavar="K", help="generate a scene with K vehicles")
    r.add_argument("--zone", help="row0,col0,row1,col1 (inclusive)")
    r.add_argument("--rect-height", type=int)
    r.add_argument("--rect-width", type=int)
    r.add_argument("--c-max", type=int)
    r.add_argument("--hue-tol", type=float)
    r.add_argument("--angle-thresh", type=float)
    r.add_argument("--dist-thresh", type=float)
    r.add_argument("--parallel-thresh", type=float)
    _bool_flag(r, "save-scene", "also write the synthesized scene files")

    q = sub.add_parser("postproc", help="pixel probability maps to character and word boxes")
    common(q)
    q.add_argument("--maps", help="TENSOR 3 37 H W file")
    q.add_argument("--nms", type=float, help="suppression overlap threshold")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _effective(args.command, args)
        return COMMANDS[args.command](cfg, _out_dir(args))
    except (CliError, ValueError, ShapeError, GeometryError, DivergenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
