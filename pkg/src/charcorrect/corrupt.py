"""Synthetic corruption channel: words -> noisy character probability maps.

Each character of the clean word independently undergoes one of

* substitution (probability ``p_sub``) by a visually confusable symbol, or a
  uniformly drawn one if the character has no listed confusables,
* deletion (``p_del``),
* insertion of a spurious symbol after it (``p_ins``),

and the resulting symbol string is right-justified into 23 rows. Each row
puts ``confidence`` on the realized symbol; the remainder goes partly to the
symbol's confusables and partly to uniform noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._rng import substream
from .alphabet import EMPTY, FRAME_LENGTH, N_CLASSES, SYMBOLS, char_index, normalize_word
from .seq2seq import DEFAULT_CONTEXT, PaddedPair, encode_target, write_dataset

DEFAULT_PAIRS = [("g", "9"), ("0", "o"), ("8", "3"), ("i", "j"), ("4", "a"), ("s", "5"), ("l", "1")]


@dataclass
class ConfusionTable:
    """Per-symbol confusables with positive weights. The empty class is never confusable."""

    entries: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def __post_init__(self):
        for ch, conf in self.entries.items():
            char_index(ch)
            for other, weight in conf:
                char_index(other)
                if weight <= 0:
                    raise ValueError(f"confusion weight for {ch!r}->{other!r} must be positive")

    @classmethod
    def from_pairs(cls, pairs, weight: float = 1.0) -> "ConfusionTable":
        entries: dict[str, list[tuple[str, float]]] = {}
        for a, b in pairs:
            entries.setdefault(a, []).append((b, weight))
            entries.setdefault(b, []).append((a, weight))
        return cls(entries)

    @classmethod
    def default(cls) -> "ConfusionTable":
        return cls.from_pairs(DEFAULT_PAIRS)

    def confusables(self, ch: str) -> list[tuple[str, float]]:
        return self.entries.get(ch, [])

    def insertion_pool(self) -> list[str]:
        return sorted(set(self.entries) | set("0123456789"))

    def to_json(self) -> dict:
        return {k: [[o, w] for o, w in v] for k, v in sorted(self.entries.items())}


@dataclass
class ChannelParams:
    p_sub: float = 0.10
    p_ins: float = 0.05
    p_del: float = 0.05
    confidence: float = 0.8
    confusion_share: float = 0.75  # fraction of (1 - confidence) given to confusables
    seed: int = 0

    def __post_init__(self):
        for name in ("p_sub", "p_ins", "p_del", "confusion_share"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.p_sub + self.p_ins + self.p_del > 1:
            raise ValueError("p_sub + p_ins + p_del must not exceed 1")
        if not 0 < self.confidence <= 1:
            raise ValueError("confidence must lie in (0, 1]")


@dataclass(frozen=True)
class Edit:
    kind: str  # "sub", "del" or "ins"
    position: int  # index into the clean word
    old: str
    new: str


def sample_edits(word: str, table: ConfusionTable, params: ChannelParams, rng) -> list[Edit]:
    edits = []
    pool = table.insertion_pool()
    thresholds = np.cumsum([params.p_sub, params.p_del, params.p_ins])
    for pos, ch in enumerate(word):
        u = rng.random()
        if u < thresholds[0]:
            conf = table.confusables(ch)
            if conf:
                weights = np.array([w for _, w in conf])
                new = conf[rng.choice(len(conf), p=weights / weights.sum())][0]
            else:
                others = SYMBOLS.replace(ch, "")
                new = others[rng.integers(len(others))]
            edits.append(Edit("sub", pos, ch, new))
        elif u < thresholds[1]:
            edits.append(Edit("del", pos, ch, ""))
        elif u < thresholds[2]:
            edits.append(Edit("ins", pos, "", pool[rng.integers(len(pool))]))
    return edits


def apply_edits(word: str, edits) -> str:
    """Replay an edit log against the clean word."""
    by_pos: dict[int, list[Edit]] = {}
    for e in edits:
        by_pos.setdefault(e.position, []).append(e)
    out = []
    for pos, ch in enumerate(word):
        kept = ch
        inserted = ""
        for e in by_pos.get(pos, []):
            if e.kind == "sub":
                kept = e.new
            elif e.kind == "del":
                kept = ""
            elif e.kind == "ins":
                inserted += e.new
            else:
                raise ValueError(f"unknown edit kind {e.kind!r}")
        out.append(kept + inserted)
    return "".join(out)


def render(symbols: str, table: ConfusionTable, confidence: float = 1.0, confusion_share: float = 0.75,
           frame_length: int = FRAME_LENGTH) -> np.ndarray:
    """Right-justified soft rendering of a symbol string as ``frame_length x 37`` rows."""
    if len(symbols) > frame_length:
        raise ValueError(f"{len(symbols)} symbols overflow {frame_length} rows")
    rest = 1.0 - confidence
    rows = np.empty((frame_length, N_CLASSES))
    pad = frame_length - len(symbols)
    for r in range(frame_length):
        row = np.zeros(N_CLASSES)
        if r < pad:
            idx, conf = EMPTY, []
        else:
            ch = symbols[r - pad]
            idx, conf = char_index(ch), table.confusables(ch)
        row[idx] = confidence
        if rest > 0:
            to_conf = rest * confusion_share if conf else 0.0
            if conf:
                total = sum(w for _, w in conf)
                for other, w in conf:
                    row[char_index(other)] += to_conf * w / total
            row += (rest - to_conf) / N_CLASSES
        rows[r] = row
    return rows


def corrupt_word(word: str, table: ConfusionTable | None = None, params: ChannelParams | None = None,
                 rng=None, edits=None) -> tuple[np.ndarray, list[Edit]]:
    """Corrupt ``word`` and render it.

    Pass ``edits`` to replay a fixed edit log instead of sampling one.
    Raises ValueError when insertions push the string past 23 rows.
    """
    table = table or ConfusionTable.default()
    params = params or ChannelParams()
    word = normalize_word(word)
    if edits is None:
        rng = np.random.default_rng(params.seed if rng is None else rng)
        edits = sample_edits(word, table, params, rng)
    noisy = apply_edits(word, edits)
    if len(noisy) > FRAME_LENGTH:
        raise ValueError(f"corrupted form of {word!r} has {len(noisy)} symbols (> {FRAME_LENGTH})")
    return render(noisy, table, params.confidence, params.confusion_share), list(edits)


# ---------------------------------------------------------------------------
# corpora and datasets

def load_corpus(path=None) -> list[str]:
    """Words from ``path`` (one per line), or the bundled 1000-word list."""
    if path is None:
        text = resources.files("charcorrect").joinpath("data/words.txt").read_text()
    else:
        text = Path(path).read_text()
    words = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            words.append(normalize_word(line))
        except ValueError as exc:
            raise ValueError(f"{path or 'bundled corpus'}:{lineno}: {exc}") from None
    return words


def choose_holdout(words, n: int, seed: int) -> list[str]:
    """``n`` distinct corpus words drawn from the seed's ``holdout`` sub-stream, sorted."""
    words = list(dict.fromkeys(words))
    if not 0 <= n < len(words):
        raise ValueError(f"holdout size {n} must lie in [0, {len(words)})")
    pick = substream(seed, "holdout").choice(len(words), size=n, replace=False)
    return sorted(words[i] for i in pick)


def make_pairs(words, n_per_word: int, table: ConfusionTable, params: ChannelParams, split: str,
               context_min: int = DEFAULT_CONTEXT) -> list[PaddedPair]:
    """``n_per_word`` corrupted renderings of every word; each word draws from its own seed."""
    pairs = []
    for word in words:
        rng = substream(params.seed, f"data:{split}:{word}")
        target = encode_target(word, context_min=context_min)
        for _ in range(n_per_word):
            maps, _ = corrupt_word(word, table, params, rng)
            pairs.append(PaddedPair(word, target, maps))
    return pairs


def gen_dataset(corpus, n_per_word: int, table: ConfusionTable | None, params: ChannelParams,
                holdout=(), out_dir=None, n_test_per_word: int = 1,
                context_min: int = DEFAULT_CONTEXT) -> tuple[list[PaddedPair], list[PaddedPair], dict]:
    """Build a train/test split.

    Train holds ``n_per_word`` samples of every non-holdout word; test holds
    ``n_test_per_word`` fresh samples of every corpus word, so holdout words
    appear only in test. With ``out_dir`` the split is written as
    ``train.jsonl``, ``test.jsonl`` and ``manifest.json``.
    """
    table = table or ConfusionTable.default()
    words = load_corpus(corpus) if isinstance(corpus, (str, Path)) else [normalize_word(w) for w in corpus]
    if not words:
        raise ValueError("empty corpus")
    words = list(dict.fromkeys(words))
    holdout = [normalize_word(w) for w in holdout]
    missing = sorted(set(holdout) - set(words))
    if missing:
        raise ValueError(f"holdout words not in corpus: {missing[:5]}")
    held = set(holdout)
    train_words = [w for w in words if w not in held]
    if not train_words:
        raise ValueError("holdout covers the whole corpus; nothing left to train on")
    train = make_pairs(train_words, n_per_word, table, params, "train", context_min)
    test = make_pairs(words, n_test_per_word, table, params, "test", context_min)
    manifest = {
        "seed": params.seed,
        "params": asdict(params),
        "confusion_table": table.to_json(),
        "context_min": context_min,
        "n_per_word": n_per_word,
        "n_test_per_word": n_test_per_word,
        "counts": {"words": len(words), "holdout": len(held), "train": len(train), "test": len(test)},
        "holdout": sorted(held),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(out / "train.jsonl", train)
        write_dataset(out / "test.jsonl", test)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return train, test, manifest
