"""Word-level and character-level scoring of predicted words against ground truth."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

BUCKETS = ("PM", "ED1", "ED2", "ED3", "EDgt3")


def _norm(word: str) -> str:
    return word.strip().lower()


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit-cost insertion, deletion and substitution."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lcs_length(a: str, b: str) -> int:
    prev = [0] * (len(b) + 1)
    for ca in a:
        cur = [0]
        for j, cb in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if ca == cb else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _check_pairs(pairs) -> list[tuple[str, str]]:
    pairs = [(_norm(p), _norm(g)) for p, g in pairs]
    if not pairs:
        raise ValueError("no prediction pairs to score")
    return pairs


@dataclass
class BucketReport:
    PM: float
    ED1: float
    ED2: float
    ED3: float
    EDgt3: float
    total: int

    def as_row(self) -> dict:
        return {b: getattr(self, b) for b in BUCKETS} | {"total": self.total}


def bucket_report(pairs) -> BucketReport:
    """Percentages (one decimal) of pairs at edit distance 0, 1, 2, 3 and > 3."""
    pairs = _check_pairs(pairs)
    counts = [0] * 5
    for pred, gt in pairs:
        counts[min(edit_distance(pred, gt), 4)] += 1
    pct = [round(100.0 * c / len(pairs), 1) for c in counts]
    return BucketReport(*pct, total=len(pairs))


@dataclass
class LcsReport:
    precision: float
    recall: float
    f_measure: float
    tp: int
    fp: int
    fn: int


def lcs_metrics(pairs) -> LcsReport:
    """Micro-averaged character precision/recall with the LCS as true positives.

    When every string is empty the ratios are undefined and reported as 0.
    """
    pairs = _check_pairs(pairs)
    tp = fp = fn = 0
    for pred, gt in pairs:
        common = lcs_length(pred, gt)
        tp += common
        fp += len(pred) - common
        fn += len(gt) - common
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return LcsReport(precision, recall, f, tp, fp, fn)


@dataclass
class DiffEntry:
    ground_truth: str
    before: str
    after: str


def diff_report(before_pairs, after_pairs) -> tuple[list[DiffEntry], list[DiffEntry]]:
    """Split into words fixed by the second system and words it broke.

    Both inputs are ``(prediction, ground_truth)`` sequences over the same
    ground truths in the same order.
    """
    before = [(_norm(p), _norm(g)) for p, g in before_pairs]
    after = [(_norm(p), _norm(g)) for p, g in after_pairs]
    if len(before) != len(after) or any(b[1] != a[1] for b, a in zip(before, after)):
        raise ValueError("before/after pairs are not aligned on the same ground truths")
    corrected, corrupted = [], []
    for (pb, gt), (pa, _) in zip(before, after):
        if pb != gt and pa == gt:
            corrected.append(DiffEntry(gt, pb, pa))
        elif pb == gt and pa != gt:
            corrupted.append(DiffEntry(gt, pb, pa))
    return corrected, corrupted


# ---------------------------------------------------------------------------
# rendering

def read_pairs_csv(path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"prediction", "ground_truth"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns prediction, ground_truth")
        return [(row["prediction"], row["ground_truth"]) for row in reader]


def write_pairs_csv(path, pairs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prediction", "ground_truth"])
        w.writerows(pairs)


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def text_table(header, rows) -> str:
    """Left-aligned plain-text table with tab-free padding."""
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return "\n".join(lines) + "\n"


def diff_rows(entries, before_name="CNN", after_name="LSTM"):
    header = ["Ground truth", before_name, after_name]
    return header, [[e.ground_truth, e.before, e.after] for e in entries]
