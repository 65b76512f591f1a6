"""Recall@K in both retrieval directions and their mean.

Similarity matrices are ``I x T`` with ``T = I * c``; the ground-truth
captions of image ``i`` are ``[i*c, (i+1)*c)``. Rankings sort by descending
similarity and break ties by ascending index.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "KS",
    "RetrievalReport",
    "mean_recall",
    "rank_rows",
    "compute_report",
    "brute_force_oracle",
    "reports_to_csv",
    "reports_to_markdown",
    "read_report_csv",
]

KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    text_r: dict[int, float]  # image -> text
    image_r: dict[int, float]  # text -> image
    mr: float
    rankings: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_recalls(cls, text_r: Mapping[int, float], image_r: Mapping[int, float], rankings=None):
        text_r, image_r = dict(text_r), dict(image_r)
        return cls(text_r, image_r, mean_recall(text_r, image_r), rankings or {})

    def values(self) -> list[float]:
        """The six recalls in table order followed by mR."""
        return [self.text_r[k] for k in KS] + [self.image_r[k] for k in KS] + [self.mr]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RetrievalReport):
            return NotImplemented
        return self.values() == other.values()


def mean_recall(text_r: Mapping[int, float], image_r: Mapping[int, float]) -> float:
    vals = [float(text_r[k]) for k in KS] + [float(image_r[k]) for k in KS]
    return sum(vals) / len(vals)


def rank_rows(S: np.ndarray) -> np.ndarray:
    """Per-row candidate order: descending score, ascending index on ties."""
    return np.argsort(-S, axis=1, kind="stable")


def _check(S: np.ndarray, captions_per_image: int) -> tuple[int, int]:
    S = np.asarray(S)
    if S.ndim != 2:
        raise ValueError(f"similarity must be a matrix, got shape {S.shape}")
    n_img, n_txt = S.shape
    if captions_per_image < 1 or n_txt != n_img * captions_per_image:
        raise ValueError(
            f"{n_txt} captions is not {captions_per_image} per image for {n_img} images"
        )
    return n_img, n_txt


def compute_report(S, captions_per_image: int = 5) -> RetrievalReport:
    """R@1/5/10 (percent) for image->text and text->image retrieval."""
    S = np.asarray(S, dtype=np.float64)
    n_img, n_txt = _check(S, captions_per_image)
    c = captions_per_image

    i2t = rank_rows(S)
    # position of every candidate in each row's ranking
    pos_i2t = np.empty_like(i2t)
    np.put_along_axis(pos_i2t, i2t, np.arange(n_txt)[None, :], axis=1)
    best_i2t = pos_i2t.reshape(n_img, n_img, c)[np.arange(n_img), np.arange(n_img)].min(axis=1)

    t2i = rank_rows(S.T)
    pos_t2i = np.empty_like(t2i)
    np.put_along_axis(pos_t2i, t2i, np.arange(n_img)[None, :], axis=1)
    best_t2i = pos_t2i[np.arange(n_txt), np.arange(n_txt) // c]

    text_r = {k: 100.0 * int(np.count_nonzero(best_i2t < k)) / n_img for k in KS}
    image_r = {k: 100.0 * int(np.count_nonzero(best_t2i < k)) / n_txt for k in KS}
    return RetrievalReport.from_recalls(text_r, image_r, {"i2t": i2t, "t2i": t2i})


def brute_force_oracle(S, captions_per_image: int = 5) -> RetrievalReport:
    """Reference recalls from explicit per-query sorting. Slow; for tests."""
    S = np.asarray(S, dtype=np.float64)
    n_img, n_txt = _check(S, captions_per_image)
    c = captions_per_image
    rows = S.tolist()

    text_hits = {k: 0 for k in KS}
    for i in range(n_img):
        order = sorted(range(n_txt), key=lambda j: (-rows[i][j], j))
        for k in KS:
            if any(t // c == i for t in order[:k]):
                text_hits[k] += 1

    image_hits = {k: 0 for k in KS}
    for t in range(n_txt):
        order = sorted(range(n_img), key=lambda i: (-rows[i][t], i))
        for k in KS:
            if t // c in order[:k]:
                image_hits[k] += 1

    text_r = {k: 100.0 * text_hits[k] / n_img for k in KS}
    image_r = {k: 100.0 * image_hits[k] / n_txt for k in KS}
    return RetrievalReport.from_recalls(text_r, image_r)


# ------------------------------------------------------------------- output

_RECALL_COLUMNS = ["txt_R@1", "txt_R@5", "txt_R@10", "img_R@1", "img_R@5", "img_R@10", "mR"]


def reports_to_csv(rows: Iterable[tuple[Mapping[str, object], RetrievalReport]]) -> str:
    """One CSV line per configuration: its label columns, six recalls, mR."""
    rows = list(rows)
    label_cols: list[str] = []
    for labels, _ in rows:
        label_cols += [k for k in labels if k not in label_cols]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(label_cols + _RECALL_COLUMNS)
    for labels, rep in rows:
        writer.writerow([labels.get(k, "") for k in label_cols] + [f"{v:.2f}" for v in rep.values()])
    return buf.getvalue()


def read_report_csv(text: str) -> tuple[list[str], list[dict[str, str]]]:
    reader = csv.DictReader(io.StringIO(text))
    return list(reader.fieldnames or []), list(reader)


def _cell(v) -> str:
    if v is True:
        return "✓"
    if v is False:
        return "×"
    return str(v)


def reports_to_markdown(rows: Sequence[tuple[Mapping[str, object], RetrievalReport]]) -> str:
    """Markdown table: label columns, Text Retrieval R@1/5/10, Image Retrieval R@1/5/10, mR."""
    label_cols: list[str] = []
    for labels, _ in rows:
        label_cols += [k for k in labels if k not in label_cols]
    head = label_cols + ["Text R@1", "Text R@5", "Text R@10", "Image R@1", "Image R@5", "Image R@10", "mR"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for labels, rep in rows:
        cells = [_cell(labels.get(k, "")) for k in label_cols] + [f"{v:.2f}" for v in rep.values()]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
