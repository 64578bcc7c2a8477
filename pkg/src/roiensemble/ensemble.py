"""Sum-of-probabilities fusion: the predicted class is argmax of the summed softmax outputs."""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np

from .errors import DataInconsistencyError, IncompatibleEnsembleError, InvalidArgumentError, ShapeError


def fuse_sum(probs: Sequence) -> np.ndarray:
    """Elementwise sum of per-model probability vectors (or [N, K] batches).

    Each entry is summed over its values in sorted order, so the result is
    bit-identical under any reordering of the inputs.
    """
    probs = [np.asarray(p, dtype=np.float64) for p in probs]
    if not probs:
        raise InvalidArgumentError("fuse_sum needs at least one probability vector")
    shape = probs[0].shape
    for p in probs[1:]:
        if p.shape != shape:
            raise ShapeError(f"fuse_sum: probability shapes {shape} and {p.shape} differ")
    stacked = np.sort(np.stack(probs), axis=0)
    total = stacked[0].copy()
    for p in stacked[1:]:
        total += p
    return total


def argmax_class(scores) -> int | np.ndarray:
    """Index of the largest score; ties go to the lowest index.

    A 2-d array is treated as one score vector per row.
    """
    scores = np.asarray(scores)
    if scores.shape[-1] < 1:
        raise ShapeError("argmax_class: empty score vector")
    # np.argmax returns the first maximal index, which is the tie rule we want
    out = np.argmax(scores, axis=-1)
    return int(out) if scores.ndim == 1 else out


def predict_ensemble(models: Sequence, batch, return_scores: bool = False):
    """Per-sample argmax of the summed softmax outputs of ``models``."""
    models = list(models)
    if not models:
        raise InvalidArgumentError("predict_ensemble needs at least one model")
    first = models[0]
    for m in models[1:]:
        if m.num_classes != first.num_classes:
            raise IncompatibleEnsembleError(
                f"{m.family} predicts {m.num_classes} classes, {first.family} predicts {first.num_classes}"
            )
        if (m.resolution, m.in_channels) != (first.resolution, first.in_channels):
            raise IncompatibleEnsembleError(
                f"{m.family} expects {m.in_channels}x{m.resolution}x{m.resolution} input, "
                f"{first.family} expects {first.in_channels}x{first.resolution}x{first.resolution}"
            )
    batch = np.asarray(batch, dtype=np.float64)
    for m in models:
        m.eval()
    scores = fuse_sum([m.predict_proba(batch) for m in models])
    preds = argmax_class(scores)
    return (preds, scores) if return_scores else preds


# ------------------------------------------------------ offline CSV fusion


def write_prob_csv(path, sample_ids: Sequence[str], probs: np.ndarray) -> None:
    probs = np.asarray(probs)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + [f"p{k}" for k in range(probs.shape[1])])
        for sid, row in zip(sample_ids, probs):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_prob_csv(path):
    """Return (sample_ids, [N, K] probabilities) from ``sample_id,p0,...`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataInconsistencyError(f"{path}: empty probability file")
    header = rows[0]
    k = len(header) - 1
    if k < 1 or header[0] != "sample_id" or header[1:] != [f"p{i}" for i in range(k)]:
        raise DataInconsistencyError(f"{path}: header must be sample_id,p0,...,p{{K-1}}, got {','.join(header)}")
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != k + 1:
            raise DataInconsistencyError(f"{path}:{lineno}: expected {k + 1} fields, got {len(row)}")
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError:
            raise DataInconsistencyError(f"{path}:{lineno}: non-numeric probability") from None
        ids.append(row[0])
    return ids, np.array(values, dtype=np.float64).reshape(len(ids), k)


def fuse_prob_files(paths: Sequence) -> tuple:
    """Fuse probability CSVs produced elsewhere; returns (sample_ids, predictions, scores)."""
    if not paths:
        raise InvalidArgumentError("need at least one probability file")
    tables = [read_prob_csv(p) for p in paths]
    ids0, p0 = tables[0]
    for path, (ids, p) in zip(paths[1:], tables[1:]):
        if p.shape[1] != p0.shape[1]:
            raise DataInconsistencyError(f"{path}: {p.shape[1]} classes, {paths[0]} has {p0.shape[1]}")
        for i in range(max(len(ids), len(ids0))):
            a = ids0[i] if i < len(ids0) else None
            b = ids[i] if i < len(ids) else None
            if a != b:
                bad = b if b is not None else a
                raise DataInconsistencyError(f"{path}: sample id mismatch at row {i + 1}: {bad!r}")
    scores = fuse_sum([p for _, p in tables])
    return ids0, argmax_class(scores), scores


def write_predictions_csv(path, sample_ids, predictions) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "prediction"])
        for sid, p in zip(sample_ids, np.atleast_1d(predictions)):
            w.writerow([sid, int(p)])
