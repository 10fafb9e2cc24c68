"""Land-use classification from weekly traffic signatures.

A cell's signature is its median call+text volume per hour of the week,
normalized to unit sum. Signatures cluster under the correlation distance
(1 - Pearson) with a classical agglomerative scheme; semantic naming of the
anonymous clusters is an external input.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .errors import InputError, InsufficientDataError
from .metadata import VolumeSeries
from .timebase import hour_of_week, week_index

LAND_USES = ("residential", "office", "touristic", "university", "shopping")
SIGNATURE_KINDS = ("call_in", "call_out", "sms_in", "sms_out")
HOURS_PER_WEEK = 168


@dataclass(frozen=True)
class WeeklySignature:
    cell_id: str
    vector: np.ndarray  # 168 hourly medians, normalized to unit sum

    def __post_init__(self):
        if self.vector.shape != (HOURS_PER_WEEK,):
            raise InputError(f"signature for {self.cell_id!r} must have {HOURS_PER_WEEK} entries")


def weekly_signature(volumes: VolumeSeries, cell_id: str) -> WeeklySignature:
    """Median-over-weeks hourly call+text profile of one cell, unit-normalized."""
    try:
        ci = volumes.cell_ids.index(cell_id)
    except ValueError:
        raise InputError(f"unknown cell id {cell_id!r}") from None
    how = hour_of_week(volumes.slot_starts)
    week = week_index(volumes.slot_starts)
    weeks = np.unique(week)
    if len(weeks) < 2:
        raise InsufficientDataError("weekly signatures need at least 2 weeks of data")
    totals = np.zeros(volumes.n_slots)
    for kind in SIGNATURE_KINDS:
        totals += volumes.values[kind][ci]
    if totals.sum() == 0:
        raise InsufficientDataError(f"no call/text data for cell {cell_id!r}")

    vector = np.zeros(HOURS_PER_WEEK)
    week_pos = np.searchsorted(weeks, week)
    # hourly sums per (week, hour-of-week); median taken over the weeks that
    # actually cover each hour, so partial weeks at the edges do not bias it
    sums = np.zeros((len(weeks), HOURS_PER_WEEK))
    seen = np.zeros((len(weeks), HOURS_PER_WEEK), dtype=bool)
    np.add.at(sums, (week_pos, how), totals)
    seen[week_pos, how] = True
    for h in range(HOURS_PER_WEEK):
        covered = seen[:, h]
        if np.any(covered):
            vector[h] = np.median(sums[covered, h])
    total = vector.sum()
    if total > 0:
        vector = vector / total
    return WeeklySignature(cell_id=cell_id, vector=vector)


@dataclass
class ClusterResult:
    labels: dict[str, int]  # cell id -> cluster index (0..k-1)
    characteristic: np.ndarray  # (k, 168) per-cluster mean signatures
    constant_cells: tuple[str, ...]  # flat signatures assigned by nearest neighbor


def correlation_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - Pearson(a, b); lies in [0, 2], zero iff perfectly correlated."""
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(np.dot(ac, ac))
    vb = float(np.dot(bc, bc))
    if va == 0.0 or vb == 0.0:
        raise InputError("correlation distance undefined for a constant signature")
    return 1.0 - float(np.dot(ac, bc) / np.sqrt(va * vb))


def cluster_signatures(
    signatures: Sequence[WeeklySignature],
    k: int,
    method: str = "average",
) -> ClusterResult:
    """Agglomerative clustering under the correlation distance, cut at k.

    Constant signatures (undefined correlation) are flagged and attached to the
    cluster of their nearest non-constant neighbor by Euclidean distance.
    """
    if k < 1:
        raise InputError("cluster count must be positive")
    X = np.vstack([s.vector for s in signatures])
    ids = [s.cell_id for s in signatures]
    centered = X - X.mean(axis=1, keepdims=True)
    scale = np.linalg.norm(centered, axis=1)
    ok = scale > 0
    n_ok = int(np.count_nonzero(ok))
    if n_ok < k:
        raise InsufficientDataError(f"need at least {k} non-constant signatures, got {n_ok}")

    Xc = centered[ok] / scale[ok, None]
    corr = np.clip(Xc @ Xc.T, -1.0, 1.0)
    dist = np.clip(1.0 - corr, 0.0, None)
    np.fill_diagonal(dist, 0.0)
    if n_ok == 1:
        raw = np.array([1])
    else:
        Z = linkage(squareform(dist, checks=False), method=method)
        raw = fcluster(Z, t=k, criterion="maxclust")

    # relabel clusters by order of first appearance for reproducible ids
    remap: dict[int, int] = {}
    for r in raw:
        if r not in remap:
            remap[r] = len(remap)
    ok_ids = [cid for cid, good in zip(ids, ok) if good]
    labels: dict[str, int] = {cid: remap[r] for cid, r in zip(ok_ids, raw)}

    constant_cells: list[str] = []
    ok_X = X[ok]
    for cid, vec, good in zip(ids, X, ok):
        if good:
            continue
        nearest = int(np.argmin(np.linalg.norm(ok_X - vec, axis=1)))
        labels[cid] = labels[ok_ids[nearest]]
        constant_cells.append(cid)

    n_clusters = len(remap)
    characteristic = np.zeros((n_clusters, X.shape[1]))
    for cluster in range(n_clusters):
        members = [i for i, cid in enumerate(ids) if labels[cid] == cluster]
        characteristic[cluster] = X[members].mean(axis=0)
    return ClusterResult(
        labels={cid: labels[cid] for cid in ids},
        characteristic=characteristic,
        constant_cells=tuple(constant_cells),
    )


def classify_cells(
    signatures: Sequence[WeeklySignature],
    characteristic: Mapping[str, np.ndarray],
) -> tuple[dict[str, str], tuple[str, ...]]:
    """Label each cell with the best-correlated characteristic signature.

    Ties (and undefined correlations) resolve to the first label in the
    mapping order; such cells are reported as low-confidence.
    """
    if not characteristic:
        raise InputError("no characteristic signatures given")
    order = list(characteristic.keys())
    refs = np.vstack([characteristic[name] for name in order])
    refs_c = refs - refs.mean(axis=1, keepdims=True)
    ref_norm = np.linalg.norm(refs_c, axis=1)
    if np.any(ref_norm == 0):
        raise InputError("characteristic signatures must be non-constant")

    labels: dict[str, str] = {}
    low_confidence: list[str] = []
    for sig in signatures:
        vc = sig.vector - sig.vector.mean()
        norm = np.linalg.norm(vc)
        if norm == 0:
            labels[sig.cell_id] = order[0]
            low_confidence.append(sig.cell_id)
            continue
        scores = (refs_c @ vc) / (ref_norm * norm)
        best = int(np.argmax(scores))
        ties = np.flatnonzero(scores >= scores[best] - 1e-12)
        labels[sig.cell_id] = order[int(ties[0])]
        if len(ties) > 1:
            low_confidence.append(sig.cell_id)
    return labels, tuple(low_confidence)


# ---------------------------------------------------------------------------
# CSV interfaces

def write_labels_csv(path: str, labels: Mapping[str, str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "land_use"])
        for cid, label in labels.items():
            writer.writerow([cid, label])


def load_labels_csv(path: str) -> dict[str, str]:
    labels: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != ("cell_id", "land_use"):
            raise InputError(f"{path}: expected header cell_id,land_use")
        for row in reader:
            labels[row["cell_id"]] = row["land_use"]
    return labels


def write_signatures_csv(path: str, signatures: Sequence[WeeklySignature]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id"] + [f"h{i}" for i in range(HOURS_PER_WEEK)])
        for sig in signatures:
            writer.writerow([sig.cell_id] + [repr(float(v)) for v in sig.vector])


def load_signatures_csv(path: str) -> list[WeeklySignature]:
    out: list[WeeklySignature] = []
    expected = ["cell_id"] + [f"h{i}" for i in range(HOURS_PER_WEEK)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise InputError(f"{path}: expected signature header cell_id,h0..h167")
        for row in reader:
            out.append(WeeklySignature(cell_id=row[0], vector=np.array(row[1:], dtype=float)))
    return out
