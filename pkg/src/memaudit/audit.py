"""Nearest-neighbour memorization audit in embedding space.

Every training sample gets a copy candidate (its nearest synthetic sample)
and a baseline (its nearest real validation sample). A copy threshold is
calibrated as a low quantile of the baseline distances, and the copy rate is
the fraction of training samples whose candidate lies below it. A pixel
space normalized cross-correlation detector is provided for comparison.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import volumes as vol

RECORD_FIELDS = ("train_id", "synth_id", "msd", "val_id", "val_msd", "is_copy", "truth")


class Table(NamedTuple):
    """Embeddings ``[N, d]`` with one id per row."""
    ids: list
    vectors: np.ndarray


def as_table(ids: Sequence[str], vectors) -> Table:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"embedding table must be 2-D, got shape {v.shape}")
    if len(ids) != len(v):
        raise ValueError(f"{len(ids)} ids for {len(v)} embeddings")
    return Table(list(ids), v)


def msd(e1, e2) -> float:
    """Mean over components of the squared difference."""
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def msd_matrix(queries, pool, block: int = 256) -> np.ndarray:
    """``[n, m]`` pairwise MSD by explicit differences, in row blocks."""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(pool, dtype=np.float64)
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ValueError(f"embedding dimensions differ: {q.shape} vs {p.shape}")
    out = np.empty((len(q), len(p)))
    for s in range(0, len(q), block):
        out[s:s + block] = np.mean((q[s:s + block, None, :] - p[None]) ** 2, axis=-1)
    return out


def _argmin_lex(row: np.ndarray, ids: Sequence[str]) -> int:
    best = row.min()
    ties = np.flatnonzero(row == best)
    if len(ties) == 1:
        return int(ties[0])
    return int(min(ties, key=lambda i: ids[i]))


def nearest(query, pool: Table) -> tuple[str, float]:
    """Exact nearest pool entry by MSD, ties to the lexicographically lowest id."""
    if len(pool.ids) == 0:
        raise ValueError("nearest-neighbour pool is empty")
    row = msd_matrix(np.asarray(query, dtype=np.float64)[None], pool.vectors)[0]
    i = _argmin_lex(row, pool.ids)
    return pool.ids[i], float(row[i])


def nearest_all(queries: Table, pool: Table) -> list[tuple[str, str, float]]:
    """``(query id, nearest pool id, msd)`` for every query row."""
    if len(queries.ids) == 0 or len(pool.ids) == 0:
        raise ValueError("both tables must be non-empty")
    d = msd_matrix(queries.vectors, pool.vectors)
    out = []
    for qid, row in zip(queries.ids, d):
        i = _argmin_lex(row, pool.ids)
        out.append((qid, pool.ids[i], float(row[i])))
    return out


def copy_candidates(train: Table, synth: Table) -> list[tuple[str, str, float]]:
    """Nearest synthetic sample of every training sample."""
    return nearest_all(train, synth)


def validation_baseline(train: Table, val: Table) -> list[tuple[str, str, float]]:
    """Nearest validation sample of every training sample."""
    return nearest_all(train, val)


def calibrate_threshold(baseline_msds: Iterable[float], q: float = 0.05) -> float:
    """Linearly interpolated ``q``-quantile of the validation-nearest MSDs."""
    v = np.asarray(list(baseline_msds), dtype=np.float64)
    if not 0 < q < 1:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")
    if v.size < 5:
        raise ValueError(f"threshold calibration needs at least 5 baseline values, got {v.size}")
    return float(np.quantile(v, q))


def _msd_of(r) -> float:
    return r.msd if isinstance(r, CandidateRecord) else float(r[2])


def copy_rate(records, tau: float) -> float:
    """Fraction of training samples whose candidate MSD is below ``tau``."""
    records = list(records)
    if not records:
        raise ValueError("copy_rate needs at least one record")
    return sum(_msd_of(r) < tau for r in records) / len(records)


def ncc(v1, v2) -> float:
    """Pearson correlation over voxels with population standard deviations."""
    a = np.asarray(v1.voxels if isinstance(v1, vol.Volume) else v1, dtype=np.float64)
    b = np.asarray(v2.voxels if isinstance(v2, vol.Volume) else v2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"volume dims differ: {a.shape} vs {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        raise ValueError("correlation is undefined for a constant volume")
    r = float(np.mean(a * b) / (sa * sb))
    return min(1.0, max(-1.0, r))


def ncc_matrix(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Pairwise NCC between two stacks of volumes ``[n, ...]`` and ``[m, ...]``."""
    def unit(z):
        z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
        z = z - z.mean(axis=1, keepdims=True)
        s = z.std(axis=1, keepdims=True)
        if np.any(s == 0):
            raise ValueError("correlation is undefined for a constant volume")
        return z / (s * np.sqrt(z.shape[1]))
    return np.clip(unit(xs) @ unit(ys).T, -1.0, 1.0)


def ncc_detect(train: Sequence[vol.Volume], synth: Sequence[vol.Volume],
               threshold: float = 0.95) -> list[tuple[str, str, float, bool]]:
    """Pixel-space detector: ``(train id, best synth id, ncc, flagged)`` per training volume."""
    m = ncc_matrix(vol.stack(train, np.float64)[:, 0], vol.stack(synth, np.float64)[:, 0])
    out = []
    for i, v in enumerate(train):
        j = int(np.argmax(m[i]))
        out.append((v.id, synth[j].id, float(m[i, j]), bool(m[i, j] >= threshold)))
    return out


@dataclass
class CandidateRecord:
    train_id: str
    synth_id: str
    msd: float
    val_id: str
    val_msd: float
    is_copy: bool
    truth: bool | None = None


@dataclass
class AuditReport:
    records: list[CandidateRecord]
    tau: float
    quantile: float
    copy_rate: float
    edges: list[float]
    candidate_counts: list[int]
    baseline_counts: list[int]
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        recs = []
        for r in self.records:
            d = {k: getattr(r, k) for k in RECORD_FIELDS if k != "truth"}
            if r.truth is not None:
                d["truth"] = r.truth
            recs.append(d)
        return {
            "config": self.config,
            "seeds": self.seeds,
            "tau": self.tau,
            "quantile": self.quantile,
            "copy_rate": self.copy_rate,
            "records": recs,
            "histograms": {"edges": self.edges, "candidate_counts": self.candidate_counts,
                           "baseline_counts": self.baseline_counts},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        recs = [CandidateRecord(r["train_id"], r["synth_id"], r["msd"], r["val_id"],
                                r["val_msd"], r["is_copy"], r.get("truth")) for r in d["records"]]
        h = d["histograms"]
        return cls(recs, d["tau"], d["quantile"], d["copy_rate"], list(h["edges"]),
                   list(h["candidate_counts"]), list(h["baseline_counts"]),
                   d.get("config", {}), d.get("seeds", {}))

    @classmethod
    def from_json(cls, text: str) -> "AuditReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in self.records:
            w.writerow([r.train_id, r.synth_id, repr(r.msd), r.val_id, repr(r.val_msd),
                        int(r.is_copy), "" if r.truth is None else int(r.truth)])
        return buf.getvalue()

    def save(self, json_path, csv_path=None) -> None:
        _write_atomic(Path(json_path), self.to_json())
        if csv_path is not None:
            _write_atomic(Path(csv_path), self.to_csv())

    @classmethod
    def read(cls, path) -> "AuditReport":
        return cls.from_json(Path(path).read_text())

    def low_range_mass(self, fraction: float = 0.1) -> tuple[float, float]:
        """Share of candidate and baseline MSDs in the lowest ``fraction`` of the shared range."""
        cut = self.edges[-1] * fraction
        c = np.array([r.msd for r in self.records])
        b = np.array([r.val_msd for r in self.records])
        return float(np.mean(c <= cut)), float(np.mean(b <= cut))


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def build_report(candidates, baseline, tau: float, bins: int = 20, quantile: float = 0.05,
                 truth: dict | None = None, config: dict | None = None,
                 seeds: dict | None = None) -> AuditReport:
    """Join candidates and baselines per training id into an :class:`AuditReport`.

    Histograms share the bin range ``[0, max observed MSD]``; ``truth`` maps
    training ids to planted ground truth when it is known.
    """
    candidates, baseline = list(candidates), list(baseline)
    if not candidates or not baseline:
        raise ValueError("candidates and baseline must be non-empty")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    base = {b[0]: b for b in baseline}
    recs = []
    for tid, sid, m in candidates:
        if tid not in base:
            raise ValueError(f"training id {tid!r} has no validation baseline")
        _, vid, vm = base[tid]
        recs.append(CandidateRecord(tid, sid, float(m), vid, float(vm), bool(m < tau),
                                    None if truth is None else bool(truth.get(tid, False))))
    cm = np.array([r.msd for r in recs])
    bm = np.array([b[2] for b in baseline], dtype=np.float64)
    top = float(max(cm.max(), bm.max()))
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    cc, _ = np.histogram(cm, edges)
    bc, _ = np.histogram(bm, edges)
    return AuditReport(recs, float(tau), float(quantile), copy_rate(recs, tau),
                       [float(e) for e in edges], [int(c) for c in cc], [int(c) for c in bc],
                       dict(config or {}), dict(seeds or {}))


def run_audit(train: Table, val: Table, synth: Table, quantile: float = 0.05, bins: int = 20,
              truth: dict | None = None, config: dict | None = None,
              seeds: dict | None = None) -> AuditReport:
    """Candidates, baseline, threshold and report from three embedding tables."""
    cands = copy_candidates(train, synth)
    base = validation_baseline(train, val)
    tau = calibrate_threshold([b[2] for b in base], quantile)
    return build_report(cands, base, tau, bins, quantile, truth, config, seeds)

