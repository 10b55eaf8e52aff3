"""Presentation attack detection metrics over P(bona_fide) scores.

A record is accepted as bona fide when ``score >= tau``.  FAR is the fraction
of accepted attacks, FRR the fraction of rejected bona fide records.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BONA_FIDE = "bona_fide"
ATTACK = "attack"
SCORE_HEADER = ["id", "group_id", "label", "pai_type", "score"]


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    group_id: str | None
    label: str
    pai_type: str | None
    score: float

    def __post_init__(self):
        if self.label not in (BONA_FIDE, ATTACK):
            raise ValueError(f"bad label {self.label!r}")
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")


@dataclass
class ThresholdReport:
    tau: float
    far: float
    frr: float
    apcer: float
    bpcer: float
    acer: float


def aggregate_groups(scores: Sequence[ScoreRecord]) -> list[ScoreRecord]:
    """Average frame scores within each ``group_id`` (ungrouped records pass through)."""
    buckets: dict[tuple, list[ScoreRecord]] = defaultdict(list)
    out = []
    for r in scores:
        if r.group_id is None:
            out.append(r)
        else:
            buckets[(r.group_id, r.label, r.pai_type)].append(r)
    for (gid, label, pai), recs in sorted(buckets.items(), key=lambda kv: str(kv[0])):
        mean = float(np.mean([r.score for r in recs]))
        out.append(ScoreRecord(gid, gid, label, pai, min(max(mean, 0.0), 1.0)))
    return out


def _split(scores: Sequence[ScoreRecord], group_mode: bool = False):
    if group_mode:
        scores = aggregate_groups(scores)
    att = np.array([r.score for r in scores if r.label == ATTACK], dtype=float)
    gen = np.array([r.score for r in scores if r.label == BONA_FIDE], dtype=float)
    if att.size == 0 or gen.size == 0:
        missing = ATTACK if att.size == 0 else BONA_FIDE
        raise EvaluationError(f"no {missing} records: both labels are required")
    return att, gen


def far_frr(scores: Sequence[ScoreRecord], tau: float, group_mode: bool = False) -> tuple[float, float]:
    att, gen = _split(scores, group_mode)
    return float(np.count_nonzero(att >= tau) / att.size), float(np.count_nonzero(gen < tau) / gen.size)


def candidate_thresholds(values: np.ndarray) -> np.ndarray:
    """Lowest score, midpoints of consecutive distinct scores, and just above the highest."""
    u = np.unique(values)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[u[0]], mids, [np.nextafter(u[-1], np.inf)]])


def far_frr_curve(att: np.ndarray, gen: np.ndarray, taus: np.ndarray):
    """Vectorised FAR/FRR at each threshold in ``taus`` via sorted counts."""
    a, g = np.sort(att), np.sort(gen)
    far = (a.size - np.searchsorted(a, taus, side="left")) / a.size
    frr = np.searchsorted(g, taus, side="left") / g.size
    return far, frr


def _eer_from(att: np.ndarray, gen: np.ndarray) -> tuple[float, float]:
    taus = candidate_thresholds(np.concatenate([att, gen]))
    far, frr = far_frr_curve(att, gen, taus)
    # argmin returns the first minimum, i.e. the smallest tau on ties
    i = int(np.argmin(np.abs(far - frr)))
    return float((far[i] + frr[i]) / 2.0), float(taus[i])


def eer(scores: Sequence[ScoreRecord], group_mode: bool = False) -> tuple[float, float]:
    """Equal error rate and its threshold by a discrete midpoint sweep."""
    return _eer_from(*_split(scores, group_mode))


def hter(
    dev_scores: Sequence[ScoreRecord], test_scores: Sequence[ScoreRecord], group_mode: bool = False
) -> float:
    _, tau = eer(dev_scores, group_mode)
    far, frr = far_frr(test_scores, tau, group_mode)
    return (far + frr) / 2.0


def apcer_bpcer_acer(
    scores: Sequence[ScoreRecord], tau: float, group_mode: bool = False
) -> ThresholdReport:
    """APCER is the worst per-PAI attack acceptance rate when PAI tags exist."""
    if group_mode:
        scores = aggregate_groups(scores)
    far, frr = far_frr(scores, tau)
    attacks = [r for r in scores if r.label == ATTACK]
    if any(r.pai_type for r in attacks):
        by_pai: dict[str | None, list[float]] = defaultdict(list)
        for r in attacks:
            by_pai[r.pai_type].append(r.score)
        apcer = max(float(np.mean(np.asarray(v) >= tau)) for v in by_pai.values())
    else:
        apcer = far
    return ThresholdReport(tau, far, frr, apcer, frr, (apcer + frr) / 2.0)


def per_pai_false_accepts(scores: Sequence[ScoreRecord], tau: float) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in scores:
        if r.label != ATTACK:
            continue
        key = r.pai_type or "unknown"
        counts.setdefault(key, 0)
        if r.score >= tau:
            counts[key] += 1
    return dict(sorted(counts.items()))


def evaluate_report(
    test: Sequence[ScoreRecord], dev: Sequence[ScoreRecord] | None = None, group_mode: bool = False
) -> dict:
    """All metrics in one dict; the threshold comes from ``dev`` when given."""
    test_eer, test_tau = eer(test, group_mode)
    tau = eer(dev, group_mode)[1] if dev is not None else test_tau
    rep = apcer_bpcer_acer(test, tau, group_mode)
    out = {
        "mode": "group" if group_mode else "frame",
        "threshold_source": "dev" if dev is not None else "test",
        "eer": test_eer,
        "eer_tau": test_tau,
        "hter": (rep.far + rep.frr) / 2.0,
        **asdict(rep),
        "false_accepts_per_pai": per_pai_false_accepts(
            aggregate_groups(test) if group_mode else test, tau
        ),
    }
    return out


def write_scores(records: Iterable[ScoreRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for r in records:
            w.writerow([r.id, r.group_id or "", r.label, r.pai_type or "", f"{r.score:.9g}"])


def read_scores(path: str | Path) -> list[ScoreRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORE_HEADER:
            raise EvaluationError(f"bad score-file header {reader.fieldnames}")
        return [
            ScoreRecord(r["id"], r["group_id"] or None, r["label"], r["pai_type"] or None, float(r["score"]))
            for r in reader
        ]


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_far_frr_table(scores: Sequence[ScoreRecord], path: str | Path, group_mode: bool = False) -> None:
    """Raw FAR/FRR per candidate threshold, for DET plotting elsewhere."""
    att, gen = _split(scores, group_mode)
    taus = candidate_thresholds(np.concatenate([att, gen]))
    far, frr = far_frr_curve(att, gen, taus)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "far", "frr"])
        for row in zip(taus, far, frr):
            w.writerow([f"{v:.9g}" for v in row])
