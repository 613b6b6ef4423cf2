"""Detection and tracking metrics (center-distance matching) and CSV reports.

mAP: per class and distance threshold, detections are matched greedily in
descending score order to the nearest unmatched GT center; AP is the area
under the all-point interpolated precision/recall curve.

AMOTA / AMOTP: per class, score thresholds are swept; for each recall level
r = j / R the highest threshold reaching recall >= r is evaluated with
CLEAR-MOT events (previous matches kept when still valid, then gated
Hungarian), giving MOTAR = clamp(1 - (IDS + FP + FN - (1 - r) P) / (r P), 0, 1)
and the mean TP distance. Unreachable levels score MOTAR 0 and distance
``track_match_dist``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .matching import gated_match
from .numerics import ConfigError
from .track_engine import CLASSES, DetectionRecord

Frames = Sequence[Sequence[DetectionRecord]]


@dataclass(frozen=True)
class EvalConfig:
    match_dist_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    recall_samples: int = 40
    classes: tuple[str, ...] = CLASSES
    track_match_dist: float = 2.0

    def __post_init__(self):
        th = self.match_dist_thresholds
        if not th or any(t <= 0 for t in th) or list(th) != sorted(th) or len(set(th)) != len(th):
            raise ConfigError("match thresholds must be positive and strictly ascending")
        if self.recall_samples < 2:
            raise ConfigError("recall_samples must be >= 2")


def _dist(a: DetectionRecord, b: DetectionRecord) -> float:
    return math.dist(a.position, b.position)


def _sort_key(frame: int, d: DetectionRecord):
    # score first; the rest makes ties independent of input order
    return (-d.score, frame, d.position, d.dims, d.yaw, -1 if d.track_id is None else d.track_id)


def _check_frames(dets: Frames, gts: Frames) -> None:
    if len(dets) != len(gts):
        raise ConfigError(f"{len(dets)} detection frames vs {len(gts)} GT frames")


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a score-ordered TP indicator."""
    if n_gt == 0:
        raise ConfigError("AP undefined without GT")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * env))


def class_ap(dets: Frames, gts: Frames, cls: int, thr: float) -> Optional[float]:
    _check_frames(dets, gts)
    n_gt = sum(1 for f in gts for g in f if g.class_id == cls)
    if n_gt == 0:
        return None
    cand = sorted(((k, d) for k, f in enumerate(dets) for d in f if d.class_id == cls), key=lambda e: _sort_key(*e))
    used = [set() for _ in gts]
    tp = np.zeros(len(cand))
    for n, (k, d) in enumerate(cand):
        best, best_j = math.inf, -1
        for j, g in enumerate(gts[k]):
            if g.class_id != cls or j in used[k]:
                continue
            dd = _dist(d, g)
            if dd < best:
                best, best_j = dd, j
        if best_j >= 0 and best <= thr:
            used[k].add(best_j)
            tp[n] = 1
    return average_precision(tp, n_gt)


def compute_map(dets: Frames, gts: Frames, cfg: EvalConfig = EvalConfig()):
    """(mAP or None, {class name: {threshold: AP}}) over classes that have GT."""
    per = {}
    vals = []
    for c, name in enumerate(cfg.classes):
        aps = {t: class_ap(dets, gts, c, t) for t in cfg.match_dist_thresholds}
        if aps[cfg.match_dist_thresholds[0]] is None:
            continue
        per[name] = aps
        vals += list(aps.values())
    return (float(np.mean(vals)) if vals else None), per


# ----------------------------------------------------------------------------
# tracking


@dataclass
class MotEvents:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    dist: float = 0.0
    log: list = field(default_factory=list)  # (frame, kind, gt id, track id)


def clear_mot(dets: Frames, gts: Frames, max_dist: float) -> MotEvents:
    """CLEAR-MOT event counts for one class, frames in order."""
    ev = MotEvents()
    last: dict[int, int] = {}  # gt id -> track id of its last match
    for k, (fd, fg) in enumerate(zip(dets, gts)):
        pairs = []
        free_d = set(range(len(fd)))
        free_g = set(range(len(fg)))
        by_tid: dict[int, list[int]] = {}
        for i, d in enumerate(fd):
            by_tid.setdefault(d.track_id, []).append(i)
        for j, g in enumerate(fg):
            if g.track_id not in last:
                continue
            # repeated ids in one frame: the lowest free index within the gate keeps the match
            i = next((i for i in by_tid.get(last[g.track_id], []) if i in free_d and _dist(fd[i], g) <= max_dist),
                     None)
            if i is not None:
                pairs.append((i, j))
                free_d.discard(i)
                free_g.discard(j)
        rd, rg = sorted(free_d), sorted(free_g)
        if rd and rg:
            D = np.array([[_dist(fd[i], fg[j]) for j in rg] for i in rd])
            for a, b in gated_match(D, max_dist):
                pairs.append((rd[a], rg[b]))
                free_d.discard(rd[a])
                free_g.discard(rg[b])
        for i, j in sorted(pairs, key=lambda p: p[1]):
            g, d = fg[j], fd[i]
            if g.track_id in last and last[g.track_id] != d.track_id:
                ev.ids += 1
                ev.log.append((k, "ids", g.track_id, d.track_id))
            last[g.track_id] = d.track_id
            ev.tp += 1
            ev.dist += _dist(d, g)
            ev.log.append((k, "tp", g.track_id, d.track_id))
        for i in sorted(free_d):
            ev.fp += 1
            ev.log.append((k, "fp", None, fd[i].track_id))
        for j in sorted(free_g):
            ev.fn += 1
            ev.log.append((k, "fn", fg[j].track_id, None))
    return ev


def class_amota(dets: Frames, gts: Frames, cls: int, cfg: EvalConfig) -> Optional[tuple[float, float]]:
    _check_frames(dets, gts)
    fg = [[g for g in f if g.class_id == cls] for f in gts]
    n_gt = sum(len(f) for f in fg)
    if n_gt == 0:
        return None
    fd_all = [[d for d in f if d.class_id == cls] for f in dets]
    for f in fd_all:
        for d in f:
            if d.track_id is None:
                raise ConfigError("tracking metrics need a track_id on every detection")
    thresholds = sorted({d.score for f in fd_all for d in f}, reverse=True)
    results = []  # (threshold, events), highest threshold first
    for tau in thresholds:
        fd = [[d for d in f if d.score >= tau] for f in fd_all]
        results.append(clear_mot(fd, fg, cfg.track_match_dist))
    R = cfg.recall_samples
    motar, motp = [], []
    for j in range(1, R + 1):
        r = j / R
        ev = next((e for e in results if e.tp / n_gt >= r - 1e-12), None)
        if ev is None:
            motar.append(0.0)
            motp.append(cfg.track_match_dist)
            continue
        m = 1.0 - (ev.ids + ev.fp + ev.fn - (1.0 - r) * n_gt) / (r * n_gt)
        motar.append(min(1.0, max(0.0, m)))
        motp.append(ev.dist / ev.tp)
    return float(np.mean(motar)), float(np.mean(motp))


def compute_amota_amotp(dets: Frames, gts: Frames, cfg: EvalConfig = EvalConfig()):
    """(AMOTA, AMOTP), class-averaged over classes with GT; (None, None) if there is no GT."""
    vals = [v for c in range(len(cfg.classes)) if (v := class_amota(dets, gts, c, cfg)) is not None]
    if not vals:
        return None, None
    return float(np.mean([a for a, _ in vals])), float(np.mean([p for _, p in vals]))


# ----------------------------------------------------------------------------
# report

REPORT_FIELDS = ("variant", "latency_frames", "latency_ms", "fusion_order", "preset", "seed", "mAP", "AMOTA", "AMOTP",
                 "config_hash")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def emit_report(rows: list[dict]) -> str:
    """CSV text with a fixed header; missing or None metrics become empty cells."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        w.writerow([_cell(r.get(k)) for k in REPORT_FIELDS])
    return buf.getvalue()


def read_report(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
