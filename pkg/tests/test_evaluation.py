"""Metric checks against independent brute-force oracles."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xetv2x.evaluation import (
    REPORT_FIELDS,
    EvalConfig,
    class_ap,
    clear_mot,
    compute_amota_amotp,
    compute_map,
    emit_report,
    read_report,
)
from xetv2x.numerics import ConfigError
from xetv2x.track_engine import DetectionRecord

CFG = EvalConfig()


def rec(x, y, score=1.0, tid=None, cls=0):
    return DetectionRecord(cls, (float(x), float(y), 0.75), (4.0, 1.8, 1.5), 0.0, score, tid)


# ----------------------------------------------------------------------------
# oracles


def oracle_ap(dets, gts, cls, thr):
    """Interpolated AP as a sum over the recall levels k / n_gt, every prefix cutoff tried."""
    n_gt = sum(g.class_id == cls for f in gts for g in f)
    cand = sorted(((d.score, k, d) for k, f in enumerate(dets) for d in f if d.class_id == cls),
                  key=lambda e: -e[0])
    pr = []
    for cut in range(1, len(cand) + 1):
        used = set()
        tp = 0
        for _, k, d in cand[:cut]:
            free = [(math.dist(d.position, g.position), j) for j, g in enumerate(gts[k])
                    if g.class_id == cls and (k, j) not in used]
            if free:
                dd, j = min(free)
                if dd <= thr:
                    used.add((k, j))
                    tp += 1
        pr.append((tp / cut, tp / n_gt))
    total = 0.0
    for lvl in range(1, n_gt + 1):
        ps = [p for p, r in pr if r >= lvl / n_gt - 1e-12]
        total += max(ps, default=0.0) / n_gt
    return total


def brute_assign(fd, fg, pairs_fixed, gate):
    """Max-cardinality then min-distance matching among free items, by enumeration."""
    fixed_d = {i for i, _ in pairs_fixed}
    fixed_g = {j for _, j in pairs_fixed}
    rd = [i for i in range(len(fd)) if i not in fixed_d]
    rg = [j for j in range(len(fg)) if j not in fixed_g]
    best = (0, 0.0, [])
    for n in range(min(len(rd), len(rg)), 0, -1):
        for ds in itertools.permutations(rd, n):
            for gs in itertools.combinations(rg, n):
                pairs = list(zip(ds, gs))
                dist = [math.dist(fd[i].position, fg[j].position) for i, j in pairs]
                if max(dist) > gate:
                    continue
                cost = sum(dist)
                if (n, -cost) > (best[0], -best[1]) or not best[2]:
                    best = (n, cost, pairs)
        if best[2]:
            break
    return best[2]


def oracle_events(dets, gts, gate):
    tp = fp = fn = ids = 0
    dist = 0.0
    last = {}
    for fd, fg in zip(dets, gts):
        fixed = []
        for j, g in enumerate(fg):
            for i, d in enumerate(fd):
                if g.track_id in last and d.track_id == last[g.track_id] and math.dist(d.position, g.position) <= gate \
                        and i not in {a for a, _ in fixed}:
                    fixed.append((i, j))
                    break
        pairs = fixed + brute_assign(fd, fg, fixed, gate)
        for i, j in pairs:
            g, d = fg[j], fd[i]
            if g.track_id in last and last[g.track_id] != d.track_id:
                ids += 1
            last[g.track_id] = d.track_id
            tp += 1
            dist += math.dist(d.position, g.position)
        fp += len(fd) - len(pairs)
        fn += len(fg) - len(pairs)
    return tp, fp, fn, ids, dist


def oracle_amota(dets, gts, cfg=CFG):
    n_gt = sum(len(f) for f in gts)
    taus = sorted({d.score for f in dets for d in f}, reverse=True)
    R = cfg.recall_samples
    motar, motp = [], []
    for j in range(1, R + 1):
        r = j / R
        for tau in taus:
            tp, fp, fn, ids, dist = oracle_events([[d for d in f if d.score >= tau] for f in dets], gts,
                                                  cfg.track_match_dist)
            if tp / n_gt >= r - 1e-12:
                motar.append(min(1.0, max(0.0, 1 - (ids + fp + fn - (1 - r) * n_gt) / (r * n_gt))))
                motp.append(dist / tp)
                break
        else:
            motar.append(0.0)
            motp.append(cfg.track_match_dist)
    return sum(motar) / R, sum(motp) / R


def random_sequence(seed, classes=1):
    """<= 5 frames x <= 3 objects: GT tracks plus noisy, swapped, missing and spurious detections."""
    r = np.random.default_rng(seed)
    n_frames = int(r.integers(1, 6))
    n_obj = int(r.integers(1, 4))
    start = r.uniform(-10, 10, size=(n_obj, 2))
    vel = r.uniform(-1.5, 1.5, size=(n_obj, 2))
    cls = r.integers(0, classes, size=n_obj)
    gts, dets = [], []
    for k in range(n_frames):
        fg, fd = [], []
        for o in range(n_obj):
            if r.uniform() < 0.15:
                continue
            p = start[o] + k * vel[o]
            fg.append(rec(*p, tid=o + 1, cls=int(cls[o])))
            if r.uniform() < 0.8:
                noise = r.normal(0, 0.6, size=2)
                tid = int(r.integers(1, 6)) if r.uniform() < 0.2 else o + 1
                fd.append(rec(*(p + noise), score=float(r.uniform(0.05, 1.0)), tid=tid, cls=int(cls[o])))
        for _ in range(int(r.integers(0, 2))):
            fd.append(rec(*r.uniform(-12, 12, size=2), score=float(r.uniform(0.05, 1.0)),
                          tid=int(r.integers(1, 6)), cls=int(r.integers(0, classes))))
        gts.append(fg)
        dets.append(fd)
    if not any(gts):
        gts[0].append(rec(0.0, 0.0, tid=1))
    return dets, gts


@st.composite
def sequences(draw, classes=1):
    return random_sequence(draw(st.integers(0, 2**31)), classes)


# ----------------------------------------------------------------------------
# detection


def test_perfect_prediction_scores_exactly():
    gts = [[rec(0, 0, tid=1), rec(10, 3, tid=2, cls=1)], [rec(1, 0, tid=1)], []]
    dets = [[rec(g.position[0], g.position[1], 1.0, g.track_id, g.class_id) for g in f] for f in gts]
    m, per = compute_map(dets, gts)
    assert m == 1.0 and set(per) == {"car", "pedestrian"}
    assert compute_amota_amotp(dets, gts) == (1.0, 0.0)


def test_half_the_objects_gives_half_ap():
    gts = [[rec(0, 0, tid=1), rec(20, 0, tid=2)]]
    dets = [[rec(0.1, 0, 0.9, 1)]]
    for thr in CFG.match_dist_thresholds:
        assert class_ap(dets, gts, 0, thr) == 0.5


def test_duplicate_detection_is_false_positive():
    gts = [[rec(0, 0, tid=1)]]
    dets = [[rec(0, 0, 0.9, 1), rec(0.1, 0, 0.8, 2)]]
    assert class_ap(dets, gts, 0, 2.0) == 1.0
    dets_low_first = [[rec(0, 0, 0.7, 1), rec(0.1, 0, 0.8, 2)]]
    assert class_ap(dets_low_first, gts, 0, 2.0) == 1.0
    ev = clear_mot(dets, gts, 2.0)
    assert (ev.tp, ev.fp) == (1, 1)


def test_class_without_gt_is_excluded():
    m, per = compute_map([[rec(0, 0, cls=2)]], [[rec(0, 0, tid=1)]])
    assert list(per) == ["car"] and m == 0.0
    assert compute_map([[]], [[]]) == (None, {})
    assert compute_amota_amotp([[]], [[]]) == (None, None)
    with pytest.raises(ConfigError):
        compute_map([[]], [[], []])


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(match_dist_thresholds=(1.0, 0.5))
    with pytest.raises(ConfigError):
        EvalConfig(recall_samples=1)


@given(sequences(classes=2))
def test_ap_matches_oracle(seq):
    dets, gts = seq
    for c in (0, 1):
        for thr in CFG.match_dist_thresholds:
            got = class_ap(dets, gts, c, thr)
            if got is None:
                assert not any(g.class_id == c for f in gts for g in f)
            else:
                assert abs(got - oracle_ap(dets, gts, c, thr)) < 1e-12


@given(sequences(), st.integers(0, 1000))
def test_map_ignores_order_within_frames(seq, seed):
    dets, gts = seq
    r = np.random.default_rng(seed)
    shuf = [[f[i] for i in r.permutation(len(f))] for f in dets]
    assert compute_map(dets, gts)[0] == compute_map(shuf, gts)[0]


@given(sequences())
def test_false_positive_never_helps_true_positive_never_hurts(seq):
    dets, gts = seq
    base = compute_map(dets, gts)[0]
    worse = [list(f) for f in dets]
    worse[0].append(rec(500.0, 500.0, 0.99, 9))
    assert compute_map(worse, gts)[0] <= base + 1e-12
    # a score-1 detection exactly on a GT that nothing detected
    better = [list(f) for f in dets]
    for k, f in enumerate(gts):
        for g in f:
            if all(math.dist(d.position, g.position) > 4.0 for d in dets[k]):
                better[k].append(rec(g.position[0], g.position[1], 1.0, g.track_id, g.class_id))
                assert compute_map(better, gts)[0] >= base - 1e-12
                return


@given(sequences(), st.integers(-50, 50), st.integers(-50, 50))
def test_translation_invariance(seq, dx, dy):
    dets, gts = seq

    def shift(frames):
        return [[DetectionRecord(d.class_id, (d.position[0] + dx, d.position[1] + dy, d.position[2]), d.dims, d.yaw,
                                 d.score, d.track_id) for d in f] for f in frames]

    a = compute_map(dets, gts)[0], *compute_amota_amotp(dets, gts)
    b = compute_map(shift(dets), shift(gts))[0], *compute_amota_amotp(shift(dets), shift(gts))
    np.testing.assert_allclose(a, b, atol=1e-9)


# ----------------------------------------------------------------------------
# tracking


@given(sequences())
def test_amota_matches_event_log_oracle(seq):
    dets, gts = seq
    got = compute_amota_amotp(dets, gts)
    want = oracle_amota(dets, gts)
    assert abs(got[0] - want[0]) < 1e-12 and abs(got[1] - want[1]) < 1e-12


def test_single_identity_switch():
    gts = [[rec(k, 0, tid=7)] for k in range(10)]
    dets = [[rec(k, 0, 1.0, 1 if k < 5 else 2)] for k in range(10)]
    ev = clear_mot(dets, gts, 2.0)
    assert (ev.tp, ev.fp, ev.fn, ev.ids) == (10, 0, 0, 1)
    # MOTAR(r) = min(1, 9 / (10 r)) on the 40 recall levels
    want = (36 + 36 / 37 + 36 / 38 + 36 / 39 + 36 / 40) / 40
    amota, amotp = compute_amota_amotp(dets, gts)
    assert amota == pytest.approx(want, abs=1e-12) and amotp == 0.0


def test_half_meter_offset_gives_amotp_half():
    gts = [[rec(1.0 + k, 2.0, tid=1), rec(-8.0, 4.0 - k, tid=2)] for k in range(4)]
    dets = [[rec(g.position[0] + 0.5, g.position[1], 0.9, g.track_id) for g in f] for f in gts]
    amota, amotp = compute_amota_amotp(dets, gts)
    assert amotp == 0.5 and amota == 1.0


def test_missing_track_id_rejected():
    with pytest.raises(ConfigError):
        compute_amota_amotp([[rec(0, 0, 0.5, None)]], [[rec(0, 0, tid=1)]])


def test_track_kept_through_closer_distractor():
    # the established track stays matched although a new track is closer this frame
    gts = [[rec(0, 0, tid=1)], [rec(1, 0, tid=1)]]
    dets = [[rec(0, 0, 0.9, 5)], [rec(2.5 - 1.0, 0.9, 0.9, 5), rec(1.05, 0, 0.9, 6)]]
    ev = clear_mot(dets, gts, 2.0)
    assert ev.ids == 0 and ev.fp == 1


# ----------------------------------------------------------------------------
# report


def test_report_cells_and_bytes():
    rows = [{"variant": "XET-V2X", "latency_frames": 1, "latency_ms": 100.0, "fusion_order": "image_first",
             "preset": "intersection", "seed": 0, "mAP": 0.25, "AMOTA": None, "AMOTP": 1.5, "config_hash": "ab"},
            {"variant": "CET-V", "latency_frames": None, "latency_ms": None, "fusion_order": "image_first",
             "preset": "intersection", "seed": 0, "mAP": 0.0}]
    text = emit_report(rows)
    assert text == emit_report(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_FIELDS)
    assert lines[1] == "XET-V2X,1,100.000000,image_first,intersection,0,0.250000,,1.500000,ab"
    back = read_report(text)
    assert back[1]["latency_ms"] == "" and back[1]["mAP"] == "0.000000" and back[1]["AMOTA"] == ""
    assert emit_report([]) == ",".join(REPORT_FIELDS) + "\n"
