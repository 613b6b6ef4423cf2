"""Sequential inference over a scenario with the latency channel in the loop."""
from __future__ import annotations

from .model import Model
from .scenario import LatencyChannel, Scenario, channel_step
from .track_engine import DetectionRecord, TrackState, lifecycle_update


def run_sequence(model: Model, params: dict, scn: Scenario, delay: int = 0,
                 use_history: bool = True) -> list[tuple[int, float, list[DetectionRecord]]]:
    """Joint detection + tracking, one forward pass per ego frame.

    The cooperative frame reaches the ego through a ``delay``-frame channel;
    while the channel warms up the model runs on the ego view alone.
    """
    ch = LatencyChannel(delay)
    coop = model.cfg.flags["coop"]
    prev = None
    tracks: list[TrackState] = []
    next_id = 1
    out = []
    for k in range(len(scn)):
        other = channel_step(ch, scn.frames[scn.other_id][k], k)
        res = model.frame_forward(params, scn.frames["ego"][k], other if coop else None, prev, tracks,
                                  use_history=use_history)
        recs = model.records(res, tracks, use_history)
        tracks, next_id = lifecycle_update(tracks if use_history else [], recs, model.cfg.decoder, res.out, k,
                                           next_id)
        prev = res
        out.append((k, scn.worlds[k].t, recs))
    return out
