"""Collar-free, frame-based diarization error rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import FRAME_PERIOD, DiarizationResult, activity_from_segments


class UndefinedDER(ValueError):
    pass


@dataclass
class DerReport:
    der: float
    missed: float
    false_alarm: float
    confusion: float
    scored_time: float
    mapping: dict = field(default_factory=dict)  # hyp speaker -> ref speaker
    # raw frame counts, kept for corpus-level aggregation
    miss_frames: int = 0
    fa_frames: int = 0
    conf_frames: int = 0
    ref_frames: int = 0

    def line(self) -> str:
        """Machine-readable summary, percentages with two decimals."""
        return (f"DER={100 * self.der:.2f} MISS={100 * self.missed:.2f} "
                f"FA={100 * self.false_alarm:.2f} CONF={100 * self.confusion:.2f}")

    def text(self) -> str:
        return (f"DER {100 * self.der:.2f}%  (miss {100 * self.missed:.2f}%, false alarm "
                f"{100 * self.false_alarm:.2f}%, confusion {100 * self.confusion:.2f}%, "
                f"scored {self.scored_time:.2f} s)")


def _rasterize(ref: DiarizationResult, hyp: DiarizationResult, frame_period: float):
    total = max(activity_from_segments(ref, frame_period).num_frames,
                activity_from_segments(hyp, frame_period).num_frames)
    r = activity_from_segments(ref, frame_period, total).values.astype(bool)
    h = activity_from_segments(hyp, frame_period, total).values.astype(bool)
    return r, h


def _report(miss, fa, conf, ref_frames, frame_period, mapping) -> DerReport:
    if ref_frames == 0:
        raise UndefinedDER("undefined DER: reference contains no speech")
    return DerReport(
        der=(miss + fa + conf) / ref_frames, missed=miss / ref_frames, false_alarm=fa / ref_frames,
        confusion=conf / ref_frames, scored_time=ref_frames * frame_period, mapping=mapping,
        miss_frames=int(miss), fa_frames=int(fa), conf_frames=int(conf), ref_frames=int(ref_frames),
    )


def score_der(ref: DiarizationResult, hyp: DiarizationResult, frame_period: float = FRAME_PERIOD) -> DerReport:
    """Score ``hyp`` against ``ref`` on the frame grid with an optimal 1:1 speaker mapping.

    Per frame, with n_ref / n_hyp active speakers and n_ok correctly mapped
    ones: miss = max(0, n_ref - n_hyp), false alarm = max(0, n_hyp - n_ref),
    confusion = min(n_ref, n_hyp) - n_ok.  The denominator is the summed
    n_ref, so overlapped reference speech counts once per speaker.
    """
    r, h = _rasterize(ref, hyp, frame_period)
    ref_spk, hyp_spk = ref.speakers, hyp.speakers
    mapping = {}
    correct = np.zeros(r.shape[1], dtype=np.int64)
    if len(ref_spk) and len(hyp_spk):
        overlap = h.astype(np.int64) @ r.T.astype(np.int64)  # hyp x ref
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        for i, j in zip(rows, cols):
            if overlap[i, j] > 0:
                mapping[hyp_spk[i]] = ref_spk[j]
                correct += h[i] & r[j]
    n_ref = r.sum(axis=0)
    n_hyp = h.sum(axis=0)
    miss = np.maximum(n_ref - n_hyp, 0).sum()
    fa = np.maximum(n_hyp - n_ref, 0).sum()
    conf = (np.minimum(n_ref, n_hyp) - correct).sum()
    return _report(miss, fa, conf, n_ref.sum(), frame_period, mapping)


def score_corpus(pairs, frame_period: float = FRAME_PERIOD) -> DerReport:
    """Time-weighted DER over (ref, hyp) pairs: summed errors over summed reference speech."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("score_corpus needs at least one (ref, hyp) pair")
    reports = [score_der(ref, hyp, frame_period) for ref, hyp in pairs]
    mapping = {}
    for (ref, _), rep in zip(pairs, reports):
        mapping.update({f"{ref.recording_id}:{k}": v for k, v in rep.mapping.items()})
    return _report(sum(r.miss_frames for r in reports), sum(r.fa_frames for r in reports),
                   sum(r.conf_frames for r in reports), sum(r.ref_frames for r in reports), frame_period, mapping)
