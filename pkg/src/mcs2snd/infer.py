"""Offline two-pass diarization.

The first pass runs the single-channel model on channel 0; its segments
enroll speakers for the multi-channel model.  Both passes share
:func:`diarize`: per-block speaker embeddings from the representation
decoder, K-means refinement of the enrollment, blockwise detection with the
fixed enrollment, score averaging over overlapping blocks and binarization.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.ndimage import median_filter

from .core import ActivityMatrix, BlockPlan, DiarizationResult, EmbeddingSet, Segment, activity_from_segments
from .features import FeatureBlock, FeatureOptions, Waveform, block_features
from .model import MCS2SND

log = logging.getLogger(__name__)


class CapacityError(ValueError):
    pass


@dataclass
class PipelineConfig:
    plan: BlockPlan = field(default_factory=BlockPlan)
    binarize_threshold: float = 0.5
    median_filter_frames: int = 11
    kmeans_max_iters: int = 50
    min_segment: float = 0.0
    clustering: bool = True
    batch_size: int = 8
    # first-pass roster discovery
    window: float = 1.0
    window_hop: float = 0.5
    ahc_threshold: float = 0.5
    min_cluster_windows: int = 3
    min_speaker_time: float = 1.0
    max_shared: float = 0.3  # discovery: drop a candidate sharing more of its speech with a larger one
    features: FeatureOptions = field(default_factory=FeatureOptions)

    def __post_init__(self):
        if not 0 < self.binarize_threshold < 1:
            raise ValueError("binarize_threshold must lie in (0, 1)")
        if self.median_filter_frames < 1 or self.median_filter_frames % 2 == 0:
            raise ValueError("median_filter_frames must be a positive odd integer")
        if self.min_segment < 0:
            raise ValueError("min_segment must be nonnegative")
        if not 0 < self.max_shared <= 1:
            raise ValueError("max_shared must lie in (0, 1]")


@dataclass
class ClusterResult:
    centroids: np.ndarray  # K x S, unit rows
    assignments: np.ndarray
    reassigned: int
    objective: list  # within-cluster cosine distance sum per iteration
    warnings: list


def _model_frame(model: MCS2SND, plan: BlockPlan) -> float:
    return plan.frame_period * model.cfg.extractor_time_stride


def _feats_tensor(blocks: list[FeatureBlock], channels) -> torch.Tensor:
    out = torch.stack([torch.from_numpy(b.features.data).permute(2, 0, 1) for b in blocks])
    return out if channels is None else out[:, channels]


def _channel_select(model: MCS2SND, num_channels: int):
    # the single-channel model only ever sees the reference channel
    return None if model.cfg.channel_attention else [0]


def _pad_rows(rows: torch.Tensor, capacity: int) -> torch.Tensor:
    if rows.shape[0] > capacity:
        raise CapacityError(f"{rows.shape[0]} speakers exceed the model capacity N={capacity}")
    return torch.cat([rows, rows.new_zeros(capacity - rows.shape[0], *rows.shape[1:])])


@torch.no_grad()
def _front(model: MCS2SND, blocks, batch_size: int):
    """(X, X_hat) per block, computed in batches."""
    channels = _channel_select(model, blocks[0].features.data.shape[2])
    xs, xhats = [], []
    for i in range(0, len(blocks), batch_size):
        feats = _feats_tensor(blocks[i:i + batch_size], channels)
        _, x = model.front_end(feats)
        xs.append(x)
        xhats.append(model.encode(x))
    return torch.cat(xs), torch.cat(xhats)


@torch.no_grad()
def extract_block_embeddings(blocks, init: DiarizationResult, model: MCS2SND, plan: BlockPlan,
                             x: torch.Tensor | None = None, batch_size: int = 8):
    """Embeddings of every (speaker, block) pair where the speaker is active.

    Returns (vectors V x S, speaker ids per vector, block index per vector).
    """
    roster = init.speakers
    if not roster:
        raise ValueError("initial diarization is empty")
    if len(roster) > model.cfg.capacity:
        raise CapacityError(f"initial diarization has {len(roster)} speakers; model capacity is {model.cfg.capacity}")
    if x is None:
        x, _ = _front(model, blocks, batch_size)
    fp = _model_frame(model, plan)
    t_out = x.shape[1]
    vectors, speakers, block_ids = [], [], []
    for i in range(0, len(blocks), batch_size):
        acts = []
        for blk in blocks[i:i + batch_size]:
            a = activity_from_segments(init, fp, t_out, roster, offset=blk.start_time, clip=True).values
            acts.append(_pad_rows(torch.from_numpy(a), model.cfg.capacity))
        emb, valid = model.represent(x[i:i + len(acts)], torch.stack(acts))
        for j in range(len(acts)):
            for k, spk in enumerate(roster):
                if valid[j, k]:
                    vectors.append(emb[j, k].numpy())
                    speakers.append(spk)
                    block_ids.append(blocks[i + j].block_index)
    s = model.cfg.embedding_dim
    return np.array(vectors, dtype=np.float64).reshape(-1, s), speakers, block_ids


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def speaker_means(vectors: np.ndarray, speakers, order) -> np.ndarray:
    speakers = np.asarray(speakers)
    return _unit(np.stack([_unit(vectors[speakers == spk]).mean(axis=0) for spk in order]))


def cluster_embeddings(vectors: np.ndarray, speakers, order, max_iters: int = 50) -> ClusterResult:
    """Spherical K-means with one cluster per known speaker, seeded at the speaker means.

    Cluster k keeps the identity of ``order[k]``; a cluster that loses all of
    its members keeps its previous centroid so the roster never shrinks.
    """
    order = list(order)
    if not order:
        raise ValueError("need at least one speaker")
    speakers = np.asarray(speakers)
    missing = [spk for spk in order if not np.any(speakers == spk)]
    if missing:
        raise ValueError(f"speakers without embeddings: {missing}")
    v = _unit(np.asarray(vectors, dtype=np.float64))
    initial = np.array([order.index(s) for s in speakers])
    centroids = speaker_means(v, speakers, order)
    assign = initial.copy()
    objective, notes = [], []
    for _ in range(max_iters):
        new = np.argmax(v @ centroids.T, axis=1)
        objective.append(float(np.sum(1.0 - np.sum(v * centroids[new], axis=1))))
        for k in range(len(order)):
            members = v[new == k]
            if len(members):
                centroids[k] = _unit(members.mean(axis=0))
            else:
                notes.append(f"cluster for {order[k]} emptied; keeping its previous centroid")
                warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
        stable = np.array_equal(new, assign)
        assign = new
        if stable:
            break
    objective.append(float(np.sum(1.0 - np.sum(v * centroids[assign], axis=1))))
    return ClusterResult(centroids, assign, int(np.sum(assign != initial)), objective, notes)


@torch.no_grad()
def detect_blockwise(blocks, enrolled: np.ndarray, model: MCS2SND, xhat: torch.Tensor | None = None,
                     batch_size: int = 8, keep_padding: bool = False) -> list[ActivityMatrix]:
    """Speaker probabilities per block with the same enrollment everywhere.

    Enrollment rows beyond the known speakers are filled with the non-speech
    embedding.  Only the K enrolled rows are returned unless ``keep_padding``.
    """
    if xhat is None:
        _, xhat = _front(model, blocks, batch_size)
    k = len(enrolled)
    e_non = model.speaker_table.non_speech.detach()
    emb = torch.as_tensor(np.asarray(enrolled), dtype=xhat.dtype)
    if k > model.cfg.capacity:
        raise CapacityError(f"{k} enrolled speakers exceed capacity N={model.cfg.capacity}")
    emb = torch.cat([emb, e_non.expand(model.cfg.capacity - k, -1)])
    fp = _model_frame(model, BlockPlan())
    out = []
    for i in range(0, len(blocks), batch_size):
        xb = xhat[i:i + batch_size]
        probs = model.detect(xb, emb.expand(len(xb), -1, -1))
        for p in probs:
            p = p if keep_padding else p[:k]
            out.append(ActivityMatrix(p.clamp(0, 1).numpy().astype(np.float64), "probability", fp))
    return out


def fuse_scores(block_outputs, plan: BlockPlan, total_frames: int, frame_period: float | None = None) -> ActivityMatrix:
    """Average overlapping block predictions on the global frame grid.

    Block i starts at frame i * shift (in units of ``frame_period``, default
    the plan's); frames past ``total_frames`` are dropped.
    """
    fp = frame_period or plan.frame_period
    shift = int(round(plan.block_shift / fp))
    n = block_outputs[0].num_speakers if block_outputs else 0
    acc = np.zeros((n, total_frames))
    count = np.zeros(total_frames)
    for i, blk in enumerate(block_outputs):
        a = i * shift
        b = min(a + blk.num_frames, total_frames)
        if b <= a:
            continue
        acc[:, a:b] += blk.values[:, : b - a]
        count[a:b] += 1
    fused = np.divide(acc, count, out=np.zeros_like(acc), where=count > 0)
    return ActivityMatrix(np.clip(fused, 0.0, 1.0), "probability", fp)


def upsample(scores: ActivityMatrix, factor: int, total_frames: int) -> ActivityMatrix:
    """Repeat coarse predictions to a grid ``factor`` times finer."""
    v = np.repeat(scores.values, factor, axis=1)[:, :total_frames]
    if v.shape[1] < total_frames:
        v = np.pad(v, ((0, 0), (0, total_frames - v.shape[1])), mode="edge")
    return ActivityMatrix(v, scores.kind, scores.frame_period / factor)


def binarize_frames(scores: ActivityMatrix, cfg: PipelineConfig | None = None) -> np.ndarray:
    """Median-filtered, thresholded activity (bool, speakers x frames)."""
    cfg = cfg or PipelineConfig()
    rows = scores.values
    if cfg.median_filter_frames > 1 and rows.size:
        rows = median_filter(rows, size=(1, cfg.median_filter_frames), mode="nearest")
    return rows > cfg.binarize_threshold


def binarize(scores: ActivityMatrix, cfg: PipelineConfig | None = None, speakers=None,
             recording_id: str = "rec") -> DiarizationResult:
    """Median-filter, threshold and turn 1-runs into segments (one row per speaker)."""
    cfg = cfg or PipelineConfig()
    speakers = list(speakers) if speakers is not None else [f"spk{i + 1}" for i in range(scores.num_speakers)]
    fp = scores.frame_period
    segments = []
    for act, spk in zip(binarize_frames(scores, cfg), speakers):
        active = np.concatenate([[False], act, [False]])
        edges = np.flatnonzero(np.diff(active.astype(np.int8)))
        for a, b in zip(edges[::2], edges[1::2]):
            dur = (b - a) * fp
            if dur >= cfg.min_segment and dur > 0:
                segments.append(Segment(round(a * fp, 6), spk, round(dur, 6)))
    return DiarizationResult(segments, recording_id)


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class DiarizeOutput:
    result: DiarizationResult
    scores: ActivityMatrix  # fused, on the 10 ms grid
    enrollment: np.ndarray
    clusters: ClusterResult | None = None
    speakers: list = field(default_factory=list)


def _blocks(wave: Waveform, cfg: PipelineConfig):
    if wave.num_samples == 0:
        raise ValueError("empty audio")
    return block_features(wave, cfg.plan, cfg.features)


def diarize(wave: Waveform, model: MCS2SND, init: DiarizationResult, cfg: PipelineConfig | None = None,
            blocks=None) -> DiarizeOutput:
    """Enroll the speakers of ``init`` from ``wave`` and re-detect them with ``model``."""
    cfg = cfg or PipelineConfig()
    model.eval()
    blocks = blocks if blocks is not None else _blocks(wave, cfg)
    total = int(math.ceil(wave.duration / cfg.plan.frame_period - 1e-9))
    stride = model.cfg.extractor_time_stride
    roster = init.speakers
    if not roster:
        empty = ActivityMatrix(np.zeros((0, total)), "probability", cfg.plan.frame_period)
        return DiarizeOutput(DiarizationResult([], init.recording_id), empty, np.zeros((0, model.cfg.embedding_dim)))
    x, xhat = _front(model, blocks, cfg.batch_size)
    vectors, spk_of, _ = extract_block_embeddings(blocks, init, model, cfg.plan, x, cfg.batch_size)
    present = [s for s in roster if s in set(spk_of)]
    clusters = None
    if not present:
        enrollment = np.zeros((0, model.cfg.embedding_dim))
    elif cfg.clustering:
        clusters = cluster_embeddings(vectors, spk_of, present, cfg.kmeans_max_iters)
        enrollment = clusters.centroids
    else:
        enrollment = speaker_means(vectors, spk_of, present)
    if len(present) == 0:
        empty = ActivityMatrix(np.zeros((0, total)), "probability", cfg.plan.frame_period)
        return DiarizeOutput(DiarizationResult([], init.recording_id), empty, enrollment)
    outputs = detect_blockwise(blocks, enrollment, model, xhat, cfg.batch_size)
    coarse_total = int(math.ceil(total / stride))
    fused = fuse_scores(outputs, cfg.plan, coarse_total, cfg.plan.frame_period * stride)
    scores = upsample(fused, stride, total) if stride > 1 else fused
    result = binarize(scores, cfg, present, init.recording_id)
    return DiarizeOutput(result, scores, enrollment, clusters, present)


@torch.no_grad()
def discover_speakers(wave: Waveform, model: MCS2SND, cfg: PipelineConfig | None = None,
                      blocks=None) -> DiarizationResult:
    """Initial roster for the first pass.

    Short sliding windows are embedded with the representation decoder, the
    window embeddings are grouped by average-linkage clustering on cosine
    distance, and each sizeable group's mean is enrolled for detection.
    Groups whose detected speech is shorter than ``min_speaker_time`` (e.g.
    noise or mixed-speaker windows) are dropped.
    """
    cfg = cfg or PipelineConfig()
    rec = "rec"
    blocks = blocks if blocks is not None else _blocks(wave, cfg)
    x, xhat = _front(model, blocks, cfg.batch_size)
    fp = _model_frame(model, cfg.plan)
    win = max(1, int(round(cfg.window / fp)))
    hop = max(1, int(round(cfg.window_hop / fp)))
    t_out = x.shape[1]
    total_out = int(math.ceil(wave.duration / fp - 1e-9))
    vectors = []
    n = model.cfg.capacity
    for i, blk in enumerate(blocks):
        first = int(round(blk.start_time / fp))
        # only windows this block is responsible for (skip re-embedding overlap regions)
        limit = min(t_out, total_out - first)
        starts = list(range(0, max(limit - win, 0) + 1, hop))
        for j in range(0, len(starts), n):
            chunk = starts[j:j + n]
            acts = torch.zeros(1, n, t_out, dtype=x.dtype)
            for r, s in enumerate(chunk):
                acts[0, r, s:s + win] = 1.0
            emb, _ = model.represent(x[i:i + 1], acts)
            vectors.extend(emb[0, :len(chunk)].numpy())
    if not vectors:
        return DiarizationResult([], rec)
    v = _unit(np.asarray(vectors, dtype=np.float64))
    if len(v) == 1:
        labels = np.array([1])
    else:
        labels = fcluster(linkage(v, method="average", metric="cosine"), t=cfg.ahc_threshold, criterion="distance")
    ids, counts = np.unique(labels, return_counts=True)
    keep = [c for c, m in sorted(zip(ids, counts), key=lambda p: -p[1]) if m >= cfg.min_cluster_windows][:n]
    if not keep:
        return DiarizationResult([], rec)
    enrollment = _unit(np.stack([v[labels == c].mean(axis=0) for c in keep]))
    outputs = detect_blockwise(blocks, enrollment, model, xhat, cfg.batch_size)
    stride = model.cfg.extractor_time_stride
    total = int(math.ceil(wave.duration / cfg.plan.frame_period - 1e-9))
    fused = fuse_scores(outputs, cfg.plan, int(math.ceil(total / stride)), fp)
    scores = upsample(fused, stride, total) if stride > 1 else fused
    names = [f"cand{i}" for i in range(len(keep))]
    result = binarize(scores, cfg, names, rec)
    active = binarize_frames(scores, cfg)
    kept = _distinct_candidates(active, cfg.max_shared, int(round(cfg.min_speaker_time / cfg.plan.frame_period)))
    names_kept = {names[i] for i in kept}
    return DiarizationResult([s for s in result.segments if s.speaker in names_kept], rec)


def _distinct_candidates(active: np.ndarray, max_shared: float, min_frames: int) -> list[int]:
    """Rows to keep: drop candidates with too little speech, then, largest first,
    any candidate sharing more than ``max_shared`` of its frames with one already kept
    (a second enrollment of the same voice fires on the same frames)."""
    size = active.sum(axis=1)
    kept: list[int] = []
    for i in np.argsort(-size, kind="stable"):
        if size[i] < max(min_frames, 1):
            continue
        if any((active[i] & active[j]).sum() > max_shared * size[i] for j in kept):
            continue
        kept.append(int(i))
    return sorted(kept)


def _renumber(result: DiarizationResult) -> DiarizationResult:
    mapping = {spk: f"spk{i + 1}" for i, spk in enumerate(result.speakers)}
    return result.renamed(mapping)


def run_first_pass(wave: Waveform, model: MCS2SND, cfg: PipelineConfig | None = None,
                   recording_id: str = "rec") -> DiarizeOutput:
    """Single-channel diarization of channel 0 with roster discovery."""
    cfg = cfg or PipelineConfig()
    mono = wave.channels(0)
    blocks = _blocks(mono, cfg)
    roster = discover_speakers(mono, model, cfg, blocks)
    out = diarize(mono, model, roster, cfg, blocks)
    out.result = _renumber(DiarizationResult(out.result.segments, recording_id))
    out.speakers = out.result.speakers
    return out


def run_pipeline(wave: Waveform, first_pass_model: MCS2SND | None, mc_model: MCS2SND,
                 cfg: PipelineConfig | None = None, init: DiarizationResult | None = None,
                 recording_id: str = "rec") -> DiarizeOutput:
    """First pass on channel 0 (unless ``init`` is given), then multi-channel refinement."""
    cfg = cfg or PipelineConfig()
    if init is None:
        if first_pass_model is None:
            raise ValueError("need a first-pass model or an initial diarization")
        init = run_first_pass(wave, first_pass_model, cfg, recording_id).result
    if not init.segments:
        empty = ActivityMatrix(np.zeros((0, int(math.ceil(wave.duration / cfg.plan.frame_period)))), "probability")
        return DiarizeOutput(DiarizationResult([], recording_id), empty, np.zeros((0, mc_model.cfg.embedding_dim)))
    if not mc_model.cfg.channel_attention:
        wave = wave.channels(0)
    out = diarize(wave, mc_model, init, cfg)
    out.result = DiarizationResult(out.result.segments, recording_id)
    return out


def embeddings_as_set(vectors: np.ndarray) -> EmbeddingSet:
    return EmbeddingSet(vectors, np.ones(len(vectors), dtype=bool))
