"""Joint detection/representation training with staged freezing schedules."""

from __future__ import annotations

import configparser
import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import BlockPlan, DiarizationResult, SpeakerSelection, activity_from_segments
from .features import FeatureBlock, FeatureOptions, Waveform, block_features, logmel, normalize_block, normalize_wave
from .model import PARAMETER_GROUPS, MCS2SND, ModelConfig, SpeakerTable, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
COS_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ArcFaceParams:
    scale: float = 32.0
    margin: float = 0.2

    def __post_init__(self):
        if self.scale <= 0 or not 0 <= self.margin < math.pi / 2:
            raise ValueError("ArcFace needs scale > 0 and 0 <= margin < pi/2")


# ---------------------------------------------------------------------------
# losses


def bce_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over every slot and frame (padded slots included)."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    truth = truth.to(p.dtype)
    return -(truth * torch.log(p) + (1 - truth) * torch.log(1 - p)).mean()


def arcface_logits(ext: torch.Tensor, labels: torch.Tensor, table: torch.Tensor, ap: ArcFaceParams) -> torch.Tensor:
    norms = ext.norm(dim=-1)
    if torch.any(norms == 0):
        raise ValueError("zero-norm extracted embedding")
    cos = (F.normalize(ext, dim=-1) @ F.normalize(table, dim=-1).T).clamp(-1 + COS_CLAMP, 1 - COS_CLAMP)
    # cos(theta + m) expanded, so m = 0 leaves the target logit bit-identical to cos(theta)
    sin = torch.sqrt(1.0 - cos * cos)
    shifted = cos * math.cos(ap.margin) - sin * math.sin(ap.margin)
    target = F.one_hot(labels, table.shape[0]).bool()
    return ap.scale * torch.where(target, shifted, cos)


def arcface_loss(ext: torch.Tensor, labels, table: torch.Tensor, ap: ArcFaceParams | None = None) -> torch.Tensor:
    """Additive-angular-margin softmax of extracted embeddings against the speaker table.

    ``ext`` holds only the valid rows; returns 0 when there are none.
    """
    ap = ap or ArcFaceParams()
    if isinstance(labels, SpeakerSelection):
        labels = labels.labels
    labels = torch.as_tensor(labels, dtype=torch.long, device=ext.device)
    if ext.shape[0] == 0:
        return ext.sum() * 0.0
    if torch.any(labels >= table.shape[0]) or torch.any(labels < 0):
        raise ValueError("label outside the speaker table")
    logits = arcface_logits(ext, labels, table, ap)
    return F.cross_entropy(logits, labels)


def total_loss(pred, truth, ext, labels, table, ap: ArcFaceParams | None = None) -> dict:
    bce = bce_loss(pred, truth)
    arc = arcface_loss(ext, labels, table, ap)
    return {"bce": bce, "arc": arc, "total": bce + arc}


# ---------------------------------------------------------------------------
# enrollment protocol


def lookup_embeddings(sel: SpeakerSelection, table: SpeakerTable | torch.Tensor) -> torch.Tensor:
    """Rows of the speaker table picked by ``sel`` (same values as one_hot @ table)."""
    weight = table.table if isinstance(table, SpeakerTable) else table
    if sel.num_all != weight.shape[0]:
        raise ValueError(f"selection built for {sel.num_all} speakers, table has {weight.shape[0]}")
    if len(sel) == 0:
        return weight[:0]
    return weight[torch.as_tensor(sel.labels, device=weight.device)]


def pad_speakers(emb: torch.Tensor, acts: torch.Tensor, table: SpeakerTable, absent_pool: Sequence[int],
                 capacity: int, rng: np.random.Generator, distractor_padding_prob: float = 0.5):
    """Fill the enrollment up to ``capacity`` slots.

    Each padded slot is the non-speech embedding or, with probability
    ``distractor_padding_prob``, the table row of a distinct speaker absent
    from the recording.  Padded activity rows are zero.

    Returns (emb N x S, acts N x T', valid N, slot_labels N) where
    slot_labels is -1 for non-speech slots.
    """
    n_loc = emb.shape[0]
    if n_loc > capacity:
        raise ValueError(f"capacity exceeded: {n_loc} local speakers > N={capacity}")
    n_pad = capacity - n_loc
    pool = list(absent_pool)
    pad_labels = []
    if n_pad:
        use_distractor = rng.random(n_pad) < distractor_padding_prob
        picks = list(rng.permutation(pool)[: int(use_distractor.sum())]) if pool else []
        for flag in use_distractor:
            pad_labels.append(int(picks.pop()) if flag and picks else -1)
    pad_idx = torch.as_tensor(pad_labels, dtype=torch.long, device=emb.device)
    weight = table.table
    rows = torch.where((pad_idx >= 0)[:, None], weight[pad_idx.clamp(min=0)],
                       table.non_speech.expand(n_pad, -1)) if n_pad else weight[:0]
    out_emb = torch.cat([emb, rows.to(emb.dtype)], dim=0)
    out_acts = torch.cat([acts, acts.new_zeros(n_pad, acts.shape[1])], dim=0)
    valid = torch.zeros(capacity, dtype=torch.bool, device=emb.device)
    valid[:n_loc] = True
    return out_emb, out_acts, valid, pad_idx


def shuffle_speakers(emb, acts, rng: np.random.Generator, *extra):
    """Apply one random permutation to the embedding rows, activity rows and any extras.

    Returns (emb, acts, *extra, perm); ``perm[i]`` is the source row of output row i.
    """
    if emb.shape[0] != acts.shape[0] or any(e.shape[0] != emb.shape[0] for e in extra):
        raise ValueError("row counts differ")
    perm = rng.permutation(emb.shape[0])
    idx = torch.as_tensor(perm, dtype=torch.long)
    moved = [emb[idx.to(emb.device)], acts[idx.to(acts.device)]] + [e[idx.to(e.device)] for e in extra]
    return (*moved, perm)


# ---------------------------------------------------------------------------
# data


def speaker_label(speaker_id: str) -> int:
    """Table index of a synthetic speaker id (``spk0012`` -> 12)."""
    m = re.search(r"(\d+)$", speaker_id)
    if not m:
        raise ValueError(f"cannot derive a table index from speaker id {speaker_id!r}")
    return int(m.group(1))


@dataclass
class BlockExample:
    feats: torch.Tensor  # C x T x 80
    acts: torch.Tensor  # K x T'  (all speakers of the recording)
    labels: np.ndarray  # K table indices
    recording_id: str = ""
    start: float = 0.0
    xprime: torch.Tensor | None = None  # cached C x T' x F when the extractor is frozen


class BlockDataset:
    def __init__(self, examples: list[BlockExample], name: str = "data"):
        self.examples = examples
        self.name = name

    def __len__(self):
        return len(self.examples)

    @classmethod
    def from_recordings(cls, recordings, plan: BlockPlan, time_stride: int = 1, name: str = "data",
                        options: FeatureOptions | None = None,
                        label_of: Callable[[str], int] = speaker_label,
                        tail_blocks: Sequence[float] = (), silent_blocks: int = 0) -> "BlockDataset":
        """``recordings``: iterable of (Waveform, DiarizationResult).

        Besides the regular block grid, each recording can contribute
        ``tail_blocks`` (seconds of audio before the end, zero-padded to a full
        block as at inference) and ``silent_blocks`` all-zero blocks, both with
        zero targets wherever there is no speech.
        """
        examples = []
        t_out = plan.block_frames // time_stride
        for wave, truth in recordings:
            order = truth.speakers
            labels = np.array([label_of(s) for s in order], dtype=np.int64)
            blocks = block_features(wave, plan, options)
            sr = wave.sample_rate
            for tail in tail_blocks:
                a = int(round(max(wave.duration - tail, 0.0) * sr))
                blk = block_features(Waveform(wave.samples[:, a:], sr), plan, options)[0]
                blocks.append(FeatureBlock(blk.features, len(blocks), a / sr))
            for blk in blocks:
                feats = torch.from_numpy(blk.features.data).permute(2, 0, 1).contiguous()
                acts = activity_from_segments(truth, plan.frame_period * time_stride, t_out, order,
                                              offset=blk.start_time, clip=True)
                examples.append(BlockExample(feats, torch.from_numpy(acts.values), labels,
                                             truth.recording_id, blk.start_time))
            if silent_blocks:
                quiet = Waveform(np.zeros((wave.num_channels, int(round(plan.block_length * sr))), np.float32), sr)
                feats = torch.from_numpy(block_features(quiet, plan, options)[0].features.data).permute(2, 0, 1)
                for _ in range(silent_blocks):
                    examples.append(BlockExample(feats.contiguous(), torch.zeros(len(order), t_out), labels,
                                                 truth.recording_id, -1.0))
        return cls(examples, name)

    def clear_cache(self):
        for ex in self.examples:
            ex.xprime = None

    @torch.no_grad()
    def cache_front_end(self, model: MCS2SND, channels: int | None, batch_size: int = 8):
        was_training = model.training
        model.eval()
        for i in range(0, len(self.examples), batch_size):
            chunk = self.examples[i:i + batch_size]
            feats = torch.stack([_channels(ex.feats, channels) for ex in chunk])
            xp = model.extract_per_channel(feats)
            for ex, x in zip(chunk, xp):
                ex.xprime = x.clone()
        model.train(was_training)


def _channels(feats: torch.Tensor, channels: int | None) -> torch.Tensor:
    return feats if channels is None else feats[:channels]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StageSpec:
    name: str
    frozen: tuple = ()
    learning_rate: float = 1e-4
    mix: dict = field(default_factory=lambda: {"real": 1.0})
    steps: int = 100
    warmup: int = 0
    requires: str | None = None  # stage whose checkpoint must exist first
    add_channel_attention: bool = False

    def __post_init__(self):
        unknown = [g for g in self.frozen if g not in PARAMETER_GROUPS]
        if unknown:
            raise KeyError(f"stage {self.name}: unknown parameter group(s) {unknown}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        total = sum(self.mix.values())
        if total <= 0 or any(w < 0 for w in self.mix.values()):
            raise ValueError(f"stage {self.name}: bad data mix {self.mix}")


_ALL_BUT_CH = ("extractor", "encoder", "detection", "representation", "speaker_table")

DEFAULT_STAGES = {
    "s2snd-1": StageSpec("s2snd-1", ("extractor",), 1e-4, {"sim": 1.0}),
    "s2snd-2": StageSpec("s2snd-2", (), 1e-4, {"sim": 0.5, "real": 0.5}, requires="s2snd-1"),
    "s2snd-3": StageSpec("s2snd-3", (), 1e-5, {"sim": 0.5, "real": 0.5}, requires="s2snd-2"),
    "mc-1": StageSpec("mc-1", _ALL_BUT_CH, 1e-4, {"real": 1.0}, requires="s2snd-3", add_channel_attention=True),
    "mc-2": StageSpec("mc-2", (), 1e-5, {"real": 1.0}, requires="mc-1"),
    "adapt": StageSpec("adapt", (), 1e-5, {"real": 0.5, "dev": 0.5}, requires="mc-2"),
}
STAGE_ORDER = tuple(DEFAULT_STAGES)


def parse_mix(text) -> dict:
    if isinstance(text, dict):
        return {k: float(v) for k, v in text.items()}
    if isinstance(text, (list, tuple)):  # already split on commas by the flat config parser
        text = ",".join(str(p) for p in text)
    out = {}
    for part in str(text).split(","):
        if part.strip():
            name, weight = part.split(":")
            out[name.strip()] = float(weight)
    return out


def load_stage_file(path_or_text) -> dict[str, StageSpec]:
    """INI-style schedule: one ``[stage]`` section of key = value pairs per stage.

    Keys: frozen (comma list), learning_rate, mix (``name:weight,...``),
    steps, warmup, requires, add_channel_attention.  Sections named after a
    default stage start from that stage's settings.
    """
    parser = configparser.ConfigParser()
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) or (
        isinstance(path_or_text, str) and "\n" not in path_or_text and Path(path_or_text).exists()) else path_or_text
    parser.read_string(text)
    stages = {}
    for name in parser.sections():
        sec = parser[name]
        base = DEFAULT_STAGES.get(name, StageSpec(name))
        frozen = base.frozen
        if "frozen" in sec:
            frozen = tuple(g.strip() for g in sec["frozen"].split(",") if g.strip())
        stages[name] = StageSpec(
            name=name,
            frozen=frozen,
            learning_rate=sec.getfloat("learning_rate", base.learning_rate),
            mix=parse_mix(sec["mix"]) if "mix" in sec else dict(base.mix),
            steps=sec.getint("steps", base.steps),
            warmup=sec.getint("warmup", base.warmup),
            requires=sec.get("requires", base.requires) or None,
            add_channel_attention=sec.getboolean("add_channel_attention", base.add_channel_attention),
        )
    return stages


@dataclass
class TrainConfig:
    batch_size: int = 4
    seed: int = 0
    shuffle_speakers: bool = True
    distractor_padding_prob: float = 0.5
    arcface_scale: float = 32.0
    arcface_margin: float = 0.2
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.98)
    grad_clip: float = 5.0
    log_every: int = 10
    # extra training blocks per recording: zero-padded tails (seconds of audio kept) and all-silent blocks
    tail_blocks: tuple = ()
    silent_blocks: int = 0

    def __post_init__(self):
        if not 0 <= self.distractor_padding_prob <= 1:
            raise ValueError("distractor_padding_prob must lie in [0, 1]")
        self.betas = tuple(self.betas)
        self.tail_blocks = tuple(float(t) for t in self.tail_blocks)


def parameter_checksums(model: MCS2SND, groups=PARAMETER_GROUPS) -> dict[str, str]:
    out = {}
    for group in groups:
        h = hashlib.sha256()
        module = getattr(model, group)
        if module is None:
            continue
        for name, p in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        out[group] = h.hexdigest()
    return out


def format_log_line(stage: str, step: int, lr: float, bce: float, arc: float, total: float) -> str:
    return f"stage={stage} step={step} lr={lr:.3e} bce={bce:.6f} arc={arc:.6f} total={total:.6f}"


_LOG_RE = re.compile(
    r"stage=(?P<stage>\S+) step=(?P<step>\d+) lr=(?P<lr>\S+) bce=(?P<bce>\S+) arc=(?P<arc>\S+) total=(?P<total>\S+)"
)


def parse_log_line(line: str) -> dict:
    m = _LOG_RE.fullmatch(line.strip())
    if not m:
        raise ValueError(f"not a training log line: {line!r}")
    d = m.groupdict()
    return {"stage": d["stage"], "step": int(d["step"]), **{k: float(d[k]) for k in ("lr", "bce", "arc", "total")}}


# ---------------------------------------------------------------------------
# optimization


def sample_source(mix: dict, rng: np.random.Generator) -> str:
    names = sorted(mix)
    weights = np.array([mix[n] for n in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=weights / weights.sum()))]


class Trainer:
    """Runs stages on one model; batches are drawn from named block datasets."""

    def __init__(self, model: MCS2SND, datasets: dict[str, BlockDataset], cfg: TrainConfig | None = None,
                 log_path: str | Path | None = None, checkpoint_extra: dict | None = None):
        self.model = model
        self.checkpoint_extra = dict(checkpoint_extra or {})
        self.datasets = datasets
        self.cfg = cfg or TrainConfig()
        self.ap = ArcFaceParams(self.cfg.arcface_scale, self.cfg.arcface_margin)
        self.log_path = Path(log_path) if log_path else None
        self.history: list[dict] = []

    @property
    def channels(self) -> int | None:
        return None if self.model.cfg.channel_attention else 1

    def _build_sample(self, ex: BlockExample, rng: np.random.Generator):
        table = self.model.speaker_table
        n_all = table.num_speakers
        sel = SpeakerSelection(ex.labels, n_all)
        emb = lookup_embeddings(sel, table)
        absent = sorted(set(range(n_all)) - set(ex.labels.tolist()))
        emb, acts, valid, pad_labels = pad_speakers(
            emb, ex.acts, table, absent, self.model.cfg.capacity, rng, self.cfg.distractor_padding_prob)
        labels = torch.cat([torch.as_tensor(ex.labels), pad_labels])
        if self.cfg.shuffle_speakers:
            emb, acts, valid, labels, _ = shuffle_speakers(emb, acts, rng, valid, labels)
        return emb, acts, valid, labels

    def batch_loss(self, examples: Sequence[BlockExample], rng: np.random.Generator, use_cache: bool) -> dict:
        samples = [self._build_sample(ex, rng) for ex in examples]
        emb = torch.stack([s[0] for s in samples])
        acts = torch.stack([s[1] for s in samples])
        valid = torch.stack([s[2] for s in samples])
        labels = torch.stack([s[3] for s in samples])
        if use_cache:
            xprime = torch.stack([ex.xprime for ex in examples])
        else:
            xprime = self.model.extract_per_channel(torch.stack([_channels(ex.feats, self.channels) for ex in examples]))
        x = self.model.fuse_channels(xprime)
        xhat = self.model.encode(x)
        pred = self.model.detect(xhat, emb)
        ext, has_speech = self.model.represent(x, acts)
        keep = valid & has_speech
        return total_loss(pred, acts, ext[keep], labels[keep], self.model.speaker_table.table, self.ap)

    def run_stage(self, stage: StageSpec, checkpoint_dir: str | Path | None = None, start_step: int = 0,
                  optimizer_state: dict | None = None, stage_index: int = 0) -> dict:
        model = self.model
        frozen = set(stage.frozen)
        for name, p in model.named_parameters():
            p.requires_grad_(model.group_of(name) not in frozen)
        params = [p for p in model.parameters() if p.requires_grad]
        if not params:
            raise ValueError(f"stage {stage.name} freezes every parameter")
        opt = torch.optim.AdamW(params, lr=stage.learning_rate, betas=self.cfg.betas,
                                weight_decay=self.cfg.weight_decay)
        if optimizer_state is not None:
            opt.load_state_dict(optimizer_state)
        missing = [s for s in stage.mix if s not in self.datasets]
        if missing:
            raise KeyError(f"stage {stage.name} needs datasets {missing}; have {sorted(self.datasets)}")
        use_cache = "extractor" in frozen
        if use_cache:
            for name in stage.mix:
                self.datasets[name].cache_front_end(model, self.channels)
        frozen_before = parameter_checksums(model, [g for g in PARAMETER_GROUPS if g in frozen])
        model.train()
        sources = []
        last = {}
        for step in range(start_step, stage.steps):
            rng = np.random.default_rng([self.cfg.seed, stage_index, step])
            torch.manual_seed(int(rng.integers(2 ** 31)))
            source = sample_source(stage.mix, rng)
            sources.append(source)
            data = self.datasets[source]
            idx = rng.integers(len(data), size=self.cfg.batch_size)
            lr = stage.learning_rate * min(1.0, (step + 1) / stage.warmup) if stage.warmup else stage.learning_rate
            for group in opt.param_groups:
                group["lr"] = lr
            losses = self.batch_loss([data.examples[i] for i in idx], rng, use_cache)
            if not torch.isfinite(losses["total"]):
                raise TrainingDiverged(f"stage {stage.name} step {step}: loss is {losses['total'].item()}")
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            if self.cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
            opt.step()
            last = {k: float(v.detach()) for k, v in losses.items()}
            record = {"stage": stage.name, "step": step + 1, "lr": lr, **last}
            self.history.append(record)
            if (step + 1) % self.cfg.log_every == 0 or step + 1 == stage.steps:
                line = format_log_line(stage.name, step + 1, lr, last["bce"], last["arc"], last["total"])
                log.info(line)
                if self.log_path:
                    with open(self.log_path, "a") as fh:
                        fh.write(line + "\n")
        if use_cache:
            for name in stage.mix:
                self.datasets[name].clear_cache()
        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()
        frozen_after = parameter_checksums(model, [g for g in PARAMETER_GROUPS if g in frozen])
        if frozen_before != frozen_after:
            raise AssertionError(f"stage {stage.name} modified frozen parameters")
        result = {"stage": stage.name, "sources": sources, "last": last, "optimizer": opt.state_dict()}
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"{stage.name}.safetensors"
            save_checkpoint(model, path, {**self.checkpoint_extra, "stage": stage.name, "steps": stage.steps})
            torch.save({"optimizer": opt.state_dict(), "step": stage.steps}, Path(checkpoint_dir) / f"{stage.name}.opt.pt")
            result["checkpoint"] = path
        return result


def run_schedule(model: MCS2SND, datasets: dict[str, BlockDataset], stages: Sequence[StageSpec],
                 cfg: TrainConfig | None = None, checkpoint_dir=None, log_path=None) -> MCS2SND:
    """Run stages in order, grafting channel attention where a stage asks for it."""
    for i, stage in enumerate(stages):
        if stage.add_channel_attention and not model.cfg.channel_attention:
            model = model.add_channel_attention()
        trainer = Trainer(model, datasets, cfg, log_path)
        trainer.run_stage(stage, checkpoint_dir, stage_index=STAGE_ORDER.index(stage.name)
                          if stage.name in STAGE_ORDER else 100 + i)
    return model


# ---------------------------------------------------------------------------
# extractor pretraining


class PretrainHead(torch.nn.Module):
    """Utterance-level statistics pooling + linear embedding + ArcFace class weights."""

    def __init__(self, extractor_dim: int, embedding_dim: int, num_classes: int):
        super().__init__()
        self.proj = torch.nn.Linear(2 * extractor_dim, embedding_dim)
        self.classes = torch.nn.Parameter(torch.randn(num_classes, embedding_dim) / math.sqrt(embedding_dim))

    def forward(self, xprime):
        # xprime: B x 1 x T' x F
        h = xprime[:, 0]
        stats = torch.cat([h.mean(dim=1), torch.sqrt(h.var(dim=1, unbiased=False) + 1e-5)], dim=-1)
        return self.proj(stats)


def clip_features(waves, options: FeatureOptions | None = None) -> torch.Tensor:
    options = options or FeatureOptions()
    out = []
    for w in waves:
        n = int(w.duration / 0.010)
        feats = logmel(normalize_wave(w, options.wave_norm), n)
        if options.feature_norm:
            feats = normalize_block(feats)
        out.append(torch.from_numpy(feats.data).permute(2, 0, 1))
    return torch.stack(out)


def pretrain_extractor(model: MCS2SND, feats: torch.Tensor, labels, steps: int = 300, lr: float = 1e-3,
                       batch_size: int = 16, seed: int = 0, ap: ArcFaceParams | None = None,
                       embedding_dim: int | None = None, history: list | None = None):
    """Train ``model.extractor`` as a closed-set speaker classifier; returns the head.

    ``feats`` is K x 1 x T x 80 for single-speaker clips with integer labels.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    num_classes = int(labels.max()) + 1
    if len(torch.unique(labels)) < 2:
        raise ValueError("pretraining needs at least two speaker classes")
    ap = ap or ArcFaceParams()
    gen = torch.Generator().manual_seed(seed)
    head = PretrainHead(model.cfg.extractor_dim, embedding_dim or model.cfg.embedding_dim, num_classes)
    params = list(model.extractor.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.01)
    model.extractor.train()
    for step in range(steps):
        idx = torch.randint(len(labels), (batch_size,), generator=gen)
        emb = head(model.extractor(feats[idx]))
        loss = arcface_loss(emb, labels[idx], head.classes, ap)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if history is not None:
            history.append(float(loss.detach()))
    model.extractor.eval()
    return head


@torch.no_grad()
def pretrain_accuracy(model: MCS2SND, head: PretrainHead, feats: torch.Tensor, labels, batch_size: int = 32) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    correct = 0
    for i in range(0, len(labels), batch_size):
        emb = F.normalize(head(model.extractor(feats[i:i + batch_size])), dim=-1)
        pred = (emb @ F.normalize(head.classes, dim=-1).T).argmax(dim=-1)
        correct += int((pred == labels[i:i + batch_size]).sum())
    return correct / len(labels)
