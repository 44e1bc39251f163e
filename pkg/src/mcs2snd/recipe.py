"""Desk-scale training recipe on synthetic corpora.

Three corpora stand in for the data sources of the staged schedule:
``real`` is the fixed multi-channel training set, ``sim`` adds single-channel
conversations drawn from a larger speaker pool, and ``dev`` is eval-domain
data used only by the adaptation stage.  Recipe settings are flat
``section.key = value`` pairs so they can live in a text file and be
overridden from the command line.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .core import BlockPlan, dump_kv, parse_kv, update_dataclass
from .model import MCS2SND, ModelConfig, load_checkpoint, save_checkpoint
from .simulate import CorpusSpec, generate_corpus, speaker_clips
from .train import (
    DEFAULT_STAGES,
    STAGE_ORDER,
    BlockDataset,
    StageSpec,
    TrainConfig,
    Trainer,
    clip_features,
    pretrain_accuracy,
    pretrain_extractor,
)

log = logging.getLogger(__name__)


def _real_corpus():
    return CorpusSpec(num_conversations=8, duration=60.0, min_speakers=2, max_speakers=4, speaker_pool=16,
                      channel_count=2, channel_snrs=(-5.0, 20.0), channel_delays=(0, 3), channel_gains=(1.0, 0.8),
                      seed=1, prefix="real")


def _sim_corpus():
    # same channel setup as the real corpus so the multi-channel stages can use it too
    return CorpusSpec(num_conversations=96, duration=60.0, min_speakers=1, max_speakers=4, speaker_pool=64,
                      channel_count=2, channel_snrs=(-5.0, 20.0), channel_delays=(0, 3), channel_gains=(1.0, 0.8),
                      seed=2, prefix="sim")


def _dev_corpus():
    return CorpusSpec(num_conversations=8, duration=60.0, min_speakers=2, max_speakers=4, speaker_pool=16,
                      channel_count=2, channel_snrs=(-5.0, 20.0), channel_delays=(0, 3), channel_gains=(1.0, 0.8),
                      seed=3, prefix="dev")


def _stages():
    # desk-scale schedule: larger learning rates and step counts sized for a CPU run
    steps = {"s2snd-1": 6000, "s2snd-2": 2000, "s2snd-3": 1000, "mc-1": 1500, "mc-2": 1000, "adapt": 300}
    lrs = {"s2snd-1": 1e-3, "s2snd-2": 5e-4, "s2snd-3": 1e-4, "mc-1": 1e-3, "mc-2": 1e-4, "adapt": 1e-5}
    mix = {"s2snd-1": {"sim": 0.5, "real": 0.5}, "mc-1": {"sim": 0.5, "real": 0.5},
           "mc-2": {"sim": 0.5, "real": 0.5}, "adapt": {"sim": 1 / 3, "real": 1 / 3, "dev": 1 / 3}}
    return {name: dataclasses.replace(spec, steps=steps[name], learning_rate=lrs[name],
                                      warmup=100 if name == "s2snd-1" else 0,
                                      mix=mix.get(name, dict(spec.mix)))
            for name, spec in DEFAULT_STAGES.items()}


@dataclass
class PretrainConfig:
    speakers: int = 64
    clips_per_speaker: int = 8
    clip_seconds: float = 2.0
    snr: float = 10.0
    steps: int = 200
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class Recipe:
    real: CorpusSpec = field(default_factory=_real_corpus)
    sim: CorpusSpec = field(default_factory=_sim_corpus)
    dev: CorpusSpec = field(default_factory=_dev_corpus)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(extractor_time_stride=4))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(log_every=50, tail_blocks=(1.0, 2.5, 4.0, 5.5, 7.0),
                                                                   silent_blocks=1))
    stages: dict = field(default_factory=_stages)
    plan: BlockPlan = field(default_factory=BlockPlan)
    torch_seed: int = 0

    def apply(self, values: dict) -> "Recipe":
        """Copy with flat ``section.key`` (or ``stage.<name>.key``) values applied."""
        out = dataclasses.replace(self, stages=dict(self.stages))
        for key, value in values.items():
            parts = key.split(".")
            if parts[0] == "stage" and len(parts) == 3:
                name, attr = parts[1], parts[2]
                if name not in out.stages:
                    raise KeyError(f"unknown stage {name!r}")
                if attr == "mix" and not isinstance(value, dict):
                    from .train import parse_mix
                    value = parse_mix(value)
                out.stages[name] = update_dataclass(out.stages[name], {attr: value})
            elif len(parts) == 2 and parts[0] in ("real", "sim", "dev", "model", "pretrain", "train", "plan"):
                section = getattr(out, parts[0])
                setattr(out, parts[0], update_dataclass(section, {parts[1]: value}))
            elif key == "torch_seed":
                out.torch_seed = int(value)
            else:
                raise KeyError(f"unknown recipe key {key!r}")
        return out

    def flat(self) -> dict:
        out = {}
        for section in ("real", "sim", "dev", "model", "pretrain", "train", "plan"):
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        for name, spec in self.stages.items():
            for k, v in dataclasses.asdict(spec).items():
                if k == "mix":
                    v = ",".join(f"{a}:{b}" for a, b in v.items())
                out[f"stage.{name}.{k}"] = v
        out["torch_seed"] = self.torch_seed
        return out

    def dump(self) -> str:
        return dump_kv({k: v for k, v in self.flat().items() if v is not None and not isinstance(v, dict)})

    @classmethod
    def from_text(cls, text: str) -> "Recipe":
        return cls().apply(parse_kv(text))


def build_datasets(recipe: Recipe, sources=("real", "sim", "dev")) -> dict[str, BlockDataset]:
    stride = recipe.model.extractor_time_stride
    out = {}
    for name in sources:
        convs = generate_corpus(getattr(recipe, name))
        out[name] = BlockDataset.from_recordings([(c.wave, c.truth) for c in convs], recipe.plan, stride, name,
                                                 tail_blocks=recipe.train.tail_blocks,
                                                 silent_blocks=recipe.train.silent_blocks)
    return out


def pretrain(model: MCS2SND, recipe: Recipe) -> float:
    """Speaker-classification warm start of the extractor; returns held-out clip accuracy."""
    pc = recipe.pretrain
    speakers = list(range(pc.speakers))
    waves, labels = speaker_clips(speakers, pc.clips_per_speaker, pc.clip_seconds, recipe.real.voice_seed,
                                  pc.seed, pc.snr)
    head = pretrain_extractor(model, clip_features(waves), labels, pc.steps, pc.learning_rate, seed=pc.seed)
    waves, labels = speaker_clips(speakers, 2, pc.clip_seconds, recipe.real.voice_seed, pc.seed + 1, pc.snr)
    return pretrain_accuracy(model, head, clip_features(waves), labels)


def pretrained_model(recipe: Recipe, out_dir=None) -> MCS2SND:
    """Fresh model with a pretrained extractor, reusing ``out_dir/pretrained.safetensors`` if present."""
    path = Path(out_dir) / "pretrained.safetensors" if out_dir is not None else None
    if path is not None and path.exists():
        return load_checkpoint(path)
    torch.manual_seed(recipe.torch_seed)
    model = MCS2SND(recipe.model)
    acc = pretrain(model, recipe)
    log.info("extractor pretraining: held-out clip accuracy %.3f", acc)
    if path is not None:
        save_checkpoint(model, path, {"stage": "pretrain", "accuracy": acc})
    return model


def stage_checkpoint(out_dir, stage: str) -> Path:
    return Path(out_dir) / f"{stage}.safetensors"


def run_recipe(recipe: Recipe, out_dir, stages=STAGE_ORDER, datasets: dict | None = None, resume: bool = False,
               log_path=None) -> dict:
    """Run ``stages`` in order, saving a checkpoint after each; returns stage -> checkpoint path.

    A stage that needs an earlier one loads that stage's checkpoint from
    ``out_dir``.  With ``resume``, stages whose checkpoint already exists are
    skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "recipe.txt").write_text(recipe.dump())
    stages = list(stages)
    for name in stages:
        if name not in recipe.stages:
            raise KeyError(f"unknown stage {name!r}; known: {sorted(recipe.stages)}")
    first = recipe.stages[stages[0]]
    model = None
    if first.requires:
        prev = stage_checkpoint(out_dir, first.requires)
        if not prev.exists():
            raise FileNotFoundError(f"stage {first.name} needs the {first.requires} checkpoint {prev}")
        model = load_checkpoint(prev)
    needed = sorted({src for name in stages for src in recipe.stages[name].mix})
    if datasets is None:
        datasets = build_datasets(recipe, needed)
    done = {}
    timings = {}
    for name in stages:
        spec: StageSpec = recipe.stages[name]
        path = stage_checkpoint(out_dir, name)
        if resume and path.exists():
            model = load_checkpoint(path)
            done[name] = path
            continue
        if model is None:
            model = pretrained_model(recipe, out_dir)
        if spec.add_channel_attention and not model.cfg.channel_attention:
            model = model.add_channel_attention()
        t0 = time.time()
        index = STAGE_ORDER.index(name) if name in STAGE_ORDER else 100 + stages.index(name)
        extra = {"channels": recipe.real.channel_count if model.cfg.channel_attention else 1}
        Trainer(model, datasets, recipe.train, log_path, extra).run_stage(spec, out_dir, stage_index=index)
        timings[name] = round(time.time() - t0, 1)
        done[name] = path
    (out_dir / "timings.json").write_text(json.dumps(timings, indent=1))
    return done
