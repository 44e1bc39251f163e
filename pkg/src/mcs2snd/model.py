"""Multi-channel sequence-to-sequence diarization network.

Shapes used throughout (batch first)::

    feats   B x C x T x 80     normalized log Mel blocks
    xprime  B x C x T' x F     per-channel extractor output
    x       B x T' x F         channel-fused front-end output
    xhat    B x T' x D         encoder output
    emb     B x N x S          enrollment / extracted speaker embeddings
    acts    B x N x T'         speaker activities
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = "1"

PARAMETER_GROUPS = ("extractor", "channel_attention", "encoder", "detection", "representation", "speaker_table")


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 80
    extractor_widths: tuple = (8, 16, 32, 64)
    extractor_time_stride: int = 1
    extractor_dim: int = 64  # F
    attention_dim: int = 64  # D
    heads: int = 4
    ff_dim: int = 128
    ch_attn_blocks: int = 2
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    conv_kernel: int = 15
    embedding_dim: int = 32  # S
    capacity: int = 8  # N
    num_speakers_total: int = 64  # N_all
    channel_attention: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        self.extractor_widths = tuple(int(w) for w in self.extractor_widths)
        if self.attention_dim % self.heads or self.extractor_dim % self.heads:
            raise ValueError("attention_dim and extractor_dim must be divisible by heads")
        stride = self.extractor_time_stride
        if stride < 1 or stride & (stride - 1) or stride > 2 ** len(self.extractor_widths):
            raise ValueError("extractor_time_stride must be a power of two reachable by the stages")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v <= 0 and f.name != "dropout":
                raise ValueError(f"{f.name} must be positive")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @classmethod
    def paper_scale(cls, **kw) -> "ModelConfig":
        """Dimensions of the published system (ResNet widths, 512-d/8-head blocks)."""
        base = dict(extractor_widths=(64, 128, 256, 512), extractor_dim=512, attention_dim=512, heads=8,
                    ff_dim=1024, encoder_blocks=6, decoder_blocks=6, embedding_dim=256, capacity=30)
        base.update(kw)
        return cls(**base)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Interleaved sin/cos table: even columns sin, odd columns cos."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__(nn.LayerNorm(dim), nn.Linear(dim, hidden), nn.SiLU(), nn.Dropout(dropout),
                         nn.Linear(hidden, dim), nn.Dropout(dropout))


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block over the second-to-last axis of a (B', L, dim) tensor."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ff = FeedForward(dim, ff_dim, dropout)

    def forward(self, x, key_padding_mask=None):
        h = self.norm(x)
        x = x + self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)[0]
        return x + self.ff(x)


# ---------------------------------------------------------------------------
# front-end


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: tuple[int, int]):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, padding_mode="replicate")
        self.shortcut = None
        if stride != (1, 1) or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)
        nn.init.kaiming_normal_(self.conv1.weight, nonlinearity="relu")
        nn.init.kaiming_normal_(self.conv2.weight, nonlinearity="relu")
        # keep the residual branch small at init since there is no normalization
        self.conv2.weight.data.mul_(0.3)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(identity + self.conv2(F.relu(self.conv1(x))))


class Extractor(nn.Module):
    """Residual conv trunk over (time x mel) with frame-wise statistics pooling.

    Each stage halves the frequency axis; the first log2(time_stride) stages
    also halve time.  Pooling takes mean and std over the remaining frequency
    bins of every frame and projects the 2W statistics to ``extractor_dim``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.extractor_widths
        self.stem = nn.Conv2d(1, widths[0], 3, padding=1, padding_mode="replicate")
        time_halvings = int(math.log2(cfg.extractor_time_stride))
        stages, cin = [], widths[0]
        for i, w in enumerate(widths):
            stages.append(BasicBlock(cin, w, (2 if i < time_halvings else 1, 2)))
            cin = w
        self.stages = nn.Sequential(*stages)
        self.proj = nn.Linear(2 * widths[-1], cfg.extractor_dim)
        self.norm = nn.LayerNorm(cfg.extractor_dim)
        self.time_stride = cfg.extractor_time_stride

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """B x C x T x 80 -> B x C x T' x F, channels processed independently."""
        b, c, t, f = feats.shape
        if t % self.time_stride:
            raise ValueError(f"T={t} is not divisible by the extractor time stride {self.time_stride}")
        h = self.stages(F.relu(self.stem(feats.reshape(b * c, 1, t, f))))
        mean = h.mean(dim=3)
        std = torch.sqrt(h.var(dim=3, unbiased=False) + 1e-5)
        stats = torch.cat([mean, std], dim=1).transpose(1, 2)  # (B*C) x T' x 2W
        out = self.norm(self.proj(stats))
        return out.reshape(b, c, out.shape[1], -1)


class ChannelAttention(nn.Module):
    """Self-attention across channels at each frame, then the channel mean."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.extractor_dim, cfg.heads, cfg.ff_dim, cfg.dropout) for _ in range(cfg.ch_attn_blocks)
        )

    def zero_residuals(self):
        """Make every block an identity map (used when grafting onto a trained single-channel model)."""
        for blk in self.blocks:
            nn.init.zeros_(blk.attn.out_proj.weight)
            nn.init.zeros_(blk.attn.out_proj.bias)
            nn.init.zeros_(blk.ff[-2].weight)
            nn.init.zeros_(blk.ff[-2].bias)

    def forward(self, xprime: torch.Tensor) -> torch.Tensor:
        b, c, t, f = xprime.shape
        h = xprime.permute(0, 2, 1, 3).reshape(b * t, c, f)
        for blk in self.blocks:
            h = blk(h)
        return h.mean(dim=1).reshape(b, t, f)


# ---------------------------------------------------------------------------
# encoder


class ConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = F.glu(self.pointwise_in(self.norm(x).transpose(1, 2)), dim=1)
        h = self.depthwise(h).transpose(1, 2)
        h = F.silu(self.mid_norm(h)).transpose(1, 2)
        return self.dropout(self.pointwise_out(h).transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.ff1 = FeedForward(dim, ff_dim, dropout)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.conv = ConvModule(dim, kernel, dropout)
        self.ff2 = FeedForward(dim, ff_dim, dropout)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.input = nn.Linear(cfg.extractor_dim, cfg.attention_dim)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.attention_dim, cfg.heads, cfg.ff_dim, cfg.conv_kernel, cfg.dropout)
            for _ in range(cfg.encoder_blocks)
        )

    def forward(self, x):
        h = self.input(x)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype).to(h.device)
        for blk in self.blocks:
            h = blk(h)
        return h


# ---------------------------------------------------------------------------
# decoders


class DetectionBlock(nn.Module):
    """Time attention inside each speaker stream, attention across speakers per frame, feed-forward."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.time_norm = nn.LayerNorm(dim)
        self.time_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.spk_norm = nn.LayerNorm(dim)
        self.spk_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ff = FeedForward(dim, ff_dim, dropout)

    def forward(self, h):
        b, n, t, d = h.shape
        x = h.reshape(b * n, t, d)
        y = self.time_norm(x)
        x = x + self.time_attn(y, y, y, need_weights=False)[0]
        x = x.reshape(b, n, t, d).transpose(1, 2).reshape(b * t, n, d)
        y = self.spk_norm(x)
        x = x + self.spk_attn(y, y, y, need_weights=False)[0]
        x = x + self.ff(x)
        return x.reshape(b, t, n, d).transpose(1, 2)


class DetectionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.query = nn.Linear(cfg.embedding_dim, cfg.attention_dim)
        self.blocks = nn.ModuleList(
            DetectionBlock(cfg.attention_dim, cfg.heads, cfg.ff_dim, cfg.dropout) for _ in range(cfg.decoder_blocks)
        )
        self.out_norm = nn.LayerNorm(cfg.attention_dim)
        self.head = nn.Linear(cfg.attention_dim, 1)

    def logits(self, xhat, emb):
        # enrollment vectors enter at unit length: table rows in training, decoder outputs at inference
        emb = F.normalize(emb, dim=-1, eps=1e-12)
        h = xhat[:, None, :, :] + self.query(emb)[:, :, None, :]
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.out_norm(h)).squeeze(-1)


class RepresentationBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ff = FeedForward(dim, ff_dim, dropout)

    def forward(self, q, memory, mask):
        q = q + self.attn(self.norm(q), memory, memory, attn_mask=mask, need_weights=False)[0]
        return q + self.ff(q)


class RepresentationDecoder(nn.Module):
    """A shared learned query pools the frames each speaker is active in."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.memory = nn.Sequential(nn.Linear(cfg.extractor_dim, cfg.attention_dim), nn.LayerNorm(cfg.attention_dim))
        self.query = nn.Parameter(torch.randn(cfg.attention_dim) * 0.02)
        self.blocks = nn.ModuleList(
            RepresentationBlock(cfg.attention_dim, cfg.heads, cfg.ff_dim, cfg.dropout) for _ in range(cfg.decoder_blocks)
        )
        self.out_norm = nn.LayerNorm(cfg.attention_dim)
        self.head = nn.Linear(cfg.attention_dim, cfg.embedding_dim)
        self.heads = cfg.heads

    def forward(self, x, acts):
        """Returns unnormalized B x N x S outputs and the B x N validity mask."""
        b, n, t = acts.shape
        active = acts > 0.5
        valid = active.any(dim=-1)
        # empty rows attend everywhere; their output is replaced by the null embedding
        active = active | ~valid[..., None]
        mask = torch.zeros(b, n, t, dtype=x.dtype, device=x.device).masked_fill(~active, float("-inf"))
        mask = mask.repeat_interleave(self.heads, dim=0)
        memory = self.memory(x)
        q = self.query.expand(b, n, -1)
        for blk in self.blocks:
            q = blk(q, memory, mask)
        return self.head(self.out_norm(q)), valid


class SpeakerTable(nn.Module):
    """Learnable global speaker embeddings plus the non-speech padding embedding."""

    def __init__(self, num_speakers: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.randn(num_speakers, dim) / math.sqrt(dim))
        self.non_speech = nn.Parameter(torch.randn(dim) / math.sqrt(dim))

    @property
    def num_speakers(self) -> int:
        return self.table.shape[0]


# ---------------------------------------------------------------------------
# full model


class MCS2SND(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.extractor = Extractor(cfg)
        self.channel_attention = ChannelAttention(cfg) if cfg.channel_attention else None
        self.encoder = Encoder(cfg)
        self.detection = DetectionDecoder(cfg)
        self.representation = RepresentationDecoder(cfg)
        self.speaker_table = SpeakerTable(cfg.num_speakers_total, cfg.embedding_dim)

    def group_parameters(self, group: str):
        if group not in PARAMETER_GROUPS:
            raise KeyError(f"unknown parameter group {group!r}; known: {PARAMETER_GROUPS}")
        module = getattr(self, group)
        return [] if module is None else list(module.parameters())

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    # stages of the forward pass -------------------------------------------------

    def extract_per_channel(self, feats):
        return self.extractor(feats)

    def fuse_channels(self, xprime):
        if self.channel_attention is None:
            # single-channel model: the reference channel goes straight through
            return xprime[:, 0]
        return self.channel_attention(xprime)

    def front_end(self, feats):
        xprime = self.extract_per_channel(feats)
        return xprime, self.fuse_channels(xprime)

    def encode(self, x):
        return self.encoder(x)

    def detect_logits(self, xhat, emb):
        if emb.shape[1] != self.cfg.capacity:
            raise ValueError(f"detect needs exactly N={self.cfg.capacity} embeddings, got {emb.shape[1]}")
        return self.detection.logits(xhat, emb)

    def detect(self, xhat, emb):
        return torch.sigmoid(self.detect_logits(xhat, emb))

    def null_embedding(self):
        e = self.speaker_table.non_speech
        return e / e.norm()

    def represent(self, x, acts):
        """Unit-length embeddings (B x N x S) and validity; empty rows get the null embedding."""
        raw, valid = self.representation(x, acts)
        emb = F.normalize(raw, dim=-1, eps=1e-12)
        emb = torch.where(valid[..., None], emb, self.null_embedding().to(emb.dtype).expand_as(emb))
        return emb, valid

    def forward(self, feats, emb, acts):
        _, x = self.front_end(feats)
        xhat = self.encode(x)
        ext, valid = self.represent(x, acts)
        return {"logits": self.detect_logits(xhat, emb), "embeddings": ext, "valid": valid}

    def add_channel_attention(self) -> "MCS2SND":
        """Copy of this model with a fresh, identity-initialized channel-attention module."""
        cfg = ModelConfig(**{**asdict(self.cfg), "channel_attention": True})
        mc = MCS2SND(cfg)
        missing, unexpected = mc.load_state_dict(self.state_dict(), strict=False)
        assert not unexpected and all(k.startswith("channel_attention.") for k in missing)
        mc.channel_attention.zero_residuals()
        return mc


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MCS2SND, path, extra: dict | None = None) -> Path:
    from safetensors.torch import save_file

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    metadata = {
        "format_version": CHECKPOINT_VERSION,
        "config": json.dumps(asdict(model.cfg), sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    save_file(tensors, str(path), metadata=metadata)
    return path


def load_checkpoint(path, with_extra: bool = False):
    from safetensors import safe_open

    path = Path(path)
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except FileNotFoundError:
        raise
    except Exception as exc:  # safetensors raises its own error types for damaged headers
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    version = metadata.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version!r} != expected {CHECKPOINT_VERSION!r}")
    try:
        cfg = ModelConfig(**json.loads(metadata["config"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has no usable config: {exc}") from exc
    model = MCS2SND(cfg)
    expected = set(model.state_dict())
    missing = sorted(expected - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    model.load_state_dict(tensors, strict=True)
    model.eval()
    if with_extra:
        return model, json.loads(metadata.get("extra", "{}"))
    return model
