"""Scalar reference implementations used to cross-check the vectorized code."""

import math

import numpy as np
import torch

from mcs2snd.model import MCS2SND, ModelConfig


def bce_oracle(pred, truth):
    total = 0.0
    count = 0
    for prow, trow in zip(pred, truth):
        for p, y in zip(prow, trow):
            p = min(max(float(p), 1e-7), 1 - 1e-7)
            total -= y * math.log(p) + (1 - y) * math.log(1 - p)
            count += 1
    return total / count


def arcface_oracle(ext, labels, table, scale=32.0, margin=0.2):
    losses = []
    for e, y in zip(ext, labels):
        en = math.sqrt(sum(v * v for v in e))
        logits = []
        for j, w in enumerate(table):
            wn = math.sqrt(sum(v * v for v in w))
            c = sum(a * b for a, b in zip(e, w)) / (en * wn)
            c = min(max(c, -1 + 1e-7), 1 - 1e-7)
            theta = math.acos(c)
            logits.append(scale * (math.cos(theta + margin) if j == y else math.cos(theta)))
        top = max(logits)
        lse = top + math.log(sum(math.exp(z - top) for z in logits))
        losses.append(lse - logits[int(y)])
    return sum(losses) / len(losses) if losses else 0.0


def micro_config(**kw):
    base = dict(feature_dim=16, extractor_widths=(2, 4), extractor_dim=8, attention_dim=8, heads=2, ff_dim=16,
                ch_attn_blocks=1, encoder_blocks=1, decoder_blocks=1, conv_kernel=3, embedding_dim=4,
                capacity=3, num_speakers_total=6, channel_attention=True)
    base.update(kw)
    return ModelConfig(**base)


def micro_model(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    model = MCS2SND(micro_config(**kw)).to(dtype)
    # randomize the identity-initialized pieces so every path carries signal
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return model.eval()


def random_activity(rng, n, t, p=0.4):
    acts = (rng.random((n, t)) < p).astype(np.float64)
    for i in range(n):
        if not acts[i].any():
            acts[i, rng.integers(t)] = 1.0
    return acts
