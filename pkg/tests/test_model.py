import numpy as np
import pytest
import torch

from mcs2snd.model import (
    CheckpointError,
    MCS2SND,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_positions,
)
from oracles import micro_model, random_activity


def _inputs(model, rng, b=2, c=2, t=20, dtype=torch.float64):
    cfg = model.cfg
    feats = torch.as_tensor(rng.standard_normal((b, c, t, cfg.feature_dim)), dtype=dtype)
    emb = torch.nn.functional.normalize(torch.as_tensor(rng.standard_normal((b, cfg.capacity, cfg.embedding_dim)),
                                                        dtype=dtype), dim=-1)
    acts = torch.as_tensor(np.stack([random_activity(rng, cfg.capacity, t // cfg.extractor_time_stride)
                                     for _ in range(b)]), dtype=dtype)
    return feats, emb, acts


def test_shapes_and_ranges():
    model = micro_model()
    feats, emb, acts = _inputs(model, np.random.default_rng(0))
    out = model(feats, emb, acts)
    assert out["logits"].shape == (2, 3, 20)
    assert out["embeddings"].shape == (2, 3, 4)
    norms = out["embeddings"].norm(dim=-1)
    torch.testing.assert_close(norms, torch.ones_like(norms))
    probs = model.detect(model.encode(model.front_end(feats)[1]), emb)
    assert ((probs > 0) & (probs < 1)).all()


def test_time_stride_shortens_sequence():
    model = micro_model(extractor_time_stride=4)
    feats = torch.zeros(1, 2, 40, 16, dtype=torch.float64)
    xprime, x = model.front_end(feats)
    assert xprime.shape == (1, 2, 10, 8) and x.shape == (1, 10, 8)
    with pytest.raises(ValueError):
        model.front_end(torch.zeros(1, 1, 42, 16, dtype=torch.float64))


def test_wrong_capacity_rejected():
    model = micro_model()
    xhat = torch.zeros(1, 5, 8, dtype=torch.float64)
    with pytest.raises(ValueError, match="N=3"):
        model.detect(xhat, torch.zeros(1, 2, 4, dtype=torch.float64))


def test_empty_rows_get_null_embedding():
    model = micro_model()
    rng = np.random.default_rng(1)
    feats, _, acts = _inputs(model, rng, b=1)
    acts[0, 1] = 0
    _, x = model.front_end(feats)
    emb, valid = model.represent(x, acts)
    assert valid.tolist() == [[True, False, True]]
    torch.testing.assert_close(emb[0, 1], model.null_embedding())


def test_positional_encoding_interleaved():
    pe = sinusoidal_positions(7, 6, torch.float64)
    pos = torch.arange(7, dtype=torch.float64)[:, None]
    freq = 10000 ** (-torch.arange(0, 6, 2, dtype=torch.float64) / 6)
    torch.testing.assert_close(pe[:, 0::2], torch.sin(pos * freq))
    torch.testing.assert_close(pe[:, 1::2], torch.cos(pos * freq))
    model = micro_model(channel_attention=False)
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    # the encoder is order-aware: reversing time does not simply reverse its output
    assert not torch.allclose(model.encode(x.flip(1)), model.encode(x).flip(1), atol=1e-6)


def test_grafted_channel_attention_starts_as_channel_mean():
    torch.manual_seed(0)
    sc = MCS2SND(ModelConfig(feature_dim=16, extractor_widths=(2, 4), extractor_dim=8, attention_dim=8, heads=2,
                             ff_dim=16, embedding_dim=4, capacity=3, num_speakers_total=6)).double()
    mc = sc.add_channel_attention().double()
    assert mc.channel_attention is not None and sc.channel_attention is None
    feats = torch.randn(1, 1, 20, 16, dtype=torch.float64)
    torch.testing.assert_close(mc.front_end(feats)[1], sc.front_end(feats)[1])
    two = torch.randn(1, 2, 20, 16, dtype=torch.float64)
    xprime = mc.extract_per_channel(two)
    torch.testing.assert_close(mc.fuse_channels(xprime), xprime.mean(dim=1))


def test_identical_channels_match_single_channel():
    model = micro_model()
    feats = torch.randn(1, 1, 20, 16, dtype=torch.float64)
    one = model.front_end(feats)[1]
    three = model.front_end(feats.expand(1, 3, 20, 16))[1]
    torch.testing.assert_close(one, three, atol=1e-10, rtol=0)


def test_checkpoint_round_trip(tmp_path):
    model = micro_model(dtype=torch.float32)
    path = save_checkpoint(model, tmp_path / "m.safetensors", {"stage": "x"})
    back, extra = load_checkpoint(path, with_extra=True)
    assert extra == {"stage": "x"} and back.cfg == model.cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_errors(tmp_path):
    model = micro_model(dtype=torch.float32)
    path = save_checkpoint(model, tmp_path / "m.safetensors")
    raw = path.read_bytes()
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(raw[:50])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(b"\x00" * 100)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.safetensors")

    from safetensors.torch import save_file
    tensors = {k: v.contiguous() for k, v in model.state_dict().items()}
    save_file(tensors, str(bad), metadata={"format_version": "999", "config": "{}"})
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    tensors.pop("speaker_table.non_speech")
    from dataclasses import asdict
    import json
    save_file(tensors, str(bad), metadata={"format_version": "1", "config": json.dumps(asdict(model.cfg))})
    with pytest.raises(CheckpointError, match="non_speech"):
        load_checkpoint(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(attention_dim=63)
    with pytest.raises(ValueError):
        ModelConfig(extractor_time_stride=3)
    with pytest.raises(ValueError):
        ModelConfig(conv_kernel=4)
    big = ModelConfig.paper_scale()
    assert big.attention_dim == 512 and big.capacity == 30 and big.embedding_dim == 256
