import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcs2snd.core import SpeakerSelection
from mcs2snd.train import (
    ArcFaceParams,
    BlockDataset,
    BlockExample,
    DEFAULT_STAGES,
    StageSpec,
    TrainConfig,
    Trainer,
    arcface_loss,
    bce_loss,
    format_log_line,
    load_stage_file,
    lookup_embeddings,
    pad_speakers,
    parameter_checksums,
    parse_log_line,
    sample_source,
    shuffle_speakers,
    speaker_label,
)
from oracles import arcface_oracle, bce_oracle, micro_model, random_activity


def test_bce_hand_cases():
    truth = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    pred = torch.tensor([[0.9, 0.2], [0.3, 0.8]], dtype=torch.float64)
    assert bce_loss(pred, truth).item() == pytest.approx(0.2270805, abs=1e-6)
    assert bce_loss(torch.full((3, 5), 0.5, dtype=torch.float64), torch.ones(3, 5)).item() == pytest.approx(math.log(2))
    # saturated probabilities are clamped instead of producing inf
    assert math.isfinite(bce_loss(torch.tensor([[0.0, 1.0]]), torch.tensor([[1.0, 0.0]])).item())
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_arcface_hand_cases():
    table = torch.eye(2, dtype=torch.float64)
    loss = arcface_loss(table[:1].clone(), [0], table, ArcFaceParams(1.0, 0.0))
    assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-7)
    assert arcface_loss(torch.zeros(0, 2, dtype=torch.float64), [], table).item() == 0.0
    with pytest.raises(ValueError):
        arcface_loss(torch.zeros(1, 2, dtype=torch.float64), [0], table)
    with pytest.raises(ValueError):
        arcface_loss(torch.ones(1, 2, dtype=torch.float64), [2], table)


def test_arcface_margin_zero_is_scaled_cosine_softmax():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ext = torch.as_tensor(rng.standard_normal((4, 5)))
        table = torch.as_tensor(rng.standard_normal((7, 5)))
        labels = torch.as_tensor(rng.integers(0, 7, 4))
        cos = torch.nn.functional.normalize(ext, dim=-1) @ torch.nn.functional.normalize(table, dim=-1).T
        ref = torch.nn.functional.cross_entropy(32.0 * cos, labels)
        got = arcface_loss(ext, labels, table, ArcFaceParams(32.0, 0.0))
        assert got.item() == pytest.approx(ref.item(), abs=1e-9)


def test_arcface_margin_increases_loss():
    rng = np.random.default_rng(1)
    ext = torch.as_tensor(rng.standard_normal((6, 4)))
    table = torch.as_tensor(rng.standard_normal((5, 4)))
    labels = rng.integers(0, 5, 6)
    assert arcface_loss(ext, labels, table, ArcFaceParams(32, 0.2)) > arcface_loss(ext, labels, table,
                                                                                   ArcFaceParams(32, 0.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_losses_match_scalar_oracles(seed):
    rng = np.random.default_rng(seed)
    n, t = rng.integers(1, 5), rng.integers(1, 6)
    pred = rng.uniform(0, 1, (n, t))
    truth = (rng.random((n, t)) < 0.5).astype(float)
    assert bce_loss(torch.as_tensor(pred), torch.as_tensor(truth)).item() == pytest.approx(
        bce_oracle(pred, truth), abs=1e-9)
    k, s = rng.integers(2, 6), rng.integers(2, 5)
    ext = rng.standard_normal((n, s))
    table = rng.standard_normal((k, s))
    labels = rng.integers(0, k, n)
    m = float(rng.uniform(0, 0.5))
    got = arcface_loss(torch.as_tensor(ext), labels, torch.as_tensor(table), ArcFaceParams(32.0, m)).item()
    assert got == pytest.approx(arcface_oracle(ext, labels, table, 32.0, m), abs=1e-9)


def test_lookup_equals_one_hot_product():
    table = torch.randn(6, 4, dtype=torch.float64)
    sel = SpeakerSelection([4, 1, 5], 6)
    torch.testing.assert_close(lookup_embeddings(sel, table), torch.as_tensor(sel.one_hot, dtype=torch.float64) @ table)
    assert lookup_embeddings(SpeakerSelection([], 6), table).shape == (0, 4)
    with pytest.raises(ValueError):
        lookup_embeddings(SpeakerSelection([1], 5), table)


def test_pad_speakers():
    model = micro_model(num_speakers_total=10, capacity=5)
    table = model.speaker_table
    emb = table.table[[2, 7]]
    acts = torch.ones(2, 6, dtype=torch.float64)
    rng = np.random.default_rng(0)
    absent = [0, 1, 3, 4, 5, 6, 8, 9]
    seen = set()
    for _ in range(50):
        out, a, valid, labels = pad_speakers(emb, acts, table, absent, 5, rng, 0.5)
        assert out.shape == (5, 4) and valid.tolist() == [True, True, False, False, False]
        assert not a[2:].any() and a[:2].all()
        picks = [int(x) for x in labels if x >= 0]
        assert len(picks) == len(set(picks)) and set(picks) <= set(absent)
        for row, lab in zip(out[2:], labels):
            ref = table.non_speech if lab < 0 else table.table[lab]
            torch.testing.assert_close(row, ref)
        seen.update(labels.tolist())
    assert -1 in seen and len(seen) > 2
    only_null = pad_speakers(emb, acts, table, absent, 5, rng, 0.0)[3]
    assert (only_null == -1).all()
    with pytest.raises(ValueError, match="capacity"):
        pad_speakers(table.table[:6], torch.ones(6, 6), table, [], 5, rng)


def test_shuffle_keeps_pairs():
    emb = torch.arange(12.0).reshape(4, 3)
    acts = torch.arange(8.0).reshape(4, 2)
    labels = torch.tensor([10, 11, 12, 13])
    e, a, lab, perm = shuffle_speakers(emb, acts, np.random.default_rng(3), labels)
    for i, src in enumerate(perm):
        assert torch.equal(e[i], emb[src]) and torch.equal(a[i], acts[src]) and lab[i] == labels[src]
    with pytest.raises(ValueError):
        shuffle_speakers(emb, acts[:3], np.random.default_rng(0))


def test_speaker_label():
    assert speaker_label("spk0012") == 12
    with pytest.raises(ValueError):
        speaker_label("alice")


def test_log_line_round_trip():
    line = format_log_line("mc-1", 40, 1e-4, 0.5, 1.25, 1.75)
    assert parse_log_line(line) == {"stage": "mc-1", "step": 40, "lr": 1e-4, "bce": 0.5, "arc": 1.25, "total": 1.75}
    with pytest.raises(ValueError):
        parse_log_line("garbage")


def test_sample_source_frequencies():
    rng = np.random.default_rng(0)
    counts = {"a": 0, "b": 0}
    for _ in range(4000):
        counts[sample_source({"a": 0.25, "b": 0.75}, rng)] += 1
    assert abs(counts["a"] / 4000 - 0.25) < 0.03


def test_stage_validation_and_file():
    with pytest.raises(KeyError):
        StageSpec("x", frozen=("nonsense",))
    with pytest.raises(ValueError):
        StageSpec("x", mix={"a": 0.0})
    stages = load_stage_file("[s2snd-1]\nsteps = 7\nmix = sim:1,real:3\n\n[custom]\nfrozen = encoder\n")
    assert stages["s2snd-1"].steps == 7 and stages["s2snd-1"].frozen == ("extractor",)
    assert stages["s2snd-1"].mix == {"sim": 1.0, "real": 3.0}
    assert stages["custom"].frozen == ("encoder",)
    assert DEFAULT_STAGES["mc-1"].add_channel_attention


def _toy_dataset(model, rng, count=6, c=2, t=20):
    cfg = model.cfg
    examples = []
    for i in range(count):
        k = int(rng.integers(1, cfg.capacity + 1))
        labels = rng.choice(cfg.num_speakers_total, k, replace=False)
        feats = torch.as_tensor(rng.standard_normal((c, t, cfg.feature_dim)), dtype=torch.float64)
        acts = torch.as_tensor(random_activity(rng, k, t // cfg.extractor_time_stride))
        examples.append(BlockExample(feats, acts, labels, f"r{i}"))
    return BlockDataset(examples)


def _trainer(model, seed=0):
    rng = np.random.default_rng(seed)
    data = {"real": _toy_dataset(model, rng), "sim": _toy_dataset(model, rng)}
    return Trainer(model, data, TrainConfig(batch_size=2, log_every=1))


def test_frozen_groups_unchanged_and_others_move():
    model = micro_model()
    before = parameter_checksums(model)
    trainer = _trainer(model)
    stage = StageSpec("mc-1", ("extractor", "encoder", "detection", "representation", "speaker_table"), 1e-2,
                      {"real": 1.0}, steps=3)
    trainer.run_stage(stage)
    after = parameter_checksums(model)
    for group in before:
        assert (before[group] == after[group]) == (group != "channel_attention"), group


def test_cached_front_end_matches_uncached():
    model = micro_model()
    trainer = _trainer(model)
    data = trainer.datasets["real"]
    data.cache_front_end(model, None)
    ex = data.examples[:2]
    a = trainer.batch_loss(ex, np.random.default_rng(5), use_cache=True)
    b = trainer.batch_loss(ex, np.random.default_rng(5), use_cache=False)
    assert a["total"].item() == pytest.approx(b["total"].item(), abs=1e-10)


def test_mix_sources_follow_weights():
    model = micro_model()
    trainer = _trainer(model)
    res = trainer.run_stage(StageSpec("s2snd-2", (), 1e-4, {"real": 0.5, "sim": 0.5}, steps=40))
    n_real = res["sources"].count("real")
    assert 10 <= n_real <= 30
    assert [h["step"] for h in trainer.history] == list(range(1, 41))


def test_missing_dataset_and_all_frozen():
    model = micro_model()
    trainer = _trainer(model)
    with pytest.raises(KeyError, match="dev"):
        trainer.run_stage(StageSpec("adapt", (), 1e-4, {"dev": 1.0}, steps=1))
    with pytest.raises(ValueError):
        trainer.run_stage(StageSpec("x", tuple(DEFAULT_STAGES["mc-1"].frozen) + ("channel_attention",), 1e-4,
                                    {"real": 1.0}, steps=1))


def test_resume_reproduces_uninterrupted_run(tmp_path):
    stage = StageSpec("s2snd-2", (), 1e-3, {"real": 1.0, "sim": 1.0}, steps=6)
    full = micro_model()
    _trainer(full).run_stage(stage)

    part = micro_model()
    half = StageSpec("s2snd-2", (), 1e-3, {"real": 1.0, "sim": 1.0}, steps=3)
    res = _trainer(part).run_stage(half)
    _trainer(part).run_stage(stage, start_step=3, optimizer_state=res["optimizer"])
    for (k, a), (_, b) in zip(full.state_dict().items(), part.state_dict().items()):
        torch.testing.assert_close(a, b, atol=1e-12, rtol=0, msg=k)


def test_checkpoint_written(tmp_path):
    model = micro_model()
    res = _trainer(model).run_stage(StageSpec("s2snd-3", (), 1e-4, {"real": 1.0}, steps=2), tmp_path)
    assert res["checkpoint"].exists() and (tmp_path / "s2snd-3.opt.pt").exists()


def test_dataset_tail_and_silent_blocks():
    from mcs2snd.core import BlockPlan, DiarizationResult
    from mcs2snd.features import Waveform

    sr = 8000
    rng = np.random.default_rng(0)
    wave = Waveform(rng.standard_normal((2, 10 * sr)).astype(np.float32) * 0.1, sr)
    truth = DiarizationResult([("spk0001", 0.0, 10.0), ("spk0002", 8.5, 1.0)], "r")
    plan = BlockPlan(4.0, 2.0)
    base = BlockDataset.from_recordings([(wave, truth)], plan)
    extra = BlockDataset.from_recordings([(wave, truth)], plan, tail_blocks=(1.0, 3.0), silent_blocks=2)
    assert len(extra) == len(base) + 4
    tail1, tail3, quiet1, quiet2 = extra.examples[len(base):]
    assert tail1.start == pytest.approx(9.0) and tail3.start == pytest.approx(7.0)
    # A speaks to the end of the audio, then zero targets over the padding
    assert tail1.acts[0, :100].all() and not tail1.acts[0, 100:].any()
    assert tail3.acts[1, 150:250].all() and not tail3.acts[1, 250:].any()
    for q in (quiet1, quiet2):
        assert not q.acts.any() and q.acts.shape == (2, plan.block_frames)
        assert torch.equal(q.feats, torch.zeros_like(q.feats))
    # the padded part of a tail block is the same feature vector everywhere
    assert torch.equal(tail1.feats[:, 120], tail1.feats[:, -1])


def test_recipe_text_round_trip():
    from mcs2snd.recipe import Recipe

    recipe = Recipe().apply({"stage.adapt.mix": "dev:0.25,real:0.75", "train.tail_blocks": "2.0"})
    again = Recipe.from_text(recipe.dump())
    assert again == recipe
    assert again.stages["adapt"].mix == {"dev": 0.25, "real": 0.75}
    assert again.stages["s2snd-2"].frozen == ()
    assert again.train.tail_blocks == (2.0,)
