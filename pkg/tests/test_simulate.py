import itertools

import numpy as np
import pytest

from mcs2snd.core import activity_from_segments, parse_rttm
from mcs2snd.features import read_wav
from mcs2snd.simulate import (
    ConversationSpec,
    CorpusSpec,
    generate_corpus,
    make_voice,
    overlap_fraction,
    read_manifest,
    simulate_conversation,
    speaker_clips,
    write_corpus,
)

SR = 16000


def _spec(**kw):
    base = dict(num_speakers=3, duration=60.0, overlap_ratio=0.2, channel_count=2,
                per_channel=((0, 1.0, None), (4, 0.5, 10.0)), seed=11)
    base.update(kw)
    return ConversationSpec(**base)


def test_deterministic_for_seed():
    a = simulate_conversation(_spec(), [0, 1, 2])
    b = simulate_conversation(_spec(), [0, 1, 2])
    np.testing.assert_array_equal(a[0].samples, b[0].samples)
    assert a[1] == b[1]
    c = simulate_conversation(_spec(seed=12), [0, 1, 2])
    assert c[1] != a[1]


@pytest.mark.parametrize("target", [0.0, 0.1, 0.3])
def test_overlap_ratio_tracks_target(target):
    fracs = [overlap_fraction(simulate_conversation(_spec(overlap_ratio=target, seed=s, channel_count=1,
                                                           per_channel=((0, 1.0, None),)), [0, 1, 2])[1])
             for s in range(3)]
    assert abs(np.mean(fracs) - target) < 0.05
    if target == 0.0:
        assert max(fracs) == 0.0


def test_ground_truth_matches_source_energy():
    spec = _spec(channel_count=1, per_channel=((0, 1.0, None),))
    wave, truth, sources = simulate_conversation(spec, [3, 4, 5])
    act = activity_from_segments(truth, 0.01, 6000, truth.speakers, clip=True).values
    ids = [make_voice(k).speaker_id for k in (3, 4, 5)]
    for k, spk in enumerate(ids):
        if spk not in truth.speakers:
            continue
        frames = sources[k, :960000].reshape(6000, 160)
        energy = np.abs(frames).max(axis=1)
        row = act[truth.speakers.index(spk)]
        assert (energy[row == 0] == 0).all()
        # interior of every active frame carries signal (fades only touch edges)
        assert (energy[row == 1] > 0).mean() > 0.99
    np.testing.assert_allclose(wave.samples[0], sources.sum(axis=0), atol=1e-5)


def test_channels_are_delayed_scaled_and_noisy():
    spec = _spec(per_channel=((0, 1.0, None), (4, 0.5, None)))
    wave, _, _ = simulate_conversation(spec, [0, 1, 2])
    np.testing.assert_allclose(wave.samples[1, 4:], 0.5 * wave.samples[0, :-4], atol=1e-6)
    noisy, _, _ = simulate_conversation(_spec(per_channel=((0, 1.0, None), (0, 1.0, 0.0))), [0, 1, 2])
    diff = noisy.samples[1] - noisy.samples[0]
    snr = 10 * np.log10(np.mean(noisy.samples[0].astype(np.float64) ** 2) / np.mean(diff.astype(np.float64) ** 2))
    assert abs(snr) < 0.2


def test_voices_distinct():
    vecs = [make_voice(k).profile_vector() for k in range(60)]
    dmin = min(np.linalg.norm(a - b) for a, b in itertools.combinations(vecs, 2))
    assert dmin > 0.05


def test_invalid_specs():
    with pytest.raises(ValueError):
        _spec(num_speakers=0)
    with pytest.raises(ValueError):
        _spec(num_speakers=31)
    with pytest.raises(ValueError):
        _spec(channel_count=3)
    with pytest.raises(ValueError):
        _spec(per_channel=((2, 1.0, None), (0, 1.0, None)))
    with pytest.raises(ValueError):
        simulate_conversation(_spec(num_speakers=1), [0])


def test_corpus_round_trip(tmp_path):
    cspec = CorpusSpec(num_conversations=2, duration=12.0, seed=5)
    manifest = write_corpus(cspec, tmp_path)
    entries = read_manifest(manifest)
    convs = generate_corpus(cspec)
    assert len(entries) == 2
    for entry, conv in zip(entries, convs):
        assert entry["recording_id"] == conv.recording_id
        assert 2 <= entry["num_speakers"] <= 4
        wave = read_wav(entry["audio"])
        np.testing.assert_array_equal(wave.samples, conv.wave.samples)
        truth = parse_rttm(open(entry["rttm"]).read())
        assert truth == conv.truth
        assert set(truth.speakers) <= set(entry["speakers"])


def test_speaker_clips():
    waves, labels = speaker_clips([7, 9], 3, clip_seconds=0.5)
    assert len(waves) == 6 and labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert all(w.num_samples == SR // 2 for w in waves)
