"""Synthetic multi-speaker, multi-channel conversations with exact ground truth.

Voices are parallel resonator banks excited by a jittered glottal pulse
train.  Each speaker index owns a distinct cell of a (formant x formant x
formant x pitch) grid, so identities stay separable at any pool size while
the seed only jitters positions inside the cell.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .core import DiarizationResult, Segment, write_rttm
from .features import Waveform, write_wav

SAMPLE_RATE = 16000
FADE = 0.020

# formant bands (Hz) split into cells; speaker k owns one cell per band
_BANDS = ((250.0, 950.0), (1000.0, 2400.0), (2500.0, 4800.0))
_PITCH = (85.0, 290.0)
_CELLS = 8


@dataclass(frozen=True)
class SyntheticVoice:
    speaker_id: str
    spectral_profile: tuple  # ((center_hz, bandwidth_hz, gain), ...)
    base_pitch: float

    def profile_vector(self) -> np.ndarray:
        """Log-frequency signature used to measure voice distinctness."""
        centers = [np.log(c) for c, _, _ in self.spectral_profile]
        return np.array(centers + [np.log(self.base_pitch)])


@dataclass
class ConversationSpec:
    num_speakers: int = 3
    duration: float = 60.0
    overlap_ratio: float = 0.1
    channel_count: int = 1
    # (delay samples, gain, SNR dB or None) per channel
    per_channel: tuple = ((0, 1.0, None),)
    seed: int = 0
    max_speakers: int = 30

    def __post_init__(self):
        if not 1 <= self.num_speakers <= self.max_speakers:
            raise ValueError(f"num_speakers must be in [1, {self.max_speakers}]")
        if self.channel_count < 1 or len(self.per_channel) != self.channel_count:
            raise ValueError("per_channel must list one (delay, gain, snr) entry per channel")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ValueError("overlap_ratio must lie in [0, 1)")
        for delay, gain, _ in self.per_channel:
            if delay < 0 or gain <= 0:
                raise ValueError("channel delays must be >= 0 and gains > 0")
        delay0, gain0, _ = self.per_channel[0]
        if delay0 != 0 or gain0 != 1.0:
            raise ValueError("channel 0 is the reference: zero delay, unit gain")


def _cell(speaker_index: int) -> tuple[int, int, int, int]:
    # mixed-radix digits scrambled so neighbouring indices differ in every band
    k = speaker_index
    digits = []
    for i in range(4):
        digits.append((k + 3 * i * (k // _CELLS + 1)) % _CELLS)
        k //= _CELLS
    a, b, c, d = digits
    return a, (b + a * 3) % _CELLS, (c + a * 5 + b) % _CELLS, (d + 2 * a + 3 * b + c) % _CELLS


def make_voice(speaker_index: int, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> SyntheticVoice:
    if speaker_index < 0 or speaker_index >= _CELLS ** 4:
        raise ValueError(f"speaker_index must lie in [0, {_CELLS ** 4})")
    rng = np.random.default_rng([seed, speaker_index, 17])
    cells = _cell(speaker_index)
    profile = []
    for (lo, hi), cell in zip(_BANDS, cells[:3]):
        edges = np.geomspace(lo, hi, _CELLS + 1)
        # stay in the middle 60% of the cell so neighbours never touch
        a, b = edges[cell], edges[cell + 1]
        center = float(np.exp(rng.uniform(np.log(a) + 0.2 * np.log(b / a), np.log(b) - 0.2 * np.log(b / a))))
        bandwidth = float(rng.uniform(0.06, 0.12) * center + 40.0)
        gain = float(rng.uniform(0.6, 1.0))
        profile.append((min(center, 0.45 * sample_rate), bandwidth, gain))
    edges = np.geomspace(*_PITCH, _CELLS + 1)
    a, b = edges[cells[3]], edges[cells[3] + 1]
    pitch = float(np.exp(rng.uniform(np.log(a) + 0.2 * np.log(b / a), np.log(b) - 0.2 * np.log(b / a))))
    return SyntheticVoice(f"spk{speaker_index:04d}", tuple(profile), pitch)


def voice_signal(voice: SyntheticVoice, num_samples: int, rng: np.random.Generator,
                 sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Render ``num_samples`` of speech-like sound for ``voice`` (unit RMS before fades)."""
    t = np.arange(num_samples) / sample_rate
    # slow intonation plus syllable-rate amplitude modulation
    f0 = voice.base_pitch * (1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi)))
    phase = np.cumsum(f0) / sample_rate + rng.uniform(0, 1)
    excitation = np.diff(np.floor(phase), prepend=np.floor(phase[0])).astype(np.float64)
    excitation += 0.02 * rng.standard_normal(num_samples)
    out = np.zeros(num_samples)
    for center, bandwidth, gain in voice.spectral_profile:
        r = math.exp(-math.pi * bandwidth / sample_rate)
        theta = 2 * math.pi * center / sample_rate
        out += gain * lfilter([1.0 - r], [1.0, -2 * r * math.cos(theta), r * r], excitation)
    rate = rng.uniform(3.0, 5.0)
    out *= 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)) ** 2
    rms = np.sqrt(np.mean(out ** 2))
    return out / rms if rms > 0 else out


def _plan_turns(spec: ConversationSpec, rng: np.random.Generator) -> list[tuple[int, float, float]]:
    """(speaker, onset, end) turns on the 10 ms grid.

    After each turn the next one either follows a 0.2-2 s pause or starts
    inside the current turn; a feedback rule picks the transition so the
    running overlap fraction tracks ``overlap_ratio``.
    """
    turns: list[tuple[int, float, float]] = []
    last_end = {k: -math.inf for k in range(spec.num_speakers)}
    unseen = [int(k) for k in rng.permutation(spec.num_speakers)]
    t = float(rng.uniform(0.0, 1.0))
    prev = None
    while t < spec.duration - 0.3:
        if unseen:
            spk = unseen.pop(0)
        elif spec.num_speakers == 1:
            spk = 0
        else:
            spk = int(rng.choice([k for k in range(spec.num_speakers) if k != prev]))
        onset = round(max(t, last_end[spk] + 0.2), 2)
        end = round(min(onset + rng.uniform(0.5, 4.0), spec.duration), 2)
        if end - onset < 0.1:
            break
        turns.append((spk, onset, end))
        last_end[spk] = end
        prev = spk
        speech, overlap = _speech_and_overlap([(a, b) for _, a, b in turns])
        if spec.overlap_ratio > 0 and overlap < spec.overlap_ratio * speech:
            t = end - rng.uniform(0.2, 0.9) * (end - onset)
        else:
            t = max(b for _, _, b in turns) + rng.uniform(0.2, 2.0)
    return turns


def _speech_and_overlap(intervals) -> tuple[float, float]:
    """Total time with >= 1 and >= 2 active intervals."""
    events = sorted([(a, 1) for a, _ in intervals] + [(b, -1) for _, b in intervals])
    speech = overlap = 0.0
    active = 0
    last = None
    for time, delta in events:
        if last is not None:
            if active >= 1:
                speech += time - last
            if active >= 2:
                overlap += time - last
        active += delta
        last = time
    return speech, overlap


def overlap_fraction(result: DiarizationResult) -> float:
    speech, overlap = _speech_and_overlap([(s.onset, s.end) for s in result.segments])
    return overlap / speech if speech > 0 else 0.0


def synthesize_turns(spec: ConversationSpec, voices, sample_rate: int = SAMPLE_RATE,
                     recording_id: str | None = None):
    """Returns (sources, truth): one mono track per speaker and the reference segments."""
    if len(voices) != spec.num_speakers:
        raise ValueError(f"expected {spec.num_speakers} voices, got {len(voices)}")
    if spec.num_speakers == 1 and spec.overlap_ratio > 0:
        raise ValueError("overlap target > 0 is infeasible with a single speaker")
    rng = np.random.default_rng([spec.seed, 1])
    turns = _plan_turns(spec, rng)
    length = int(round(spec.duration * sample_rate))
    sources = np.zeros((spec.num_speakers, length), dtype=np.float64)
    fade = int(round(FADE * sample_rate))
    segments = []
    for spk, onset, end in turns:
        a, b = int(round(onset * sample_rate)), int(round(end * sample_rate))
        sig = voice_signal(voices[spk], b - a, rng, sample_rate)
        sig *= 0.1 * 10 ** (rng.uniform(-3, 3) / 20)
        ramp = np.linspace(0.0, 1.0, fade + 2)[1:-1]
        n = min(fade, (b - a) // 2)
        sig[:n] *= ramp[:n]
        sig[len(sig) - n:] *= ramp[:n][::-1]
        sources[spk, a:b] += sig
        segments.append(Segment(onset, voices[spk].speaker_id, round(end - onset, 2)))
    rec = recording_id or f"conv{spec.seed}"
    return sources.astype(np.float32), DiarizationResult(segments, rec)


def render_multichannel(sources: np.ndarray, spec: ConversationSpec, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Sum delayed, scaled sources per channel and add white noise at the channel SNR."""
    rng = np.random.default_rng([spec.seed, 2])
    length = sources.shape[1]
    mix = sources.sum(axis=0).astype(np.float64)
    out = np.zeros((spec.channel_count, length))
    for c, (delay, gain, snr) in enumerate(spec.per_channel):
        delay = int(delay)
        clean = np.zeros(length)
        clean[delay:] = gain * mix[:length - delay]
        noise = rng.standard_normal(length)
        if snr is not None:
            power = np.mean(clean ** 2)
            clean = clean + noise * math.sqrt(power / 10 ** (snr / 10))
        out[c] = clean
    return Waveform(out.astype(np.float32), sample_rate)


def simulate_conversation(spec: ConversationSpec, speaker_indices, voice_seed: int = 0,
                          sample_rate: int = SAMPLE_RATE, recording_id: str | None = None):
    voices = [make_voice(k, voice_seed, sample_rate) for k in speaker_indices]
    sources, truth = synthesize_turns(spec, voices, sample_rate, recording_id)
    return render_multichannel(sources, spec, sample_rate), truth, sources


# ---------------------------------------------------------------------------
# corpora


@dataclass
class CorpusSpec:
    """Flat description of a synthetic corpus (readable from a key-value file)."""

    num_conversations: int = 8
    duration: float = 60.0
    min_speakers: int = 2
    max_speakers: int = 4
    speaker_pool: int = 16
    pool_offset: int = 0
    overlap_ratio: float = 0.1
    channel_count: int = 2
    channel_snrs: tuple = (0.0, 20.0)
    channel_delays: tuple = (0, 3)
    channel_gains: tuple = (1.0, 0.8)
    voice_seed: int = 0
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    prefix: str = "conv"

    def conversation(self, i: int) -> tuple[ConversationSpec, list[int], str]:
        rng = np.random.default_rng([self.seed, i, 3])
        k = int(rng.integers(self.min_speakers, self.max_speakers + 1))
        speakers = sorted(int(x) + self.pool_offset for x in rng.choice(self.speaker_pool, size=k, replace=False))
        per_channel = tuple(
            (int(self.channel_delays[c]), float(self.channel_gains[c]),
             None if self.channel_snrs[c] is None else float(self.channel_snrs[c]))
            for c in range(self.channel_count)
        )
        spec = ConversationSpec(
            num_speakers=k, duration=self.duration, overlap_ratio=self.overlap_ratio if k > 1 else 0.0,
            channel_count=self.channel_count, per_channel=per_channel,
            seed=int(rng.integers(2 ** 31)),
        )
        return spec, speakers, f"{self.prefix}{self.seed:03d}_{i:04d}"


@dataclass
class Conversation:
    recording_id: str
    wave: Waveform
    truth: DiarizationResult
    speakers: list = field(default_factory=list)
    seed: int = 0


def generate_corpus(cspec: CorpusSpec) -> list[Conversation]:
    out = []
    for i in range(cspec.num_conversations):
        spec, speakers, rec = cspec.conversation(i)
        wave, truth, _ = simulate_conversation(spec, speakers, cspec.voice_seed, cspec.sample_rate, rec)
        out.append(Conversation(rec, wave, truth, speakers, spec.seed))
    return out


def write_corpus(cspec: CorpusSpec, out_dir) -> Path:
    """Write WAV + RTTM per conversation and a JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    lines = []
    for conv in generate_corpus(cspec):
        wav_path = out_dir / f"{conv.recording_id}.wav"
        rttm_path = out_dir / f"{conv.recording_id}.rttm"
        write_wav(wav_path, conv.wave)
        write_rttm(conv.truth, rttm_path)
        lines.append(json.dumps({
            "audio": wav_path.name, "rttm": rttm_path.name, "num_speakers": len(conv.speakers),
            "seed": conv.seed, "recording_id": conv.recording_id,
            "speakers": [f"spk{k:04d}" for k in conv.speakers], "duration": conv.wave.duration,
            "channels": conv.wave.num_channels,
        }))
    manifest.write_text("".join(line + "\n" for line in lines))
    (out_dir / "corpus_spec.json").write_text(json.dumps(asdict(cspec), indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    entries = []
    for line in path.read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            entry["audio"] = str(path.parent / entry["audio"])
            entry["rttm"] = str(path.parent / entry["rttm"])
            entries.append(entry)
    return entries


def speaker_clips(speaker_indices, clips_per_speaker: int, clip_seconds: float = 2.0, voice_seed: int = 0,
                  seed: int = 0, snr: float | None = 20.0, sample_rate: int = SAMPLE_RATE):
    """Single-speaker clips for extractor pretraining: (list of Waveform, labels)."""
    rng = np.random.default_rng([seed, 4])
    waves, labels = [], []
    n = int(round(clip_seconds * sample_rate))
    for label, k in enumerate(speaker_indices):
        voice = make_voice(k, voice_seed, sample_rate)
        for _ in range(clips_per_speaker):
            sig = 0.1 * voice_signal(voice, n, rng, sample_rate)
            if snr is not None:
                sig = sig + rng.standard_normal(n) * math.sqrt(np.mean(sig ** 2) / 10 ** (snr / 10))
            waves.append(Waveform(sig.astype(np.float32)[None, :], sample_rate))
            labels.append(label)
    return waves, np.array(labels)
