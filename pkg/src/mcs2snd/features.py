"""Blocking, log Mel-filterbank extraction and per-block normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .core import BlockPlan, FeatureSequence

NUM_MELS = 80
FRAME_LENGTH = 0.025
FRAME_SHIFT = 0.010
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


@dataclass
class Waveform:
    samples: np.ndarray  # C x L
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ValueError(f"waveform must be C x L with C, L >= 1, got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN/Inf")
        self.samples = samples

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channels(self, index) -> "Waveform":
        idx = [index] if isinstance(index, int) else list(index)
        return Waveform(self.samples[idx], self.sample_rate)


@dataclass
class FeatureBlock:
    features: FeatureSequence  # per-channel, T x 80 x C
    block_index: int
    start_time: float


@dataclass
class FeatureOptions:
    """Normalization switches.

    ``wave_norm`` is applied to each block's waveform before filterbank
    analysis (``peak``, ``standardize`` or ``none``); ``feature_norm``
    standardizes the log energies per block and channel.
    """

    wave_norm: str = "peak"
    feature_norm: bool = True


def split_blocks(wave: Waveform, plan: BlockPlan) -> list[tuple[float, Waveform]]:
    """Cut ``wave`` into fixed-length blocks at the plan's shift, zero-padding the tail."""
    sr = wave.sample_rate
    block_samples = int(round(plan.block_length * sr))
    out = []
    for start in plan.block_starts(wave.duration):
        a = int(round(start * sr))
        chunk = np.zeros((wave.num_channels, block_samples), dtype=np.float32)
        piece = wave.samples[:, a:a + block_samples]
        chunk[:, :piece.shape[1]] = piece
        out.append((start, Waveform(chunk, sr)))
    return out


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, num_mels: int = NUM_MELS) -> np.ndarray:
    """Triangular HTK-scale filters spanning 0 Hz to Nyquist, shape (num_mels, n_fft//2+1)."""
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), num_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (center - lo)
    falling = (hi - freqs[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_centers(sample_rate: int, num_mels: int = NUM_MELS) -> np.ndarray:
    return _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), num_mels + 2))[1:-1]


def frame_params(sample_rate: int) -> tuple[int, int, int]:
    frame_len = int(round(FRAME_LENGTH * sample_rate))
    shift = int(round(FRAME_SHIFT * sample_rate))
    n_fft = 1 << (frame_len - 1).bit_length()
    return frame_len, shift, n_fft


def logmel(wave: Waveform, num_frames: int | None = None) -> FeatureSequence:
    """Per-channel log Mel energies, T x 80 x C (not normalized).

    ``num_frames`` pads (repeating the last frame) or truncates the output to
    a block's nominal length.
    """
    if wave.sample_rate < 8000:
        raise ValueError("sample_rate must be at least 8000 Hz")
    frame_len, shift, n_fft = frame_params(wave.sample_rate)
    if wave.num_samples < frame_len:
        raise ValueError(f"waveform of {wave.num_samples} samples is shorter than one frame ({frame_len})")
    n = (wave.num_samples - frame_len) // shift + 1
    frames = np.lib.stride_tricks.sliding_window_view(wave.samples.astype(np.float64), frame_len, axis=1)[:, ::shift][:, :n]
    spec = np.fft.rfft(frames * get_window("hann", frame_len), n=n_fft, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ mel_filterbank(wave.sample_rate, n_fft).T  # C x T x 80
    feats = np.log(np.maximum(energies, LOG_FLOOR)).transpose(1, 2, 0)
    if num_frames is not None:
        if feats.shape[0] >= num_frames:
            feats = feats[:num_frames]
        else:
            pad = np.repeat(feats[-1:], num_frames - feats.shape[0], axis=0)
            feats = np.concatenate([feats, pad], axis=0)
    return FeatureSequence(feats.astype(np.float32), "per_channel", FRAME_SHIFT)


def normalize_block(feat: FeatureSequence) -> FeatureSequence:
    """Standardize each channel over all of its T x F values."""
    x = feat.data.astype(np.float64)
    mean = x.mean(axis=(0, 1), keepdims=True)
    std = np.maximum(x.std(axis=(0, 1), keepdims=True), STD_FLOOR)
    return FeatureSequence(((x - mean) / std).astype(np.float32), feat.role, feat.frame_period)


def normalize_wave(wave: Waveform, mode: str = "peak") -> Waveform:
    x = wave.samples.astype(np.float64)
    if mode == "peak":
        peak = np.abs(x).max(axis=1, keepdims=True)
        x = x / np.where(peak > 0, peak, 1.0)
    elif mode == "standardize":
        std = x.std(axis=1, keepdims=True)
        x = (x - x.mean(axis=1, keepdims=True)) / np.where(std > 0, std, 1.0)
    elif mode != "none":
        raise ValueError(f"unknown waveform normalization {mode!r}")
    return Waveform(x.astype(np.float32), wave.sample_rate)


def block_features(wave: Waveform, plan: BlockPlan, options: FeatureOptions | None = None) -> list[FeatureBlock]:
    """split_blocks -> logmel -> normalize_block for every block of a recording."""
    options = options or FeatureOptions()
    out = []
    for i, (start, chunk) in enumerate(split_blocks(wave, plan)):
        chunk = normalize_wave(chunk, options.wave_norm)
        feats = logmel(chunk, plan.block_frames)
        if options.feature_norm:
            feats = normalize_block(feats)
        out.append(FeatureBlock(feats, i, start))
    return out


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path: str | Path | Sequence[str | Path]) -> Waveform:
    """Read a (multi-channel) WAV, or a list of mono WAVs in channel order."""
    if isinstance(path, (list, tuple)):
        waves = [read_wav(p) for p in path]
        rates = {w.sample_rate for w in waves}
        if len(rates) != 1:
            raise ValueError(f"channel files disagree on sample rate: {sorted(rates)}")
        length = min(w.num_samples for w in waves)
        return Waveform(np.concatenate([w.samples[:, :length] for w in waves]), rates.pop())
    sr, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max) + 1.0
        data = data.astype(np.float32) / scale
    data = np.asarray(data, dtype=np.float32)
    samples = data[None, :] if data.ndim == 1 else data.T
    return Waveform(samples, int(sr))


def write_wav(path: str | Path, wave: Waveform, pcm16: bool = False) -> None:
    data = wave.samples.T
    if pcm16:
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(str(path), wave.sample_rate, np.ascontiguousarray(data))


def num_frames_for(duration: float, frame_period: float = FRAME_SHIFT) -> int:
    return int(math.ceil(duration / frame_period - 1e-9))
