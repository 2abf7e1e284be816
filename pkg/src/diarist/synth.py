"""Synthetic conversations and the built-in feature extractor.

The generator stands in for real corpora at desk scale: each speaker has a
distinct spectral signature, so mean-pooled features are separable and the
clustering stage of the pipeline can be exercised without a pretrained
embedder.  Features are 40-band log-mel energies at 50 frames/s; real
features produced elsewhere can be imported through the FEAT file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Annotation, FrameMatrix, Segment
from .errors import FormatError

SAMPLE_RATE = 16_000

# Analysis window 25 ms, hop 20 ms -> 50 frames/s.
FRAME_LENGTH = 400
FRAME_HOP = 320
N_FFT = 512
N_MELS = 40
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic conversation."""

    seed: int
    num_speakers: int = 3
    duration: float = 60.0
    mean_turn: float = 2.0
    mean_pause: float = 2.0
    overlap_prob: float = 0.2
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ValueError("overlap_prob must lie in [0, 1]")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate is fixed at {SAMPLE_RATE}")


def _speaker_turns(rng: np.random.Generator, spec: SynthSpec) -> list[tuple[float, float]]:
    """Alternating pause/turn chain with exponential durations for one speaker."""
    turns = []
    # Bounded initial offset so every speaker shows up early in the recording.
    t = rng.uniform(0.0, spec.mean_pause)
    while t < spec.duration:
        turn = rng.exponential(spec.mean_turn)
        end = min(t + turn, spec.duration)
        if end - t > 0.05:
            turns.append((t, end))
        t = end + rng.exponential(spec.mean_pause)
    return turns


def _resolve_overlaps(
    tentative: list[tuple[float, float, int]],
    overlap_prob: float,
    duration: float,
    rng: np.random.Generator,
) -> list[tuple[float, float, int]]:
    """Serialize conflicting turns: each cross-speaker collision is kept as
    overlap with probability overlap_prob, otherwise the turn waits until the
    blocking turns have ended."""
    committed: list[tuple[float, float, int]] = []
    for start, end, spk in sorted(tentative):
        length = end - start
        while True:
            blockers = [e for s, e, other in committed if other != spk and s < start + length and e > start]
            if not blockers or rng.random() < overlap_prob:
                break
            start = max(blockers)
            if start >= duration:
                break
        end = min(start + length, duration)
        if start < duration and end - start > 0.05:
            committed.append((start, end, spk))
    return committed


def _speaker_waveform(spk: int, first_sample: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Harmonic tone at 120*(spk+1) Hz plus band-limited noise."""
    f0 = 120.0 * (spk + 1)
    t = (first_sample + np.arange(n)) / SAMPLE_RATE
    wave = np.zeros(n)
    for k, amp in enumerate((0.25, 0.12, 0.06), start=1):
        wave += amp * np.sin(2 * np.pi * k * f0 * t)
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    band = (freqs >= 3 * f0) & (freqs <= 5 * f0)
    spectrum[~band] = 0.0
    band_noise = np.fft.irfft(spectrum, n)
    peak = np.max(np.abs(band_noise))
    if peak > 0:
        wave += 0.08 * band_noise / peak
    return wave


def gen_conversation(spec: SynthSpec, recording_id: str = "synth") -> tuple[np.ndarray, Annotation]:
    """Generate (16 kHz mono audio, reference annotation), bit-reproducible per seed."""
    seq = np.random.SeedSequence(spec.seed)
    children = seq.spawn(spec.num_speakers + 2)
    speaker_rngs = [np.random.default_rng(c) for c in children[: spec.num_speakers]]
    overlap_rng = np.random.default_rng(children[spec.num_speakers])
    noise_rng = np.random.default_rng(children[spec.num_speakers + 1])

    tentative = []
    for spk, rng in enumerate(speaker_rngs):
        tentative.extend((s, e, spk) for s, e in _speaker_turns(rng, spec))
    committed = _resolve_overlaps(tentative, spec.overlap_prob, spec.duration, overlap_rng)

    audio = np.zeros(int(round(spec.duration * SAMPLE_RATE)))
    segments = []
    for start, end, spk in sorted(committed):
        i0, i1 = int(round(start * SAMPLE_RATE)), int(round(end * SAMPLE_RATE))
        audio[i0:i1] += _speaker_waveform(spk, i0, i1 - i0, noise_rng)
        segments.append(Segment(start, end, f"spk{spk}"))
    annotation = Annotation(recording_id, segments).normalized()
    return audio, annotation


def overlap_fraction(annotation: Annotation, duration: float, step: float = 0.01) -> float:
    """Fraction of speech time where two or more speakers are active."""
    mids = np.arange(step / 2, duration, step)
    counts = np.zeros(len(mids))
    for seg in annotation.normalized().segments:
        counts += (mids >= seg.start) & (mids < seg.end)
    speech = counts >= 1
    if not speech.any():
        return 0.0
    return float((counts >= 2).sum() / speech.sum())


# ---------------------------------------------------------------------------
# Log-mel feature extraction
# ---------------------------------------------------------------------------

def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mel_points = np.linspace(to_mel(0.0), to_mel(sample_rate / 2), n_mels + 2)
    hz_points = from_mel(mel_points)
    bins = np.floor((n_fft + 1) * hz_points / sample_rate).astype(int)
    fbank = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            if center > left:
                fbank[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            if right > center:
                fbank[m - 1, k] = (right - k) / (right - center)
    return fbank


def logmel(audio: np.ndarray) -> FrameMatrix:
    """40-band log-mel energies: 25 ms window, 20 ms hop, floored at log(1e-10)."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ValueError("audio must be a 1-D array of 16 kHz mono samples")
    if len(audio) < FRAME_LENGTH:
        return FrameMatrix(np.zeros((0, N_MELS), dtype=np.float32), SAMPLE_RATE / FRAME_HOP)
    num_frames = (len(audio) - FRAME_LENGTH) // FRAME_HOP + 1
    idx = np.arange(FRAME_LENGTH)[None, :] + FRAME_HOP * np.arange(num_frames)[:, None]
    frames = audio[idx] * np.hanning(FRAME_LENGTH)[None, :]
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = power @ _MEL_FB.T
    feats = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    return FrameMatrix(feats, SAMPLE_RATE / FRAME_HOP)


_MEL_FB = _mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE)


# ---------------------------------------------------------------------------
# FEAT binary format
# ---------------------------------------------------------------------------

_FEAT_MAGIC = b"FEAT"
_FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIIIff")


def save_features(path: str | Path, features: FrameMatrix) -> None:
    """Write a FrameMatrix as a FEAT file (little-endian f32 payload)."""
    data = np.ascontiguousarray(features.data, dtype=np.float32)
    header = _FEAT_HEADER.pack(
        _FEAT_MAGIC,
        _FEAT_VERSION,
        data.shape[0],
        data.shape[1],
        features.frame_rate,
        features.start_time,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def load_features(path: str | Path) -> FrameMatrix:
    """Read a FEAT file; raises FormatError on bad magic, version or truncation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FEAT_HEADER.size:
        raise FormatError(f"{path}: truncated FEAT header")
    magic, version, t, f, frame_rate, start_time = _FEAT_HEADER.unpack_from(blob)
    if magic != _FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _FEAT_VERSION:
        raise FormatError(f"{path}: unsupported FEAT version {version}")
    expected = t * f * 4
    payload = blob[_FEAT_HEADER.size:]
    if len(payload) < expected:
        raise FormatError(f"{path}: payload truncated, expected {expected} bytes, got {len(payload)}")
    data = np.frombuffer(payload[:expected], dtype="<f4").reshape(t, f)
    return FrameMatrix(data.copy(), frame_rate, start_time)
