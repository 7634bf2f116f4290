"""Mel spectrogram front-end: Hann-windowed STFT, triangular Mel filterbank,
max-referenced dB scaling, and the binary per-track feature cache.

Framing is centered with reflect padding so that a clip of N samples yields
exactly ceil(N / hop) frames, keeping spectrogram frames aligned one-to-one
with 128x VQ tokens of the same clip.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MEL_CACHE_MAGIC = b"MELVQSPC"
MEL_CACHE_VERSION = 1


class DspError(Exception):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray  # float64 amplitudes in [-1, 1]
    sample_rate: int = 44100
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DspError(f"clip {self.id!r}: samples must be 1-D, got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    frame_size: int = 512
    hop_size: int = 128
    n_mels: int = 86
    db_floor: float = -80.0
    center_pad: bool = True

    def __post_init__(self):
        if self.frame_size < 2 or (self.frame_size & (self.frame_size - 1)) != 0:
            raise DspError(f"frame_size must be a power of two >= 2, got {self.frame_size}")
        if not (0 < self.hop_size <= self.frame_size):
            raise DspError(f"hop_size must be in (0, frame_size], got {self.hop_size}")
        if not (1 <= self.n_mels <= self.frame_size // 2 + 1):
            raise DspError(f"n_mels must be in [1, {self.frame_size // 2 + 1}], got {self.n_mels}")
        if self.db_floor >= 0:
            raise DspError("db_floor must be negative")

    @property
    def n_bins(self) -> int:
        return self.frame_size // 2 + 1


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels) dB values
    config: SpectrogramConfig
    clip_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann taper w[k] = 0.5 - 0.5 cos(2 pi k / n)."""
    if n < 2:
        raise DspError(f"hann_window needs n >= 2, got {n}")
    k = np.arange(n, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def frame_count(num_samples: int, hop_size: int) -> int:
    """Centered frame count: one frame per started hop."""
    return -(-num_samples // hop_size)


def stft(clip: AudioClip, config: SpectrogramConfig) -> np.ndarray:
    """Power spectrogram, shape (T, frame_size/2 + 1)."""
    x = clip.samples
    n = len(x)
    if n == 0:
        raise DspError(f"clip {clip.id!r} is empty")
    frame, hop = config.frame_size, config.hop_size
    if config.center_pad:
        t_total = frame_count(n, hop)
        left = frame // 2
        right = max(0, (t_total - 1) * hop + frame - (n + left))
        # Reflect keeps edge frames tonal; tiny clips fall back to zeros
        # because numpy reflect needs pad < len.
        mode = "reflect" if n > max(left, right) else "constant"
        xp = np.pad(x, (left, right), mode=mode)
    else:
        if n < frame:
            raise DspError(f"clip shorter than one frame ({n} < {frame}) with center_pad off")
        t_total = 1 + (n - frame) // hop
        xp = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, frame)[::hop][:t_total]
    spec = np.fft.rfft(windows * hann_window(frame), axis=1)
    return np.abs(spec) ** 2


def hz_to_mel(f) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(config: SpectrogramConfig, sample_rate: int) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    pts = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), config.n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(config: SpectrogramConfig, sample_rate: int) -> np.ndarray:
    """Triangular filters (n_mels, n_bins), peak 1, centers even on the Mel scale."""
    n_bins = config.n_bins
    if config.n_mels > n_bins:
        raise DspError(f"n_mels {config.n_mels} exceeds {n_bins} frequency bins")
    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), config.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sample_rate / config.frame_size
    fb = np.zeros((config.n_mels, n_bins), dtype=np.float64)
    for i in range(config.n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        fb[i] = np.clip(np.minimum(up, down), 0.0, 1.0)
        if not fb[i].any():
            # Filter narrower than one bin: take the degenerate limit, a unit
            # spike at the bin nearest the center, so every filter stays
            # nonempty and unimodal.
            fb[i, int(round(mid * config.frame_size / sample_rate))] = 1.0
    return fb


def power_to_db(power: np.ndarray, db_floor: float = -80.0) -> np.ndarray:
    """10 log10(S / max S), clamped below at db_floor; all-zero input maps to the floor."""
    power = np.asarray(power, dtype=np.float64)
    if np.any(power < 0):
        raise DspError("power values must be nonnegative")
    peak = power.max() if power.size else 0.0
    if peak <= 0.0:
        return np.full(power.shape, db_floor)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power / peak)
    return np.maximum(db, db_floor)


def mel_spectrogram(clip: AudioClip, config: SpectrogramConfig) -> MelSpectrogram:
    power = stft(clip, config)
    fb = mel_filterbank(config, clip.sample_rate)
    mel_power = power @ fb.T
    return MelSpectrogram(power_to_db(mel_power, config.db_floor), config, clip.id)


def normalize_db(frames: np.ndarray, db_floor: float = -80.0) -> np.ndarray:
    """Map dB values in [db_floor, 0] onto [-1, 1]: (x - floor/2) / (-floor/2)."""
    half = db_floor / 2.0
    return (np.asarray(frames, dtype=np.float64) - half) / (-half)


# ---------------------------------------------------------------------------
# WAV io (16-bit PCM little-endian; stereo averaged to mono on load)
# ---------------------------------------------------------------------------

def load_wav(path: str | Path, clip_id: str = "") -> AudioClip:
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise DspError(f"{path}: only 16-bit PCM WAV is supported")
        rate = wf.getframerate()
        n_ch = wf.getnchannels()
        raw = wf.readframes(wf.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_ch > 1:
        data = data.reshape(-1, n_ch).mean(axis=1)
    return AudioClip(data, rate, clip_id or Path(path).stem)


def save_wav(clip: AudioClip, path: str | Path) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# feature cache: 16-byte header (magic + version + reserved), u32 T,
# u32 n_mels, then T*n_mels little-endian float32, row-major
# ---------------------------------------------------------------------------

def save_mel_cache(mel: MelSpectrogram, path: str | Path) -> None:
    t, m = mel.frames.shape
    with open(path, "wb") as fh:
        fh.write(MEL_CACHE_MAGIC)
        fh.write(struct.pack("<II", MEL_CACHE_VERSION, 0))
        fh.write(struct.pack("<II", t, m))
        fh.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())


def load_mel_cache(path: str | Path, config: SpectrogramConfig | None = None,
                   clip_id: str = "") -> MelSpectrogram:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:8] != MEL_CACHE_MAGIC:
        raise DspError(f"{path}: not a mel cache file")
    version, _ = struct.unpack("<II", blob[8:16])
    if version != MEL_CACHE_VERSION:
        raise DspError(f"{path}: cache version {version}, expected {MEL_CACHE_VERSION}")
    t, m = struct.unpack("<II", blob[16:24])
    need = 24 + 4 * t * m
    if len(blob) != need:
        raise DspError(f"{path}: truncated mel cache ({len(blob)} bytes, expected {need})")
    frames = np.frombuffer(blob[24:], dtype="<f4").reshape(t, m).astype(np.float64)
    return MelSpectrogram(frames, config or SpectrogramConfig(n_mels=m), clip_id)
