"""Deterministic signal processing: STFT/ISTFT, log-Mel features, mel
inversion, soft-mask resynthesis, SNR, and PCM-16 WAV I/O.

All operations are pure functions of their inputs and safe to call from any
number of threads.  Defaults: 16 kHz, 25 ms frames, 10 ms hop, periodic Hann
window, 40 mel bins, log floor at -80 dB relative to full-scale power.
"""

from __future__ import annotations

import functools
import struct
import wave as wave_module
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DspConfig",
    "Waveform",
    "ComplexSpectrogram",
    "FbankMatrix",
    "DspError",
    "WavFormatError",
    "stft",
    "istft",
    "fbank",
    "mel_filterbank",
    "mel_center_frequencies",
    "resynthesize_masked",
    "snr",
    "read_wav",
    "write_wav",
]

WINDOWS = ("hann", "rectangular")


class DspError(ValueError):
    """Invalid input to a signal-processing operation."""


class WavFormatError(DspError):
    """A WAV file does not match the supported PCM-16 mono encoding."""


@dataclass(frozen=True)
class DspConfig:
    """Feature-extraction settings shared across the pipeline."""

    sample_rate: int = 16000
    frame_length: int = 400
    hop: int = 160
    window: str = "hann"
    n_mels: int = 40
    floor_db: float = -80.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")
        if self.frame_length <= 0 or self.hop <= 0:
            raise DspError("frame_length and hop must be positive")
        if self.window not in WINDOWS:
            raise DspError(f"unknown window {self.window!r}; expected one of {WINDOWS}")


@dataclass
class Waveform:
    """Mono PCM samples (nominal range [-1, 1]) at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise DspError(f"waveform must be 1-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DspError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise DspError("sample_rate must be positive")
        self.samples = arr
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """frames x freq_bins complex STFT values plus the analysis geometry."""

    values: np.ndarray
    sample_rate: int
    frame_length: int
    hop: int
    window: str
    n_samples: int  # length of the source waveform, for exact resynthesis

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 2 or v.shape[0] < 1:
            raise DspError(f"spectrogram must be (frames, bins) with frames >= 1, got {v.shape}")
        if v.shape[1] != self.frame_length // 2 + 1:
            raise DspError(
                f"freq_bins {v.shape[1]} inconsistent with frame_length {self.frame_length}"
            )
        self.values = v

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class FbankMatrix:
    """frames x n_mels natural-log mel power, floored; frame grid mirrored."""

    values: np.ndarray
    sample_rate: int
    frame_length: int
    hop: int
    window: str
    n_samples: int
    floor_db: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DspError(f"fbank must be (frames, n_mels), got {self.values.shape}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def _window_array(window: str, frame_length: int) -> np.ndarray:
    if window == "hann":
        # periodic Hann
        n = np.arange(frame_length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_length)
    if window == "rectangular":
        return np.ones(frame_length)
    raise DspError(f"unknown window {window!r}; expected one of {WINDOWS}")


def n_frames_for(n_samples: int, frame_length: int, hop: int) -> int:
    """Frame count of the analysis grid for a waveform of given length."""
    if n_samples < frame_length:
        return 0
    return 1 + (n_samples - frame_length) // hop


def stft(wave: Waveform, frame_length: int = 400, hop: int = 160, window: str = "hann") -> ComplexSpectrogram:
    """Short-time Fourier transform with non-centered frames.

    Frame i is the windowed DFT of samples [i*hop, i*hop + frame_length).
    """
    x = wave.samples
    if len(x) < frame_length:
        raise DspError(
            f"input too short: {len(x)} samples < one frame of {frame_length}"
        )
    frames = n_frames_for(len(x), frame_length, hop)
    win = _window_array(window, frame_length)
    stride = x.strides[0]
    segs = np.lib.stride_tricks.as_strided(
        x, shape=(frames, frame_length), strides=(stride * hop, stride), writeable=False
    )
    spec = np.fft.rfft(segs * win, axis=1)
    return ComplexSpectrogram(
        values=spec,
        sample_rate=wave.sample_rate,
        frame_length=frame_length,
        hop=hop,
        window=window,
        n_samples=len(x),
    )


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Overlap-add inverse STFT normalized by the window overlap energy.

    Output is trimmed or zero-padded to the recorded source length.  Raises
    when the window/hop combination leaves gaps in the steady-state overlap
    (reconstruction condition violated).  The normalizer is clamped at 1% of
    its peak so that spectrogram modifications (masking) cannot be amplified
    without bound where the window tapers to zero; reconstruction is exact
    only where the overlap energy exceeds that clamp.
    """
    frame, hop = spec.frame_length, spec.hop
    win = _window_array(spec.window, frame)
    frames = spec.n_frames
    total = (frames - 1) * hop + frame
    acc = np.zeros(total)
    norm = np.zeros(total)
    segs = np.fft.irfft(spec.values, n=frame, axis=1)
    w2 = win * win
    for i in range(frames):
        start = i * hop
        acc[start : start + frame] += segs[i] * win
        norm[start : start + frame] += w2

    tol = 1e-12 * max(float(norm.max()), 1.0)
    covered = norm > tol
    idx = np.flatnonzero(covered)
    if idx.size == 0:
        raise DspError("window/hop violates reconstruction condition")
    if not covered[idx[0] : idx[-1] + 1].all():
        raise DspError("window/hop violates reconstruction condition")
    out = np.zeros(total)
    clamp = 1e-2 * float(norm.max())
    out[covered] = acc[covered] / np.maximum(norm[covered], clamp)

    if total < spec.n_samples:
        out = np.concatenate([out, np.zeros(spec.n_samples - total)])
    else:
        out = out[: spec.n_samples]
    return Waveform(out, spec.sample_rate)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, frame_length: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters (n_mels, freq_bins), peak 1, spanning [0, sr/2]."""
    n_bins = frame_length // 2 + 1
    if n_mels < 2:
        raise DspError("n_mels must be >= 2")
    if n_mels > n_bins:
        raise DspError(f"n_mels {n_mels} exceeds freq_bins {n_bins}")
    edges_hz = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_hz = np.arange(n_bins) * sample_rate / frame_length
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel filter."""
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


@functools.lru_cache(maxsize=8)
def _mel_pseudo_inverse(n_mels: int, frame_length: int, sample_rate: int) -> np.ndarray:
    bank = mel_filterbank(n_mels, frame_length, sample_rate)
    return np.linalg.pinv(bank)


def fbank(spec: ComplexSpectrogram, n_mels: int = 40, floor_db: float = -80.0) -> FbankMatrix:
    """Natural log of mel-filtered power, floored at ``floor_db``.

    ``floor_db`` is relative to full-scale power; the stored cell value for a
    silent input is ln(10^(floor_db/10)).
    """
    power = np.abs(spec.values) ** 2
    bank = mel_filterbank(n_mels, spec.frame_length, spec.sample_rate)
    mel_power = power @ bank.T
    floor_power = 10.0 ** (floor_db / 10.0)
    values = np.log(np.maximum(mel_power, floor_power))
    return FbankMatrix(
        values=values,
        sample_rate=spec.sample_rate,
        frame_length=spec.frame_length,
        hop=spec.hop,
        window=spec.window,
        n_samples=spec.n_samples,
        floor_db=floor_db,
    )


def fbank_floor_value(floor_db: float) -> float:
    """The natural-log cell value a floored (silent) fbank cell carries."""
    return float(np.log(10.0 ** (floor_db / 10.0)))


def resynthesize_masked(noisy_fbank: FbankMatrix, mask: np.ndarray, donor_phase: ComplexSpectrogram) -> Waveform:
    """Apply a [0,1] soft mask to mel power and resynthesize a waveform.

    The masked mel power is mapped back to a linear-frequency power
    spectrogram via the filterbank pseudo-inverse (clamped nonnegative), the
    square root is combined with the donor's phase, and the result is
    inverse-transformed.  An all-ones mask produces the plain
    analysis/synthesis round trip of the input features.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != noisy_fbank.values.shape:
        raise DspError(
            f"mask shape {mask.shape} != fbank shape {noisy_fbank.values.shape}"
        )
    if donor_phase.n_frames != noisy_fbank.n_frames:
        raise DspError(
            f"donor phase has {donor_phase.n_frames} frames, fbank has {noisy_fbank.n_frames}"
        )
    mel_power = np.exp(noisy_fbank.values) * mask
    pinv = _mel_pseudo_inverse(
        noisy_fbank.n_mels, noisy_fbank.frame_length, noisy_fbank.sample_rate
    )
    lin_power = np.clip(mel_power @ pinv.T, 0.0, None)
    magnitude = np.sqrt(lin_power)
    phase = np.angle(donor_phase.values)
    spec = ComplexSpectrogram(
        values=magnitude * np.exp(1j * phase),
        sample_rate=noisy_fbank.sample_rate,
        frame_length=noisy_fbank.frame_length,
        hop=noisy_fbank.hop,
        window=noisy_fbank.window,
        n_samples=noisy_fbank.n_samples,
    )
    return istft(spec)


def snr(reference: Waveform, estimate: Waveform) -> float:
    """10*log10 of reference power over residual power, in dB.

    Both signals are truncated to the shorter length.  A zero residual is
    reported as +100 dB; a zero-energy reference is an error.
    """
    n = min(len(reference), len(estimate))
    ref = reference.samples[:n]
    est = estimate.samples[:n]
    ref_energy = float(np.sum(ref * ref))
    if ref_energy == 0.0:
        raise DspError("undefined SNR: zero-energy reference")
    residual = float(np.sum((ref - est) ** 2))
    if residual == 0.0:
        return 100.0
    return 10.0 * np.log10(ref_energy / residual)


# ---------------------------------------------------------------------------
# WAV I/O (PCM 16-bit little-endian mono only)


def write_wav(path, wave: Waveform) -> None:
    """Write PCM-16 mono; samples are clipped to [-1, 1] and scaled by 32767."""
    scaled = np.clip(wave.samples, -1.0, 1.0) * 32767.0
    pcm = np.round(scaled).astype("<i2")
    with wave_module.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    """Read PCM-16 mono; any other encoding is rejected with a diagnostic."""
    try:
        f = wave_module.open(str(path), "rb")
    except (wave_module.Error, EOFError, struct.error) as e:
        raise WavFormatError(f"{path}: not a readable WAV file ({e})") from e
    with f:
        if f.getnchannels() != 1:
            raise WavFormatError(
                f"{path}: channels={f.getnchannels()}, only mono is supported"
            )
        if f.getsampwidth() != 2:
            raise WavFormatError(
                f"{path}: sample_width={f.getsampwidth()} bytes, only 16-bit PCM is supported"
            )
        if f.getcomptype() != "NONE":
            raise WavFormatError(
                f"{path}: compression_type={f.getcomptype()!r}, only uncompressed PCM is supported"
            )
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32767.0, rate)
