"""Deterministic audio DSP frontend: WAV I/O, MFCC, similarity, SNR tools.

Everything here is a pure function of its inputs (bit-identical on repeated
calls).  Waveforms are float64 in [-1, 1]; files are 16-bit mono PCM WAV.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.signal import firwin

# Fixed analysis settings: 25 ms frames with 10 ms hop, 26 mel bands,
# 13 cepstral coefficients.  The similarity threshold used by the
# evolutionary attack is honored under this configuration.
FRAME_SECONDS = 0.025
HOP_SECONDS = 0.010
N_MELS = 26
N_COEFFS = 13
LOG_FLOOR = 1e-10

# Windowed-sinc low-pass used by the downsampling defense (16 kHz only).
DOWNSAMPLE_TAPS = 101
DOWNSAMPLE_CUTOFF_HZ = 4000.0

INT16_SCALE = 32768.0


class AudioFormatError(ValueError):
    """Raised when a WAV file violates the PCM-16 mono little-endian contract."""


@dataclass(frozen=True)
class AudioClip:
    """Fixed-rate mono waveform.

    samples are float64 amplitudes in [-1, 1]; sample_rate is in Hz.
    """

    samples: np.ndarray
    sample_rate: int
    id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("clip must be a nonempty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("clip contains non-finite samples")
        if np.max(np.abs(samples)) > 1.0 + 1e-12:
            raise ValueError("clip samples exceed [-1, 1]")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples: np.ndarray, id: str | None = None) -> "AudioClip":
        return replace(self, samples=samples, id=self.id if id is None else id)


@dataclass(frozen=True)
class MfccMatrix:
    """Cepstral coefficients per frame: frames is [num_frames x num_coefficients]."""

    frames: np.ndarray
    frame_hop: int
    frame_len: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if not np.all(np.isfinite(frames)):
            raise ValueError("MFCC matrix contains non-finite entries")

    def flat(self) -> np.ndarray:
        return self.frames.reshape(-1)


def load_wav(path) -> AudioClip:
    """Read a PCM 16-bit mono little-endian WAV into an AudioClip.

    Integer samples are scaled to [-1, 1] by dividing by 32768.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            samp_width = wf.getsampwidth()
            comp_type = wf.getcomptype()
            sample_rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise AudioFormatError(f"malformed WAV header: {exc}") from exc
    if n_channels != 1:
        raise AudioFormatError(f"channels={n_channels} unsupported (mono required)")
    if samp_width != 2:
        raise AudioFormatError(f"sample_width={samp_width} unsupported (16-bit required)")
    if comp_type != "NONE":
        raise AudioFormatError(f"compression={comp_type} unsupported (PCM required)")
    if sample_rate <= 0:
        raise AudioFormatError(f"sample_rate={sample_rate} invalid")
    if n_frames == 0:
        raise AudioFormatError("frames=0: empty audio stream")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / INT16_SCALE
    return AudioClip(samples=samples, sample_rate=sample_rate, id=str(path))


def save_wav(clip: AudioClip, path) -> None:
    """Write a clip as PCM 16-bit mono WAV; values quantize by 32768, saturating at int16 max."""
    quantized = np.clip(np.rint(clip.samples * INT16_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(quantized.tobytes())


def frame_params(sample_rate: int) -> tuple[int, int]:
    """(frame_len, frame_hop) in samples for the fixed 25 ms / 10 ms analysis grid."""
    return int(round(FRAME_SECONDS * sample_rate)), int(round(HOP_SECONDS * sample_rate))


def next_pow2(n: int) -> int:
    size = 1
    while size < n:
        size *= 2
    return size


def mel_from_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def hz_from_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(sample_rate: int, n_mels: int) -> np.ndarray:
    """n_mels + 2 mel-spaced edge frequencies in Hz over [0, sample_rate/2]."""
    return hz_from_mel(np.linspace(0.0, mel_from_hz(sample_rate / 2.0), n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filterbank evaluated at FFT bin centers, shape [n_bins x n_mels]."""
    edges = mel_band_edges(sample_rate, n_mels)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((bin_freqs.size, n_mels))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        fb[:, m] = np.clip(np.minimum(rising, falling), 0.0, None)
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _hann_window(frame_len: int) -> np.ndarray:
    window = np.hanning(frame_len)
    window.setflags(write=False)
    return window


def _frames(batch: np.ndarray, frame_len: int, frame_hop: int) -> np.ndarray:
    """Slice [B x n] waveforms into [B x F x frame_len] frames (no padding)."""
    if batch.shape[-1] < frame_len:
        raise ValueError(
            f"clip of {batch.shape[-1]} samples is shorter than one frame ({frame_len})"
        )
    return sliding_window_view(batch, frame_len, axis=-1)[:, ::frame_hop, :]


def log_mel_batch(batch: np.ndarray, sample_rate: int, n_mels: int) -> np.ndarray:
    """Log mel-filterbank magnitudes for a [B x n] waveform batch -> [B x F x n_mels].

    Per frame: Hann window, magnitude spectrum on the next power-of-two FFT,
    triangular mel weighting, log with a 1e-10 floor.  The spectral pipeline
    runs in single precision (attack loops hammer this path); results are
    returned as float64 and accurate to ~1e-6.
    """
    frame_len, frame_hop = frame_params(sample_rate)
    frames = _frames(np.asarray(batch, dtype=np.float32), frame_len, frame_hop)
    n_fft = next_pow2(frame_len)
    windowed = frames * _hann_window(frame_len).astype(np.float32)
    spectrum = np.abs(np.fft.rfft(windowed, n=n_fft, axis=-1))
    energies = spectrum @ mel_filterbank(sample_rate, n_fft, n_mels).astype(np.float32)
    return np.log(np.maximum(energies, np.float32(LOG_FLOOR))).astype(np.float64)


def mfcc_batch(
    batch: np.ndarray, sample_rate: int, n_mels: int = N_MELS, n_coeffs: int = N_COEFFS
) -> np.ndarray:
    """MFCCs for a [B x n] waveform batch -> [B x F x n_coeffs] (DCT-II of log mels)."""
    log_mels = log_mel_batch(batch, sample_rate, n_mels)
    return dct(log_mels, type=2, norm="ortho", axis=-1)[..., :n_coeffs]


def mfcc(clip: AudioClip, n_mels: int = N_MELS, n_coeffs: int = N_COEFFS) -> MfccMatrix:
    """Cepstral features of a clip on the fixed 25 ms / 10 ms grid."""
    frame_len, frame_hop = frame_params(clip.sample_rate)
    coeffs = mfcc_batch(clip.samples[None, :], clip.sample_rate, n_mels, n_coeffs)[0]
    return MfccMatrix(frames=coeffs, frame_hop=frame_hop, frame_len=frame_len)


class MfccSimilarity:
    """Cosine similarity of MFCCs against a fixed reference waveform.

    Precomputes the reference features once; `batch` is the attack-loop path.
    """

    def __init__(self, reference: np.ndarray, sample_rate: int):
        self.sample_rate = sample_rate
        self.ref_vec = mfcc_batch(reference[None, :], sample_rate).reshape(-1)
        self.ref_norm = np.linalg.norm(self.ref_vec)
        if self.ref_norm == 0.0:
            raise ValueError("degenerate features: zero-norm MFCC vector")

    def batch(self, candidates: np.ndarray) -> np.ndarray:
        cand_vecs = mfcc_batch(candidates, self.sample_rate).reshape(candidates.shape[0], -1)
        cand_norms = np.linalg.norm(cand_vecs, axis=1)
        if np.any(cand_norms == 0.0):
            raise ValueError("degenerate features: zero-norm MFCC vector")
        sims = cand_vecs @ self.ref_vec / (cand_norms * self.ref_norm)
        return np.clip(sims, -1.0, 1.0)


def mfcc_cosine_batch(reference: np.ndarray, candidates: np.ndarray, sample_rate: int) -> np.ndarray:
    """Cosine similarity between one reference waveform and [B x n] candidates."""
    return MfccSimilarity(reference, sample_rate).batch(candidates)


def mfcc_cosine_similarity(a: AudioClip, b: AudioClip) -> float:
    """Cosine of the angle between the flattened MFCC matrices of two clips."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.sample_rate != b.sample_rate:
        raise ValueError(f"sample_rate mismatch: {a.sample_rate} vs {b.sample_rate}")
    return float(mfcc_cosine_batch(a.samples, b.samples[None, :], a.sample_rate)[0])


def scale_noise_to_snr(signal: AudioClip, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Scale noise so that 10*log10(P_signal / P_noise) equals snr_db.

    P is the mean squared amplitude.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != signal.samples.shape:
        raise ValueError("noise must match signal length")
    p_signal = float(np.mean(signal.samples**2))
    p_noise = float(np.mean(noise**2))
    if p_signal == 0.0:
        raise ValueError("zero-power signal")
    if p_noise == 0.0:
        raise ValueError("zero-power noise")
    target_power = p_signal / 10.0 ** (snr_db / 10.0)
    return noise * np.sqrt(target_power / p_noise)


def measured_snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    """10*log10(P_signal / P_noise); inf for silent noise."""
    p_signal = float(np.mean(np.asarray(signal) ** 2))
    p_noise = float(np.mean(np.asarray(noise) ** 2))
    if p_noise == 0.0:
        return float("inf")
    return 10.0 * np.log10(p_signal / p_noise)


def local_smooth(clip: AudioClip, window: int, mode: str = "median") -> AudioClip:
    """Sliding-window smoothing; each sample becomes the window median (or mean).

    The window must be odd; edges use shrunken windows so length is preserved.
    """
    n = len(clip)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if window > n:
        raise ValueError(f"window {window} exceeds clip length {n}")
    if mode not in ("median", "mean"):
        raise ValueError(f"unknown smoothing mode {mode!r}")
    if window == 1:
        return clip
    reduce = np.median if mode == "median" else np.mean
    half = window // 2
    out = np.empty(n)
    out[half : n - half] = reduce(sliding_window_view(clip.samples, window), axis=-1)
    for i in range(half):
        out[i] = reduce(clip.samples[: i + half + 1])
        out[n - 1 - i] = reduce(clip.samples[n - 1 - i - half :])
    return clip.with_samples(out)


def downsample_defense(clip: AudioClip) -> AudioClip:
    """Band-limit a 16 kHz clip through an 8 kHz bottleneck, keeping its length.

    Windowed-sinc low-pass at 4 kHz, decimation by 2, then linear-interpolation
    reconstruction back to 16 kHz so models always see fixed-length input.
    """
    if clip.sample_rate != 16000:
        raise ValueError(f"downsample defense requires 16 kHz input, got {clip.sample_rate}")
    taps = firwin(DOWNSAMPLE_TAPS, DOWNSAMPLE_CUTOFF_HZ, fs=clip.sample_rate)
    filtered = _filter_same(clip.samples, taps)
    decimated = filtered[::2]
    n = len(clip)
    positions = np.arange(n) / 2.0
    reconstructed = np.interp(positions, np.arange(decimated.size), decimated)
    return clip.with_samples(np.clip(reconstructed, -1.0, 1.0))


def downsample_defense_batch(batch: np.ndarray, sample_rate: int) -> np.ndarray:
    """Vectorized downsample_defense over a [B x n] batch."""
    if sample_rate != 16000:
        raise ValueError(f"downsample defense requires 16 kHz input, got {sample_rate}")
    taps = firwin(DOWNSAMPLE_TAPS, DOWNSAMPLE_CUTOFF_HZ, fs=sample_rate)
    n = batch.shape[-1]
    positions = np.arange(n) / 2.0
    out = np.empty_like(batch, dtype=np.float64)
    grid = np.arange((n + 1) // 2)
    for i in range(batch.shape[0]):
        decimated = _filter_same(batch[i], taps)[::2]
        out[i] = np.interp(positions, grid, decimated)
    return np.clip(out, -1.0, 1.0)


def _filter_same(samples: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """FIR filter with reflected edge padding; output has the input's length."""
    half = taps.size // 2
    padded = np.concatenate([samples[half:0:-1], samples, samples[-2 : -half - 2 : -1]])
    return np.convolve(padded, taps, mode="valid")
