"""STFT analysis/synthesis, phase-sensitive mask targets and mask application.

Spectrograms are plain complex ``numpy`` arrays shaped ``(T, K)`` (or
``(..., T, K)`` where noted); waveforms are 1-D float arrays at 16 kHz.
"""
from __future__ import annotations

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN = 512  # 32 ms
HOP = 256  # 16 ms
PSM_DIV_EPS = 1e-8


class ConfigError(ValueError):
    """Invalid transform configuration (window length, hop, bin count)."""


def sqrt_hann_window(length: int) -> np.ndarray:
    """Periodic square-root Hann window.

    ``w[n] = sqrt(0.5 * (1 - cos(2*pi*n/length)))``; at hop ``length/2`` the
    squared window overlap-adds to exactly one.
    """
    if length < 2 or length % 2:
        raise ConfigError(f"window length must be even and >= 2, got {length}")
    n = np.arange(length)
    return np.sqrt(0.5 * (1.0 - np.cos(2.0 * np.pi * n / length)))


def check_waveform(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"waveform must be 1-D, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("empty waveform")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains NaN or Inf")
    return x


def padded_length(n: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    """Length after zero-padding the tail so the last partial frame is kept."""
    return -(-max(n - frame_len, 0) // hop) * hop + frame_len


def num_frames(n: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    return (padded_length(n, frame_len, hop) - frame_len) // hop + 1


def stft(x, frame_len: int = FRAME_LEN, hop: int = HOP, window=None) -> np.ndarray:
    """Windowed, unnormalised real DFT of tail-padded frames; returns (T, frame_len//2+1)."""
    x = check_waveform(x)
    if window is None:
        window = sqrt_hann_window(frame_len)
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (frame_len,):
        raise ConfigError(f"window length {window.shape} != frame_len {frame_len}")
    if not 0 < hop <= frame_len:
        raise ConfigError(f"hop must be in (0, frame_len], got {hop}")
    n_pad = padded_length(x.size, frame_len, hop)
    xp = np.zeros(n_pad)
    xp[: x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(xp, frame_len)[::hop]
    return np.fft.rfft(frames * window, axis=-1)


def istft(spec, hop: int = HOP, window=None, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Each frame is inverse-transformed (the 1/frame_len factor lives here),
    multiplied by the synthesis window and overlap-added. With the sqrt-Hann
    pair at 50 % overlap this reconstructs every sample covered by two frames.
    ``length`` trims the output; by default the padded length is returned.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2:
        raise ValueError(f"spectrogram must be (T, K), got shape {spec.shape}")
    n_frames, n_bins = spec.shape
    frame_len = 2 * (n_bins - 1)
    if window is None:
        window = sqrt_hann_window(frame_len)
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (frame_len,):
        raise ConfigError(
            f"spectrogram has {n_bins} bins (frame_len {frame_len}) but window has length {window.size}"
        )
    if not 0 < hop <= frame_len:
        raise ConfigError(f"hop must be in (0, frame_len], got {hop}")
    frames = np.fft.irfft(spec, n=frame_len, axis=-1) * window
    out = np.zeros((n_frames - 1) * hop + frame_len)
    for t in range(n_frames):
        out[t * hop : t * hop + frame_len] += frames[t]
    if length is not None:
        if length > out.size:
            out = np.concatenate([out, np.zeros(length - out.size)])
        out = out[:length]
    return out


def magnitude(spec) -> np.ndarray:
    return np.abs(spec)


def psm_target(clean_spec, noisy_spec) -> np.ndarray:
    """Phase-sensitive mask ``|S|/|Y| cos(phase(S) - phase(Y))`` clipped to [0, 1].

    Bins whose noisy magnitude falls below 1e-8 get a mask of 0.
    """
    s = np.asarray(clean_spec)
    y = np.asarray(noisy_spec)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch: clean {s.shape} vs noisy {y.shape}")
    mag2 = (y * np.conj(y)).real
    ok = np.abs(y) >= PSM_DIV_EPS
    # Re(S conj(Y)) / |Y|^2 == |S|/|Y| cos(dphi)
    raw = np.zeros(y.shape)
    raw[ok] = (s[ok] * np.conj(y[ok])).real / mag2[ok]
    return np.clip(raw, 0.0, 1.0)


def apply_mask(noisy_spec, mask) -> np.ndarray:
    y = np.asarray(noisy_spec)
    m = np.asarray(mask, dtype=np.float64)
    if y.shape != m.shape:
        raise ValueError(f"shape mismatch: spectrogram {y.shape} vs mask {m.shape}")
    return y * m
