"""Mono 16 kHz WAV reading/writing (PCM 16-bit or 32-bit float)."""
from __future__ import annotations

import numpy as np
from scipy.io import wavfile

from .dsp import SAMPLE_RATE


class WavFormatError(ValueError):
    pass


def read_wav(path) -> np.ndarray:
    """Read a mono 16 kHz file as float64 samples in nominal [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz (resample first)")
    if data.ndim != 1:
        raise WavFormatError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.float32:
        return data.astype(np.float64)
    raise WavFormatError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")


def write_wav(path, samples, fmt: str = "pcm16") -> None:
    """Write mono 16 kHz audio; ``fmt`` is ``"pcm16"`` (clipped to [-1, 1)) or ``"float32"``."""
    x = np.asarray(samples, dtype=np.float64)
    if fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, SAMPLE_RATE, data)
