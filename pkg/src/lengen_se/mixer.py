"""Synthetic corpus generation, SNR-controlled mixing and batch sampling."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp
from .dsp import SAMPLE_RATE
from .wav import read_wav, write_wav

NOISE_KINDS = ("white", "pink", "babble", "machine")
SPLITS = ("train", "val", "test")
ROLES = ("clean", "noise")
PEAK = 0.5


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def mix_at_snr(clean, noise, snr_db: float):
    """Scale ``noise`` so that ``10*log10(P_clean / P_noise) == snr_db``.

    Returns ``(noisy, scaled_noise)`` with ``noisy = clean + scaled_noise``.
    """
    s = np.asarray(clean, dtype=np.float64)
    d = np.asarray(noise, dtype=np.float64)
    if s.shape != d.shape:
        raise ValueError(f"length mismatch: clean {s.shape} vs noise {d.shape}")
    ps, pd = power(s), power(d)
    if ps == 0.0 or pd == 0.0:
        raise ValueError("cannot mix at an SNR with a zero-power clean or noise signal")
    alpha = np.sqrt(ps / (pd * 10.0 ** (snr_db / 10.0)))
    scaled = alpha * d
    return s + scaled, scaled


def snr_db(clean, noise) -> float:
    return 10.0 * np.log10(power(clean) / power(noise))


# ---------------------------------------------------------------------------
# synthetic sources
# ---------------------------------------------------------------------------

def _peak_normalise(x, peak=PEAK):
    m = np.max(np.abs(x))
    return x if m == 0 else x * (peak / m)


def _resonator(freq, bw, sr=SAMPLE_RATE):
    r = np.exp(-np.pi * bw / sr)
    a = [1.0, -2.0 * r * np.cos(2 * np.pi * freq / sr), r * r]
    return [1.0 - r], a


def _syllable(rng, n, f0_base, sr=SAMPLE_RATE):
    t = np.arange(n) / sr
    glide = rng.uniform(-0.25, 0.25)
    wobble = 0.04 * np.sin(2 * np.pi * rng.uniform(3, 7) * t + rng.uniform(0, 2 * np.pi))
    f0 = np.clip(f0_base * (1.0 + glide * t / max(t[-1], 1e-3) + wobble), 80.0, 300.0)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    src = np.zeros(n)
    for k in range(1, int(5000 // f0.min()) + 1):
        src += np.where(k * f0 < 5000.0, np.sin(k * phase) / k, 0.0)
    for lo, hi, bw in ((300, 900, 90), (900, 2300, 120), (2300, 3300, 180)):
        b, a = _resonator(rng.uniform(lo, hi), bw)
        src = signal.lfilter(b, a, src)
    env = np.sin(np.pi * np.arange(n) / n) ** 2
    return src * env


def synth_clean(seed, duration: float, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like test signal.

    A harmonic source with a drifting F0 in [80, 300] Hz is passed through
    three formant resonators per syllable; syllables of 120-450 ms (a 2-8 Hz
    syllabic rate) are separated by silent gaps, with occasional weak
    fricative bursts. Peak-normalised to 0.5.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sr))
    out = np.zeros(n)
    f0_speaker = rng.uniform(95.0, 230.0)
    pos = int(rng.uniform(0.0, 0.2) * sr)
    while pos < n:
        length = int(rng.uniform(0.12, 0.45) * sr)
        seg = _syllable(rng, length, f0_speaker * np.exp(rng.normal(0, 0.1)), sr)
        seg *= rng.uniform(0.3, 1.0)
        if rng.random() < 0.3:
            fl = int(rng.uniform(0.04, 0.12) * sr)
            b, a = signal.butter(2, [2500 / (sr / 2), 6000 / (sr / 2)], btype="band")
            fric = signal.lfilter(b, a, rng.standard_normal(fl)) * np.hanning(fl)
            seg = np.concatenate([fric * 0.02 * np.abs(seg).max(), seg])
        end = min(n, pos + seg.size)
        out[pos:end] += seg[: end - pos]
        gap = rng.uniform(0.5, 1.0) if rng.random() < 0.15 else rng.uniform(0.05, 0.3)
        pos = end + int(gap * sr)
    return _peak_normalise(out)


def synth_noise(seed, duration: float, kind: str, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Deterministic noise of one of the kinds in ``NOISE_KINDS``, peak 0.5."""
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sr))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n)
        spec[0] = 0.0
        spec[1:] /= np.sqrt(f[1:])
        x = np.fft.irfft(spec, n=n)
    elif kind == "babble":
        talkers = rng.integers(0, 2**31, size=6)
        x = sum(synth_clean(int(s), duration, sr) for s in talkers)
    else:
        t = np.arange(n) / sr
        f0 = rng.uniform(50.0, 200.0)
        x = np.zeros(n)
        for k in range(1, 21):
            x += rng.uniform(0.2, 1.0) / k * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
        am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(1.0, 10.0) * t)
        x = x * am + 0.03 * np.std(x) * rng.standard_normal(n)
    return _peak_normalise(x)


# ---------------------------------------------------------------------------
# corpus and manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    role: str
    split: str
    path: str
    duration: float | None = None


def read_manifest(path) -> list[ManifestEntry]:
    """Parse ``<role>,<split>,<path>`` lines; relative paths resolve against the manifest's folder."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",", 2)
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected <role>,<split>,<path>")
        role, split, file = (p.strip() for p in parts)
        if role not in ROLES or split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: bad role/split {role!r}/{split!r}")
        file_path = Path(file)
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        entries.append(ManifestEntry(role, split, str(file_path)))
    check_manifest(entries)
    return entries


def check_manifest(entries) -> None:
    seen = {}
    for e in entries:
        key = os.path.normpath(e.path)
        if key in seen and seen[key] != e.split:
            raise ValueError(f"{e.path} appears in both {seen[key]!r} and {e.split!r} splits")
        seen[key] = e.split


def write_manifest(path, entries) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        p = Path(e.path)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{e.role},{e.split},{p.as_posix()}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


@dataclass
class Corpus:
    """Waveforms grouped by role and split, e.g. ``corpus.sources["clean"]["train"]``."""

    sources: dict = field(default_factory=lambda: {r: {s: [] for s in SPLITS} for r in ROLES})
    names: dict = field(default_factory=lambda: {r: {s: [] for s in SPLITS} for r in ROLES})

    def add(self, role, split, name, wave):
        self.sources[role][split].append(np.asarray(wave, dtype=np.float64))
        self.names[role][split].append(name)

    def get(self, role, split):
        items = self.sources[role][split]
        if not items:
            raise ValueError(f"corpus has no {role} files in split {split!r}")
        return items

    @classmethod
    def from_manifest(cls, path) -> "Corpus":
        corpus = cls()
        for e in read_manifest(path):
            corpus.add(e.role, e.split, e.path, read_wav(e.path))
        return corpus


def _split_counts(n):
    n_val = max(1, n // 10)
    return n - 2 * n_val, n_val, n_val


def _seed(seed, *keys):
    return np.random.SeedSequence([seed, *keys])


def synthetic_plan(n_clean=60, clean_len=30.0, n_noise=12, noise_len=60.0):
    """Yield ``(role, split, name, kind, index, length)`` for every file of a synthetic corpus.

    Clean files split 80/10/10; noise files cycle through the kinds and each
    kind contributes to train, val and test in turn, so test noises are unseen.
    """
    n_tr, n_va, _ = _split_counts(n_clean)
    for i in range(n_clean):
        split = "train" if i < n_tr else "val" if i < n_tr + n_va else "test"
        yield "clean", split, f"clean_{i:03d}", None, i, clean_len
    for i in range(n_noise):
        kind = NOISE_KINDS[i % len(NOISE_KINDS)]
        split = SPLITS[(i // len(NOISE_KINDS)) % len(SPLITS)]
        yield "noise", split, f"noise_{i:03d}_{kind}", kind, i, noise_len


def _render(seed, role, kind, index, length):
    if role == "clean":
        return synth_clean(_seed(seed, 0, index), length)
    return synth_noise(_seed(seed, 1, index), length, kind)


def synthetic_corpus(seed=0, n_clean=60, clean_len=30.0, n_noise=12, noise_len=60.0) -> Corpus:
    """Build the synthetic corpus in memory (same content as :func:`make_corpus` before quantisation)."""
    corpus = Corpus()
    for role, split, name, kind, index, length in synthetic_plan(n_clean, clean_len, n_noise, noise_len):
        corpus.add(role, split, name, _render(seed, role, kind, index, length))
    return corpus


def make_corpus(out_dir, seed=0, n_clean=60, clean_len=30.0, n_noise=12, noise_len=60.0) -> Path:
    """Write the synthetic corpus as PCM16 WAVs plus ``manifest.csv``; returns the manifest path.

    The manifest is written last, so a failed run never leaves one behind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for role, split, name, kind, index, length in synthetic_plan(n_clean, clean_len, n_noise, noise_len):
        path = out_dir / role / f"{name}.wav"
        path.parent.mkdir(exist_ok=True)
        write_wav(path, _render(seed, role, kind, index, length))
        entries.append(ManifestEntry(role, split, str(path)))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest


# ---------------------------------------------------------------------------
# mixtures and batches
# ---------------------------------------------------------------------------

@dataclass
class Mixture:
    clean: np.ndarray
    noise: np.ndarray  # already scaled to the requested SNR
    noisy: np.ndarray
    snr_db: int
    clean_id: int
    noise_id: int
    clean_offset: int
    noise_offset: int


@dataclass
class Batch:
    mag: np.ndarray  # (B, T, K)
    target: np.ndarray  # (B, T, K) clipped PSM
    noisy: np.ndarray  # (B, N)
    clean: np.ndarray  # (B, N)
    snr_db: np.ndarray  # (B,)


def draw_mixture(corpus: Corpus, split: str, n_samples: int, snr, rng, max_tries=100,
                 noise_split: str | None = None) -> Mixture:
    """Random clean and noise clips of ``n_samples`` mixed at ``snr`` dB.

    Noise comes from ``noise_split`` (default: same split as the speech).
    Sources that are too short, or clips whose clean part is silent, are
    redrawn.
    """
    cleans = corpus.get("clean", split)
    noises = corpus.get("noise", noise_split or split)
    for _ in range(max_tries):
        ci = int(rng.integers(len(cleans)))
        ni = int(rng.integers(len(noises)))
        c, nz = cleans[ci], noises[ni]
        if c.size < n_samples or nz.size < n_samples:
            continue
        co = int(rng.integers(c.size - n_samples + 1))
        no = int(rng.integers(nz.size - n_samples + 1))
        s, d = c[co : co + n_samples], nz[no : no + n_samples]
        if power(s) == 0.0 or power(d) == 0.0:
            continue
        noisy, scaled = mix_at_snr(s, d, snr)
        return Mixture(s, scaled, noisy, snr, ci, ni, co, no)
    raise ValueError(f"no {split} sources long enough for {n_samples} samples")


def features(mix_noisy, mix_clean):
    """Noisy magnitude and clipped PSM target for one mixture."""
    y = dsp.stft(mix_noisy)
    s = dsp.stft(mix_clean)
    return np.abs(y), dsp.psm_target(s, y)


def sample_batch(corpus: Corpus, batch_size: int, clip_len_s: float, snr_range, rng,
                 split: str = "train") -> Batch:
    """One dynamically mixed batch; the SNR of each clip is an integer drawn uniformly from ``snr_range``."""
    n = int(round(clip_len_s * SAMPLE_RATE))
    lo, hi = snr_range
    mags, targets, noisy, clean, snrs = [], [], [], [], []
    for _ in range(batch_size):
        snr = int(rng.integers(lo, hi + 1))
        mix = draw_mixture(corpus, split, n, snr, rng)
        mag, target = features(mix.noisy, mix.clean)
        mags.append(mag)
        targets.append(target)
        noisy.append(mix.noisy)
        clean.append(mix.clean)
        snrs.append(snr)
    return Batch(np.stack(mags), np.stack(targets), np.stack(noisy), np.stack(clean), np.array(snrs))


def mixture_set(corpus: Corpus, split: str, count: int, length_s: float, seed: int,
                snrs=None, snr_range=(-10, 20), noise_split: str | None = None) -> list[Mixture]:
    """Frozen list of mixtures for validation or testing.

    With ``snrs`` given, mixture ``i`` uses ``snrs[i % len(snrs)]``; otherwise
    each SNR is an integer drawn from ``snr_range``.
    """
    rng = np.random.default_rng(seed)
    n = int(round(length_s * SAMPLE_RATE))
    out = []
    for i in range(count):
        snr = snrs[i % len(snrs)] if snrs is not None else int(rng.integers(snr_range[0], snr_range[1] + 1))
        out.append(draw_mixture(corpus, split, n, snr, rng, noise_split=noise_split))
    return out
