"""Waveform and spectral metrics, single-file enhancement and the
train-short / test-long length sweep."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import dsp
from . import model as M
from .mixer import Corpus, features, mixture_set
from .posemb import LengthOverflowError

SI_SDR_CAP = 100.0
METRICS = ("si_sdr", "seg_snr", "mask_mse")
REPORT_HEADER = "scheme,train_len,test_len,snr_db,metric,value,n"
REPORT_NOTE = (
    "# metrics: si_sdr and seg_snr (dB, higher is better) and mask_mse (lower is better) "
    "stand in for PESQ/ESTOI/CSIG/CBAK/COVL; values are not comparable to published tables"
)


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB, limited to +/-100 dB."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0.0:
        raise ValueError("SI-SDR undefined for a silent reference")
    target = (np.dot(est, ref) / ref_energy) * ref
    residual = est - target
    t, r = np.dot(target, target), np.dot(residual, residual)
    if t == 0.0:
        return -SI_SDR_CAP
    if r == 0.0:
        return SI_SDR_CAP
    return float(np.clip(10.0 * np.log10(t / r), -SI_SDR_CAP, SI_SDR_CAP))


def seg_snr(est, ref, frame: int = 512, hop: int = 256, floor: float = -10.0,
            ceil: float = 35.0, silence_db: float = -40.0) -> float:
    """Mean per-frame SNR, each frame clamped to [floor, ceil].

    Frames whose reference energy is more than ``silence_db`` below the
    loudest reference frame are skipped.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    if ref.size < frame:
        frame, hop = ref.size, ref.size
    ref_f = np.lib.stride_tricks.sliding_window_view(ref, frame)[::hop]
    err_f = np.lib.stride_tricks.sliding_window_view(ref - est, frame)[::hop]
    sig = np.sum(ref_f**2, axis=1)
    err = np.sum(err_f**2, axis=1)
    if sig.max() == 0.0:
        raise ValueError("segmental SNR undefined for an all-silent reference")
    active = sig > sig.max() * 10.0 ** (silence_db / 10.0)
    with np.errstate(divide="ignore"):
        snr = np.where(err[active] > 0, 10.0 * np.log10(sig[active] / np.where(err[active] > 0, err[active], 1.0)), ceil)
    return float(np.mean(np.clip(snr, floor, ceil)))


def estimate_mask(noisy, config: M.ModelConfig, params) -> tuple[np.ndarray, np.ndarray]:
    """Noisy STFT and the model's mask for it."""
    spec = dsp.stft(noisy)
    mask, _ = M.forward(np.abs(spec), params, config, keep_tape=False)
    return spec, mask


def enhance(noisy, config: M.ModelConfig, params) -> np.ndarray:
    """Masked noisy STFT resynthesised to the input's length."""
    noisy = dsp.check_waveform(noisy)
    spec, mask = estimate_mask(noisy, config, params)
    return dsp.istft(dsp.apply_mask(spec, mask), length=noisy.size)


def oracle_enhance(noisy, clean) -> np.ndarray:
    y = dsp.stft(noisy)
    mask = dsp.psm_target(dsp.stft(clean), y)
    return dsp.istft(dsp.apply_mask(y, mask), length=len(noisy))


def masked_spectral_mse(config: M.ModelConfig, params, data) -> float:
    """Mean over utterances of the per-utterance mask MSE.

    ``data`` holds ``(magnitude, target)`` pairs or :class:`Mixture` objects.
    """
    losses = []
    for item in data:
        mag, target = (item if isinstance(item, tuple) else features(item.noisy, item.clean))
        mask, _ = M.forward(mag, params, config, keep_tape=False)
        losses.append(float(np.mean((mask - target) ** 2)))
    return float(np.mean(losses))


@dataclass
class SweepModel:
    config: M.ModelConfig
    params: dict
    train_len: float


def _metrics(est, clean, mask, target):
    return {
        "si_sdr": si_sdr(est, clean),
        "seg_snr": seg_snr(est, clean),
        "mask_mse": float(np.mean((mask - target) ** 2)),
    }


def length_sweep(models: dict, corpus: Corpus, test_lengths=(1, 2, 5, 10, 15, 20),
                 snrs=(-5, 0, 5, 10, 15), per_length: int = 40, seed: int = 4321,
                 split: str = "test", include_references: bool = True) -> list[tuple]:
    """Evaluate every model on the same mixtures for each test length.

    ``models`` maps a scheme label to a :class:`SweepModel`. Each length gets
    ``per_length`` mixtures cycling through ``snrs``. Rows are
    ``(scheme, train_len, test_len, snr_db, metric, mean, n)``; ``noisy``
    (identity mask) and ``oracle`` (ideal PSM) reference rows are added when
    ``include_references`` is set. A Learned-APE model too short for a length
    yields NaN rows with ``n == 0``.
    """
    acc = defaultdict(list)
    failed = set()
    train_lens = {name: m.train_len for name, m in models.items()}
    ref_len = min(train_lens.values(), default=0.0)
    for li, length in enumerate(test_lengths):
        mixtures = mixture_set(corpus, split, per_length, length, seed + 1000 * li, snrs=list(snrs))
        for mix in mixtures:
            y = dsp.stft(mix.noisy)
            target = dsp.psm_target(dsp.stft(mix.clean), y)
            n = mix.noisy.size
            if include_references:
                ones = np.ones_like(target)
                for name, mask in (("noisy", ones), ("oracle", target)):
                    est = dsp.istft(dsp.apply_mask(y, mask), length=n) if name == "oracle" else mix.noisy
                    for metric, value in _metrics(est, mix.clean, mask, target).items():
                        acc[(name, ref_len, length, mix.snr_db, metric)].append(value)
            for name, m in models.items():
                if (name, length) in failed:
                    continue
                try:
                    mask, _ = M.forward(np.abs(y), m.params, m.config, keep_tape=False)
                except LengthOverflowError:
                    failed.add((name, length))
                    continue
                est = dsp.istft(dsp.apply_mask(y, mask), length=n)
                for metric, value in _metrics(est, mix.clean, mask, target).items():
                    acc[(name, m.train_len, length, mix.snr_db, metric)].append(value)
    for name, length in failed:
        for snr in snrs:
            for metric in METRICS:
                acc[(name, train_lens[name], length, snr, metric)] = []
    rows = [(*key, float(np.mean(v)) if v else float("nan"), len(v)) for key, v in acc.items()]
    order = {name: i for i, name in enumerate(["noisy", "oracle", *models])}
    rows.sort(key=lambda r: (order.get(r[0], len(order)), r[2], r[3], METRICS.index(r[4])))
    return rows


def summarize(rows) -> dict:
    """Average over SNRs: ``{(scheme, test_len, metric): mean}`` (SNR cells weighted by count)."""
    tot, cnt = defaultdict(float), defaultdict(int)
    for scheme, _, length, _, metric, value, n in rows:
        if n:
            tot[(scheme, length, metric)] += value * n
            cnt[(scheme, length, metric)] += n
        else:
            cnt.setdefault((scheme, length, metric), 0)
    return {k: (tot[k] / c if c else float("nan")) for k, c in cnt.items()}


def write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(REPORT_NOTE + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER.split(","))
        for scheme, train_len, length, snr, metric, value, n in rows:
            writer.writerow([scheme, f"{train_len:g}", f"{length:g}", snr, metric, format(value, ".10g"), n])


def read_report(path) -> list[tuple]:
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        rows.append((rec["scheme"], float(rec["train_len"]), float(rec["test_len"]), int(rec["snr_db"]),
                     rec["metric"], float(rec["value"]), int(rec["n"])))
    return rows
