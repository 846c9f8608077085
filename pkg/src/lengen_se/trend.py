"""Toy-scale train-short / test-long experiment.

Tiny models are trained on short clips with each position-embedding scheme
and scored by mask MSE at several test lengths. All lengths are cut from the
same long mixtures, so every length covers identical audio and the only
thing that changes is how much context the model sees at once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from . import model as M
from .dsp import SAMPLE_RATE, num_frames
from .evaluation import masked_spectral_mse
from .mixer import Corpus, features, mixture_set, synthetic_corpus
from .train import TrainConfig, train_loop

log = logging.getLogger(__name__)

TOY_MODEL = M.ModelConfig(n_layers=2, n_heads=4, d_model=32, d_ff=64)


@dataclass
class TrendSetup:
    schemes: tuple = ("no_pos", "sinusoidal", "learned_ape", "kerple")
    seeds: tuple = (0, 1, 2)
    train_len_s: float = 0.5
    test_lengths_s: tuple = (2.0, 4.0)
    model: M.ModelConfig = TOY_MODEL
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=1, iters_per_epoch=5000, clip_len_s=0.5, warmup_iters=400, val_count=0))
    eval_count: int = 40
    eval_seed: int = 777
    snrs: tuple = (-5, 0, 5, 10, 15)


def chunk_features(mixtures, length_s: float):
    """Features of consecutive non-overlapping ``length_s`` chunks of every mixture."""
    n = int(round(length_s * SAMPLE_RATE))
    out = []
    for mix in mixtures:
        for start in range(0, mix.noisy.size - n + 1, n):
            out.append(features(mix.noisy[start : start + n], mix.clean[start : start + n]))
    return out


def toy_corpus(seed: int = 0) -> Corpus:
    return synthetic_corpus(seed=seed, n_clean=20, clean_len=10.0, n_noise=12, noise_len=20.0)


def run(setup: TrendSetup, corpus: Corpus | None = None) -> dict:
    """Return ``{seed: {scheme: {length_s: mask_mse}}}``.

    The evaluation set is held-out speech mixed with the training noise
    recordings at fresh offsets, so noise-type mismatch does not mask the
    length effect.
    """
    corpus = corpus or toy_corpus()
    longest = max(setup.test_lengths_s)
    mixtures = mixture_set(corpus, "test", setup.eval_count, longest, setup.eval_seed,
                           snrs=list(setup.snrs), noise_split="train")
    lengths = (setup.train_len_s, *setup.test_lengths_s)
    eval_sets = {length: chunk_features(mixtures, length) for length in lengths}
    max_len = num_frames(int(round(longest * SAMPLE_RATE)))
    results = {}
    for seed in setup.seeds:
        results[seed] = {}
        for scheme in setup.schemes:
            config = replace(setup.model, pe_scheme=scheme, pe_max_len=max_len if scheme == "learned_ape" else 0)
            cfg = replace(setup.train, clip_len_s=setup.train_len_s, seed=seed)
            params = train_loop(config, cfg, corpus).params
            results[seed][scheme] = {
                length: masked_spectral_mse(config, params, data) for length, data in eval_sets.items()
            }
            log.info("seed %d %s %s", seed, scheme, results[seed][scheme])
    return results


def check(results: dict, train_len: float, long_len: float) -> dict:
    """Per-seed booleans for each trend claim, plus majority verdicts."""
    claims = {
        "kerple<=no_pos": lambda r: r["kerple"][long_len] <= r["no_pos"][long_len],
        "kerple<sinusoidal": lambda r: r["kerple"][long_len] < r["sinusoidal"][long_len],
        "sinusoidal_degrades": lambda r: r["sinusoidal"][long_len] > r["sinusoidal"][train_len],
        "learned_ape_degrades": lambda r: r["learned_ape"][long_len] > r["learned_ape"][train_len],
    }
    per_seed = {seed: {name: bool(f(r)) for name, f in claims.items()} for seed, r in results.items()}
    n = len(per_seed)
    majority = {name: sum(s[name] for s in per_seed.values()) * 2 > n for name in claims}
    return {"per_seed": per_seed, "majority": majority}


def format_table(results: dict) -> str:
    lines = []
    for seed, by_scheme in results.items():
        for scheme, by_len in by_scheme.items():
            cells = "  ".join(f"{length:g}s={value:.5f}" for length, value in by_len.items())
            lines.append(f"seed={seed} {scheme:<12} {cells}")
    return "\n".join(lines)
