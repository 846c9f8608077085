"""Central finite-difference check of :func:`model.backward` on a tiny model."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from .posemb import SCHEMES

TINY = M.ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, n_bins=9, pe_max_len=8)
TINY_FRAMES = 5
FD_STEP = 1e-4
TOLERANCE = 1e-4


@dataclass
class GroupResult:
    scheme: str
    name: str
    rel_error: float
    size: int

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE


def relative_error(analytic, numeric) -> float:
    """Worst elementwise deviation scaled by the group's largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _problem(config, seed, n_frames, batch):
    rng = np.random.default_rng(seed)
    params = M.init_params(config, seed)
    # move PE params off their neutral init so every group has a non-trivial gradient
    for name in params:
        if name.startswith("pe."):
            params[name] = params[name] + rng.normal(0.0, 0.5, params[name].shape)
        elif name.endswith(("bias", ".gain")):
            params[name] = params[name] + rng.normal(0.0, 0.1, params[name].shape)
    mag = np.abs(rng.normal(size=(batch, n_frames, config.n_bins)))
    target = rng.uniform(size=(batch, n_frames, config.n_bins))
    return params, mag, target


def _loss(mag, target, params, config):
    mask, _ = M.forward(mag, params, config, keep_tape=False)
    return float(np.mean((mask - target) ** 2))


def check_scheme(scheme: str, config: M.ModelConfig = TINY, n_frames: int = TINY_FRAMES,
                 seed: int = 0, batch: int = 2, backward=None) -> list[GroupResult]:
    backward = backward or M.backward
    config = replace(config, pe_scheme=scheme)
    params, mag, target = _problem(config, seed, n_frames, batch)
    mask, tape = M.forward(mag, params, config)
    grads = backward(tape, 2.0 * (mask - target) / mask.size, params, config)
    results = []
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat, nflat = value.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = _loss(mag, target, params, config)
            flat[i] = orig - FD_STEP
            down = _loss(mag, target, params, config)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * FD_STEP)
        results.append(GroupResult(scheme, name, relative_error(grads[name], numeric), value.size))
    return results


def check_all(schemes=SCHEMES, **kwargs) -> list[GroupResult]:
    out = []
    for scheme in schemes:
        out.extend(check_scheme(scheme, **kwargs))
    return out
