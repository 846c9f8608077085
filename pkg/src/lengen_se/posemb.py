"""Position-embedding schemes: none, sinusoidal and learned absolute tables,
T5 bucketed relative bias, and the logarithmic KERPLE relative bias.

Every scheme reads its trainable tensors from the model parameter dict under
``pe.*`` keys, so the optimizer and checkpoint code treat them like any other
weight. Relative schemes produce an ``(h, T, T)`` additive attention bias that
is shared by all layers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEMES = ("no_pos", "sinusoidal", "learned_ape", "t5_rpe", "kerple")
APE_SCHEMES = ("sinusoidal", "learned_ape")
RPE_SCHEMES = ("t5_rpe", "kerple")

NUM_BUCKETS = 32
T5_EXACT = 8
T5_MAX_DISTANCE = 128

# softplus(x) == 1 at init
KERPLE_INIT_RHO = float(np.log(np.expm1(1.0)))


class LengthOverflowError(ValueError):
    """Sequence longer than the learned absolute table."""


def sinusoidal_table(n_frames: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal table of shape ``(n_frames, d_model)``.

    Positions and channels are 1-based in the formula and stored 0-based:
    row ``r`` holds position ``r + 1`` and column ``c`` holds channel
    ``c + 1``. An even channel ``d`` gets ``sin(10000**(-d/d_model) * t)``,
    an odd one ``cos(10000**(-(d-1)/d_model) * t)``.
    """
    if n_frames < 1:
        raise ValueError(f"need at least one frame, got {n_frames}")
    if d_model < 2 or d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    t = np.arange(1, n_frames + 1, dtype=np.float64)[:, None]
    d = np.arange(1, d_model + 1)
    even = d % 2 == 0
    expo = np.where(even, d, d - 1) / d_model
    angle = t * 10000.0 ** (-expo)
    return np.where(even, np.sin(angle), np.cos(angle))


def t5_bucket(rel):
    """Bucket index in [0, 31] for a signed offset ``rel = i - j`` (scalar or array)."""
    rel = np.asarray(rel, dtype=np.int64)
    dist = np.abs(rel)
    with np.errstate(divide="ignore"):
        log_part = np.floor(
            np.log(np.maximum(dist, 1) / T5_EXACT)
            / np.log(T5_MAX_DISTANCE / T5_EXACT)
            * T5_EXACT
        ).astype(np.int64)
    far = np.minimum(15, T5_EXACT + log_part)
    near = dist
    half = np.where(dist < T5_EXACT, near, far)
    out = np.where(rel < 0, half + 16, half)
    return int(out) if out.ndim == 0 else out


def t5_bucket_matrix(n_frames: int) -> np.ndarray:
    pos = np.arange(n_frames)
    return t5_bucket(pos[:, None] - pos[None, :])


def t5_bias_matrix(n_frames: int, buckets) -> np.ndarray:
    """``bias[h, i, j] = buckets[h, t5_bucket(i - j)]``."""
    buckets = np.asarray(buckets, dtype=np.float64)
    if buckets.ndim != 2 or buckets.shape[1] != NUM_BUCKETS:
        raise ValueError(f"expected (h, {NUM_BUCKETS}) bucket parameters, got {buckets.shape}")
    return buckets[:, t5_bucket_matrix(n_frames)]


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def kerple_bias_matrix(n_frames: int, r1, r2) -> np.ndarray:
    """Non-causal logarithmic KERPLE bias ``-r1 * log(1 + r2 * |i - j|)``, shape (h, T, T)."""
    r1 = np.atleast_1d(np.asarray(r1, dtype=np.float64))
    r2 = np.atleast_1d(np.asarray(r2, dtype=np.float64))
    if np.any(r1 <= 0) or np.any(r2 <= 0):
        raise ValueError("KERPLE scales must be positive")
    pos = np.arange(n_frames)
    dist = np.abs(pos[:, None] - pos[None, :]).astype(np.float64)
    return -r1[:, None, None] * np.log1p(r2[:, None, None] * dist)


@dataclass(frozen=True)
class PeScheme:
    """One position-embedding scheme bound to model dimensions.

    ``max_len`` only matters for ``learned_ape``: it is the number of rows in
    the learned table and the hard limit on inference length.
    """

    tag: str
    n_heads: int
    d_model: int
    max_len: int = 0

    def __post_init__(self):
        if self.tag not in SCHEMES:
            raise ValueError(f"unknown position-embedding scheme {self.tag!r}; choose from {SCHEMES}")
        if self.tag == "learned_ape" and self.max_len < 1:
            raise ValueError("learned_ape needs max_len >= 1")

    @property
    def is_ape(self) -> bool:
        return self.tag in APE_SCHEMES

    @property
    def is_rpe(self) -> bool:
        return self.tag in RPE_SCHEMES

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.tag == "learned_ape":
            a = np.sqrt(6.0 / (self.max_len + self.d_model))
            return {"pe.table": rng.uniform(-a, a, size=(self.max_len, self.d_model))}
        if self.tag == "t5_rpe":
            return {"pe.buckets": np.zeros((self.n_heads, NUM_BUCKETS))}
        if self.tag == "kerple":
            return {
                "pe.rho1": np.full(self.n_heads, KERPLE_INIT_RHO),
                "pe.rho2": np.full(self.n_heads, KERPLE_INIT_RHO),
            }
        return {}

    def param_names(self) -> tuple[str, ...]:
        return {
            "learned_ape": ("pe.table",),
            "t5_rpe": ("pe.buckets",),
            "kerple": ("pe.rho1", "pe.rho2"),
        }.get(self.tag, ())

    def num_params(self) -> int:
        return {
            "learned_ape": self.max_len * self.d_model,
            "t5_rpe": self.n_heads * NUM_BUCKETS,
            "kerple": 2 * self.n_heads,
        }.get(self.tag, 0)

    def kerple_scales(self, params) -> tuple[np.ndarray, np.ndarray]:
        return softplus(params["pe.rho1"]), softplus(params["pe.rho2"])

    def ape(self, params, n_frames: int) -> np.ndarray | None:
        """Absolute table rows for positions ``0..n_frames-1``, or None for non-APE schemes."""
        if self.tag == "sinusoidal":
            return sinusoidal_table(n_frames, self.d_model)
        if self.tag == "learned_ape":
            if n_frames > self.max_len:
                raise LengthOverflowError(
                    f"sequence of {n_frames} frames exceeds learned table length {self.max_len}"
                )
            return params["pe.table"][:n_frames]
        return None

    def rpe(self, params, n_frames: int) -> np.ndarray | None:
        """``(h, T, T)`` attention bias, or None for non-RPE schemes."""
        if self.tag == "t5_rpe":
            return t5_bias_matrix(n_frames, params["pe.buckets"])
        if self.tag == "kerple":
            r1, r2 = self.kerple_scales(params)
            return kerple_bias_matrix(n_frames, r1, r2)
        return None

    def ape_backward(self, params, grad_table: np.ndarray) -> dict[str, np.ndarray]:
        if self.tag != "learned_ape":
            return {}
        g = np.zeros_like(params["pe.table"])
        g[: grad_table.shape[0]] = grad_table
        return {"pe.table": g}

    def rpe_backward(self, params, grad_bias: np.ndarray) -> dict[str, np.ndarray]:
        """Map ``dL/dbias`` of shape (h, T, T) to gradients of the scheme's parameters."""
        n_frames = grad_bias.shape[-1]
        if self.tag == "t5_rpe":
            idx = t5_bucket_matrix(n_frames).ravel()
            g = np.zeros((self.n_heads, NUM_BUCKETS))
            for h in range(self.n_heads):
                g[h] = np.bincount(idx, weights=grad_bias[h].ravel(), minlength=NUM_BUCKETS)
            return {"pe.buckets": g}
        if self.tag == "kerple":
            rho1, rho2 = params["pe.rho1"], params["pe.rho2"]
            r1, r2 = softplus(rho1), softplus(rho2)
            pos = np.arange(n_frames)
            dist = np.abs(pos[:, None] - pos[None, :]).astype(np.float64)
            log_term = np.log1p(r2[:, None, None] * dist)
            g_r1 = -np.sum(grad_bias * log_term, axis=(1, 2))
            g_r2 = -r1 * np.sum(grad_bias * dist / (1.0 + r2[:, None, None] * dist), axis=(1, 2))
            return {"pe.rho1": g_r1 * sigmoid(rho1), "pe.rho2": g_r2 * sigmoid(rho2)}
        return {}


def build_scheme(tag: str, n_heads: int, d_model: int, max_len: int = 0) -> PeScheme:
    return PeScheme(tag=tag, n_heads=n_heads, d_model=d_model, max_len=max_len)
