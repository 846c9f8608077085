"""Position-aware Transformer mask estimator with hand-written reverse mode.

Inputs are noisy magnitude spectrograms shaped ``(T, K)`` or ``(B, T, K)``
(a batch of equal-length clips). Parameters live in a flat ``dict`` keyed by
stable names; gradients come back in a dict with the same keys and shapes.

Each building block has a ``*_forward`` returning ``(out, cache)`` and a
matching ``*_backward`` consuming that cache.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .posemb import PeScheme, build_scheme

LN_EPS = 1e-5
ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    d_model: int = 256
    d_ff: int = 1024
    n_bins: int = 257
    pe_scheme: str = "no_pos"
    pe_max_len: int = 0
    ffn_activation: str = "relu"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "n_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ffn_activation not in ACTIVATIONS:
            raise ValueError(f"ffn_activation must be one of {ACTIVATIONS}")
        self.scheme  # validates tag / max_len

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scheme(self) -> PeScheme:
        return build_scheme(self.pe_scheme, self.n_heads, self.d_model, self.pe_max_len)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order and shapes (the checkpoint order)."""
    K, d, f = config.n_bins, config.d_model, config.d_ff
    shapes = {
        "embed.ln.gain": (K,),
        "embed.ln.bias": (K,),
        "embed.fc.weight": (K, d),
        "embed.fc.bias": (d,),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn.wq": (d, d),
            p + "attn.wk": (d, d),
            p + "attn.wv": (d, d),
            p + "attn.wo": (d, d),
            p + "ln1.gain": (d,),
            p + "ln1.bias": (d,),
            p + "ffn.fc1.weight": (d, f),
            p + "ffn.fc1.bias": (f,),
            p + "ffn.fc2.weight": (f, d),
            p + "ffn.fc2.bias": (d,),
            p + "ln2.gain": (d,),
            p + "ln2.bias": (d,),
        })
    shapes["head.fc.weight"] = (d, K)
    shapes["head.fc.bias"] = (K,)
    scheme = config.scheme
    for name, value in scheme.init_params(np.random.default_rng(0)).items():
        shapes[name] = value.shape
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit LN gains; PE params per scheme."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("pe."):
            continue
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 2:
            params[name] = _glorot(rng, *shape)
        else:
            params[name] = np.zeros(shape)
    params.update(config.scheme.init_params(rng))
    return params


def num_params(params) -> int:
    return int(sum(v.size for v in params.values()))


def zeros_like(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_params(params, config: ModelConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape} != expected {shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _linear_backward(x, w, dy):
    """Grads of ``y = x @ w (+ b)`` for x of shape (..., n_in)."""
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w.T, dw, db


def layer_norm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_backward(dy, cache):
    xhat, inv_std, gain = cache
    red = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=red)
    dbias = dy.sum(axis=red)
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


_GELU_C = np.sqrt(2.0 / np.pi)


def _activation(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _activation_grad(x, kind):
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def input_embedding_forward(mag, params, config: ModelConfig):
    """``Z = ReLU(FC(LN(|Y|)))`` with LN over the K bins of each frame."""
    if mag.shape[-1] != config.n_bins:
        raise ValueError(f"input has {mag.shape[-1]} bins, model expects {config.n_bins}")
    a, ln_cache = layer_norm_forward(mag, params["embed.ln.gain"], params["embed.ln.bias"])
    pre = a @ params["embed.fc.weight"] + params["embed.fc.bias"]
    return np.maximum(pre, 0.0), (a, pre, ln_cache)


def input_embedding_backward(dz, cache, params, grads):
    a, pre, ln_cache = cache
    dpre = dz * (pre > 0)
    da, grads["embed.fc.weight"], grads["embed.fc.bias"] = _linear_backward(
        a, params["embed.fc.weight"], dpre
    )
    _, grads["embed.ln.gain"], grads["embed.ln.bias"] = layer_norm_backward(da, ln_cache)


def add_ape(z, params, config: ModelConfig):
    """Add the absolute table for the first T positions; identity for other schemes."""
    table = config.scheme.ape(params, z.shape[-2])
    return z if table is None else z + table


def mhsa_forward(u, bias, params, layer: int, config: ModelConfig):
    """Multi-head self-attention with an optional ``(h, T, T)`` additive logit bias."""
    p = f"layers.{layer}.attn."
    h, dk = config.n_heads, config.d_head
    lead, n_frames = u.shape[:-2], u.shape[-2]

    def split(x):  # (..., T, d) -> (..., h, T, dk)
        return np.swapaxes(x.reshape(*lead, n_frames, h, dk), -2, -3)

    q, k, v = (split(u @ params[p + w]) for w in ("wq", "wk", "wv"))
    scale = 1.0 / np.sqrt(dk)
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    if bias is not None:
        logits = logits + bias
    attn = softmax(logits)
    ctx = np.swapaxes(attn @ v, -2, -3).reshape(*lead, n_frames, h * dk)
    out = ctx @ params[p + "wo"]
    return out, (u, q, k, v, attn, ctx, scale)


def mhsa_backward(dout, cache, params, layer: int, config: ModelConfig, grads):
    """Returns ``(du, dbias)``; dbias is summed over any batch axis, shape (h, T, T)."""
    p = f"layers.{layer}.attn."
    u, q, k, v, attn, ctx, scale = cache
    h, dk = config.n_heads, config.d_head
    lead, n_frames = u.shape[:-2], u.shape[-2]

    def merge(x):  # (..., h, T, dk) -> (..., T, d)
        return np.swapaxes(x, -2, -3).reshape(*lead, n_frames, h * dk)

    dctx, grads[p + "wo"], _ = _linear_backward(ctx, params[p + "wo"], dout)
    dctx = np.swapaxes(dctx.reshape(*lead, n_frames, h, dk), -2, -3)
    dattn = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dctx
    dlogits = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dbias = dlogits.reshape(-1, h, n_frames, n_frames).sum(axis=0)
    dq = (dlogits @ k) * scale
    dkk = (np.swapaxes(dlogits, -1, -2) @ q) * scale
    du = np.zeros_like(u)
    for name, dproj in (("wq", dq), ("wk", dkk), ("wv", dv)):
        dx, grads[p + name], _ = _linear_backward(u, params[p + name], merge(dproj))
        du += dx
    return du, dbias


def ffn_forward(u, params, layer: int, config: ModelConfig):
    p = f"layers.{layer}.ffn."
    pre = u @ params[p + "fc1.weight"] + params[p + "fc1.bias"]
    act = _activation(pre, config.ffn_activation)
    out = act @ params[p + "fc2.weight"] + params[p + "fc2.bias"]
    return out, (u, pre, act)


def ffn_backward(dout, cache, params, layer: int, config: ModelConfig, grads):
    p = f"layers.{layer}.ffn."
    u, pre, act = cache
    dact, grads[p + "fc2.weight"], grads[p + "fc2.bias"] = _linear_backward(
        act, params[p + "fc2.weight"], dout
    )
    dpre = dact * _activation_grad(pre, config.ffn_activation)
    du, grads[p + "fc1.weight"], grads[p + "fc1.bias"] = _linear_backward(
        u, params[p + "fc1.weight"], dpre
    )
    return du


def transformer_layer_forward(u, bias, params, layer: int, config: ModelConfig):
    """Post-LN layer: ``U1 = LN(U + MHSA(U))``, ``out = LN(U1 + FFN(U1))``."""
    p = f"layers.{layer}."
    att, att_cache = mhsa_forward(u, bias, params, layer, config)
    u1, ln1_cache = layer_norm_forward(u + att, params[p + "ln1.gain"], params[p + "ln1.bias"])
    ff, ff_cache = ffn_forward(u1, params, layer, config)
    out, ln2_cache = layer_norm_forward(u1 + ff, params[p + "ln2.gain"], params[p + "ln2.bias"])
    return out, (att_cache, ln1_cache, ff_cache, ln2_cache)


def transformer_layer_backward(dout, cache, params, layer: int, config: ModelConfig, grads):
    p = f"layers.{layer}."
    att_cache, ln1_cache, ff_cache, ln2_cache = cache
    dr2, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = layer_norm_backward(dout, ln2_cache)
    du1 = dr2 + ffn_backward(dr2, ff_cache, params, layer, config, grads)
    dr1, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = layer_norm_backward(du1, ln1_cache)
    du, dbias = mhsa_backward(dr1, att_cache, params, layer, config, grads)
    return dr1 + du, dbias


def output_head_forward(u, params):
    """Sigmoid mask over frequency bins."""
    mask = _sigmoid(u @ params["head.fc.weight"] + params["head.fc.bias"])
    return mask, (u, mask)


def output_head_backward(dmask, cache, params, grads):
    u, mask = cache
    dlogit = dmask * mask * (1.0 - mask)
    du, grads["head.fc.weight"], grads["head.fc.bias"] = _linear_backward(
        u, params["head.fc.weight"], dlogit
    )
    return du


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Intermediates retained by :func:`forward` for :func:`backward`."""

    config: ModelConfig
    input_shape: tuple
    embed: tuple
    layers: list = field(default_factory=list)
    head: tuple = ()
    bias: np.ndarray | None = None


def forward(mag, params, config: ModelConfig, keep_tape: bool = True):
    """Estimate a mask in (0, 1) for each time-frequency bin.

    Returns ``(mask, tape)``; ``tape`` is None when ``keep_tape`` is False.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim not in (2, 3):
        raise ValueError(f"expected (T, K) or (B, T, K) input, got shape {mag.shape}")
    scheme = config.scheme
    n_frames = mag.shape[-2]
    z, embed_cache = input_embedding_forward(mag, params, config)
    u = add_ape(z, params, config)
    bias = scheme.rpe(params, n_frames)
    layer_caches = []
    for i in range(config.n_layers):
        u, cache = transformer_layer_forward(u, bias, params, i, config)
        if keep_tape:
            layer_caches.append(cache)
    mask, head_cache = output_head_forward(u, params)
    if not keep_tape:
        return mask, None
    return mask, Tape(config, mag.shape, embed_cache, layer_caches, head_cache, bias)


def backward(tape: Tape, dmask, params, config: ModelConfig | None = None) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss w.r.t. every parameter, given ``dL/dmask``."""
    config = config or tape.config
    if config != tape.config:
        raise ValueError("tape was recorded with a different model config")
    dmask = np.asarray(dmask, dtype=np.float64)
    if dmask.shape != tape.input_shape[:-1] + (config.n_bins,):
        raise ValueError(f"upstream gradient shape {dmask.shape} does not match tape")
    check_params(params, config)
    scheme = config.scheme
    grads = zeros_like(params)
    du = output_head_backward(dmask, tape.head, params, grads)
    dbias = None
    for i in reversed(range(config.n_layers)):
        du, db = transformer_layer_backward(du, tape.layers[i], params, i, config, grads)
        dbias = db if dbias is None else dbias + db
    if scheme.is_ape:
        dtable = du.reshape(-1, *du.shape[-2:]).sum(axis=0)
        grads.update(scheme.ape_backward(params, dtable))
    if scheme.is_rpe:
        grads.update(scheme.rpe_backward(params, dbias))
    input_embedding_backward(du, tape.embed, params, grads)
    return grads
