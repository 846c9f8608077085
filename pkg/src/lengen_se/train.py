"""Training recipe: MSE on the mask, Adam with inverse-square-root warmup,
elementwise gradient clipping, and an epoch loop with CSV loss logging."""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, dsp
from . import model as M
from .mixer import Corpus, mixture_set, sample_batch, features

log = logging.getLogger(__name__)

LOSS_HEADER = "iter,epoch,split,loss"


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    iters_per_epoch: int = 50
    batch_size: int = 10
    clip_len_s: float = 1.0
    warmup_iters: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    grad_clip: float = 1.0
    snr_range: tuple = (-10, 20)
    seed: int = 0
    prefetch: int = 0
    val_count: int = 10
    val_len_s: float = 4.0
    val_seed: int = 1234

    def __post_init__(self):
        for name in ("epochs", "iters_per_epoch", "batch_size", "warmup_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.clip_len_s <= 0 or self.grad_clip <= 0 or self.eps <= 0:
            raise ValueError("clip_len_s, grad_clip and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.val_count < 0:
            raise ValueError("val_count must be >= 0")


def default_max_len(clip_len_s: float) -> int:
    """Learned-APE rows: the frame count of a clip four times the training length."""
    return dsp.num_frames(int(round(4 * clip_len_s * dsp.SAMPLE_RATE)))


# ---------------------------------------------------------------------------
# recipe pieces
# ---------------------------------------------------------------------------

def lr_schedule(n_itr: int, w_itr: int, d_model: int) -> float:
    """``d_model**-0.5 * min(n_itr**-0.5, n_itr * w_itr**-1.5)``; peaks at ``n_itr == w_itr``."""
    if n_itr < 1:
        raise ValueError("learning-rate schedule is undefined for n_itr < 1")
    return d_model**-0.5 * min(n_itr**-0.5, n_itr * w_itr**-1.5)


def mse_mask_loss(mask, target):
    """Mean squared error over all bins, and its gradient w.r.t. ``mask``."""
    mask = np.asarray(mask, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask.shape != target.shape:
        raise ValueError(f"shape mismatch: mask {mask.shape} vs target {target.shape}")
    diff = mask - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def clip_grads(grads: dict, limit: float = 1.0) -> dict:
    return {k: np.clip(g, -limit, limit) for k, g in grads.items()}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls(M.zeros_like(params), M.zeros_like(params), 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
    """Bias-corrected Adam update applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ValueError("gradient and parameter names differ")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def first_nonfinite(tensors: dict) -> str | None:
    for name, value in tensors.items():
        if not np.all(np.isfinite(value)):
            return name
    return None


# ---------------------------------------------------------------------------
# data stream
# ---------------------------------------------------------------------------

def batch_stream(corpus, cfg: TrainConfig, rng, count: int):
    """Yield ``(batch, rng_state_after)`` pairs in generation order.

    With ``cfg.prefetch > 0`` a producer thread runs up to that many batches
    ahead; the sequence is identical either way.
    """
    def make():
        b = sample_batch(corpus, cfg.batch_size, cfg.clip_len_s, cfg.snr_range, rng)
        return b, rng.bit_generator.state

    if cfg.prefetch <= 0:
        for _ in range(count):
            yield make()
        return
    q: queue.Queue = queue.Queue(maxsize=cfg.prefetch)
    stop = threading.Event()

    def producer():
        try:
            for _ in range(count):
                if stop.is_set():
                    return
                q.put(make())
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    worker = threading.Thread(target=producer, daemon=True)
    worker.start()
    try:
        for _ in range(count):
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(0.01)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class ValSet:
    mags: list
    targets: list

    @classmethod
    def build(cls, corpus: Corpus, cfg: TrainConfig) -> "ValSet":
        mags, targets = [], []
        for mix in mixture_set(corpus, "val", cfg.val_count, cfg.val_len_s, cfg.val_seed,
                               snr_range=cfg.snr_range):
            mag, target = features(mix.noisy, mix.clean)
            mags.append(mag)
            targets.append(target)
        return cls(mags, targets)

    def loss(self, params, config: M.ModelConfig) -> float:
        """Mean of per-utterance MSEs."""
        losses = []
        for mag, target in zip(self.mags, self.targets):
            mask, _ = M.forward(mag, params, config, keep_tape=False)
            losses.append(mse_mask_loss(mask, target)[0])
        return float(np.mean(losses))


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    rows: list = field(default_factory=list)
    best_val: float = float("inf")
    state: AdamState | None = None


def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_loss_csv(path, rows) -> None:
    lines = [LOSS_HEADER] + [f"{i},{e},{s},{_fmt(v)}" for i, e, s, v in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_csv(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        i, e, s, v = line.split(",")
        rows.append((int(i), int(e), s, float(v)))
    return rows


def _save_state(path, config, params, state, rng, epoch, best_val, cfg):
    tensors = dict(params)
    tensors.update({"adam.m/" + k: v for k, v in state.m.items()})
    tensors.update({"adam.v/" + k: v for k, v in state.v.items()})
    meta = {"step": state.step, "epoch": epoch, "rng": rng.bit_generator.state,
            "best_val": best_val, "train_config": asdict(cfg)}
    checkpoint.write(path, config, tensors, meta)


def _load_state(path):
    config, tensors, meta = checkpoint.read(path)
    names = list(M.param_shapes(config))
    params = {k: tensors[k] for k in names}
    state = AdamState({k: tensors["adam.m/" + k] for k in names},
                      {k: tensors["adam.v/" + k] for k in names}, meta["step"])
    return config, params, state, meta


def train_loop(config: M.ModelConfig, cfg: TrainConfig, corpus: Corpus, out_dir=None,
               resume: bool = False, params: dict | None = None) -> TrainResult:
    """Train with dynamic mixing.

    Logs the training loss every iteration and the frozen-validation loss at
    the end of each epoch. With ``out_dir`` set, writes ``loss.csv``,
    ``best.ckpt`` (lowest validation loss), ``final.ckpt`` and ``state.ckpt``
    (everything needed to resume after the last completed epoch).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    scheme = config.scheme
    val = ValSet.build(corpus, cfg) if cfg.val_count else None
    if scheme.tag == "learned_ape" and val is not None:
        longest = max(m.shape[0] for m in val.mags)
        if longest > config.pe_max_len:
            raise ValueError(f"validation clips have {longest} frames but pe.max_len={config.pe_max_len}")

    rng = np.random.default_rng(cfg.seed)
    start_epoch, rows, best_val = 0, [], float("inf")
    if resume:
        if out is None or not (out / "state.ckpt").exists():
            raise FileNotFoundError("resume requested but no state.ckpt in output directory")
        saved_config, params, state, meta = _load_state(out / "state.ckpt")
        if saved_config != config:
            raise ValueError("state.ckpt was written with a different model config")
        rng.bit_generator.state = meta["rng"]
        start_epoch, best_val = meta["epoch"], meta["best_val"]
        rows = [r for r in read_loss_csv(out / "loss.csv") if r[1] <= start_epoch]
        best_params = checkpoint.load_model(out / "best.ckpt")[1] if (out / "best.ckpt").exists() else None
    else:
        params = params if params is not None else M.init_params(config, cfg.seed)
        state = AdamState.zeros(params)
        best_params = None

    meta_common = {"train_len_s": cfg.clip_len_s, "seed": cfg.seed}
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        for batch, rng_state in batch_stream(corpus, cfg, rng, cfg.iters_per_epoch):
            mask, tape = M.forward(batch.mag, params, config)
            loss, dmask = mse_mask_loss(mask, batch.target)
            grads = M.backward(tape, dmask, params, config)
            bad = first_nonfinite(grads) if np.isfinite(loss) else first_nonfinite(params) or "loss"
            if not np.isfinite(loss) or bad:
                raise NumericalError(
                    f"non-finite values at iteration {state.step + 1}: first bad parameter group {bad!r}"
                )
            grads = clip_grads(grads, cfg.grad_clip)
            lr = lr_schedule(state.step + 1, cfg.warmup_iters, config.d_model)
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            rows.append((state.step, epoch, "train", loss))
        rng.bit_generator.state = rng_state
        if val is not None:
            vloss = val.loss(params, config)
            rows.append((state.step, epoch, "val", vloss))
            log.info("epoch %d step %d train %.5f val %.5f", epoch, state.step, rows[-2][3], vloss)
            if vloss < best_val:
                best_val = vloss
                best_params = {k: v.copy() for k, v in params.items()}
                if out is not None:
                    checkpoint.save_model(out / "best.ckpt", config, best_params,
                                          {**meta_common, "step": state.step, "val_loss": vloss})
        if out is not None:
            write_loss_csv(out / "loss.csv", rows)
            _save_state(out / "state.ckpt", config, params, state, rng, epoch, best_val, cfg)

    if best_params is None:
        best_params = {k: v.copy() for k, v in params.items()}
    if out is not None:
        checkpoint.save_model(out / "final.ckpt", config, params, {**meta_common, "step": state.step})
        if not (out / "best.ckpt").exists():
            checkpoint.save_model(out / "best.ckpt", config, best_params, {**meta_common, "step": state.step})
    return TrainResult(params, best_params, rows, best_val, state)
