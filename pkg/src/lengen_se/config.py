"""Plain-text ``key=value`` run configuration.

Every key has a default below; unknown keys are rejected. Lines starting
with ``#`` are comments. Values are parsed with the type of the default.
"""
from __future__ import annotations

from pathlib import Path

DEFAULTS = {
    "seed": 0,
    # model
    "model.n_layers": 4,
    "model.n_heads": 8,
    "model.d_model": 256,
    "model.d_ff": 1024,
    "model.ffn_activation": "relu",
    # position embedding; pe.max_len=0 means 4x the training clip's frame count
    "pe.scheme": "no_pos",
    "pe.max_len": 0,
    # optimisation (toy-scale defaults; full scale: epochs=150, warmup_iters=40000)
    "train.epochs": 20,
    "train.iters_per_epoch": 50,
    "train.batch_size": 10,
    "train.clip_len_s": 1.0,
    "train.warmup_iters": 400,
    "train.beta1": 0.9,
    "train.beta2": 0.98,
    "train.eps": 1e-9,
    "train.grad_clip": 1.0,
    "train.snr_min": -10,
    "train.snr_max": 20,
    "train.prefetch": 0,
    # data
    "data.manifest": "corpus/manifest.csv",
    "data.val_count": 10,
    "data.val_len_s": 4.0,
    "data.val_seed": 1234,
    # synthetic corpus
    "corpus.out_dir": "corpus",
    "corpus.seed": 0,
    "corpus.n_clean": 60,
    "corpus.clean_len_s": 30.0,
    "corpus.n_noise": 12,
    "corpus.noise_len_s": 60.0,
    # evaluation sweep
    "eval.test_lengths": "1,2,5,10,15,20",
    "eval.snrs": "-5,0,5,10,15",
    "eval.mixtures_per_length": 40,
    "eval.seed": 4321,
    "eval.split": "test",
    # outputs
    "out.dir": "runs/default",
}


class ConfigKeyError(KeyError):
    pass


def _coerce(key, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ValueError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def parse_lines(lines, source="<config>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigKeyError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(path=None, overrides=()) -> dict:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_lines(Path(path).read_text().splitlines(), str(path)))
    cfg.update(parse_lines(overrides, "<overrides>"))
    return cfg


def dump(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def int_list(value) -> list[int]:
    return [int(v) for v in str(value).split(",") if v.strip()]


def float_list(value) -> list[float]:
    return [float(v) for v in str(value).split(",") if v.strip()]
