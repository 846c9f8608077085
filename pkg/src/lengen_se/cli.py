"""Command-line entry point: ``lengen-se <subcommand> [--config FILE] [key=value ...]``.

Exit codes: 0 success, 1 user error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint, config as C, gradcheck
from . import model as M
from .evaluation import SweepModel, enhance, length_sweep, summarize, write_report
from .mixer import Corpus, make_corpus
from .posemb import SCHEMES
from .train import NumericalError, TrainConfig, default_max_len, train_loop
from .wav import WavFormatError, read_wav, write_wav

log = logging.getLogger("lengen_se")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    pass


def model_config(cfg: dict) -> M.ModelConfig:
    scheme = cfg["pe.scheme"]
    max_len = cfg["pe.max_len"]
    if scheme == "learned_ape" and max_len <= 0:
        max_len = default_max_len(cfg["train.clip_len_s"])
    return M.ModelConfig(
        n_layers=cfg["model.n_layers"], n_heads=cfg["model.n_heads"], d_model=cfg["model.d_model"],
        d_ff=cfg["model.d_ff"], pe_scheme=scheme, pe_max_len=max_len if scheme == "learned_ape" else 0,
        ffn_activation=cfg["model.ffn_activation"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"], iters_per_epoch=cfg["train.iters_per_epoch"],
        batch_size=cfg["train.batch_size"], clip_len_s=cfg["train.clip_len_s"],
        warmup_iters=cfg["train.warmup_iters"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
        eps=cfg["train.eps"], grad_clip=cfg["train.grad_clip"],
        snr_range=(cfg["train.snr_min"], cfg["train.snr_max"]), seed=cfg["seed"],
        prefetch=cfg["train.prefetch"], val_count=cfg["data.val_count"],
        val_len_s=cfg["data.val_len_s"], val_seed=cfg["data.val_seed"],
    )


def _resolve(args) -> dict:
    overrides = []
    for item in args.overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise UserError(f"unrecognised argument {item!r} (overrides are key=value)")
        overrides.append(item)
    try:
        cfg = C.resolve(args.config, overrides)
    except (KeyError, ValueError, OSError) as exc:
        raise UserError(str(exc)) from exc
    sys.stderr.write("# resolved config\n" + C.dump(cfg))
    return cfg


def cmd_make_corpus(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or cfg["corpus.out_dir"])
    try:
        manifest = make_corpus(out, seed=cfg["corpus.seed"], n_clean=cfg["corpus.n_clean"],
                               clean_len=cfg["corpus.clean_len_s"], n_noise=cfg["corpus.n_noise"],
                               noise_len=cfg["corpus.noise_len_s"])
    except OSError as exc:
        raise UserError(f"cannot write corpus to {out}: {exc}") from exc
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg["out.dir"])
    mconf, tconf = model_config(cfg), train_config(cfg)
    corpus = Corpus.from_manifest(cfg["data.manifest"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(C.dump(cfg))
    result = train_loop(mconf, tconf, corpus, out_dir=out, resume=args.resume)
    print(f"best validation loss {result.best_val:.6f}; outputs in {out}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    config, params, _ = checkpoint.load_model(args.checkpoint)
    noisy = read_wav(args.input)
    write_wav(args.output, enhance(noisy, config, params), fmt=args.format)
    return EXIT_OK


def cmd_eval_sweep(args) -> int:
    cfg = _resolve(args)
    models = {}
    for spec in args.model:
        name, _, path = spec.partition("=")
        if not path:
            raise UserError(f"--model expects NAME=CHECKPOINT, got {spec!r}")
        config, params, meta = checkpoint.load_model(path)
        models[name] = SweepModel(config, params, float(meta.get("train_len_s", float("nan"))))
    configs = {replace(m.config, pe_scheme="no_pos", pe_max_len=0) for m in models.values()}
    if len(configs) > 1:
        raise UserError("all checkpoints in a sweep must share the model configuration apart from pe.scheme")
    corpus = Corpus.from_manifest(cfg["data.manifest"])
    rows = length_sweep(models, corpus, test_lengths=C.float_list(cfg["eval.test_lengths"]),
                        snrs=C.int_list(cfg["eval.snrs"]), per_length=cfg["eval.mixtures_per_length"],
                        seed=cfg["eval.seed"], split=cfg["eval.split"])
    report = Path(args.report or Path(cfg["out.dir"]) / "sweep.csv")
    report.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, rows)
    summary = summarize(rows)
    for (scheme, length, metric), value in sorted(summary.items(), key=lambda kv: (kv[0][2], kv[0][1], kv[0][0])):
        print(f"{metric:<9} {length:>5g}s {scheme:<12} {value:10.4f}")
    print(f"report written to {report}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradcheck.check_all(args.schemes or SCHEMES)
    worst = 0.0
    for r in results:
        worst = max(worst, r.rel_error)
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.scheme:<12} {r.name:<28} rel_err={r.rel_error:.3e}")
    ok = all(r.ok for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: worst relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_pe_dump(args) -> int:
    if args.checkpoint:
        config, params, _ = checkpoint.load_model(args.checkpoint)
    else:
        cfg = _resolve(args)
        cfg["pe.scheme"] = args.scheme or cfg["pe.scheme"]
        config = model_config(cfg)
        params = M.init_params(config, cfg["seed"])
    scheme = config.scheme
    lines = [f"# scheme={scheme.tag} frames={args.frames}"]
    table = scheme.ape(params, args.frames)
    bias = scheme.rpe(params, args.frames)
    if table is not None:
        lines += [",".join(format(v, ".17g") for v in row) for row in table]
    if bias is not None:
        for h, mat in enumerate(bias):
            lines.append(f"# head {h}")
            lines += [",".join(format(v, ".17g") for v in row) for row in mat]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lengen-se", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value config file")
        return p

    p = with_config(sub.add_parser("make-corpus", help="synthesise the clean/noise corpus and manifest"))
    p.add_argument("--out", help="output directory (default corpus.out_dir)")
    p.set_defaults(func=cmd_make_corpus)

    p = with_config(sub.add_parser("train", help="train one model"))
    p.add_argument("--resume", action="store_true", help="continue from out.dir/state.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a 16 kHz mono WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", choices=("pcm16", "float32"), default="pcm16")
    p.set_defaults(func=cmd_enhance)

    p = with_config(sub.add_parser("eval-sweep", help="per-length evaluation of several checkpoints"))
    p.add_argument("--model", action="append", default=[], metavar="NAME=CKPT", required=True)
    p.add_argument("--report", help="CSV path (default out.dir/sweep.csv)")
    p.set_defaults(func=cmd_eval_sweep)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter gradient")
    p.add_argument("--schemes", nargs="*", choices=SCHEMES)
    p.set_defaults(func=cmd_grad_check)

    p = with_config(sub.add_parser("pe-dump", help="print the position tables/biases used in forward"))
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pe_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    args.overrides = extra
    if extra and args.command in ("enhance", "grad-check"):
        parser.error(f"unrecognised arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, WavFormatError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
