"""Command-line entry point: ``drwkv {train,sample,verify,flops,bench}``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

import numpy as np

from .backbone import PRESETS, ConfigError
from .bench import DEFAULT_J, run_bench
from .checkpoint import CheckpointError, checkpoint_load
from .config import RunConfig, load_run_config
from .data import DatasetError, cifar10_load, image_write, synth_two_blobs
from .diffusion import SamplerConfig, linear_schedule, sample_loop

log = logging.getLogger("drwkv")


def _thread_limit(n=None):
    """Cap BLAS threads at ``n`` (or ``$DRWKV_THREADS``); no-op when neither is set."""
    n = n if n is not None else os.environ.get("DRWKV_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def _load_dataset(cfg: RunConfig):
    d = cfg.data
    if d.source == "two_blobs":
        return synth_two_blobs(d.n, cfg.model.H, cfg.model.W, seed=cfg.seed, channels=cfg.model.C)
    if not d.path or not os.path.exists(d.path):
        raise DatasetError(f"dataset path {d.path!r} does not exist")
    return cifar10_load(d.path, d.limit or None)


def cmd_train(args) -> int:
    from dataclasses import replace
    from .backbone import DiffusionRWKV
    from .train import train_loop

    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    # validate everything before touching the output directory
    ds = _load_dataset(cfg)
    if ds.shape != (cfg.model.C, cfg.model.H, cfg.model.W):
        raise DatasetError(f"dataset images are {ds.shape}, model expects "
                           f"{(cfg.model.C, cfg.model.H, cfg.model.W)}")
    if cfg.model.num_classes and ds.num_classes > cfg.model.num_classes:
        raise DatasetError(f"dataset has {ds.num_classes} classes, model.num_classes={cfg.model.num_classes}")
    resume = checkpoint_load(args.checkpoint) if args.checkpoint else None
    if resume is not None and resume.config != cfg.model:
        raise ConfigError("checkpoint model config differs from the run config")
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.txt"), "w") as f:
        f.write(cfg.to_text())
    schedule = linear_schedule(cfg.model.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    model = DiffusionRWKV(cfg.model, seed=cfg.seed)
    r = train_loop(model, ds, cfg.train, out_dir=cfg.out, schedule=schedule, resume=resume)
    last = r.history[-1] if r.history else {}
    print(f"trained to step {r.step} in {r.elapsed:.1f}s; last loss {last.get('loss', float('nan')):.5f}")
    return 0


def cmd_sample(args) -> int:
    from .backbone import DiffusionRWKV

    if not args.checkpoint:
        raise ConfigError("sample needs --checkpoint")
    ck = checkpoint_load(args.checkpoint)
    model = DiffusionRWKV(ck.config)
    use_ema = args.weights == "ema" and bool(ck.ema)
    model.load_arrays(ck.ema if use_ema else ck.model)
    cfg = ck.config
    n = args.n
    c = None
    if args.class_id is not None:
        if not 0 <= args.class_id < max(cfg.num_classes, 1) or not cfg.num_classes:
            raise ConfigError(f"--class {args.class_id} invalid for a model with {cfg.num_classes} classes")
        c = np.full(n, args.class_id)
    elif cfg.num_classes:
        c = np.arange(n) % cfg.num_classes
    mode = args.sigma_mode or ("learned" if cfg.learn_sigma else "fixed_small")
    sampler = SamplerConfig(args.steps, args.guidance, mode, args.seed)
    schedule = linear_schedule(cfg.T, float(ck.header.get("schedule.beta_start", 1e-4)),
                               float(ck.header.get("schedule.beta_end", 2e-2)))
    x = sample_loop(model, (n, cfg.C, cfg.H, cfg.W), c, sampler, schedule)
    out = args.out or "samples"
    os.makedirs(out, exist_ok=True)
    ext = "pgm" if cfg.C == 1 else "ppm"
    lines = [f"checkpoint={os.path.abspath(args.checkpoint)}", f"step={ck.step}",
             f"weights={'ema' if use_ema else 'live'}", f"steps={args.steps}", f"guidance={args.guidance}",
             f"sigma_mode={mode}", f"seed={args.seed}", f"n={n}"]
    for i in range(n):
        name = f"sample_{i:04d}.{ext}"
        image_write(os.path.join(out, name), x[i])
        label = "none" if c is None else int(c[i])
        lines.append(f"image={name} seed={args.seed} stream={i} class={label}")
    with open(os.path.join(out, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {n} images to {out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES, run_verify

    suites = args.suite.split(",") if args.suite else None
    if suites:
        unknown = [s for s in suites if s not in SUITES]
        if unknown:
            raise ConfigError(f"unknown suites {unknown}; available: {list(SUITES)}")
    results = run_verify(suites, fault=args.inject_fault)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed" +
          (f"; failed: {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0


def cmd_flops(args) -> int:
    from .verify import flops_report

    presets = [args.preset] if args.preset else list(PRESETS)
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        print(flops_report(name, H=args.H, W=args.W, p=args.p, C=args.C))
    return 0


def cmd_bench(args) -> int:
    J = [int(j) for j in args.J.split(",")] if args.J else list(DEFAULT_J)
    with _thread_limit(1):  # a single worker keeps the timings comparable
        r = run_bench(J, D=args.D, repeats=args.repeats, seed=args.seed or 0)
    csv_text = r.to_csv()
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv_text)
    print(csv_text, end="")
    print(f"# scan slope {r.scan_slope:.3f}, oracle slope {r.oracle_slope:.3f}")
    bad = r.check() if len(J) > 1 else []
    for b in bad:
        print(f"# FAIL {b}")
    return 1 if bad and not args.no_assert else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drwkv", description="Bidirectional-RWKV diffusion models at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", help="key=value run config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides the config)")
    t.add_argument("--steps", type=int)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="draw images from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-n", type=int, default=8)
    s.add_argument("--steps", type=int, default=250)
    s.add_argument("--guidance", type=float, default=1.0)
    s.add_argument("--class", dest="class_id", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--weights", choices=("ema", "live"), default="ema")
    s.add_argument("--sigma-mode", choices=("fixed_small", "fixed_large", "learned"))
    s.set_defaults(fn=cmd_sample)

    v = sub.add_parser("verify", help="run the self-verification suites")
    v.add_argument("--inject-fault", help="deliberately break the kernel (wkv-sign)")
    v.add_argument("--suite", help="comma-separated subset of suites")
    v.set_defaults(fn=cmd_verify)

    f = sub.add_parser("flops", help="operation counts per preset with reference figures")
    f.add_argument("--preset", choices=sorted(PRESETS))
    f.add_argument("--H", type=int, default=32)
    f.add_argument("--W", type=int, default=32)
    f.add_argument("-p", type=int, default=2)
    f.add_argument("-C", type=int, default=4)
    f.set_defaults(fn=cmd_flops)

    b = sub.add_parser("bench", help="scan vs oracle scaling benchmark")
    b.add_argument("--J", help="comma-separated ascending sequence lengths")
    b.add_argument("--D", type=int, default=64)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="also write the CSV here")
    b.add_argument("--no-assert", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        with _thread_limit():
            return args.fn(args)
    except (ConfigError, DatasetError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
