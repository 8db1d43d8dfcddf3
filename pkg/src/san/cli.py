"""Command-line entry point: ``san <command> [options]``.

Diagnostics go to standard error, results to files.  Exit status is 0 on
success, 2 for usage or configuration errors and 1 for any other failure.
"""

from __future__ import annotations

import os

_threads = os.environ.get("SAN_THREADS", "0").strip() or "0"
if _threads.isdigit() and int(_threads) > 0:
    # BLAS reads these once, at import time
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import types  # noqa: E402
import typing  # noqa: E402
from dataclasses import dataclass, field, fields, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .dataset import (DatasetError, NetpbmError, gen_synthetic_dataset, load_voc_style,  # noqa: E402
                      read_pgm, read_ppm, synthetic_class_names, write_pgm, write_voc_style)
from .evaluation import BETA, EvalError, evaluate_dataset, evaluate_maps  # noqa: E402
from .networks import CheckpointError, load_g_checkpoint  # noqa: E402
from .postproc import PostprocError, PostprocParams, postprocess_pipeline  # noqa: E402
from .tensor import Prng  # noqa: E402
from .training import TrainConfig, predict_maps, run_training  # noqa: E402

log = logging.getLogger("san")


class ConfigError(ValueError):
    pass


def worker_count() -> int:
    """Worker threads allowed by SAN_THREADS (0 or unset means one per CPU)."""
    raw = os.environ.get("SAN_THREADS", "0").strip() or "0"
    if not raw.isdigit():
        raise ConfigError(f"SAN_THREADS must be a non-negative integer, got {raw!r}")
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


# -- configuration --------------------------------------------------------------


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    postproc: PostprocParams = field(default_factory=PostprocParams)
    beta: float = BETA
    binarization: str = "adaptive"
    threshold: float = 0.5

    def validate(self):
        self.train.validate()
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.binarization not in ("adaptive", "fixed"):
            raise ConfigError("binarization must be 'adaptive' or 'fixed'")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        return self

    def items(self) -> list[tuple[str, object]]:
        out = [(f.name, getattr(self.train, f.name)) for f in fields(TrainConfig)]
        out += [(f.name, getattr(self.postproc, f.name)) for f in fields(PostprocParams)]
        out += [("beta", self.beta), ("binarization", self.binarization),
                ("threshold", self.threshold)]
        return out

    def dump(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(str(x) for x in v)
            return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.items())


def _field_types() -> dict[str, tuple[str, object]]:
    known = {}
    for owner, cls in (("train", TrainConfig), ("postproc", PostprocParams)):
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            known[f.name] = (owner, hints[f.name])
    for name, tp in (("beta", float), ("binarization", str), ("threshold", float)):
        known[name] = ("run", tp)
    return known


def _convert(key: str, text: str, tp):
    text = text.strip()
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    try:
        if origin in (typing.Union, types.UnionType):
            if text.lower() == "none":
                return None
            return _convert(key, text, next(a for a in args if a is not type(None)))
        if origin is tuple:
            return tuple(int(p) for p in text.split(",") if p.strip())
        if tp is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        return tp(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = value
    return values


def build_run_config(file_values: dict[str, str], overrides: dict[str, str]) -> RunConfig:
    """Merge config-file entries with flag overrides (flags win) and validate."""
    known = _field_types()
    merged = {**file_values, **overrides}
    unknown = sorted(set(merged) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    train_kw, post_kw, run_kw = {}, {}, {}
    for key, text in merged.items():
        owner, tp = known[key]
        value = _convert(key, text, tp)
        {"train": train_kw, "postproc": post_kw, "run": run_kw}[owner][key] = value
    try:
        cfg = RunConfig(replace(TrainConfig(), **train_kw), PostprocParams(**post_kw), **run_kw)
        return cfg.validate()
    except (ValueError, PostprocError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(args, overrides: dict[str, str] | None = None) -> RunConfig:
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            file_values = parse_config_text(path.read_text(), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    flags = dict(overrides or {})
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    return build_run_config(file_values, flags)


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    prng = Prng(args.seed)
    samples = gen_synthetic_dataset(args.n, args.classes, args.size, prng, noise=args.noise)
    write_voc_style(samples, args.out, synthetic_class_names(args.classes))
    log.info("wrote %d samples to %s", len(samples), args.out)
    return 0


def cmd_train(args) -> int:
    overrides = {k: str(v) for k, v in (("mode", args.mode), ("seed", args.seed),
                                        ("iterations", args.iterations)) if v is not None}
    cfg = load_run_config(args, overrides)
    samples, meta = load_voc_style(args.data, resize_to=args.size)
    train_cfg = cfg.train
    if train_cfg.num_classes is None:
        train_cfg = replace(train_cfg, num_classes=meta.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(replace(cfg, train=train_cfg).dump())
    log.info("training %s on %d samples (%d classes)", train_cfg.mode, len(samples),
             meta.num_classes)
    run_training(train_cfg, samples, out)
    return 0


def cmd_infer(args) -> int:
    cfg = load_run_config(args)
    G = load_g_checkpoint(args.ckpt)
    image = read_ppm(args.image)
    (raw,) = predict_maps(G, [image], batch=1)
    result = postprocess_pipeline(image, raw, cfg.postproc) if args.postproc else raw
    write_pgm(np.clip(result, 0, 1), args.out)
    return 0


def cmd_postproc(args) -> int:
    cfg = load_run_config(args)
    image = read_ppm(args.image)
    raw = read_pgm(args.map)[0]
    write_pgm(postprocess_pipeline(image, raw, cfg.postproc), args.out)
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    samples, _ = load_voc_style(args.data, resize_to=args.size)
    t = cfg.threshold if cfg.binarization == "fixed" else None
    if args.pred:
        maps = []
        for s in samples:
            path = Path(args.pred) / f"{s.id}.pgm"
            if not path.exists():
                raise EvalError(f"missing prediction {path}")
            maps.append(read_pgm(path)[0])
        report = evaluate_maps(maps, samples, cfg.beta, cfg.binarization, t, postprocess=False)
    else:
        G = load_g_checkpoint(args.ckpt)
        report = evaluate_dataset(G, samples, not args.no_postproc, cfg.beta, cfg.postproc,
                                  cfg.binarization, t, workers=worker_count())
    report.write(args.report)
    (Path(args.report) / "config.txt").write_text(cfg.dump())
    log.info("mean F-beta %.4f over %d images", report.mean_f_beta, len(report.scores))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.layer:<28} {r.tensor:<8} {r.error:.3e}",
              file=sys.stderr)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}",
          file=sys.stderr)
    return 1 if failed else 0


# -- parser --------------------------------------------------------------------------


def _classes(text: str) -> int:
    k = int(text)
    if not 2 <= k <= 5:
        raise argparse.ArgumentTypeError("supported range is 2..5")
    return k


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return n


def _size(text: str) -> int:
    n = _positive(text)
    if n % 16:
        raise argparse.ArgumentTypeError("must be a multiple of 16")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="san", description="Supervised adversarial saliency detection")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=_positive, required=True)
    g.add_argument("--classes", type=_classes, default=3)
    g.add_argument("--size", type=_size, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.08, help="background texture amplitude")
    g.set_defaults(func=cmd_gen_data)

    def config_flags(sp):
        sp.add_argument("--config", help="file of 'key = value' lines")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    t = sub.add_parser("train", help="train G (and D) on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("san", "baseline1", "baseline2", "baseline3"))
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--size", type=_size, default=64, help="training resolution")
    config_flags(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="saliency map for one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--postproc", action="store_true")
    config_flags(i)
    i.set_defaults(func=cmd_infer)

    pp = sub.add_parser("postproc", help="refine a raw map with the superpixel pipeline")
    pp.add_argument("--image", required=True)
    pp.add_argument("--map", required=True)
    pp.add_argument("--out", required=True)
    config_flags(pp)
    pp.set_defaults(func=cmd_postproc)

    e = sub.add_parser("eval", help="score a checkpoint or saved maps against a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="directory of <id>.pgm maps to score as-is")
    e.add_argument("--no-postproc", action="store_true")
    e.add_argument("--size", type=_size, default=64)
    config_flags(e)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"san {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, NetpbmError, CheckpointError, EvalError, PostprocError,
            OSError, ValueError) as exc:
        print(f"san {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
