"""Command-line entry point: ``featsharp <command> [flags]``.

Every command returns exit status 0 on success and 1 on any reported error
(bad config, unreadable input, failed check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSpec, ingest_dataset, load_image
from .featurizer import Featurizer
from .gradsuite import gradient_suite
from .metrics import cost_model, cost_proof_check, rows_to_csv, throughput_bench, tiling_error
from .numerics import DTYPE
from .trainer import (
    UPSAMPLERS,
    TrainConfig,
    evaluate,
    initial_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
    with_overrides,
)
from .viz import fit_pca, pca_rgb, save_png

log = logging.getLogger("featsharp")


@dataclass(frozen=True)
class EvalSettings:
    num_jitters: int | None = None
    seed: int = 1234
    batch_size: int = 8
    mmd_samples: int = 400


@dataclass(frozen=True)
class RunConfig:
    """Top-level JSON config; sections mirror the library dataclasses."""

    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval_dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(n=64, seed=99))
    eval: EvalSettings = field(default_factory=EvalSettings)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject(cls, d, "config")
        kw = {}
        if "train" in d:
            kw["train"] = TrainConfig.from_dict(d["train"])
        for name in ("dataset", "eval_dataset"):
            if name in d:
                _reject(DatasetSpec, d[name], name)
                kw[name] = DatasetSpec(**d[name])
        if "eval" in d:
            _reject(EvalSettings, d["eval"], "eval")
            kw["eval"] = EvalSettings(**d["eval"])
        cfg = cls(**kw)
        for ds in (cfg.dataset, cfg.eval_dataset):
            if ds.kind == "folder" and (not ds.path or not Path(ds.path).is_dir()):
                raise FileNotFoundError(f"dataset folder not found: {ds.path}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config not found: {p}")
        d = json.loads(p.read_text())
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        return cls.from_dict(d)


def _reject(cls, d, what: str) -> None:
    if not isinstance(d, dict):
        raise ValueError(f"{what} must be a JSON object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    tc = with_overrides(cfg.train, seed=args.seed, upsampler=args.upsampler, factor=args.factor)
    return RunConfig(tc, cfg.dataset, cfg.eval_dataset, cfg.eval)


def _out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise ValueError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_threads() -> None:
    raw = os.environ.get("FEATSHARP_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FEATSHARP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"FEATSHARP_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    images = ingest_dataset(cfg.dataset, cfg.train.image_resolution)
    (out / "config.json").write_text(json.dumps({"train": cfg.train.to_dict(), "dataset": cfg.dataset.to_dict()},
                                                indent=2, sort_keys=True))
    every = max(1, cfg.train.steps // 20)

    def progress(step, loss):
        if step % every == 0 or step == cfg.train.steps - 1:
            log.info("step %d loss %.6g", step, loss)

    ckpt = train(cfg.train, images, out_dir=out, progress=progress)
    save_checkpoint(ckpt, out / "final.fskp")
    rows = [{"step": i, "loss": repr(v)} for i, v in enumerate(ckpt.loss_trace)]
    (out / "loss.csv").write_text(rows_to_csv(rows) if rows else "step,loss\n")
    print(out / "final.fskp")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    out = _out_dir(args)
    ckpt = load_checkpoint(ckpt_path)
    images = ingest_dataset(cfg.eval_dataset, ckpt.config.image_resolution)
    e = cfg.eval
    seed = e.seed if args.seed is None else args.seed
    report = evaluate(ckpt, images, num_jitters=e.num_jitters, seed=seed, batch_size=e.batch_size,
                      mmd_samples=e.mmd_samples)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json())
    print(report.to_csv(), end="")
    return 0


def _load_single_image(args, side: int) -> torch.Tensor:
    if args.image:
        p = Path(args.image)
        if not p.is_file():
            raise FileNotFoundError(f"image not found: {p}")
        return torch.as_tensor(load_image(p, side), dtype=DTYPE)
    seed = 0 if args.seed is None else args.seed
    return ingest_dataset(DatasetSpec(n=1, seed=seed), side)[0]


def cmd_upsample(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    ckpts = {}
    for item in args.checkpoint or []:
        kind, sep, path = item.partition("=")
        if not sep or kind not in UPSAMPLERS:
            raise ValueError(f"--checkpoint expects KIND=PATH with KIND in {UPSAMPLERS}, got {item!r}")
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        ckpts[kind] = load_checkpoint(path)
    kinds = [args.upsampler] if args.upsampler else list(UPSAMPLERS)
    base = cfg.train
    image = _load_single_image(args, base.image_resolution)
    maps = {}
    with torch.no_grad():
        for kind in kinds:
            if kind in ckpts:
                ckpt = ckpts[kind]
                if ckpt.config.image_resolution != base.image_resolution:
                    raise ValueError(f"{kind} checkpoint expects {ckpt.config.image_resolution}px images")
            else:
                if kind in ("jbu", "featsharp"):
                    log.warning("no checkpoint for %s; using its initialization", kind)
                ckpt = initial_checkpoint(with_overrides(base, upsampler=kind), image[None])
            low, hi = ckpt.build_model().upsample(image[None])
            maps.setdefault("low", low[0])
            maps[kind] = hi[0]
    proj = fit_pca(list(maps.values()))
    side = maps[kinds[0]].shape[0]
    panels = []
    for name, fm in maps.items():
        rgb = pca_rgb(fm, proj)
        scale = side // rgb.shape[0]
        save_png(rgb, out / f"{name}.png", scale=4 * scale)
        panels.append(np.kron(rgb, np.ones((scale, scale, 1), dtype=np.uint8)))
    gap = np.full((side, 1, 3), 255, dtype=np.uint8)
    row = np.concatenate([x for p in panels for x in (p, gap)][:-1], axis=1)
    save_png(row, out / "side_by_side.png", scale=4)
    print(out / "side_by_side.png")
    return 0


def cmd_tiling_error(args) -> int:
    cfg = _run_config(args)
    spec = cfg.train.featurizer
    out = _out_dir(args)
    f = Featurizer(spec)
    levels = [int(u) for u in args.levels.split(",")]
    if any(u < 1 for u in levels):
        raise ValueError("tile levels must be positive")
    image = _load_single_image(args, spec.input_resolution * max(levels))
    rows = [{"u": u, "mse": repr(e)} for u, e in tiling_error(f, image, levels)]
    text = rows_to_csv(rows) if rows else "u,mse\n"
    (out / "tiling_error.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_cost(args) -> int:
    out = _out_dir(args)
    if args.max_x < 1:
        raise ValueError("--max-x must be at least 1")
    rows = []
    for x in range(1, args.max_x + 1):
        f, g = cost_model(x, args.c, progressive=not args.non_progressive)
        rows.append({"x": x, "f": repr(f), "g": repr(g)})
    (out / "cost.csv").write_text(rows_to_csv(rows))
    ok = cost_proof_check(args.proof_max)
    print(f"closed form matches loop sum and f <= g for x <= {args.proof_max}: {ok}")
    if args.throughput:
        cfg = _run_config(args)
        bench = throughput_bench(Featurizer(cfg.train.featurizer))
        (out / "throughput.csv").write_text(rows_to_csv(bench))
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = gradient_suite(seed=seed)
    lines = ["name,n_entries,max_abs_error,rel_error,ok"]
    lines += [f"{r.name},{r.n_entries},{r.max_abs_error!r},{r.rel_error!r},{r.ok}" for r in results]
    text = "\n".join(lines) + "\n"
    if args.out:
        (_out_dir(args) / "gradcheck.csv").write_text(text)
    print(text, end="")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featsharp", description="Feature-map upsampling: training, evaluation and analysis.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="out", out_required=False):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=None if out_required else out_default, required=out_required)
        p.add_argument("--upsampler", choices=UPSAMPLERS)
        p.add_argument("--factor", type=int)

    p = sub.add_parser("train", help="train an upsampler")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out set")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("upsample", help="PCA feature images for each upsampler")
    common(p)
    p.add_argument("--image", help="input image (default: one synthetic scene)")
    p.add_argument("--checkpoint", action="append", metavar="KIND=PATH")
    p.set_defaults(fn=cmd_upsample)

    p = sub.add_parser("tiling-error", help="brute-force vs tiled featurization error")
    common(p)
    p.add_argument("--image")
    p.add_argument("--levels", default="1,2,3,4")
    p.set_defaults(fn=cmd_tiling_error)

    p = sub.add_parser("cost", help="featurizer cost model")
    common(p)
    p.add_argument("--max-x", type=int, default=8)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--non-progressive", action="store_true")
    p.add_argument("--proof-max", type=int, default=10_000)
    p.add_argument("--throughput", action="store_true")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads()
        return args.fn(args)
    except (ValueError, OSError, FloatingPointError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
