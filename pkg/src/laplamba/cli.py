"""``laplamba`` command line: gen, train, infer, decompose, analyze, gradcheck, bench.

Exit status is 0 on success, 1 on a runtime failure and 2 on invalid
configuration or input. ``LAPLAMBA_THREADS`` caps BLAS and compiled-kernel
worker threads; it must be read before numpy loads, hence the early block.
"""

from __future__ import annotations

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _apply_thread_cap() -> None:
    raw = os.environ.get("LAPLAMBA_THREADS")
    if raw is None:
        return
    if not raw.isdigit() or int(raw) < 1:
        raise SystemExit(f"laplamba: LAPLAMBA_THREADS must be a positive integer, got {raw!r}")
    for var in _THREAD_VARS:
        os.environ[var] = raw


_apply_thread_cap()

import argparse  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import (bench, config, gradsuite, hazegen, imageio, lftm, network,  # noqa: E402
               objectives, trainer)
from .errors import ConfigError, DimensionError, LaplambaError  # noqa: E402
from .tensor import Tensor  # noqa: E402

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _say(msg: str = "") -> None:
    print(msg, flush=True)


def _echo_args(name: str, args: argparse.Namespace) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("func", "command") and v is not None}
    _say(f"# laplamba {name} " + " ".join(f"{k}={v}" for k, v in sorted(items.items())))


def _parse_size(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"size must be S or HxW, got {text!r}") from exc
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise ConfigError(f"size must be S or HxW with positive values, got {text!r}")
    return tuple(vals)


def _dataset_seed(root: Path) -> int:
    try:
        head = (root / hazegen.MANIFEST).read_text().splitlines()[0]
    except (OSError, IndexError):
        return 0
    for tok in head.lstrip("#").split():
        if tok.startswith("seed="):
            return int(tok[5:])
    return 0


# ---------------------------------------------------------------- commands
def cmd_gen(args) -> int:
    _echo_args("gen", args)
    size = _parse_size(args.size)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    root = hazegen.write_dataset(args.out, args.count, size if size[0] != size[1] else size[0],
                                 args.seed, force=args.force)
    _say(f"wrote {args.count} pairs to {root}")
    return EXIT_OK


def _resolve_run_config(args) -> config.RunConfig:
    overrides = {k: getattr(args, "cfg_" + k) for k in config.RunConfig.keys()}
    return config.load(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _resolve_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    _say(cfg.to_text().rstrip())
    data = Path(args.data)
    hazy, clear = hazegen.load_dataset(data)
    if cfg.data.val_data:
        vh, vc = hazegen.load_dataset(cfg.data.val_data)
    elif cfg.data.val_count:
        if cfg.data.val_count >= hazy.shape[0]:
            raise ConfigError(f"val_count={cfg.data.val_count} leaves no training pairs")
        vh, vc = hazy[-cfg.data.val_count:], clear[-cfg.data.val_count:]
        hazy, clear = hazy[:-cfg.data.val_count], clear[:-cfg.data.val_count]
    else:
        vh = vc = None
    _say(f"# training pairs {hazy.shape[0]}, validation pairs {0 if vh is None else vh.shape[0]}")
    model = network.build(cfg.network, cfg.data.init_seed)
    samples = out / "samples"
    samples.mkdir(exist_ok=True)
    log_path = out / "log.csv"
    resume = args.resume
    if resume is None and args.auto_resume and (out / "checkpoint.lpmb").exists():
        resume = out / "checkpoint.lpmb"
    trainer.write_log(log_path, [], append=resume is not None)

    def on_row(row):
        trainer.write_log(log_path, [row], append=True)
        _say(trainer.format_row(row))
        if vh is not None:
            imageio.write_image(samples / f"step_{row['step']:06d}.png", model.dehaze(vh[0]))

    _say(",".join(trainer.LOG_COLUMNS))
    result = trainer.train(model, hazy, clear, cfg.train,
                           val=None if vh is None else (vh, vc), out_dir=out, resume=resume,
                           dataset_seed=_dataset_seed(data), stop_after=args.stop_after,
                           on_row=on_row)
    _say(f"# {len(result.step_losses)} steps in {result.seconds:.1f} s; "
         f"checkpoint {result.checkpoint}")
    return EXIT_OK


def _image_paths(path: Path) -> list:
    if path.is_dir():
        found = imageio.list_images(path)
        if not found:
            raise ConfigError(f"no .png/.ppm images in {path}")
        return found
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    return [path]


def cmd_infer(args) -> int:
    _echo_args("infer", args)
    ckpt_path = Path(args.ckpt)
    cfg_path = Path(args.config) if args.config else ckpt_path.parent / "config.txt"
    cfg = config.load(cfg_path if cfg_path.exists() else None)
    ckpt = trainer.load_checkpoint(ckpt_path)
    model = network.build(cfg.network, cfg.data.init_seed)
    if ckpt.config_digest != model.cfg.digest():
        raise ConfigError(f"{ckpt_path} does not match the network in {cfg_path}; pass --config")
    model.load_state_dict(ckpt.group("param/"))
    if args.float32:
        model.astype(np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _image_paths(Path(args.input))
    gts = None
    if args.gt:
        gts = _image_paths(Path(args.gt))
        if len(gts) != len(inputs):
            raise ConfigError(f"{len(inputs)} inputs but {len(gts)} ground-truth images")
    scores = []
    for k, path in enumerate(inputs):
        img = imageio.read_image(path)
        arr = img.astype(np.float32) if args.float32 else img
        res = model.dehaze(arr).astype(np.float64)
        imageio.write_image(out / (path.stem + ".png"), res)
        line = f"{path.name}: {img.shape[1]}x{img.shape[2]} -> {out / (path.stem + '.png')}"
        if gts is not None:
            gt = imageio.read_image(gts[k])
            p, s = objectives.psnr(res, gt), objectives.ssim(res, gt)
            scores.append((p, s))
            line += f"  PSNR {p:.3f} dB  SSIM {s:.4f}"
        _say(line)
    if scores:
        arr = np.asarray(scores)
        _say(f"mean PSNR {arr[:, 0].mean():.3f} dB  mean SSIM {arr[:, 1].mean():.4f}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    _echo_args("decompose", args)
    img = imageio.read_image(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x = Tensor(img[None])
    highs, low = lftm.lft_multi(x, args.levels)
    recon = lftm.reconstruct_multi(highs, low)
    err = float(np.max(np.abs(recon.data - x.data)))
    lines = [f"input {img.shape[1]}x{img.shape[2]}, levels {args.levels}"]
    for k, h in enumerate(highs, 1):
        imageio.write_image(out / f"high_{k}.png", h.data[0] + 0.5)
        lines.append(f"high_{k}.png  {h.shape[2]}x{h.shape[3]}  (displayed with +0.5 offset)")
    imageio.write_image(out / f"low_{args.levels}.png", low.data[0])
    lines.append(f"low_{args.levels}.png  {low.shape[2]}x{low.shape[3]}")
    lines.append(f"max |x - reconstruct| = {err:.3e}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        _say(line)
    return EXIT_OK


def cmd_analyze(args) -> int:
    root = Path(args.data)
    src = root / "clear" if (root / "clear").is_dir() else root
    paths = _image_paths(src)
    report = hazegen.variance_analysis((imageio.read_image(p) for p in paths), args.levels)
    csv = report.to_csv()
    if args.out:
        Path(args.out).write_text(csv)
    else:
        sys.stdout.write(csv)
    sys.stderr.write(f"# laplamba analyze data={root} levels={args.levels}\n" + report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo_args("gradcheck", args)
    rows = gradsuite.run(seed=args.seed, max_coords=args.max_coords)
    _say(gradsuite.format_report(rows))
    failed = [r.result.name for r in rows if not r.result.passed]
    _say(f"{len(rows) - len(failed)}/{len(rows)} passed" + (f"; failed: {failed}" if failed else ""))
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_bench(args) -> int:
    _echo_args("bench", args)
    h, w = _parse_size(args.size)
    cfg = config.load(args.config).network
    _say(bench.flop_report(cfg, h, w))
    t = bench.forward_timing(cfg, h, w)
    _say(f"forward wall time at {h}x{w} (batch 1, best of 3): {t:.4f} s")
    lengths = tuple(int(v) for v in args.lengths.split(","))
    if len(lengths) < 2:
        raise ConfigError("--lengths needs at least two values")
    _say("scan scaling (forward, channels 64, state 16)")
    _say(bench.scan_timing(lengths).report())
    return EXIT_OK


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laplamba", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic hazy/clear dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--size", default="64")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--auto-resume", action="store_true",
                   help="continue from OUT/checkpoint.lpmb when it exists")
    t.add_argument("--stop-after", type=int, help="stop after this global step")
    opts = t.add_argument_group("config keys (override the --config file)")
    for key, (_, default) in config.RunConfig.keys().items():
        opts.add_argument(f"--{key.replace('_', '-')}", dest="cfg_" + key, metavar="V",
                          help=f"default {config._render(default)}")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="dehaze images with a trained checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--config", help="run config (default: config.txt beside the checkpoint)")
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--gt", help="ground-truth image or directory for PSNR/SSIM")
    i.add_argument("--float32", action="store_true", help="run inference in 32-bit floats")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("decompose", help="write Laplacian bands of an image")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--levels", type=int, default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompose)

    a = sub.add_parser("analyze", help="per-image low/high band variance table (CSV)")
    a.add_argument("--data", required=True)
    a.add_argument("--levels", type=int, default=1)
    a.add_argument("--out", help="CSV path (default: stdout)")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of every block")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-coords", type=int, default=48)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="FLOP report, forward time and scan scaling")
    b.add_argument("--size", default="64x64")
    b.add_argument("--config")
    b.add_argument("--lengths", default="1024,2048,4096,8192")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError) as exc:
        print(f"laplamba {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LaplambaError, OSError) as exc:
        print(f"laplamba {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
