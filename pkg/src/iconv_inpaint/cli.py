"""Command-line entry point: ``iconv-inpaint <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .data_masks import (
    FreeFormParams,
    ImageFormatError,
    gen_freeform_mask,
    load_image,
    load_mask,
    save_image,
    save_mask,
)
from .losses import PenaltyConfig
from .models import NetworkConfig, build_discriminator, build_generator, count_parameters
from .trainer import (
    TrainConfig,
    TrainingHalted,
    TrainState,
    eval_set,
    evaluate,
    inpaint,
    make_batch,
    train,
)

log = logging.getLogger("iconv_inpaint")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def load_config(path) -> tuple[NetworkConfig, TrainConfig]:
    """JSON file with optional ``network`` and ``train`` sections."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = set(raw) - {"network", "train"}
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    try:
        net = NetworkConfig.from_dict(raw.get("network", {}))
        train_d = dict(raw.get("train", {}))
        if "penalty" in train_d:
            train_d["penalty"] = PenaltyConfig.from_dict(train_d["penalty"])
        cfg = TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config {path}: {exc}") from exc
    return net, cfg


def _read_log(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (float(v) if v not in ("", None) else None) for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .plotting import montage, plot_training_log

    out = Path(args.out)
    if args.resume:
        state = TrainState.load(args.resume)
        if args.config:
            net, cfg = load_config(args.config)
            if net.to_dict() != state.net.to_dict():
                raise UsageError("--config network section differs from the resumed checkpoint")
            state.cfg = cfg
    elif args.config:
        net, cfg = load_config(args.config)
        state = TrainState(net, cfg)
    else:
        raise UsageError("train needs --config (or --resume)")
    steps = args.steps if args.steps is not None else max(state.cfg.total_steps - state.step, 0)
    if steps < 0:
        raise UsageError("--steps must be non-negative")
    out.mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(exist_ok=True)
    (out / "config.json").write_text(
        json.dumps({"network": state.net.to_dict(), "train": state.cfg.to_dict()}, indent=2)
    )

    def on_step(st: TrainState, row: dict) -> None:
        interval = st.cfg.sample_interval
        if interval and st.step % interval == 0:
            batch = make_batch(st.net, st.cfg, 0)
            pred = inpaint(st.ema_generator(), batch.real, batch.mask)
            montage(batch.real, batch.mask, pred, out / "samples" / f"step_{st.step:06d}.png")

    try:
        train(state, steps, out, on_step=on_step)
    except TrainingHalted as exc:
        print(f"error: {exc} (diagnostic in {out / 'halt.json'})", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        state.save(out / "last.ckpt")
    if (out / "log.csv").exists():
        plot_training_log(_read_log(out / "log.csv"), out / "log.png")
    print(json.dumps({"step": state.step, "checkpoint": str(out / "last.ckpt")}))
    return EXIT_OK


def _load_generator(path):
    state = TrainState.load(path)
    return state.ema_generator(), state.net


def cmd_inpaint(args) -> int:
    G, net = _load_generator(args.checkpoint)
    image = load_image(args.image)
    mask = load_mask(args.mask)
    if image.shape[0] != net.image_channels:
        raise UsageError(f"image has {image.shape[0]} channels, model expects {net.image_channels}")
    if image.shape[1:] != mask.shape[1:]:
        raise UsageError(f"mask size {mask.shape[1:]} does not match image size {image.shape[1:]}")
    R = net.max_resolution
    if image.shape[1:] != (R, R):
        raise UsageError(f"image is {image.shape[1:]}, model works on {R}x{R}")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k in range(args.samples):
        z = np.random.default_rng([args.seed, k]).standard_normal((1, net.latent_dim))
        pred = inpaint(G, image[None], mask[None], z=z)[0]
        path = out / f"inpainted_{k:02d}.png"
        save_image(pred, path)
        written.append(str(path))
    print(json.dumps({"outputs": written}))
    return EXIT_OK


def _load_dir(path: Path, n: int, R: int) -> np.ndarray:
    if not path.is_dir():
        raise UsageError(f"data directory not found: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not files:
        raise UsageError(f"no .png/.ppm images in {path}")
    imgs = [load_image(p) for p in files[:n]]
    for p, im in zip(files, imgs):
        if im.shape != (3, R, R):
            raise UsageError(f"{p} is {im.shape}, expected (3, {R}, {R})")
    return np.stack(imgs)


def cmd_eval(args) -> int:
    from .plotting import plot_eval

    G, net = _load_generator(args.checkpoint)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    images, masks = eval_set(net, args.n, args.seed, args.mask_mode)
    if args.data != "synth":
        images = _load_dir(Path(args.data), args.n, net.max_resolution)
        masks = masks[: len(images)]
    records, summary = evaluate(G, images, masks)
    result = {"model": summary}
    base_records = None
    if args.baseline == "meanfill":
        base_records, result["meanfill"] = evaluate(None, images, masks, baseline="meanfill")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.jsonl", "w") as fh:
        for i, rec in enumerate(records):
            row = {"index": i, "model": {k: v for k, v in rec.items() if k != "index"}}
            if base_records is not None:
                row["meanfill"] = {k: v for k, v in base_records[i].items() if k != "index"}
            fh.write(json.dumps(row) + "\n")
        fh.write(json.dumps({"summary": result}) + "\n")
    plot_eval(records, out / "eval_hole_psnr.png", baseline=base_records)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import main_report

    ok, seconds = main_report(range(args.seeds))
    print(f"{'all passed' if ok else 'FAILURES'} in {seconds:.1f}s")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_masks(args) -> int:
    if args.n < 1 or args.size < 1:
        raise UsageError("--n and --size must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    params = FreeFormParams(max_length_frac=args.length_frac)
    for i in range(args.n):
        save_mask(gen_freeform_mask(args.size, args.size, params, rng), out / f"mask_{i:04d}.png")
    print(json.dumps({"written": args.n, "dir": str(out)}))
    return EXIT_OK


def cmd_params(args) -> int:
    net = load_config(args.config)[0] if args.config else NetworkConfig()
    report = {
        "generator": count_parameters(build_generator(net, 0)),
        "discriminator": count_parameters(build_discriminator(net, 0)),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iconv-inpaint", description="Certainty-aware inpainting GAN toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("inpaint", help="fill the holes of one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--mask", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--samples", type=int, default=1)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inpaint)

    e = sub.add_parser("eval", help="hole/full-image metrics on held-out data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default="synth", help="image directory or 'synth'")
    e.add_argument("--mask-mode", choices=("center", "freeform"), default="freeform")
    e.add_argument("--n", type=int, default=200)
    e.add_argument("--baseline", choices=("meanfill",))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference suite")
    g.add_argument("--seeds", type=int, default=5)
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("masks", help="write free-form mask PNGs")
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--length-frac", type=float, default=FreeFormParams.max_length_frac)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_masks)

    c = sub.add_parser("params", help="parameter count breakdown")
    c.add_argument("--config")
    c.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ImageFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
