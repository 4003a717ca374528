"""Command-line entry point.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.
A ``--config`` file is applied after the flags, so its keys win. Relative
output paths are resolved under ``$RSRNET_OUTPUT_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    ABLATION_FLAGS, CheckpointError, ConfigError, ModelConfig, PRESETS, load_checkpoint,
    manifest_parameter_count, parse_config_text, set_deterministic,
)
from .data import DataConfig, load_dataset, make_dataset, read_image, read_mask, save_dataset, to_uint8

OUTPUT_ENV = "RSRNET_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("rsrnet")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def out_path(raw: str) -> Path:
    p = Path(raw)
    root = os.environ.get(OUTPUT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def existing(raw: str, what: str) -> Path:
    p = Path(raw)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def int_list(raw: str) -> list[int]:
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {raw!r}") from exc


def resolve_config(args, base: ModelConfig | None = None) -> ModelConfig:
    """Flags first, then the config file on top."""
    cfg = base or PRESETS[getattr(args, "preset", "desk")]()
    over = {}
    for key in ("epochs", "batch_size", "lr", "num_iterations", "loss_lambda"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    for flag in getattr(args, "ablate", None) or []:
        if flag not in ABLATION_FLAGS:
            raise UsageError(f"unknown ablation flag {flag!r}; choose from {', '.join(ABLATION_FLAGS)}")
        over[flag] = True
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = cfg.with_overrides(**over)
    if args.config:
        cfg = parse_config_text(existing(args.config, "config file").read_text(), cfg)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    seed = 42 if args.seed is None else args.seed
    if args.config:
        seed = resolve_config(args).seed
    out = out_path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    samples = make_dataset(seed, args.n, DataConfig(size=args.size, test_fraction=args.test_fraction))
    save_dataset(samples, out, seed=seed, test_fraction=args.test_fraction)
    areas = np.array([s.mask.mean() for s in samples])
    print(f"wrote {args.n} samples of {args.size}x{args.size} to {out}")
    print(f"area fraction: min {areas.min():.4f} mean {areas.mean():.4f} max {areas.max():.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import row_config, train

    cfg = resolve_config(args)
    if args.row is not None:
        cfg = row_config(args.row, cfg)
    data = existing(args.data, "dataset")
    res = train(cfg, data, out_path(args.out), split=args.split, max_steps=args.steps, progress=True)
    print(f"trained {res.log[-1]['step']} steps, final loss {res.log[-1]['total']:.6f}")
    print(f"checkpoint: {res.checkpoint_path}")
    return EXIT_OK


def load_for_inference(args):
    from .pipeline import load_model

    ckpt = load_checkpoint(existing(args.checkpoint, "checkpoint"))
    cfg = ckpt.config
    if args.config:
        cfg = parse_config_text(existing(args.config, "config file").read_text(), cfg)
    return load_model(ckpt, cfg), cfg


def cmd_eval(args) -> int:
    from .metrics import three_mask_table
    from .pipeline import evaluate_model

    model, _ = load_for_inference(args)
    samples = load_dataset(existing(args.data, "dataset"), args.split)
    reports = evaluate_model(model, samples, args.ap_mode)
    print(reports["m_fnl"].table("m_fnl"))
    if len(reports) > 1:
        print()
        print(three_mask_table(reports))
    if args.records:
        path = out_path(args.records)
        path.parent.mkdir(parents=True, exist_ok=True)
        reports["m_fnl"].write_records(path)
    return EXIT_OK


def fit_image(path: Path, size: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def input_images(raw: str) -> list[Path]:
    p = existing(raw, "input")
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise UsageError(f"no images in {p}")
        return files
    return [p]


def cmd_infer(args) -> int:
    from .pipeline import predict
    from .data import SamplePair

    model, cfg = load_for_inference(args)
    files = input_images(args.input)
    samples = {f.stem: SamplePair(fit_image(f, cfg.input_size), np.zeros((cfg.input_size,) * 2)) for f in files}
    preds = predict(model, samples)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = ("m_fnl", "m_rsr", "m_dec", "g") if args.dump_all else ("m_fnl",)
    n = 0
    for ident, masks in preds.items():
        for key in keys:
            if key in masks:
                Image.fromarray(to_uint8(masks[key]), "L").save(out / f"{ident}_{key}.png")
                n += 1
    print(f"wrote {n} mask files to {out}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    import torch

    from .pipeline import forward
    from .viz import dump_visuals

    model, cfg = load_for_inference(args)
    image = fit_image(existing(args.image, "image"), cfg.input_size)
    gt = None
    if args.mask:
        gt = read_mask(existing(args.mask, "mask"))
        if gt.shape != (cfg.input_size, cfg.input_size):
            m = Image.fromarray(to_uint8(gt)).resize((cfg.input_size,) * 2, Image.NEAREST)
            gt = (np.asarray(m) > 127).astype(np.float32)
    with torch.no_grad():
        out = forward(model, image)
    written = dump_visuals(out, gt, cfg.scales, out_path(args.out))
    print(f"{len(written['iterations'])} iteration masks, {len(written['similarity'])} similarity heatmaps, "
          f"fusion panel {written['panel'][0]}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import ROWS, ablation_tables, run_ablation

    cfg = resolve_config(args)
    rows = sorted(ROWS) if args.rows == "all" else int_list(args.rows)
    bad = [r for r in rows if r not in ROWS]
    if bad or not rows:
        raise UsageError(f"rows must be 'all' or a subset of 1..9, got {args.rows!r}")
    seeds = args.seeds or [cfg.seed]
    data = existing(args.data, "dataset")
    train_set, test_set = load_dataset(data, "train"), load_dataset(data, "test")
    out = out_path(args.out)
    runs = run_ablation(cfg, train_set, test_set, rows, seeds, args.steps, out, progress=True)
    table, breakdown = ablation_tables(runs)
    print(table)
    print()
    print("per-mask breakdown")
    print(breakdown)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table + "\n\n" + breakdown + "\n")
    records = [{"row": r.row, "seed": r.seed, "final_loss": r.final_loss, "seconds": r.seconds,
                **{k: v.as_row() for k, v in r.reports.items()}} for r in runs]
    (out / "ablation.json").write_text(json.dumps(records, indent=1))
    return EXIT_OK


def cmd_complexity(args) -> int:
    from .metrics import complexity_report
    from .pipeline import build_model, load_model

    set_deterministic()
    if args.checkpoint:
        path = existing(args.checkpoint, "checkpoint")
        ckpt = load_checkpoint(path)
        model, cfg = load_model(ckpt), ckpt.config
    else:
        cfg = resolve_config(args)
        model = build_model(cfg)
    rep = complexity_report(model, cfg.input_size, n_timing_runs=args.timing_runs)
    print(rep.table())
    print("parameters per module: " + ", ".join(f"{k} {v}" for k, v in rep.per_module_parameters.items()))
    if args.checkpoint:
        manifest = manifest_parameter_count(path)
        print(f"checkpoint manifest: {manifest} parameters ({'match' if manifest == rep.parameter_count else 'MISMATCH'})")
        if manifest != rep.parameter_count:
            return EXIT_USAGE
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> Parser:
    parser = Parser(prog="rsrnet", description="Inharmonious region localization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=None, help="master seed (default: config seed, 42)")
        p.add_argument("--config", default=None, help="key = value config file; applied after flags")
        p.set_defaults(fn=fn)
        return p

    def model_flags(p):
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--ablate", type=lambda s: [f.strip() for f in s.split(",") if f.strip()],
                       default=None, help=f"comma separated flags: {', '.join(ABLATION_FLAGS)}")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--num-iterations", dest="num_iterations", type=int)
        p.add_argument("--lambda", dest="loss_lambda", type=float)
        p.add_argument("--steps", type=int, help="stop after this many optimizer steps")

    p = command("generate-data", cmd_generate_data, "generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train a model")
    model_flags(p)
    p.add_argument("--row", type=int, choices=range(1, 10), help="ablation table row (1-9)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)

    for name, fn, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                            ("infer", cmd_infer, "predict masks for images"),
                            ("visualize", cmd_visualize, "dump iteration masks, heatmaps and fusion panel")):
        p = command(name, fn, help_)
        p.add_argument("--checkpoint", required=True)
        if name == "eval":
            p.add_argument("--data", required=True)
            p.add_argument("--split", default="test")
            p.add_argument("--ap-mode", choices=("per_image", "pooled"), default="per_image")
            p.add_argument("--records", default=None, help="write per-image JSONL records here")
        elif name == "infer":
            p.add_argument("--input", required=True, help="image file or directory")
            p.add_argument("--out", required=True)
            p.add_argument("--dump-all", action="store_true", help="also write m_rsr, m_dec and g")
        else:
            p.add_argument("--image", required=True)
            p.add_argument("--mask", default=None, help="ground-truth mask for the panel")
            p.add_argument("--out", required=True)

    p = command("ablate", cmd_ablate, "train and compare ablation rows")
    model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--rows", default="1,9", help="comma separated rows or 'all'")
    p.add_argument("--seeds", type=int_list, default=None)
    p.add_argument("--out", required=True)

    p = command("complexity", cmd_complexity, "parameter, FLOP and timing report")
    model_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--timing-runs", type=int, default=5)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .pipeline import NumericalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate") else logging.WARNING,
                        format="%(message)s")
    try:
        return args.fn(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
