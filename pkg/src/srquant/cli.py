"""Command-line entry point.

Subcommands: ``pretrain`` (full-precision teacher), ``analyze`` (mismatch
indicators and the offset plan), ``train`` (quantization-aware training),
``eval`` (PSNR/SSIM over an evaluation set), ``complexity`` (storage and
BitOPs accounting). Exit codes: 0 success, 1 configuration error, 2 runtime
or numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import complexity as cx
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, format_defaults, load_run_config
from .data import PngFolderPatches, SyntheticPatches, save_png
from .errors import ConfigError, SrquantError
from .metrics import psnr, ssim
from .mismatch import OffsetPlan, collect_mismatch, select_offset_layers
from .model import pretrain_teacher
from .training import train, write_telemetry_csv

_EVAL_SEED_OFFSET = 7919  # keeps evaluation patches disjoint from training


def _make_dataset(cfg: RunConfig, seed: int, n: int):
    if cfg.dataset == "synth":
        return SyntheticPatches(
            n=n, scale=cfg.scale, patch_size=cfg.patch_size, seed=seed,
            batch_size=cfg.batch_size, downsample=cfg.downsample,
        )
    if cfg.dataset == "png":
        if not cfg.data_dir:
            raise ConfigError("dataset=png requires data_dir")
        return PngFolderPatches(
            cfg.data_dir, scale=cfg.scale, patch_size=cfg.patch_size, seed=seed,
            n=n, batch_size=cfg.batch_size, downsample=cfg.downsample,
        )
    raise ConfigError(f"unknown dataset kind {cfg.dataset!r}")


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(cfg: RunConfig) -> int:
    dataset = _make_dataset(cfg, cfg.seed, cfg.n_patches)
    teacher, losses = pretrain_teacher(
        cfg.model_config(), dataset, steps=cfg.pretrain_steps, lr=cfg.pretrain_lr, seed=cfg.seed
    )
    out = _out_dir(cfg)
    save_checkpoint(out / "teacher.ckpt", teacher)
    with open(out / "pretrain_log.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, value in enumerate(losses):
            fh.write(f"{i},{value:.8g}\n")
    print(f"teacher checkpoint: {out / 'teacher.ckpt'}")
    print(f"final pretraining loss: {losses[-1]:.6g} (from {losses[0]:.6g})")
    return 0


def cmd_analyze(cfg: RunConfig, teacher_path: str) -> int:
    teacher = load_checkpoint(teacher_path)
    dataset = _make_dataset(cfg, cfg.seed, max(cfg.n_patches, cfg.mismatch_patches))
    batch = next(dataset.batches(0, cfg.mismatch_patches))
    reports = collect_mismatch(teacher, batch.lr)
    plan = select_offset_layers(reports, cfg.offset_ratio)

    out = _out_dir(cfg)
    lines = [f"{'layer':>5}  {'m_mu':>12}  {'m_sigma':>12}  {'shift':>5}  {'scale':>5}"]
    for r in reports:
        lines.append(
            f"{r.layer_id:>5}  {r.m_mu:>12.6f}  {r.m_sigma:>12.6f}  "
            f"{'yes' if plan.wants_shift(r.layer_id) else '-':>5}  "
            f"{'yes' if plan.wants_scale(r.layer_id) else '-':>5}"
        )
    report_text = "\n".join(lines) + "\n"
    (out / "mismatch_report.txt").write_text(report_text)
    with open(out / "offset_plan.json", "w") as fh:
        json.dump(
            {"p": plan.p, "shift_layers": list(plan.shift_layers), "scale_layers": list(plan.scale_layers)},
            fh,
            indent=2,
        )
        fh.write("\n")
    print(report_text, end="")
    print(f"plan: {out / 'offset_plan.json'}")
    return 0


def _load_plan(path) -> OffsetPlan:
    with open(path) as fh:
        raw = json.load(fh)
    return OffsetPlan(tuple(raw["shift_layers"]), tuple(raw["scale_layers"]), float(raw["p"]))


def cmd_train(cfg: RunConfig, teacher_path: str, plan_path: str | None, no_offsets: bool) -> int:
    teacher = load_checkpoint(teacher_path)
    if no_offsets:
        plan = None
    elif plan_path:
        plan = _load_plan(plan_path)
    else:
        raise ConfigError("train needs --plan (from `analyze`) unless --no-offsets is given")
    dataset = _make_dataset(cfg, cfg.seed, cfg.n_patches)
    out = _out_dir(cfg)

    def hook(student, epoch):
        save_checkpoint(out / "last.ckpt", student)

    result = train(
        teacher,
        dataset,
        cfg.schedule(),
        cfg.loss_config(),
        plan=plan,
        seed=cfg.seed,
        bits=cfg.bits,
        percentile_j=cfg.percentile_j,
        track_weight_ranges=cfg.track_weight_ranges,
        calibration_patches=cfg.calibration_patches,
        checkpoint_hook=hook,
    )
    save_checkpoint(out / "student.ckpt", result.model)
    write_telemetry_csv(out / "telemetry.csv", result.telemetry)
    final = result.telemetry[-1]
    print(f"student checkpoint: {out / 'student.ckpt'}")
    print(f"steps: {len(result.telemetry)}, final loss_r: {final.loss_r:.6g}, "
          f"final conflict ratio: {final.conflict_ratio:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint_path: str, save_images: str | None) -> int:
    model = load_checkpoint(checkpoint_path)
    dataset = _make_dataset(cfg, cfg.seed + _EVAL_SEED_OFFSET, cfg.n_eval_patches)
    border = cfg.scale
    rows = []
    image_dir = Path(save_images) if save_images else None
    if image_dir:
        image_dir.mkdir(parents=True, exist_ok=True)
    index = 0
    for pair in dataset.batches(0, 1):
        result = model.forward(pair.lr)
        sr255 = np.clip(result.sr.data[0], 0.0, 1.0) * 255.0
        hr255 = pair.hr.data[0] * 255.0
        rows.append((index, psnr(sr255, hr255, border), ssim(sr255, hr255, border)))
        if image_dir:
            save_png(image_dir / f"sr_{index:03d}.png", result.sr.data[0])
        index += 1
    print(f"{'image':>5}  {'psnr_db':>9}  {'ssim':>7}")
    for i, p, s in rows:
        print(f"{i:>5}  {p:>9.4f}  {s:>7.4f}")
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    print(f"{'mean':>5}  {mean_psnr:>9.4f}  {mean_ssim:>7.4f}")
    return 0


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise ConfigError(f"resolution must look like 1920x1080, got {text!r}") from exc


def _parse_offsets(text: str | None) -> float:
    if text is None:
        return 0.0
    try:
        key, value = text.split("=", 1)
        if key.strip() != "p":
            raise ValueError
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"--offsets must look like p=0.3, got {text!r}") from exc


def cmd_complexity(cfg: RunConfig, preset: str | None, bits: int, resolution: str,
                   offsets: str | None, quantize_body_end: bool, csv_path: str | None) -> int:
    if preset == "edsr-baseline":
        model_config = cx.EDSR_BASELINE
    elif preset is None:
        model_config = cfg.model_config()
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    assignment = cx.preset_bits(
        model_config,
        bits,
        quantize_body_end=quantize_body_end,
        offset_ratio=_parse_offsets(offsets),
        offset_bits=cfg.offset_bits,
    )
    report = cx.complexity_report(model_config, assignment, _parse_resolution(resolution))
    print(cx.render_table(report))
    print(f"storage: {report.storage_k:.1f}K   bitops: {report.bitops_t:.1f}T")
    if csv_path:
        cx.write_report_csv(report, csv_path)
        print(f"csv: {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srquant",
        description="Quantization-aware training for a miniature SR network, "
                    "plus exact storage/BitOPs accounting.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=format_defaults(),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the full-precision teacher",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=format_defaults())
    _add_common(p)

    p = sub.add_parser("analyze", help="measure mismatch and freeze the offset plan",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=format_defaults())
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint from `pretrain`")

    p = sub.add_parser("train", help="quantization-aware training",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=format_defaults())
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--plan", help="offset plan from `analyze`")
    p.add_argument("--no-coop", action="store_true", help="joint update, no sign gating")
    p.add_argument("--no-var-reg", action="store_true", help="disable variance regularization")
    p.add_argument("--no-offsets", action="store_true", help="train without distribution offsets")

    p = sub.add_parser("eval", help="PSNR/SSIM over an evaluation set",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=format_defaults())
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--save-images", metavar="DIR", help="write SR outputs as PNG")

    p = sub.add_parser("complexity", help="storage and BitOPs accounting",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=format_defaults())
    _add_common(p)
    p.add_argument("--preset", choices=["edsr-baseline"], help="published accounting configuration")
    p.add_argument("--bits", type=int, default=32, choices=[2, 3, 4, 8, 32])
    p.add_argument("--resolution", default="1920x1080")
    p.add_argument("--offsets", metavar="p=RATIO", help="include offset overhead, e.g. p=0.3")
    p.add_argument("--quantize-body-end", action="store_true",
                   help="count the body-end conv at low bits too (published accounting keeps it at 32)")
    p.add_argument("--csv", metavar="PATH", help="also write the per-layer report as CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.set)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.teacher)
        if args.command == "train":
            if args.no_coop:
                cfg.cooperative = False
            if args.no_var_reg:
                cfg.variance_reg = False
            return cmd_train(cfg, args.teacher, args.plan, args.no_offsets)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.save_images)
        if args.command == "complexity":
            return cmd_complexity(cfg, args.preset, args.bits, args.resolution,
                                  args.offsets, args.quantize_body_end, args.csv)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SrquantError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
