"""Operator command line: synth, degrade, train, reconstruct, eval, ablate.

Every subcommand validates its full configuration before touching the
filesystem, writes all outputs under ``--out``, and finishes by writing a
``manifest.json`` naming the inputs, the effective configuration, and the
package version. Exit codes: 0 success, 2 usage, 3 format, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass, field

from . import __version__
from .condition import downsample_axial
from .core import Image2D, RandomSource
from .denoiser import TinyDenoiser, TrainConfig, TrainingFailure, train_denoiser
from .figures import save_ablation_figure, save_loss_figure, save_metrics_figure
from .io import (
    FormatError,
    IncompatibleCheckpointError,
    load_checkpoint,
    read_volume,
    store_checkpoint,
    write_report,
    write_volume,
)
from .metrics import MetricReport, evaluate_volume
from .sampler import SamplerConfig, SamplingFailure, reconstruct_volume
from .schedule import SigmaMode, linear_schedule, uniform_subsequence
from .synth import SYNTH_KINDS, make_volume

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4

SEED_ENV_VAR = "ISOREC_SEED"


@dataclass
class RunConfig:
    """Validated per-invocation configuration; the manifest serializes it."""

    command: str
    out_dir: str
    seed: int
    inputs: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "out": self.out_dir,
            "seed": self.seed,
            "inputs": self.inputs,
            "options": self.options,
        }


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from None
    return 0


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"dims must look like ZxYxX, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"dims must be integers, got {text!r}") from None
    if min(dims) < 1:
        raise ValueError(f"dims must be positive, got {text!r}")
    return dims


def _parse_tk_grid(text: str) -> list[tuple[int, int]]:
    cells = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        parts = token.split(":")
        if len(parts) != 2:
            raise ValueError(f"grid cells must look like T:K, got {token!r}")
        t, k = (int(p) for p in parts)
        if t < 1 or k < 1:
            raise ValueError(f"grid cell values must be positive, got {token!r}")
        cells.append((t, k))
    if not cells:
        raise ValueError("the T:K grid must be nonempty")
    return cells


def _parse_period_grid(text: str) -> list[int]:
    periods = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        value = int(token)
        if value < 1:
            raise ValueError(f"periods must be >= 1, got {token!r}")
        periods.append(value)
    if not periods:
        raise ValueError("the period grid must be nonempty")
    return periods


def _require_file(path, what: str):
    if not os.path.isfile(path):
        raise ValueError(f"{what} {path!r} does not exist")


def _axes_from_flags(axis: str, fuse: bool) -> tuple[str, ...]:
    if axis == "both" or fuse:
        return ("xz", "yz")
    return (axis,)


def _write_manifest(cfg: RunConfig, outputs: dict):
    write_report(
        os.path.join(cfg.out_dir, "manifest.json"),
        {
            "version": f"v{__version__}",
            "outputs": outputs,
            **cfg.to_dict(),
        },
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(cfg: RunConfig) -> int:
    opts = cfg.options
    kwargs = {}
    if opts["kind"] == "stripes":
        kwargs = {"period": opts["period"], "n_waves": opts["waves"]}
    elif opts["kind"] == "blobs":
        kwargs = {"count": opts["blob_count"]}
    elif opts["kind"] == "gauss-columns":
        kwargs = {"rho": opts["rho"]}
    vol = make_volume(opts["kind"], opts["dims"], cfg.seed, **kwargs)
    out_path = os.path.join(cfg.out_dir, "volume.isov")
    write_volume(out_path, vol, dtype="float32")
    _write_manifest(cfg, {"volume": out_path})
    print(f"wrote {out_path} with dims {vol.shape}")
    return EXIT_OK


def _cmd_degrade(cfg: RunConfig) -> int:
    vol = read_volume(cfg.inputs["volume"])
    low = downsample_axial(vol, cfg.options["alpha"])
    out_path = os.path.join(cfg.out_dir, "degraded.isov")
    write_volume(out_path, low, dtype="float32")
    _write_manifest(cfg, {"degraded": out_path})
    print(f"wrote {out_path} with dims {low.shape}")
    return EXIT_OK


def _cmd_train(cfg: RunConfig) -> int:
    opts = cfg.options
    vol = read_volume(cfg.inputs["volume"])
    dataset = [Image2D(vol.data[z]) for z in range(vol.depth)]
    schedule = linear_schedule(opts["t_train"], opts["beta_start"], opts["beta_end"])
    model = TinyDenoiser.create(
        channels=opts["channels"],
        blocks=opts["blocks"],
        emb_dim=opts["emb_dim"],
        rng=RandomSource(cfg.seed, stream=7),
    )
    train_cfg = TrainConfig(
        batch_size=opts["batch"],
        steps=opts["steps"],
        learning_rate=opts["lr"],
        seed=cfg.seed,
        momentum=opts["momentum"],
        dataset_id=cfg.inputs["volume"],
    )
    model, losses = train_denoiser(model, dataset, schedule, train_cfg)
    ckpt_path = os.path.join(cfg.out_dir, "model.ckpt")
    store_checkpoint(ckpt_path, model, schedule)
    csv_path = os.path.join(cfg.out_dir, "loss.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows((i, f"{loss:.8f}") for i, loss in enumerate(losses))
    fig_path = os.path.join(cfg.out_dir, "loss.png")
    save_loss_figure(losses, fig_path)
    _write_manifest(cfg, {"checkpoint": ckpt_path, "loss_csv": csv_path, "loss_figure": fig_path})
    print(f"trained {model.num_params} parameters; final loss {losses[-1]:.4f}")
    return EXIT_OK


def _sampler_config(opts, seed: int) -> SamplerConfig:
    return SamplerConfig(
        plan=uniform_subsequence(opts["t_train"], opts["steps"], opts["refine"]),
        sigma_mode=SigmaMode.parse(opts["sigma"]),
        sscs_period=opts["sscs_period"],
        final_clamp=not opts["no_final_clamp"],
        clip_x0=not opts["no_clip_x0"],
        seed=seed,
    )


def _cmd_reconstruct(cfg: RunConfig) -> int:
    opts = cfg.options
    vol = read_volume(cfg.inputs["volume"])
    model, schedule = load_checkpoint(cfg.inputs["model"])
    opts["t_train"] = schedule.t_train
    sampler_cfg = _sampler_config(opts, cfg.seed)
    print(
        f"budget: T_total = {sampler_cfg.plan.steps} x {sampler_cfg.plan.refine_count}"
        f" = {sampler_cfg.plan.total_steps} denoiser calls per slice"
    )
    axes = _axes_from_flags(opts["axis"], opts["fuse"])
    recon, report = reconstruct_volume(
        vol, opts["alpha"], axes, model, schedule, sampler_cfg, threads=opts["threads"]
    )
    out_path = os.path.join(cfg.out_dir, "recon.isov")
    write_volume(out_path, recon, dtype="float32")
    report_path = os.path.join(cfg.out_dir, "report.json")
    write_report(report_path, report.to_dict())
    _write_manifest(cfg, {"reconstruction": out_path, "report": report_path})
    print(f"wrote {out_path} with dims {recon.shape} ({report.elapsed_seconds:.1f}s)")
    return EXIT_OK


def _write_metrics_csv(path, slices):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slice_id", "axis", "psnr_db", "ssim"])
        for s in slices:
            writer.writerow([s.slice_id, s.axis, f"{s.psnr_db:.6f}", f"{s.ssim:.6f}"])


def _cmd_eval(cfg: RunConfig) -> int:
    opts = cfg.options
    recon = read_volume(cfg.inputs["recon"])
    truth = read_volume(cfg.inputs["truth"])
    axes = _axes_from_flags(opts["axis"], False)
    reports = [
        evaluate_volume(
            recon, truth, axis=axis, window=opts["window"], max_value=opts["max_value"]
        )
        for axis in axes
    ]
    slices = [s for rep in reports for s in rep.slices]
    csv_path = os.path.join(cfg.out_dir, "metrics.csv")
    _write_metrics_csv(csv_path, slices)
    fig_path = os.path.join(cfg.out_dir, "metrics.png")
    if len(reports) == 1:
        combined = reports[0]
    else:
        mean_ssim = sum(s.ssim for s in slices) / len(slices)
        combined = MetricReport(psnr_db=reports[0].psnr_db, ssim=mean_ssim, slices=slices)
    save_metrics_figure(combined, fig_path)
    _write_manifest(cfg, {"metrics_csv": csv_path, "metrics_figure": fig_path})
    print(f"volume PSNR {combined.psnr_db:.2f} dB, mean SSIM {combined.ssim:.4f}")
    return EXIT_OK


def _cmd_ablate(cfg: RunConfig) -> int:
    opts = cfg.options
    truth = read_volume(cfg.inputs["volume"])
    model, schedule = load_checkpoint(cfg.inputs["model"])
    low = downsample_axial(truth, opts["alpha"])
    axes = _axes_from_flags(opts["axis"], False)
    rows = []
    for steps, refine in opts["tk_grid"]:
        for period in opts["period_grid"]:
            cell = f"T={steps},K={refine},period={period}"
            try:
                plan = uniform_subsequence(schedule.t_train, steps, refine)
                sampler_cfg = SamplerConfig(
                    plan=plan,
                    sigma_mode=SigmaMode.parse(opts["sigma"]),
                    sscs_period=period,
                    seed=cfg.seed,
                )
                started = time.perf_counter()
                recon, _ = reconstruct_volume(
                    low, opts["alpha"], axes, model, schedule, sampler_cfg,
                    threads=opts["threads"],
                )
                elapsed = time.perf_counter() - started
                report = evaluate_volume(recon, truth, axis=axes[0], window=opts["window"])
            except Exception as err:
                print(f"ablation aborted at cell {cell}: {err}", file=sys.stderr)
                raise
            rows.append(
                {
                    "T": steps,
                    "K": refine,
                    "sscs_period": period,
                    "budget": steps * refine,
                    "mean_psnr": report.psnr_db,
                    "mean_ssim": report.ssim,
                    "wall_time_s": elapsed,
                }
            )
            print(f"cell {cell}: PSNR {report.psnr_db:.2f} dB, SSIM {report.ssim:.4f}")
    csv_path = os.path.join(cfg.out_dir, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["T", "K", "sscs_period", "budget", "mean_psnr", "mean_ssim", "wall_time_s"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    **row,
                    "mean_psnr": f"{row['mean_psnr']:.6f}",
                    "mean_ssim": f"{row['mean_ssim']:.6f}",
                    "wall_time_s": f"{row['wall_time_s']:.3f}",
                }
            )
    fig_path = os.path.join(cfg.out_dir, "ablation.png")
    save_ablation_figure(rows, fig_path)
    _write_manifest(cfg, {"ablation_csv": csv_path, "ablation_figure": fig_path})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and validation
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isorec",
        description="Isotropic reconstruction of anisotropic volumes via conditioned diffusion sampling.",
    )
    parser.add_argument("--version", action="version", version=f"isorec v{__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic volume")
    p.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    p.add_argument("--dims", required=True, help="ZxYxX, e.g. 32x64x64")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--period", type=float, default=8.0, help="stripe wavelength in voxels")
    p.add_argument("--waves", type=int, default=3, help="number of stripe plane waves")
    p.add_argument("--blob-count", type=int, default=24)
    p.add_argument("--rho", type=float, default=0.9, help="z correlation of gauss-columns")
    p.add_argument("--out", required=True)

    p = sub.add_parser("degrade", help="average-pool a volume along z")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--alpha", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the denoiser on lateral (xy) slices")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--emb-dim", type=int, default=32)
    p.add_argument("--t-train", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("reconstruct", help="super-resolve a volume along z")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--alpha", type=int, required=True)
    p.add_argument("--steps", type=int, default=25, help="plan steps T")
    p.add_argument("--refine", type=int, default=40, help="refinements per step K")
    p.add_argument("--sigma", default="posterior", help="posterior|beta|ddim:ETA")
    p.add_argument("--sscs-period", type=int, default=1)
    p.add_argument("--axis", choices=["xz", "yz", "both"], default="xz")
    p.add_argument("--fuse", action="store_true", help="average xz and yz reconstructions")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-final-clamp", action="store_true")
    p.add_argument("--no-clip-x0", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM of a reconstruction against ground truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--axis", choices=["xz", "yz", "both"], default="xz")
    p.add_argument("--max-value", type=float, default=255.0)
    p.add_argument("--window", type=int, default=11)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="sweep (T, K) and conditioning period grids")
    p.add_argument("--in", dest="input", required=True, help="ground-truth volume")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=int, required=True)
    p.add_argument("--tk-grid", default="25:40,100:10,250:4,1000:1")
    p.add_argument("--period-grid", default="1")
    p.add_argument("--sigma", default="posterior")
    p.add_argument("--axis", choices=["xz", "yz"], default="xz")
    p.add_argument("--window", type=int, default=11)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    return parser


def _config_from_args(args) -> RunConfig:
    seed = _resolve_seed(args.seed)
    cfg = RunConfig(command=args.command, out_dir=args.out, seed=seed)
    if args.command == "synth":
        if args.period <= 0 or args.waves < 1 or args.blob_count < 1:
            raise ValueError("period, waves, and blob-count must be positive")
        if not 0.0 <= args.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {args.rho}")
        cfg.options = {
            "kind": args.kind,
            "dims": _parse_dims(args.dims),
            "period": args.period,
            "waves": args.waves,
            "blob_count": args.blob_count,
            "rho": args.rho,
        }
    elif args.command == "degrade":
        _require_file(args.input, "input volume")
        if args.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {args.alpha}")
        cfg.inputs = {"volume": args.input}
        cfg.options = {"alpha": args.alpha}
    elif args.command == "train":
        _require_file(args.input, "input volume")
        if min(args.steps, args.batch, args.channels, args.blocks) < 1:
            raise ValueError("steps, batch, channels, and blocks must be positive")
        if args.lr <= 0 or not 0.0 <= args.momentum < 1.0:
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        if args.t_train < 1 or not 0.0 < args.beta_start <= args.beta_end < 1.0:
            raise ValueError("need t-train >= 1 and 0 < beta-start <= beta-end < 1")
        if args.emb_dim < 2 or args.emb_dim % 2:
            raise ValueError("emb-dim must be even and >= 2")
        cfg.inputs = {"volume": args.input}
        cfg.options = {
            "steps": args.steps,
            "batch": args.batch,
            "lr": args.lr,
            "momentum": args.momentum,
            "channels": args.channels,
            "blocks": args.blocks,
            "emb_dim": args.emb_dim,
            "t_train": args.t_train,
            "beta_start": args.beta_start,
            "beta_end": args.beta_end,
        }
    elif args.command == "reconstruct":
        _require_file(args.input, "input volume")
        _require_file(args.model, "model checkpoint")
        if args.alpha < 1 or args.steps < 1 or args.refine < 1:
            raise ValueError("alpha, steps, and refine must be >= 1")
        if args.sscs_period < 1 or args.threads < 1:
            raise ValueError("sscs-period and threads must be >= 1")
        SigmaMode.parse(args.sigma)
        cfg.inputs = {"volume": args.input, "model": args.model}
        cfg.options = {
            "alpha": args.alpha,
            "steps": args.steps,
            "refine": args.refine,
            "sigma": args.sigma,
            "sscs_period": args.sscs_period,
            "axis": args.axis,
            "fuse": args.fuse,
            "threads": args.threads,
            "no_final_clamp": args.no_final_clamp,
            "no_clip_x0": args.no_clip_x0,
        }
    elif args.command == "eval":
        _require_file(args.recon, "reconstruction volume")
        _require_file(args.truth, "ground-truth volume")
        if args.max_value <= 0:
            raise ValueError(f"max-value must be positive, got {args.max_value}")
        if args.window < 2:
            raise ValueError(f"window must be >= 2, got {args.window}")
        cfg.inputs = {"recon": args.recon, "truth": args.truth}
        cfg.options = {"axis": args.axis, "max_value": args.max_value, "window": args.window}
    elif args.command == "ablate":
        _require_file(args.input, "ground-truth volume")
        _require_file(args.model, "model checkpoint")
        if args.alpha < 1 or args.threads < 1 or args.window < 2:
            raise ValueError("alpha and threads must be >= 1 and window >= 2")
        SigmaMode.parse(args.sigma)
        cfg.inputs = {"volume": args.input, "model": args.model}
        cfg.options = {
            "alpha": args.alpha,
            "tk_grid": _parse_tk_grid(args.tk_grid),
            "period_grid": _parse_period_grid(args.period_grid),
            "sigma": args.sigma,
            "axis": args.axis,
            "window": args.window,
            "threads": args.threads,
        }
    return cfg


_COMMANDS = {
    "synth": _cmd_synth,
    "degrade": _cmd_degrade,
    "train": _cmd_train,
    "reconstruct": _cmd_reconstruct,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        cfg = _config_from_args(args)
    except ValueError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        return _COMMANDS[args.command](cfg)
    except (FormatError, IncompatibleCheckpointError) as err:
        print(f"format error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except (TrainingFailure, SamplingFailure) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
