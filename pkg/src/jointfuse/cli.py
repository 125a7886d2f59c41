"""Command-line surface: degrade, fuse, train, eval, verify, ablate-t.

Every run writes a run.txt manifest into --out-dir echoing the fully
resolved configuration (defaults included), so any artifact can be
regenerated from the manifest alone. Exit codes: 0 success, 1 usage error,
2 numerical failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .denoiser import OracleDenoiser, TinyDenoiser, load_params, save_params
from .joint import JointOperator, JointState, check_mp_conditions
from .metrics import q_abf, q_mi, ssim
from .operators import ConvergenceError, OpSpecError, parse_opspec, source_dims_for_spec
from .pgm import PgmFormatError, load_pgm, save_pgm
from .rng import SeededRng
from .sampler import FusionConfig, run_fusion
from .synth import build_dataset
from .training import AdamState, LossHyper, NumericalError, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"subcommand = {subcommand}"]
    for key in sorted(vars(args)):
        if key in ("func", "subcommand"):
            continue
        lines.append(f"{key} = {getattr(args, key)}")
    (out_dir / "run.txt").write_text("\n".join(lines) + "\n")


def _load_observation_pair(args):
    y1 = load_pgm(args.y1)
    y2 = load_pgm(args.y2)
    dims1 = source_dims_for_spec(args.a1, y1.shape)
    dims2 = source_dims_for_spec(args.a2, y2.shape)
    if dims1 != dims2:
        raise ValueError(
            f"observations imply different clean dims: {dims1} vs {dims2}")
    a1 = parse_opspec(args.a1, dims1)
    a2 = parse_opspec(args.a2, dims2)
    return y1, y2, a1, a2


def _make_denoiser(spec: str, a1, a2, y1, y2, args):
    if spec == "oracle":
        if args.clean1 and args.clean2:
            clean1 = load_pgm(args.clean1)
            clean2 = load_pgm(args.clean2)
        else:
            clean1 = a1.apply_pinv(y1)
            clean2 = a2.apply_pinv(y2)
        w1 = float(args.w1)
        fused = w1 * clean1 + (1.0 - w1) * clean2
        return OracleDenoiser(JointState(clean1, clean2, fused), w1)
    if spec.startswith("tiny:"):
        return TinyDenoiser(load_params(spec[len("tiny:"):]))
    raise ValueError(f"unknown denoiser {spec!r} (want 'oracle' or 'tiny:params.bin')")


def _fusion_config(args) -> FusionConfig:
    return FusionConfig(steps=args.T, sigma_y=args.sigma_y, seed=args.seed,
                        ddim_normalize=args.ddim_normalize)


def cmd_degrade(args) -> int:
    out_dir = Path(args.out_dir)
    img = load_pgm(args.input)
    op = parse_opspec(args.op, img.shape)
    rng = SeededRng(args.seed)
    from .image import gaussian_noise

    degraded = gaussian_noise(op.apply(img), args.sigma, rng)
    _write_manifest(out_dir, "degrade", args)
    save_pgm(degraded, out_dir / args.out)
    return EXIT_OK


def cmd_fuse(args) -> int:
    out_dir = Path(args.out_dir)
    y1, y2, a1, a2 = _load_observation_pair(args)
    den = _make_denoiser(args.denoiser, a1, a2, y1, y2, args)
    cfg = _fusion_config(args)
    result = run_fusion(y1, y2, a1, a2, den, cfg, keep_trace=bool(args.trace))
    _write_manifest(out_dir, "fuse", args)
    save_pgm(result.fused, out_dir / args.out)
    if args.trace:
        trace_dir = out_dir / args.trace
        trace_dir.mkdir(parents=True, exist_ok=True)
        for idx, state in enumerate(result.trace):
            step = cfg.steps - idx
            save_pgm(np.clip(state.src1, 0, 1), trace_dir / f"step{step}_src1.pgm")
            save_pgm(np.clip(state.src2, 0, 1), trace_dir / f"step{step}_src2.pgm")
            save_pgm(np.clip(state.fused, 0, 1), trace_dir / f"step{step}_fused.pgm")
    return EXIT_OK


def cmd_train(args) -> int:
    out_dir = Path(args.out_dir)
    dataset = build_dataset(args.pairs, args.size, args.a1, args.a2,
                            args.sigma, args.seed)
    hyper = LossHyper(lam=args.lam, gamma=args.gamma, phi=args.phi, task=args.task)
    adam = AdamState(lr=args.lr)
    cfg = FusionConfig(steps=args.T, sigma_y=args.sigma, seed=args.seed)
    result = train([p.as_train_tuple() for p in dataset], hyper,
                   epochs=args.epochs, batch=args.batch, adam=adam,
                   seed=args.seed, cfg=cfg)
    _write_manifest(out_dir, "train", args)
    save_params(result.params, out_dir / "params.bin")
    with open(out_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for idx, value in enumerate(result.losses):
            writer.writerow([idx, f"{value:.10g}"])
    return EXIT_OK


def cmd_eval(args) -> int:
    out_dir = Path(args.out_dir)
    rows = []
    for triple in args.triple:
        parts = triple.split(",")
        if len(parts) != 3:
            raise ValueError(f"--triple wants src1,src2,fused; got {triple!r}")
        src1 = load_pgm(parts[0])
        src2 = load_pgm(parts[1])
        fused = load_pgm(parts[2])
        rows.append([
            parts[2],
            f"{q_mi(src1, src2, fused):.6f}",
            f"{q_abf(src1, src2, fused):.6f}",
            f"{ssim(fused, src1):.6f}",
            f"{ssim(fused, src2):.6f}",
        ])
    _write_manifest(out_dir, "eval", args)
    with open(out_dir / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "q_mi", "q_abf", "ssim_src1", "ssim_src2"])
        writer.writerows(rows)
    return EXIT_OK


def cmd_verify(args) -> int:
    out_dir = Path(args.out_dir)
    height, _, width = args.size.partition("x")
    dims = (int(height), int(width))
    a1 = parse_opspec(args.a1, dims)
    a2 = parse_opspec(args.a2, dims)
    joint = JointOperator(a1, a2, np.full(dims, args.w1))
    report = check_mp_conditions(joint, tol=args.tol)
    _write_manifest(out_dir, "verify", args)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    (out_dir / "verify.txt").write_text(text)
    if not (report.passed(1) and report.passed(2)):
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate_t(args) -> int:
    out_dir = Path(args.out_dir)
    y1, y2, a1, a2 = _load_observation_pair(args)
    den = _make_denoiser(args.denoiser, a1, a2, y1, y2, args)
    ref1 = load_pgm(args.clean1) if args.clean1 else a1.apply_pinv(y1)
    ref2 = load_pgm(args.clean2) if args.clean2 else a2.apply_pinv(y2)
    ref1 = np.clip(ref1, 0.0, 1.0)
    ref2 = np.clip(ref2, 0.0, 1.0)
    rows = []
    for steps in range(1, 6):
        cfg = FusionConfig(steps=steps, sigma_y=args.sigma_y, seed=args.seed)
        started = time.perf_counter()
        result = run_fusion(y1, y2, a1, a2, den, cfg)
        wall_ms = (time.perf_counter() - started) * 1000.0
        fused = result.fused
        rows.append([
            steps,
            f"{q_mi(ref1, ref2, fused):.6f}",
            f"{q_abf(ref1, ref2, fused):.6f}",
            f"{0.5 * (ssim(fused, ref1) + ssim(fused, ref2)):.6f}",
            f"{wall_ms:.3f}",
        ])
    _write_manifest(out_dir, "ablate-t", args)
    with open(out_dir / "ablate_t.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["T", "q_mi", "q_abf", "ssim", "wall_ms"])
        writer.writerows(rows)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    p.add_argument("--out-dir", default=".", help="directory for artifacts + run.txt")


def _add_fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--y1", required=True, help="first degraded observation (PGM)")
    p.add_argument("--y2", required=True, help="second degraded observation (PGM)")
    p.add_argument("--a1", default="id", help="operator spec for the first source")
    p.add_argument("--a2", default="id", help="operator spec for the second source")
    p.add_argument("--denoiser", default="oracle",
                   help="'oracle' or 'tiny:params.bin'")
    p.add_argument("--sigma-y", dest="sigma_y", type=float, default=0.0,
                   help="observation noise level for correction scaling")
    p.add_argument("--w1", type=float, default=0.5,
                   help="constant weight map for the oracle denoiser")
    p.add_argument("--clean1", default=None, help="optional clean reference (PGM)")
    p.add_argument("--clean2", default=None, help="optional clean reference (PGM)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jointfuse",
                     description="projected-diffusion fusion of degraded image pairs")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("degrade", parents=[], help="apply an operator plus noise")
    p.add_argument("--input", required=True)
    p.add_argument("--op", default="id", help="operator spec, e.g. blur:sigma=1.0+down:s=2")
    p.add_argument("--sigma", type=float, default=0.0, help="additive noise std")
    p.add_argument("--out", default="degraded.pgm")
    _add_common(p)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("fuse", help="run the corrected diffusion fusion loop")
    _add_fusion_flags(p)
    p.add_argument("--T", type=int, default=3, help="diffusion steps")
    p.add_argument("--ddim-normalize", action="store_true",
                   help="use the textbook step-0 reconstruction (divide by sqrt(alpha_bar))")
    p.add_argument("--out", default="fused.pgm")
    p.add_argument("--trace", default=None,
                   help="subdirectory for per-step state snapshots")
    _add_common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="train the tiny denoiser on synthetic pairs")
    p.add_argument("--task", choices=["ir_vis", "medical"], default="ir_vis")
    p.add_argument("--pairs", type=int, default=16, help="synthetic pairs in the dataset")
    p.add_argument("--size", type=int, default=32, help="pair side length")
    p.add_argument("--a1", default="blur")
    p.add_argument("--a2", default="blur+down:s=2")
    p.add_argument("--sigma", type=float, default=0.05, help="observation noise std")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lam", type=float, default=10.0)
    p.add_argument("--gamma", type=float, default=20.0)
    p.add_argument("--phi", type=float, default=10.0)
    p.add_argument("--T", type=int, default=3)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score fused outputs against their sources")
    p.add_argument("--triple", action="append", required=True,
                   metavar="SRC1,SRC2,FUSED", help="repeatable image triple")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="check Moore-Penrose conditions of the joint operator")
    p.add_argument("--a1", default="id")
    p.add_argument("--a2", default="id")
    p.add_argument("--size", default="8x8", help="clean-domain dims, HxW")
    p.add_argument("--w1", type=float, default=0.5)
    p.add_argument("--tol", type=float, default=1e-8)
    _add_common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate-t", help="sweep T=1..5 and record metrics plus wall time")
    _add_fusion_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate_t)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OpSpecError, PgmFormatError, FileNotFoundError, ValueError) as exc:
        print(f"jointfuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ConvergenceError, FloatingPointError) as exc:
        print(f"jointfuse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
