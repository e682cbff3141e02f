"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flag, missing file, malformed
list), 2 malformed or unrepresentable raster, 3 numeric failure (divergence,
non-finite output, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io as rio
from .context import run_ca_cspn
from .cost import CostReport, OpCounter, count_ops, expected_cost, expected_iterations, \
    expected_kernel, expected_memory
from .exceptions import CSPNError, FormatError, RangeError
from .fitbench import (SceneSpec, SyntheticScene, _edges, bench, bench_csv, fit, initial_depth,
                       make_scene, sample_sparse)
from .gradients import CSPNParams, gradcheck_instance
from .grid import AssemblyWeights, ObjectiveConfig, PropagationConfig, SparseObservations
from .propagation import run_cspn
from .resource import budget_round, run_ra_cspn_scheduled, select_configuration

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3
SCENE_FILES = ("gt.pgm", "sparse.pgm", "mask.pgm", "scene.json")
SPARSE_KEYS = ("density", "outlier_rate", "outlier_scale")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file or directory: {path}")
    return p


def _config(args) -> PropagationConfig:
    try:
        return PropagationConfig(tuple(args.kernels), tuple(args.iters))
    except CSPNError as exc:
        raise UsageError(str(exc))


def _numeric_failure(message: str) -> int:
    print(message, file=sys.stderr)
    return EXIT_NUMERIC


# subcommands ------------------------------------------------------------

def cmd_make_scene(args) -> int:
    spec_dict = json.loads(args.spec.read_text()) if args.spec else {}
    sampling = {k: spec_dict.pop(k) for k in SPARSE_KEYS if k in spec_dict}
    try:
        spec = SceneSpec.from_dict(spec_dict)
    except TypeError as exc:
        raise UsageError(f"bad scene spec: {exc}")
    scene = make_scene(spec, args.seed)
    obs = sample_sparse(scene, seed=args.seed, **sampling)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rio.write_depth_raster(out / "gt.pgm", scene.ground_truth)
    rio.write_depth_raster(out / "sparse.pgm", obs.values, obs.mask)
    rio.write_mask_raster(out / "mask.pgm", obs.mask)
    meta = dict(spec=spec.to_dict(), seed=args.seed, **sampling)
    rio.atomic_write_text(out / "scene.json", json.dumps(meta, indent=2) + "\n")
    return EXIT_OK


def load_scene(directory: Path) -> SyntheticScene:
    """Rebuild a scene written by ``make-scene`` (depths at raster precision)."""
    for name in SCENE_FILES[:2]:
        if not (directory / name).exists():
            raise UsageError(f"scene directory lacks {name}")
    gt, _ = rio.read_depth_raster(directory / "gt.pgm")
    values, mask = rio.read_depth_raster(directory / "sparse.pgm")
    if (directory / "mask.pgm").exists():
        mask = mask & rio.read_mask_raster(directory / "mask.pgm")
    seed, spec = 0, SceneSpec(height=gt.shape[0], width=gt.shape[1])
    if (directory / "scene.json").exists():
        meta = json.loads((directory / "scene.json").read_text())
        seed = int(meta.get("seed", 0))
        spec = SceneSpec.from_dict(meta.get("spec", spec.to_dict()))
    obs = SparseObservations(values, mask, np.where(mask, 4.0, 0.0))
    return SyntheticScene(gt, _edges(gt).astype(np.float64), obs, seed, spec)


def _read_affinity(path: Path, config: PropagationConfig, shape) -> np.ndarray:
    raw = rio.read_float_raster(path)
    if raw.shape[:2] != tuple(shape) or raw.shape[2] != config.n_neighbors:
        raise FormatError(f"affinity raster has shape {raw.shape}, expected "
                          f"{tuple(shape) + (config.n_neighbors,)}", 0)
    return raw


def cmd_propagate(args) -> int:
    config = _config(args)
    h0, h0_valid = rio.read_depth_raster(args.h0)
    raw = _read_affinity(args.affinity, config, h0.shape)
    obs = None
    if args.sparse is not None:
        values, mask = rio.read_depth_raster(args.sparse)
        if values.shape != h0.shape:
            raise FormatError("sparse raster does not match h0 size", 0)
        obs = SparseObservations(values, mask)
    weights, conf = AssemblyWeights.uniform(*h0.shape, config), None
    if args.weights is not None:
        weights, conf = rio.unpack_weights(rio.read_float_raster(args.weights), config)
        if weights.shape != h0.shape:
            raise FormatError("weights raster does not match h0 size", 0)
    counter = OpCounter()
    t0 = time.perf_counter()
    if args.mode == "cspn":
        out = run_cspn(h0, raw, obs, config.k_max, config.n_steps, counter)
        report = count_ops(counter)
        report.expected_latency = report.expected_memory = 1.0
        report.mean_kernel = report.mean_iters = 1.0
    elif args.mode == "ca":
        if obs is not None:
            obs = obs.with_confidence_logits(conf if conf is not None
                                             else np.where(obs.mask, 4.0, 0.0))
        out = run_ca_cspn(h0, raw, obs, weights, config, counter)
        report = count_ops(counter)
        report.expected_latency = expected_cost(weights, config)
        report.expected_memory = expected_memory(weights, config)
        report.mean_kernel = expected_kernel(weights, config)
        report.mean_iters = expected_iterations(weights, config)
    else:
        selection = select_configuration(weights, config)
        if args.budget_latency is not None:
            selection = budget_round(selection, config, args.budget_latency)
        out = run_ra_cspn_scheduled(h0, raw, obs, selection, config, counter)
        report = count_ops(counter, config)
    report.wall_time_s = time.perf_counter() - t0
    if not np.all(np.isfinite(out)):
        return _numeric_failure("propagation produced non-finite depths")
    out = np.asarray(out).reshape(h0.shape)
    rio.write_depth_raster(args.out, out, h0_valid & (out > 0))
    report_path = args.report or Path(args.out).with_suffix(".csv")
    rio.atomic_write_text(report_path, report.to_csv())
    return EXIT_OK


def cmd_fit(args) -> int:
    config = _config(args)
    scene = load_scene(args.scene)
    try:
        obj = ObjectiveConfig(eta2=args.eta2, budget_latency=args.budget_latency,
                              budget_memory=args.budget_memory)
    except CSPNError as exc:
        raise UsageError(str(exc))
    result = fit(scene, config, obj, epochs=args.epochs, step_size=args.step, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rio.atomic_write_text(out / "history.csv", result.history_csv())
    if result.failed:
        return _numeric_failure(f"fit diverged at epoch {result.diverged_epoch}")
    p = result.params
    rio.write_float_raster(out / "affinity.cspf", p.raw_affinity)
    rio.write_float_raster(out / "weights.cspf", rio.pack_weights(p.weights(), p.confidence_logits))
    rio.atomic_write_text(out / "config.json", json.dumps(
        dict(kernels=list(config.kernel_sizes), iters=list(config.iteration_checkpoints))) + "\n")
    final = result.final
    print(f"epochs {args.epochs}  rmse_mm {final['rmse_mm']:.3f}  e_cost {final['e_cost']:.5f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.size < 1 or args.eps <= 0:
        raise UsageError("--size must be positive and --eps > 0")
    inst = gradcheck_instance(args.seed, args.size)
    err = inst.check(epsilon=args.eps, samples=args.samples, seed=args.seed)
    print(f"max relative error {err:.3e}")
    return EXIT_OK if err < 1e-5 else EXIT_NUMERIC


def cmd_bench(args) -> int:
    scene = load_scene(args.scene)
    cfg_file = args.params / "config.json"
    if cfg_file.exists():
        cfg = json.loads(cfg_file.read_text())
        config = PropagationConfig(tuple(cfg["kernels"]), tuple(cfg["iters"]))
    else:
        config = _config(args)
    for name in ("affinity.cspf", "weights.cspf"):
        if not (args.params / name).exists():
            raise UsageError(f"params directory lacks {name}")
    raw = _read_affinity(args.params / "affinity.cspf", config, scene.shape)
    weights, conf = rio.unpack_weights(rio.read_float_raster(args.params / "weights.cspf"), config)
    if conf is None:
        conf = scene.sparse.confidence_logits
    params = CSPNParams(raw, weights.alpha_logits, weights.lambda_logits, conf)
    rows = bench(scene, params, config, budget_latency=args.budget_latency)
    rio.atomic_write_text(args.out, bench_csv(rows))
    return EXIT_OK


# parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cspnpp", description="Depth-completion propagation tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def propagation_flags(p):
        p.add_argument("--kernels", type=_int_list, default=(3, 5, 7))
        p.add_argument("--iters", type=_int_list, default=(3, 6, 9, 12))

    p = sub.add_parser("make-scene", help="render a synthetic scene and sparse samples")
    p.add_argument("--spec", type=_existing, default=None,
                   help="JSON scene description; may also set density, outlier_rate, outlier_scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("propagate", help="run one propagation variant")
    p.add_argument("--mode", choices=("cspn", "ca", "ra"), required=True)
    p.add_argument("--h0", type=_existing, required=True)
    p.add_argument("--affinity", type=_existing, required=True)
    p.add_argument("--sparse", type=_existing)
    p.add_argument("--weights", type=_existing)
    propagation_flags(p)
    p.add_argument("--budget-latency", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="cost report CSV (default: OUT with .csv suffix)")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("fit", help="fit per-pixel parameters by gradient descent")
    p.add_argument("--scene", type=_existing, required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--step", type=float, default=0.06)
    p.add_argument("--eta2", type=float, default=0.1)
    p.add_argument("--budget-latency", type=float)
    p.add_argument("--budget-memory", type=float)
    p.add_argument("--seed", type=int, default=0)
    propagation_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gradcheck", help="compare analytic and numerical gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="compare propagation variants on fitted parameters")
    p.add_argument("--scene", type=_existing, required=True)
    p.add_argument("--params", type=_existing, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget-latency", type=float, default=0.35)
    propagation_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (FloatingPointError, ArithmeticError) as exc:
        return _numeric_failure(f"error: {exc}")
    except CSPNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
