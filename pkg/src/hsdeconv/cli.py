"""Command-line surface.

Subcommands: synth, degrade, pretrain, train-deq, train-du, infer, infer-pnp,
eval, analyze, fig4, experiment. Exit codes: 0 ok, 2 config/usage error,
3 numeric failure.

Kernel specs on the command line are compact strings: "gaussian:9:2.0",
"circle:7", "square:5".
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cube import (
    CubeError, MalformedHeader, NonRealResult, read_cube, write_cube,
)
from .degrade import (
    BadKernelParams, BlurKernel, DegradationScenario, KernelTooLarge,
    UnknownScenario, apply_degradation, make_kernel, scenario_preset,
)
from .denoiser import build_denoiser, load_model, save_model
from .convergence import contraction_report, convergence_sweep
from .experiment import (
    default_config, load_config, resolve_scenario, run_experiment, _train_config,
)
from .fixedpoint import FixedPointConfig, NonFiniteIterate, export_trace_csv, infer
from .metrics import evaluate
from .synth import synth_dataset
from .training import NonFiniteLoss, infer_pnp, pretrain_denoiser, train_deq, train_du
from .util import derive_seed

import jsonschema

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_CONFIG_ERRORS = (
    UnknownScenario, BadKernelParams, KernelTooLarge, MalformedHeader,
    CubeError, FileNotFoundError, jsonschema.ValidationError, ValueError, KeyError,
)
_NUMERIC_ERRORS = (NonFiniteIterate, NonFiniteLoss, NonRealResult)


def parse_kernel(spec: str) -> BlurKernel:
    parts = spec.split(":")
    kind = parts[0].lower()
    if kind == "gaussian":
        return make_kernel("gaussian", size=int(parts[1]), sigma=float(parts[2]))
    if kind == "circle":
        return make_kernel("circle", diameter=float(parts[1]))
    if kind == "square":
        return make_kernel("square", side=int(parts[1]))
    raise BadKernelParams(f"unknown kernel spec {spec!r}")


def parse_size(spec: str) -> tuple:
    m, n = spec.lower().split("x")
    return int(m), int(n)


def _dtype(args) -> str:
    return "f64" if args.f64 else "f32"


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def cmd_synth(args):
    paths = synth_dataset(args.out, args.count, *parse_size(args.size), args.bands,
                          texture=args.texture, seed=args.seed, dtype=_dtype(args))
    print(f"wrote {len(paths)} cubes to {args.out}")


def cmd_degrade(args):
    cube = read_cube(args.infile)
    scen = scenario_preset(args.scenario, args.seed)
    write_cube(apply_degradation(cube, scen), args.out, dtype=_dtype(args))
    print(f"degraded {args.infile} with scenario {args.scenario} -> {args.out}")


def _load_train_inputs(cfg: dict):
    from .experiment import _degrade_set
    from .synth import synth_cubes

    ds = cfg["dataset"]
    if ds["kind"] == "synth":
        cubes = synth_cubes(ds["count"], ds["height"], ds["width"], ds["bands"],
                            ds.get("texture", "sinusoids"),
                            derive_seed(cfg["seed"], "dataset"))
        cubes = cubes[: ds.get("train_count", len(cubes))]
    else:
        cubes = [read_cube(p) for p in ds["train"]]
    return cubes


def cmd_pretrain(args):
    cfg = load_config(_read_json(args.config))
    cubes = _load_train_inputs(cfg)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg["model"]
    model = build_denoiser(cubes[0].bands, mcfg["hidden"], mcfg["layers"],
                           mu_target=mcfg["mu_target"],
                           sn_size=(cubes[0].height, cubes[0].width),
                           seed=derive_seed(cfg["seed"], "model", mcfg["seed"]))
    fp = FixedPointConfig(**cfg["fixed_point"])
    run = pretrain_denoiser(cubes, model, _train_config(cfg["pretrain"], fp, "pretrain"))
    path = save_model(run.model, out / "model_pretrained.weights")
    print(f"pretrained model -> {path} (final loss {run.losses[-1]:.6g})")


def _cmd_train(args, mode):
    from .experiment import _degrade_set

    cfg = load_config(_read_json(args.config))
    cubes = _load_train_inputs(cfg)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    model_path = cfg["model"].get("path")
    if not model_path:
        raise ValueError(f"train-{mode} needs model.path (a pretrained weights file)")
    model = load_model(model_path)
    pairs = _degrade_set(cubes, cfg["train_scenario"], cfg["seed"], "train")
    kernel = resolve_scenario(cfg["train_scenario"]).kernel
    fp = FixedPointConfig(**cfg["fixed_point"])
    tcfg = _train_config(cfg["train"], fp, mode)
    train_fn = train_deq if mode == "deq" else train_du
    run = train_fn(pairs, kernel, model, tcfg, out_dir=out / f"checkpoints_{mode}")
    path = save_model(run.model, out / f"model_{mode}.weights")
    print(f"trained {mode} model -> {path} (final loss {run.losses[-1]:.6g}, b {run.b:.4g})")


def cmd_infer(args):
    y = read_cube(args.infile)
    model = load_model(args.model)
    kernel = parse_kernel(args.kernel)
    cfg = FixedPointConfig(max_iters=args.iters, tol=args.tol, anderson_m=args.anderson_m)
    restored, trace = infer(y, kernel, model, args.b, cfg)
    write_cube(restored, args.out, dtype=_dtype(args))
    if args.trace:
        export_trace_csv(trace, args.trace)
    print(f"restored -> {args.out} ({trace.iters_used} iterations, "
          f"final residual {trace.residuals[-1]:.3e})")


def cmd_infer_pnp(args):
    y = read_cube(args.infile)
    model = load_model(args.model)
    kernel = parse_kernel(args.kernel)
    restored, trace = infer_pnp(y, kernel, model, b=args.b, iters=args.iters,
                                anderson_m=args.anderson_m)
    write_cube(restored, args.out, dtype=_dtype(args))
    if args.trace and trace.residuals:
        export_trace_csv(trace, args.trace)
    print(f"restored (pnp) -> {args.out} ({trace.iters_used} iterations)")


def cmd_eval(args):
    report = evaluate(read_cube(args.restored), read_cube(args.truth))
    if args.csv:
        print("rmse,psnr,ssim,ergas")
        print(f"{report.rmse:.6g},{report.psnr:.6g},{report.ssim:.6g},{report.ergas:.6g}")
    else:
        print(json.dumps(report.to_dict(), indent=2))


def cmd_analyze(args):
    model = load_model(args.model)
    m, n = parse_size(args.size)
    report = contraction_report(parse_kernel(args.kernel), m, n, model, args.b,
                                trials=args.trials, seed=args.seed)
    print(json.dumps(report.to_dict(), indent=2))


def cmd_fig4(args):
    cfg = _read_json(args.config)
    seed = cfg.get("seed", 0)
    m, n = cfg.get("height", 16), cfg.get("width", 16)
    bands = cfg.get("bands", 4)
    clean = _load_sweep_cube(cfg, m, n, bands, seed)
    scen = resolve_scenario(cfg.get("scenario", "b"), derive_seed(seed, "sweep-noise"))
    models = {}
    for mu in cfg.get("mu_values", [1.0, 0.075]):
        spec = cfg.get("models", {}).get(str(mu))
        if spec:
            models[mu] = load_model(spec)
        else:
            models[mu] = build_denoiser(bands, cfg.get("hidden", 8),
                                        cfg.get("layers", 6), mu_target=mu,
                                        sn_size=(m, n),
                                        seed=derive_seed(seed, "sweep-model", mu))
    results = convergence_sweep(clean, scen, models,
                                b_factors=tuple(cfg.get("b_factors", (0.01, 0.5, 1.5))),
                                iters=cfg.get("iters", 100),
                                out_dir=cfg.get("out_dir", "sweep_traces"))
    for (mu, factor), cell in sorted(results.items()):
        tr = cell["trace"]
        status = "diverged" if cell["diverged"] else f"final {tr.residuals[-1]:.3e}"
        print(f"mu={mu:g} b={cell['b']:g}: {tr.iters_used} iterations, {status}")


def _load_sweep_cube(cfg, m, n, bands, seed):
    from .synth import synth_cube

    if cfg.get("cube"):
        return read_cube(cfg["cube"])
    return synth_cube(m, n, bands, derive_seed(seed, "sweep-cube"))


def cmd_experiment(args):
    if args.print_config:
        print(json.dumps(default_config(), indent=2))
        return
    if not args.config:
        raise ValueError("experiment needs --config (or --print-config)")
    result = run_experiment(_read_json(args.config))
    for row in result["rows"]:
        print(f"{row['scenario']:>12} {row['mode']:>9}: psnr {row['psnr']:.2f} dB, "
              f"ssim {row['ssim']:.4f}, rmse {row['rmse']:.3f}, ergas {row['ergas']:.2f}")
    print(f"report written to {result['out_dir']}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsdeconv",
        description="Hyperspectral deconvolution via an equilibrium HQS solver.",
    )
    parser.add_argument("--seed", type=int, default=0, help="master RNG seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel scenario cells")
    parser.add_argument("--f64", action="store_true", help="write f64 cube payloads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cube dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", default="16x16", help="MxN spatial size")
    p.add_argument("--bands", type=int, default=4)
    p.add_argument("--texture", default="sinusoids", choices=["sinusoids", "bumps"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", help="apply a named blur/noise scenario")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("pretrain", help="pre-train the prior as a denoiser")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-deq", help="end-to-end equilibrium training")
    p.add_argument("--config", required=True)
    p.set_defaults(func=lambda a: _cmd_train(a, "deq"))

    p = sub.add_parser("train-du", help="unrolled training through K steps")
    p.add_argument("--config", required=True)
    p.set_defaults(func=lambda a: _cmd_train(a, "du"))

    for name, fn in (("infer", cmd_infer), ("infer-pnp", cmd_infer_pnp)):
        p = sub.add_parser(name, help=f"restore a degraded cube ({name})")
        p.add_argument("--in", dest="infile", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--kernel", required=True, help="e.g. gaussian:9:2.0")
        p.add_argument("--b", type=float, default=1.5)
        p.add_argument("--iters", type=int, default=15 if name == "infer" else 30)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--anderson-m", type=int, default=5 if name == "infer" else 0)
        p.add_argument("--out", required=True)
        p.add_argument("--trace", help="optional residual CSV path")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="metrics between truth and restored cubes")
    p.add_argument("--truth", required=True)
    p.add_argument("--restored", required=True)
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true", default=True)
    fmt.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="contraction report for a kernel/model/penalty")
    p.add_argument("--kernel", required=True)
    p.add_argument("--size", required=True, help="MxN")
    p.add_argument("--model", required=True)
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fig4", help="convergence regime sweep (residual trace CSVs)")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_fig4)

    p = sub.add_parser("experiment", help="full orchestrated benchmark run")
    p.add_argument("--config")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
