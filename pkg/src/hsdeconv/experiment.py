"""Experiment orchestration: config schema, scenario sweeps, reports.

A run executes degrade -> (pretrain, end-to-end train) -> infer -> eval over a
train scenario and a list of test scenarios, writing metric tables (CSV and
JSON), residual traces, per-stage timing, and a manifest of seeds and
versions. The test-scenario grid with a single train scenario doubles as the
kernel-mismatch generalization sweep; sweeping the noise level works the same
way with explicit scenario objects.
"""

import copy
import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .cube import SpectralCube, read_cube, write_cube
from .degrade import DegradationScenario, apply_degradation, make_kernel, scenario_preset
from .denoiser import build_denoiser, load_model, save_model
from .fixedpoint import FixedPointConfig, export_trace_csv, infer
from .metrics import evaluate
from .synth import synth_cubes
from .training import TrainConfig, infer_pnp, pretrain_denoiser, train_deq, train_du
from .util import derive_seed

KERNEL_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["gaussian", "circle", "square"]},
        "size": {"type": "integer", "minimum": 1},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "diameter": {"type": "number", "minimum": 1},
        "side": {"type": "integer", "minimum": 1},
    },
    "required": ["kind"],
}

SCENARIO_SCHEMA = {
    "oneOf": [
        {"enum": ["a", "b", "c", "d", "e"]},
        {
            "type": "object",
            "properties": {
                "kernel": KERNEL_SCHEMA,
                "noise_sigma": {"type": "number", "minimum": 0},
            },
            "required": ["kernel", "noise_sigma"],
        },
    ]
}

_TRAIN_PROPS = {
    "epochs": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr_schedule": {
        "type": "array",
        "items": {"type": "array", "prefixItems": [
            {"type": "integer", "minimum": 1}, {"type": "number", "exclusiveMinimum": 0}],
            "minItems": 2, "maxItems": 2},
    },
    "unroll_depth": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer"},
    "b0": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "train_b": {"type": "boolean"},
    "pretrain_noise_range": {"type": "array", "minItems": 2, "maxItems": 2},
    "pretrain_noise_scale": {"enum": ["8bit", "unit"]},
    "spectral_norm_iters": {"type": "integer", "minimum": 1},
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "out_dir": {"type": "string"},
        "jobs": {"type": "integer", "minimum": 1},
        "dtype": {"enum": ["f32", "f64"]},
        "dataset": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["synth", "files"]},
                "count": {"type": "integer", "minimum": 1},
                "train_count": {"type": "integer", "minimum": 0},
                "height": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "bands": {"type": "integer", "minimum": 1},
                "texture": {"enum": ["sinusoids", "bumps"]},
                "train": {"type": "array", "items": {"type": "string"}},
                "test": {"type": "array", "items": {"type": "string"}},
            },
            "required": ["kind"],
        },
        "train_scenario": SCENARIO_SCHEMA,
        "test_scenarios": {"type": "array", "items": SCENARIO_SCHEMA, "minItems": 1},
        "modes": {"type": "array", "items": {"enum": ["pnp", "du", "deq"]}},
        "model": {
            "type": "object",
            "properties": {
                "hidden": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "mu_target": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
                "path": {"type": ["string", "null"]},
            },
        },
        "pretrain": {"type": "object", "properties": _TRAIN_PROPS},
        "train": {"type": "object", "properties": _TRAIN_PROPS},
        "fixed_point": {
            "type": "object",
            "properties": {
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "minimum": 0},
                "anderson_m": {"type": "integer", "minimum": 0},
                "anderson_gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "anderson_ridge": {"type": "number", "minimum": 0},
            },
        },
        "eval_iters": {"type": "integer", "minimum": 1},
        "pnp": {
            "type": "object",
            "properties": {
                "b": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "iters": {"type": "integer", "minimum": 0},
            },
        },
    },
    "required": ["dataset", "out_dir"],
}


def default_config() -> dict:
    return {
        "seed": 0,
        "out_dir": "results",
        "jobs": 1,
        "dtype": "f32",
        "dataset": {"kind": "synth", "count": 30, "train_count": 20,
                    "height": 16, "width": 16, "bands": 4, "texture": "sinusoids"},
        "train_scenario": "a",
        "test_scenarios": ["a"],
        "modes": ["pnp", "du", "deq"],
        "model": {"hidden": 8, "layers": 6, "mu_target": 1.0, "seed": 0, "path": None},
        "pretrain": {"epochs": 40, "batch_size": 4, "lr_schedule": [[40, 1e-3]],
                     "seed": 1},
        "train": {"epochs": 30, "batch_size": 4, "lr_schedule": [[20, 1e-3], [10, 1e-4]],
                  "unroll_depth": 10, "seed": 2},
        "fixed_point": {"max_iters": 15, "tol": 1e-6, "anderson_m": 5,
                        "anderson_gamma": 1.0, "anderson_ridge": 1e-10},
        "eval_iters": 15,
        "pnp": {"b": None, "iters": 30},
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(raw: dict) -> dict:
    """Validate a user config against the schema and fill defaults."""
    jsonschema.validate(raw, CONFIG_SCHEMA)
    return _merge(default_config(), raw)


def resolve_scenario(spec, seed: int = 0) -> DegradationScenario:
    if isinstance(spec, str):
        return scenario_preset(spec, seed)
    kparams = dict(spec["kernel"])
    kind = kparams.pop("kind")
    return DegradationScenario(make_kernel(kind, **kparams), spec["noise_sigma"], seed)


def scenario_label(spec) -> str:
    if isinstance(spec, str):
        return spec
    k = spec["kernel"]
    parts = [k["kind"]] + [f"{v:g}" if isinstance(v, float) else str(v)
                           for key, v in sorted(k.items()) if key != "kind"]
    return "-".join(parts) + f"-s{spec['noise_sigma']:g}"


def _train_config(section: dict, fp_cfg: FixedPointConfig, mode: str) -> TrainConfig:
    kwargs = {k: v for k, v in section.items() if v is not None or k == "b0"}
    if "lr_schedule" in kwargs:
        kwargs["lr_schedule"] = tuple(tuple(p) for p in kwargs["lr_schedule"])
    if "pretrain_noise_range" in kwargs:
        kwargs["pretrain_noise_range"] = tuple(kwargs["pretrain_noise_range"])
    return TrainConfig(mode=mode, fixed_point=fp_cfg, **kwargs)


def _degrade_set(cubes, scenario_spec, master_seed, label):
    pairs = []
    for i, cube in enumerate(cubes):
        scen = resolve_scenario(scenario_spec, derive_seed(master_seed, "degrade", label, i))
        pairs.append((cube, apply_degradation(cube, scen)))
    return pairs


class StageTimer:
    def __init__(self):
        self.times = {}

    def run(self, name, fn):
        start = time.perf_counter()
        result = fn()
        self.times[name] = time.perf_counter() - start
        return result


def run_experiment(config: dict) -> dict:
    """Execute the full pipeline; returns the manifest dict.

    Any stage failure writes a partial-results manifest before re-raising.
    """
    cfg = load_config(config)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    timer = StageTimer()
    manifest = {
        "config": cfg,
        "versions": {"hsdeconv": __version__, "numpy": np.__version__},
        "stage_seconds": timer.times,
        "artifacts": [],
    }
    try:
        result = _run_stages(cfg, out, timer, manifest)
    except Exception as exc:
        manifest["failed_stage"] = getattr(exc, "_stage", "unknown")
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        raise
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return result


def _stage(name):
    def wrap(fn):
        try:
            return fn()
        except Exception as exc:
            exc._stage = name
            raise
    return wrap


def _run_stages(cfg, out, timer, manifest):
    ds = cfg["dataset"]
    master_seed = cfg["seed"]

    def load_dataset():
        if ds["kind"] == "synth":
            cubes = synth_cubes(ds["count"], ds["height"], ds["width"], ds["bands"],
                                ds.get("texture", "sinusoids"),
                                derive_seed(master_seed, "dataset"))
            n_train = ds["train_count"]
            return cubes[:n_train], cubes[n_train:]
        train = [read_cube(p) for p in ds.get("train", [])]
        test = [read_cube(p) for p in ds.get("test", [])]
        return train, test

    train_cubes, test_cubes = _stage("dataset")(lambda: timer.run("dataset", load_dataset))
    if not train_cubes or not test_cubes:
        err = ValueError("dataset is empty: need at least one train and one test cube")
        err._stage = "dataset"
        raise err

    mcfg = cfg["model"]
    fp_cfg = FixedPointConfig(**cfg["fixed_point"])
    needs_training = bool(cfg["modes"])

    def make_model():
        bands = train_cubes[0].bands
        sn_size = (train_cubes[0].height, train_cubes[0].width)
        if mcfg.get("path"):
            return load_model(mcfg["path"])
        return build_denoiser(bands, mcfg["hidden"], mcfg["layers"],
                              mu_target=mcfg["mu_target"], sn_size=sn_size,
                              seed=derive_seed(master_seed, "model", mcfg["seed"]))

    model0 = _stage("model")(lambda: timer.run("model", make_model))

    pretrained = model0
    if needs_training and not mcfg.get("path"):
        pre_cfg = _train_config(cfg["pretrain"], fp_cfg, "pretrain")
        pretrained = _stage("pretrain")(
            lambda: timer.run("pretrain", lambda: pretrain_denoiser(
                train_cubes, model0, pre_cfg).model))
        save_model(pretrained, out / "model_pretrained.weights")
        manifest["artifacts"].append("model_pretrained.weights")

    train_pairs = _stage("degrade-train")(
        lambda: timer.run("degrade_train", lambda: _degrade_set(
            train_cubes, cfg["train_scenario"], master_seed, "train")))
    kernel = resolve_scenario(cfg["train_scenario"]).kernel

    runs = {}
    if "deq" in cfg["modes"]:
        deq_cfg = _train_config(cfg["train"], fp_cfg, "deq")
        runs["deq"] = _stage("train-deq")(
            lambda: timer.run("train_deq", lambda: train_deq(
                train_pairs, kernel, copy.deepcopy(pretrained), deq_cfg)))
        save_model(runs["deq"].model, out / "model_deq.weights")
        manifest["artifacts"].append("model_deq.weights")
    if "du" in cfg["modes"]:
        du_cfg = _train_config(cfg["train"], fp_cfg, "du")
        runs["du"] = _stage("train-du")(
            lambda: timer.run("train_du", lambda: train_du(
                train_pairs, kernel, copy.deepcopy(pretrained), du_cfg)))
        save_model(runs["du"].model, out / "model_du.weights")
        manifest["artifacts"].append("model_du.weights")

    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)

    def eval_scenario(spec):
        label = scenario_label(spec)
        scen_kernel = resolve_scenario(spec).kernel
        test_pairs = _degrade_set(test_cubes, spec, master_seed, f"test-{label}")
        rows = []

        def add_row(mode, reports, seconds):
            rows.append({
                "scenario": label, "mode": mode,
                "psnr": float(np.mean([r.psnr for r in reports])),
                "ssim": float(np.mean([r.ssim for r in reports])),
                "rmse": float(np.mean([r.rmse for r in reports])),
                "ergas": float(np.mean([r.ergas for r in reports])),
                "seconds_per_cube": seconds / max(len(reports), 1),
            })

        add_row("degraded", [evaluate(y, x) for x, y in test_pairs], 0.0)
        unroll = _train_config(cfg["train"], fp_cfg, "du").unroll_depth
        mode_setups = {
            "pnp": lambda x, y: infer_pnp(y, scen_kernel, pretrained,
                                          b=cfg["pnp"]["b"], iters=cfg["pnp"]["iters"]),
            "du": lambda x, y: infer(y, scen_kernel, runs["du"].model, runs["du"].b,
                                     FixedPointConfig(max_iters=unroll, tol=0.0,
                                                      anderson_m=0)),
            "deq": lambda x, y: infer(y, scen_kernel, runs["deq"].model, runs["deq"].b,
                                      fp_cfg.replace(max_iters=cfg["eval_iters"])),
        }
        for mode in cfg["modes"]:
            reports = []
            start = time.perf_counter()
            for i, (x, y) in enumerate(test_pairs):
                restored, trace = mode_setups[mode](x, y)
                reports.append(evaluate(restored, x))
                if i == 0:
                    export_trace_csv(trace, trace_dir / f"{label}_{mode}.csv")
            add_row(mode, reports, time.perf_counter() - start)
        return rows

    def eval_all():
        specs = cfg["test_scenarios"]
        if cfg["jobs"] > 1:
            with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
                chunks = list(pool.map(eval_scenario, specs))
        else:
            chunks = [eval_scenario(s) for s in specs]
        return [row for chunk in chunks for row in chunk]

    rows = _stage("evaluate")(lambda: timer.run("evaluate", eval_all))

    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    (out / "results.json").write_text(json.dumps(rows, indent=2))
    (out / "timing.json").write_text(json.dumps(timer.times, indent=2))
    manifest["artifacts"] += ["results.csv", "results.json", "timing.json"]
    for mode, run in runs.items():
        manifest[f"{mode}_final_b"] = run.b
        manifest[f"{mode}_loss_history"] = run.losses
    return {"rows": rows, "runs": runs, "manifest": manifest,
            "pretrained": pretrained, "out_dir": str(out)}
