"""Training regimes for the prior and the end-to-end solver.

Four modes: prior pre-training on noisy/clean pairs, end-to-end equilibrium
training via the implicit gradient (loss gradient backsolved through the
fixed point), unrolled training through K explicit steps with exact reverse
accumulation, and plug-and-play inference with a pre-trained prior.

All per-sample losses are 0.5 * ||residual||_F^2 and batch losses are means
over the batch. The penalty b is trained through a softplus reparameterization
so it stays positive.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cube import SpectralCube
from .degrade import BlurKernel
from .denoiser import (
    DenoiserGrads, DenoiserModel, forward_raw, spectral_normalize,
    save_model, vjp_input_raw, vjp_params_raw,
)
from .fixedpoint import FixedPointConfig, FixedPointTrace, infer, solve
from .util import derive_seed, save_arrays
from . import hqs


class NonFiniteLoss(Exception):
    """Training loss became NaN/Inf."""


@dataclass
class TrainConfig:
    mode: str = "deq"                       # pretrain | deq | du | pnp
    epochs: int = 20
    batch_size: int = 4
    lr_schedule: tuple = ((20, 1e-3),)      # (epochs, rate) pairs, run in order
    unroll_depth: int = 10                  # K for the unrolled mode
    fixed_point: FixedPointConfig = field(default_factory=FixedPointConfig)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    b0: float = None                        # initial penalty; default 1.5 * mu_target
    train_b: bool = True                    # equilibrium mode only
    pretrain_noise_range: tuple = (0.2, 10.0)
    pretrain_noise_scale: str = "8bit"      # "8bit" divides by 255; "unit" uses raw
    spectral_norm_iters: int = 3            # power iterations after each update
    # deeper history/budget for the linear transpose-Jacobian backsolve; None
    # reuses the forward settings
    backward_anderson_m: int = None
    backward_max_iters: int = None
    clip_grad: float = None                 # global-norm gradient clip

    def __post_init__(self):
        if self.unroll_depth < 1:
            raise ValueError(f"unroll_depth must be >= 1, got {self.unroll_depth}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pretrain_noise_scale not in ("8bit", "unit"):
            raise ValueError(f"pretrain_noise_scale must be '8bit' or 'unit'")

    def noise_bounds(self) -> tuple:
        lo, hi = self.pretrain_noise_range
        if self.pretrain_noise_scale == "8bit":
            return lo / 255.0, hi / 255.0
        return lo, hi

    def expanded_schedule(self) -> list:
        """Flat list of per-epoch learning rates, truncated/padded to `epochs`."""
        rates = []
        for n, lr in self.lr_schedule:
            rates.extend([lr] * n)
        if len(rates) < self.epochs:
            rates.extend([rates[-1] if rates else 1e-3] * (self.epochs - len(rates)))
        return rates[: self.epochs]

    def backward_fixed_point(self) -> FixedPointConfig:
        kw = {}
        if self.backward_anderson_m is not None:
            kw["anderson_m"] = self.backward_anderson_m
        if self.backward_max_iters is not None:
            kw["max_iters"] = self.backward_max_iters
        return self.fixed_point.replace(**kw) if kw else self.fixed_point


@dataclass
class TrainingRun:
    losses: list                 # per-epoch mean training loss
    val_psnr: list               # per-epoch validation PSNR (empty if no val set)
    model: DenoiserModel
    b: float
    checkpoints: list = field(default_factory=list)
    backward_warnings: int = 0   # delta solves that hit max_iters unconverged


class Adam:
    """Adam over a flat list of ndarrays (0-d arrays allowed for scalars)."""

    def __init__(self, params: list, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def softplus_inv(y: float) -> float:
    if y <= 0:
        raise ValueError(f"softplus inverse needs y > 0, got {y}")
    return float(y + np.log(-np.expm1(-y)))


def sigmoid(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x)))


def _loss_cot(x_out: np.ndarray, x_ref: np.ndarray):
    """0.5*||out - ref||^2 and its cotangent (out - ref)."""
    r = x_out - x_ref
    return 0.5 * float(np.sum(r * r)), r


def _clip_grads(glist: list, limit) -> list:
    if limit is None:
        return glist
    total = np.sqrt(sum(float(np.sum(g * g)) for g in glist))
    if total > limit:
        factor = limit / total
        return [g * factor for g in glist]
    return glist


def _check_loss(value: float):
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    return value


def pretrain_denoiser(dataset: list, model: DenoiserModel, cfg: TrainConfig,
                      val_dataset: list = None, out_dir=None) -> TrainingRun:
    """Denoising pre-training: f(x + w) -> x with per-sample random noise level."""
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.noise_bounds()
    params = []
    for lyr in model.layers:
        params.extend([lyr.kernel, lyr.bias])
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    losses, val_hist, checkpoints = [], [], []
    for epoch, lr in enumerate(cfg.expanded_schedule()):
        order = rng.permutation(len(dataset))
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads = DenoiserGrads.zeros_like(model)
            batch_loss = 0.0
            for j in idx:
                clean = dataset[j].data
                sigma = rng.uniform(lo, hi)
                noisy = clean + rng.normal(0.0, sigma, size=clean.shape)
                out = forward_raw(model, noisy)
                loss, cot = _loss_cot(out, clean)
                batch_loss += loss
                grads.add_(vjp_params_raw(model, noisy, cot))
            grads.scale_(1.0 / len(idx))
            opt.step(_clip_grads(grads.as_list(), cfg.clip_grad), lr)
            spectral_normalize(model, cfg.spectral_norm_iters)
            epoch_loss += _check_loss(batch_loss / len(idx))
            batches += 1
        losses.append(epoch_loss / max(batches, 1))
        if val_dataset:
            val_hist.append(_val_denoise_psnr(model, val_dataset, cfg, epoch))
        if out_dir is not None:
            checkpoints.append(_save_checkpoint(out_dir, epoch, model, None, opt))
    return TrainingRun(losses, val_hist, model, b=0.0, checkpoints=checkpoints)


def _val_denoise_psnr(model, val_dataset, cfg, epoch):
    from .metrics import psnr_only

    rng = np.random.default_rng(derive_seed(cfg.seed, "pretrain-val", epoch))
    lo, hi = cfg.noise_bounds()
    vals = []
    for cube in val_dataset:
        noisy = cube.data + rng.normal(0.0, rng.uniform(lo, hi), size=cube.data.shape)
        vals.append(psnr_only(SpectralCube(forward_raw(model, noisy)), cube))
    return float(np.mean(vals))


@dataclass
class DeqGradResult:
    loss: float
    theta_grads: DenoiserGrads
    b_grad: float                # gradient in b itself (not the softplus argument)
    backward_converged: bool
    forward_trace: FixedPointTrace
    backward_trace: FixedPointTrace
    x_star: np.ndarray


def deq_loss_grad(model: DenoiserModel, b: float, x_clean: SpectralCube,
                  y: SpectralCube, kernel: BlurKernel,
                  cfg: FixedPointConfig,
                  backward_cfg: FixedPointConfig = None) -> DeqGradResult:
    """Implicit gradient of the equilibrium loss for one training pair.

    Three steps: take the loss cotangent at the solved fixed point, backsolve
    the transposed-Jacobian fixed-point equation for delta with the same
    engine, then contract delta with the parameter Jacobians (prior weights
    via their adjoints, penalty b analytically). The backsolve may run with
    its own (typically deeper) engine settings.
    """
    ctx = hqs.build_context(kernel, y, b)
    x_star, ftrace = solve(lambda arr: hqs.iterate_raw(arr, ctx, model), y.data, cfg)
    loss, cot = _loss_cot(x_star, x_clean.data)
    _check_loss(loss)

    def delta_step(d):
        return vjp_input_raw(model, x_star, hqs.dc_adjoint_raw(d, ctx)) + cot

    delta, btrace = solve(delta_step, cot, backward_cfg or cfg)

    gz = hqs.dc_adjoint_raw(delta, ctx)
    theta_grads = vjp_params_raw(model, x_star, gz)
    z = forward_raw(model, x_star)
    b_grad = float(np.sum(delta * hqs.dc_b_partial_raw(z, ctx)))
    return DeqGradResult(
        loss=loss,
        theta_grads=theta_grads,
        b_grad=b_grad,
        backward_converged=btrace.converged,
        forward_trace=ftrace,
        backward_trace=btrace,
        x_star=x_star,
    )


def du_loss_grad(model: DenoiserModel, b: float, x_clean: SpectralCube,
                 y: SpectralCube, kernel: BlurKernel, depth: int,
                 x0: np.ndarray = None, want_b_grad: bool = False):
    """Loss and exact reverse-accumulated gradient through `depth` explicit steps.

    Stores the intermediate iterates and chains the data-consistency adjoint
    with the prior's input/parameter adjoints at each step.
    """
    ctx = hqs.build_context(kernel, y, b)
    x = y.data.copy() if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    iterates = [x]
    for _ in range(depth):
        x = hqs.iterate_raw(x, ctx, model)
        iterates.append(x)
    loss, cot = _loss_cot(iterates[-1], x_clean.data)
    _check_loss(loss)

    grads = DenoiserGrads.zeros_like(model)
    b_grad = 0.0
    g = cot
    for k in range(depth - 1, -1, -1):
        gz = hqs.dc_adjoint_raw(g, ctx)
        grads.add_(vjp_params_raw(model, iterates[k], gz))
        if want_b_grad:
            z = forward_raw(model, iterates[k])
            b_grad += float(np.sum(g * hqs.dc_b_partial_raw(z, ctx)))
        g = vjp_input_raw(model, iterates[k], gz)
    return loss, grads, b_grad, iterates[-1]


def _prepare_pairs(pairs):
    for x_clean, y in pairs:
        if x_clean.shape != y.shape:
            raise ValueError(f"pair shapes differ: {x_clean.shape} vs {y.shape}")
    return list(pairs)


def _val_restore_psnr(model, b, kernel, val_pairs, cfg):
    from .metrics import psnr_only

    vals = []
    for x_clean, y in val_pairs:
        restored, _ = infer(y, kernel, model, b, cfg)
        vals.append(psnr_only(restored, x_clean))
    return float(np.mean(vals))


def train_deq(pairs: list, kernel: BlurKernel, model: DenoiserModel,
              cfg: TrainConfig, val_pairs: list = None, out_dir=None) -> TrainingRun:
    """End-to-end training of the prior weights and the penalty b."""
    pairs = _prepare_pairs(pairs)
    rng = np.random.default_rng(cfg.seed)
    b0 = cfg.b0 if cfg.b0 is not None else 1.5 * model.mu_target
    rho = np.array(softplus_inv(b0))
    params = []
    for lyr in model.layers:
        params.extend([lyr.kernel, lyr.bias])
    if cfg.train_b:
        params.append(rho)
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    losses, val_hist, checkpoints = [], [], []
    warnings = 0
    for epoch, lr in enumerate(cfg.expanded_schedule()):
        order = rng.permutation(len(pairs))
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads = DenoiserGrads.zeros_like(model)
            rho_grad = 0.0
            batch_loss = 0.0
            b = softplus(float(rho))
            for j in idx:
                x_clean, y = pairs[j]
                res = deq_loss_grad(model, b, x_clean, y, kernel, cfg.fixed_point,
                                    backward_cfg=cfg.backward_fixed_point())
                batch_loss += res.loss
                grads.add_(res.theta_grads)
                rho_grad += res.b_grad * sigmoid(float(rho))
                if not res.backward_converged:
                    warnings += 1
            grads.scale_(1.0 / len(idx))
            glist = grads.as_list()
            if cfg.train_b:
                glist = glist + [np.array(rho_grad / len(idx))]
            opt.step(_clip_grads(glist, cfg.clip_grad), lr)
            spectral_normalize(model, cfg.spectral_norm_iters)
            epoch_loss += _check_loss(batch_loss / len(idx))
            batches += 1
        losses.append(epoch_loss / max(batches, 1))
        if val_pairs:
            val_hist.append(_val_restore_psnr(model, softplus(float(rho)), kernel,
                                              val_pairs, cfg.fixed_point))
        if out_dir is not None:
            checkpoints.append(_save_checkpoint(out_dir, epoch, model,
                                                softplus(float(rho)), opt))
    return TrainingRun(losses, val_hist, model, b=softplus(float(rho)),
                       checkpoints=checkpoints, backward_warnings=warnings)


def train_du(pairs: list, kernel: BlurKernel, model: DenoiserModel,
             cfg: TrainConfig, val_pairs: list = None, out_dir=None) -> TrainingRun:
    """Unrolled training through cfg.unroll_depth explicit steps; b stays fixed."""
    pairs = _prepare_pairs(pairs)
    rng = np.random.default_rng(cfg.seed)
    b = cfg.b0 if cfg.b0 is not None else 1.5 * model.mu_target
    params = []
    for lyr in model.layers:
        params.extend([lyr.kernel, lyr.bias])
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    losses, val_hist, checkpoints = [], [], []
    for epoch, lr in enumerate(cfg.expanded_schedule()):
        order = rng.permutation(len(pairs))
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads = DenoiserGrads.zeros_like(model)
            batch_loss = 0.0
            for j in idx:
                x_clean, y = pairs[j]
                loss, g, _, _ = du_loss_grad(model, b, x_clean, y, kernel,
                                             cfg.unroll_depth)
                batch_loss += loss
                grads.add_(g)
            grads.scale_(1.0 / len(idx))
            opt.step(_clip_grads(grads.as_list(), cfg.clip_grad), lr)
            spectral_normalize(model, cfg.spectral_norm_iters)
            epoch_loss += _check_loss(batch_loss / len(idx))
            batches += 1
        losses.append(epoch_loss / max(batches, 1))
        if val_pairs:
            du_cfg = FixedPointConfig(max_iters=cfg.unroll_depth, tol=0.0, anderson_m=0)
            val_hist.append(_val_restore_psnr(model, b, kernel, val_pairs, du_cfg))
        if out_dir is not None:
            checkpoints.append(_save_checkpoint(out_dir, epoch, model, b, opt))
    return TrainingRun(losses, val_hist, model, b=b, checkpoints=checkpoints)


def infer_pnp(y: SpectralCube, kernel: BlurKernel, model: DenoiserModel,
              b: float = None, iters: int = 30, anderson_m: int = 0,
              tol: float = 1e-6):
    """Plug-and-play restoration: pre-trained prior, manually chosen penalty.

    Benchmark defaults: b = 1.5 * mu_target, 30 plain iterations. Zero
    iterations return the observation unchanged.
    """
    if b is None:
        b = 1.5 * model.mu_target
    if iters == 0:
        return y.copy(), FixedPointTrace()
    cfg = FixedPointConfig(max_iters=iters, tol=tol, anderson_m=anderson_m)
    return infer(y, kernel, model, b, cfg)


def _save_checkpoint(out_dir, epoch, model, b, opt) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / f"model_epoch{epoch:04d}.weights"
    save_model(model, model_path)
    moments_path = out / f"adam_epoch{epoch:04d}.blob"
    save_arrays(moments_path, [np.asarray(a, dtype=np.float64) for a in opt.m + opt.v])
    state = {"epoch": epoch, "b": b, "moments_path": moments_path.name,
             "model_path": model_path.name, "adam_t": opt.t}
    state_path = out / f"state_epoch{epoch:04d}.json"
    state_path.write_text(json.dumps(state, indent=2))
    return {"model": str(model_path), "state": str(state_path)}
