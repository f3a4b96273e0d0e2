"""Learnable convolutional prior with hand-written adjoints.

The network is a stack of 3x3 circularly-padded convolutions with ReLU between
layers (none after the last). Each layer's operator norm is controlled by
power iteration on the actual convolution operator at a fixed spatial size:
stored weights can be rescaled in place (spectral_normalize), and the forward
pass additionally applies an on-the-fly factor min(1, cap/sigma) computed from
the persisted power-iteration vectors, so the cap holds between rescales.
Gradients treat the power-iteration vectors as constants.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cube import SpectralCube

_SIGMA_FLOOR = 1e-12


class ShapeMismatch(Exception):
    """Input shape incompatible with the model or cotangent."""


def conv3_circ(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """3x3 circular cross-correlation: kernel (out,in,3,3), x (in,M,N) -> (out,M,N)."""
    out = np.zeros((kernel.shape[0],) + x.shape[1:])
    for a in range(3):
        for b in range(3):
            shifted = np.roll(x, (-(a - 1), -(b - 1)), axis=(1, 2))
            out += np.einsum("oi,imn->omn", kernel[:, :, a, b], shifted)
    return out


def conv3_circ_adj_input(kernel: np.ndarray, cot: np.ndarray) -> np.ndarray:
    """Adjoint of conv3_circ in its input: cot (out,M,N) -> (in,M,N)."""
    out = np.zeros((kernel.shape[1],) + cot.shape[1:])
    for a in range(3):
        for b in range(3):
            shifted = np.roll(cot, (a - 1, b - 1), axis=(1, 2))
            out += np.einsum("oi,omn->imn", kernel[:, :, a, b], shifted)
    return out


def conv3_circ_adj_kernel(cot: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Adjoint of conv3_circ in its kernel: cot (out,M,N), x (in,M,N) -> (out,in,3,3)."""
    grad = np.zeros((cot.shape[0], x.shape[0], 3, 3))
    for a in range(3):
        for b in range(3):
            shifted = np.roll(x, (-(a - 1), -(b - 1)), axis=(1, 2))
            grad[:, :, a, b] = np.einsum("omn,imn->oi", cot, shifted)
    return grad


@dataclass
class ConvLayer:
    kernel: np.ndarray          # (out, in, 3, 3)
    bias: np.ndarray            # (out,)
    cap: float = 1.0            # operator-norm ceiling
    u: np.ndarray = None        # (out, M, N) power-iteration left vector
    v: np.ndarray = None        # (in, M, N) power-iteration right vector
    sn_p: np.ndarray = None     # (out, in, 3, 3): sigma = sum(kernel * sn_p)

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def sigma(self) -> float:
        """Operator-norm estimate from the persisted vectors; linear in the kernel."""
        if self.sn_p is None:
            return 0.0
        return float(np.sum(self.kernel * self.sn_p))

    def scale(self) -> float:
        if self.sn_p is None:
            return 1.0
        return min(1.0, self.cap / max(self.sigma(), _SIGMA_FLOOR))


@dataclass
class DenoiserModel:
    """Channel path bands -> hidden ... hidden -> bands; ReLU between layers."""

    layers: list
    mu_target: float = 1.0      # intended end-to-end Lipschitz ceiling
    sn_height: int = 16
    sn_width: int = 16

    @property
    def bands(self) -> int:
        return self.layers[0].in_channels

    def kernels(self) -> list:
        return [lyr.kernel for lyr in self.layers]

    def biases(self) -> list:
        return [lyr.bias for lyr in self.layers]


@dataclass
class DenoiserGrads:
    """Per-layer kernel and bias cotangents, same structure as the model."""

    kernels: list
    biases: list

    def as_list(self) -> list:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend([k, b])
        return out

    @staticmethod
    def zeros_like(model: DenoiserModel) -> "DenoiserGrads":
        return DenoiserGrads(
            [np.zeros_like(k) for k in model.kernels()],
            [np.zeros_like(b) for b in model.biases()],
        )

    def add_(self, other: "DenoiserGrads", factor: float = 1.0):
        for mine, theirs in zip(self.as_list(), other.as_list()):
            mine += factor * theirs
        return self

    def scale_(self, factor: float):
        for arr in self.as_list():
            arr *= factor
        return self


def _top_mode_seed(kernel: np.ndarray, height: int, width: int) -> np.ndarray:
    """Exact top left singular vector of the circular conv operator.

    The operator is block-diagonal over spatial frequencies with (out, in)
    channel-mixing blocks, so the norm is the max per-frequency singular
    value. Singular vectors are frequency-localized, which makes a stale
    power-iteration start near-orthogonal to the new top vector whenever the
    argmax frequency moves; seeding from the exact mode avoids that stall.
    """
    m, n = height, width
    rows = np.arange(m)
    cols = np.arange(n)
    blocks = np.zeros((m, n) + kernel.shape[:2], dtype=np.complex128)
    for a in range(3):
        for b in range(3):
            phase = (np.exp(2j * np.pi * rows * (a - 1) / m)[:, None]
                     * np.exp(2j * np.pi * cols * (b - 1) / n)[None, :])
            blocks += phase[:, :, None, None] * kernel[None, None, :, :, a, b]
    left, svals, _ = np.linalg.svd(blocks)
    wr, wc = np.unravel_index(np.argmax(svals[:, :, 0]), (m, n))
    out_dir = left[wr, wc, :, 0]
    mode = np.exp(2j * np.pi * (wr * rows[:, None] / m + wc * cols[None, :] / n))
    seed = (out_dir[:, None, None] * mode[None, :, :]).real
    norm = np.linalg.norm(seed)
    if norm < 1e-9:
        seed = (out_dir[:, None, None] * mode[None, :, :]).imag
        norm = np.linalg.norm(seed)
    return seed / max(norm, _SIGMA_FLOOR)


def _refresh_layer(layer: ConvLayer, iters: int):
    """Power iteration on the convolution operator; updates (u, v, sn_p) in place."""
    m, n = layer.u.shape[1], layer.u.shape[2]
    u = _top_mode_seed(layer.kernel, m, n)
    for _ in range(iters):
        v = conv3_circ_adj_input(layer.kernel, u)
        v = v / max(np.linalg.norm(v), _SIGMA_FLOOR)
        w = conv3_circ(layer.kernel, v)
        u = w / max(np.linalg.norm(w), _SIGMA_FLOOR)
    layer.u, layer.v = u, v
    layer.sn_p = conv3_circ_adj_kernel(u, v)


def spectral_normalize(model: DenoiserModel, power_iters: int = 10) -> DenoiserModel:
    """Re-estimate each layer's operator norm and rescale weights to its cap."""
    if power_iters < 1:
        raise ValueError(f"power_iters must be >= 1, got {power_iters}")
    for layer in model.layers:
        _refresh_layer(layer, power_iters)
        factor = min(1.0, layer.cap / max(layer.sigma(), _SIGMA_FLOOR))
        if factor != 1.0:
            layer.kernel *= factor
    return model


def build_denoiser(
    bands: int,
    hidden: int = 154,
    n_layers: int = 6,
    mu_target: float = 1.0,
    sn_size: tuple = (16, 16),
    seed: int = 0,
    init_power_iters: int = 20,
    init: str = "identity",
) -> DenoiserModel:
    """Initialize the prior and run one normalization pass.

    Per-layer caps are mu_target**(1/n_layers) so the composition bound over
    the stack equals mu_target. The "identity" init adds a center-tap
    passthrough on the channel diagonal over a small uniform component: a
    plain fan-in uniform stack ("uniform") starts with composite gain near
    zero under the norm caps and trains far too slowly at small widths.
    """
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if init not in ("identity", "uniform"):
        raise ValueError(f"init must be 'identity' or 'uniform', got {init!r}")
    widths = [bands] + [hidden] * (n_layers - 1) + [bands]
    if n_layers == 1:
        widths = [bands, bands]
    cap = mu_target ** (1.0 / n_layers)
    rng = np.random.default_rng(seed)
    m, n = sn_size
    layers = []
    for i in range(n_layers):
        cin, cout = widths[i], widths[i + 1]
        bound = 1.0 / np.sqrt(cin * 9)
        if init == "identity":
            # keep the noise norm well under the passthrough's so the init
            # normalization barely scales the stack
            kernel = rng.uniform(-0.05 * bound, 0.05 * bound, size=(cout, cin, 3, 3))
            for o in range(min(cin, cout)):
                kernel[o, o, 1, 1] += 1.0
        else:
            kernel = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
        layers.append(
            ConvLayer(
                kernel=kernel,
                bias=np.zeros(cout),
                cap=cap,
                u=rng.standard_normal((cout, m, n)),
                v=rng.standard_normal((cin, m, n)),
            )
        )
    model = DenoiserModel(layers, mu_target=mu_target, sn_height=m, sn_width=n)
    return spectral_normalize(model, init_power_iters)


def _forward_pass(model: DenoiserModel, x: np.ndarray):
    """Returns (output, per-layer inputs, per-layer pre-activations, scales)."""
    inputs, pres, scales = [], [], []
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        s = layer.scale()
        z = s * conv3_circ(layer.kernel, h) + layer.bias[:, None, None]
        inputs.append(h)
        pres.append(z)
        scales.append(s)
        h = z if i == last else np.maximum(z, 0.0)
    return h, inputs, pres, scales


def forward_raw(model: DenoiserModel, x: np.ndarray) -> np.ndarray:
    if x.shape[0] != model.bands:
        raise ShapeMismatch(f"expected {model.bands} bands, got {x.shape[0]}")
    out, _, _, _ = _forward_pass(model, x)
    return out


def forward(model: DenoiserModel, x: SpectralCube) -> SpectralCube:
    """Apply the prior; output shape equals input shape."""
    return SpectralCube(forward_raw(model, x.data))


def _backward(model: DenoiserModel, inputs, pres, scales, cot: np.ndarray,
              want_params: bool):
    """Shared reverse sweep. ReLU subgradient at 0 is 0."""
    grads = DenoiserGrads.zeros_like(model) if want_params else None
    g = cot
    last = len(model.layers) - 1
    for i in range(last, -1, -1):
        layer = model.layers[i]
        gz = g if i == last else g * (pres[i] > 0.0)
        if want_params:
            grads.biases[i][:] = gz.sum(axis=(1, 2))
            g_eff = conv3_circ_adj_kernel(gz, inputs[i])
            s = scales[i]
            if s < 1.0:
                # effective kernel is k*min(1, cap/sigma); u, v held constant
                grads.kernels[i][:] = s * g_eff - (s / max(layer.sigma(), _SIGMA_FLOOR)) \
                    * np.sum(g_eff * layer.kernel) * layer.sn_p
            else:
                grads.kernels[i][:] = g_eff
        g = scales[i] * conv3_circ_adj_input(layer.kernel, gz)
    return g, grads


def vjp_input_raw(model: DenoiserModel, x: np.ndarray, cot: np.ndarray) -> np.ndarray:
    if x.shape != cot.shape or x.shape[0] != model.bands:
        raise ShapeMismatch(f"x {x.shape} vs cotangent {cot.shape}, bands {model.bands}")
    _, inputs, pres, scales = _forward_pass(model, x)
    g, _ = _backward(model, inputs, pres, scales, cot, want_params=False)
    return g


def vjp_input(model: DenoiserModel, x: SpectralCube, cot: SpectralCube) -> SpectralCube:
    """Transpose-Jacobian product of the prior in its input, evaluated at x."""
    return SpectralCube(vjp_input_raw(model, x.data, cot.data))


def vjp_params_raw(model: DenoiserModel, x: np.ndarray, cot: np.ndarray) -> DenoiserGrads:
    if x.shape != cot.shape or x.shape[0] != model.bands:
        raise ShapeMismatch(f"x {x.shape} vs cotangent {cot.shape}, bands {model.bands}")
    _, inputs, pres, scales = _forward_pass(model, x)
    _, grads = _backward(model, inputs, pres, scales, cot, want_params=True)
    return grads


def vjp_params(model: DenoiserModel, x: SpectralCube, cot: SpectralCube) -> DenoiserGrads:
    """Per-layer kernel and bias cotangents for the prior at x."""
    return vjp_params_raw(model, x.data, cot.data)


def estimate_lipschitz(model: DenoiserModel, trials: int = 200, seed: int = 0,
                       local_step: float = 1e-3) -> float:
    """Empirical lower bound on the network's Lipschitz constant.

    Max difference ratio over random pairs, refined with small-perturbation
    pairs around the same base points.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    shape = (model.bands, model.sn_height, model.sn_width)
    best = 0.0
    for _ in range(trials):
        x1 = rng.uniform(0.0, 1.0, size=shape)
        x2 = rng.uniform(0.0, 1.0, size=shape)
        dx = np.linalg.norm(x1 - x2)
        if dx > 0:
            best = max(best, np.linalg.norm(
                forward_raw(model, x1) - forward_raw(model, x2)) / dx)
        eta = rng.standard_normal(shape)
        eta *= local_step / max(np.linalg.norm(eta), _SIGMA_FLOOR)
        best = max(best, np.linalg.norm(
            forward_raw(model, x1 + eta) - forward_raw(model, x1)) / np.linalg.norm(eta))
    return best


def materialize_operator(layer: ConvLayer, height: int, width: int) -> np.ndarray:
    """Dense matrix of the layer's convolution on a (height, width) grid."""
    cin = layer.in_channels
    cols = []
    for i in range(cin):
        for r in range(height):
            for c in range(width):
                basis = np.zeros((cin, height, width))
                basis[i, r, c] = 1.0
                cols.append(conv3_circ(layer.kernel, basis).ravel())
    return np.stack(cols, axis=1)


def save_model(model: DenoiserModel, path) -> Path:
    """JSON manifest line plus little-endian f32 payload (kernel then bias per layer)."""
    manifest = {
        "layers": [
            {"in": lyr.in_channels, "out": lyr.out_channels, "cap": lyr.cap}
            for lyr in model.layers
        ],
        "mu_target": model.mu_target,
        "sn_height": model.sn_height,
        "sn_width": model.sn_width,
        "dtype": "f32",
    }
    p = Path(path)
    with open(p, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for lyr in model.layers:
            fh.write(np.ascontiguousarray(lyr.kernel, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(lyr.bias, dtype="<f4").tobytes())
    return p


def load_model(path, refresh_iters: int = 30) -> DenoiserModel:
    """Load weights and deterministically rebuild the power-iteration state."""
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n")
    manifest = json.loads(raw[:sep].decode("utf-8"))
    payload = raw[sep + 1:]
    m, n = manifest["sn_height"], manifest["sn_width"]
    layers = []
    offset = 0
    for i, spec in enumerate(manifest["layers"]):
        cin, cout, cap = spec["in"], spec["out"], spec["cap"]
        ksize = cout * cin * 9 * 4
        kernel = np.frombuffer(payload[offset:offset + ksize], dtype="<f4")
        kernel = kernel.astype(np.float64).reshape(cout, cin, 3, 3)
        offset += ksize
        bsize = cout * 4
        bias = np.frombuffer(payload[offset:offset + bsize], dtype="<f4").astype(np.float64)
        offset += bsize
        rng = np.random.default_rng(10_000 + i)
        layer = ConvLayer(kernel=kernel, bias=bias, cap=cap,
                          u=rng.standard_normal((cout, m, n)),
                          v=rng.standard_normal((cin, m, n)))
        _refresh_layer(layer, refresh_iters)
        layers.append(layer)
    return DenoiserModel(layers, mu_target=manifest["mu_target"], sn_height=m, sn_width=n)
