"""Dense ReLU MLP with activation taps, manual reverse-mode gradients and Adam.

The network follows the usual NeRF layout: a ReLU trunk over the encoded
position, a density head and a linear bottleneck feature on top of the last
trunk layer, and a small ReLU colour head that sees the bottleneck feature
concatenated with the encoded view direction.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer is
``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ROW_BLOCK = 4096
SIGMA_INIT_SCALE = 0.1


class ConfigurationError(ValueError):
    """Raised when shapes or configuration values are inconsistent."""


class UnsupportedOperationError(RuntimeError):
    """Raised when an operation is requested on data that cannot support it."""


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step is attempted with NaN/inf gradients."""


@dataclass(frozen=True)
class MlpConfig:
    trunk_layers: int = 4
    hidden_units: int = 64
    pe_frequencies_pos: int = 10
    pe_frequencies_dir: int = 4
    skip_connection_at: int | None = None
    color_head_units: int = 32
    include_input: bool = True
    density_activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.trunk_layers < 2:
            raise ConfigurationError("trunk_layers must be >= 2")
        if self.hidden_units < 1 or self.color_head_units < 1:
            raise ConfigurationError("layer widths must be >= 1")
        if self.pe_frequencies_pos < 0 or self.pe_frequencies_dir < 0:
            raise ConfigurationError("encoding frequencies must be >= 0")
        if self.skip_connection_at is not None and not (
            1 <= self.skip_connection_at < self.trunk_layers
        ):
            raise ConfigurationError("skip_connection_at must lie in [1, trunk_layers)")
        if self.density_activation not in ("relu", "softplus"):
            raise ConfigurationError(f"unknown density activation {self.density_activation!r}")

    @property
    def pos_dim(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.pe_frequencies_pos)

    @property
    def dir_dim(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.pe_frequencies_dir)

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every dense layer, in storage order."""
        h = self.hidden_units
        shapes = []
        for i in range(self.trunk_layers):
            fan_in = self.pos_dim if i == 0 else h
            if i == self.skip_connection_at:
                fan_in += self.pos_dim
            shapes.append((f"trunk{i}", fan_in, h))
        shapes.append(("sigma", h, 1))
        shapes.append(("feature", h, h))
        shapes.append(("color_hidden", h + self.dir_dim, self.color_head_units))
        shapes.append(("color_out", self.color_head_units, 3))
        return shapes

    def to_dict(self) -> dict:
        return {
            "trunk_layers": self.trunk_layers,
            "hidden_units": self.hidden_units,
            "pe_frequencies_pos": self.pe_frequencies_pos,
            "pe_frequencies_dir": self.pe_frequencies_dir,
            "skip_connection_at": self.skip_connection_at,
            "color_head_units": self.color_head_units,
            "include_input": self.include_input,
            "density_activation": self.density_activation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpConfig:
        return cls(**d)


@dataclass
class MlpParams:
    """Weights and biases for every layer listed by ``MlpConfig.layer_shapes``."""

    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ConfigurationError("parameter list length does not match config")
        for (name, fan_in, fan_out), w, b in zip(shapes, self.weights, self.biases):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ConfigurationError(
                    f"layer {name}: expected {(fan_in, fan_out)}/{(fan_out,)}, "
                    f"got {w.shape}/{b.shape}"
                )

    @classmethod
    def init(cls, config: MlpConfig, seed: int | None = None) -> MlpParams:
        """He-style uniform fan-in initialization, deterministic in ``seed``.

        The density head starts at a tenth of that scale so the untrained
        volume is nearly transparent rather than an opaque wall.
        """
        rng = np.random.default_rng(config.seed if seed is None else seed)
        weights, biases = [], []
        for name, fan_in, fan_out in config.layer_shapes():
            bound = np.sqrt(6.0 / fan_in) * (SIGMA_INIT_SCALE if name == "sigma" else 1.0)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32))
            biases.append(np.zeros(fan_out, dtype=np.float32))
        return cls(config, weights, biases)

    @classmethod
    def zeros(cls, config: MlpConfig) -> MlpParams:
        shapes = config.layer_shapes()
        return cls(
            config,
            [np.zeros((i, o), np.float32) for _, i, o in shapes],
            [np.zeros(o, np.float32) for _, _, o in shapes],
        )

    @property
    def dtype(self):
        return self.weights[0].dtype

    def astype(self, dtype) -> MlpParams:
        return MlpParams(
            self.config,
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
        )

    def copy(self) -> MlpParams:
        return self.astype(self.dtype)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        names = [s[0] for s in self.config.layer_shapes()]
        i = names.index(name)
        return self.weights[i], self.biases[i]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> Gradients:
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __add__(self, other: Gradients) -> Gradients:
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass
class ForwardTrace:
    """Everything recorded during one forward pass.

    ``activations[l]`` is the post-ReLU output of trunk layer ``l + 1`` and
    ``pre_activations[l]`` the matching pre-ReLU values. Density and colour
    fields are ``None`` for a truncated pass.
    """

    inputs: np.ndarray
    dir_inputs: np.ndarray | None
    activations: list[np.ndarray]
    pre_activations: list[np.ndarray]
    tap_through: int
    truncated: bool
    flops: int
    sigma_raw: np.ndarray | None = None
    sigma: np.ndarray | None = None
    features: np.ndarray | None = None
    color_pre: np.ndarray | None = None
    color_hidden: np.ndarray | None = None
    rgb: np.ndarray | None = None

    def tap(self, layer: int, pre_relu: bool = False) -> np.ndarray:
        """Activation matrix of trunk layer ``layer`` (1-based)."""
        if not 1 <= layer <= len(self.activations):
            raise ConfigurationError(
                f"layer {layer} not recorded (trace holds {len(self.activations)} layers)"
            )
        source = self.pre_activations if pre_relu else self.activations
        return source[layer - 1]


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray, stable_rows: bool = True) -> np.ndarray:
    """``x @ w + b`` evaluated in fixed, zero-padded row blocks.

    BLAS picks different kernels depending on the number of rows, which makes
    the result for a given row depend on the batch it travels in. Padding every
    call to whole ``ROW_BLOCK`` blocks keeps each row's result independent of
    its batch, which the bit-exact pipeline comparisons rely on.
    ``stable_rows=False`` skips the padding (small float64 checks).
    """
    if not stable_rows:
        return x @ w + b
    m = x.shape[0]
    out = np.empty((m, w.shape[1]), dtype=np.result_type(x, w))
    for start in range(0, m, ROW_BLOCK):
        block = x[start:start + ROW_BLOCK]
        n = block.shape[0]
        if n < ROW_BLOCK:
            padded = np.zeros((ROW_BLOCK, x.shape[1]), dtype=x.dtype)
            padded[:n] = block
            out[start:] = (padded @ w)[:n]
        else:
            out[start:start + n] = block @ w
    out += b
    return out


def _relu(x):
    return np.maximum(x, 0)


def _density_activation(raw, kind):
    if kind == "relu":
        return _relu(raw)
    return np.logaddexp(0, raw).astype(raw.dtype)


def _density_activation_grad(raw, kind):
    if kind == "relu":
        return (raw > 0).astype(raw.dtype)
    return (1.0 / (1.0 + np.exp(-raw))).astype(raw.dtype)


def _sigmoid(x):
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype)


def layer_flops(config: MlpConfig) -> dict[str, int]:
    """Per-sample FLOPs of each dense layer (2 per multiply-accumulate)."""
    return {name: 2 * fan_in * fan_out for name, fan_in, fan_out in config.layer_shapes()}


def forward_flops(
    config: MlpConfig,
    tap_through: int | None = None,
    n_samples: int = 1,
    heads: bool | None = None,
) -> int:
    """FLOPs of a forward pass over ``n_samples`` samples.

    A pass through ``tap_through`` trunk layers counts only those layers
    unless ``heads`` is set; by default heads are counted exactly when the
    whole trunk runs.
    """
    per_layer = layer_flops(config)
    names = [s[0] for s in config.layer_shapes()]
    n_trunk = config.trunk_layers if tap_through is None else tap_through
    if heads is None:
        heads = n_trunk >= config.trunk_layers
    total = sum(per_layer[n] for n in names[:n_trunk])
    if heads:
        total += sum(per_layer[n] for n in names[config.trunk_layers:])
    return n_samples * total


def forward_with_taps(
    params: MlpParams,
    encoded_positions: np.ndarray,
    encoded_dirs: np.ndarray | None = None,
    tap_through: int | None = None,
    stable_rows: bool = True,
) -> ForwardTrace:
    """Run the network, recording every trunk activation.

    ``tap_through`` (1-based) stops the pass after that trunk layer; the
    density and colour heads are then skipped. Tapping the last trunk layer
    without directions also yields a trunk-only (truncated) trace.
    """
    cfg = params.config
    x = encoded_positions
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigurationError("encoded_positions must be a non-empty [N, D] batch")
    if x.shape[1] != cfg.pos_dim:
        raise ConfigurationError(f"position encoding has {x.shape[1]} dims, expected {cfg.pos_dim}")
    n_trunk = cfg.trunk_layers if tap_through is None else tap_through
    if not 1 <= n_trunk <= cfg.trunk_layers:
        raise ConfigurationError(f"tap_through must lie in [1, {cfg.trunk_layers}]")
    truncated = n_trunk < cfg.trunk_layers or (tap_through is not None and encoded_dirs is None)
    if not truncated:
        if encoded_dirs is None:
            raise ConfigurationError("full pass requires encoded directions")
        if encoded_dirs.shape != (x.shape[0], cfg.dir_dim):
            raise ConfigurationError(
                f"direction encoding has shape {encoded_dirs.shape}, "
                f"expected {(x.shape[0], cfg.dir_dim)}"
            )
    x = x.astype(params.dtype, copy=False)

    pre, post = [], []
    h = x
    for i in range(n_trunk):
        inp = np.concatenate([h, x], axis=1) if i == cfg.skip_connection_at else h
        z = dense(inp, params.weights[i], params.biases[i], stable_rows)
        h = _relu(z)
        pre.append(z)
        post.append(h)

    trace = ForwardTrace(
        inputs=x,
        dir_inputs=encoded_dirs,
        activations=post,
        pre_activations=pre,
        tap_through=n_trunk,
        truncated=truncated,
        flops=forward_flops(cfg, n_trunk, x.shape[0], heads=not truncated),
    )
    if truncated:
        return trace

    k = cfg.trunk_layers
    d = encoded_dirs.astype(params.dtype, copy=False)
    sigma_raw = dense(h, params.weights[k], params.biases[k], stable_rows)[:, 0]
    features = dense(h, params.weights[k + 1], params.biases[k + 1], stable_rows)
    color_pre = dense(
        np.concatenate([features, d], axis=1), params.weights[k + 2], params.biases[k + 2], stable_rows
    )
    color_hidden = _relu(color_pre)
    rgb = _sigmoid(dense(color_hidden, params.weights[k + 3], params.biases[k + 3], stable_rows))

    trace.dir_inputs = d
    trace.sigma_raw = sigma_raw
    trace.sigma = _density_activation(sigma_raw, cfg.density_activation)
    trace.features = features
    trace.color_pre = color_pre
    trace.color_hidden = color_hidden
    trace.rgb = rgb
    return trace


def backward(
    params: MlpParams,
    trace: ForwardTrace,
    d_sigma: np.ndarray,
    d_rgb: np.ndarray,
) -> Gradients:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``d_sigma`` [N] and ``d_rgb`` [N, 3] are the upstream gradients of the
    loss with respect to the network's density and colour outputs.
    """
    if trace.truncated:
        raise UnsupportedOperationError("backward requires a full (non-truncated) trace")
    cfg = params.config
    k = cfg.trunk_layers
    n_layers = len(params.weights)
    gw: list = [None] * n_layers
    gb: list = [None] * n_layers
    dtype = params.dtype
    d_sigma = np.asarray(d_sigma, dtype=dtype)
    d_rgb = np.asarray(d_rgb, dtype=dtype)

    rgb = trace.rgb
    dz = d_rgb * rgb * (1 - rgb)
    gw[k + 3] = trace.color_hidden.T @ dz
    gb[k + 3] = dz.sum(0)
    dz = (dz @ params.weights[k + 3].T) * (trace.color_pre > 0)

    color_in = np.concatenate([trace.features, trace.dir_inputs], axis=1)
    gw[k + 2] = color_in.T @ dz
    gb[k + 2] = dz.sum(0)
    d_features = dz @ params.weights[k + 2][: cfg.hidden_units].T

    h = trace.activations[-1]
    gw[k + 1] = h.T @ d_features
    gb[k + 1] = d_features.sum(0)
    ds = (d_sigma * _density_activation_grad(trace.sigma_raw, cfg.density_activation))[:, None]
    gw[k] = h.T @ ds
    gb[k] = ds.sum(0)
    dh = d_features @ params.weights[k + 1].T + ds @ params.weights[k].T

    for i in reversed(range(k)):
        dz = dh * (trace.pre_activations[i] > 0)
        if i == 0:
            inp = trace.inputs
        elif i == cfg.skip_connection_at:
            inp = np.concatenate([trace.activations[i - 1], trace.inputs], axis=1)
        else:
            inp = trace.activations[i - 1]
        gw[i] = inp.T @ dz
        gb[i] = dz.sum(0)
        if i > 0:
            dh = (dz @ params.weights[i].T)[:, : cfg.hidden_units]
    return Gradients([g.astype(dtype) for g in gw], [g.astype(dtype) for g in gb])


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: MlpParams) -> AdamState:
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(
    params: MlpParams,
    grads: Gradients,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-7,
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if not grads.is_finite():
        raise NonFiniteGradientError(
            f"non-finite gradient at optimizer step {state.step + 1}; update rejected"
        )
    b1, b2 = betas
    t = state.step + 1
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_arrays.append((p - step).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    new_params = MlpParams(params.config, new_arrays[0::2], new_arrays[1::2])
    return new_params, replace(state, m=new_m, v=new_v, step=t)
