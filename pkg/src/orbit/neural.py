"""Minimal neural stack for the late-fusion viewport predictor.

Implements exactly what the fusion architecture needs, in numpy with
analytic gradients: GRU layers over (batch, time, features) sequences,
single-channel 2-D convolution and max pooling over the (time, feature)
grid, dense layers, L1 loss, Adam, per-layer freezing, and the training
protocol (lr decay every 10 epochs, early stopping on validation loss,
k-fold splits over trace families, pre-trained cores frozen during fusion
training).

Everything is float64 and deterministic for a fixed seed on one thread.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"ORBITNN\x01"


# ---------------------------------------------------------------------------
# Layers


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer: owns params/grads dicts and a frozen flag."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen = False
        self._cache = None

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    """Fully connected layer on (batch, features)."""

    def __init__(self, in_features: int, units: int, activation: str, rng):
        super().__init__()
        if activation not in ("linear", "relu", "tanh"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.activation = activation
        self.params = {"W": _glorot(rng, (in_features, units)), "b": np.zeros(units)}
        self.zero_grads()

    def forward(self, x):
        z = x @ self.params["W"] + self.params["b"]
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "tanh":
            y = np.tanh(z)
        else:
            y = z
        self._cache = (x, z, y)
        return y

    def backward(self, dy):
        x, z, y = self._cache
        if self.activation == "relu":
            dz = dy * (z > 0)
        elif self.activation == "tanh":
            dz = dy * (1.0 - y**2)
        else:
            dz = dy
        self.grads["W"] += x.T @ dz
        self.grads["b"] += dz.sum(axis=0)
        return dz @ self.params["W"].T


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class GRU(Layer):
    """Gated recurrent layer over (batch, time, features), full sequence out.

    Gates: z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    c = tanh(x Wc + (r * h) Uc + bc), h' = z * h + (1 - z) * c.
    """

    def __init__(self, in_features: int, units: int, rng):
        super().__init__()
        self.units = units
        p = {}
        for gate in ("z", "r", "c"):
            p["W" + gate] = _glorot(rng, (in_features, units))
            p["U" + gate] = _glorot(rng, (units, units))
            p["b" + gate] = np.zeros(units)
        self.params = p
        self.zero_grads()

    def forward(self, x):
        p = self.params
        batch, steps, _ = x.shape
        h = np.zeros((batch, self.units))
        hs = [h]
        zs, rs, cs = [], [], []
        out = np.empty((batch, steps, self.units))
        for t in range(steps):
            xt = x[:, t]
            z = _sigmoid(xt @ p["Wz"] + h @ p["Uz"] + p["bz"])
            r = _sigmoid(xt @ p["Wr"] + h @ p["Ur"] + p["br"])
            c = np.tanh(xt @ p["Wc"] + (r * h) @ p["Uc"] + p["bc"])
            h = z * h + (1.0 - z) * c
            zs.append(z)
            rs.append(r)
            cs.append(c)
            hs.append(h)
            out[:, t] = h
        self._cache = (x, hs, zs, rs, cs)
        return out

    def backward(self, dy):
        p, g = self.params, self.grads
        x, hs, zs, rs, cs = self._cache
        batch, steps, _ = x.shape
        dx = np.empty_like(x)
        dh = np.zeros((batch, self.units))
        for t in reversed(range(steps)):
            xt, h_prev = x[:, t], hs[t]
            z, r, c = zs[t], rs[t], cs[t]
            dh_total = dy[:, t] + dh
            dz = dh_total * (h_prev - c) * z * (1.0 - z)
            dc = dh_total * (1.0 - z) * (1.0 - c**2)
            drh = dc @ p["Uc"].T
            dr = drh * h_prev * r * (1.0 - r)
            g["Wz"] += xt.T @ dz
            g["Uz"] += h_prev.T @ dz
            g["bz"] += dz.sum(axis=0)
            g["Wr"] += xt.T @ dr
            g["Ur"] += h_prev.T @ dr
            g["br"] += dr.sum(axis=0)
            g["Wc"] += xt.T @ dc
            g["Uc"] += (r * h_prev).T @ dc
            g["bc"] += dc.sum(axis=0)
            dx[:, t] = dz @ p["Wz"].T + dr @ p["Wr"].T + dc @ p["Wc"].T
            dh = dh_total * z + dz @ p["Uz"].T + dr @ p["Ur"].T + drh * r
        return dx


class Conv2D(Layer):
    """'Same'-padded 2-D convolution over the (time, feature) grid.

    The sequence (batch, T, F) is treated as a single-channel image; the
    output channels are folded back into the feature axis, giving
    (batch, T, F * channels) so recurrent layers can follow.
    """

    def __init__(self, in_shape: tuple[int, int], kernel_h: int, kernel_w: int,
                 channels: int, rng):
        super().__init__()
        self.kernel_h = kernel_h
        self.kernel_w = kernel_w
        self.channels = channels
        fan = kernel_h * kernel_w
        limit = np.sqrt(6.0 / (fan + channels))
        self.params = {
            "K": rng.uniform(-limit, limit, size=(channels, kernel_h, kernel_w)),
            "b": np.zeros(channels),
        }
        self.zero_grads()

    def _pads(self):
        ph, pw = self.kernel_h - 1, self.kernel_w - 1
        return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2

    def forward(self, x):
        top, bot, left, right = self._pads()
        xp = np.pad(x, ((0, 0), (top, bot), (left, right)))
        win = np.lib.stride_tricks.sliding_window_view(
            xp, (self.kernel_h, self.kernel_w), axis=(1, 2)
        )
        y = np.einsum("btfuv,ouv->btfo", win, self.params["K"]) + self.params["b"]
        self._cache = (x.shape, win)
        batch, steps, feats = x.shape
        return y.reshape(batch, steps, feats * self.channels)

    def backward(self, dy):
        (batch, steps, feats), win = self._cache
        dy4 = dy.reshape(batch, steps, feats, self.channels)
        self.grads["K"] += np.einsum("btfuv,btfo->ouv", win, dy4)
        self.grads["b"] += dy4.sum(axis=(0, 1, 2))
        top, bot, left, right = self._pads()
        dxp = np.zeros((batch, steps + top + bot, feats + left + right))
        K = self.params["K"]
        for u in range(self.kernel_h):
            for v in range(self.kernel_w):
                dxp[:, u : u + steps, v : v + feats] += dy4 @ K[:, u, v]
        return dxp[:, top : top + steps, left : left + feats]


class MaxPool2D(Layer):
    """Non-overlapping max pooling of the (time, feature) grid, ceil mode."""

    def __init__(self, pool_h: int, pool_w: int):
        super().__init__()
        self.pool_h = pool_h
        self.pool_w = pool_w

    @staticmethod
    def out_dim(size: int, pool: int) -> int:
        return -(-size // pool)

    def forward(self, x):
        batch, steps, feats = x.shape
        to, fo = self.out_dim(steps, self.pool_h), self.out_dim(feats, self.pool_w)
        pad_t, pad_f = to * self.pool_h - steps, fo * self.pool_w - feats
        xp = np.pad(x, ((0, 0), (0, pad_t), (0, pad_f)), constant_values=-np.inf)
        xr = (
            xp.reshape(batch, to, self.pool_h, fo, self.pool_w)
            .transpose(0, 1, 3, 2, 4)
            .reshape(batch, to, fo, self.pool_h * self.pool_w)
        )
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, xp.shape, idx)
        return y

    def backward(self, dy):
        (batch, steps, feats), (_, tp, fp), idx = self._cache
        to, fo = idx.shape[1], idx.shape[2]
        dxr = np.zeros((batch, to, fo, self.pool_h * self.pool_w))
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
        dxp = (
            dxr.reshape(batch, to, fo, self.pool_h, self.pool_w)
            .transpose(0, 1, 3, 2, 4)
            .reshape(batch, tp, fp)
        )
        return dxp[:, :steps, :feats]


class Flatten(Layer):
    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._cache)


class LayerStack:
    """An ordered pipeline of layers acting as one trainable unit."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def set_frozen(self, frozen: bool):
        for layer in self.layers:
            layer.frozen = frozen


# ---------------------------------------------------------------------------
# Network specification


@dataclass(frozen=True)
class GRUSpec:
    units: int


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    channels: int = 1


@dataclass(frozen=True)
class PoolSpec:
    pool_h: int
    pool_w: int


@dataclass(frozen=True)
class DenseSpec:
    units: int
    activation: str = "linear"


LayerSpecT = GRUSpec | ConvSpec | PoolSpec | DenseSpec

# Architecture defaults: 60-cell GRUs interleaved with 60x60 convolution
# units, max pooling, and a 30-node ReLU feedforward stage. Desk-scale runs
# pass a scaled-down spec instead.
DEFAULT_TRUNK: tuple[LayerSpecT, ...] = (
    GRUSpec(60),
    ConvSpec(60, 60),
    GRUSpec(60),
    PoolSpec(2, 2),
    DenseSpec(30, "relu"),
)


@dataclass(frozen=True)
class NetworkSpec:
    """Shapes and layer plan of a fusion predictor.

    Cores are GRU encoders, one per input stream ("h" plus any cues); their
    output sequences are concatenated on the feature axis, so cue windows
    are resampled to window_steps. The trunk ends in an implicit linear
    head of horizon_steps * out_axes units.
    """

    window_steps: int = 20
    cue_steps: int = 20
    horizon_steps: int = 80
    out_axes: int = 3
    core_units: int = 60
    cues: tuple[str, ...] = ("s",)
    cue_mode: str = "centroid"
    trunk: tuple[LayerSpecT, ...] = DEFAULT_TRUNK

    def __post_init__(self):
        if self.cue_steps != self.window_steps:
            raise ValueError("cue_steps must equal window_steps (feature-axis fusion)")
        if self.cue_mode not in ("max", "centroid"):
            raise ValueError(f"unknown cue mode {self.cue_mode!r}")
        for c in self.cues:
            if c not in ("s", "m"):
                raise ValueError(f"unknown cue stream {c!r}")

    def cue_inputs(self) -> tuple[str, ...]:
        return self.cues

    def input_order(self) -> tuple[str, ...]:
        return ("h",) + self.cues

    def input_width(self, name: str) -> int:
        return 3 if name == "h" else 2

    @property
    def out_dim(self) -> int:
        return self.horizon_steps * self.out_axes

    def to_dict(self) -> dict:
        layers = []
        for spec in self.trunk:
            if isinstance(spec, GRUSpec):
                layers.append(["gru", spec.units])
            elif isinstance(spec, ConvSpec):
                layers.append(["conv", spec.kernel_h, spec.kernel_w, spec.channels])
            elif isinstance(spec, PoolSpec):
                layers.append(["maxpool", spec.pool_h, spec.pool_w])
            else:
                layers.append(["dense", spec.units, spec.activation])
        return {
            "window_steps": self.window_steps,
            "cue_steps": self.cue_steps,
            "horizon_steps": self.horizon_steps,
            "out_axes": self.out_axes,
            "core_units": self.core_units,
            "cues": list(self.cues),
            "cue_mode": self.cue_mode,
            "trunk": layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        """Build a spec from a (possibly partial) dict; missing keys keep defaults."""
        defaults = cls()
        trunk: tuple[LayerSpecT, ...]
        if "trunk" in d:
            layers = []
            for entry in d["trunk"]:
                kind = entry[0]
                if kind == "gru":
                    layers.append(GRUSpec(int(entry[1])))
                elif kind == "conv":
                    layers.append(
                        ConvSpec(int(entry[1]), int(entry[2]),
                                 int(entry[3]) if len(entry) > 3 else 1)
                    )
                elif kind == "maxpool":
                    layers.append(PoolSpec(int(entry[1]), int(entry[2])))
                elif kind == "dense":
                    layers.append(
                        DenseSpec(int(entry[1]),
                                  str(entry[2]) if len(entry) > 2 else "linear")
                    )
                else:
                    raise ValueError(f"unknown trunk layer kind {kind!r}")
            trunk = tuple(layers)
        else:
            trunk = defaults.trunk
        return cls(
            window_steps=int(d.get("window_steps", defaults.window_steps)),
            cue_steps=int(d.get("cue_steps", d.get("window_steps", defaults.cue_steps))),
            horizon_steps=int(d.get("horizon_steps", defaults.horizon_steps)),
            out_axes=int(d.get("out_axes", defaults.out_axes)),
            core_units=int(d.get("core_units", defaults.core_units)),
            cues=tuple(d.get("cues", defaults.cues)),
            cue_mode=str(d.get("cue_mode", defaults.cue_mode)),
            trunk=trunk,
        )


def _build_layers(
    specs: Sequence[LayerSpecT], in_shape: tuple[int, ...], rng
) -> tuple[list[Layer], tuple[int, ...]]:
    layers: list[Layer] = []
    shape = in_shape
    for spec in specs:
        if isinstance(spec, GRUSpec):
            if len(shape) != 2:
                raise ValueError("GRU layer needs a (time, features) input")
            layers.append(GRU(shape[1], spec.units, rng))
            shape = (shape[0], spec.units)
        elif isinstance(spec, ConvSpec):
            if len(shape) != 2:
                raise ValueError("Conv layer needs a (time, features) input")
            layers.append(Conv2D(shape, spec.kernel_h, spec.kernel_w, spec.channels, rng))
            shape = (shape[0], shape[1] * spec.channels)
        elif isinstance(spec, PoolSpec):
            if len(shape) != 2:
                raise ValueError("MaxPool layer needs a (time, features) input")
            layers.append(MaxPool2D(spec.pool_h, spec.pool_w))
            shape = (
                MaxPool2D.out_dim(shape[0], spec.pool_h),
                MaxPool2D.out_dim(shape[1], spec.pool_w),
            )
        elif isinstance(spec, DenseSpec):
            if len(shape) == 2:
                layers.append(Flatten())
                shape = (shape[0] * shape[1],)
            layers.append(Dense(shape[0], spec.units, spec.activation, rng))
            shape = (spec.units,)
        else:
            raise ValueError(f"unknown layer spec {spec!r}")
    return layers, shape


# ---------------------------------------------------------------------------
# Fusion model


class FusionModel:
    """Pre-trainable GRU cores feeding a shared trunk with a linear head."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.meta: dict = {"seed": seed}
        rng = np.random.default_rng(seed)
        self.cores: dict[str, LayerStack] = {}
        for name in spec.input_order():
            layers, _ = _build_layers(
                [GRUSpec(spec.core_units)],
                (spec.window_steps, spec.input_width(name)),
                rng,
            )
            self.cores[name] = LayerStack(layers)
        trunk_in = (spec.window_steps, spec.core_units * len(spec.input_order()))
        layers, shape = _build_layers(spec.trunk, trunk_in, rng)
        head, _ = _build_layers([DenseSpec(spec.out_dim, "linear")], shape, rng)
        self.trunk = LayerStack(layers + head)
        self._feat_width = spec.core_units

    def stacks(self) -> list[tuple[str, LayerStack]]:
        return [(f"cores/{k}", v) for k, v in sorted(self.cores.items())] + [
            ("trunk", self.trunk)
        ]

    def named_params(self) -> Iterator[tuple[str, Layer, str]]:
        for path, stack in self.stacks():
            for i, layer in enumerate(stack.layers):
                for name in sorted(layer.params):
                    yield f"{path}/{i}/{name}", layer, name

    def zero_grads(self):
        for _, stack in self.stacks():
            stack.zero_grads()

    def freeze_cores(self):
        for core in self.cores.values():
            core.set_frozen(True)

    def forward_train(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        feats = [self.cores[k].forward(inputs[k]) for k in self.spec.input_order()]
        return self.trunk.forward(np.concatenate(feats, axis=2))

    def backward(self, dy: np.ndarray):
        dfeat = self.trunk.backward(dy)
        order = self.spec.input_order()
        for i, name in enumerate(order):
            core = self.cores[name]
            if all(layer.frozen for layer in core.layers):
                continue
            core.backward(dfeat[:, :, i * self._feat_width : (i + 1) * self._feat_width])

    def predict(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        """Inference: forward pass, output clamped to [-1, 1], shape (B, H, axes)."""
        y = self.forward_train(inputs)
        y = np.clip(y, -1.0, 1.0)
        return y.reshape(y.shape[0], self.spec.horizon_steps, self.spec.out_axes)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {path: layer.params[name].copy() for path, layer, name in self.named_params()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        for path, layer, name in self.named_params():
            layer.params[name][...] = snap[path]


# ---------------------------------------------------------------------------
# Loss, optimizer, training


def l1_loss(y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient w.r.t. y."""
    diff = y - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the training protocol."""

    loss: str = "l1"
    learning_rate: float = 1e-3
    batch_size: int = 2048
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    max_epochs: int = 1000
    patience: int = 10
    folds: int = 6
    pretrain_epochs: int | None = None

    def __post_init__(self):
        if self.loss != "l1":
            raise ValueError("only the L1 loss is supported")
        for name in ("learning_rate", "batch_size", "lr_decay", "lr_decay_every",
                     "max_epochs", "patience", "folds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index (decayed every lr_decay_every)."""
        return self.learning_rate * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adam with bias correction; frozen layers are skipped entirely."""

    def __init__(self, model, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p: np.zeros_like(layer.params[n]) for p, layer, n in model.named_params()}
        self.v = {p: np.zeros_like(layer.params[n]) for p, layer, n in model.named_params()}

    def step(self, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for path, layer, name in self.model.named_params():
            if layer.frozen:
                continue
            g = layer.grads[name]
            m = self.m[path]
            v = self.v[path]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            layer.params[name] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass(frozen=True)
class TrainingSet:
    """Supervised windows: named input streams, flattened-diff targets, family ids."""

    inputs: dict[str, np.ndarray]
    targets: np.ndarray
    families: np.ndarray

    def __post_init__(self):
        n = self.targets.shape[0]
        if self.families.shape != (n,):
            raise ValueError("families must be (n_samples,)")
        for k, v in self.inputs.items():
            if v.shape[0] != n:
                raise ValueError(f"input {k!r} sample count mismatch")

    def __len__(self) -> int:
        return self.targets.shape[0]

    def select(self, idx: np.ndarray) -> "TrainingSet":
        return TrainingSet(
            inputs={k: v[idx] for k, v in self.inputs.items()},
            targets=self.targets[idx],
            families=self.families[idx],
        )


@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    best_val_loss: float
    test_loss: float
    epochs: int


class _SingleStack:
    """Core + throwaway head used for pre-training one input stream."""

    def __init__(self, core: LayerStack, head: LayerStack, key: str):
        self.core, self.head, self.key = core, head, key

    def stacks(self):
        return [("core", self.core), ("head", self.head)]

    def named_params(self):
        for path, stack in self.stacks():
            for i, layer in enumerate(stack.layers):
                for name in sorted(layer.params):
                    yield f"{path}/{i}/{name}", layer, name

    def zero_grads(self):
        self.core.zero_grads()
        self.head.zero_grads()

    def forward_train(self, inputs):
        return self.head.forward(self.core.forward(inputs[self.key]))

    def backward(self, dy):
        self.core.backward(self.head.backward(dy))

    def snapshot(self):
        return {p: layer.params[n].copy() for p, layer, n in self.named_params()}

    def load_snapshot(self, snap):
        for p, layer, n in self.named_params():
            layer.params[n][...] = snap[p]


def _eval_loss(model, data: TrainingSet) -> float:
    y = model.forward_train(data.inputs)
    targets = data.targets.reshape(len(data), -1)
    return float(np.mean(np.abs(y - targets)))


def _fit(model, train: TrainingSet, val: TrainingSet, config: TrainConfig,
         rng: np.random.Generator, max_epochs: int | None = None) -> tuple[float, int]:
    """Adam/L1 loop with lr decay and early stopping; best-val params restored.

    Returns (best validation loss, epochs run). Epoch 0 (untrained) counts
    as the initial best, so the restored checkpoint is never worse than the
    starting point.
    """
    adam = Adam(model)
    targets = train.targets.reshape(len(train), -1)
    best_val = _eval_loss(model, val)
    best_snap = model.snapshot()
    limit = max_epochs if max_epochs is not None else config.max_epochs
    batch = min(config.batch_size, len(train))
    bad = 0
    epoch = 0
    for epoch in range(1, limit + 1):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train))
        for start in range(0, len(train), batch):
            idx = order[start : start + batch]
            y = model.forward_train({k: v[idx] for k, v in train.inputs.items()})
            loss, dy = l1_loss(y, targets[idx])
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} at epoch {epoch}, batch offset {start}"
                )
            model.zero_grads()
            model.backward(dy)
            adam.step(lr)
        val_loss = _eval_loss(model, val)
        if val_loss < best_val:
            best_val = val_loss
            best_snap = model.snapshot()
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_snapshot(best_snap)
    return best_val, epoch


def fold_split(families: np.ndarray, fold: int, folds: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train/val/test index split by family: one test family, one val family, rest train."""
    fam_ids = np.unique(families)
    if fam_ids.size < 3:
        raise ValueError("need at least 3 families for a train/val/test split")
    test_fam = fam_ids[fold % fam_ids.size]
    val_fam = fam_ids[(fold + 1) % fam_ids.size]
    test = np.flatnonzero(families == test_fam)
    val = np.flatnonzero(families == val_fam)
    train = np.flatnonzero((families != test_fam) & (families != val_fam))
    return train, val, test


def train(
    spec: NetworkSpec, dataset: TrainingSet, config: TrainConfig, seed: int = 0
) -> tuple[FusionModel, list[FoldMetrics]]:
    """Cross-validated fusion training: pre-train cores, freeze them, train the trunk.

    Folds rotate over trace families. Returns the model from the fold with
    the best validation loss, plus per-fold metrics.
    """
    for name in spec.input_order():
        if name not in dataset.inputs:
            raise ValueError(f"dataset lacks input stream {name!r}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    metrics: list[FoldMetrics] = []
    best_model: FusionModel | None = None
    best_val = np.inf
    for fold in range(config.folds):
        tr_idx, val_idx, test_idx = fold_split(dataset.families, fold, config.folds)
        if min(tr_idx.size, val_idx.size, test_idx.size) == 0:
            raise ValueError(f"fold {fold} has an empty split")
        tr, va, te = (dataset.select(i) for i in (tr_idx, val_idx, test_idx))
        rng = np.random.default_rng(seed * 1009 + fold)
        model = FusionModel(spec, seed=seed * 1009 + fold)
        pre_rng = np.random.default_rng(rng.integers(2**32))
        for name in spec.input_order():
            head, _ = _build_layers(
                [DenseSpec(spec.out_dim, "linear")],
                (spec.window_steps * spec.core_units,),
                pre_rng,
            )
            trainer = _SingleStack(model.cores[name], LayerStack([Flatten()] + head), name)
            _fit(trainer, tr, va, config, pre_rng, max_epochs=config.pretrain_epochs)
        model.freeze_cores()
        frozen_before = {
            p: layer.params[n].copy()
            for p, layer, n in model.named_params()
            if layer.frozen
        }
        val_loss, epochs = _fit(model, tr, va, config, np.random.default_rng(rng.integers(2**32)))
        for p, layer, n in model.named_params():
            if layer.frozen and not np.array_equal(layer.params[n], frozen_before[p]):
                raise RuntimeError(f"frozen parameter {p} changed during fusion training")
        test_loss = _eval_loss(model, te)
        metrics.append(FoldMetrics(fold=fold, best_val_loss=val_loss,
                                   test_loss=test_loss, epochs=epochs))
        model.meta.update({
            "fold": fold, "best_val_loss": val_loss, "epochs": epochs,
            "frozen": [path for path, s in model.stacks()
                       if all(l.frozen for l in s.layers)],
        })
        if val_loss < best_val:
            best_val = val_loss
            best_model = model
    assert best_model is not None
    return best_model, metrics


# ---------------------------------------------------------------------------
# Checkpoints (deterministic container: JSON header + raw little-endian arrays)


def save_model(model: FusionModel, path):
    entries = []
    blobs = []
    offset = 0
    for key, layer, name in model.named_params():
        arr = np.ascontiguousarray(layer.params[name], dtype="<f8")
        entries.append({"key": key, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": "orbit-fusion-checkpoint",
        "version": 1,
        "spec": model.spec.to_dict(),
        "meta": model.meta,
        "arrays": entries,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head_bytes)))
        fh.write(head_bytes)
        for blob in blobs:
            fh.write(blob)


def load_model(path) -> FusionModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an orbit checkpoint")
        (head_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        payload = fh.read()
    spec = NetworkSpec.from_dict(header["spec"])
    model = FusionModel(spec, seed=int(header["meta"].get("seed", 0)))
    model.meta = dict(header["meta"])
    arrays = {e["key"]: e for e in header["arrays"]}
    for key, layer, name in model.named_params():
        entry = arrays[key]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f8", count=count, offset=entry["offset"]
        ).reshape(shape)
        layer.params[name] = arr.astype(np.float64).copy()
    for path_frozen in model.meta.get("frozen", []):
        for stack_path, stack in model.stacks():
            if stack_path == path_frozen:
                stack.set_frozen(True)
    return model
