"""Residual MLP with prefix-depth forward/backward and SGD with momentum.

The network is ``head(norm(block_k(...block_1(pre(x)))))``: blocks past the
active depth are skipped, which is the same as treating them as identity maps.
``norm`` is a parameter-free layer normalization of the residual stream; its
output is the feature the head and the distillation losses read.
Everything runs in float64 on plain numpy arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flextrain._validation import check_depth, check_positive_int

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
NORM_EPS = 1e-5


class StaleTraceError(RuntimeError):
    """Backward was called with a trace recorded before the net was mutated."""


class DivergenceError(FloatingPointError):
    """A loss or gradient became NaN/Inf during training."""


def block_param_names(m: int) -> list[str]:
    return [f"block{m}.W1", f"block{m}.b1", f"block{m}.W2", f"block{m}.b2"]


class ResidualNet:
    """Pre-processing layer, ``K`` residual blocks and a linear decision head.

    Block ``m`` maps ``h -> h + relu(h @ W1 + b1) @ W2 + b2``. The pre layer is
    ``relu(x @ W + b)``; the head reads ``layer_norm(h)`` (no gain or bias).
    Parameters live in :attr:`params`, keyed by name and kept in
    :meth:`param_names` order (the checkpoint array order).
    """

    def __init__(self, input_dim: int, hidden_dim: int, num_classes: int, K: int,
                 seed: int | None = None):
        self.input_dim = check_positive_int(input_dim, "input_dim")
        self.hidden_dim = check_positive_int(hidden_dim, "hidden_dim")
        self.num_classes = check_positive_int(num_classes, "num_classes")
        self.K = check_positive_int(K, "K")
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.version = 0

    def param_names(self, k: int | None = None) -> list[str]:
        """Names of the parameters in the depth-``k`` prefix (all when ``k`` is None)."""
        k = self.K if k is None else check_depth(k, self.K)
        names = ["pre.W", "pre.b"]
        for m in range(1, k + 1):
            names += block_param_names(m)
        return names + ["head.W", "head.b"]

    def prefix_param_count(self, k: int) -> int:
        return int(sum(self.params[n].size for n in self.param_names(k)))

    @property
    def n_params(self) -> int:
        return self.prefix_param_count(self.K)

    def get_prefix(self, k: int) -> dict[str, np.ndarray]:
        """Copies of the depth-``k`` prefix weights."""
        return {n: self.params[n].copy() for n in self.param_names(k)}

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        for name, value in weights.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if value.shape != self.params[name].shape:
                raise ValueError(
                    f"shape mismatch for {name}: {value.shape} != {self.params[name].shape}")
            self.params[name] = np.array(value, dtype=np.float64, copy=True)
        self.touch()

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "ResidualNet":
        other = ResidualNet(self.input_dim, self.hidden_dim, self.num_classes, self.K, self.seed)
        other.params = {n: v.copy() for n, v in self.params.items()}
        return other

    def __repr__(self) -> str:
        return (f"ResidualNet(input_dim={self.input_dim}, hidden_dim={self.hidden_dim}, "
                f"num_classes={self.num_classes}, K={self.K})")


def init_net(input_dim: int, hidden_dim: int, num_classes: int, K: int, seed: int) -> ResidualNet:
    """He fan-in init for dense layers; the second layer of each branch starts at zero.

    Every block is therefore the identity map right after initialisation.
    """
    net = ResidualNet(input_dim, hidden_dim, num_classes, K, seed)
    rng = np.random.default_rng(seed)
    h = net.hidden_dim

    def he(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)

    net.params["pre.W"] = he(net.input_dim, h)
    net.params["pre.b"] = np.zeros(h)
    for m in range(1, net.K + 1):
        net.params[f"block{m}.W1"] = he(h, h)
        net.params[f"block{m}.b1"] = np.zeros(h)
        net.params[f"block{m}.W2"] = np.zeros((h, h))
        net.params[f"block{m}.b2"] = np.zeros(h)
    net.params["head.W"] = rng.standard_normal((h, net.num_classes)) * np.sqrt(1.0 / h)
    net.params["head.b"] = np.zeros(net.num_classes)
    return net


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass at ``depth``.

    ``stream[j]`` is the residual stream after block ``j`` (``stream[0]`` is the
    pre-layer output) and ``features[j]`` its normalized read-out, so every
    shallower prefix's feature is available from one deep pass.
    """
    depth: int
    x: np.ndarray
    pre_z: np.ndarray
    stream: list[np.ndarray]
    features: list[np.ndarray]
    inv_std: list[np.ndarray]
    block_z: list[np.ndarray]
    block_a: list[np.ndarray]
    logits: np.ndarray
    net_version: int

    def feature(self, j: int) -> np.ndarray:
        if not 0 <= j <= self.depth:
            raise IndexError(f"feature {j} not available from a depth-{self.depth} trace")
        return self.features[j]


@dataclass
class GradientSet:
    """One gradient array per parameter; entries past ``depth`` are zero."""
    grads: dict[str, np.ndarray]
    depth: int
    active: list[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])


def head_logits(net: ResidualNet, feature: np.ndarray) -> np.ndarray:
    return feature @ net.params["head.W"] + net.params["head.b"]


def layer_norm(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = h - h.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + NORM_EPS)
    return centered * inv_std, inv_std


def layer_norm_backward(dout: np.ndarray, out: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    return inv_std * (dout - dout.mean(axis=1, keepdims=True)
                      - out * (dout * out).mean(axis=1, keepdims=True))


def forward_prefix(net: ResidualNet, x, k: int) -> ForwardTrace:
    k = check_depth(k, net.K)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"expected input of shape (batch, {net.input_dim}), got {x.shape}")
    p = net.params
    pre_z = x @ p["pre.W"] + p["pre.b"]
    h = np.maximum(pre_z, 0.0)
    stream, zs, acts = [h], [], []
    for m in range(1, k + 1):
        z = h @ p[f"block{m}.W1"] + p[f"block{m}.b1"]
        a = np.maximum(z, 0.0)
        h = h + (a @ p[f"block{m}.W2"] + p[f"block{m}.b2"])
        zs.append(z)
        acts.append(a)
        stream.append(h)
    normed = [layer_norm(s) for s in stream]
    features = [f for f, _ in normed]
    return ForwardTrace(depth=k, x=x, pre_z=pre_z, stream=stream, features=features,
                        inv_std=[s for _, s in normed], block_z=zs, block_a=acts,
                        logits=head_logits(net, features[k]), net_version=net.version)


def backward_prefix(net: ResidualNet, trace: ForwardTrace, loss_grad_at_logits, k: int,
                    feature_grads: dict[int, np.ndarray] | None = None) -> GradientSet:
    """Reverse-mode gradients of a loss evaluated at depth ``k``.

    ``loss_grad_at_logits`` is the gradient at ``head(features[k])``. Optional
    ``feature_grads`` inject extra upstream gradient at the normalized
    ``features[j]`` for ``0 <= j <= k`` (used by the distillation penalties).
    ``trace`` may come from a deeper pass than ``k``; only its first ``k``
    blocks are read.
    """
    k = check_depth(k, net.K)
    if trace.net_version != net.version:
        raise StaleTraceError("net was modified after this trace was recorded")
    if k > trace.depth:
        raise ValueError(f"trace has depth {trace.depth}, cannot backpropagate from depth {k}")
    feature_grads = feature_grads or {}
    p = net.params
    grads = {n: np.zeros_like(v) for n, v in p.items()}

    def to_stream(j, dfeat):
        return layer_norm_backward(dfeat, trace.features[j], trace.inv_std[j])

    dlogits = np.asarray(loss_grad_at_logits, dtype=np.float64)
    grads["head.W"] = trace.features[k].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dfeat = dlogits @ p["head.W"].T
    if k in feature_grads:
        dfeat = dfeat + feature_grads[k]
    dh = to_stream(k, dfeat)

    for m in range(k, 0, -1):
        a, z, h_prev = trace.block_a[m - 1], trace.block_z[m - 1], trace.stream[m - 1]
        grads[f"block{m}.W2"] = a.T @ dh
        grads[f"block{m}.b2"] = dh.sum(axis=0)
        dz = (dh @ p[f"block{m}.W2"].T) * (z > 0)
        grads[f"block{m}.W1"] = h_prev.T @ dz
        grads[f"block{m}.b1"] = dz.sum(axis=0)
        dh = dh + dz @ p[f"block{m}.W1"].T
        if m - 1 in feature_grads:
            dh = dh + to_stream(m - 1, feature_grads[m - 1])

    dz0 = dh * (trace.pre_z > 0)
    grads["pre.W"] = trace.x.T @ dz0
    grads["pre.b"] = dz0.sum(axis=0)
    return GradientSet(grads=grads, depth=k, active=net.param_names(k))


class SGD:
    """SGD with momentum and L2 weight decay restricted to a prefix.

    ``v <- momentum * v + g + weight_decay * w``; ``w <- w - lr * v``. Velocity
    buffers for parameters outside the prefix are left untouched.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not lr >= 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if not weight_decay >= 0:
            raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, net: ResidualNet, grads: GradientSet, k: int, lr: float | None = None) -> None:
        k = check_depth(k, net.K)
        if grads.depth > k:
            raise ValueError(f"gradients computed at depth {grads.depth} cannot update prefix {k}")
        lr = self.lr if lr is None else lr
        names = net.param_names(k)
        for name in names:
            if not np.all(np.isfinite(grads[name])):
                raise DivergenceError(f"non-finite gradient for {name} at depth {k}")
        for name in names:
            w = net.params[name]
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * w
            v = self.velocity.get(name)
            v = self.momentum * v + g if (self.momentum and v is not None) else g.copy()
            self.velocity[name] = v
            net.params[name] = w - lr * v
        net.touch()


def sgd_step(net: ResidualNet, grads: GradientSet, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, k: int | None = None,
             velocity: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Functional form of :meth:`SGD.step`; returns the updated velocity dict."""
    opt = SGD(lr, momentum, weight_decay)
    if velocity is not None:
        opt.velocity = velocity
    opt.step(net, grads, grads.depth if k is None else k)
    return opt.velocity


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(net: ResidualNet, path) -> Path:
    """Write ``manifest.txt`` plus ``weights.bin`` (little-endian float64) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = net.param_names()
    lines = [
        f"format_version={CHECKPOINT_FORMAT_VERSION}",
        f"K={net.K}",
        f"input_dim={net.input_dim}",
        f"hidden_dim={net.hidden_dim}",
        f"num_classes={net.num_classes}",
        f"seed={'' if net.seed is None else net.seed}",
        "arrays=" + ",".join(f"{n}:{'x'.join(map(str, net.params[n].shape))}" for n in names),
    ]
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    with open(path / "weights.bin", "wb") as fh:
        for n in names:
            fh.write(np.ascontiguousarray(net.params[n], dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> ResidualNet:
    path = Path(path)
    meta = {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    if int(meta.get("format_version", -1)) != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {meta.get('format_version')}")
    net = ResidualNet(int(meta["input_dim"]), int(meta["hidden_dim"]), int(meta["num_classes"]),
                      int(meta["K"]), int(meta["seed"]) if meta.get("seed") else None)
    raw = (path / "weights.bin").read_bytes()
    offset = 0
    for entry in meta["arrays"].split(","):
        name, _, shape_s = entry.partition(":")
        shape = tuple(int(s) for s in shape_s.split("x"))
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise ValueError(f"weights.bin truncated while reading {name}")
        net.params[name] = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)),
                                         offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise ValueError("weights.bin has trailing bytes")
    if list(net.params) != net.param_names():
        raise ValueError("manifest array order does not match the network layout")
    return net
