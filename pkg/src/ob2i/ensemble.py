"""Bootstrapped K-head value network in plain numpy.

A shared ReLU trunk feeds K heads.  Head parameters are stored stacked along
a leading K axis so all heads run in one batched matmul.  Gradients are
written out by hand; the trunk receives the sum of head gradients scaled by
``1/K`` and the whole gradient is then clipped to a global norm.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DimensionError, TrainingDivergence

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7
GRAD_CLIP = 10.0


def head_std(values, axis=0):
    """Population standard deviation across heads; exactly 0 where heads agree.

    Values are sorted along the head axis first so the result does not depend
    on head order, not even in the last bit.
    """
    values = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    mean = values.mean(axis=axis, keepdims=True)
    dev = values - mean
    # scale before squaring so tiny but nonzero spreads do not underflow to 0
    scale = np.max(np.abs(dev), axis=axis, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    std = np.squeeze(safe, axis=axis) * np.sqrt(np.mean((dev / safe) ** 2, axis=axis))
    agree = values.max(axis=axis) == values.min(axis=axis)
    return np.where(agree, 0.0, std)


@dataclass
class BootstrappedNet:
    """Shared trunk plus ``n_heads`` heads, each ending in ``n_actions`` linear outputs.

    ``params`` maps names to arrays.  Trunk layers are ``trunk.{i}.W`` with
    shape ``(fan_in, fan_out)``; head layers are ``head.{i}.W`` with shape
    ``(K, fan_in, fan_out)``.  ReLU follows every trunk layer and every head
    layer except the last.
    """

    input_dim: int
    trunk_widths: tuple
    head_widths: tuple
    n_actions: int
    n_heads: int
    seed: int | None
    params: dict = field(default_factory=dict)

    @property
    def n_trunk(self) -> int:
        return len(self.trunk_widths)

    @property
    def n_head_layers(self) -> int:
        return len(self.head_widths) + 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "BootstrappedNet":
        return copy.deepcopy(self)

    def manifest(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "trunk_widths": list(self.trunk_widths),
            "head_widths": list(self.head_widths),
            "n_actions": self.n_actions,
            "n_heads": self.n_heads,
            "seed": self.seed,
            "params": [[name, list(p.shape)] for name, p in self.params.items()],
        }


TargetNet = BootstrappedNet


def _uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_net(input_dim: int, trunk_widths=(64, 64), n_actions: int = 4, n_heads: int = 10,
             seed: int | None = 0, head_widths=()) -> BootstrappedNet:
    """Fan-in scaled uniform initialization; every head gets its own child seed."""
    if n_heads < 1:
        raise ValueError("need at least one head")
    trunk_widths, head_widths = tuple(trunk_widths), tuple(head_widths)
    children = np.random.SeedSequence(seed).spawn(n_heads + 1)
    trunk_rng = np.random.default_rng(children[0])
    params = {}
    fan_in = input_dim
    for i, width in enumerate(trunk_widths):
        params[f"trunk.{i}.W"] = _uniform_fan_in(trunk_rng, (fan_in, width), fan_in)
        params[f"trunk.{i}.b"] = _uniform_fan_in(trunk_rng, (width,), fan_in)
        fan_in = width
    dims = [fan_in, *head_widths, n_actions]
    head_W = [np.empty((n_heads, a, b)) for a, b in zip(dims[:-1], dims[1:])]
    head_b = [np.empty((n_heads, b)) for b in dims[1:]]
    for k in range(n_heads):
        rng = np.random.default_rng(children[k + 1])
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            head_W[i][k] = _uniform_fan_in(rng, (a, b), a)
            head_b[i][k] = _uniform_fan_in(rng, (b,), a)
    for i in range(len(head_W)):
        params[f"head.{i}.W"] = head_W[i]
        params[f"head.{i}.b"] = head_b[i]
    return BootstrappedNet(input_dim, trunk_widths, head_widths, n_actions, n_heads, seed, params)


def _forward(net: BootstrappedNet, X: np.ndarray, keep: bool = False):
    """Return ``Q`` of shape ``(K, B, A)`` and optionally the activations for backprop."""
    p = net.params
    acts = [X]
    h = X
    for i in range(net.n_trunk):
        h = np.maximum(h @ p[f"trunk.{i}.W"] + p[f"trunk.{i}.b"], 0.0)
        acts.append(h)
    W0 = p["head.0.W"]
    K, fan_in, fan_out = W0.shape
    z = (h @ W0.transpose(1, 0, 2).reshape(fan_in, K * fan_out)).reshape(-1, K, fan_out).transpose(1, 0, 2)
    z = z + p["head.0.b"][:, None, :]
    head_acts = []
    for i in range(1, net.n_head_layers):
        a = np.maximum(z, 0.0)
        head_acts.append(a)
        z = a @ p[f"head.{i}.W"] + p[f"head.{i}.b"][:, None, :]
    if keep:
        return z, acts, head_acts
    return z


def _check_input(net: BootstrappedNet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != net.input_dim:
        raise DimensionError(f"input has dimension {X.shape[-1]}, net expects {net.input_dim}")
    return X


def forward_batch(net: BootstrappedNet, states) -> np.ndarray:
    """Q-values for a batch of states, shape ``(K, B, n_actions)``."""
    X = _check_input(net, states)
    return _forward(net, X.reshape(-1, net.input_dim))


def forward_all(net: BootstrappedNet, state) -> np.ndarray:
    """Q-values of every head at one state, shape ``(K, n_actions)``."""
    X = _check_input(net, state)
    if X.ndim != 1:
        raise DimensionError("forward_all takes a single state vector")
    return _forward(net, X[None, :])[:, 0, :]


def ucb_bonus(net: BootstrappedNet, state, action: int) -> float:
    return float(head_std(forward_all(net, state)[:, action]))


def optimistic_q(net: BootstrappedNet, state, action: int, alpha: float) -> float:
    q = forward_all(net, state)[:, action]
    bonus = float(head_std(q))
    mean = float(q.mean())
    return mean if bonus == 0.0 else mean + alpha * bonus


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def backprop_mse(net: BootstrappedNet, states, actions, targets, trunk_scale: float | None = None,
                 clip_norm: float | None = GRAD_CLIP):
    """Gradients of ``(1/T) sum_k sum_t (y[k,t] - Q^k(s_t, a_t))^2``.

    Returns ``(loss, grads)`` where ``loss`` is the mean over heads and steps
    of the squared error.  Trunk gradients are multiplied by ``trunk_scale``
    (default ``1/K``) before the global-norm clip.
    """
    X = _check_input(net, states)
    actions = np.asarray(actions, dtype=np.int64)
    y = np.asarray(targets, dtype=np.float64)
    K, T = net.n_heads, X.shape[0]
    if y.shape != (K, T) or actions.shape != (T,):
        raise DimensionError(f"targets must be {(K, T)} and actions {(T,)}")
    if trunk_scale is None:
        trunk_scale = 1.0 / K
    p = net.params
    Q, acts, head_acts = _forward(net, X, keep=True)
    idx = np.arange(T)
    err = Q[:, idx, actions] - y
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise TrainingDivergence("non-finite loss")

    grads = {}
    dz = np.zeros_like(Q)
    dz[:, idx, actions] = 2.0 * err / T
    for i in range(net.n_head_layers - 1, 0, -1):
        a = head_acts[i - 1]
        grads[f"head.{i}.W"] = np.transpose(a, (0, 2, 1)) @ dz
        grads[f"head.{i}.b"] = dz.sum(axis=1)
        da = dz @ np.transpose(p[f"head.{i}.W"], (0, 2, 1))
        dz = da * (a > 0)
    h = acts[-1]
    W0 = p["head.0.W"]
    fan_in, fan_out = W0.shape[1], W0.shape[2]
    dz_flat = dz.transpose(1, 0, 2).reshape(T, K * fan_out)
    grads["head.0.W"] = (h.T @ dz_flat).reshape(fan_in, K, fan_out).transpose(1, 0, 2)
    grads["head.0.b"] = dz.sum(axis=1)
    if net.n_trunk:
        dh = (dz_flat @ W0.transpose(1, 0, 2).reshape(fan_in, K * fan_out).T) * trunk_scale
        for i in range(net.n_trunk - 1, -1, -1):
            dpre = dh * (acts[i + 1] > 0)
            grads[f"trunk.{i}.W"] = acts[i].T @ dpre
            grads[f"trunk.{i}.b"] = dpre.sum(axis=0)
            dh = dpre @ p[f"trunk.{i}.W"].T
    grads = {name: grads[name] for name in p}
    norm = global_norm(grads)
    if not np.isfinite(norm) or not np.isfinite(loss):
        raise TrainingDivergence("non-finite loss or gradient")
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return loss, grads


@dataclass
class AdamState:
    m: dict
    v: dict
    lr: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0

    @classmethod
    def for_params(cls, params: dict, lr: float = 1e-3, **kwargs) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()}, lr, **kwargs)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def sync_target(net: BootstrappedNet) -> TargetNet:
    return net.copy()


def _checkpoint_paths(path):
    """``(bin, json)`` paths; a trailing ``.bin``/``.json`` is dropped, other dots are kept."""
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".bin"), path.with_name(path.name + ".json")


def save_checkpoint(net: BootstrappedNet, path, adam: AdamState | None = None, extra: dict | None = None):
    """Write ``<path>.bin`` (little-endian float64, manifest order) and ``<path>.json``."""
    bin_path, json_path = _checkpoint_paths(path)
    manifest = net.manifest()
    arrays = [net.params[n] for n, _ in manifest["params"]]
    if adam is not None:
        manifest["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                            "eps": adam.eps, "step": adam.step}
        arrays += [adam.m[n] for n, _ in manifest["params"]] + [adam.v[n] for n, _ in manifest["params"]]
    if extra:
        manifest["extra"] = extra
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    bin_path.write_bytes(blob)
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns ``(net, adam_or_None, manifest)``."""
    bin_path, json_path = _checkpoint_paths(path)
    manifest = json.loads(json_path.read_text())
    flat = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    offset = 0

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape)) if shape else 1
        out = flat[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
        return out

    params = {name: take(tuple(shape)) for name, shape in manifest["params"]}
    net = BootstrappedNet(manifest["input_dim"], tuple(manifest["trunk_widths"]),
                          tuple(manifest["head_widths"]), manifest["n_actions"],
                          manifest["n_heads"], manifest["seed"], params)
    adam = None
    if "adam" in manifest:
        a = manifest["adam"]
        m = {name: take(tuple(shape)) for name, shape in manifest["params"]}
        v = {name: take(tuple(shape)) for name, shape in manifest["params"]}
        adam = AdamState(m, v, a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"])
    if offset != flat.size:
        raise ValueError("checkpoint size does not match its manifest")
    return net, adam, manifest
