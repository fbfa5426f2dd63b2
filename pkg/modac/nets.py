# -*- coding: utf-8 -*-
"""
Networks, parameter sets and the RMSProp optimizer.

Four network families share one builder: the manager (options followed by
primitive actions, plus a task value), the option-policies (K policy and
value heads), the option-rewards (K x |A| arctan outputs) and the
option-terminations (K sigmoid outputs).  Option networks read a two-channel
observation (agent, layout); only the manager sees the goal channel.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from modac import autodiff as ad
from modac.autodiff import Tensor
from modac.utils import get_logger

logger = get_logger("modac.nets")

ROLES = ("manager", "option_policy", "option_reward", "option_termination", "baseline")
TORSOS = ("conv2", "mlp")
ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}
HEAD_ACTIVATIONS = ("linear", "arctan", "sigmoid")


class NetworkInputError(ValueError):
    """Observation does not match the network's input contract."""


class OptimizerError(FloatingPointError):
    def __init__(self, parameter: str, detail: str):
        self.parameter = parameter
        super().__init__(f"{parameter}: {detail}")


@dataclass(frozen=True)
class HeadSpec:
    name: str
    groups: int
    size: int
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.groups < 1 or self.size < 1:
            raise ValueError(f"head '{self.name}' needs positive groups and size")
        if self.activation not in HEAD_ACTIVATIONS:
            raise ValueError(f"head '{self.name}': unknown activation '{self.activation}'")


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    in_channels: int
    grid: Tuple[int, int]
    heads: Tuple[HeadSpec, ...]
    torso: str = "conv2"
    filters: int = 32
    kernel: int = 2
    padding: str = "valid"
    dense: int = 256
    mlp_hidden: Tuple[int, ...] = (64,)
    activation: str = "relu"
    num_tasks: int = 0
    task_embedding: int = 0

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown network role '{self.role}'")
        if self.torso not in TORSOS:
            raise ValueError(f"unknown torso '{self.torso}', expected one of {TORSOS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if self.task_embedding and self.num_tasks < 1:
            raise ValueError("task embedding requires num_tasks >= 1")
        if self.torso == "conv2":
            h, w = self.conv_output_grid()
            if h < 1 or w < 1:
                raise ValueError(f"grid {self.grid} too small for two {self.kernel}x{self.kernel} convolutions")

    def conv_output_grid(self) -> Tuple[int, int]:
        h, w = self.grid
        if self.padding == "same":
            return h, w
        return h - 2 * (self.kernel - 1), w - 2 * (self.kernel - 1)

    def head(self, name: str) -> HeadSpec:
        for h in self.heads:
            if h.name == name:
                return h
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["grid"] = list(self.grid)
        data["mlp_hidden"] = list(self.mlp_hidden)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NetworkSpec":
        data = dict(data)
        data["grid"] = tuple(data["grid"])
        data["mlp_hidden"] = tuple(data.get("mlp_hidden", ()))
        data["heads"] = tuple(HeadSpec(**h) for h in data["heads"])
        return cls(**data)


def _torso_kwargs(torso: Mapping[str, Any] | None) -> Dict[str, Any]:
    kwargs = dict(torso or {})
    if "mlp_hidden" in kwargs:
        kwargs["mlp_hidden"] = tuple(kwargs["mlp_hidden"])
    if "grid" in kwargs:
        kwargs["grid"] = tuple(kwargs["grid"])
    return kwargs


def manager_spec(num_options: int, num_actions: int, grid: Tuple[int, int], in_channels: int = 3,
                 role: str = "manager", **torso: Any) -> NetworkSpec:
    """Manager: K option logits then |A| primitive logits, plus a task value."""
    if num_options < 0 or num_actions < 1:
        raise ValueError(f"manager needs K >= 0 and |A| >= 1, got K={num_options}, |A|={num_actions}")
    heads = (HeadSpec("policy", 1, num_options + num_actions), HeadSpec("value", 1, 1))
    return NetworkSpec(role=role, in_channels=in_channels, grid=tuple(grid), heads=heads, **_torso_kwargs(torso))


def _require_options(num_options: int, num_actions: int) -> None:
    if num_options < 1 or num_actions < 1:
        raise ValueError(f"option networks need K >= 1 and |A| >= 1, got K={num_options}, |A|={num_actions}")


def option_policy_spec(num_options: int, num_actions: int, grid: Tuple[int, int], in_channels: int = 2,
                       **torso: Any) -> NetworkSpec:
    _require_options(num_options, num_actions)
    heads = (HeadSpec("policy", num_options, num_actions), HeadSpec("value", num_options, 1))
    return NetworkSpec(role="option_policy", in_channels=in_channels, grid=tuple(grid), heads=heads,
                       **_torso_kwargs(torso))


def option_reward_spec(num_options: int, num_actions: int, grid: Tuple[int, int], in_channels: int = 2,
                       **torso: Any) -> NetworkSpec:
    _require_options(num_options, num_actions)
    heads = (HeadSpec("reward", num_options, num_actions, "arctan"),)
    return NetworkSpec(role="option_reward", in_channels=in_channels, grid=tuple(grid), heads=heads,
                       **_torso_kwargs(torso))


def option_termination_spec(num_options: int, grid: Tuple[int, int], in_channels: int = 2,
                            **torso: Any) -> NetworkSpec:
    _require_options(num_options, 1)
    heads = (HeadSpec("termination", num_options, 1, "sigmoid"),)
    return NetworkSpec(role="option_termination", in_channels=in_channels, grid=tuple(grid), heads=heads,
                       **_torso_kwargs(torso))


class ParamSet:
    """Ordered, named parameters of one network.

    Shapes are fixed at construction; :meth:`replace` swaps values only.
    """

    def __init__(self, role: str, entries: Mapping[str, Tensor] | Sequence[Tuple[str, Tensor]],
                 spec: NetworkSpec | None = None):
        if role not in ROLES:
            raise ValueError(f"unknown parameter role '{role}'")
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {role}: {names}")
        self.role = role
        self.spec = spec
        self._entries: Dict[str, Tensor] = {}
        for name, value in items:
            t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
            if t.name is None:
                t.name = f"{role}.{name}"
            self._entries[name] = t

    # mapping protocol
    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def tensors(self) -> List[Tensor]:
        return list(self._entries.values())

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._entries.items())

    def shapes(self) -> List[Tuple[int, ...]]:
        return [t.shape for t in self._entries.values()]

    @property
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    @property
    def is_differentiable(self) -> bool:
        """True when any entry carries a recorded graph (e.g. after an unrolled update)."""
        return any(t.node is not None for t in self._entries.values())

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._entries.values()])

    def unflatten(self, vector: np.ndarray, requires_grad: bool = True) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_parameters,):
            raise ValueError(f"expected a vector of {self.num_parameters} values, got shape {vector.shape}")
        out, offset = [], 0
        for name, t in self._entries.items():
            chunk = vector[offset:offset + t.size].reshape(t.shape)
            out.append((name, Tensor(chunk, requires_grad=requires_grad)))
            offset += t.size
        return ParamSet(self.role, out, self.spec)

    def replace(self, tensors: Sequence[Tensor]) -> "ParamSet":
        tensors = list(tensors)
        if len(tensors) != len(self._entries):
            raise ValueError(f"{self.role}: expected {len(self._entries)} tensors, got {len(tensors)}")
        out = []
        for (name, old), new in zip(self._entries.items(), tensors):
            if new.shape != old.shape:
                raise ValueError(f"{self.role}.{name}: shape {new.shape} differs from {old.shape}")
            out.append((name, new))
        return ParamSet(self.role, out, self.spec)

    def detached(self, requires_grad: bool = True) -> "ParamSet":
        """Fresh leaves with the same values, cut from any recorded history."""
        return ParamSet(self.role, [(n, Tensor(t.data, requires_grad=requires_grad)) for n, t in self._entries.items()],
                        self.spec)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {n: np.array(t.data) for n, t in self._entries.items()}

    def digest(self) -> str:
        h = hashlib.sha256(self.role.encode())
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"ParamSet(role={self.role}, tensors={len(self)}, parameters={self.num_parameters})"


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    values = rng.standard_normal(shape)
    bad = np.abs(values) > 2.0
    while bad.any():
        values[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(values) > 2.0
    return values * std


def init_params(spec: NetworkSpec, rng: np.random.Generator, role: str | None = None) -> ParamSet:
    """Truncated-normal fan-in weights, zero biases."""
    entries: List[Tuple[str, np.ndarray]] = []

    def layer(name: str, fan_in: int, shape: Tuple[int, ...]) -> None:
        entries.append((f"{name}.w", _truncated_normal(rng, shape, 1.0 / np.sqrt(fan_in))))
        entries.append((f"{name}.b", np.zeros(shape[0] if len(shape) == 4 else shape[-1])))

    c = spec.in_channels
    h, w = spec.grid
    if spec.torso == "conv2":
        k = spec.kernel
        layer("conv1", c * k * k, (spec.filters, c, k, k))
        layer("conv2", spec.filters * k * k, (spec.filters, spec.filters, k, k))
        oh, ow = spec.conv_output_grid()
        layer("dense", spec.filters * oh * ow, (spec.filters * oh * ow, spec.dense))
        features = spec.dense
    else:
        features = c * h * w
        for i, width in enumerate(spec.mlp_hidden):
            layer(f"mlp{i}", features, (features, width))
            features = width
    if spec.task_embedding:
        entries.append(("task_embed.w", _truncated_normal(rng, (spec.num_tasks, spec.task_embedding), 1.0)))
        features += spec.task_embedding
    for head in spec.heads:
        layer(f"head.{head.name}", features, (features, head.groups * head.size))
    return ParamSet(role or spec.role, [(n, Tensor(v, requires_grad=True)) for n, v in entries], spec)


def _as_obs(obs: Any) -> Tensor:
    return obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=np.float64))


def forward(params: ParamSet, obs: Any, task_ids: Optional[Sequence[int]] = None) -> Dict[str, Tensor]:
    """Runs the torso and every head; each head output has shape (N, groups, size)."""
    spec = params.spec
    if spec is None:
        raise NetworkInputError(f"{params.role}: parameter set carries no network spec")
    x = _as_obs(obs)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise NetworkInputError(
            f"{params.role} expects (N, {spec.in_channels}, H, W) observations, got shape {x.shape}")
    if tuple(x.shape[2:]) != tuple(spec.grid):
        raise NetworkInputError(f"{params.role} expects a {spec.grid} grid, got {tuple(x.shape[2:])}")
    n = x.shape[0]
    act = ACTIVATIONS[spec.activation]

    if spec.torso == "conv2":
        z = act(ad.conv2d(x, params["conv1.w"], params["conv1.b"], padding=spec.padding))
        z = act(ad.conv2d(z, params["conv2.w"], params["conv2.b"], padding=spec.padding))
        z = ad.reshape(z, (n, -1))
        z = act(ad.matmul(z, params["dense.w"]) + params["dense.b"])
    else:
        z = ad.reshape(x, (n, -1))
        for i in range(len(spec.mlp_hidden)):
            z = act(ad.matmul(z, params[f"mlp{i}.w"]) + params[f"mlp{i}.b"])

    if spec.task_embedding:
        if task_ids is None:
            raise NetworkInputError(f"{params.role} is conditioned on task ids but none were given")
        ids = np.asarray(task_ids, dtype=np.int64).reshape(-1)
        if ids.shape != (n,) or ids.min() < 0 or ids.max() >= spec.num_tasks:
            raise NetworkInputError(f"task ids {ids.tolist()} invalid for {spec.num_tasks} tasks and batch {n}")
        onehot = np.zeros((n, spec.num_tasks))
        onehot[np.arange(n), ids] = 1.0
        z = ad.concat([z, ad.matmul(Tensor(onehot), params["task_embed.w"])], axis=1)

    outputs: Dict[str, Tensor] = {}
    for head in spec.heads:
        y = ad.matmul(z, params[f"head.{head.name}.w"]) + params[f"head.{head.name}.b"]
        if head.activation == "arctan":
            y = ad.arctan(y)
        elif head.activation == "sigmoid":
            y = ad.sigmoid(y)
        outputs[head.name] = ad.reshape(y, (n, head.groups, head.size))
    return outputs


def manager_forward(params: ParamSet, obs: Any, task_ids: Optional[Sequence[int]] = None) -> Tuple[Tensor, Tensor]:
    """Returns (logits (N, K+|A|), values (N,))."""
    out = forward(params, obs, task_ids)
    n = out["policy"].shape[0]
    return ad.reshape(out["policy"], (n, -1)), ad.reshape(out["value"], (n,))


def option_forward(params: ParamSet, option_obs: Any) -> Tuple[Tensor, Tensor]:
    """Returns (logits (N, K, |A|), values (N, K))."""
    out = forward(params, option_obs)
    n, k, _ = out["value"].shape
    return out["policy"], ad.reshape(out["value"], (n, k))


def option_reward_forward(params: ParamSet, option_obs: Any) -> Tensor:
    """Per-option, per-action rewards (N, K, |A|) in (-pi/2, pi/2)."""
    return forward(params, option_obs)["reward"]


def option_termination_forward(params: ParamSet, option_obs: Any) -> Tensor:
    """Per-option termination probabilities (N, K) in (0, 1)."""
    out = forward(params, option_obs)["termination"]
    return ad.reshape(out, out.shape[:2])


# --- optimizer ---------------------------------------------------------------

@dataclass
class RmsPropState:
    accumulators: Dict[str, np.ndarray]
    decay: float = 0.99
    epsilon: float = 0.01
    momentum: float = 0.0
    moments: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: ParamSet, decay: float = 0.99, epsilon: float = 0.01, momentum: float = 0.0) -> "RmsPropState":
        acc = {n: np.zeros(t.shape) for n, t in params.items()}
        moments = {n: np.zeros(t.shape) for n, t in params.items()} if momentum else {}
        return cls(acc, decay, epsilon, momentum, moments)

    def copy(self) -> "RmsPropState":
        return RmsPropState({n: a.copy() for n, a in self.accumulators.items()}, self.decay, self.epsilon,
                            self.momentum, {n: m.copy() for n, m in self.moments.items()})


@dataclass
class StepInfo:
    grad_norm: float
    clip_scale: float
    preconditioner: Dict[str, np.ndarray]


def global_norm(grads: Sequence[Any]) -> float:
    total = 0.0
    for g in grads:
        data = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        total += float(np.sum(data * data))
    return float(np.sqrt(total))


def rmsprop_step(params: ParamSet, grads: Sequence[Any], state: RmsPropState, lr: float, clip_norm: float,
                 differentiable: bool = False, preconditioner: Optional[Mapping[str, np.ndarray]] = None,
                 norm: Optional[float] = None, clip_scale: Optional[float] = None,
                 ) -> Tuple[ParamSet, RmsPropState, StepInfo]:
    """One clipped RMSProp step.

    With ``differentiable`` the new parameters are graph tensors depending on
    ``grads``; the accumulator, clip scale and preconditioner enter as
    constants.  ``preconditioner`` and ``clip_scale`` replay previously
    applied values instead of deriving them from ``state``.  ``norm``
    overrides the clipping norm when several parameter sets share one global
    clip.
    """
    grads = list(grads)
    if len(grads) != len(params):
        raise ValueError(f"{params.role}: got {len(grads)} gradients for {len(params)} parameters")
    for (name, p), g in zip(params.items(), grads):
        data = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if data.shape != p.shape:
            raise ValueError(f"{params.role}.{name}: gradient shape {data.shape} differs from {p.shape}")
        if not np.all(np.isfinite(data)):
            raise OptimizerError(f"{params.role}.{name}", "non-finite gradient")

    grad_norm = global_norm(grads) if norm is None else float(norm)
    if clip_scale is not None:
        scale = float(clip_scale)
    else:
        scale = clip_norm / grad_norm if clip_norm > 0 and grad_norm > clip_norm else 1.0

    new_state = state.copy()
    applied: Dict[str, np.ndarray] = {}
    updated: List[Tensor] = []
    for (name, p), g in zip(params.items(), grads):
        g_data = (g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)) * scale
        acc = state.decay * state.accumulators[name] + (1.0 - state.decay) * g_data * g_data
        new_state.accumulators[name] = acc
        if preconditioner is not None:
            pre = np.asarray(preconditioner[name], dtype=np.float64)
        else:
            denom = np.sqrt(acc + state.epsilon)
            pre = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
        applied[name] = pre
        momentum_term = 0.0
        if state.momentum:
            moment = state.momentum * state.moments[name] + g_data * pre
            new_state.moments[name] = moment
            momentum_term = state.momentum * state.moments[name]
        if differentiable:
            g_t = g if isinstance(g, Tensor) else Tensor(g)
            step = ad.mul(g_t, Tensor(lr * scale * pre))
            if state.momentum:
                step = ad.add(step, Tensor(lr * momentum_term))
            new = ad.sub(p, step)
        else:
            new = Tensor(p.data - lr * (g_data * pre + momentum_term), requires_grad=True)
        new.name = p.name
        updated.append(new)
    return params.replace(updated), new_state, StepInfo(grad_norm, scale, applied)
