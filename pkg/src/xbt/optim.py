"""AdamW with decoupled weight decay, parameter groups, and the freezing
policies used to realize the parameter-efficiency training options."""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8

POLICIES = ("full_tune", "lora_only", "base", "xbt")


@dataclass
class ParamGroup:
    names: tuple[str, ...]
    lr: float
    weight_decay: float
    trainable: bool = True

    def __post_init__(self):
        if self.trainable and self.lr <= 0:
            raise ValueError("trainable group needs lr > 0")


@dataclass
class AdamW:
    """Standard bias-corrected Adam plus multiplicative decay p *= 1 - lr*wd
    applied before the moment update. Frozen parameters are never touched."""

    params: dict[str, np.ndarray]
    groups: list[ParamGroup]
    betas: tuple[float, float] = DEFAULT_BETAS
    eps: float = DEFAULT_EPS
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for g in self.groups:
            for name in g.names:
                if name in seen:
                    raise ValueError(f"parameter {name} in more than one group")
                if name not in self.params:
                    raise ValueError(f"unknown parameter {name}")
                seen.add(name)
        missing = set(self.params) - seen
        if missing:
            raise ValueError(f"parameters not covered by any group: {sorted(missing)}")
        for g in self.groups:
            if not g.trainable:
                continue
            for name in g.names:
                if name not in self.m:
                    self.m[name] = np.zeros_like(self.params[name])
                    self.v[name] = np.zeros_like(self.params[name])

    @classmethod
    def simple(
        cls,
        params: dict[str, np.ndarray],
        lr: float,
        weight_decay: float,
        trainable: dict[str, bool] | None = None,
        betas=DEFAULT_BETAS,
        eps=DEFAULT_EPS,
    ) -> "AdamW":
        """One learning rate for everything, with an optional trainability map."""
        if trainable is None:
            trainable = {name: True for name in params}
        on = tuple(sorted(n for n in params if trainable.get(n, True)))
        off = tuple(sorted(n for n in params if not trainable.get(n, True)))
        groups = [ParamGroup(on, lr, weight_decay, trainable=True)]
        if off:
            groups.append(ParamGroup(off, lr, weight_decay, trainable=False))
        return cls(params=params, groups=groups, betas=betas, eps=eps)

    def trainable_names(self) -> list[str]:
        return [n for g in self.groups if g.trainable for n in g.names]

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for g in self.groups:
            if not g.trainable:
                continue
            for name in g.names:
                p = self.params[name]
                grad = grads[name]
                if grad.shape != p.shape:
                    raise ValueError(f"gradient shape mismatch for {name}")
                if g.weight_decay:
                    p *= 1.0 - g.lr * g.weight_decay
                m = self.m[name]
                v = self.v[name]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                p -= g.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for k, a in state["m"].items():
            self.m[k] = a.copy()
        for k, a in state["v"].items():
            self.v[k] = a.copy()


def freezing_policy(policy: str, param_names) -> dict[str, bool]:
    """Trainability map over the combined projection + adapter parameters.

    full_tune and base train everything; lora_only trains only adapter
    parameters; xbt trains the projection's layer-norm gains/shifts plus
    the adapters.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown freezing policy {policy!r}, expected one of {POLICIES}")
    out = {}
    for name in param_names:
        is_adapter = name.startswith("adapter_")
        if policy in ("full_tune", "base"):
            out[name] = True
        elif policy == "lora_only":
            out[name] = is_adapter
        else:  # xbt: layer-norm-only fine-tuning of the projection
            parts = name.split(".")
            is_phi_ln = parts[-1] in ("gamma", "beta") and any(
                p.startswith("ln") for p in parts[:-1]
            )
            out[name] = is_adapter or is_phi_ln
    return out


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global l2 norm is <= max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm
