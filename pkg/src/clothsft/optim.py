"""Optimization machinery: parameter groups, frame schedule, Adam updates.

Each parameter group carries its own learning rate and box constraints; the
update rule is bias-corrected adaptive moment estimation followed by
projection into the box. Defaults reproduce the published per-parameter
initial values, limits and learning rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamSpec:
    """One optimizable group: initial value, box limits, learning rate."""

    name: str
    initial: np.ndarray
    lr: float
    lower: float = -math.inf
    upper: float = math.inf

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError(f"{self.name}: negative learning rate")
        if self.lower > self.upper:
            raise ValueError(f"{self.name}: empty box [{self.lower}, {self.upper}]")
        if np.any(self.initial < self.lower) or np.any(self.initial > self.upper):
            raise ValueError(f"{self.name}: initial value outside box")


def default_sft_specs(n_dynamic: int, n_vertices: int) -> list[ParamSpec]:
    """Reconstruction parameter groups with published defaults."""
    return [
        ParamSpec("log10_stretch", np.float64(np.log10(200.0)), 0.02, 1.0, 3.0),
        ParamSpec("log10_bend", np.float64(-3.0), 0.02, -4.0, -2.0),
        ParamSpec("log10_shear", np.float64(-4.0), 0.02, -5.0, -2.0),
        ParamSpec("constant_force", np.array([0.0, -1.0, 0.0]), 0.1),
        ParamSpec("dynamic_forces", np.zeros((n_dynamic, n_vertices, 3)), 0.2),
    ]


def default_texture_spec(height: int, width: int) -> ParamSpec:
    return ParamSpec("texture", np.full((height, width, 3), 0.5), 0.05, 0.0, 1.0)


@dataclass
class Schedule:
    """Progressive frame activation plus epoch budgets for both phases.

    Optimization starts on ``initial_frames`` dynamic frames and activates one
    more every ``frames_added_every`` epochs until all frames participate,
    then runs ``epochs_after_last_frame`` more epochs.
    """

    initial_frames: int = 3
    frames_added_every: int = 5
    epochs_after_last_frame: int = 200
    texture_phase_epochs: int = 400

    def validate(self) -> None:
        if self.initial_frames < 1:
            raise ValueError("initial_frames must be >= 1")
        if self.frames_added_every < 1:
            raise ValueError("frames_added_every must be >= 1")

    def active_frames(self, epoch: int, n_dynamic: int) -> int:
        """Dynamic frames participating in the given (0-based) epoch."""
        return min(self.initial_frames + epoch // self.frames_added_every,
                   n_dynamic)

    def total_epochs(self, n_dynamic: int) -> int:
        ramp = self.frames_added_every * max(n_dynamic - self.initial_frames, 0)
        return ramp + self.epochs_after_last_frame


class AdamOptimizer:
    """Per-group adaptive moment estimation with box projection.

    beta1=0.9, beta2=0.999, eps=1e-8; the step count is shared across groups
    (every group updates every epoch, with zero gradient if unused).
    """

    def __init__(self, specs: list[ParamSpec], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter group names")
        for s in specs:
            s.validate()
        self.specs = {s.name: s for s in specs}
        self.params = {s.name: np.array(s.initial, dtype=float, copy=True)
                       for s in specs}
        self.m = {s.name: np.zeros_like(self.params[s.name]) for s in specs}
        self.v = {s.name: np.zeros_like(self.params[s.name]) for s in specs}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        unknown = set(grads) - set(self.params)
        if unknown:
            raise KeyError(f"gradients for unknown groups: {sorted(unknown)}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=float)
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.specs[name].lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= update
            spec = self.specs[name]
            np.clip(p, spec.lower, spec.upper, out=p)

    def state_dict(self) -> dict:
        return {"t": self.t,
                "params": {k: v.copy() for k, v in self.params.items()},
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.params[name] = np.array(state["params"][name], dtype=float)
            self.m[name] = np.array(state["m"][name], dtype=float)
            self.v[name] = np.array(state["v"][name], dtype=float)
