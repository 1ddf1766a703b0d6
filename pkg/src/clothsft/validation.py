"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .pipeline import SfTProblem


def check_problem(problem: SfTProblem) -> SfTProblem:
    if not isinstance(problem, SfTProblem):
        raise TypeError(f"expected SfTProblem, got {type(problem).__name__}")
    problem.validate()
    if not (np.isfinite(problem.target_rgb).all()
            and np.isfinite(problem.target_mask).all()):
        raise ValueError("targets contain non-finite values")
    if problem.target_rgb.min() < 0.0 or problem.target_rgb.max() > 1.0:
        raise ValueError("target rgb outside [0, 1]")
    return problem


def check_texture(texture: np.ndarray) -> np.ndarray:
    tex = np.asarray(texture, dtype=float)
    if tex.ndim != 3 or tex.shape[2] != 3 or min(tex.shape[:2]) < 2:
        raise ValueError(f"texture must be (H>=2, W>=2, 3), got {tex.shape}")
    if not np.isfinite(tex).all():
        raise ValueError("texture contains non-finite values")
    return tex


def check_positive_int(value, name: str) -> int:
    iv = int(value)
    if iv < 1:
        raise ValueError(f"{name} must be a positive integer, got {value}")
    return iv
