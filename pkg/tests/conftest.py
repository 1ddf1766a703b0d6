import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clothsft.geometry import build_template, compute_masses, rest_quantities


@pytest.fixture
def rng():
    return np.random.default_rng(20260825)


def make_mesh(rows=3, cols=3, spacing=0.1, pinned=None, density=0.1):
    mesh = build_template(rows, cols, spacing, pinned=pinned)
    mesh.masses = compute_masses(mesh, density)
    return mesh


def perturbed_positions(mesh, rng, scale=0.02):
    """Generic (non-collinear) deformed state for derivative checks."""
    return mesh.rest_positions + scale * rng.standard_normal(mesh.rest_positions.shape)


@pytest.fixture
def small_mesh():
    return make_mesh(3, 3, 0.1)


@pytest.fixture
def small_rest(small_mesh):
    return rest_quantities(small_mesh)
