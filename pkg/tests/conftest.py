import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_quad_mesh(margin: float = 0.0, z_fn=None):
    """Two triangles covering the unit UV square, mapped to z = z_fn(x, y)."""
    from alod.geometry import Mesh

    lo, hi = margin, 1.0 - margin
    uvs = np.array([[lo, lo], [hi, lo], [hi, hi], [lo, hi]])
    if z_fn is None:
        z_fn = lambda x, y: np.zeros_like(x)
    verts = np.stack([uvs[:, 0], uvs[:, 1], z_fn(uvs[:, 0], uvs[:, 1])], axis=1)
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    shapes = np.zeros((2, 4, 3))
    shapes[0, :, 2] = 1.0           # uniform lift
    shapes[1, :, 0] = [0, 1, 1, 0]  # shear
    return Mesh(vertices=verts, faces=faces, uvs=uvs, blendshapes=shapes)


@pytest.fixture
def quad_mesh():
    return make_quad_mesh()
