"""Shared test fixtures: compactly supported symmetric tensors and sample points."""

import numpy as np

from halfspace_penrose.metric_core import Field


def bump_tensor(dim, center, radius, matrix, tilt_axis=0, tilt=0.5):
    """``exp(1 - 1/(1 - q)) (1 + tilt x_k) S`` with ``q = |x - c|^2 / radius^2``, zero for ``q >= 1``."""
    c = np.asarray(center, float)
    S = np.asarray(matrix, float)
    e = np.zeros(dim)
    e[tilt_axis] = tilt

    def jets(x):
        z = (x - c) / radius
        q = np.sum(z * z, axis=-1)
        inside = q < 1
        a = 1.0 / (1.0 - np.where(inside, q, 0.0))
        b = np.where(inside, np.exp(1.0 - a), 0.0)
        dq = 2 * z / radius
        db = (-b * a**2)[..., None] * dq
        d2b = ((b * a**4 - 2 * b * a**3)[..., None, None] * dq[..., :, None] * dq[..., None, :]
               + (-b * a**2)[..., None, None] * 2 * np.eye(dim) / radius**2)
        lin = 1 + x @ e
        w = b * lin
        dw = db * lin[..., None] + b[..., None] * e
        d2w = d2b * lin[..., None, None] + db[..., :, None] * e + e[:, None] * db[..., None, :]
        return w, dw, d2w

    return Field(dim,
                 lambda x: jets(x)[0][..., None, None] * S,
                 lambda x: jets(x)[1][..., :, None, None] * S,
                 lambda x: jets(x)[2][..., :, :, None, None] * S,
                 shape=(dim, dim), name="bump-tensor")


def shell_points(rng, dim, count, r_lo, r_hi, half_space=False):
    x = rng.normal(size=(count, dim))
    x /= np.linalg.norm(x, axis=1)[:, None]
    x *= rng.uniform(r_lo, r_hi, (count, 1))
    if half_space:
        x[:, -1] = np.abs(x[:, -1])
    return x
