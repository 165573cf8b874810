"""State manifolds built from Euclidean and angle-wrapped coordinates."""
from dataclasses import dataclass

import numpy as np

PI = np.pi
TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Map angles to (-pi, pi]; values already in range are returned untouched."""
    theta = np.asarray(theta, dtype=float)
    wrapped = PI - np.mod(PI - theta, TWO_PI)
    return np.where((theta > PI) | (theta <= -PI), wrapped, theta)


@dataclass(frozen=True)
class ManifoldSpec:
    """Product of real lines and circles.

    States are flat vectors ``x = (q, v)``. Only the coordinates listed in
    ``wrap_indices`` live on the circle; the chart is the identity elsewhere,
    so the Jacobians of ``integrate`` and ``difference`` are identities and the
    point and tangent dimensions coincide.
    """

    nx: int
    wrap_indices: tuple = ()
    nq: int = None

    def __post_init__(self):
        object.__setattr__(self, "wrap_indices", tuple(int(i) for i in self.wrap_indices))
        for i in self.wrap_indices:
            if not 0 <= i < self.nx:
                raise ValueError(f"wrap index {i} outside state of size {self.nx}")
        if self.nq is None:
            object.__setattr__(self, "nq", self.nx)
        object.__setattr__(self, "_wrap", np.array(self.wrap_indices, dtype=np.int64))

    @property
    def nx_point(self):
        return self.nx

    @property
    def nx_tangent(self):
        return self.nx

    @property
    def nv(self):
        return self.nx - self.nq

    def _check(self, x, name):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.nx,):
            raise ValueError(f"{name} has shape {x.shape}, expected ({self.nx},)")
        return x

    def normalize(self, x):
        x = np.array(self._check(x, "x"), dtype=float)
        if self._wrap.size:
            x[self._wrap] = wrap_angle(x[self._wrap])
        return x

    def integrate(self, x, dx):
        """Return ``x (+) dx``."""
        x = self._check(x, "x")
        dx = self._check(dx, "dx")
        out = x + dx
        if self._wrap.size:
            out[self._wrap] = wrap_angle(out[self._wrap])
        return out

    def difference(self, x1, x0):
        """Return ``x1 (-) x0`` using the shortest arc on wrapped coordinates."""
        x1 = self._check(x1, "x1")
        x0 = self._check(x0, "x0")
        d = x1 - x0
        if self._wrap.size:
            d[self._wrap] = wrap_angle(d[self._wrap])
        return d

    def split(self, x):
        return x[: self.nq], x[self.nq:]

    def zero(self):
        return np.zeros(self.nx)


def symplectic_euler(q, v, a, dt, wrap_indices=()):
    """One semi-implicit Euler step: velocity first, then configuration."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    v_next = np.asarray(v, dtype=float) + np.asarray(a, dtype=float) * dt
    q_next = np.asarray(q, dtype=float) + v_next * dt
    if len(wrap_indices):
        idx = np.asarray(wrap_indices, dtype=np.int64)
        q_next[idx] = wrap_angle(q_next[idx])
    return q_next, v_next
