"""Planar rigid-body models, contact frames and actuation maps.

A model is a tree of one-degree-of-freedom joints expressed in the world
``(x, z)`` plane. A floating base is expanded into a prismatic-x, a
prismatic-z and a revolute pitch joint, so the generalized coordinates are
``(x, z, pitch, joints...)`` and the base velocity is the world-frame
velocity of the base origin.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..manifold import ManifoldSpec

REVOLUTE = 0
PRISMATIC = 1
GRAVITY = 9.81
PINV_RCOND = 1e-10


class ModelSpecError(ValueError):
    """A model description is malformed."""


@dataclass(frozen=True)
class ContactFrame:
    name: str
    body: int
    offset: tuple
    dim: int = 2


@dataclass
class ContactSet:
    """Active point contacts with Baumgarte gains.

    ``dim`` 1 constrains the vertical motion only, 2 the full planar point.
    ``refs`` holds one position target per constraint row; ``nan`` disables
    position feedback on that row.
    """

    frames: tuple = ()
    kp: float = 0.0
    kd: float = 50.0
    refs: np.ndarray = None

    def __post_init__(self):
        self.frames = tuple(self.frames)
        if self.refs is None:
            self.refs = self._default_refs()
        self.refs = np.asarray(self.refs, dtype=float)
        if self.refs.shape != (self.nf,):
            raise ValueError(f"refs must have {self.nf} entries")

    def _default_refs(self):
        # ground height for vertical rows, no horizontal anchoring
        return np.array([0.0 if axis == 1 else np.nan for axis in self.row_axes()])

    @property
    def nc(self):
        return len(self.frames)

    @property
    def nf(self):
        return sum(f.dim for f in self.frames)

    @property
    def names(self):
        return tuple(f.name for f in self.frames)

    def row_axes(self):
        """World axis (0 = x, 1 = z) of every constraint row."""
        axes = []
        for f in self.frames:
            axes.extend([1] if f.dim == 1 else [0, 1])
        return axes

    def with_refs(self, refs):
        return ContactSet(self.frames, self.kp, self.kd, refs)

    def expand_forces(self, lam):
        """Stacked row forces to ``(nc, 2)`` world forces."""
        lam = np.asarray(lam, dtype=float)
        out = np.zeros((self.nc, 2))
        r = 0
        for i, f in enumerate(self.frames):
            if f.dim == 1:
                out[i, 1] = lam[r]
            else:
                out[i] = lam[r:r + 2]
            r += f.dim
        return out


def _vec2(value, what):
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (2,):
        raise ModelSpecError(f"{what} must have two entries")
    return arr


@dataclass
class PlanarModel:
    """Joint arrays consumed by the dynamics kernel plus naming metadata."""

    name: str
    parent: np.ndarray
    jtype: np.ndarray
    jpos: np.ndarray
    jangle: np.ndarray
    jaxis: np.ndarray
    mass: np.ndarray
    com: np.ndarray
    inertia: np.ndarray
    floating: bool = False
    joint_names: tuple = ()
    wrap: tuple = ()
    frames: dict = field(default_factory=dict)
    gravity: float = GRAVITY

    def __post_init__(self):
        n = len(self.parent)
        if np.any(self.mass < 0) or np.any(self.inertia < 0):
            raise ModelSpecError("masses and inertias must be non-negative")
        for i, p in enumerate(self.parent):
            if p >= i:
                raise ModelSpecError("joints must be listed parents first")
        if np.sum(self.mass) <= 0:
            raise ModelSpecError("model has no mass")
        self.nv = n

    @property
    def nq(self):
        return self.nv

    @property
    def nx(self):
        return 2 * self.nv

    @property
    def nj(self):
        return self.nv - 3 if self.floating else self.nv

    @property
    def total_mass(self):
        return float(self.mass.sum())

    def manifold(self):
        return ManifoldSpec(2 * self.nv, wrap_indices=self.wrap, nq=self.nv)

    def body_index(self, name):
        if name in self.joint_names:
            return self.joint_names.index(name)
        raise ModelSpecError(f"unknown link {name!r}")

    def contact_set(self, names, kp=0.0, kd=50.0, refs=None):
        try:
            frames = [self.frames[n] for n in names]
        except KeyError as exc:
            raise ModelSpecError(f"unknown contact frame {exc.args[0]!r}") from None
        return ContactSet(frames, kp, kd, refs)

    def kernel_args(self):
        return (self.parent, self.jtype, self.jpos, self.jangle, self.jaxis, self.mass, self.com, self.inertia)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls._from_dict(d)
        except (KeyError, TypeError) as exc:
            raise ModelSpecError(f"malformed model description: {exc}") from None

    @classmethod
    def _from_dict(cls, d):
        base = d.get("base", {"type": "fixed"})
        floating = base.get("type", "fixed") == "floating"
        parent, jtype, jpos, jangle, jaxis = [], [], [], [], []
        mass, com, inertia, names, wrap = [], [], [], [], []

        def add(name, par, typ, pos, angle, axis, m, c, inn):
            names.append(name)
            parent.append(par)
            jtype.append(typ)
            jpos.append(pos)
            jangle.append(angle)
            jaxis.append(axis)
            mass.append(m)
            com.append(c)
            inertia.append(inn)

        if floating:
            add("base_x", -1, PRISMATIC, (0.0, 0.0), 0.0, (1.0, 0.0), 0.0, (0.0, 0.0), 0.0)
            add("base_z", 0, PRISMATIC, (0.0, 0.0), 0.0, (0.0, 1.0), 0.0, (0.0, 0.0), 0.0)
            add(base.get("name", "base"), 1, REVOLUTE, (0.0, 0.0), 0.0, (0.0, 0.0),
                float(base["mass"]), _vec2(base.get("com", (0, 0)), "base com"), float(base.get("inertia", 0.0)))
            wrap.append(2)
            root = 2
        else:
            root = -1
        offset = len(names)
        link_names = [ln["name"] for ln in d.get("links", [])]
        for i, ln in enumerate(d.get("links", [])):
            par = ln.get("parent")
            if par is None:
                pidx = root
            elif par in link_names[:i]:
                pidx = offset + link_names.index(par)
            elif floating and par == names[2]:
                pidx = root
            else:
                raise ModelSpecError(f"link {ln['name']!r}: unknown or later parent {par!r}")
            typ = {"revolute": REVOLUTE, "prismatic": PRISMATIC}.get(ln.get("joint", "revolute"))
            if typ is None:
                raise ModelSpecError(f"link {ln['name']!r}: unknown joint type {ln.get('joint')!r}")
            if float(ln["mass"]) <= 0:
                raise ModelSpecError(f"link {ln['name']!r}: mass must be positive")
            axis = _vec2(ln.get("axis", (1.0, 0.0)), "axis")
            if typ == PRISMATIC:
                axis = axis / np.linalg.norm(axis)
            if ln.get("continuous", False) and typ == REVOLUTE:
                wrap.append(len(names))
            add(ln["name"], pidx, typ, _vec2(ln.get("origin", (0, 0)), "origin"), float(ln.get("angle", 0.0)),
                axis, float(ln["mass"]), _vec2(ln.get("com", (0, 0)), "com"), float(ln.get("inertia", 0.0)))
        frames = {}
        for c in d.get("contacts", []):
            body = c["link"]
            if body not in names:
                raise ModelSpecError(f"contact {c['name']!r}: unknown link {body!r}")
            dim = int(c.get("dim", 2))
            if dim not in (1, 2):
                raise ModelSpecError(f"contact {c['name']!r}: dim must be 1 or 2")
            frames[c["name"]] = ContactFrame(c["name"], names.index(body), tuple(_vec2(c.get("offset", (0, 0)), "offset")), dim)
        g = d.get("gravity", [0.0, -GRAVITY])
        g = _vec2(g, "gravity")
        if abs(g[0]) > 0:
            raise ModelSpecError("gravity must be vertical")
        return cls(
            name=d.get("name", "model"),
            parent=np.array(parent, dtype=np.int64), jtype=np.array(jtype, dtype=np.int64),
            jpos=np.array(jpos, dtype=float).reshape(-1, 2), jangle=np.array(jangle, dtype=float),
            jaxis=np.array(jaxis, dtype=float).reshape(-1, 2), mass=np.array(mass, dtype=float),
            com=np.array(com, dtype=float).reshape(-1, 2), inertia=np.array(inertia, dtype=float),
            floating=floating, joint_names=tuple(names), wrap=tuple(wrap), frames=frames, gravity=float(-g[1]),
        )

    @classmethod
    def load(cls, path):
        with open(Path(path)) as fh:
            return cls.from_dict(json.load(fh))


def pinv_derivative(A, dA):
    """Derivative of the pseudoinverse of a full-column-rank ``A`` along ``dA``."""
    Ap = np.linalg.pinv(A, rcond=PINV_RCOND)
    AtA_inv = np.linalg.inv(A.T @ A)
    return -Ap @ dA @ Ap + AtA_inv @ dA.T @ (np.eye(A.shape[0]) - A @ Ap)


class Actuation:
    """Generalized forces ``A(q) tau`` produced by joint efforts ``tau``.

    Subclasses provide the effort map, its configuration derivative and an
    orthonormal basis of the directions it cannot reach (used by the
    condensed constraint).
    """

    nv = 0
    ntau = 0

    def matrix(self, q):
        raise NotImplementedError

    def matrix_derivative(self, q):
        """``dA[:, :, j] = d A / d q_j``."""
        return np.zeros((self.nv, self.ntau, self.nv))

    def under_basis(self, q):
        raise NotImplementedError

    def under_basis_derivative(self, q):
        """``dU[:, :, j] = d U / d q_j``."""
        return np.zeros((self.nv, self.nv - self.ntau, self.nv))

    @property
    def n_under(self):
        return self.nv - self.ntau

    def apply(self, q, v, tau):
        return self.matrix(q) @ np.asarray(tau, dtype=float)

    def apply_derivatives(self, q, v, tau):
        """``(dA/dq, dA/dv, dA/dtau)`` of ``A(q) tau``."""
        dA = self.matrix_derivative(q)
        return np.einsum("ikj,k->ij", dA, tau), np.zeros((self.nv, self.nv)), self.matrix(q)

    def selection(self, q):
        B = self.matrix(q)
        return np.eye(self.nv) - B @ np.linalg.pinv(B, rcond=PINV_RCOND)

    def pinv(self, q):
        return np.linalg.pinv(self.matrix(q), rcond=PINV_RCOND)

    def pinv_derivative(self, q):
        """``dP[:, :, j] = d A^+ / d q_j``."""
        A = self.matrix(q)
        dA = self.matrix_derivative(q)
        out = np.zeros((self.ntau, self.nv, self.nv))
        for j in range(self.nv):
            if np.any(dA[:, :, j]):
                out[:, :, j] = pinv_derivative(A, dA[:, :, j])
        return out


class JointActuation(Actuation):
    """Independent efforts on a subset of joints."""

    def __init__(self, nv, actuated):
        self.nv = int(nv)
        self.actuated = tuple(int(i) for i in actuated)
        self.ntau = len(self.actuated)
        self.unactuated = tuple(i for i in range(self.nv) if i not in self.actuated)
        self._B = np.zeros((self.nv, self.ntau))
        for k, i in enumerate(self.actuated):
            self._B[i, k] = 1.0
        self._U = np.zeros((self.nv, len(self.unactuated)))
        for k, i in enumerate(self.unactuated):
            self._U[i, k] = 1.0

    def matrix(self, q):
        return self._B

    def under_basis(self, q):
        return self._U

    def pinv(self, q):
        return self._B.T

    def pinv_derivative(self, q):
        return np.zeros((self.ntau, self.nv, self.nv))


class BirotorActuation(Actuation):
    """Two body-fixed thrusters at lateral arms ``+-arm`` on a floating body.

    Each thrust acts along the body vertical axis; the pitch index is 2.
    """

    def __init__(self, arm, nv=3):
        if nv != 3:
            raise ValueError("the birotor map acts on a single floating body")
        self.nv = 3
        self.ntau = 2
        self.arm = float(arm)

    def matrix(self, q):
        s, c = np.sin(q[2]), np.cos(q[2])
        d = self.arm
        return np.array([[-s, -s], [c, c], [d, -d]])

    def matrix_derivative(self, q):
        s, c = np.sin(q[2]), np.cos(q[2])
        out = np.zeros((3, 2, 3))
        out[:, :, 2] = [[-c, -c], [-s, -s], [0.0, 0.0]]
        return out

    def under_basis(self, q):
        s, c = np.sin(q[2]), np.cos(q[2])
        return np.array([[c], [s], [0.0]])

    def under_basis_derivative(self, q):
        s, c = np.sin(q[2]), np.cos(q[2])
        out = np.zeros((3, 1, 3))
        out[:, 0, 2] = [-s, c, 0.0]
        return out


def actuation_from_dict(model, d):
    """Build the actuation described by ``d`` (``{"type": "joints"|"birotor", ...}``)."""
    kind = d.get("type", "joints")
    if kind == "joints":
        names = d.get("joints")
        if names is None:
            first = 3 if model.floating else 0
            idx = list(range(first, model.nv))
        else:
            idx = [model.body_index(n) for n in names]
        return JointActuation(model.nv, idx)
    if kind == "birotor":
        if not model.floating or model.nv != 3:
            raise ModelSpecError("birotor actuation needs a single floating body")
        return BirotorActuation(float(d["arm"]))
    raise ModelSpecError(f"unknown actuation type {kind!r}")
