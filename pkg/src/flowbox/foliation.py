"""Product foliations on flow boxes as monotone graph families.

A foliation transverse to the vertical fibers of D x [0,1] is stored as a
family of sampled leaf graphs z = f_t(x, y), linear in the leaf index t and
bilinear in the base coordinates.  Leaves are indexed by their height over an
anchor point, so holonomy maps are genuine self-maps of [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel
from .kernel import COMPARISON_TOL, SOLVER_TOL

_SHAPES = ("rectangle", "annulus", "disk")


@dataclass(frozen=True)
class BaseDomain:
    """Base of a flow box: unit square, annulus [0,1] x S^1, or disk chart.

    nx, ny are node counts per axis.  The disk shares the rectangle's square
    chart; the annulus is periodic in y with nodes at j/ny (no seam
    duplicate).
    """

    shape: str
    nx: int
    ny: int

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ValueError(f"unknown base shape {self.shape!r}")
        if self.nx < 8 or self.ny < 8:
            raise ValueError("resolution must be at least 8 nodes per axis")

    @property
    def periodic_y(self) -> bool:
        return self.shape == "annulus"

    @property
    def x_nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx)

    @property
    def y_nodes(self) -> np.ndarray:
        if self.periodic_y:
            return np.arange(self.ny) / self.ny
        return np.linspace(0.0, 1.0, self.ny)

    def to_json(self) -> dict:
        return {"shape": self.shape, "nx": self.nx, "ny": self.ny}

    @classmethod
    def from_json(cls, data: dict) -> "BaseDomain":
        return cls(data["shape"], int(data["nx"]), int(data["ny"]))


def _bilinear_parts(base: BaseDomain, pts: np.ndarray):
    """Cell indices and weights for bilinear evaluation at pts (n, 2)."""
    pts = np.asarray(pts, dtype=float)
    x = np.clip(pts[..., 0], 0.0, 1.0)
    y = pts[..., 1]
    sx = x * (base.nx - 1)
    ix = np.clip(np.floor(sx).astype(int), 0, base.nx - 2)
    u = sx - ix
    if base.periodic_y:
        sy = np.mod(y, 1.0) * base.ny
        iy = np.floor(sy).astype(int) % base.ny
        jy = (iy + 1) % base.ny
        v = sy - np.floor(sy)
    else:
        y = np.clip(y, 0.0, 1.0)
        sy = y * (base.ny - 1)
        iy = np.clip(np.floor(sy).astype(int), 0, base.ny - 2)
        jy = iy + 1
        v = sy - iy
    return ix, ix + 1, iy, jy, u, v


def _eval_grids(values: np.ndarray, base: BaseDomain, pts: np.ndarray):
    """Bilinear evaluation of (m, nx, ny) grids at pts (n, 2) -> (m, n)."""
    ix, jx, iy, jy, u, v = _bilinear_parts(base, np.atleast_2d(pts))
    row0 = (1.0 - u) * values[:, ix, iy] + u * values[:, jx, iy]
    row1 = (1.0 - u) * values[:, ix, jy] + u * values[:, jx, jy]
    return (1.0 - v) * row0 + v * row1


def _leaf_gradients(family: "LeafFamily") -> np.ndarray:
    """Per-leaf gradients (m, nx, ny, 2) by central differences.

    One-sided second-order differences at non-periodic edges, wraparound on
    the annulus seam.
    """
    base = family.base
    vals = family.values
    dx = 1.0 / (base.nx - 1)
    gx = np.gradient(vals, dx, axis=1)
    if base.periodic_y:
        dy = 1.0 / base.ny
        gy = (np.roll(vals, -1, axis=2) - np.roll(vals, 1, axis=2)) / (2 * dy)
    else:
        dy = 1.0 / (base.ny - 1)
        gy = np.gradient(vals, dy, axis=2)
    return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True)
class LeafFamily:
    """Monotone family of sampled leaf graphs over a base domain.

    values[k] is the grid of f_{t[k]}; linear interpolation in t, bilinear in
    the base.  anchor is the grid node (ix, iy) where f_t = t.
    """

    base: BaseDomain
    t: np.ndarray
    values: np.ndarray
    anchor: tuple = (0, 0)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))
        if t.ndim != 1 or t.size < 2:
            raise ValueError("need at least the two boundary leaves")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise ValueError("leaf indices must run from 0 to 1")
        if not np.all(np.diff(t) > 0.0):
            raise ValueError("leaf indices must be strictly increasing")
        if vals.shape != (t.size, self.base.nx, self.base.ny):
            raise ValueError("values must have shape (len(t), nx, ny)")
        if not (np.all(vals[0] == 0.0) and np.all(vals[-1] == 1.0)):
            raise ValueError("boundary leaves must be exactly 0 and 1")
        if not np.all(np.diff(vals, axis=0) > 0.0):
            raise ValueError("leaves must be strictly increasing in t")
        ix, iy = self.anchor
        if not (0 <= ix < self.base.nx and 0 <= iy < self.base.ny):
            raise ValueError("anchor must be a grid node")
        if np.max(np.abs(vals[:, ix, iy] - t)) > SOLVER_TOL:
            raise ValueError("family is not anchored: f_t(x0) must equal t")

    @property
    def m(self) -> int:
        return self.t.size

    def values_at(self, pts) -> np.ndarray:
        """Sampled-leaf heights over base points: (m, n)."""
        return _eval_grids(self.values, self.base, pts)

    def leaves_at(self, ts) -> np.ndarray:
        """Interpolated leaf grids at arbitrary indices ts: (len(ts), nx, ny)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if ts.min() < -SOLVER_TOL or ts.max() > 1.0 + SOLVER_TOL:
            raise ValueError("leaf index outside [0, 1]")
        ts = np.clip(ts, 0.0, 1.0)
        k = np.clip(np.searchsorted(self.t, ts, side="right") - 1, 0, self.m - 2)
        u = (ts - self.t[k]) / (self.t[k + 1] - self.t[k])
        u = u[:, None, None]
        return (1.0 - u) * self.values[k] + u * self.values[k + 1]

    def evaluate(self, ts, pts) -> np.ndarray:
        """Heights f_{ts[i]}(pts[i]) for paired index/point arrays."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        heights = self.values_at(pts)
        if ts.size != heights.shape[1]:
            raise ValueError("evaluate pairs one index with one base point")
        k = np.clip(np.searchsorted(self.t, ts, side="right") - 1, 0, self.m - 2)
        u = (ts - self.t[k]) / (self.t[k + 1] - self.t[k])
        cols = np.arange(heights.shape[1])
        return (1.0 - u) * heights[k, cols] + u * heights[k + 1, cols]

    def refined(self, factor: int = 2) -> "LeafFamily":
        """Resample onto a grid refined by the given factor (same interpolant)."""
        if factor < 1:
            raise ValueError("factor must be a positive integer")
        nx2 = (self.base.nx - 1) * factor + 1
        ny2 = self.base.ny * factor if self.base.periodic_y \
            else (self.base.ny - 1) * factor + 1
        base2 = BaseDomain(self.base.shape, nx2, ny2)
        xs = base2.x_nodes
        ys = base2.y_nodes
        pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
        vals = self.values_at(pts).reshape(self.m, nx2, ny2)
        # boundary leaves and anchor column are exact by constant interpolation
        vals[0] = 0.0
        vals[-1] = 1.0
        ix, iy = self.anchor
        vals[:, ix * factor, iy * factor] = self.t
        return LeafFamily(base2, self.t, vals, (ix * factor, iy * factor))

    def to_json(self) -> dict:
        return {
            "base": self.base.to_json(),
            "t": self.t.tolist(),
            "values": self.values.tolist(),
            "anchor": list(self.anchor),
        }

    @classmethod
    def from_json(cls, data: dict) -> "LeafFamily":
        return cls(
            base=BaseDomain.from_json(data["base"]),
            t=np.array(data["t"], dtype=float),
            values=np.array(data["values"], dtype=float),
            anchor=tuple(data["anchor"]),
        )


@dataclass(frozen=True)
class TangentPlaneField:
    """Unit leaf normals at every sample point of a leaf family."""

    base: BaseDomain
    t: np.ndarray
    normals: np.ndarray  # (m, nx, ny, 3)

    def __post_init__(self):
        if self.normals.shape[-1] != 3:
            raise ValueError("normals must be 3-vectors")
        if np.min(self.normals[..., 2]) <= 0.0:
            raise ValueError("normals must have positive vertical component")


def tangent_field(family: LeafFamily) -> TangentPlaneField:
    """Unit normals from central finite differences of the sampled leaves."""
    g = _leaf_gradients(family)
    normals = np.concatenate([-g, np.ones(g.shape[:-1] + (1,))], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return TangentPlaneField(family.base, family.t, normals)


def leaf_through(family: LeafFamily, base_point, z: float) -> float:
    """Leaf index of the point (base_point, z), by bisection to 1e-12.

    Monotonicity makes the index unique; anchoring makes leaf_through at the
    anchor the identity in z.
    """
    z = float(z)
    if not -SOLVER_TOL <= z <= 1.0 + SOLVER_TOL:
        raise ValueError("z must lie in [0, 1]")
    pt = np.asarray(base_point, dtype=float).reshape(1, 2)
    heights = family.values_at(pt)[:, 0]

    def height(t):
        k = min(max(int(np.searchsorted(family.t, t, side="right")) - 1, 0),
                family.m - 2)
        u = (t - family.t[k]) / (family.t[k + 1] - family.t[k])
        return (1.0 - u) * heights[k] + u * heights[k + 1]

    lo, hi = 0.0, 1.0
    if z <= heights[0]:
        return 0.0
    if z >= heights[-1]:
        return 1.0
    while hi - lo > SOLVER_TOL:
        mid = 0.5 * (lo + hi)
        if height(mid) < z:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def leaf_indices(family: LeafFamily, base_point, zs) -> np.ndarray:
    """Vectorized exact inverse of t -> f_t(base_point) on the sampled data.

    Piecewise-linear inversion; agrees with leaf_through to bisection
    tolerance.
    """
    zs = np.atleast_1d(np.asarray(zs, dtype=float))
    pt = np.asarray(base_point, dtype=float).reshape(1, 2)
    heights = family.values_at(pt)[:, 0]
    k = np.clip(np.searchsorted(heights, zs, side="right") - 1, 0, family.m - 2)
    u = (zs - heights[k]) / (heights[k + 1] - heights[k])
    return np.clip(family.t[k] + u * (family.t[k + 1] - family.t[k]), 0.0, 1.0)


def c0_distance(a: LeafFamily, b: LeafFamily) -> float:
    """Sup over shared sample points (x, z) of the angle between leaf normals.

    At every grid node, the z-samples are the union of both families' leaf
    heights there; each family's normal at (x, z) interpolates its per-leaf
    gradients linearly between the bracketing sampled leaves.
    """
    if a.base != b.base:
        raise ValueError("families must share a base domain")
    n = a.base.nx * a.base.ny
    va = a.values.reshape(a.m, n).T        # (n, ma)
    vb = b.values.reshape(b.m, n).T
    ga = _leaf_gradients(a).reshape(a.m, n, 2).transpose(1, 0, 2)  # (n, ma, 2)
    gb = _leaf_gradients(b).reshape(b.m, n, 2).transpose(1, 0, 2)

    def grad_at(v, g, zq):
        # per-row searchsorted: heights sit in [0,1], so offsetting row r by
        # 2r makes the flattened array globally sorted
        m = v.shape[1]
        off = 2.0 * np.arange(v.shape[0], dtype=float)[:, None]
        flat = np.searchsorted((v + off).ravel(), (zq + off).ravel(),
                               side="right")
        idx = flat.reshape(zq.shape) - m * np.arange(v.shape[0])[:, None] - 1
        seg = np.clip(idx, 0, m - 2)
        pos = m * np.arange(v.shape[0])[:, None] + seg
        vf, gf = v.ravel(), g.reshape(-1, 2)
        v_lo, v_hi = vf[pos], vf[pos + 1]
        u = np.clip((zq - v_lo) / (v_hi - v_lo), 0.0, 1.0)[..., None]
        return (1.0 - u) * gf[pos] + u * gf[pos + 1]

    # at a family's own sampled heights the interpolation is exact, so only
    # the other family's heights need the bracketing walk
    qa = np.concatenate([ga, grad_at(va, ga, vb)], axis=1)
    qb = np.concatenate([grad_at(vb, gb, va), gb], axis=1)
    dot = np.sum(qa * qb, axis=-1) + 1.0
    norm = np.sqrt((np.sum(qa * qa, axis=-1) + 1.0)
                   * (np.sum(qb * qb, axis=-1) + 1.0))
    ang = np.arccos(np.clip(dot / norm, -1.0, 1.0))
    return float(ang.max())


@dataclass(frozen=True)
class HolonomyMap:
    """Sampled monotone bijection of [0,1] with endpoints fixed.

    Piecewise-linear interpolation between samples; composition and inversion
    stay piecewise linear (compose refines the breakpoint set exactly).
    """

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.inputs, dtype=float)
        yo = np.asarray(self.outputs, dtype=float)
        object.__setattr__(self, "inputs", xi)
        object.__setattr__(self, "outputs", yo)
        if xi.shape != yo.shape or xi.ndim != 1 or xi.size < 2:
            raise ValueError("malformed holonomy samples")
        if xi[0] != 0.0 or xi[-1] != 1.0 or yo[0] != 0.0 or yo[-1] != 1.0:
            raise ValueError("holonomy must fix 0 and 1")
        if not (np.all(np.diff(xi) > 0.0) and np.all(np.diff(yo) > 0.0)):
            raise ValueError("holonomy must be strictly increasing")

    @classmethod
    def identity(cls) -> "HolonomyMap":
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]))

    def __call__(self, z):
        return np.interp(np.asarray(z, dtype=float), self.inputs, self.outputs)

    def inverse(self) -> "HolonomyMap":
        return HolonomyMap(self.outputs, self.inputs)

    def compose(self, other: "HolonomyMap") -> "HolonomyMap":
        """self after other: z -> self(other(z)), exact on piecewise lines.

        Float evaluation can tie consecutive outputs of the (strictly
        increasing) composite at near-duplicate breakpoints; ties keep one
        representative, the last one for the final run so 1 stays fixed.
        """
        xs = np.union1d(other.inputs, other.inverse()(self.inputs))
        ys = self(other(xs))
        keep = np.flatnonzero(np.concatenate([[True], np.diff(ys) > 0.0]))
        if keep[-1] != xs.size - 1:
            keep[-1] = xs.size - 1
        return HolonomyMap(xs[keep], ys[keep])

    def max_difference(self, other: "HolonomyMap") -> float:
        xs = np.union1d(self.inputs, other.inputs)
        return float(np.max(np.abs(self(xs) - other(xs))))

    def identity_defect(self) -> float:
        return float(np.max(np.abs(self.outputs - self.inputs)))


@dataclass(frozen=True)
class BasePath:
    """Sampled path in a base domain; consecutive samples within one cell."""

    base: BaseDomain
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("path needs at least two 2-d samples")
        if pts[:, 0].min() < -SOLVER_TOL or pts[:, 0].max() > 1.0 + SOLVER_TOL:
            raise ValueError("path leaves the base domain in x")
        if not self.base.periodic_y:
            if pts[:, 1].min() < -SOLVER_TOL or pts[:, 1].max() > 1.0 + SOLVER_TOL:
                raise ValueError("path leaves the base domain in y")
        steps = np.abs(np.diff(pts, axis=0))
        if self.base.periodic_y:
            frac = np.mod(steps[:, 1], 1.0)
            steps[:, 1] = np.minimum(frac, 1.0 - frac)
        dx = 1.0 / (self.base.nx - 1)
        dy = 1.0 / self.base.ny if self.base.periodic_y else 1.0 / (self.base.ny - 1)
        if np.any(steps[:, 0] > dx + SOLVER_TOL) or np.any(steps[:, 1] > dy + SOLVER_TOL):
            raise ValueError("consecutive path samples must stay within one cell")

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def reversed(self) -> "BasePath":
        return BasePath(self.base, self.points[::-1].copy())

    def followed_by(self, other: "BasePath") -> "BasePath":
        gap = np.abs(self.end - other.start)
        if self.base.periodic_y:
            frac = gap[1] % 1.0
            gap[1] = min(frac, 1.0 - frac)
        if gap.max() > COMPARISON_TOL:
            raise ValueError("paths are not concatenable")
        return BasePath(self.base, np.vstack([self.points, other.points[1:]]))


def straight_path(base: BaseDomain, p, q, samples: int = 65) -> BasePath:
    """Straight base path from p to q with enough samples to be continuous."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    u = np.linspace(0.0, 1.0, samples)[:, None]
    return BasePath(base, (1.0 - u) * p + u * q)


def holonomy(family: LeafFamily, path: BasePath) -> HolonomyMap:
    """Holonomy along a base path, as the map (height over the path's end)
    -> (height of the same leaf over the path's start).

    Exact for product foliations: leaves are globally indexed, so no
    step-by-step continuation is needed.  Endpoint heights of the boundary
    leaves are snapped to exactly 0 and 1 (they are exact mathematically;
    bilinear weights can smudge the last ulp).
    """
    if path.base != family.base:
        raise ValueError("path and family bases differ")
    ends = family.values_at(path.end.reshape(1, 2))[:, 0]
    starts = family.values_at(path.start.reshape(1, 2))[:, 0]
    ends[0], ends[-1] = 0.0, 1.0
    starts[0], starts[-1] = 0.0, 1.0
    return HolonomyMap(ends, starts)


def x_invariance_defect(family: LeafFamily) -> float:
    """Sup over sampled leaves and y of the spread of f_t(., y): zero exactly
    when the family is invariant in the first coordinate."""
    if family.base.shape != "annulus":
        raise ValueError("x-invariance is an annulus-base diagnostic")
    spread = family.values.max(axis=1) - family.values.min(axis=1)
    return float(spread.max())


def choose_partition(family: LeafFamily, epsilon: float) -> kernel.Partition:
    """Greedy tangent-angle partition of the family's leaf-index interval."""
    tf = tangent_field(family)
    m = family.m
    normals = tf.normals.reshape(m, -1, 3)
    return kernel.choose_partition(family.t, normals, epsilon)


# ------------------------------------------------------------ constructors

def _grid(base: BaseDomain):
    return np.meshgrid(base.x_nodes, base.y_nodes, indexing="ij")


def horizontal_family(base: BaseDomain, m: int = 17, anchor=(0, 0)) -> LeafFamily:
    """f_t = t at every base point (anchored anywhere)."""
    t = np.linspace(0.0, 1.0, m)
    vals = np.broadcast_to(t[:, None, None], (m, base.nx, base.ny)).copy()
    return LeafFamily(base, t, vals, anchor)


def sheared_family(base: BaseDomain, shear: float = 0.5, m: int = 17,
                   axis: str = "x") -> LeafFamily:
    """f_t = t + shear * t(1-t) * (x or y), anchored where the shear vanishes.

    Monotone for |shear| < 1 (d f/dt = 1 + shear(1-2t) * coordinate).
    """
    if not abs(shear) < 1.0:
        raise ValueError("|shear| must be below 1 for monotonicity")
    if axis not in ("x", "y"):
        raise ValueError("shear axis must be 'x' or 'y'")
    if axis == "y" and base.periodic_y:
        raise ValueError("y-shear needs a non-periodic y coordinate")
    t = np.linspace(0.0, 1.0, m)
    x, y = _grid(base)
    coord = x if axis == "x" else y
    vals = t[:, None, None] + shear * (t * (1.0 - t))[:, None, None] * coord[None]
    return LeafFamily(base, t, vals, (0, 0))


def tilted_family(base: BaseDomain, slope: float = 0.1, m: int = 17) -> LeafFamily:
    """Family whose middle leaf is the genuine tilted plane z = t + slope(x - 1/2).

    The tilt is ramped in linearly from the horizontal boundary leaves
    (hat profile 1 - |2t - 1|), so the normals at t = 1/2 are constant and
    the family stays inside [0, 1].  Anchored at x = 1/2, which must be a
    grid node (odd nx).
    """
    if base.nx % 2 == 0:
        raise ValueError("tilted family needs an odd nx so x = 1/2 is a node")
    if not abs(slope) < 0.5:
        raise ValueError("|slope| must be below 1/2 for monotonicity")
    t = np.linspace(0.0, 1.0, m)
    x, _ = _grid(base)
    hat = 1.0 - np.abs(2.0 * t - 1.0)
    vals = t[:, None, None] + slope * hat[:, None, None] * (x[None] - 0.5)
    return LeafFamily(base, t, vals, ((base.nx - 1) // 2, 0))
