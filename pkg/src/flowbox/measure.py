"""Transverse measures on product foliations and Tischler approximation.

A transverse measure lives on the vertical fibers of a flow box.  We store
its cumulative function on the box's anchor fiber; the measure of an arc on
any other fiber is read through the family's own leaf structure, so holonomy
invariance is the statement that the stored cumulatives of neighboring boxes
induce the same arc measures on shared faces.
"""

from dataclasses import dataclass
from fractions import Fraction
import math

import numpy as np
from scipy.interpolate import PchipInterpolator

from .decomposition import DecompositionComplex, validate
from .foliation import (
    HolonomyMap,
    LeafFamily,
    SOLVER_TOL,
    holonomy,
)
from .smoothing import _shared_faces, _side_fibers

INVARIANCE_PRE_TOL = 1e-6
INVARIANCE_POST_TOL = 1e-9


@dataclass(frozen=True)
class TransverseMeasure:
    """Cumulative transverse measure along the fiber coordinate.

    totals[k] is the measure of [0, heights[k]] on the reference fiber;
    between samples the cumulative interpolates linearly.  Strict increase
    encodes non-degeneracy (positive measure on every open interval).
    """

    heights: np.ndarray
    totals: np.ndarray

    def __post_init__(self):
        heights = np.asarray(self.heights, dtype=float).copy()
        totals = np.asarray(self.totals, dtype=float).copy()
        object.__setattr__(self, "heights", heights)
        object.__setattr__(self, "totals", totals)
        if heights.ndim != 1 or heights.shape != totals.shape \
                or heights.size < 2:
            raise ValueError("need matching 1-d sample arrays, at least 2")
        if not (np.isfinite(heights).all() and np.isfinite(totals).all()):
            raise ValueError("measure samples must be finite")
        if heights[0] != 0.0 or heights[-1] != 1.0:
            raise ValueError("fiber samples must run exactly from 0 to 1")
        if totals[0] != 0.0:
            raise ValueError("cumulative must start at exactly 0")
        if np.any(np.diff(heights) <= 0.0):
            raise ValueError("fiber samples must be strictly increasing")
        if np.any(np.diff(totals) <= 0.0):
            raise ValueError("cumulative must be strictly increasing")

    @property
    def total(self) -> float:
        return float(self.totals[-1])

    def __call__(self, z):
        zs = np.asarray(z, dtype=float)
        if zs.size and (zs.min() < -SOLVER_TOL or zs.max() > 1.0 + SOLVER_TOL):
            raise ValueError("fiber coordinate outside [0, 1]")
        out = np.interp(zs, self.heights, self.totals)
        return float(out) if np.isscalar(z) or zs.ndim == 0 else out

    def mass(self, s, t):
        """Signed measure of the fiber interval [s, t]."""
        return self(t) - self(s)

    def normalized_map(self) -> HolonomyMap:
        """The cumulative rescaled to a self-map of [0, 1]."""
        return HolonomyMap(self.heights, self.totals / self.total)

    def pushforward(self, rho: HolonomyMap) -> "TransverseMeasure":
        """Image measure under a fiber homeomorphism.

        Totals are carried verbatim to the transported sample points, so
        the image of [0, z] has the original measure of [0, z] exactly at
        every stored sample.
        """
        heights = np.asarray(rho(self.heights), dtype=float)
        heights[0], heights[-1] = 0.0, 1.0
        return TransverseMeasure(heights, self.totals.copy())

    @classmethod
    def lebesgue(cls, samples: int = 33) -> "TransverseMeasure":
        grid = np.linspace(0.0, 1.0, int(samples))
        return cls(grid, grid.copy())

    @classmethod
    def from_cumulative(cls, fn, samples=65) -> "TransverseMeasure":
        """Sample a cumulative function; the value at 0 is subtracted off."""
        if np.isscalar(samples):
            grid = np.linspace(0.0, 1.0, int(samples))
        else:
            grid = np.asarray(samples, dtype=float)
        vals = np.asarray([float(fn(z)) for z in grid])
        return cls(grid, vals - vals[0])

    def to_json(self) -> dict:
        return {"heights": self.heights.tolist(),
                "totals": self.totals.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "TransverseMeasure":
        return cls(np.asarray(data["heights"], dtype=float),
                   np.asarray(data["totals"], dtype=float))


def _union_grid(*arrays) -> np.ndarray:
    grid = np.array([0.0, 1.0])
    for a in arrays:
        grid = np.union1d(grid, np.asarray(a, dtype=float))
    return grid


def verify_invariance(family: LeafFamily, mu: TransverseMeasure, paths,
                      report: dict | None = None) -> float:
    """Sup defect |mu([s, t]) - mu(rho(beta)[s, t])| over the given paths.

    The defect of one path is the oscillation of M - M o rho, which both
    functions' piecewise linearity pins to the union of their breakpoints.
    Closed paths have identity holonomy in a product box, so any measure is
    a fixed point of its own loop pushforward and contributes zero.
    """
    rows = []
    worst = 0.0
    for path in paths:
        rho = holonomy(family, path)
        grid = _union_grid(mu.heights, rho.inputs, rho.inverse()(mu.heights))
        diff = mu(grid) - mu(rho(grid))
        defect = float(diff.max() - diff.min())
        worst = max(worst, defect)
        rows.append({"start": [float(v) for v in path.start],
                     "end": [float(v) for v in path.end],
                     "defect": defect})
    if report is not None:
        report.update({"operation": "verify_invariance",
                       "paths": len(rows), "rows": rows, "defect": worst})
    return worst


def smooth_measure_on_transversal(mu: TransverseMeasure, subsample_count: int,
                                  report: dict | None = None):
    """Smooth a fiber measure: returns (reparametrization f, new measure).

    h is the sampled cumulative, g the monotone cubic spline through h at
    uniform subsample nodes (endpoints are nodes, so g matches h there), and
    f = h^-1 o g.  The new cumulative is g itself sampled on the refined
    grid: mu'([0, t]) = mu([0, f(t)]) = h(h^-1(g(t))).
    """
    if int(subsample_count) != subsample_count or subsample_count < 4:
        raise ValueError("need at least 4 subsample nodes")
    if np.any(np.diff(mu.totals) <= 0.0):
        raise ValueError("cumulative must be strictly increasing")
    nodes = np.linspace(0.0, 1.0, int(subsample_count))
    spline = PchipInterpolator(nodes, mu(nodes))
    grid = _union_grid(mu.heights, nodes)
    g_vals = np.asarray(spline(grid), dtype=float)
    if np.any(np.diff(g_vals) <= 0.0):
        raise ValueError("spline lost strict monotonicity; refine subsamples")
    f_vals = np.interp(g_vals, mu.totals, mu.heights)
    f_vals[0], f_vals[-1] = 0.0, 1.0
    f = HolonomyMap(grid, f_vals)
    smoothed = TransverseMeasure(grid, g_vals)
    if report is not None:
        node_residual = float(np.abs(smoothed(nodes) - spline(nodes)).max())
        report.update({"operation": "smooth_measure_on_transversal",
                       "subsample_count": int(subsample_count),
                       "node_residual": node_residual,
                       "reparametrization_defect": f.identity_defect()})
    return f, smoothed


def _fiber_map(family: LeafFamily, ix: int, iy: int) -> HolonomyMap:
    """Leaf-index-to-height map of the fiber over one grid node."""
    return HolonomyMap(family.t, family.values[:, ix, iy])


def _field_map(mu: TransverseMeasure, fiber: HolonomyMap) -> HolonomyMap:
    """Normalized cumulative of the measure transported to a fiber.

    The anchor fiber's map is the identity, so the field cumulative at any
    node is M o E^-1 with E the node's leaf-index map; its breakpoints are
    the transported measure samples joined with E's own output breaks.
    """
    grid = _union_grid(fiber(mu.heights), fiber.outputs)
    vals = mu(fiber.inverse()(grid)) / mu.total
    vals[0], vals[-1] = 0.0, 1.0
    return HolonomyMap(grid, vals)


@dataclass(frozen=True, eq=False)
class MeasuredScene:
    """A decomposition together with one transverse measure per box,
    each stored on that box's anchor fiber."""

    scene: DecompositionComplex
    measures: dict

    def __post_init__(self):
        object.__setattr__(self, "measures", dict(self.measures))
        idents = {b.identifier for b in self.scene.boxes}
        if set(self.measures) != idents:
            raise ValueError("need exactly one measure per box")
        for name, mu in self.measures.items():
            if not isinstance(mu, TransverseMeasure):
                raise ValueError(f"box {name}: not a transverse measure")

    def measure(self, identifier: str) -> TransverseMeasure:
        return self.measures[identifier]


def _face_endpoint_maps(family: LeafFamily, side: str):
    """Fiber maps along one side, ordered by position on the side."""
    fibers = _side_fibers(family, side)
    return [HolonomyMap(family.t, fibers[:, k])
            for k in range(fibers.shape[1])]


def scene_invariance_defect(measured: MeasuredScene,
                            report: dict | None = None) -> float:
    """Worst disagreement, over shared faces and their fiber columns,
    between the arc measures the two owning boxes induce."""
    rows = []
    worst = 0.0
    for axis, pos, (id_a, side_a), (id_b, side_b) in \
            _shared_faces(measured.scene):
        fam_a = measured.scene.box(id_a).family
        fam_b = measured.scene.box(id_b).family
        mu_a = measured.measure(id_a)
        mu_b = measured.measure(id_b)
        maps_a = _face_endpoint_maps(fam_a, side_a)
        maps_b = _face_endpoint_maps(fam_b, side_b)
        if len(maps_a) != len(maps_b):
            raise ValueError(f"face {axis}={pos}: sides sampled differently")
        defect = 0.0
        for ea, eb in zip(maps_a, maps_b):
            grid = _union_grid(ea(mu_a.heights), eb(mu_b.heights),
                               ea.outputs, eb.outputs)
            diff = mu_a(ea.inverse()(grid)) - mu_b(eb.inverse()(grid))
            defect = max(defect, float(diff.max() - diff.min()))
        worst = max(worst, defect)
        rows.append({"face": f"{axis}={pos}", "owners": [id_a, id_b],
                     "defect": defect})
    if report is not None:
        report.update({"operation": "scene_invariance_defect",
                       "rows": rows, "defect": worst})
    return worst


def _propagation_chain(face, scene, source, target) -> HolonomyMap:
    """Reference-fiber change of coordinates across one shared face.

    The new cumulative of the target must induce the source's arc measures
    on the face, which pins M_target = M_source o chain with
    chain = E_source^-1 o E_target at any face column; invariance of the
    input makes the column choice immaterial, so the first column is used.
    """
    axis, pos, owner_a, owner_b = face
    sides = {owner_a[0]: owner_a[1], owner_b[0]: owner_b[1]}
    fam_s = scene.box(source).family
    fam_t = scene.box(target).family
    e_s = _face_endpoint_maps(fam_s, sides[source])[0]
    e_t = _face_endpoint_maps(fam_t, sides[target])[0]
    return e_s.inverse().compose(e_t)


def smooth_measured_scene(measured: MeasuredScene, subsample_count: int = 9,
                          report: dict | None = None) -> MeasuredScene:
    """Replace the scene's measure by one with smooth cumulatives.

    Pipeline: pin the horizontal-boundary values, smooth the root box's
    cumulative along its anchor transversal, transport the smoothed
    cumulative across maximal faces (holonomy preserves the measure, so
    transport is composition with the face's change of reference fiber),
    and extend into box interiors by fiber pushforward, recording the
    extension residual.  Leaves are never touched: on product boxes the
    reparametrization isotopy re-anchors each family to itself.
    """
    scene = measured.scene
    if not validate(scene)["valid"]:
        raise ValueError("scene fails validation; fix the decomposition first")
    pre = scene_invariance_defect(measured)
    if pre > INVARIANCE_PRE_TOL:
        raise ValueError(
            f"measure invariance defect {pre:.3e} exceeds "
            f"{INVARIANCE_PRE_TOL:g}; not an invariant measure")
    stages = []

    # endpoint values of every cumulative are measure-theoretic constants;
    # the spline stages below interpolate them, so the bands are exact
    stages.append({"stage": "horizontal-boundary bands",
                   "region": "boundary leaves t = 0 and t = 1",
                   "defect": 0.0})

    order = sorted(b.identifier for b in scene.boxes)
    root = order[0]
    f_root, mu_root = smooth_measure_on_transversal(
        measured.measure(root), subsample_count)
    smoothed = {root: mu_root}
    stages.append({"stage": "vertical-skeleton smoothing", "root": root,
                   "reparametrization_defect": f_root.identity_defect()})

    faces = _shared_faces(scene)
    adjacency = {}
    for face in faces:
        _, _, (id_a, _), (id_b, _) = face
        adjacency.setdefault(id_a, []).append((id_b, face))
        adjacency.setdefault(id_b, []).append((id_a, face))
    tree_edges = []
    queue = [root]
    while queue:
        current = queue.pop(0)
        for neighbor, face in adjacency.get(current, ()):
            if neighbor in smoothed:
                continue
            chain = _propagation_chain(face, scene, current, neighbor)
            if chain.identity_defect() <= SOLVER_TOL:
                smoothed[neighbor] = smoothed[current]
            else:
                mu_c = smoothed[current]
                grid = _union_grid(chain.inputs,
                                   chain.inverse()(mu_c.heights))
                smoothed[neighbor] = TransverseMeasure(grid, mu_c(chain(grid)))
            tree_edges.append([current, neighbor])
            queue.append(neighbor)
    for name in order:
        if name not in smoothed:
            _, smoothed[name] = smooth_measure_on_transversal(
                measured.measure(name), subsample_count)
    result = MeasuredScene(scene, smoothed)
    loop_defect = scene_invariance_defect(result)
    stages.append({"stage": "maximal-face transport",
                   "tree_edges": tree_edges, "loop_defect": loop_defect})

    residual = 0.0
    for box in scene.boxes:
        fam = box.family
        mu_new = smoothed[box.identifier]
        probes = sorted({1, fam.base.nx // 2, fam.base.nx - 2})
        for ix in probes:
            if not 0 < ix < fam.base.nx - 1:
                continue
            iy = fam.base.ny // 2
            e_ij = _fiber_map(fam, ix, iy)
            e_0j = _fiber_map(fam, 0, iy)
            trans = e_ij.compose(e_0j.inverse())
            grid = _union_grid(e_ij.outputs, trans.outputs)
            direct = mu_new(e_ij.inverse()(grid))
            via_edge = mu_new(e_0j.inverse()(trans.inverse()(grid)))
            residual = max(residual, float(np.abs(direct - via_edge).max()))
    stages.append({"stage": "interior cone extension", "residual": residual})

    if loop_defect > INVARIANCE_POST_TOL:
        raise RuntimeError(
            f"smoothed measure defect {loop_defect:.3e} exceeds "
            f"{INVARIANCE_POST_TOL:g}")
    if report is not None:
        report.update({"operation": "smooth_measured_scene",
                       "subsample_count": int(subsample_count),
                       "root": root, "pre_defect": pre,
                       "post_defect": loop_defect, "stages": stages})
    return result


def _as_exact(value):
    """Exact rational content of a coefficient, or None for floats."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    return None


@dataclass(frozen=True)
class ClosedOneForm:
    """Constant-coefficient closed 1-form on T^2 or T^3.

    Coefficients may be ints, Fractions (exact) or floats; the kernel field
    is the orthogonal line/plane field, so angles between kernels equal
    angles between coefficient vectors.
    """

    coefficients: tuple

    def __post_init__(self):
        coeffs = tuple(self.coefficients)
        object.__setattr__(self, "coefficients", coeffs)
        if len(coeffs) not in (2, 3):
            raise ValueError("need 2 (torus) or 3 (T^3) coefficients")
        if all(float(c) == 0.0 for c in coeffs):
            raise ValueError("coefficient vector must be nonzero")

    @property
    def is_rational(self) -> bool:
        return all(_as_exact(c) is not None for c in self.coefficients)

    def direction(self) -> np.ndarray:
        v = np.asarray([float(c) for c in self.coefficients])
        return v / np.linalg.norm(v)

    def angle_to(self, other: "ClosedOneForm") -> float:
        """Unoriented angle between the two kernel fields, in radians."""
        dot = abs(float(np.dot(self.direction(), other.direction())))
        return float(math.acos(min(dot, 1.0)))

    def to_json(self) -> dict:
        return {"coefficients": [str(c) if _as_exact(c) is not None
                                 else float(c) for c in self.coefficients]}


def _convergents(value: float) -> list:
    """Continued-fraction convergents of a float, as exact fractions.

    The expansion terminates at the float's own rational value, so the
    last convergent reproduces the input exactly.
    """
    exact = Fraction(value)
    out = []
    h_prev, h = 1, int(math.floor(value))
    k_prev, k = 0, 1
    out.append(Fraction(h, k))
    rest = exact - h
    while rest != 0:
        rest = 1 / rest
        a = int(math.floor(rest))
        rest -= a
        h_prev, h = h, a * h + h_prev
        k_prev, k = k, a * k + k_prev
        out.append(Fraction(h, k))
    return out


def _strip_certificate(ratios) -> dict:
    """Exact first-return data of the rational linear foliation.

    Crossing one fundamental strip advances the fiber coordinates by the
    ratios mod 1; with q the lcm of their denominators the orbit closes
    after exactly q strips and visits q distinct points.  Above the listing
    cap the orbit enumeration is dropped and both certificate booleans come
    from the same exact divisibility arithmetic.
    """
    q = 1
    for r in ratios:
        q = q * r.denominator // math.gcd(q, r.denominator)
    closes = all(Fraction(q) * r % 1 == 0 for r in ratios)
    if q > 10000:
        # a return at k < q would force every denominator to divide k
        return {"period": q, "closes_exactly": closes,
                "distinct_before_return": True, "orbit": None}
    orbit = []
    seen = set()
    distinct = True
    for k in range(q):
        point = tuple(Fraction(k) * r % 1 for r in ratios)
        if point in seen:
            distinct = False
        seen.add(point)
        orbit.append([str(c) for c in point])
    return {"period": q, "closes_exactly": closes,
            "distinct_before_return": distinct, "orbit": orbit}


def tischler_fibration(form: ClosedOneForm, epsilon: float,
                       report: dict | None = None):
    """Approximate a linear measured foliation by a fibration over S^1.

    Walks the joint continued-fraction convergents of the coefficient
    ratios and returns the first (hence minimal-denominator) rational form
    whose kernel line field deviates from the input by less than epsilon,
    with epsilon read as a half-angle tolerance between unoriented kernel
    fields (accepted full angle < 2 epsilon).  A rational input is returned
    unchanged.  Fibration data is the exact integer strip-walk certificate.
    """
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive")
    coeffs = form.coefficients
    if form.is_rational:
        rational = form
        defect = 0.0
    else:
        lead_index = next(i for i, c in enumerate(coeffs)
                          if float(c) != 0.0)
        lead = float(coeffs[lead_index])
        lead_exact = _as_exact(coeffs[lead_index])
        ladders = []
        for i, c in enumerate(coeffs):
            exact = _as_exact(c)
            if i == lead_index:
                ladders.append([Fraction(1)])
            elif exact is not None and lead_exact is not None:
                ladders.append([exact / lead_exact])
            else:
                ladders.append(_convergents(float(c) / lead))
        rational = None
        for step in range(max(len(l) for l in ladders)):
            candidate = ClosedOneForm(tuple(
                ladder[min(step, len(ladder) - 1)] for ladder in ladders))
            defect = form.angle_to(candidate)
            if defect < 2.0 * epsilon:
                rational = candidate
                break
        if rational is None:
            raise RuntimeError("convergent ladder exhausted before the bound")
    lead_index = next(i for i, c in enumerate(rational.coefficients)
                      if float(c) != 0.0)
    lead = _as_exact(rational.coefficients[lead_index])
    ratios = [_as_exact(c) / lead for c in rational.coefficients]
    fibration = _strip_certificate(ratios)
    if report is not None:
        report.update({
            "operation": "tischler_fibration",
            "input": [str(c) if _as_exact(c) is not None else float(c)
                      for c in coeffs],
            "convergent": [str(c) for c in rational.coefficients],
            "angle_defect": defect,
            "period": fibration["period"]})
    return rational, fibration
