"""Scalar building blocks shared by every construction.

Damping profiles (smooth monotone ramps that are flat to the checked order at
the endpoints), partitions of [0,1], insertion schedules, and the collapse
maps used by the blowup machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COMPARISON_TOL = 1e-9
SOLVER_TOL = 1e-12
FLAT_TOL = 1e-9


def flat_bump(x):
    """exp(-1/x) for x > 0 and identically 0 for x <= 0."""
    x = np.asarray(x, dtype=float)
    safe = np.where(x > 0.0, x, 1.0)
    with np.errstate(over="ignore"):
        val = np.exp(-1.0 / safe)
    return np.where(x > 0.0, val, 0.0)


def smooth_ramp(x):
    """Normalized bump ramp flat_bump(x) / (flat_bump(x) + flat_bump(1-x)).

    Exactly 0 for x <= 0 and 1 for x >= 1, strictly increasing in between,
    with every finite-difference derivative at the endpoints vanishing once
    the step is moderately small.  ramp(1/2) = 1/2 exactly by symmetry.
    """
    x = np.asarray(x, dtype=float)
    a = flat_bump(x)
    b = flat_bump(1.0 - x)
    # a + b > 0 for every real x, so the quotient is always defined
    return a / (a + b)


@dataclass(frozen=True)
class DampingProfile:
    """Sampled smooth ramp with closed-form evaluation.

    flat_order records how many finite-difference derivative orders are
    certified below FLAT_TOL at both endpoints (step = sample spacing).
    """

    flat_order: int
    arguments: np.ndarray
    values: np.ndarray
    formula: str = "exp-reciprocal-ramp"

    def __post_init__(self):
        args = np.asarray(self.arguments, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "arguments", args)
        object.__setattr__(self, "values", vals)
        if self.flat_order < 1:
            raise ValueError("flat_order must be >= 1")
        if args.ndim != 1 or args.shape != vals.shape or args.size < 2:
            raise ValueError("malformed profile samples")
        if args[0] != 0.0 or args[-1] != 1.0:
            raise ValueError("profile arguments must run from 0 to 1")
        if vals[0] != 0.0 or vals[-1] != 1.0:
            raise ValueError("profile values must run from 0 to 1")
        if not np.all(np.diff(args) > 0.0):
            raise ValueError("profile arguments must be strictly increasing")
        # strictly increasing except where the quotient saturates to 0 or 1
        # at float precision (unavoidable near the flat endpoints)
        diffs = np.diff(vals)
        interior = (vals[:-1] > 0.0) & (vals[1:] < 1.0)
        if not (np.all(diffs >= 0.0) and np.all(diffs[interior] > 0.0)):
            raise ValueError("profile values must be increasing")

    @property
    def resolution(self) -> int:
        return self.arguments.size - 1

    def __call__(self, x):
        if self.formula == "exp-reciprocal-ramp":
            return smooth_ramp(x)
        return np.interp(x, self.arguments, self.values)

    def endpoint_flatness(self, order: int | None = None) -> float:
        """Worst finite-difference derivative magnitude at the endpoints.

        Forward differences at 0 and backward differences at 1, orders
        1..order, step 1/resolution.
        """
        m = self.flat_order if order is None else order
        h = 1.0 / self.resolution
        worst = 0.0
        for k in range(1, m + 1):
            j = np.arange(k + 1)
            coef = np.array([math.comb(k, int(i)) for i in j]) * (-1.0) ** (k - j)
            at0 = float(np.sum(coef * self(j * h))) / h**k
            at1 = float(np.sum(coef * self(1.0 - (k - j) * h))) / h**k
            worst = max(worst, abs(at0), abs(at1))
        return worst


def make_damping(flat_order: int = 3, resolution: int = 256) -> DampingProfile:
    """Damping profile from the standard flat bump, sampled uniformly.

    Raises if the requested flat_order cannot be certified at the given
    resolution.  Resolutions beyond ~700 underflow the first interior sample
    and are rejected by the monotonicity invariant.
    """
    if flat_order < 1:
        raise ValueError("flat_order must be >= 1")
    if resolution < 16:
        raise ValueError("resolution must be >= 16 (insufficient sampling)")
    args = np.linspace(0.0, 1.0, resolution + 1)
    profile = DampingProfile(flat_order=flat_order, arguments=args,
                             values=smooth_ramp(args))
    flatness = profile.endpoint_flatness()
    if flatness >= FLAT_TOL:
        raise ValueError(
            f"flat_order {flat_order} not certified at resolution {resolution}"
            f" (endpoint flatness {flatness:.3g})")
    return profile


@dataclass(frozen=True)
class Partition:
    """Cut points 0 = t_0 < t_1 < ... < t_n = 1."""

    points: tuple

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2 or pts[0] != 0.0 or pts[-1] != 1.0:
            raise ValueError("partition must run from 0 to 1")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("partition points must be strictly increasing")

    @property
    def cells(self) -> tuple:
        return tuple(zip(self.points[:-1], self.points[1:]))

    def refined_with(self, extra) -> "Partition":
        merged = sorted(set(self.points) | {float(t) for t in extra})
        return Partition(tuple(merged))


@dataclass(frozen=True)
class InsertionSchedule:
    """Finite sorted list of blowup points with positive weights."""

    points: tuple
    weights: tuple

    def __post_init__(self):
        pts = tuple(float(z) for z in self.points)
        wts = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)
        if len(pts) != len(wts):
            raise ValueError("points and weights must pair up")
        if any(not 0.0 < z < 1.0 for z in pts):
            raise ValueError("blowup points must lie in (0, 1)")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("blowup points must be strictly increasing")
        if any(w <= 0.0 or not math.isfinite(w) for w in wts):
            raise ValueError("weights must be positive and finite")

    @property
    def total_weight(self) -> float:
        return float(sum(self.weights))

    def to_json(self) -> dict:
        return {"points": list(self.points), "weights": list(self.weights)}

    @classmethod
    def from_json(cls, data: dict) -> "InsertionSchedule":
        return cls(tuple(data["points"]), tuple(data["weights"]))


@dataclass(frozen=True)
class CollapseMap:
    """Weakly monotone surjection of [0,1]: affine pieces plus plateaus.

    plateaus: (x_lo, x_hi, value) intervals collapsed to a point.
    pieces:   (x_lo, x_hi, y_lo, y_hi) strictly increasing affine segments.
    slope:    the common complement slope 1+w, or None when pieces differ
              (the fixed-leaf variant rescales per segment).
    """

    plateaus: tuple
    pieces: tuple
    slope: float | None

    def __post_init__(self):
        segs = sorted(
            [(p[0], p[1], p[2], p[2]) for p in self.plateaus]
            + [tuple(p) for p in self.pieces])
        if not segs:
            raise ValueError("collapse map needs at least one piece")
        if segs[0][0] != 0.0 or segs[-1][1] != 1.0:
            raise ValueError("segments must cover [0, 1]")
        for (a, b, ylo, yhi) in segs:
            if b <= a:
                raise ValueError("degenerate segment")
            if yhi < ylo:
                raise ValueError("decreasing segment")
        for (_, b, _, yb), (c, _, yc, _) in zip(segs, segs[1:]):
            if b != c:
                raise ValueError("segments must tile [0, 1] without gaps")
            if yb != yc:
                raise ValueError("discontinuity between segments")
        if segs[0][2] != 0.0 or segs[-1][3] != 1.0:
            raise ValueError("image must be [0, 1]")
        for (a, b, ylo, yhi) in self.pieces:
            if yhi <= ylo:
                raise ValueError("pieces must be strictly increasing")
        # evaluation knots (plateaus appear as flat spans)
        xs, ys = [segs[0][0]], [segs[0][2]]
        for (a, b, ylo, yhi) in segs:
            xs.append(b)
            ys.append(yhi)
        object.__setattr__(self, "_knots_x", np.array(xs))
        object.__setattr__(self, "_knots_y", np.array(ys))
        # per-piece data for the right inverse, sorted by image interval
        inv = sorted(self.pieces, key=lambda p: p[2])
        object.__setattr__(self, "_px", np.array([(p[0], p[1]) for p in inv]))
        object.__setattr__(self, "_py", np.array([(p[2], p[3]) for p in inv]))

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float),
                         self._knots_x, self._knots_y)

    def preimage(self, y: float, tol: float = SOLVER_TOL):
        """The interval (x_lo, x_hi) if y is a collapsed value, else the
        unique point of the complement mapping to y."""
        y = float(y)
        if not -tol <= y <= 1.0 + tol:
            raise ValueError("value outside [0, 1]")
        for x_lo, x_hi, v in self.plateaus:
            if abs(y - v) <= tol:
                return (x_lo, x_hi)
        for x_lo, x_hi, y_lo, y_hi in self.pieces:
            if y_lo - tol <= y <= y_hi + tol:
                u = (y - y_lo) / (y_hi - y_lo)
                u = min(max(u, 0.0), 1.0)
                return x_lo + u * (x_hi - x_lo)
        raise ValueError("no preimage found")  # unreachable for y in [0, 1]

    def complement_embedding(self, y):
        """Piecewise-affine right inverse onto the complement closure.

        Satisfies self(complement_embedding(y)) = y for all y in [0, 1].  The
        inverse jumps across each plateau; at collapsed values it lands on
        the right plateau endpoint.
        """
        y = np.asarray(y, dtype=float)
        idx = np.searchsorted(self._py[:, 0], y, side="right") - 1
        idx = np.clip(idx, 0, self._py.shape[0] - 1)
        y_lo, y_hi = self._py[idx, 0], self._py[idx, 1]
        u = np.clip((y - y_lo) / (y_hi - y_lo), 0.0, 1.0)
        return self._px[idx, 0] + u * (self._px[idx, 1] - self._px[idx, 0])

    def total_plateau_length(self) -> float:
        return float(sum(hi - lo for lo, hi, _ in self.plateaus))

    def to_json(self) -> dict:
        return {
            "plateaus": [list(p) for p in self.plateaus],
            "pieces": [list(p) for p in self.pieces],
            "slope": self.slope,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CollapseMap":
        slope = data.get("slope")
        return cls(
            plateaus=tuple(tuple(float(v) for v in p) for p in data["plateaus"]),
            pieces=tuple(tuple(float(v) for v in p) for p in data["pieces"]),
            slope=None if slope is None else float(slope),
        )


def _segment_collapse(a: float, b: float, inside: list) -> tuple:
    """Collapse data for one segment [a, b] with schedule entries inside.

    Scales [a,b] onto [a, b+W], inserts the intervals, and collapses back:
    plateau widths come out as w_i * L / (L + W).  Returns (plateaus, pieces).
    """
    length = b - a
    total = sum(w for _, w in inside)
    shrink = length / (length + total)
    plateaus = []
    cum = 0.0
    for z, w in inside:
        lo = a + (z + cum - a) * shrink
        hi = lo + w * shrink
        plateaus.append((lo, hi, z))
        cum += w
    xs = [a] + [x for p in plateaus for x in (p[0], p[1])] + [b]
    if any(v <= u for u, v in zip(xs, xs[1:])):
        raise ValueError("inserted intervals overlap")
    pieces = []
    x_lo, y_lo = a, a
    for lo, hi, z in plateaus:
        pieces.append((x_lo, lo, y_lo, z))
        x_lo, y_lo = hi, z
    pieces.append((x_lo, b, y_lo, b))
    return plateaus, pieces


def build_collapse(schedule: InsertionSchedule) -> CollapseMap:
    """Collapse map p = c∘s for a schedule: s scales [0,1] onto [0, 1+w] and
    c collapses each inserted interval back to its blowup point.

    Collapsed intervals have width w_i/(1+w); the complement maps with
    slope 1+w.
    """
    if not schedule.points:
        return CollapseMap(plateaus=(), pieces=((0.0, 1.0, 0.0, 1.0),),
                           slope=1.0)
    inside = list(zip(schedule.points, schedule.weights))
    plateaus, pieces = _segment_collapse(0.0, 1.0, inside)
    return CollapseMap(plateaus=tuple(plateaus), pieces=tuple(pieces),
                       slope=1.0 + schedule.total_weight)


def build_collapse_fixed(schedule: InsertionSchedule,
                         fixed_points=()) -> CollapseMap:
    """Collapse map that fixes the given points exactly: p(b) = b.

    Built by applying the scale-and-collapse construction independently on
    each segment between consecutive fixed points.  Plateau widths on a
    segment of length L carrying inserted weight W are w_i * L / (L + W);
    the slope field is None because the complement slope varies per segment.
    """
    bounds = [0.0] + sorted(float(b) for b in fixed_points) + [1.0]
    if any(v <= u for u, v in zip(bounds, bounds[1:])):
        raise ValueError("fixed points must be distinct and inside (0, 1)")
    if set(bounds) & set(schedule.points):
        raise ValueError("fixed points must avoid blowup points")
    if not fixed_points:
        return build_collapse(schedule)
    plateaus, pieces = [], []
    for a, b in zip(bounds, bounds[1:]):
        inside = [(z, w) for z, w in zip(schedule.points, schedule.weights)
                  if a < z < b]
        seg_plateaus, seg_pieces = _segment_collapse(a, b, inside)
        plateaus.extend(seg_plateaus)
        pieces.extend(seg_pieces)
    return CollapseMap(plateaus=tuple(plateaus), pieces=tuple(pieces),
                       slope=None)


def collapse_preimage(collapse: CollapseMap, y: float):
    """Preimage of y under the collapse map: interval or point."""
    return collapse.preimage(y)


def _min_dots(rows: np.ndarray, cands: np.ndarray) -> np.ndarray:
    """Min over base samples of the normal dot products, (len(rows), len(cands)).

    Blocked over the base axis to bound the intermediate at a few MB.
    """
    n_p = rows.shape[1]
    step = max(1, 2_000_000 // max(1, rows.shape[0] * cands.shape[0]))
    out = None
    for s in range(0, n_p, step):
        a = rows[:, s:s + step].transpose(1, 0, 2)   # (p, k, 3)
        b = cands[:, s:s + step].transpose(1, 2, 0)  # (p, 3, q)
        blk = (a @ b).min(axis=0)
        out = blk if out is None else np.minimum(out, blk)
    return out


def choose_partition(t_samples, normals, epsilon: float) -> Partition:
    """Greedy partition of the leaf-index interval.

    Each cell is the longest run of sampled leaves whose unit normals stay
    pairwise within epsilon in angle at every base sample; cut points are
    taken from t_samples.  Greedy left-to-right maximal steps, so ties go to
    larger cells.

    t_samples: (m,) increasing with t[0] = 0, t[-1] = 1.
    normals:   (m, P, 3) unit leaf normals at P base samples.
    """
    t = np.asarray(t_samples, dtype=float)
    nrm = np.asarray(normals, dtype=float)
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if nrm.ndim != 3 or nrm.shape[0] != t.size or nrm.shape[2] != 3:
        raise ValueError("normals must have shape (len(t), P, 3)")
    # pairwise angle <= eps  <=>  dot >= cos(eps) for unit vectors
    cos_floor = math.cos(min(epsilon, math.pi))
    m = t.size
    cuts = [0]
    i = 0
    while i < m - 1:
        j = i
        while j < m - 1:
            # candidates j+1 .. j+span checked in one batch; candidate q is
            # admissible iff every leaf from i up to it stays within eps of it,
            # so the first failure ends the greedy run exactly as a
            # one-at-a-time scan would
            span = min(m - 1 - j, 64)
            rows = nrm[i:j + span]
            cands = nrm[j + 1:j + 1 + span]
            mins = _min_dots(rows, cands)
            pref = np.minimum.accumulate(mins, axis=0)
            qs = np.arange(span)
            ok = pref[j - i + qs, qs] >= cos_floor
            good = int(np.argmin(ok)) if not ok.all() else span
            j += good
            if good < span:
                break
        if j == i:
            raise ValueError(
                f"adjacent sampled leaves exceed epsilon={epsilon} near "
                f"t={t[i]:.6g}; grid too coarse for this bound")
        cuts.append(j)
        i = j
    return Partition(tuple(float(t[k]) for k in cuts))
