"""Tests for the smoothing operators.

Derived expectations are computed by the independent oracles at the top of
this file (direct formula evaluation, no calls into the code under test) and
frozen as literals where a single number is pinned.
"""

import dataclasses
import json
import math

import numpy as np
import pytest
from scipy.optimize import brentq

from flowbox.decomposition import DecompositionComplex, build_torus_scene
from flowbox.foliation import (
    BaseDomain,
    LeafFamily,
    c0_distance,
    holonomy,
    horizontal_family,
    sheared_family,
    straight_path,
    tilted_family,
    x_invariance_defect,
)
from flowbox.kernel import make_damping
from flowbox.smoothing import (
    FACE_COMPAT_TOL,
    IsotopyTrace,
    RegionMask,
    StraighteningError,
    _chart_blend,
    _corner_fiber_damp,
    _face_chart,
    _paste_strip,
    _shared_faces,
    band_masks,
    damped_cone,
    face_transport_defect,
    globally_smooth,
    holonomy_correction,
    local_damped_replace,
    reindex_blend,
    smooth_in_t,
    smooth_with_holonomy_constraint,
    straightening_isotopy,
    x_invariant_normalize,
)

RECT = BaseDomain("rectangle", 33, 33)
ANN = BaseDomain("annulus", 33, 32)


# ----------------------------------------------------------------- oracles

def ramp_oracle(u: float) -> float:
    """Direct evaluation of the exp-reciprocal ramp."""
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    a = math.exp(-1.0 / u)
    b = math.exp(-1.0 / (1.0 - u))
    return a / (a + b)


def shear_defect_oracle(shear: float, ts) -> float:
    """Sup over sampled leaves of the sheared family's holonomy defect along
    the full x-crossing (against the identity)."""
    return max(shear * t * (1.0 - t) for t in ts)


def shear_holonomy_oracle(shear: float, z: float) -> float:
    """Leaf index of height z at the far end of the shear: solves
    t + shear * t(1-t) = z by the quadratic formula."""
    s = shear
    return ((1.0 + s) - math.sqrt((1.0 + s) ** 2 - 4.0 * s * z)) / (2.0 * s)


# frozen from the oracle below: sup defect of shear 0.5 against horizontal
STRAIGHTENING_DEFECT = 0.125


def test_straightening_defect_oracle_value():
    ts = np.linspace(0.0, 1.0, 65)
    assert shear_defect_oracle(0.5, ts) == STRAIGHTENING_DEFECT


def random_family(base: BaseDomain, m: int, rng, amp: float = 0.35) -> LeafFamily:
    """Random monotone anchored family f_t = t + amp * t(1-t) * psi(x, y)."""
    x, y = np.meshgrid(base.x_nodes, base.y_nodes, indexing="ij")
    c = rng.uniform(-1.0, 1.0, size=4)
    psi = c[0] * x + c[1] * y + c[2] * x * y + c[3] * x * x
    psi = psi - psi[0, 0]
    scale = max(1.0, float(np.max(np.abs(psi))))
    psi /= scale
    t = np.linspace(0.0, 1.0, m)
    vals = t[:, None, None] + amp * (t * (1.0 - t))[:, None, None] * psi[None]
    return LeafFamily(base, t, vals, (0, 0))


# ----------------------------------------------------------------- regions

def test_region_rect_weight_is_exact_on_core_and_complement():
    mask = RegionMask(RECT, "rect", (0.375, 0.625, 0.375, 0.625),
                      (0.25, 0.75, 0.25, 0.75))
    w = mask.weight_grid()
    assert np.all(w[12:21, 12:21] == 1.0)
    outside = np.ones_like(w, dtype=bool)
    outside[8:25, 8:25] = False
    assert np.all(w[outside] == 0.0)
    probe = float(mask.weight_at(np.array([[0.3125, 0.5]]))[0])
    assert probe == pytest.approx(ramp_oracle((0.3125 - 0.25) / 0.125), abs=1e-15)
    assert 0.0 < probe < 1.0


def test_region_validation():
    with pytest.raises(ValueError):
        RegionMask(RECT, "rect", (0.2, 0.8, 0.2, 0.8), (0.3, 0.9, 0.1, 0.9))
    with pytest.raises(ValueError):
        # zero margin away from the domain boundary
        RegionMask(RECT, "rect", (0.2, 0.8, 0.2, 0.8), (0.2, 0.9, 0.1, 0.9))
    with pytest.raises(ValueError):
        RegionMask(RECT, "blob", (0.2, 0.8, 0.2, 0.8), (0.1, 0.9, 0.1, 0.9))
    # touching the domain boundary with zero margin is fine
    RegionMask(RECT, "rect", (0.0, 1.0, 0.0, 0.125), (0.0, 1.0, 0.0, 0.25))


def test_ring_mask_complements_rect():
    inner = (0.375, 0.625, 0.375, 0.625)
    outer = (0.125, 0.875, 0.125, 0.875)
    ring = RegionMask(RECT, "ring", inner, outer)
    rect = RegionMask(RECT, "rect", inner, outer)
    pts = np.stack([np.linspace(0.0, 1.0, 41), np.linspace(1.0, 0.0, 41)], -1)
    np.testing.assert_allclose(ring.weight_at(pts),
                               1.0 - rect.weight_at(pts), atol=0.0)
    w = ring.weight_grid()
    assert np.all(w[0:4, :] == 1.0) and np.all(w[:, 0:4] == 1.0)
    assert np.all(w[13:20, 13:20] == 0.0)


def test_band_masks_geometry():
    j0, j1 = band_masks(RECT)
    assert j0.weight_at(np.array([[0.5, 0.0625]]))[0] == 1.0
    assert j0.weight_at(np.array([[0.5, 0.5]]))[0] == 0.0
    assert j1.weight_at(np.array([[0.5, 0.9375]]))[0] == 1.0
    assert j1.weight_at(np.array([[0.5, 0.5]]))[0] == 0.0


def test_trace_validation():
    fam = horizontal_family(RECT, 5)
    with pytest.raises(ValueError):
        IsotopyTrace(np.array([0.0, 0.5]), (fam, fam))
    with pytest.raises(ValueError):
        IsotopyTrace(np.array([0.0, 0.5, 1.0]), (fam, fam))


# ------------------------------------------------------------- smooth_in_t

def test_smooth_horizontal_family_is_unchanged():
    fam = horizontal_family(RECT, 17)
    rep = {}
    out = smooth_in_t(fam, 0.3, report=rep)
    assert rep["partition_points"] == [0.0, 1.0]
    assert rep["retries"] == 0
    # every output leaf is the horizontal plane at its own index
    assert float(np.max(np.abs(out.values - out.t[:, None, None]))) == 0.0
    np.testing.assert_allclose(out.leaves_at(fam.t), fam.values, atol=1e-12)


def test_smooth_single_cell_formula_oracle():
    fam = sheared_family(RECT, 0.04, m=33)
    rep = {}
    out = smooth_in_t(fam, 0.3, fixed_leaves=(0.5,), report=rep)
    assert rep["partition_points"] == [0.0, 0.5, 1.0]
    ramp = make_damping()
    # candidate output indices from the damped reindexing of the input's
    candidates = {0.0, 0.5, 1.0}
    t = fam.t
    for a, b in ((0.0, 0.5), (0.5, 1.0)):
        for tk in t[(t > a) & (t < b)]:
            lam = float(ramp((tk - a) / (b - a)))
            candidates.add(a + lam * (b - a))
    assert all(s in candidates for s in out.t)
    # every output leaf sits on the segment between its cell's end leaves,
    # with the coefficient read off the anchor index
    ia, ib = np.flatnonzero(t == 0.0)[0], np.flatnonzero(t == 0.5)[0]
    ic = np.flatnonzero(t == 1.0)[0]
    worst = 0.0
    for s, grid in zip(out.t, out.values):
        lo, hi = (ia, ib) if s <= 0.5 else (ib, ic)
        lam = (s - t[lo]) / (t[hi] - t[lo])
        expected = fam.values[lo] + lam * (fam.values[hi] - fam.values[lo])
        worst = max(worst, float(np.max(np.abs(grid - expected))))
    assert worst <= 1e-12
    assert rep["formula_residual"] <= 1e-12


def test_smooth_fixed_leaf_bit_identical():
    fam = sheared_family(RECT, 0.5, m=65)
    out = smooth_in_t(fam, 0.2, fixed_leaves=(0.5,))
    idx = np.flatnonzero(out.t == 0.5)
    assert idx.size == 1
    src = np.flatnonzero(fam.t == 0.5)[0]
    assert np.array_equal(out.values[idx[0]], fam.values[src])


def test_smooth_partition_leaves_unchanged():
    fam = random_family(RECT, 33, np.random.default_rng(7))
    rep = {}
    out = smooth_in_t(fam, 0.1, report=rep)
    for p in rep["partition_points"]:
        i_out = np.flatnonzero(out.t == p)[0]
        i_in = np.flatnonzero(fam.t == p)[0]
        assert np.array_equal(out.values[i_out], fam.values[i_in])


def test_smooth_achieves_epsilon_ladder():
    fam = random_family(RECT, 65, np.random.default_rng(3))
    for eps in (0.3, 0.1, 0.03):
        rep = {}
        out = smooth_in_t(fam, eps, report=rep)
        assert c0_distance(fam, out) <= eps
        assert rep["formula_residual"] <= 1e-12


def test_smooth_rejections():
    fam = horizontal_family(RECT, 17)
    with pytest.raises(ValueError):
        smooth_in_t(fam, 0.0)
    with pytest.raises(ValueError):
        smooth_in_t(fam, 0.1, fixed_leaves=(1.0 / 3.0,))


# ------------------------------------------------------ damped replacement

def _central_region():
    return RegionMask(RECT, "rect", (0.375, 0.625, 0.375, 0.625),
                      (0.25, 0.75, 0.25, 0.75))


def test_local_replace_slices():
    fam = horizontal_family(RECT, 17, anchor=(16, 0))
    target = tilted_family(RECT, 0.05, 17)
    region = _central_region()
    trace = local_damped_replace(fam, target, region, s_samples=5)
    assert len(trace.slices) == 5
    t = trace.final.t
    f = fam.leaves_at(t)
    g = target.leaves_at(t)
    assert np.array_equal(trace.initial.values, f)
    # slice 1 equals the target on S
    assert np.max(np.abs(trace.final.values[:, 12:21, 12:21]
                         - g[:, 12:21, 12:21])) <= 1e-12
    # all slices untouched outside N(S)
    w = region.weight_grid()
    outside = w == 0.0
    for sl in trace.slices:
        assert np.array_equal(sl.values[:, outside], f[:, outside])


def test_local_replace_anchor_mismatch():
    fam = horizontal_family(RECT, 17)
    target = tilted_family(RECT, 0.05, 17)
    with pytest.raises(ValueError):
        local_damped_replace(fam, target, _central_region())


def test_straightening_mismatch_reports_sup_defect():
    fam = sheared_family(RECT, 0.5, m=65)
    target = horizontal_family(RECT, 65)
    region = RegionMask(RECT, "rect", (0.5, 0.875, 0.125, 0.875),
                        (0.375, 1.0, 0.0625, 0.9375))
    with pytest.raises(StraighteningError) as exc:
        straightening_isotopy(fam, target, region)
    assert exc.value.defect == pytest.approx(STRAIGHTENING_DEFECT, abs=1e-15)


def test_straightening_agreeing_holonomy_succeeds():
    fam = horizontal_family(RECT, 33)
    x, y = np.meshgrid(RECT.x_nodes, RECT.y_nodes, indexing="ij")
    bump = 16.0 * x * (1.0 - x) * y * (1.0 - y)
    t = np.linspace(0.0, 1.0, 33)
    vals = t[:, None, None] + 0.3 * (t * (1.0 - t))[:, None, None] * bump[None]
    target = LeafFamily(RECT, t, vals, (0, 0))
    region = RegionMask(RECT, "rect", (0.375, 0.625, 0.375, 0.625),
                        (0.0, 1.0, 0.0, 1.0))
    trace = straightening_isotopy(fam, target, region)
    g = target.leaves_at(trace.final.t)
    assert np.max(np.abs(trace.final.values[:, 12:21, 12:21]
                         - g[:, 12:21, 12:21])) <= 1e-9


def test_straightening_identity_gives_constant_trace():
    fam = sheared_family(RECT, 0.5, m=33)
    trace = straightening_isotopy(fam, fam, _central_region())
    for sl in trace.slices[1:]:
        assert np.array_equal(sl.values, trace.initial.values)


# ------------------------------------------- holonomy-constrained smoothing

def test_holonomy_constraint_benchmark():
    # shear along the core path, so rho_P(alpha) is a genuine quadratic map
    fam = sheared_family(RECT, 0.5, m=65, axis="y")
    rep = {}
    out = smooth_with_holonomy_constraint(fam, 0.15, report=rep)
    assert rep["correction_snapped"] is True
    assert c0_distance(fam, out) <= 0.15
    # holonomy along the core path, measured independently on both families
    # and against the quadratic oracle
    alpha = straight_path(RECT, (0.5, 0.0), (0.5, 1.0), samples=129)
    h_in = holonomy(fam, alpha)
    h_out = holonomy(out, alpha)
    zs = np.linspace(0.0, 1.0, 101)
    assert np.max(np.abs(h_out(zs) - h_in(zs))) <= 1e-9
    oracle = np.array([shear_holonomy_oracle(0.5, z) for z in zs])
    assert np.max(np.abs(h_in(zs) - oracle)) <= 1e-4
    assert np.max(np.abs(h_out(zs) - oracle)) <= 1e-4
    assert h_in(np.array([0.5]))[0] == pytest.approx(0.3819660112501051, abs=5e-5)
    # declared bands bit-exact
    ref = fam.leaves_at(out.t)
    assert np.array_equal(out.values[:, :, :5], ref[:, :, :5])
    assert np.array_equal(out.values[:, :, 28:], ref[:, :, 28:])
    # the middle strip was genuinely smoothed
    assert np.max(np.abs(out.values - ref)) > 1e-4


def test_holonomy_constraint_needs_rectangle():
    fam = sheared_family(ANN, 0.5, m=17)
    with pytest.raises(ValueError):
        smooth_with_holonomy_constraint(fam, 0.2)


def test_reindex_blend_restores_core_holonomy():
    fam = sheared_family(RECT, 0.5, m=65, axis="y")
    smoothed = smooth_in_t(fam, 0.1)
    alpha = straight_path(RECT, (0.5, 0.0), (0.5, 1.0), samples=129)
    corr = holonomy_correction(fam, smoothed, alpha)
    assert corr.identity_defect() > 1e-4
    out = reindex_blend(smoothed, corr, 0.125, 0.875)
    h_in = holonomy(fam, alpha)
    h_out = holonomy(out, alpha)
    zs = np.linspace(0.0, 1.0, 101)
    # exact for the continuous objects; sampled composition leaves a
    # second-order interpolation residue
    assert np.max(np.abs(h_out(zs) - h_in(zs))) <= 1e-3


# ------------------------------------------------------------------ coning

def test_cone_of_own_restriction_is_interior_smoothing():
    fam = random_family(RECT, 65, np.random.default_rng(11), amp=0.25)
    out = damped_cone(fam, fam, collar_width=0.125, epsilon=0.2)
    ref = fam.leaves_at(out.t)
    x, y = np.meshgrid(RECT.x_nodes, RECT.y_nodes, indexing="ij")
    d = np.minimum(np.minimum(x, 1.0 - x), np.minimum(y, 1.0 - y))
    frame = d <= 0.125
    assert np.array_equal(out.values[:, frame], ref[:, frame])
    smoothed = smooth_in_t(fam, 0.2)
    ring = RegionMask(RECT, "ring", (0.375, 0.625, 0.375, 0.625),
                      (0.125, 0.875, 0.125, 0.875))
    interior = ring.weight_grid() == 0.0
    assert np.allclose(out.values[:, interior],
                       smoothed.leaves_at(out.t)[:, interior], atol=1e-12)


def test_cone_horizontal_stays_horizontal():
    fam = horizontal_family(RECT, 17)
    out = damped_cone(fam, fam, collar_width=0.125, epsilon=0.2)
    assert np.max(np.abs(out.values - out.t[:, None, None])) <= 1e-12


def test_cone_tilted_collar_stays_close_to_horizontal():
    annular = tilted_family(RECT, 0.05, m=65)
    disk = horizontal_family(RECT, 65, anchor=(16, 0))
    out = damped_cone(annular, disk, collar_width=0.125, epsilon=0.1)
    assert c0_distance(out, disk) <= math.atan(0.05) + 0.1


def test_cone_corrupted_collar_rejected():
    annular = sheared_family(RECT, 0.9, m=17)
    disk = horizontal_family(RECT, 17)
    with pytest.raises(StraighteningError) as exc:
        damped_cone(annular, disk, collar_width=0.125, closeness_tol=0.1)
    assert exc.value.defect == pytest.approx(0.9 * 0.25, abs=1e-15)


def test_cone_validations():
    fam = horizontal_family(RECT, 9)
    with pytest.raises(ValueError):
        damped_cone(fam, fam, collar_width=0.3)
    with pytest.raises(ValueError):
        damped_cone(fam, horizontal_family(RECT, 9, anchor=(3, 3)))


# -------------------------------------------------------- x-invariance

def _y_modulated_annulus(x_coeff: float) -> LeafFamily:
    x, y = np.meshgrid(ANN.x_nodes, ANN.y_nodes, indexing="ij")
    psi = (0.3 + x_coeff * x) * np.sin(2.0 * np.pi * y)
    t = np.linspace(0.0, 1.0, 17)
    vals = t[:, None, None] + 0.2 * (t * (1.0 - t))[:, None, None] * psi[None]
    return LeafFamily(ANN, t, vals, (0, 0))


def test_x_invariant_normalize():
    fam = _y_modulated_annulus(0.5)
    # x-spread of 0.2 * t(1-t) * 0.5x * sin(2 pi y): max at t=1/2, sin=1
    assert x_invariance_defect(fam) == pytest.approx(0.2 * 0.25 * 0.5, abs=1e-15)
    out = x_invariant_normalize(fam)
    assert x_invariance_defect(out) == 0.0
    assert np.array_equal(out.values[:, 0, :], fam.values[:, 0, :])
    for i in range(ANN.nx):
        assert np.array_equal(out.values[:, i, :], fam.values[:, 0, :])


def test_x_invariant_normalize_identity_and_rejection():
    fam = _y_modulated_annulus(0.0)
    out = x_invariant_normalize(fam)
    assert np.array_equal(out.values, fam.values)
    with pytest.raises(ValueError):
        x_invariant_normalize(sheared_family(RECT, 0.3, m=9))


# ---------------------------------------------------------------- scenes


def _scene(kind="sheared", grid=33, samples=17):
    return build_torus_scene(
        (2, 2), foliation={"kind": kind, "shear": 0.1,
                           "grid": grid, "samples": samples})


def _with_family(scene, ident, family):
    boxes = tuple(dataclasses.replace(b, family=family)
                  if b.identifier == ident else b for b in scene.boxes)
    return DecompositionComplex(boxes)


def _side_heights(family, side):
    if side == "W":
        return family.values[:, 0, :]
    if side == "E":
        return family.values[:, -1, :]
    if side == "S":
        return family.values[:, :, 0]
    if side == "N":
        return family.values[:, :, -1]
    raise ValueError(side)


def _traced_transport(family, side, col, z):
    """Transport along a box side by direct root finding.

    Finds the leaf through height z at the side's first corner with brentq on
    the piecewise-linear corner fiber, then reads that leaf's height at sample
    column col.  Shares no code with the holonomy machinery it checks.
    """
    fib = _side_heights(family, side)
    t_star = brentq(lambda t: np.interp(t, family.t, fib[:, 0]) - z,
                    0.0, 1.0, xtol=1e-14)
    return float(np.interp(t_star, family.t, fib[:, col]))


def _oracle_face_defect(scene):
    # worst side-vs-side transport disagreement over all shared faces,
    # sampled at a quarter, half, and the far column on a fixed height grid
    worst = 0.0
    for _axis, _pos, (id_a, side_a), (id_b, side_b) in _shared_faces(scene):
        fam_a = scene.box(id_a).family
        fam_b = scene.box(id_b).family
        n_cols = _side_heights(fam_a, side_a).shape[1]
        for col in (n_cols // 4, n_cols // 2, n_cols - 1):
            for z in np.linspace(0.1, 0.9, 9):
                ta = _traced_transport(fam_a, side_a, col, z)
                tb = _traced_transport(fam_b, side_b, col, z)
                worst = max(worst, abs(ta - tb))
    return worst


@pytest.fixture(scope="module")
def sheared_scene():
    return _scene()


@pytest.fixture(scope="module")
def smoothed_sheared(sheared_scene):
    report = {}
    out = globally_smooth(sheared_scene, 0.3, report=report)
    return out, report


def test_face_transport_defect_is_trace_level(sheared_scene):
    report = {}
    assert face_transport_defect(sheared_scene, report=report) <= 1e-12
    assert len(report["faces"]) == 8
    assert report["max_defect"] <= 1e-12
    # the x-faces glue E to W sides whose sampled fibers differ pointwise;
    # only the traced leaf structure matches
    east = _side_heights(sheared_scene.box("b10").family, "E")
    west = _side_heights(sheared_scene.box("b00").family, "W")
    assert np.max(np.abs(east - west)) > 0.02


def test_face_transport_defect_flags_true_mismatch(sheared_scene):
    # one horizontal box among sheared neighbors: along its y-faces the
    # sheared side transports z -> z + 0.1 z(1-z) x while the horizontal side
    # is the identity, so the sup defect is 0.1 * max z(1-z) = 0.025
    broken = _with_family(sheared_scene, "b00",
                          horizontal_family(BaseDomain("rectangle", 33, 33)))
    report = {}
    defect = face_transport_defect(broken, report=report)
    assert defect == pytest.approx(0.025, abs=1e-12)
    bad = sorted((r["axis"], r["pos"]) for r in report["faces"]
                 if r["defect"] > FACE_COMPAT_TOL)
    assert bad == [("y", "0"), ("y", "1/2")]
    with pytest.raises(ValueError, match="y=0.*y=1/2"):
        globally_smooth(broken, 0.3)


def test_transport_oracle_agrees_with_defect_metric(sheared_scene):
    assert _oracle_face_defect(sheared_scene) < 1e-9
    broken = _with_family(sheared_scene, "b00",
                          horizontal_family(BaseDomain("rectangle", 33, 33)))
    oracle = _oracle_face_defect(broken)
    assert oracle == pytest.approx(0.025, abs=1e-9)
    assert face_transport_defect(broken) == pytest.approx(oracle, abs=1e-9)


def test_globally_smooth_horizontal_identity():
    scene = _scene(kind="horizontal")
    out = globally_smooth(scene, 0.3)
    for box in out.boxes:
        fam = box.family
        assert np.max(np.abs(fam.values - fam.t[:, None, None])) <= 1e-12
        assert c0_distance(scene.box(box.identifier).family, fam) <= 1e-12
    assert face_transport_defect(out) <= 1e-12


def test_globally_smooth_sheared_within_budget(sheared_scene, smoothed_sheared):
    out, report = smoothed_sheared
    worst = 0.0
    for box in sheared_scene.boxes:
        dist = c0_distance(box.family, out.box(box.identifier).family)
        assert dist <= 0.3
        assert dist == pytest.approx(
            report["box_distances"][box.identifier], abs=1e-12)
        worst = max(worst, dist)
    assert worst > 0.01        # the pipeline genuinely moved the leaves
    assert report["achieved_distance"] == pytest.approx(worst, abs=1e-12)
    assert face_transport_defect(out) < 1e-6
    assert _oracle_face_defect(out) < 1e-9
    for box in out.boxes:
        assert np.all(np.diff(box.family.values, axis=0) > 0.0)


def test_globally_smooth_ladder_monotone():
    scene = _scene(grid=17, samples=9)
    achieved = []
    for eps in (0.3, 0.15, 0.075):
        report = {}
        globally_smooth(scene, eps, report=report)
        achieved.append(report["achieved_distance"])
        assert report["achieved_distance"] <= eps
        assert report["face_defect_after"] < 1e-6
    assert achieved[0] > achieved[1] > achieved[2] > 0.0


def test_globally_smooth_report_shape(smoothed_sheared):
    _out, report = smoothed_sheared
    json.dumps(report)
    assert report["operation"] == "globally_smooth"
    assert report["epsilon"] == 0.3
    assert report["retries"] == 0
    assert report["face_defect_before"] <= 1e-12
    assert report["face_defect_after"] < 1e-6
    assert sorted(report["box_distances"]) == ["b00", "b01", "b10", "b11"]
    names = [s["stage"] for s in report["stages"]]
    assert names == ["vertical-edge neighborhoods",
                     "maximal-face neighborhoods", "interior coning"]
    for stage in report["stages"]:
        for key in ("region", "achieved_distance", "holonomy_defect",
                    "retries"):
            assert key in stage
    rows = report["stages"][1]["faces"]
    assert len(rows) == 8
    assert all(row["seam_gap"] <= 1e-9 for row in rows)


def test_globally_smooth_rejects_bad_scenes(sheared_scene):
    with pytest.raises(ValueError, match="positive"):
        globally_smooth(sheared_scene, 0.0)
    gap = DecompositionComplex(sheared_scene.boxes[:-1])
    with pytest.raises(ValueError, match="valid decomposition"):
        globally_smooth(gap, 0.3)
    split = build_torus_scene((1, 1), height_splits={(0, 0): ("1/2",)})
    with pytest.raises(ValueError, match="full-height"):
        globally_smooth(split, 0.3)


def test_globally_smooth_anchor_columns_exact(smoothed_sheared):
    out, _report = smoothed_sheared
    for box in out.boxes:
        assert np.array_equal(box.family.values[:, 0, 0], box.family.t)


def test_globally_smooth_self_glued_torus():
    opts = {"grid": 17, "samples": 9}
    horiz = build_torus_scene((1, 1), foliation={"kind": "horizontal", **opts})
    fam = globally_smooth(horiz, 0.3).boxes[0].family
    assert np.max(np.abs(fam.values - fam.t[:, None, None])) <= 1e-12
    sheared = build_torus_scene(
        (1, 1), foliation={"kind": "sheared", "shear": 0.1, **opts})
    report = {}
    out = globally_smooth(sheared, 0.3, report=report)
    assert report["achieved_distance"] <= 0.3
    assert face_transport_defect(out) < 1e-6


def test_corner_fiber_damp_keeps_transports(sheared_scene):
    fams = {b.identifier: _corner_fiber_damp(b.family, 0.7)
            for b in sheared_scene.boxes}
    moved = max(np.max(np.abs(fams[b.identifier].values - b.family.values))
                for b in sheared_scene.boxes)
    assert moved > 5e-4
    boxes = tuple(dataclasses.replace(b, family=fams[b.identifier])
                  for b in sheared_scene.boxes)
    assert face_transport_defect(DecompositionComplex(boxes)) <= 1e-12
    for fam in fams.values():
        assert np.array_equal(fam.values[:, 0, 0], fam.t)


def test_face_chart_paste_roundtrip(sheared_scene):
    axis, _pos, (id_a, _sa), (id_b, _sb) = _shared_faces(sheared_scene)[0]
    fam_a = sheared_scene.box(id_a).family
    fam_b = sheared_scene.box(id_b).family
    chart, e_a, seam_gap = _face_chart(fam_a, fam_b, axis, 8, "roundtrip")
    assert seam_gap <= 1e-12
    assert chart.base.nx == 17 and chart.anchor == (8, 0)
    assert np.array_equal(chart.values[:, 8, 0], chart.t)
    # pasting the unmodified chart back must leave both boxes unchanged as
    # functions of (t, x, y)
    blended = _chart_blend(chart, chart, 8, 1.0)
    assert np.array_equal(blended.values, chart.values)
    ta = e_a.inverse()(blended.t)
    ta[0], ta[-1] = 0.0, 1.0
    back_a = _paste_strip(fam_a, blended, axis, True, 8, ta)
    back_b = _paste_strip(fam_b, blended, axis, False, 8, blended.t.copy())
    assert np.max(np.abs(back_a.values - fam_a.leaves_at(ta))) <= 1e-12
    assert np.max(np.abs(back_b.values - fam_b.leaves_at(blended.t))) <= 1e-12
