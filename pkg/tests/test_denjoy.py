import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from flowbox.decomposition import build_torus_scene
from flowbox.denjoy import (
    BlowupError,
    BlowupLocus,
    CircleMapLift,
    CollapseData,
    InsertedPacket,
    blowup_box,
    blowup_circle_map,
    blowup_scene,
    rotation_number,
    verify_blowup,
    wandering_audit,
)
from flowbox.foliation import (
    BaseDomain,
    c0_distance,
    horizontal_family,
    leaf_through,
    sheared_family,
)
from flowbox.kernel import CollapseMap, InsertionSchedule, build_collapse

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------- oracles

def gap_intervals_by_hand(points, weights):
    """Independent insertion arithmetic: stretch [0,1] to [0,1+w], open an
    interval of width w_i at each point, rescale back to unit length."""
    total = sum(weights)
    out, cum = [], 0.0
    for z, w in zip(points, weights):
        lo = (z + cum) / (1.0 + total)
        out.append((lo, lo + w / (1.0 + total)))
        cum += w
    return out


def sheared_packet_distance(gap_width, shear):
    """Largest normal angle an x-sheared packet can reach once its gradients
    are scaled by the gap width: the shear profile t(1-t) peaks at 1/4."""
    return math.atan(gap_width * shear / 4.0)


def circle_gaps_by_hand(alpha, n, weight_rule):
    """Blown-circle gap intervals computed from scratch: orbit points, the
    inserted weight strictly below each one, rescale by the total."""
    ks = np.arange(-n, n + 1)
    orbit = np.mod(ks * alpha, 1.0)
    w = np.array([weight_rule(int(k)) for k in ks])
    order = np.argsort(orbit)
    below = np.zeros(ks.size)
    below[order] = np.concatenate([[0.0], np.cumsum(w[order])[:-1]])
    total = float(np.sum(w))
    lo = (orbit + below) / (1.0 + total)
    hi = (orbit + below + w) / (1.0 + total)
    return {int(k): (float(lo[i]), float(hi[i])) for i, k in enumerate(ks)}


def leaf_membership_by_inverse(original, collapsed_leaf, nodes):
    """Spread of original leaf indices over one collapsed leaf graph, probed
    point by point through leaf_through (the library's scalar inverse)."""
    ids = [leaf_through(original, (x, y), float(collapsed_leaf[i, j]))
           for (i, j, x, y) in nodes]
    return max(ids) - min(ids)


# ---------------------------------------------------------------- one box

def test_blowup_box_empty_schedule_is_identity():
    base = BaseDomain("rectangle", 9, 9)
    fam = horizontal_family(base, 9)
    blown, data = blowup_box(fam, InsertionSchedule((), ()), [])
    assert blown is fam
    z = np.linspace(0.0, 1.0, 33)
    np.testing.assert_array_equal(data.pi(z), z)
    assert data.gaps() == ()


def test_blowup_box_single_leaf_gap_quarters():
    base = BaseDomain("rectangle", 9, 9)
    fam = horizontal_family(base, 17)
    blown, data = blowup_box(fam, InsertionSchedule((0.5,), (1.0,)),
                             [horizontal_family(base, 17)])
    assert data.gaps() == ((0.25, 0.75),)
    # the gap collapses to the blown leaf, the complement maps with slope 2
    assert float(data.pi(0.25)) == 0.5
    assert float(data.pi(0.75)) == 0.5
    assert float(data.pi(0.5)) == 0.5
    assert float(data.pi(0.1)) == pytest.approx(0.2, abs=1e-15)
    assert float(data.pi(0.875)) == pytest.approx(0.75, abs=1e-15)
    # horizontal packet keeps the family horizontal: 16 complement leaves
    # (the blown sample is replaced) plus 17 packet leaves
    assert blown.m == 33
    assert c0_distance(fam, blown) == 0.0
    np.testing.assert_array_equal(
        blown.values, np.broadcast_to(blown.t[:, None, None],
                                      blown.values.shape))


def test_blowup_box_gaps_match_hand_computation():
    base = BaseDomain("rectangle", 9, 9)
    fam = horizontal_family(base, 9)
    points, weights = (0.25, 0.75), (0.5, 0.5)
    blown, data = blowup_box(fam, InsertionSchedule(points, weights),
                             [horizontal_family(base, 7)] * 2)
    assert data.gaps() == ((0.125, 0.375), (0.625, 0.875))
    for got, want in zip(data.gaps(), gap_intervals_by_hand(points, weights)):
        assert got[0] == pytest.approx(want[0], abs=1e-15)
        assert got[1] == pytest.approx(want[1], abs=1e-15)


def test_blowup_box_sheared_packet_distance():
    base = BaseDomain("rectangle", 17, 17)
    fam = horizontal_family(base, 17)
    shear, weight = 0.3, 1.0
    blown, data = blowup_box(fam, InsertionSchedule((0.5,), (weight,)),
                             [sheared_family(base, shear, 17)])
    measured = c0_distance(fam, blown)
    gap_width = weight / (1.0 + weight)
    # the packet gradient is scaled by the gap width exactly, and both the
    # peak of the shear profile and the far edge are grid samples
    # angle-domain tolerance: the arccos in the metric amplifies the
    # last-bit rounding of near-unit dot products by 1/sin(angle)
    assert measured == pytest.approx(
        sheared_packet_distance(gap_width, shear), abs=1e-13)
    # loose a-priori bound: gradients at most shear * w/(1+w)
    assert measured <= math.atan(shear * weight / (1.0 + weight))


def test_blowup_box_fixed_leaves_are_pinned():
    base = BaseDomain("rectangle", 9, 9)
    fam = horizontal_family(base, 21)
    sched = InsertionSchedule((0.3, 0.7), (0.4, 0.4))
    blown, data = blowup_box(fam, sched,
                             [horizontal_family(base, 7)] * 2,
                             fixed_leaves=(0.5,))
    assert float(data.pi(0.5)) == 0.5
    assert 0.5 in blown.t
    assert data.collapse().slope is None
    # per-segment width rule: w * L / (L + W) on each side of the pin
    (lo0, hi0), (lo1, hi1) = data.gaps()
    assert hi0 - lo0 == pytest.approx(0.4 * 0.5 / 0.9, abs=1e-12)
    assert hi1 - lo1 == pytest.approx(0.4 * 0.5 / 0.9, abs=1e-12)
    with pytest.raises(ValueError):
        blowup_box(fam, sched, [horizontal_family(base, 7)] * 2,
                   fixed_leaves=(0.3,))


def test_blowup_box_rejects_bad_inputs():
    base = BaseDomain("rectangle", 9, 9)
    fam = horizontal_family(base, 9)
    sched = InsertionSchedule((0.5,), (1.0,))
    with pytest.raises(ValueError, match="straighten"):
        blowup_box(sheared_family(base, 0.2, 9), sched,
                   [horizontal_family(base, 9)])
    with pytest.raises(ValueError, match="pair up"):
        blowup_box(fam, sched, [])
    with pytest.raises(ValueError, match="base"):
        blowup_box(fam, sched,
                   [horizontal_family(BaseDomain("rectangle", 11, 11), 9)])
    with pytest.raises(ValueError, match="anchor"):
        blowup_box(fam, sched, [horizontal_family(base, 9, anchor=(2, 3))])


def test_collapse_data_isotopy_and_injection():
    base = BaseDomain("rectangle", 9, 9)
    fam = horizontal_family(base, 17)
    _blown, data = blowup_box(fam, InsertionSchedule((0.5,), (1.0,)),
                              [horizontal_family(base, 9)])
    assert float(data.inject(0, 0.0)) == 0.25
    assert float(data.inject(0, 1.0)) == 0.75
    z = np.linspace(0.0, 1.0, 101)
    np.testing.assert_array_equal(data.pi_t(0.0, z), z)
    np.testing.assert_array_equal(data.pi_t(1.0, z), data.pi(z))
    # straight-line trace: the midpoint sits halfway, monotone in z
    np.testing.assert_allclose(data.pi_t(0.5, z), 0.5 * (z + data.pi(z)),
                               atol=1e-15)
    for s in (0.25, 0.5, 0.75):
        assert np.all(np.diff(data.pi_t(s, z)) >= -1e-15)
    with pytest.raises(ValueError):
        data.pi_t(1.5, z)


schedule_entries = st.integers(1, 5).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.02, 0.98), min_size=n, max_size=n, unique=True),
    st.lists(st.floats(0.05, 2.0), min_size=n, max_size=n)))


@settings(max_examples=40, deadline=None)
@given(schedule_entries)
def test_blowup_box_random_schedules(entry):
    zs, ws = sorted(entry[0]), entry[1]
    assume(len(zs) < 2 or min(b - a for a, b in zip(zs, zs[1:])) > 1e-3)
    base = BaseDomain("rectangle", 9, 9)
    fam = horizontal_family(base, 9)
    sched = InsertionSchedule(tuple(zs), tuple(ws))
    blown, data = blowup_box(fam, sched,
                             [sheared_family(base, 0.2, 7)] * len(zs))
    assert np.all(np.diff(blown.values, axis=0) > 0.0)
    total = sched.total_weight
    for (lo, hi), w in zip(data.gaps(), ws):
        assert abs((hi - lo) - w / (1.0 + total)) <= 1e-12
    # round trip: the collapse undoes the re-embedding on kept leaves
    kept = fam.t[np.min(np.abs(fam.t[:, None] - np.array(zs)[None, :]),
                        axis=1) > 0.0]
    np.testing.assert_allclose(
        data.pi(data.collapse().complement_embedding(kept)), kept,
        atol=1e-12)
    rep = verify_blowup(fam, blown, data)
    assert rep["all_pass"], rep


def test_fiberwise_collapse_matches_kernel():
    base = BaseDomain("rectangle", 9, 9)
    fam = horizontal_family(base, 9)
    sched = InsertionSchedule((0.3, 0.8), (0.5, 0.25))
    _blown, data = blowup_box(fam, sched, [horizontal_family(base, 7)] * 2)
    independent = build_collapse(sched)
    z = np.linspace(0.0, 1.0, 513)
    np.testing.assert_allclose(data.pi(z), independent(z), atol=1e-12)


# ---------------------------------------------------------------- scenes

def _torus(samples=9, grid=17):
    return build_torus_scene((2, 2), foliation={"kind": "horizontal",
                                                "samples": samples,
                                                "grid": grid})


@pytest.fixture(scope="module")
def blown_sheared():
    scene = _torus(samples=17, grid=33)
    base = BaseDomain("rectangle", 33, 33)
    locus = BlowupLocus.from_levels(scene, (0.5,), (0.1,))
    packets = {0: sheared_family(base, 0.3, 17)}
    report = {}
    out, data = blowup_scene(scene, locus, packets, epsilon=0.5,
                             report=report)
    return scene, locus, packets, out, data, report


def test_blowup_scene_empty_locus_identity():
    scene = _torus()
    locus = BlowupLocus.from_levels(scene, (), ())
    out, data = blowup_scene(scene, locus, {}, epsilon=0.1)
    for box in scene.boxes:
        np.testing.assert_array_equal(
            box.family.values, out.box(box.identifier).family.values)
    rep = verify_blowup(scene, out, data)
    assert rep["all_pass"]
    assert rep["max_defect"] == 0.0


def test_blowup_scene_horizontal_packet_per_box_oracle():
    scene = _torus()
    base = BaseDomain("rectangle", 17, 17)
    locus = BlowupLocus.from_levels(scene, (0.5,), (0.1,))
    packets = {0: horizontal_family(base, 9)}
    out, data = blowup_scene(scene, locus, packets, epsilon=0.1)
    for box in scene.boxes:
        ident = box.identifier
        solo, solo_data = blowup_box(box.family,
                                     locus.schedules[ident],
                                     [packets[0]])
        got = out.box(ident).family
        assert np.max(np.abs(got.values - solo.values)) <= 1e-10
        np.testing.assert_array_equal(got.t, solo.t)
        assert data.gaps(ident) == solo_data.gaps()
        # horizontal packets keep the scene horizontal
        assert c0_distance(box.family, got) == 0.0


def test_blowup_scene_sheared_packet_verifies(blown_sheared):
    scene, _locus, _packets, out, data, report = blown_sheared
    rep = verify_blowup(scene, out, data)
    assert rep["all_pass"], rep
    assert rep["max_defect"] < 1e-9
    want = sheared_packet_distance(0.1 / 1.1, 0.3)
    assert report["achieved_distance"] == pytest.approx(want, abs=1e-12)
    assert report["face_defect"] <= 1e-12
    assert report["stages"][1]["holonomy_defect"] <= 1e-12


def test_blowup_scene_leaf_membership_against_leaf_through(blown_sheared):
    scene, _locus, _packets, out, data, rep_unused = blown_sheared
    rep = verify_blowup(scene, out, data)
    row = next(r for r in rep["properties"] if r["property"] == 6)
    worst = 0.0
    for box in scene.boxes:
        fam = out.box(box.identifier).family
        collapsed = data.pi(fam.values, box=box.identifier)
        nodes = [(i, j, x, y)
                 for i, x in ((0, 0.0), (16, 0.5), (32, 1.0))
                 for j, y in ((0, 0.0), (32, 1.0))]
        for leaf in range(0, fam.m, 5):
            worst = max(worst, leaf_membership_by_inverse(
                box.family, collapsed[leaf], nodes))
    assert worst < 1e-9
    assert row["defect"] < 1e-9
    # the probed spread never exceeds the report's full-grid defect
    assert worst <= row["defect"] + 1e-12


def test_blowup_scene_halving_weights_decreases_distance():
    scene = _torus(samples=17, grid=33)
    base = BaseDomain("rectangle", 33, 33)
    packets = {0: sheared_family(base, 0.3, 17)}
    achieved = []
    for total in (0.1, 0.05):
        locus = BlowupLocus.from_levels(scene, (0.5,), (total,))
        rep = {}
        blowup_scene(scene, locus, packets, epsilon=0.5, report=rep)
        achieved.append(rep["achieved_distance"])
        assert rep["achieved_distance"] == pytest.approx(
            sheared_packet_distance(total / (1.0 + total), 0.3), abs=1e-12)
    assert achieved[1] < achieved[0]


def test_blowup_scene_epsilon_forces_weight_halving():
    scene = _torus(samples=9, grid=17)
    base = BaseDomain("rectangle", 17, 17)
    packets = {0: sheared_family(base, 0.3, 9)}
    locus = BlowupLocus.from_levels(scene, (0.5,), (0.1,))
    report = {}
    out, data = blowup_scene(scene, locus, packets, epsilon=0.002,
                             report=report)
    assert report["retries"] == 2
    assert report["achieved_distance"] <= 0.002
    assert report["achieved_distance"] == pytest.approx(
        sheared_packet_distance(0.025 / 1.025, 0.3), abs=1e-12)
    # the returned data reflects the final halved weights
    assert data.schedule("b00").weights == (0.025,)
    with pytest.raises(BlowupError) as err:
        blowup_scene(scene, locus, packets, epsilon=1e-9)
    assert err.value.achieved > 0.0


def test_blowup_scene_rejects_inconsistent_inputs():
    scene = _torus()
    base = BaseDomain("rectangle", 17, 17)
    pkt = horizontal_family(base, 9)
    locus = BlowupLocus.from_levels(scene, (0.5,), (0.1,))
    with pytest.raises(ValueError, match="positive"):
        blowup_scene(scene, locus, {0: pkt}, epsilon=0.0)
    sheared_scene = build_torus_scene(
        (2, 2), foliation={"kind": "sheared", "shear": 0.1,
                           "samples": 9, "grid": 17})
    with pytest.raises(ValueError, match="straighten"):
        blowup_scene(sheared_scene, locus, {0: pkt}, epsilon=0.1)
    missing = BlowupLocus(
        {k: v for k, v in locus.schedules.items() if k != "b11"},
        {k: v for k, v in locus.labels.items() if k != "b11"})
    with pytest.raises(ValueError, match="cover box"):
        blowup_scene(scene, missing, {0: pkt}, epsilon=0.1)
    skew = BlowupLocus(
        {**locus.schedules, "b00": InsertionSchedule((0.5,), (0.2,))},
        dict(locus.labels))
    with pytest.raises(ValueError, match="locus disagrees"):
        blowup_scene(scene, skew, {0: pkt}, epsilon=0.1)
    with pytest.raises(ValueError, match="underdetermined"):
        blowup_scene(scene, locus, {}, epsilon=0.1)
    # per-box packet data that does not glue across the b00|b10 face
    bent = InsertedPacket(0, {
        "b00": sheared_family(base, 0.4, 9, axis="y"),
        "b01": pkt, "b10": pkt, "b11": pkt})
    with pytest.raises(ValueError, match="holonomy data disagree"):
        blowup_scene(scene, locus, {0: bent}, epsilon=0.1)


def test_blowup_scene_report_is_json(blown_sheared):
    _scene, _locus, _packets, _out, _data, report = blown_sheared
    blob = json.loads(json.dumps(report))
    assert blob["operation"] == "blowup_scene"
    assert [s["stage"] for s in blob["stages"]] == [
        "edge-neighborhood boxes", "maximal-face gluing",
        "interior extension"]
    assert set(blob["box_distances"]) == {"b00", "b01", "b10", "b11"}
    assert blob["retries"] == 0
    assert blob["locus"]["b00"]["schedule"]["weights"] == [0.1]


def test_verify_blowup_flags_corrupted_collapse(blown_sheared):
    scene, _locus, _packets, out, data, _report = blown_sheared
    (lo, hi), = data.gaps("b00")
    shifted = CollapseMap(
        plateaus=((lo + 0.01, hi + 0.01, 0.5),),
        pieces=((0.0, lo + 0.01, 0.0, 0.5), (hi + 0.01, 1.0, 0.5, 1.0)),
        slope=None)
    corrupted = CollapseData(dict(data.schedules),
                             {**data.collapses, "b00": shifted},
                             dict(data.fixed))
    rep = verify_blowup(scene, out, corrupted)
    assert not rep["all_pass"]
    row = next(r for r in rep["properties"] if r["property"] == 6)
    assert not row["pass"]
    assert row["witness"]["box"] == "b00"
    assert row["defect"] > 1e-6


def test_locus_and_packet_validation():
    scene = _torus()
    with pytest.raises(ValueError, match="label"):
        BlowupLocus({"b00": InsertionSchedule((0.5,), (0.1,))},
                    {"b00": (0, 1)})
    with pytest.raises(ValueError, match="duplicate"):
        BlowupLocus({"b00": InsertionSchedule((0.3, 0.6), (0.1, 0.1))},
                    {"b00": (0, 0)})
    with pytest.raises(ValueError, match="same boxes"):
        BlowupLocus({"b00": InsertionSchedule((0.5,), (0.1,))}, {})
    with pytest.raises(ValueError):
        BlowupLocus.from_levels(scene, (0.0,), (0.1,))
    locus = BlowupLocus.from_levels(scene, (0.5,), (0.1,))
    half = locus.scaled(0.5)
    assert half.schedules["b00"].weights == (0.05,)
    pkt = InsertedPacket.uniform(
        0, horizontal_family(BaseDomain("rectangle", 17, 17), 9), scene)
    assert pkt.family_for("b01").m == 9
    with pytest.raises(ValueError, match="underdetermined"):
        pkt.family_for("nope")


# ---------------------------------------------------------------- circle

def test_circle_lift_validation_and_translation():
    with pytest.raises(ValueError, match="increasing"):
        CircleMapLift(np.array([0.0, 0.5]), np.array([0.4, 0.4]))
    with pytest.raises(ValueError, match="0, 1"):
        CircleMapLift(np.array([0.0, 1.0]), np.array([0.1, 0.9]))
    with pytest.raises(ValueError, match="less than one"):
        CircleMapLift(np.array([0.0, 0.5]), np.array([0.0, 1.0]))
    lift = CircleMapLift(np.array([0.0, 0.25, 0.5]),
                         np.array([0.3, 0.6, 0.7]))
    x = np.linspace(-2.0, 2.0, 401)
    np.testing.assert_allclose(lift(x + 1.0), lift(x) + 1.0, atol=1e-12)
    assert np.all(np.diff(lift(x)) > 0.0)


def test_rotation_number_rigid_third():
    third = 1.0 / 3.0
    lift = CircleMapLift(np.array([0.0, 0.5]),
                         np.array([third, third + 0.5]))
    report = {}
    value = rotation_number(lift, 1200, report)
    assert value == pytest.approx(third, abs=1e-12)
    assert report["iterations"] == 1200
    assert report["error_proxy"] >= 0.0
    with pytest.raises(ValueError, match="1000"):
        rotation_number(lift, 999)


def test_rotation_number_rigid_golden_mean():
    lift = CircleMapLift(np.array([0.0, 0.5]),
                         np.array([GOLDEN, GOLDEN + 0.5]))
    value = rotation_number(lift, 100_000)
    assert value == pytest.approx(GOLDEN, abs=1e-6)


def test_rotation_number_conjugacy_invariance():
    h = blowup_circle_map(GOLDEN, 200)
    g = CircleMapLift(np.array([0.0, 0.3, 0.7]), np.array([0.0, 0.5, 0.8]))
    g_inv = CircleMapLift(np.array([0.0, 0.5, 0.8]),
                          np.array([0.0, 0.3, 0.7]))

    def conjugated(x):
        return g(h(g_inv(x)))

    n = 20_000
    base_value = rotation_number(h, n)
    conj_value = rotation_number(conjugated, n)
    assert abs(base_value - conj_value) <= 2.0 / n


def test_blowup_circle_map_gap_images_affine():
    n = 300
    report = {}
    lift = blowup_circle_map(GOLDEN, n, report=report)
    assert lift.inputs.size == 4 * n
    gaps = circle_gaps_by_hand(GOLDEN, n, lambda k: 1.0 / (k * k + 1.0))
    for k, (lo, hi) in report["gaps"].items():
        want = gaps[int(k)]
        assert lo == pytest.approx(want[0], abs=1e-12)
        assert hi == pytest.approx(want[1], abs=1e-12)
    # every gap maps exactly onto its successor gap, endpoints matched
    for k in range(-n, n):
        lo, hi = gaps[k]
        img_lo, img_hi = gaps[k + 1]
        assert float(np.mod(lift(lo), 1.0)) == pytest.approx(img_lo,
                                                             abs=1e-12)
        assert float(np.mod(lift(hi), 1.0)) == pytest.approx(img_hi,
                                                             abs=1e-12)
    assert report["total_weight"] == pytest.approx(
        sum(1.0 / (k * k + 1.0) for k in range(-n, n + 1)), abs=1e-12)


def test_blowup_circle_map_rotation_number():
    lift = blowup_circle_map(GOLDEN, 300)
    value = rotation_number(lift, 20_000)
    assert abs(value - GOLDEN) <= 1e-3


def test_blowup_circle_map_rejects_bad_inputs():
    with pytest.raises(ValueError, match="collide"):
        blowup_circle_map(1.0 / 3.0, 300)
    with pytest.raises(ValueError, match="100"):
        blowup_circle_map(GOLDEN, 50)
    with pytest.raises(ValueError, match="positive"):
        blowup_circle_map(GOLDEN, 150, weights=lambda k: -1.0)


def test_wandering_audit_blown_gaps_do_not_return():
    report = {}
    lift = blowup_circle_map(GOLDEN, 200, report=report)
    gaps = [tuple(v) for v in report["gaps"].values()]
    audit = wandering_audit(lift, gaps, steps=1500)
    assert audit["wandering"]
    assert audit["revisits"] == 0
    assert audit["first_revisit"] is None


def test_wandering_audit_detects_rigid_returns():
    # under the rigid rotation every interval returns: three-distance gives
    # a return of (0, 0.1) within the first 17 golden-mean iterates
    lift = CircleMapLift(np.array([0.0, 0.5]),
                         np.array([GOLDEN, GOLDEN + 0.5]))
    audit = wandering_audit(lift, [(0.0, 0.1)], steps=100)
    assert not audit["wandering"]
    assert audit["revisits"] > 0
    assert audit["first_revisit"]["step"] <= 17
    with pytest.raises(ValueError, match="positive length"):
        wandering_audit(lift, [(0.2, 0.2)], steps=10)
