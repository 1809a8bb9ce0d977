from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasegate import lattice as lt
from phasegate.compiler import DEFAULT_F

FULL = lt.LatticeConfig().full()
sites = st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4))


def _scene(target, lattice=FULL):
    bx, by = lt.target_beams(target, lattice, lt.BeamSpec("x", 0, 0, peak_shift=DEFAULT_F))
    sx, sy = lt.calibrate_target_intensity(target, (bx, by), DEFAULT_F, lattice.spacing)
    beams = (replace(bx, scale=sx), replace(by, scale=sy))
    return lt.classify_stage(lattice, beams, DEFAULT_F, 1.8), beams


def test_defaults():
    lat = lt.LatticeConfig()
    assert lat.dims == (5, 5, 5) and lat.spacing == 5.0 and lat.fill_probability == 0.40
    b = lt.BeamSpec("x", 0, 0)
    assert b.waist == 2.7 and b.rayleigh_range == 26.0


@settings(max_examples=40, deadline=None)
@given(sites, st.integers(0, 2 ** 32 - 1))
def test_class_partition(target, seed):
    lat = lt.sample_occupancy(lt.LatticeConfig(), np.random.default_rng(seed))
    if target not in lat.occupancy:
        lat = replace(lat, occupancy=lat.occupancy + (target,))
    scene, _ = _scene(target, lat)
    assert set(scene.class_of) == set(lat.occupancy)
    assert all(isinstance(c, lt.SiteClass) for c in scene.class_of.values())
    assert scene.class_of[target] == lt.SiteClass.CROSS


@settings(max_examples=25, deadline=None)
@given(sites)
def test_line_count_identity(target):
    scene, _ = _scene(target)
    counts = {c: sum(1 for v in scene.class_of.values() if v == c) for c in lt.SiteClass}
    assert counts[lt.SiteClass.CROSS] == 1
    assert counts[lt.SiteClass.LINE] == (5 - 1) + (5 - 1)
    assert counts[lt.SiteClass.SPECTATOR] == 125 - 9


@settings(max_examples=25, deadline=None)
@given(sites)
def test_shift_monotone_in_class(target):
    scene, _ = _scene(target)
    by = {c: [scene.aux_shift_of[s] for s, v in scene.class_of.items() if v == c] for c in lt.SiteClass}
    assert max(by[lt.SiteClass.SPECTATOR]) < min(by[lt.SiteClass.LINE])
    assert max(by[lt.SiteClass.LINE]) < min(by[lt.SiteClass.CROSS])
    assert scene.aux_shift_of[target] == pytest.approx(1.8 * DEFAULT_F, rel=1e-12)


def test_classes_match_threshold():
    target = (1, 3, 2)
    scene, beams = _scene(target)
    for s, c in scene.class_of.items():
        pt = np.asarray(s, float) * FULL.spacing
        n = sum(b.scale * lt.gaussian_intensity(b, pt) >= lt.CLASS_THRESHOLD for b in beams)
        assert c == {2: lt.SiteClass.CROSS, 1: lt.SiteClass.LINE, 0: lt.SiteClass.SPECTATOR}[n]


@pytest.mark.parametrize("offset_um, scale", [(0.0, 1.0), (26.0, 2.0), (13.0, 1.25)])
def test_calibration_scale(offset_um, scale):
    # target displaced along the x beam axis; the y beam runs through it at its focus
    target = (offset_um / 5.0, 0, 0)
    bx = lt.BeamSpec("x", 0, 0, focus=0.0)
    by = lt.BeamSpec("y", 0, target[0], focus=0.0)
    sx, sy = lt.calibrate_target_intensity(target, (bx, by), DEFAULT_F, 5.0)
    assert sx == pytest.approx(scale, rel=1e-12)
    assert sy == pytest.approx(1.0, rel=1e-12)


def test_calibration_refuses_large_scale():
    bx = lt.BeamSpec("x", 0, 0, focus=0.0)
    by = lt.BeamSpec("y", 0, 0, focus=0.0)
    with pytest.raises(ValueError):
        lt.calibrate_target_intensity((6, 0, 0), (bx, by), DEFAULT_F, 5.0)


def test_occupancy_mean():
    rng = np.random.default_rng(11)
    counts = [len(lt.sample_occupancy(lt.LatticeConfig(), rng).occupancy) for _ in range(2000)]
    se = np.sqrt(125 * 0.4 * 0.6 / 2000)
    assert abs(np.mean(counts) - 50) < 4 * se


def test_neighbour_leakage_is_small_and_opt_in():
    target = (2, 2, 2)
    scene, beams = _scene(target)
    lat = replace(FULL, neighbor_leakage=True)
    leaky = lt.classify_stage(lat, beams, DEFAULT_F, 1.8)
    nb = (2, 2, 3)
    assert scene.aux_shift_of[nb] == 0.0
    assert 0 < leaky.aux_shift_of[nb] < 5e-3 * DEFAULT_F


@given(st.lists(sites, max_size=12), st.lists(sites, max_size=12))
def test_pattern_round_trip(targets, occupied):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "p.txt"
        lt.write_pattern(p, targets, occupied)
        out = lt.read_pattern(p)
    assert out["targets"] == list(targets)
    assert out["occupied"] == list(occupied)


def test_pattern_parse_variants_and_errors():
    out = lt.parse_pattern("# c\n1,2,3\n[occupied]\n0 0 0\ntarget 4 4 4\n")
    assert out == {"targets": [(1, 2, 3), (4, 4, 4)], "occupied": [(0, 0, 0)]}
    with pytest.raises(ValueError, match="line 2"):
        lt.parse_pattern("1 2 3\n1 2\n")
    with pytest.raises(ValueError, match="line 1"):
        lt.parse_pattern("[bogus]\n")


def test_shares_beam_line():
    assert lt.shares_beam_line((1, 1, 1), (1, 3, 1))
    assert lt.shares_beam_line((1, 1, 1), (3, 1, 1))
    assert not lt.shares_beam_line((1, 1, 1), (3, 3, 1))
    assert not lt.shares_beam_line((1, 1, 1), (1, 1, 2))


def test_lattice_validation():
    with pytest.raises(ValueError):
        lt.LatticeConfig(dims=(0, 5, 5))
    with pytest.raises(ValueError):
        lt.LatticeConfig(fill_probability=1.5)
    with pytest.raises(ValueError):
        lt.LatticeConfig(occupancy=((5, 0, 0),))
