import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from venibot.errors import DegenerateOrientationError, FitError
from venibot.geometry import (SuitabilityRules, SuitableAreaExtractor, analyze_segments,
                              axis_theta, continuous_angle, erase_unsuitable, extract_targets,
                              fit_component_angle, fit_points, reference_gamma, sign_from_endpoints,
                              skeletonize, suitable_areas)
from venibot.metrics import axis_angle_difference, dsc
from venibot.synth import VeinTreeSpec, generate_sample


def ellipse(a, b, gamma_deg, shape=(160, 160)):
    """Rasterise pixel centres inside an ellipse; gamma from +x, pixel frame (y down)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    g = math.radians(gamma_deg)
    dx, dy = xx - (w - 1) / 2, yy - (h - 1) / 2
    u = dx * math.cos(g) + dy * math.sin(g)
    v = -dx * math.sin(g) + dy * math.cos(g)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def bar(phi_deg, half_len=40, half_width=3.25, shape=(128, 208)):
    """Bar at on-screen angle phi (counter-clockwise, y up)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = math.radians(phi_deg)
    ux, uy = math.cos(r), -math.sin(r)
    dx, dy = xx - w // 2, yy - h // 2
    along = dx * ux + dy * uy
    perp = -dx * uy + dy * ux
    return (np.abs(along) < half_len) & (np.abs(perp) < half_width)


# -- skeleton -----------------------------------------------------------------------

def test_horizontal_bar_skeleton_is_single_path():
    m = np.zeros((20, 40), bool)
    m[5:8, 10:30] = True
    sk = skeletonize(m)
    ys = sk.pixels[:, 1]
    assert set(ys.tolist()) <= {5, 6, 7}
    assert np.mean(ys == 6) >= 0.85
    deg = sk.degrees
    assert (deg == 2).sum() == len(deg) - 2 and (deg == 1).sum() == 2


def test_empty_skeleton():
    sk = skeletonize(np.zeros((10, 10), bool))
    assert len(sk.pixels) == 0


def test_plus_sign_has_one_junction_cluster():
    p = np.zeros((41, 41), bool)
    p[18:23, 5:36] = True
    p[5:36, 18:23] = True
    junctions = np.argwhere(skeletonize(p).degree_map >= 3)
    assert len(junctions) >= 1
    assert np.ptp(junctions, axis=0).max() <= 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_skeleton_inside_mask_and_keeps_components(seed):
    rng = np.random.default_rng(seed)
    m = np.zeros((40, 40), bool)
    for _ in range(3):
        y, x = rng.integers(4, 30, 2)
        m[y:y + rng.integers(3, 9), x:x + rng.integers(3, 9)] = True
    sk = skeletonize(m)
    assert not (sk.image & ~m).any()
    from venibot.vision import connected_components
    assert connected_components(sk.image).count == connected_components(m).count
    assert sk.degrees.max(initial=0) <= 8


# -- segment analysis ------------------------------------------------------------------

def test_straight_bar_statistics():
    m = np.zeros((80, 100), bool)
    m[30:36, 20:80] = True
    (s,) = analyze_segments(m, skeletonize(m))
    assert s.length == pytest.approx(60, abs=2 + 6)   # thinning shortens each end by ~w/2
    assert s.diameter == pytest.approx(6, abs=1)
    assert s.turning < 0.3      # end hooks only; the cap is 1.5 deg/px
    assert not s.has_bifurcation and not s.touches_edge


def test_y_shape_all_branches_bifurcating():
    m = np.zeros((100, 100), bool)
    m[50:55, 10:52] = True
    for k in range(40):
        m[50 - k:55 - k, 50 + k:54 + k] = True
        m[50 + k:55 + k, 50 + k:54 + k] = True
    stats = analyze_segments(m, skeletonize(m))
    assert len(stats) >= 3
    assert all(s.has_bifurcation for s in stats)


def test_bar_near_border_touches_edge():
    m = np.zeros((60, 80), bool)
    m[2:7, 10:70] = True
    (s,) = analyze_segments(m, skeletonize(m), edge_margin=8)
    assert s.touches_edge


# -- erasure ---------------------------------------------------------------------------

def test_single_straight_vein_trimmed_at_margin():
    m = bar(20.0, half_len=120, half_width=3)
    rules = SuitabilityRules()
    out = suitable_areas(m, rules)
    expected = m.copy()
    e = rules.edge_margin
    expected[:e] = expected[-e:] = False
    expected[:, :e] = expected[:, -e:] = False
    assert dsc(out, expected) > 0.97
    assert not (out & ~m).any()


def test_short_bifurcating_tree_is_erased():
    m = np.zeros((100, 100), bool)
    m[50:55, 30:52] = True
    for k in range(18):
        m[50 - k:55 - k, 50 + k:54 + k] = True
        m[50 + k:55 + k, 50 + k:54 + k] = True
    assert not suitable_areas(m).any()


@pytest.mark.parametrize("seed", range(8))
def test_erasure_matches_generator_truth(seed):
    s = generate_sample(VeinTreeSpec(seed=400 + seed).noise_free())
    sk = skeletonize(s.vein_gt)
    stats = analyze_segments(s.vein_gt, sk)
    out = erase_unsuitable(s.vein_gt, stats, SuitabilityRules(), sk)
    assert not (out & ~s.vein_gt).any()
    assert dsc(out, s.suitable_gt) >= 0.85


# -- ellipse fit ---------------------------------------------------------------------

def test_rasterised_ellipse_orientation():
    ys, xs = np.nonzero(ellipse(40, 8, 30))
    fit = fit_points(xs, ys)
    assert 29.0 <= fit.gamma <= 31.0
    assert fit.a >= fit.b > 0


def test_horizontal_bar_gamma_zero():
    m = np.zeros((20, 60), bool)
    m[8:12, 5:55] = True
    fit = fit_component_angle(m, 1)
    assert min(fit.gamma, 180 - fit.gamma) <= 0.5


def test_disk_is_degenerate():
    yy, xx = np.mgrid[0:41, 0:41]
    m = (xx - 20) ** 2 + (yy - 20) ** 2 <= 15 ** 2
    with pytest.raises(DegenerateOrientationError):
        fit_component_angle(m, 1)


def test_tiny_component_fit_error():
    with pytest.raises(FitError):
        fit_points([1, 2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 180, exclude_max=True), st.floats(3, 6))
def test_ellipse_orientation_property(gamma, ratio):
    ys, xs = np.nonzero(ellipse(45, 45 / ratio, gamma))
    fit = fit_points(xs, ys)
    d = abs(fit.gamma - gamma) % 180
    assert min(d, 180 - d) <= 1.0


# -- continuous and signed angle ---------------------------------------------------------

@pytest.mark.parametrize("gamma_ref,theta", [(90, 0), (0, 90), (135, 45), (45, 45)])
def test_axis_theta_values(gamma_ref, theta):
    assert axis_theta(gamma_ref) == theta


def test_axis_theta_every_degree():
    for g in range(180):
        assert axis_theta(float(g)) == abs(g - 90.0)


def test_rising_bar_positive():
    ys, xs = np.nonzero(bar(45.0))
    t = continuous_angle(fit_points(xs, ys))
    assert t.theta == pytest.approx(45.0, abs=0.5)
    assert t.phi == pytest.approx(45.0, abs=0.5)
    assert t.theta == pytest.approx(abs(reference_gamma(t.fit.gamma) - 90), abs=1e-9)


def test_falling_bar_negative():
    ys, xs = np.nonzero(bar(-30.0))
    assert continuous_angle(fit_points(xs, ys)).phi == pytest.approx(-30.0, abs=0.5)


def test_horizontal_tie_positive():
    assert sign_from_endpoints((10, 5), (0, 5)) == 1.0
    m = np.zeros((20, 60), bool)
    m[8:12, 5:55] = True
    assert continuous_angle(fit_component_angle(m, 1)).phi >= 0


@settings(max_examples=60, deadline=None)
@given(st.floats(-89.5, 90.0))
def test_bar_angle_recovered_and_invariants(phi):
    ys, xs = np.nonzero(bar(phi))
    t = continuous_angle(fit_points(xs, ys))
    assert 0 <= t.theta <= 90 and -90 < t.phi <= 90
    assert abs(t.phi) == pytest.approx(t.theta)
    assert axis_angle_difference(t.phi, phi) <= 1.0


# -- full extraction ---------------------------------------------------------------------

def test_empty_mask_no_targets():
    assert extract_targets(np.zeros((64, 64), bool)) == []


def test_single_vein_sample():
    s = generate_sample(VeinTreeSpec(seed=77, trunks=1, branch_prob=0.0).noise_free())
    targets = extract_targets(s.vein_gt)
    assert len(targets) == 1 == len(s.targets)
    assert axis_angle_difference(targets[0].phi, s.targets[0].phi_deg) <= 2.0


def test_two_parallel_veins():
    m = np.zeros((128, 208), bool)
    m[35:41, 20:190] = True
    m[85:91, 20:190] = True
    targets = extract_targets(m)
    assert len(targets) == 2
    assert abs(targets[0].phi - targets[1].phi) < 1.0


def _match(a, b):
    return [min(b, key=lambda q: (q.centroid[0] - p.centroid[0]) ** 2
                + (q.centroid[1] - p.centroid[1]) ** 2) for p in a]


@pytest.mark.parametrize("seed", range(5))
def test_flip_and_rotation_equivariance(seed):
    s = generate_sample(VeinTreeSpec(seed=500 + seed).noise_free())
    m = s.vein_gt
    h, w = m.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = extract_targets(m)
        for flipped, sign, mapx, mapy in (
                (m[:, ::-1], -1, lambda x: w - 1 - x, lambda y: y),
                (m[::-1, :], -1, lambda x: x, lambda y: h - 1 - y),
                (m[::-1, ::-1], 1, lambda x: w - 1 - x, lambda y: h - 1 - y)):
            other = extract_targets(np.ascontiguousarray(flipped))
            assert len(other) == len(base)
            moved = [type(t)(t.component, (mapx(t.centroid[0]), mapy(t.centroid[1])), t.theta,
                             t.phi, t.gamma_ref) for t in base]
            for t, q in zip(moved, _match(moved, other)):
                assert axis_angle_difference(q.phi, sign * t.phi) <= 2.0


def test_extractor_estimator():
    s = generate_sample(VeinTreeSpec(seed=77, trunks=1, branch_prob=0.0).noise_free())
    ext = SuitableAreaExtractor().fit([s.vein_gt])
    out = ext.transform(np.stack([s.vein_gt, s.vein_gt]))
    assert out.shape == (2,) + s.vein_gt.shape
    assert not (out[0] & ~s.vein_gt).any()
    assert len(ext.predict_targets(s.vein_gt)[0]) == 1
    assert ext.set_params(min_length=500).fit([s.vein_gt]).transform(s.vein_gt).sum() == 0
