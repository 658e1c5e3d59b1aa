"""Position solver properties and scenario files."""

import warnings

import numpy as np
import pytest

from uwbrem import localization as loc
from uwbrem.rng import Rng


def random_scene(rng, n_anchors=4):
    """Well-conditioned anchors with the tag inside their convex hull."""
    while True:
        anchors = rng.uniform_array((n_anchors, 3), -5.0, 5.0)
        anchors[:, 2] = rng.uniforms(n_anchors, 0.0, 4.0)
        centered = anchors - anchors.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[2] >= 0.5:  # non-degenerate tetrahedron
            break
    w = rng.uniforms(n_anchors, 0.05, 1.0)
    w /= w.sum()
    truth = w @ anchors
    ranges = np.linalg.norm(anchors - truth, axis=1)
    return loc.AnchorSet(anchors), truth, ranges


def test_exact_ranges_recover_position():
    anchors = loc.AnchorSet(np.array([[0.0, 0, 0], [1, 0, 0],
                                      [0, 1, 0], [0, 0, 1]]))
    truth = np.array([0.2, 0.3, 0.4])
    ranges = np.linalg.norm(anchors.anchors - truth, axis=1)
    fix = loc.gauss_newton_solve(anchors, ranges)
    assert float(np.linalg.norm(fix.position - truth)) < 1e-6

    rng = Rng(0)
    for _ in range(200):
        anchors, truth, ranges = random_scene(rng)
        fix = loc.gauss_newton_solve(anchors, ranges)
        assert fix.converged
        assert fix.iterations <= 25
        assert float(np.linalg.norm(fix.position - truth)) < 1e-6


def test_more_anchors_still_exact():
    rng = Rng(1)
    for _ in range(50):
        anchors, truth, ranges = random_scene(rng, n_anchors=6)
        fix = loc.gauss_newton_solve(anchors, ranges)
        assert float(np.linalg.norm(fix.position - truth)) < 1e-6


def test_solution_equivariant_under_rigid_motion():
    rng = Rng(2)
    anchors, truth, ranges = random_scene(rng)
    fix = loc.gauss_newton_solve(anchors, ranges)
    # rotate about z by 30 degrees and translate
    c, s = np.cos(0.5236), np.sin(0.5236)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    shift = np.array([10.0, -4.0, 2.0])
    moved = loc.AnchorSet(anchors.anchors @ rot.T + shift)
    fix2 = loc.gauss_newton_solve(moved, ranges)
    np.testing.assert_allclose(fix2.position, fix.position @ rot.T + shift,
                               atol=1e-8)


def test_solution_invariant_to_anchor_order():
    rng = Rng(3)
    anchors, truth, ranges = random_scene(rng, n_anchors=5)
    fix = loc.gauss_newton_solve(anchors, ranges)
    perm = [3, 0, 4, 1, 2]
    fix2 = loc.gauss_newton_solve(loc.AnchorSet(anchors.anchors[perm]),
                                  ranges[perm])
    np.testing.assert_allclose(fix2.position, fix.position, atol=1e-8)


def test_noisy_ranges_leave_residual():
    rng = Rng(4)
    anchors, truth, ranges = random_scene(rng, n_anchors=6)
    noisy = ranges + rng.normals(6, 0.0, 0.05)
    noisy = np.maximum(noisy, 0.1)
    fix = loc.gauss_newton_solve(anchors, noisy)
    assert fix.final_residual_norm > 0.0
    assert float(np.linalg.norm(fix.position - truth)) < 0.5


def test_custom_init_and_on_anchor_start():
    rng = Rng(5)
    anchors, truth, ranges = random_scene(rng)
    # starting exactly on an anchor must not divide by zero
    fix = loc.gauss_newton_solve(anchors, ranges, init=anchors.anchors[0])
    assert float(np.linalg.norm(fix.position - truth)) < 1e-6


def test_anchor_validation():
    with pytest.raises(loc.LocalizationError):
        loc.AnchorSet(np.zeros((3, 3)))  # too few
    with pytest.raises(loc.LocalizationError):
        loc.AnchorSet(np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0],
                                [0, 1, 0]], dtype=float))  # coincident
    with pytest.raises(loc.LocalizationError):
        loc.AnchorSet(np.zeros((4, 2)))


def test_coplanar_anchors_warn():
    flat = np.array([[0, 0, 2.0], [6, 0, 2.0], [0, 6, 2.0], [6, 6, 2.0]])
    with pytest.warns(UserWarning, match="coplanar"):
        loc.AnchorSet(flat)


def test_solver_input_validation():
    anchors = loc.AnchorSet(np.array([[0, 0, 0], [6, 0, 0.5], [0, 6, 1.0],
                                      [6, 6, 2.5]], dtype=float))
    with pytest.raises(loc.LocalizationError):
        loc.gauss_newton_solve(anchors, np.ones(3))
    with pytest.raises(loc.LocalizationError):
        loc.gauss_newton_solve(anchors, np.array([1.0, 1.0, -1.0, 1.0]))
    with pytest.raises(loc.LocalizationError):
        loc.gauss_newton_solve(anchors, np.ones(4), init=np.zeros(2))


# ---------------------------------------------------------------------------
# ranging experiments

def _biased_epochs(rng, anchors, n, bias=0.4):
    """Ranges inflated by `bias`; each epoch's CIR rows encode the bias."""
    epochs = []
    for _ in range(n):
        w = rng.uniforms(anchors.anchors.shape[0], 0.05, 1.0)
        w /= w.sum()
        truth = w @ anchors.anchors
        ranges = np.linalg.norm(anchors.anchors - truth, axis=1) + bias
        cirs = np.full((anchors.anchors.shape[0], 4), bias)
        epochs.append(loc.Epoch(truth=truth, ranges=ranges, cirs=cirs))
    return epochs


def test_mitigation_reduces_position_error():
    rng = Rng(6)
    anchors, _, _ = random_scene(rng)
    epochs = _biased_epochs(rng, anchors, 30)
    raw_mae, fixed_mae = loc.position_experiment(
        anchors, epochs, mitigator=lambda cirs: cirs[:, 0])
    assert raw_mae > 0.05
    assert fixed_mae < 0.1 * raw_mae


def test_experiment_without_mitigator_returns_equal_maes():
    rng = Rng(7)
    anchors, _, _ = random_scene(rng)
    epochs = _biased_epochs(rng, anchors, 5)
    raw_mae, fixed_mae = loc.position_experiment(anchors, epochs)
    assert raw_mae == fixed_mae
    clean = _biased_epochs(rng, anchors, 5, bias=0.0)
    raw_mae, _ = loc.position_experiment(anchors, clean)
    assert raw_mae < 1e-6
    with pytest.raises(loc.LocalizationError):
        loc.position_experiment(anchors, [])


def test_mitigation_handles_partial_nlos_bias():
    # only two of four anchors see the obstruction
    rng = Rng(9)
    anchors, _, _ = random_scene(rng)
    bias = np.array([0.3, 0.3, 0.0, 0.0])
    epochs = []
    for _ in range(20):
        w = rng.uniforms(4, 0.05, 1.0)
        w /= w.sum()
        truth = w @ anchors.anchors
        ranges = np.linalg.norm(anchors.anchors - truth, axis=1) + bias
        cirs = np.tile(bias[:, None], (1, 4))
        epochs.append(loc.Epoch(truth=truth, ranges=ranges, cirs=cirs))
    raw_mae, fixed_mae = loc.position_experiment(
        anchors, epochs, mitigator=lambda cirs: cirs[:, 0])
    assert fixed_mae < raw_mae


def test_experiment_requires_cirs_for_mitigator():
    rng = Rng(8)
    anchors, truth, ranges = random_scene(rng)
    epochs = [loc.Epoch(truth=truth, ranges=ranges)]
    with pytest.raises(loc.LocalizationError):
        loc.position_experiment(anchors, epochs, mitigator=lambda c: c[:, 0])


# ---------------------------------------------------------------------------
# scenario files

def test_scenario_round_trip(tmp_path):
    rng = Rng(9)
    anchors, truth, ranges = random_scene(rng, n_anchors=5)
    epochs = [loc.Epoch(truth=truth, ranges=ranges),
              loc.Epoch(truth=truth + 0.1, ranges=ranges + 0.05)]
    path = tmp_path / "scene.csv"
    loc.save_scenario(path, anchors, epochs)
    a2, e2 = loc.load_scenario(path)
    np.testing.assert_allclose(a2.anchors, anchors.anchors, rtol=1e-8)
    assert len(e2) == 2
    np.testing.assert_allclose(e2[1].truth, truth + 0.1, rtol=1e-8)
    np.testing.assert_allclose(e2[1].ranges, ranges + 0.05, rtol=1e-8)


def test_scenario_rejects_malformed(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("nope,a,b\n")
    with pytest.raises(loc.LocalizationError):
        loc.load_scenario(path)
    path.write_text("record,x,y,z,r_0\nwat,1,2,3,4\n")
    with pytest.raises(loc.LocalizationError):
        loc.load_scenario(path)
