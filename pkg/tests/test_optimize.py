import numpy as np
import pytest

from evtraj.assoc import KnnConfig, build_displacement_volume
from evtraj.events import EventSlice
from evtraj.metrics import epe_ae
from evtraj.objective import ObjectiveConfig, total_loss, warp_events
from evtraj.optimize import (
    DivergenceError,
    OptimConfig,
    gradient_check,
    loss_gradient,
    minimize,
    save_trace_csv,
)
from evtraj.trajectory import BEZIER, POLYNOMIAL, Basis, TrajectoryField

from scenes import constant_scene


def small_instance(seed=0, n_events=200, width=16, height=16, basis=Basis(POLYNOMIAL, 2),
                   coeff_scale=1.0):
    rng = np.random.default_rng(seed)
    sl = EventSlice.from_arrays(
        rng.integers(0, width, n_events),
        rng.integers(0, height, n_events),
        rng.uniform(0.0, 1.0, n_events),
        rng.choice([-1, 1], n_events),
        width,
        height,
        t_start=0.0,
        t_end=1.0,
    )
    field = TrajectoryField.zeros(width, height, 4, basis)
    field.coeffs[...] = rng.normal(0.0, coeff_scale, field.coeffs.shape)
    return sl, field


def fd_check_coordinates(sl, field, cfg, t_ref, h, rng, n_coords):
    """Reference check: central differences of total_loss, skipping
    coordinates that move an affected event within 4h of the breakpoint
    lattice. Returns max relative error over the checked coordinates."""
    _, grad = loss_gradient(sl, field, t_ref, cfg)
    volume = build_displacement_volume(field, t_ref, cfg.knn, cfg.n_bins)
    warped = warp_events(sl, volume, time_weighting=cfg.time_weighting)
    frac = warped.positions - np.floor(warped.positions)
    near = np.minimum(frac, 1.0 - frac) < 4.0 * h  # conservative skip, per axis
    knn_flat = volume.knn_indices.reshape(-1, volume.knn_indices.shape[-1])
    risky = [np.zeros(field.n_anchors, dtype=bool), np.zeros(field.n_anchors, dtype=bool)]
    for k in np.flatnonzero(near.any(axis=1)):
        touched = np.unique(knn_flat[warped.vox_idx[k]])
        for axis in (0, 1):
            if near[k, axis]:
                risky[axis][touched] = True

    def loss_of(coeffs):
        f = field.copy()
        f.coeffs = coeffs
        return total_loss(sl, f, t_ref, cfg).total

    shape = field.coeffs.shape
    cols = shape[1]
    max_rel = 0.0
    checked = 0
    for flat in rng.permutation(field.coeffs.size):
        if checked >= n_coords:
            break
        coord = np.unravel_index(flat, shape)
        if risky[coord[3]][coord[0] * cols + coord[1]]:
            continue
        pert = field.coeffs.copy()
        pert[coord] += h
        lp = loss_of(pert)
        pert[coord] -= 2 * h
        lm = loss_of(pert)
        gn = (lp - lm) / (2 * h)
        rel = abs(grad[coord] - gn) / max(abs(grad[coord]), abs(gn), 1e-12)
        max_rel = max(max_rel, rel)
        checked += 1
    assert checked >= n_coords // 2, "too many skipped coordinates"
    return max_rel


class TestLossGradient:
    def test_zero_events_zero_coefficients(self):
        sl = EventSlice.from_arrays([], [], [], [], 16, 16)
        field = TrajectoryField.zeros(16, 16, 4, Basis(POLYNOMIAL, 2))
        out, grad = loss_gradient(sl, field, 0.5, ObjectiveConfig(knn=KnnConfig(k=4), n_bins=5))
        np.testing.assert_array_equal(grad, 0.0)
        assert out.r == 0.0

    def test_matches_finite_differences_bilinear(self):
        sl, field = small_instance(seed=1)
        cfg = ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5, time_weighting=True)
        rng = np.random.default_rng(10)
        max_rel = fd_check_coordinates(sl, field, cfg, t_ref=0.43, h=1e-4, rng=rng, n_coords=40)
        assert max_rel < 1e-4

    def test_matches_finite_differences_gaussian(self):
        sl, field = small_instance(seed=2)
        cfg = ObjectiveConfig(sigma=1.0, knn=KnnConfig(k=8), n_bins=5, time_weighting=True)
        rng = np.random.default_rng(11)
        max_rel = fd_check_coordinates(sl, field, cfg, t_ref=0.43, h=1e-4, rng=rng, n_coords=40)
        assert max_rel < 1e-5

    def test_matches_finite_differences_bezier_basis(self):
        sl, field = small_instance(seed=3, basis=Basis(BEZIER, 4))
        cfg = ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5)
        rng = np.random.default_rng(12)
        max_rel = fd_check_coordinates(sl, field, cfg, t_ref=0.68, h=1e-4, rng=rng, n_coords=40)
        assert max_rel < 1e-4

    def test_lambda_isolation(self):
        # lambda = 0 exercises only the contrast path, a huge lambda makes
        # the smoothness path dominate; both must agree with differences
        sl, field = small_instance(seed=4)
        rng = np.random.default_rng(13)
        for lam in (0.0, 50.0):
            cfg = ObjectiveConfig(lam=lam, knn=KnnConfig(k=8), n_bins=5)
            max_rel = fd_check_coordinates(sl, field, cfg, t_ref=0.31, h=1e-4, rng=rng, n_coords=30)
            assert max_rel < 1e-4, f"lambda={lam}"

    def test_directional_derivative_and_sign_flip(self):
        sl, field = small_instance(seed=5)
        cfg = ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5)
        rng = np.random.default_rng(14)
        direction = rng.normal(0, 1, field.coeffs.shape)
        h = 1e-5
        for flip in (1.0, -1.0):
            base = field.copy()
            base.coeffs = flip * field.coeffs
            _, grad = loss_gradient(sl, base, 0.55, cfg)
            plus, minus = base.copy(), base.copy()
            plus.coeffs = base.coeffs + h * direction
            minus.coeffs = base.coeffs - h * direction
            fd = (
                total_loss(sl, plus, 0.55, cfg).total - total_loss(sl, minus, 0.55, cfg).total
            ) / (2 * h)
            analytic = float((grad * direction).sum())
            assert abs(analytic - fd) / max(abs(analytic), abs(fd)) < 1e-4

    def test_degenerate_guard_gradient(self):
        # every event masked: contrast path dead, smoothness path alive
        sl, field = small_instance(seed=6)
        field.coeffs[..., 0] += 1e5
        cfg = ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5)
        out, grad = loss_gradient(sl, field, 0.45, cfg)
        assert out.degenerate
        assert np.all(np.isfinite(grad))


class TestGradientCheck:
    def test_small_instance_bilinear(self):
        sl, field = small_instance(seed=7, basis=Basis(POLYNOMIAL, 1))
        cfg = ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5)
        report = gradient_check(sl, field, cfg, n_coords=32, h=1e-4, seed=0)
        assert report.max_rel_err < 1e-4
        assert report.n_checked == 32

    def test_small_instance_gaussian(self):
        sl, field = small_instance(seed=8)
        cfg = ObjectiveConfig(sigma=1.0, knn=KnnConfig(k=8), n_bins=5)
        report = gradient_check(sl, field, cfg, n_coords=32, h=1e-4, seed=0)
        assert report.max_rel_err < 1e-5

    def test_invalid_sample_size(self):
        sl, field = small_instance(seed=9)
        with pytest.raises(ValueError):
            gradient_check(sl, field, ObjectiveConfig(knn=KnnConfig(k=8)), n_coords=0)


class TestMinimize:
    def test_zero_iterations_returns_init(self):
        sl, field = small_instance(seed=10)
        ocfg = OptimConfig(iterations=0, objective=ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5))
        trace = minimize(sl, field, ocfg)
        assert len(trace) == 0
        np.testing.assert_array_equal(trace.field.coeffs, field.coeffs)

    def test_seed_determinism_bit_identical(self):
        sl, field = small_instance(seed=11)
        ocfg = OptimConfig(
            iterations=8, lr=0.05, seed=3,
            objective=ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5),
        )
        a = minimize(sl, field, ocfg)
        b = minimize(sl, field, ocfg)
        np.testing.assert_array_equal(a.total, b.total)
        np.testing.assert_array_equal(a.t_ref, b.t_ref)
        np.testing.assert_array_equal(a.field.coeffs, b.field.coeffs)

    def test_nonfinite_aborts_with_iteration(self):
        sl, field = small_instance(seed=12)
        field.coeffs[0, 0, 0, 0] = np.nan
        ocfg = OptimConfig(iterations=3, objective=ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5))
        with pytest.raises(DivergenceError, match="iteration 0"):
            minimize(sl, field, ocfg)

    def test_loss_decreases_on_constant_flow(self):
        sl, gt, spec = constant_scene(width=48, height=48, n_points=120, n_events=8000, seed=21)
        field = TrajectoryField.zeros(48, 48, 4, Basis(POLYNOMIAL, 1))
        ocfg = OptimConfig(
            iterations=120, lr=0.08, seed=0,
            objective=ObjectiveConfig(sigma=1.0, knn=KnnConfig(k=16), n_bins=15),
        )
        trace = minimize(sl, field, ocfg)
        head = np.median(trace.total[:12])
        tail = np.median(trace.total[-12:])
        assert tail < head
        # flow accuracy at t=1 improves drastically over the zero field
        flow = trace.field.coeffs[:, :, 0, :]  # degree-1: alpha is flow at t=1
        v = np.array(spec.motion.v)
        mean_err = np.linalg.norm(flow - v, axis=-1).mean()
        assert mean_err < 1.0

    def test_trace_csv(self, tmp_path):
        sl, field = small_instance(seed=13)
        ocfg = OptimConfig(iterations=4, objective=ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5))
        trace = minimize(sl, field, ocfg)
        path = tmp_path / "trace.csv"
        save_trace_csv(trace, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iter,t_ref,G,R,total"
        assert len(lines) == 5

    def test_fixed_t_ref_mode(self):
        sl, field = small_instance(seed=14)
        ocfg = OptimConfig(
            iterations=5, fixed_t_ref=0.0,
            objective=ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5),
        )
        trace = minimize(sl, field, ocfg)
        np.testing.assert_array_equal(trace.t_ref, 0.0)

    def test_fixed_reference_objective_mode(self):
        sl, field = small_instance(seed=15)
        ocfg = OptimConfig(
            iterations=3, fixed_reference=True,
            objective=ObjectiveConfig(knn=KnnConfig(k=8), n_bins=5),
        )
        trace = minimize(sl, field, ocfg)
        assert len(trace) == 3
        assert np.all(np.isfinite(trace.total))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            OptimConfig(lr=0.0)
        with pytest.raises(ValueError):
            OptimConfig(beta1=1.0)
