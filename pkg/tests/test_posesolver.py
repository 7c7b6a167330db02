import numpy as np
import pytest

from mvmatch import diffcore as dc
from mvmatch import geometry as geo
from mvmatch import posesolver as ps
from mvmatch.errors import DegenerateConfigurationError

from support import INTR, fd_error, perturbed, same_up_to_sign, two_view


def gt_pose(R, t):
    return geo.RelativePose(geo.Pose(R, t))


# -- normalization -----------------------------------------------------------

def test_normalize_two_points():
    pts, T = ps.normalize_points(np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_allclose(T, [[np.sqrt(2), 0, -np.sqrt(2)], [0, np.sqrt(2), 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(pts, [[-np.sqrt(2), 0], [np.sqrt(2), 0]], atol=1e-15)


def test_normalize_mean_distance():
    rng = np.random.default_rng(0)
    pts, T = ps.normalize_points(rng.uniform(0, 640, size=(40, 2)))
    assert abs(np.mean(np.linalg.norm(pts, axis=1)) - np.sqrt(2)) < 1e-12
    assert np.max(np.abs(pts.mean(axis=0))) < 1e-12


def test_normalize_zero_weight_points_have_no_influence():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 640, size=(10, 2))
    w = np.r_[np.ones(7), np.zeros(3)]
    _, T_w = ps.normalize_points(pts, w)
    _, T_in = ps.normalize_points(pts[:7])
    assert np.max(np.abs(T_w - T_in)) < 1e-12


def test_normalize_zero_spread():
    with pytest.raises(DegenerateConfigurationError):
        ps.normalize_points(np.full((5, 2), 3.0))


# -- eight-point -------------------------------------------------------------

def test_eight_point_noise_free_epipolar():
    rng = np.random.default_rng(2)
    for _ in range(10):
        _, _, _, xa, xb = two_view(rng, 20)
        F = ps.weighted_eight_point(ps.WeightedMatches(xa, xb))
        assert abs(np.linalg.norm(F) - 1) < 1e-12
        assert abs(np.linalg.det(F)) < 1e-12
        d = geo.symmetric_epipolar_distance(F, xa, xb)
        assert np.max(d) < 1e-9


def test_eight_point_uniform_weight_scale():
    rng = np.random.default_rng(3)
    _, _, _, xa, xb = two_view(rng, 30, noise=1.0)
    F1 = ps.weighted_eight_point(ps.WeightedMatches(xa, xb, np.ones(30)))
    F7 = ps.weighted_eight_point(ps.WeightedMatches(xa, xb, np.full(30, 0.7)))
    assert same_up_to_sign(F1, F7) < 1e-10


def test_eight_point_zero_weight_outliers():
    rng = np.random.default_rng(4)
    _, _, _, xa, xb = two_view(rng, 30, noise=0.5)
    xb_bad = xb.copy()
    xb_bad[:6] = rng.uniform([0, 0], [640, 480], size=(6, 2))
    w = rng.uniform(0.5, 1.0, size=30)
    w[:6] = 0.0
    F_all = ps.weighted_eight_point(ps.WeightedMatches(xa, xb_bad, w))
    F_in = ps.weighted_eight_point(ps.WeightedMatches(xa[6:], xb[6:], w[6:]))
    assert same_up_to_sign(F_all, F_in) < 1e-10


def test_eight_point_permutation_invariant():
    rng = np.random.default_rng(5)
    _, _, _, xa, xb = two_view(rng, 25, noise=1.0)
    w = rng.uniform(0.2, 1.0, size=25)
    perm = rng.permutation(25)
    F = ps.weighted_eight_point(ps.WeightedMatches(xa, xb, w))
    Fp = ps.weighted_eight_point(ps.WeightedMatches(xa[perm], xb[perm], w[perm]))
    assert same_up_to_sign(F, Fp) < 1e-10


def test_eight_point_needs_eight_positive_weights():
    rng = np.random.default_rng(6)
    _, _, _, xa, xb = two_view(rng, 10)
    with pytest.raises(DegenerateConfigurationError):
        ps.weighted_eight_point(ps.WeightedMatches(xa[:7], xb[:7]))
    w = np.r_[np.ones(7), np.zeros(3)]
    with pytest.raises(DegenerateConfigurationError):
        ps.weighted_eight_point(ps.WeightedMatches(xa, xb, w))


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        ps.WeightedMatches(np.zeros((8, 2)), np.zeros((8, 2)), -np.ones(8))


def test_eight_point_gradients():
    rng = np.random.default_rng(7)
    _, _, _, xa, xb = two_view(rng, 15, noise=1.0)
    w0 = rng.uniform(0.3, 1.0, size=15)
    C = rng.normal(size=(3, 3))

    def via_w(w):
        return dc.tsum(ps.weighted_eight_point(ps.WeightedMatches(xa, xb, w)) * C)

    def via_x(x):
        return dc.tsum(ps.weighted_eight_point(ps.WeightedMatches(x, xb, w0)) * C)

    assert fd_error(via_w, w0) < 1e-3
    assert fd_error(via_x, xa) < 1e-3
    assert dc.gradcheck(via_w, w0) < 1e-3


# -- pose recovery -----------------------------------------------------------

def test_recover_pose_noise_free():
    rng = np.random.default_rng(8)
    for _ in range(20):
        R, t, _, xa, xb = two_view(rng, 20)
        m = ps.WeightedMatches(xa, xb)
        F = ps.weighted_eight_point(m)
        est = ps.recover_pose(F, m, INTR, INTR)
        err = geo.pose_error(est, gt_pose(R, t))
        assert err.rotation_deg < 1e-4 and err.translation_deg < 1e-4
        # all landmarks are in front, so both selection modes agree
        other = ps.recover_pose(F, None, INTR, INTR, "closest_to_gt", gt_pose(R, t))
        assert np.max(np.abs(other.R - est.R)) < 1e-12 and np.max(np.abs(other.t - est.t)) < 1e-12


def test_closest_to_gt_returns_the_candidate():
    rng = np.random.default_rng(9)
    R, t, _, xa, xb = two_view(rng, 20, noise=1.0)
    m = ps.WeightedMatches(xa, xb)
    F = ps.weighted_eight_point(m)
    cands = geo.decompose_essential(geo.essential_from_fundamental(F, INTR, INTR))
    for k, c in enumerate(cands):
        est = ps.recover_pose_t(F, None, INTR, INTR, "closest_to_gt", c)
        assert est.index == k
        assert np.max(np.abs(est.R.data - c.R)) < 1e-9
        assert np.max(np.abs(est.t.data - c.t)) < 1e-12


def test_recover_pose_mode_contract():
    with pytest.raises(ValueError):
        ps.recover_pose(np.eye(3), None, INTR, INTR, "closest_to_gt")


def test_recover_pose_tape_gradient():
    rng = np.random.default_rng(10)
    R, t, _, xa, xb = two_view(rng, 12, noise=1.0)
    w0 = rng.uniform(0.3, 1.0, size=12)
    gt = gt_pose(R, t)

    def loss(w):
        m = ps.WeightedMatches(xa, xb, w)
        est = ps.recover_pose_t(ps.weighted_eight_point(m), m, INTR, INTR, "closest_to_gt", gt)
        return dc.tsum(est.R * R) + dc.tsum(est.t * t)

    assert fd_error(loss, w0) < 1e-3


def test_polar_rotation_matches_svd():
    rng = np.random.default_rng(11)
    M = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    U, _, Vt = np.linalg.svd(M)
    Q = ps.polar_rotation(dc.tensor(M)).data
    assert np.max(np.abs(Q - U @ Vt)) < 1e-12


# -- residuals and Jacobian ----------------------------------------------------

def ba_problem(seed, m=10, noise=0.0):
    rng = np.random.default_rng(seed)
    R, t, pts, xa, xb = two_view(rng, m, noise)
    return R, t, pts, ps.WeightedMatches(xa, xb, rng.uniform(0.5, 1.0, size=m))


def test_residuals_zero_at_ground_truth():
    R, t, pts, m = ba_problem(12)
    r = ps.ba_residuals(geo.se3_log(R, t), pts, m, INTR, INTR)
    assert r.shape == (4 * len(m),)
    assert np.max(np.abs(r)) < 1e-10


def test_residual_order_weighting_and_energy():
    R, t, pts, m = ba_problem(13, noise=1.0)
    w = m.w.copy()
    w[3] = 0.0
    m = ps.WeightedMatches(m.x, m.x_prime, w)
    r = ps.ba_residuals(geo.se3_log(R, t), pts, m, INTR, INTR)
    assert np.all(r[12:16] == 0.0)
    # independent summation of w^2 (|pi(y) - x|^2 + |pi'(Ry + t) - x'|^2)
    energy = 0.0
    for k in range(len(m)):
        ra = geo.project(INTR, pts[k]) - m.x[k]
        rb = geo.project(INTR, R @ pts[k] + t) - m.x_prime[k]
        energy += w[k] ** 2 * (ra @ ra + rb @ rb)
        np.testing.assert_allclose(r[4 * k:4 * k + 2], w[k] * ra, atol=1e-12)
        np.testing.assert_allclose(r[4 * k + 2:4 * k + 4], w[k] * rb, atol=1e-12)
    assert abs(r @ r - energy) < 1e-9 * energy


def test_jacobian_against_finite_differences():
    R, t, pts, m = ba_problem(14, m=6, noise=0.5)
    w = m.w.copy()
    w[2] = 0.0
    m = ps.WeightedMatches(m.x, m.x_prime, w)
    p = geo.se3_log(R, t)
    Y = pts + 0.01
    J = ps.ba_jacobian(p, Y, m, INTR, INTR)
    M = len(m)
    assert J.shape == (4 * M, 6 + 3 * M)
    h = 1e-6
    num = np.zeros_like(J)
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        Rp, tp = geo.se3_exp(d)
        Rm, tm = geo.se3_exp(-d)
        rp = ps.ba_residuals(None, Y, m, INTR, INTR, R=Rp @ R, t=Rp @ t + tp)
        rm = ps.ba_residuals(None, Y, m, INTR, INTR, R=Rm @ R, t=Rm @ t + tm)
        num[:, k] = (rp - rm) / (2 * h)
    for k in range(3 * M):
        d = np.zeros(3 * M)
        d[k] = h
        rp = ps.ba_residuals(p, Y + d.reshape(M, 3), m, INTR, INTR)
        rm = ps.ba_residuals(p, Y - d.reshape(M, 3), m, INTR, INTR)
        num[:, 6 + k] = (rp - rm) / (2 * h)
    nz = np.abs(num) > 1e-3
    assert np.max(np.abs(J[nz] - num[nz]) / np.abs(num[nz])) < 1e-5
    # block structure: first-camera rows have no pose part, rows touch only their own point
    mask = np.zeros_like(J, dtype=bool)
    for k in range(M):
        mask[4 * k + 2:4 * k + 4, :6] = True
        mask[4 * k:4 * k + 4, 6 + 3 * k:9 + 3 * k] = True
    assert np.all(J[~mask] == 0.0)
    assert np.all(J[8:12] == 0.0)


# -- bundle adjustment -------------------------------------------------------

def test_ba_fixed_point_at_ground_truth():
    R, t, pts, m = ba_problem(15, m=20)
    res = ps.bundle_adjust(gt_pose(R, t), m, INTR, INTR, T=10)
    assert len(res.gn.steps) == 10
    assert max(res.gn.steps) < 1e-9
    assert geo.pose_error(res.pose, gt_pose(R, t)).max < 1e-6


def test_ba_defaults():
    assert (ps.T_TRAIN, ps.T_TEST, ps.BETA0) == (5, 10, 0.1)
    assert (ps.BETA_DECREASE, ps.BETA_INCREASE) == (3.5, 1.5)


def test_ba_efficacy_monte_carlo():
    rmse_ok = energy_ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        R, t, _, xa, xb = two_view(rng, 30, noise=1.0)
        res = ps.bundle_adjust(perturbed(rng, R, t), ps.WeightedMatches(xa, xb), INTR, INTR, T=10, beta0=0.1)
        rmse_ok += res.final_rmse <= 0.5 * res.initial_rmse
        energy_ok += res.final_energy <= res.initial_energy
    assert rmse_ok >= 95
    assert energy_ok >= 95


def test_ba_drops_points_behind_camera():
    R, t, pts, m = ba_problem(16, m=12)
    # rays of match 0 meet at -y, behind both cameras
    u = R @ -pts[0] + t
    xb = m.x_prime.copy()
    xb[0] = [INTR.fx * u[0] / u[2] + INTR.cx, INTR.fy * u[1] / u[2] + INTR.cy]
    res = ps.bundle_adjust(gt_pose(R, t), ps.WeightedMatches(m.x, xb), INTR, INTR)
    assert res.dropped == 1
    assert list(res.kept) == list(range(1, 12))
    assert geo.pose_error(res.pose, gt_pose(R, t)).max < 1e-6


def test_ba_zero_weight_matches_excluded():
    R, t, pts, m = ba_problem(17, m=12, noise=1.0)
    w = m.w.copy()
    w[:2] = 0.0
    res = ps.bundle_adjust(gt_pose(R, t), ps.WeightedMatches(m.x, m.x_prime, w), INTR, INTR)
    assert 0 not in res.kept and 1 not in res.kept
    assert res.Y.shape == (len(res.kept), 3)
    assert abs(np.linalg.norm(res.pose.t) - 1) < 1e-12


def test_ba_permutation_invariant():
    rng = np.random.default_rng(18)
    R, t, _, xa, xb = two_view(rng, 20, noise=1.0)
    init = perturbed(rng, R, t)
    w = rng.uniform(0.5, 1, size=20)
    perm = rng.permutation(20)
    a = ps.bundle_adjust(init, ps.WeightedMatches(xa, xb, w), INTR, INTR)
    b = ps.bundle_adjust(init, ps.WeightedMatches(xa[perm], xb[perm], w[perm]), INTR, INTR)
    assert np.max(np.abs(a.pose.R - b.pose.R)) < 1e-10
    assert np.max(np.abs(a.pose.t - b.pose.t)) < 1e-10


def test_unrolled_ba_gradient():
    rng = np.random.default_rng(19)
    R, t, _, xa, xb = two_view(rng, 10, noise=1.0)
    init = perturbed(rng, R, t, 1.0, 3.0)
    w0 = rng.uniform(0.5, 1.0, size=10)
    C = rng.normal(size=(3, 3))
    c = rng.normal(size=3)

    def via_x(x):
        res = ps.bundle_adjust(init, ps.WeightedMatches(xa, x, w0), INTR, INTR, T=5)
        return dc.tsum(res.R * C) + dc.tsum(res.t * c)

    def via_w(w):
        res = ps.bundle_adjust(init, ps.WeightedMatches(xa, xb, w), INTR, INTR, T=5)
        return dc.tsum(res.R * C) + dc.tsum(res.t * c)

    assert fd_error(via_x, xb) < 1e-2
    assert fd_error(via_w, w0) < 1e-2
