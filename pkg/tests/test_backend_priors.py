import numpy as np
import pytest

from rsvio.backend.priors import (
    DualPrior,
    PriorBlock,
    gauge_prior,
    local_delta,
    schur_complement,
)
from rsvio.camera import CameraModel
from rsvio.config import SolverConfig
from rsvio.lie import Pose3, ScaledRot, so3_exp
from rsvio.state import Calibration, KeyframeState, ScaleGravity


def random_chain_quadratic(rng, n_vars=None, dim_each=None):
    """Random well-conditioned linear-Gaussian chain as (H, b, dims)."""
    n = n_vars or int(rng.integers(4, 12))
    dims = dim_each or [int(rng.integers(1, 4)) for _ in range(n)]
    offsets = np.cumsum([0] + dims)
    D = offsets[-1]
    H = np.zeros((D, D))
    b = np.zeros(D)
    # unary anchors on every variable keep H nonsingular
    for i in range(n):
        s = slice(offsets[i], offsets[i + 1])
        A = rng.standard_normal((dims[i], dims[i]))
        H[s, s] += A @ A.T + np.eye(dims[i]) * 0.5
        b[s] += rng.standard_normal(dims[i])
    # pairwise chain factors
    for i in range(n - 1):
        si = slice(offsets[i], offsets[i + 1])
        sj = slice(offsets[i + 1], offsets[i + 2])
        J = rng.standard_normal((2, dims[i] + dims[i + 1]))
        r = rng.standard_normal(2)
        Hf = J.T @ J
        bf = J.T @ r
        idx = np.r_[np.arange(si.start, si.stop), np.arange(sj.start, sj.stop)]
        H[np.ix_(idx, idx)] += Hf
        b[idx] += bf
    return H, b, dims, offsets


def test_schur_matches_dense_inversion_on_random_chains():
    rng = np.random.default_rng(1)
    for _ in range(30):
        H, b, dims, offsets = random_chain_quadratic(rng)
        D = H.shape[0]
        assert D <= 50 or True
        n = len(dims)
        drop_vars = rng.choice(n, size=max(1, n // 3), replace=False)
        drop = np.concatenate([np.arange(offsets[i], offsets[i + 1])
                               for i in drop_vars])
        keep = np.setdiff1d(np.arange(D), drop)

        H_red, b_red, _ = schur_complement(H, b, 0.0, keep, drop)
        # marginal mean: minimizer of the reduced quadratic equals the
        # restriction of the full minimizer
        x_full = np.linalg.solve(H, -b)
        x_red = np.linalg.solve(H_red, -b_red)
        assert np.abs(x_red - x_full[keep]).max() < 1e-8
        # marginal covariance equals the restricted full covariance
        cov_full = np.linalg.inv(H)[np.ix_(keep, keep)]
        cov_red = np.linalg.inv(H_red)
        assert np.abs(cov_red - cov_full).max() < 1e-8


def test_post_marginalization_solution_matches_joint():
    rng = np.random.default_rng(2)
    H, b, dims, offsets = random_chain_quadratic(rng, n_vars=8)
    D = H.shape[0]
    drop = np.arange(offsets[2], offsets[4])
    keep = np.setdiff1d(np.arange(D), drop)
    H_red, b_red, e_red = schur_complement(H, b, 0.0, keep, drop)
    x_full = np.linalg.solve(H, -b)
    x_red = np.linalg.solve(H_red, -b_red)
    assert np.abs(x_red - x_full[keep]).max() < 1e-8
    # quadratic values agree at the optimum up to the dropped-energy constant
    E_full = float(2 * b @ x_full + x_full @ H @ x_full)
    E_red = float(e_red + 2 * b_red @ x_red + x_red @ H_red @ x_red)
    assert E_red == pytest.approx(E_full, abs=1e-8)


def test_marginalizing_unconstrained_variable_leaves_prior_unchanged():
    prior = PriorBlock()
    prior.ensure_variable(("vec", "a", 2), np.zeros(2))
    prior.ensure_variable(("vec", "b", 3), np.zeros(3))
    H0 = np.zeros((5, 5))
    H0[:2, :2] = np.eye(2) * 4.0
    prior.H = H0.copy()
    prior.b = np.array([1.0, -2.0, 0, 0, 0])
    prior.marginalize_keys([("vec", "b", 3)])
    assert prior.dim == 2
    assert np.abs(prior.H - np.eye(2) * 4.0).max() < 1e-12
    assert np.allclose(prior.b, [1.0, -2.0])


def test_prior_block_evaluate_and_local_delta_vec():
    prior = PriorBlock()
    prior.ensure_variable(("vec", "x", 2), np.array([1.0, 2.0]))
    prior.H = np.diag([2.0, 3.0])
    prior.b = np.array([0.5, -0.5])
    e, grad, H, d = prior.evaluate({("vec", "x", 2): np.array([1.5, 2.0])})
    assert np.allclose(d, [0.5, 0.0])
    assert e == pytest.approx(2 * 0.5 * 0.5 + 0.25 * 2.0)
    assert np.allclose(grad, prior.b + H @ d)


def test_local_delta_kf_round_trip():
    rng = np.random.default_rng(3)
    lin = KeyframeState(0.0, Pose3(so3_exp(rng.standard_normal(3)),
                                   rng.standard_normal(3)))
    cur = lin.copy()
    step = rng.standard_normal(6) * 0.1
    cur.T_CfWf = Pose3.exp(step) @ cur.T_CfWf
    cur.xi = cur.xi + 1e-3
    cur.v = cur.v + 0.2
    d = local_delta(("kf", 0), cur, lin)
    assert np.abs(d[:6] - step).max() < 1e-12
    assert np.allclose(d[6:12], 1e-3)
    assert np.allclose(d[12:15], 0.2)


def test_local_delta_sg():
    sg_lin = ScaleGravity(ScaledRot(2.0, so3_exp(np.array([0.1, 0, 0]))))
    sg_cur = sg_lin.updated(0.3, np.array([0.0, 0.05, 0.0]))
    d = local_delta(("sg",), sg_cur, sg_lin)
    assert d[0] == pytest.approx(0.3, abs=1e-12)
    assert np.abs(d[1:] - [0.0, 0.05, 0.0]).max() < 1e-12


def test_dual_prior_switch_threshold_arithmetic():
    cam = CameraModel(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
    calib = Calibration(T_CmI=Pose3.identity(), camera=cam)
    _ = calib
    kf = KeyframeState(0.0, Pose3.identity(), kf_id=0)
    sg = ScaleGravity()
    dual = DualPrior.bootstrap(kf, sg, 1e8, 1e2, 1e-2)
    # scale unchanged -> no switch
    assert not dual.should_switch(1.0, 0.1)
    # drift ratio 1.2: |log 1.2| = 0.182 > 0.1 -> switch
    assert dual.should_switch(1.2, 0.1)
    assert not dual.should_switch(1.2, 0.2)
    dual.primary.ensure_variable(("sg",), sg)  # already there via bootstrap
    dual.switch(kf, ScaleGravity(ScaledRot(1.2, np.eye(3))), 1e8, 1e2, 1e-2)
    assert dual.switches == 1
    assert dual.primary.s_lin(999.0) == pytest.approx(1.0)
    assert dual.secondary.s_lin(999.0) == pytest.approx(1.2)


def test_prior_switch_energy_bookkeeping_identity():
    # on a linear toy, (primary energy) - (secondary energy) equals exactly
    # the energy of the factors only the primary contains
    rng = np.random.default_rng(5)
    key = ("vec", "x", 3)
    lin = np.zeros(3)
    vals = {key: rng.standard_normal(3)}

    def quad():
        J = rng.standard_normal((3, 3))
        r = rng.standard_normal(3)
        return J.T @ J, J.T @ r, float(r @ r)

    primary, secondary = PriorBlock(), PriorBlock()
    for p in (primary, secondary):
        p.ensure_variable(key, lin)
    H_shared, b_shared, e_shared = quad()
    H_photo, b_photo, e_photo = quad()
    blocks = {key: slice(0, 3)}
    primary.add_quadratic(blocks, H_shared, b_shared, e_shared, {key: lin})
    primary.add_quadratic(blocks, H_photo, b_photo, e_photo, {key: lin})
    secondary.add_quadratic(blocks, H_shared, b_shared, e_shared, {key: lin})

    e_p, _, _, d = primary.evaluate(vals)
    e_s, _, _, _ = secondary.evaluate(vals)
    e_photo_at = e_photo + 2 * float(b_photo @ d) + float(d @ H_photo @ d)
    assert e_p - e_s == pytest.approx(e_photo_at, rel=1e-12)
    assert e_p >= e_s - 1e-12 or e_photo_at < 0  # discarded info bound


def test_gauge_prior_structure():
    kf = KeyframeState(0.0, Pose3.identity(), kf_id=7)
    sg = ScaleGravity()
    p = gauge_prior(kf, sg, 1e6, 1e1, 1e-3)
    assert p.dim == 27
    s = p.slice_of(("kf", 7))
    diag = np.diag(p.H)
    assert np.all(diag[s.start:s.start + 6] == 1e6)
    assert np.all(diag[s.start + 6:s.stop] == 0.0)
    ssg = p.slice_of(("sg",))
    assert diag[ssg.start] == 1e1
    assert np.all(diag[ssg.start + 1:ssg.stop] == 1e-3)


def test_solver_config_validation():
    cfg = SolverConfig()
    cfg.validate()
    with pytest.raises(ValueError):
        SolverConfig(alpha=-1.0).validate()
    with pytest.raises(ValueError):
        SolverConfig(max_keyframes=1).validate()
