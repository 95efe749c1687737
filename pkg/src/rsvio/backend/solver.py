"""Sliding-window optimizer: photometric + inertial + twist-coupling energy.

The normal equations are assembled over all frame variables (pose, twist,
velocity, bias, affine per keyframe, plus scale/gravity) with inverse depths
kept as diagonal blocks and eliminated by a Schur complement. Damped
Gauss-Newton steps are accepted only when the total energy decreases; with
zero damping a step is an exact Gauss-Newton step. Marginalization pushes
the factors of a departing keyframe (and its hosted points) into dense
priors with frozen linearization points; a secondary prior fed only by
inertial and twist factors stands by for scale re-linearization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..imu import imu_residual_jacobians, imu_residuals, information_matrix
from ..photometric import huber_weights, pair_residuals
from ..state import metric_state
from ..twist_prior import twist_residual, twist_residual_jacobians
from .priors import AFFINE, BIAS, POSE, TWIST, VEL, local_delta
from .window import Layout, Window, apply_step, restore, snapshot

log = logging.getLogger(__name__)


class SolverAbort(RuntimeError):
    """Reduced system stayed indefinite / damping exhausted."""


@dataclass
class System:
    H_ff: np.ndarray
    b_f: np.ndarray
    H_pp: np.ndarray
    H_fp: np.ndarray
    b_p: np.ndarray
    energy: float = 0.0
    energies: dict = field(default_factory=dict)


def _empty_system(layout: Layout) -> System:
    F, P = layout.frame_dim, layout.n_points
    return System(np.zeros((F, F)), np.zeros(F), np.zeros(P),
                  np.zeros((F, P)), np.zeros(P))


def _pair_cols(layout: Layout, host_id: int, target_id: int) -> np.ndarray:
    cols = []
    for kf_id in (host_id, target_id):
        off = layout.offsets[("kf", kf_id)]
        cols.extend(range(off + POSE.start, off + POSE.stop))
        cols.extend(range(off + TWIST.start, off + TWIST.stop))
        cols.extend(range(off + AFFINE.start, off + AFFINE.stop))
    return np.array(cols, dtype=int)


def accumulate_photometric(window: Window, layout: Layout, sys: System,
                           with_jacobians: bool, host_filter=None,
                           fej_shift=None, raw_collect=None):
    """Photometric factors of every (host, target) keyframe pair."""
    cfg = window.config
    settings = window.photo_settings()
    rs = window.rs_enabled
    total = 0.0
    for host in window.keyframes:
        if host.points is None or len(host.points) == 0:
            continue
        h_id = host.state.kf_id
        if host_filter is not None and h_id != host_filter:
            continue
        act = np.nonzero(host.points.active_mask)[0]
        if len(act) == 0:
            continue
        for target in window.keyframes:
            t_id = target.state.kf_id
            if t_id == h_id:
                continue
            obs = pair_residuals(host.points, host.state, target.state,
                                 window.cam, target.image, settings, rs,
                                 with_jacobians=with_jacobians,
                                 affine_enabled=cfg.affine_enabled)
            r = obs.residual[act]
            valid = obs.valid[act]
            # outlier gating: an observation whose pattern median residual
            # explodes is excluded from this linearization
            med = np.median(np.abs(np.where(valid, r, 0.0)), axis=1)
            good_obs = med <= cfg.outlier_intensity
            valid = valid & good_obs[:, None]
            e_huber, w_huber = huber_weights(r, cfg.huber_intensity)
            w = obs.weight[act] * w_huber * valid
            total += float((obs.weight[act] * e_huber * valid).sum())
            if not with_jacobians:
                continue

            J = np.concatenate([
                obs.J_pose_h[act], obs.J_twist_h[act], obs.J_affine[act][..., 0:2],
                obs.J_pose_j[act], obs.J_twist_j[act], obs.J_affine[act][..., 2:4],
            ], axis=-1)                                     # (n, 8, 28)
            Jd = obs.J_d[act]                               # (n, 8)
            cols = _pair_cols(layout, h_id, t_id)

            r_eff = r
            if fej_shift is not None:
                shift = np.concatenate([fej_shift(("kf", h_id))[[*range(0, 6), *range(6, 12), 21, 22]],
                                        fej_shift(("kf", t_id))[[*range(0, 6), *range(6, 12), 21, 22]]])
                r_eff = r - J @ shift
            if raw_collect is not None:
                raw_collect.append((cols, layout.point_cols(h_id, act),
                                    J, Jd, w, r_eff))
                continue

            wJ = w[..., None] * J
            sys.H_ff[np.ix_(cols, cols)] += np.einsum("nka,nkb->ab", wJ, J)
            sys.b_f[cols] += np.einsum("nka,nk->a", wJ, r_eff)
            pc = layout.point_cols(h_id, act)
            np.add.at(sys.H_pp, pc, np.einsum("nk,nk->n", w * Jd, Jd))
            np.add.at(sys.b_p, pc, np.einsum("nk,nk->n", w * Jd, r_eff))
            contrib = np.einsum("nka,nk->na", wJ, Jd)       # (n, 28)
            for i, col in enumerate(pc):
                sys.H_fp[cols, col] += contrib[i]
    sys.energies["photometric"] = sys.energies.get("photometric", 0.0) + total
    sys.energy += total
    return total


IMU_BLOCKS = (("pose_i", "i", POSE), ("v_i", "i", VEL), ("b_i", "i", BIAS),
              ("pose_j", "j", POSE), ("v_j", "j", VEL), ("b_j", "j", BIAS))


def accumulate_imu(window: Window, layout: Layout, sys: System,
                   with_jacobians: bool, touching=None, fej_shift=None):
    """Preintegrated inertial factors over consecutive keyframe pairs."""
    cfg = window.config
    if cfg.alpha == 0.0:
        sys.energies.setdefault("imu", 0.0)
        return 0.0
    total = 0.0
    states = {kf.state.kf_id: kf.state for kf in window.keyframes}
    for fac in window.pair_factors():
        if touching is not None and touching not in (fac.id_i, fac.id_j):
            continue
        kf_i, kf_j = states[fac.id_i], states[fac.id_j]
        s_i = metric_state(kf_i, window.sg, window.calib)
        s_j = metric_state(kf_j, window.sg, window.calib)
        r = imu_residuals(s_i, s_j, fac.preint, window.calib.g, check_bias=False)
        W = cfg.alpha * information_matrix(fac.preint)
        if not with_jacobians:
            total += float(r @ (W @ r))
            continue
        A_i = window.sg.R @ kf_i.T_CfWf.R.T
        A_j = window.sg.R @ kf_j.T_CfWf.R.T
        J = imu_residual_jacobians(s_i, s_j, fac.preint, window.calib.g,
                                   window.calib, window.sg.s, A_i, A_j,
                                   kf_i.T_CfWf.t, kf_j.T_CfWf.t,
                                   check_bias=False)
        cols_of = {}
        for name, which, sl in IMU_BLOCKS:
            kf_id = fac.id_i if which == "i" else fac.id_j
            off = layout.offsets[("kf", kf_id)]
            cols_of[name] = np.arange(off + sl.start, off + sl.stop)
        cols_of["sg"] = np.arange(layout.sg_slice().start, layout.sg_slice().stop)

        r_eff = r
        if fej_shift is not None:
            shift_r = np.zeros_like(r)
            for name, cols in cols_of.items():
                if name == "sg":
                    shift_r += J["sg"] @ fej_shift(("sg",))
                else:
                    which = name.split("_")[1]
                    kf_id = fac.id_i if which == "i" else fac.id_j
                    sl = dict((n, s) for n, _, s in IMU_BLOCKS)[name]
                    shift_r += J[name] @ fej_shift(("kf", kf_id))[sl]
            r_eff = r - shift_r
        total += float(r_eff @ (W @ r_eff)) if fej_shift is not None else float(r @ (W @ r))

        names = list(cols_of)
        for na in names:
            Wa = W @ J[na]
            sys.b_f[cols_of[na]] += J[na].T @ (W @ r_eff)
            for nb in names:
                sys.H_ff[np.ix_(cols_of[na], cols_of[nb])] += J[na].T @ (W @ J[nb])
            _ = Wa
    sys.energies["imu"] = sys.energies.get("imu", 0.0) + total
    sys.energy += total
    return total


def twist_row_weight(window: Window) -> np.ndarray:
    """Diagonal weight of the twist deviation in row units."""
    cfg = window.config
    td = window.cam.row_time_td
    w = np.array([cfg.twist_weight_translation] * 3
                 + [cfg.twist_weight_rotation] * 3)
    return w / (td * td)


TWIST_BLOCKS = (("xi", TWIST), ("v", VEL), ("b", BIAS), ("pose", POSE))


def accumulate_twist(window: Window, layout: Layout, sys: System,
                     with_jacobians: bool, touching=None, fej_shift=None):
    """Coupling between each keyframe twist and its IMU-derived prior."""
    cfg = window.config
    if cfg.beta == 0.0 or not window.twists_active:
        sys.energies.setdefault("twist", 0.0)
        return 0.0
    weight = cfg.beta * twist_row_weight(window)
    total = 0.0
    for kf in window.keyframes:
        kf_id = kf.state.kf_id
        if touching is not None and kf_id != touching:
            continue
        r = twist_residual(kf.state, window.sg, window.calib, kf.gyro)
        if not with_jacobians:
            total += float(r @ (weight * r))
            continue
        J = twist_residual_jacobians(kf.state, window.sg, window.calib, kf.gyro)
        off = layout.offsets[("kf", kf_id)]
        cols_of = {name: np.arange(off + sl.start, off + sl.stop)
                   for name, sl in TWIST_BLOCKS}
        cols_of["sg"] = np.arange(layout.sg_slice().start, layout.sg_slice().stop)

        r_eff = r
        if fej_shift is not None:
            shift_r = np.zeros(6)
            skf = fej_shift(("kf", kf_id))
            for name, sl in TWIST_BLOCKS:
                shift_r += J[name] @ skf[sl]
            shift_r += J["sg"] @ fej_shift(("sg",))
            r_eff = r - shift_r
        total += float(r_eff @ (weight * r_eff))

        for na in cols_of:
            sys.b_f[cols_of[na]] += J[na].T @ (weight * r_eff)
            for nb in cols_of:
                sys.H_ff[np.ix_(cols_of[na], cols_of[nb])] += (
                    J[na].T @ (weight[:, None] * J[nb]))
    sys.energies["twist"] = sys.energies.get("twist", 0.0) + total
    sys.energy += total
    return total


def accumulate_prior(window: Window, layout: Layout, sys: System):
    """Active (primary) marginalization prior."""
    prior = window.priors.primary if window.priors else None
    if prior is None or prior.dim == 0:
        sys.energies.setdefault("prior", 0.0)
        return 0.0
    values = window.current_values()
    for key in prior.keys:
        if key not in values:
            raise KeyError(f"prior references unknown variable {key}")
    e, grad, H, _ = prior.evaluate(values)
    idx = np.concatenate([
        np.arange(layout.offsets[key],
                  layout.offsets[key] + (prior.slice_of(key).stop
                                         - prior.slice_of(key).start))
        for key in prior.keys])
    sys.H_ff[np.ix_(idx, idx)] += H
    sys.b_f[idx] += grad
    sys.energies["prior"] = sys.energies.get("prior", 0.0) + e
    sys.energy += e
    return e


def accumulate_affine_prior(window: Window, layout: Layout, sys: System):
    cfg = window.config
    if not cfg.affine_enabled or cfg.affine_prior_weight <= 0:
        return 0.0
    w = cfg.affine_prior_weight
    total = 0.0
    for kf in window.keyframes:
        off = layout.offsets[("kf", kf.state.kf_id)]
        a_idx, b_idx = off + AFFINE.start, off + AFFINE.start + 1
        sys.H_ff[a_idx, a_idx] += w
        sys.H_ff[b_idx, b_idx] += w
        sys.b_f[a_idx] += w * kf.state.a_aff
        sys.b_f[b_idx] += w * kf.state.b_aff
        total += w * (kf.state.a_aff ** 2 + kf.state.b_aff ** 2)
    sys.energies["affine_prior"] = total
    sys.energy += total
    return total


def build_system(window: Window, with_jacobians: bool = True) -> System:
    layout = Layout(window, window.config.affine_enabled)
    sys = _empty_system(layout)
    accumulate_photometric(window, layout, sys, with_jacobians)
    accumulate_imu(window, layout, sys, with_jacobians)
    accumulate_twist(window, layout, sys, with_jacobians)
    accumulate_prior(window, layout, sys)
    accumulate_affine_prior(window, layout, sys)
    return sys


def evaluate_energy(window: Window) -> float:
    return build_system(window, with_jacobians=False).energy


def photometric_energy(window: Window):
    """(energy, gradient, Hessian blocks) of the photometric term alone."""
    layout = Layout(window, window.config.affine_enabled)
    sys = _empty_system(layout)
    accumulate_photometric(window, layout, sys, True)
    return sys.energy, sys.b_f, {"H_ff": sys.H_ff, "H_fp": sys.H_fp,
                                 "H_pp": sys.H_pp, "b_p": sys.b_p}


def imu_energy(window: Window):
    """(energy, gradient, Hessian blocks) of the inertial term alone."""
    layout = Layout(window, window.config.affine_enabled)
    sys = _empty_system(layout)
    accumulate_imu(window, layout, sys, True)
    return sys.energy, sys.b_f, {"H_ff": sys.H_ff}


def twist_energy(window: Window):
    """(energy, gradient, Hessian blocks) of the twist coupling alone."""
    layout = Layout(window, window.config.affine_enabled)
    sys = _empty_system(layout)
    accumulate_twist(window, layout, sys, True)
    return sys.energy, sys.b_f, {"H_ff": sys.H_ff}


def solve_step(sys: System, layout: Layout, lam: float):
    """One damped step; returns (dx_frame, dx_points) or None if indefinite."""
    m = layout.free
    H = sys.H_ff + np.diag(lam * (np.diag(sys.H_ff) + 1e-10))
    Hpp = sys.H_pp * (1.0 + lam) + lam * 1e-10
    inv_pp = np.where(Hpp > 1e-12, 1.0 / np.maximum(Hpp, 1e-12), 0.0)
    Hfp = sys.H_fp
    H_red = H[np.ix_(m, m)] - (Hfp[m] * inv_pp) @ Hfp[m].T
    b_red = sys.b_f[m] - Hfp[m] @ (inv_pp * sys.b_p)
    try:
        L = np.linalg.cholesky(H_red)
    except np.linalg.LinAlgError:
        return None
    y = np.linalg.solve(L, -b_red)
    dx_free = np.linalg.solve(L.T, y)
    dx = np.zeros(layout.frame_dim)
    dx[m] = dx_free
    dx_p = -inv_pp * (sys.b_p + Hfp.T @ dx)
    return dx, dx_p


@dataclass
class OptReport:
    iterations: int = 0
    accepted: int = 0
    energies: list = field(default_factory=list)
    status: str = "converged"
    final_energy: float = 0.0
    gradient_norm: float = 0.0


def optimize_window(window: Window) -> OptReport:
    """Damped Gauss-Newton until the gradient stalls or iterations run out.

    Total energy never increases over accepted steps. Raises SolverAbort when
    the reduced system stays indefinite at maximum damping.
    """
    cfg = window.config
    window.reintegrate_if_needed()
    layout = Layout(window, cfg.affine_enabled)
    report = OptReport()
    sys = build_system(window, with_jacobians=True)
    E_cur = sys.energy
    report.energies.append(E_cur)
    lam = cfg.lm_lambda_init

    for _ in range(cfg.gn_max_iterations):
        g = np.linalg.norm(sys.b_f[layout.free]) + np.linalg.norm(sys.b_p)
        report.gradient_norm = g
        if g < cfg.gradient_tol:
            report.status = "converged"
            break
        step = solve_step(sys, layout, lam)
        while step is None:
            lam = max(lam * cfg.lm_lambda_up, 1e-6)
            if lam > cfg.lm_lambda_max:
                report.status = "indefinite"
                raise SolverAbort(
                    "reduced system indefinite at maximum damping "
                    f"(lambda={lam:.1e})")
            step = solve_step(sys, layout, lam)
        dx, dx_p = step
        report.iterations += 1
        snap = snapshot(window)
        apply_step(window, layout, dx, dx_p)
        E_new = evaluate_energy(window)
        if np.isfinite(E_new) and E_new <= E_cur * (1 + 1e-12) + 1e-12:
            report.accepted += 1
            E_cur = E_new
            report.energies.append(E_cur)
            lam *= cfg.lm_lambda_down
            window.reintegrate_if_needed()
            sys = build_system(window, with_jacobians=True)
            if (np.linalg.norm(dx) + np.linalg.norm(dx_p)) < cfg.step_tol:
                report.status = "converged"
                break
        else:
            restore(window, snap)
            lam = max(lam * cfg.lm_lambda_up, 1e-6)
            if lam > cfg.lm_lambda_max:
                report.status = "stalled"
                break
    report.final_energy = E_cur
    return report


# ---------------------------------------------------------------------------
# marginalization


def _touched_keys(prior_like_H, layout: Layout, keys):
    touched = []
    for key in keys:
        off = layout.offsets[key]
        dim = 23 if key[0] == "kf" else 4
        sl = slice(off, off + dim)
        if (np.abs(prior_like_H[0][sl]).max() > 0
                or np.abs(prior_like_H[1][sl]).max() > 0):
            touched.append(key)
    return touched


def _marginal_quadratic(window: Window, kf_id: int, include_photo: bool,
                        prior):
    """Quadratic (H, b, e0) of the factors touching ``kf_id``, linearized at
    the current state and re-expressed around the prior's linearization
    points, with the keyframe's hosted points Schur-eliminated."""
    layout = Layout(window, window.config.affine_enabled)
    sys = _empty_system(layout)
    values = window.current_values()

    def fej_shift(key):
        if prior.has(key):
            return local_delta(key, values[key], prior.lin[key])
        return np.zeros(23 if key[0] == "kf" else 4)

    e0 = 0.0
    if include_photo:
        raw = []
        accumulate_photometric(window, layout, sys, True, host_filter=kf_id,
                               fej_shift=fej_shift, raw_collect=raw)
        point_cols = sorted({int(c) for item in raw for c in item[1]})
        col_map = {c: i for i, c in enumerate(point_cols)}
        P = len(point_cols)
        Hpp = np.zeros(P)
        Hfp = np.zeros((layout.frame_dim, P))
        bp = np.zeros(P)
        for cols, pc, J, Jd, w, r in raw:
            wJ = w[..., None] * J
            sys.H_ff[np.ix_(cols, cols)] += np.einsum("nka,nkb->ab", wJ, J)
            sys.b_f[cols] += np.einsum("nka,nk->a", wJ, r)
            e0 += float((w * r * r).sum())
            local = np.array([col_map[int(c)] for c in pc])
            np.add.at(Hpp, local, np.einsum("nk,nk->n", w * Jd, Jd))
            np.add.at(bp, local, np.einsum("nk,nk->n", w * Jd, r))
            contrib = np.einsum("nka,nk->na", wJ, Jd)
            for i, col in enumerate(local):
                Hfp[cols, col] += contrib[i]
        # eliminate point columns (their complete factor set is right here)
        inv = np.where(Hpp > 1e-12, 1.0 / np.maximum(Hpp, 1e-12), 0.0)
        sys.H_ff -= (Hfp * inv) @ Hfp.T
        sys.b_f -= Hfp @ (inv * bp)
        e0 -= float(bp @ (inv * bp))

    e0 += accumulate_imu(window, layout, sys, True, touching=kf_id,
                         fej_shift=fej_shift)
    e0 += accumulate_twist(window, layout, sys, True, touching=kf_id,
                           fej_shift=fej_shift)
    return layout, sys.H_ff, sys.b_f, e0


def marginalize_keyframe(window: Window, kf_id: int):
    """Absorb a keyframe (and its hosted points) into both priors."""
    values = window.current_values()
    for prior, include_photo in ((window.priors.primary, True),
                                 (window.priors.secondary, False)):
        layout, H, b, e0 = _marginal_quadratic(window, kf_id, include_photo,
                                               prior)
        keys = [("kf", i) for i in layout.kf_ids] + [("sg",)]
        touched = _touched_keys((H, b), layout, keys)
        if ("kf", kf_id) not in touched:
            touched.append(("kf", kf_id))
        if touched:
            blocks = {}
            for key in touched:
                off = layout.offsets[key]
                blocks[key] = slice(off, off + (23 if key[0] == "kf" else 4))
            prior.add_quadratic(blocks, H, b, e0, values)
        if prior.has(("kf", kf_id)):
            prior.marginalize_keys([("kf", kf_id)])
    window.remove_keyframe(kf_id)


def maybe_switch_prior(window: Window) -> bool:
    """Swap in the secondary prior when scale left the linearization range."""
    cfg = window.config
    if window.priors is None:
        return False
    if not window.priors.should_switch(window.sg.s, cfg.scale_switch_threshold):
        return False
    anchor = window.keyframes[0].state
    window.priors.switch(anchor, window.sg, cfg.gauge_pose_weight,
                         cfg.gauge_scale_weight, cfg.gauge_gravity_weight)
    log.info("marginalization prior switched (scale %.4f left linearization "
             "range)", window.sg.s)
    return True


def select_marginalization_victim(window: Window) -> int | None:
    """Drop policy: visibility first, then age, then a distance score."""
    cfg = window.config
    if len(window.keyframes) <= cfg.max_keyframes:
        return None
    newest = window.keyframes[-1]
    candidates = window.keyframes[:-2]
    settings = window.photo_settings()
    # keyframes whose points barely reach the newest frame
    for kf in candidates:
        if kf.points is None or len(kf.points) == 0:
            continue
        obs = pair_residuals(kf.points, kf.state, newest.state, window.cam,
                             newest.image, settings, window.rs_enabled)
        frac = obs.valid.any(axis=1).mean()
        if frac < 0.05:
            return kf.state.kf_id
    oldest = window.keyframes[0]
    if newest.state.timestamp - oldest.state.timestamp > cfg.max_kf_age_s:
        return oldest.state.kf_id
    centers = {kf.state.kf_id: kf.state.T_CfWf.inverse().t
               for kf in window.keyframes}
    newest_c = centers[newest.state.kf_id]
    best, best_score = None, -np.inf
    for kf in candidates:
        c = centers[kf.state.kf_id]
        dist_latest = np.linalg.norm(c - newest_c)
        inv_sum = sum(1.0 / (np.linalg.norm(c - centers[o.state.kf_id]) + 1e-5)
                      for o in window.keyframes
                      if o.state.kf_id != kf.state.kf_id)
        score = np.sqrt(dist_latest) * inv_sum
        if score > best_score:
            best, best_score = kf.state.kf_id, score
    return best
