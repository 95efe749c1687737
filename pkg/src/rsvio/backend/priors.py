"""Dense Gaussian priors from marginalization, with frozen linearization.

A prior block stores a quadratic energy E(x) = E0 + 2 b^T d + d^T H d in the
local coordinates d = x [-] x_lin of its variables. Linearization points are
frozen when a variable first enters the prior and never move afterwards
(first-estimates behavior); the dual-prior scheme keeps a second version fed
only by inertial and twist factors, to swap in when the scale estimate moves
too far from the primary's linearization point.

Variable keys: ("kf", id) 23-dim [pose(6), twist(6), vel(3), bias(6),
affine(2)], ("sg",) 4-dim [dlog s, dpsi], ("vec", name) plain vectors (used
by tests and gauge priors).
"""

from __future__ import annotations

import logging

import numpy as np

from ..lie import se3_log, so3_log
from ..state import KeyframeState, ScaleGravity

log = logging.getLogger(__name__)

KF_DIM = 23
SG_DIM = 4

POSE = slice(0, 6)
TWIST = slice(6, 12)
VEL = slice(12, 15)
BIAS = slice(15, 21)
AFFINE = slice(21, 23)


def key_dim(key) -> int:
    if key[0] == "kf":
        return KF_DIM
    if key[0] == "sg":
        return SG_DIM
    if key[0] == "vec":
        return int(key[2])
    raise KeyError(f"unknown variable key {key}")


def lin_copy(key, value):
    if key[0] == "kf":
        return value.copy()
    if key[0] == "sg":
        return value.copy()
    return np.asarray(value, dtype=float).copy()


def local_delta(key, value, lin) -> np.ndarray:
    """Local coordinates of ``value`` around ``lin`` (left convention)."""
    if key[0] == "kf":
        d = np.zeros(KF_DIM)
        rel = value.T_CfWf @ lin.T_CfWf.inverse()
        d[POSE] = se3_log(rel.R, rel.t)
        d[TWIST] = value.xi - lin.xi
        d[VEL] = value.v - lin.v
        d[BIAS] = value.b - lin.b
        d[AFFINE] = [value.a_aff - lin.a_aff, value.b_aff - lin.b_aff]
        return d
    if key[0] == "sg":
        return np.concatenate([[np.log(value.s / lin.s)],
                               so3_log(value.R @ lin.R.T)])
    return np.asarray(value, dtype=float) - lin


def schur_complement(H: np.ndarray, b: np.ndarray, e0: float, keep: np.ndarray,
                     drop: np.ndarray):
    """Marginalize the ``drop`` coordinates of a quadratic (H, b, e0).

    Returns (H', b', e0'). A singular dropped block falls back to the
    Moore-Penrose pseudoinverse (flat directions carry no information).
    """
    H_kk = H[np.ix_(keep, keep)]
    H_kd = H[np.ix_(keep, drop)]
    H_dd = H[np.ix_(drop, drop)]
    b_k = b[keep]
    b_d = b[drop]
    if len(drop) == 0:
        return H_kk.copy(), b_k.copy(), e0
    rhs = np.concatenate([H_kd.T, b_d[:, None]], axis=1)
    w = np.linalg.eigvalsh(H_dd)
    if w[0] <= 1e-10 * max(w[-1], 1.0):
        log.warning("singular marginal block (dim %d, min eig %.2e); "
                    "using pseudoinverse", len(drop), w[0])
        X = np.linalg.pinv(H_dd, rcond=1e-12) @ rhs
    else:
        X = np.linalg.solve(H_dd, rhs)
    Xh = X[:, :-1]
    xb = X[:, -1]
    H_new = H_kk - H_kd @ Xh
    b_new = b_k - H_kd @ xb
    e_new = e0 - float(b_d @ xb)
    H_new = 0.5 * (H_new + H_new.T)
    return H_new, b_new, e_new


def project_psd(H: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Clip tiny negative eigenvalues introduced by roundoff."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.maximum(w, floor)
    M = (V * w) @ V.T
    return 0.5 * (M + M.T)


class PriorBlock:
    """Quadratic prior over named variables with frozen linearization."""

    def __init__(self):
        self.keys: list = []
        self.offsets: dict = {}
        self.lin: dict = {}
        self.H = np.zeros((0, 0))
        self.b = np.zeros(0)
        self.e0 = 0.0

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def has(self, key) -> bool:
        return key in self.offsets

    def s_lin(self, current_s: float) -> float:
        """Scale linearization point (current scale if sg never entered)."""
        if ("sg",) in self.lin:
            return self.lin[("sg",)].s
        return current_s

    def ensure_variable(self, key, current_value):
        """Add a variable (frozen at current value) if not yet present."""
        if key in self.offsets:
            return
        d = key_dim(key)
        off = self.dim
        self.keys.append(key)
        self.offsets[key] = off
        self.lin[key] = lin_copy(key, current_value)
        H = np.zeros((off + d, off + d))
        H[:off, :off] = self.H
        b = np.zeros(off + d)
        b[:off] = self.b
        self.H, self.b = H, b

    def slice_of(self, key) -> slice:
        off = self.offsets[key]
        return slice(off, off + key_dim(key))

    def add_quadratic(self, blocks: dict, H: np.ndarray, b: np.ndarray,
                      e0: float, current_values: dict):
        """Accumulate a factor quadratic given in local coords of ``blocks``.

        blocks: key -> column slice of the factor's own ordering. The factor
        must already be expressed around this prior's linearization points.
        """
        for key in blocks:
            self.ensure_variable(key, current_values[key])
        for ka, sa in blocks.items():
            ta = self.slice_of(ka)
            self.b[ta] += b[sa]
            for kb, sb in blocks.items():
                tb = self.slice_of(kb)
                self.H[ta, tb] += H[sa, sb]
        self.H = 0.5 * (self.H + self.H.T)
        self.e0 += e0

    def marginalize_keys(self, drop_keys: list):
        keep_idx, drop_idx = [], []
        for key in self.keys:
            s = self.slice_of(key)
            target = drop_idx if key in drop_keys else keep_idx
            target.extend(range(s.start, s.stop))
        H, b, e0 = schur_complement(self.H, self.b, self.e0,
                                    np.array(keep_idx, dtype=int),
                                    np.array(drop_idx, dtype=int))
        kept = [k for k in self.keys if k not in drop_keys]
        self.keys = []
        self.offsets = {}
        off = 0
        for k in kept:
            self.keys.append(k)
            self.offsets[k] = off
            off += key_dim(k)
        for k in drop_keys:
            self.lin.pop(k, None)
        self.H = project_psd(H)
        self.b = b
        self.e0 = e0

    def evaluate(self, current_values: dict):
        """(energy, gradient, H, deltas) at the current state.

        gradient is the half-gradient in the prior's own coordinate order.
        """
        if self.dim == 0:
            return 0.0, np.zeros(0), self.H, np.zeros(0)
        d = np.zeros(self.dim)
        for key in self.keys:
            d[self.slice_of(key)] = local_delta(key, current_values[key],
                                                self.lin[key])
        grad = self.b + self.H @ d
        energy = self.e0 + 2.0 * float(self.b @ d) + float(d @ (self.H @ d))
        return energy, grad, self.H, d

    def clone(self) -> "PriorBlock":
        out = PriorBlock()
        out.keys = list(self.keys)
        out.offsets = dict(self.offsets)
        out.lin = {k: lin_copy(k, v) for k, v in self.lin.items()}
        out.H = self.H.copy()
        out.b = self.b.copy()
        out.e0 = self.e0
        return out


def gauge_prior(kf: KeyframeState, sg: ScaleGravity, pose_weight: float,
                scale_weight: float, gravity_weight: float) -> PriorBlock:
    """Anchor: strong prior on one keyframe pose, soft priors on scale and
    gravity alignment.

    Fixes the free-world gauge (translation + rotation), the conventional
    visual-scale/metric-scale split, and regularizes the initially
    unobservable yaw of the gravity alignment.
    """
    prior = PriorBlock()
    prior.ensure_variable(("kf", kf.kf_id), kf)
    prior.ensure_variable(("sg",), sg)
    s = prior.slice_of(("kf", kf.kf_id))
    diag = np.zeros(prior.dim)
    diag[s.start:s.start + 6] = pose_weight
    ssg = prior.slice_of(("sg",))
    diag[ssg.start] = scale_weight
    diag[ssg.start + 1:ssg.stop] = gravity_weight
    prior.H = np.diag(diag)
    return prior


class DualPrior:
    """Primary (all factors) + secondary (inertial/twist only) priors."""

    def __init__(self, primary: PriorBlock, secondary: PriorBlock):
        self.primary = primary
        self.secondary = secondary
        self.switches = 0

    @staticmethod
    def bootstrap(kf: KeyframeState, sg: ScaleGravity, pose_weight: float,
                  scale_weight: float, gravity_weight: float) -> "DualPrior":
        return DualPrior(
            gauge_prior(kf, sg, pose_weight, scale_weight, gravity_weight),
            gauge_prior(kf, sg, pose_weight, scale_weight, gravity_weight))

    def should_switch(self, current_s: float, threshold: float) -> bool:
        return abs(np.log(current_s / self.primary.s_lin(current_s))) > threshold

    def switch(self, anchor_kf: KeyframeState, sg: ScaleGravity,
               pose_weight: float, scale_weight: float, gravity_weight: float):
        """Replace the primary with the secondary, start a fresh secondary."""
        self.primary = self.secondary
        self.secondary = gauge_prior(anchor_kf, sg, pose_weight, scale_weight,
                                     gravity_weight)
        self.switches += 1
