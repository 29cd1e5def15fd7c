"""Manifold Gauss-Newton / Levenberg-Marquardt over block-structured problems.

Parameter blocks carry an ambient value (quaternion poses are 7 numbers) and
update on a lower-dimensional manifold (6 for poses: translation added,
attitude boxplus).  Terms supply whitened residuals and manifold-width
Jacobian blocks; the solver accumulates the normal equations H dx = b with
H = sum J^T J and b = -sum J^T r, eliminates inverse-depth blocks by Schur
complement when solving, and can marginalize whole blocks into a linearized
prior term.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .quatmath import pose_boxplus, quat_inv, quat_mul, so3_log

logger = logging.getLogger(__name__)

POSE = "pose"
SPEED_BIAS = "speed-bias"
INV_DEPTH = "inverse-depth"
GLOBAL_POSE = "global-pose"

_DIMS = {
    POSE: (7, 6),
    SPEED_BIAS: (9, 9),
    INV_DEPTH: (1, 1),
    GLOBAL_POSE: (7, 6),
}

INV_DEPTH_FLOOR = 1e-6
LM_LAMBDA_MAX = 1e8


class SolverFailure(RuntimeError):
    """The damped normal equations could not be factorized."""


@dataclass
class ParamBlock:
    bid: object
    kind: str
    value: np.ndarray
    fixed: bool = False

    def __post_init__(self):
        if self.kind not in _DIMS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        self.value = np.atleast_1d(np.asarray(self.value, dtype=float)).copy()
        if self.value.size != self.ambient_dim:
            raise ValueError(f"{self.kind} block expects {self.ambient_dim} values, "
                             f"got {self.value.size}")
        self._rot = None

    @property
    def ambient_dim(self) -> int:
        return _DIMS[self.kind][0]

    @property
    def manifold_dim(self) -> int:
        return _DIMS[self.kind][1]

    def rot3(self) -> np.ndarray:
        """Cached rotation matrix of a pose block (values are written once)."""
        if self._rot is None:
            from .quatmath import quat_to_rot
            self._rot = quat_to_rot(self.value[3:7])
        return self._rot


def block_boxplus(kind: str, value: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Manifold update; pose attitude multiplies on the right, vectors add."""
    if kind in (POSE, GLOBAL_POSE):
        out = value.copy()
        out[0:3] += delta[0:3]
        out[3:7] = pose_boxplus(value[3:7], delta[3:6])
        return out
    if kind == INV_DEPTH:
        return np.maximum(value + delta, INV_DEPTH_FLOOR)
    return value + delta


def block_boxminus(kind: str, value: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Manifold difference such that boxplus(ref, result) ~= value."""
    if kind in (POSE, GLOBAL_POSE):
        return np.concatenate([
            value[0:3] - ref[0:3],
            so3_log(quat_mul(quat_inv(ref[3:7]), value[3:7])),
        ])
    return value - ref


@dataclass
class HessianSystem:
    """Dense normal equations over the free blocks of a problem."""
    H: np.ndarray
    b: np.ndarray
    ids: list
    offsets: dict      # bid -> (start, manifold_dim)
    kinds: dict        # bid -> kind

    @property
    def dim(self) -> int:
        return self.H.shape[0]


def build_normal_equations(terms, blocks: dict) -> HessianSystem:
    """Accumulate whitened J^T J and -J^T r over the free blocks.

    Free blocks never referenced by any term are excluded (with a warning)
    so the damped system stays factorizable.
    """
    referenced = set()
    for term in terms:
        for bid in term.block_ids:
            if bid not in blocks:
                raise KeyError(f"term references unknown block {bid!r}")
            referenced.add(bid)

    ids, offsets, kinds = [], {}, {}
    start = 0
    for bid, blk in blocks.items():
        if blk.fixed:
            continue
        if bid not in referenced:
            logger.warning("block %r is free but unreferenced; excluded from the system", bid)
            continue
        ids.append(bid)
        offsets[bid] = (start, blk.manifold_dim)
        kinds[bid] = blk.kind
        start += blk.manifold_dim

    H = np.zeros((start, start))
    b = np.zeros(start)
    for term in terms:
        r, jacs = term.linearize(blocks)
        if not np.all(np.isfinite(r)):
            raise ValueError(f"non-finite residual from term {term!r}")
        slots = []
        for bid, Jb in zip(term.block_ids, jacs):
            if bid in offsets:
                s, d = offsets[bid]
                slots.append((slice(s, s + d), Jb))
        for sa, Ja in slots:
            b[sa] -= Ja.T @ r
            for sb, Jb in slots:
                H[sa, sb] += Ja.T @ Jb
    H = 0.5 * (H + H.T)
    return HessianSystem(H, b, ids, offsets, kinds)


def _split_landmarks(sys: HessianSystem):
    lm = [bid for bid in sys.ids if sys.kinds[bid] == INV_DEPTH]
    other = [bid for bid in sys.ids if sys.kinds[bid] != INV_DEPTH]
    lm_idx = np.array([sys.offsets[bid][0] for bid in lm], dtype=int)
    other_idx = np.concatenate([
        np.arange(sys.offsets[bid][0], sys.offsets[bid][0] + sys.offsets[bid][1])
        for bid in other]) if other else np.zeros(0, dtype=int)
    return lm_idx, other_idx


def solve_step(sys: HessianSystem, lm_lambda: float = 0.0) -> np.ndarray:
    """Solve (H + lambda diag(H)) dx = b.

    Inverse-depth entries are eliminated first through their (diagonal)
    Schur complement; the result matches the dense solve since the damping
    is applied before elimination.
    """
    if sys.dim == 0:
        return np.zeros(0)
    Hd = sys.H.copy()
    if lm_lambda > 0.0:
        di = np.arange(sys.dim)
        # absolute floor keeps zero-information directions (e.g. parallax-free
        # landmarks) solvable once the damping grows
        floor = 1e-8 * float(np.max(np.abs(Hd[di, di]))) if sys.dim else 0.0
        Hd[di, di] += lm_lambda * np.maximum(np.abs(Hd[di, di]), floor)
    lm_idx, other_idx = _split_landmarks(sys)
    try:
        if lm_idx.size == 0:
            L = np.linalg.cholesky(Hd)
            return _chol_solve(L, sys.b)
        dm = Hd[lm_idx, lm_idx]
        if np.any(dm <= 0.0):
            raise np.linalg.LinAlgError("non-positive landmark information")
        Hpm = Hd[np.ix_(other_idx, lm_idx)]
        Hpp = Hd[np.ix_(other_idx, other_idx)]
        bp = sys.b[other_idx]
        bm = sys.b[lm_idx]
        Hred = Hpp - (Hpm / dm) @ Hpm.T
        bred = bp - Hpm @ (bm / dm)
        L = np.linalg.cholesky(Hred)
        dx_p = _chol_solve(L, bred)
        dx_m = (bm - Hpm.T @ dx_p) / dm
        dx = np.zeros(sys.dim)
        dx[other_idx] = dx_p
        dx[lm_idx] = dx_m
        return dx
    except np.linalg.LinAlgError as exc:
        raise SolverFailure(f"normal equations not positive definite "
                            f"(lambda={lm_lambda:.3g}): {exc}") from exc


def _chol_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def apply_step(blocks: dict, dx: np.ndarray, sys: HessianSystem) -> dict:
    """Return a new block dict with the manifold update applied."""
    out = {}
    for bid, blk in blocks.items():
        if bid in sys.offsets:
            s, d = sys.offsets[bid]
            value = block_boxplus(blk.kind, blk.value, dx[s:s + d])
        else:
            value = blk.value.copy()
        out[bid] = ParamBlock(bid, blk.kind, value, blk.fixed)
    return out


# ---------------------------------------------------------------------------
# Prior term and marginalization
# ---------------------------------------------------------------------------

@dataclass
class PriorTerm:
    """Linearized prior ||r_p + J_p dx||^2 over the retained blocks.

    dx is the manifold difference between the current block values and the
    recorded linearization values; the Jacobian is never re-linearized.
    """
    block_ids: list
    J: np.ndarray
    r: np.ndarray
    lin_values: dict
    kinds: dict
    col_offsets: dict = field(init=False)

    def __post_init__(self):
        start = 0
        self.col_offsets = {}
        for bid in self.block_ids:
            d = _DIMS[self.kinds[bid]][1]
            self.col_offsets[bid] = (start, d)
            start += d
        if start != self.J.shape[1]:
            raise ValueError("prior Jacobian width does not match its blocks")

    def residual(self, blocks: dict) -> np.ndarray:
        dx = np.zeros(self.J.shape[1])
        for bid in self.block_ids:
            s, d = self.col_offsets[bid]
            dx[s:s + d] = block_boxminus(self.kinds[bid], blocks[bid].value,
                                         self.lin_values[bid])
        return self.r + self.J @ dx

    def linearize(self, blocks: dict):
        r = self.residual(blocks)
        jacs = []
        for bid in self.block_ids:
            s, d = self.col_offsets[bid]
            jacs.append(self.J[:, s:s + d])
        return r, jacs

    @property
    def dim(self) -> int:
        return self.J.shape[0]


def marginalize(sys: HessianSystem, marg_ids, blocks: dict,
                eig_floor: float = 1e-10) -> PriorTerm:
    """Schur-complement the given blocks out of the system.

    Produces H_p = H_rr - H_rm H_mm^{-1} H_mr and the matching b_p, then
    factors H_p = J_p^T J_p with rank truncation so the prior enters the
    cost as an ordinary term: r_p is chosen so that -J_p^T r_p = b_p.
    """
    marg_ids = [bid for bid in marg_ids if bid in sys.offsets]
    retained = [bid for bid in sys.ids if bid not in set(marg_ids)]
    if not retained:
        raise ValueError("marginalization must retain at least one block")

    def indices(id_list):
        if not id_list:
            return np.zeros(0, dtype=int)
        return np.concatenate([
            np.arange(sys.offsets[bid][0], sys.offsets[bid][0] + sys.offsets[bid][1])
            for bid in id_list])

    mi = indices(marg_ids)
    ri = indices(retained)
    Hrr = sys.H[np.ix_(ri, ri)]
    br = sys.b[ri]
    if mi.size:
        Hmm = sys.H[np.ix_(mi, mi)]
        Hrm = sys.H[np.ix_(ri, mi)]
        bm = sys.b[mi]
        w, V = np.linalg.eigh(0.5 * (Hmm + Hmm.T))
        floor = max(eig_floor * max(w[-1], 0.0), 1e-300)
        w = np.maximum(w, floor)
        Hmm_inv = (V / w) @ V.T
        Hp = Hrr - Hrm @ Hmm_inv @ Hrm.T
        bp = br - Hrm @ (Hmm_inv @ bm)
    else:
        Hp, bp = Hrr, br
    Hp = 0.5 * (Hp + Hp.T)

    w, V = np.linalg.eigh(Hp)
    keep = w > 1e-10 * max(w[-1], 0.0)
    if not np.any(keep):
        keep = w > 0.0
    sqrt_w = np.sqrt(w[keep])
    Jp = (V[:, keep] * sqrt_w).T
    rp = -(V[:, keep] / sqrt_w).T @ bp

    lin = {bid: blocks[bid].value.copy() for bid in retained}
    kinds = {bid: blocks[bid].kind for bid in retained}
    return PriorTerm(retained, Jp, rp, lin, kinds)


def prior_residual(prior: PriorTerm, blocks: dict):
    """Evaluate the prior at the current block values."""
    return prior.linearize(blocks)


# ---------------------------------------------------------------------------
# Optimization loop
# ---------------------------------------------------------------------------

@dataclass
class OptimizeConfig:
    max_iter: int = 15
    method: str = "lm"          # "lm" or "gn"
    step_tol: float = 1e-8
    cost_rel_tol: float = 1e-10
    lm_lambda0: float = 1e-4
    max_rejects: int = 0        # 0: escalate damping all the way to the cap
    verbose: bool = False


@dataclass
class OptimizeReport:
    costs: list
    iterations: int
    reason: str
    gradient_norm: float
    lm_lambda: float


def total_cost(terms, blocks: dict) -> float:
    c = 0.0
    for term in terms:
        res = getattr(term, "residual", None)
        r = res(blocks) if res is not None else term.linearize(blocks)[0]
        c += float(r @ r)
    return c


def optimize(blocks: dict, terms, config: OptimizeConfig | None = None):
    """Iterate build/solve/apply until convergence; returns (blocks, report)."""
    cfg = config or OptimizeConfig()
    cost = total_cost(terms, blocks)
    costs = [cost]
    lam = cfg.lm_lambda0 if cfg.method == "lm" else 0.0
    reason = "max-iterations"
    sys = build_normal_equations(terms, blocks)
    grad_norm = float(np.max(np.abs(sys.b))) if sys.dim else 0.0
    it = 0
    while it < cfg.max_iter:
        it += 1
        accepted = False
        rejects = 0
        while True:
            try:
                dx = solve_step(sys, lam)
            except SolverFailure:
                if cfg.method == "gn" or lam >= LM_LAMBDA_MAX:
                    raise SolverFailure(
                        f"failed to factorize at iteration {it} (lambda={lam:.3g})")
                lam = max(lam * 10.0, 1e-10)
                continue
            candidate = apply_step(blocks, dx, sys)
            new_cost = total_cost(terms, candidate)
            if cfg.method == "gn" or new_cost <= cost:
                accepted = True
                blocks = candidate
                if cfg.method == "lm":
                    lam = max(lam * 0.1, 1e-12)
                break
            lam *= 10.0
            rejects += 1
            if lam > LM_LAMBDA_MAX or (cfg.max_rejects and rejects >= cfg.max_rejects):
                reason = "lm-stalled"
                break
        if not accepted:
            break
        step_norm = float(np.linalg.norm(dx))
        rel_drop = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        costs.append(cost)
        if cfg.verbose:
            logger.info("iter %d cost %.6e step %.3e lambda %.2e",
                        it, cost, step_norm, lam)
        if step_norm < cfg.step_tol:
            reason = "step-tolerance"
            break
        if 0.0 <= rel_drop < cfg.cost_rel_tol:
            reason = "cost-tolerance"
            break
        sys = build_normal_equations(terms, blocks)
        grad_norm = float(np.max(np.abs(sys.b))) if sys.dim else 0.0
    return blocks, OptimizeReport(costs, it, reason, grad_norm, lam)


def hessian_nullspace_count(sys: HessianSystem, rel_tol: float = 1e-8) -> int:
    """Number of eigenvalues below rel_tol * lambda_max; gauge diagnostics."""
    w = np.linalg.eigvalsh(0.5 * (sys.H + sys.H.T))
    return int(np.sum(w < rel_tol * max(w[-1], 0.0)))


def dump_system(sys: HessianSystem, path: str) -> None:
    """Write H (coordinate triplets) and b in a matrix-market-style text file."""
    with open(path, "w", newline="\n") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        fh.write(f"% block layout: {[(str(bid), sys.offsets[bid]) for bid in sys.ids]}\n")
        nz = [(i, j) for i in range(sys.dim) for j in range(i + 1)
              if sys.H[i, j] != 0.0]
        fh.write(f"{sys.dim} {sys.dim} {len(nz)}\n")
        for i, j in nz:
            fh.write(f"{i + 1} {j + 1} {sys.H[i, j]:.17g}\n")
        fh.write("%%rhs array\n")
        for i in range(sys.dim):
            fh.write(f"{sys.b[i]:.17g}\n")
