"""Composite-membrane optimisation on a grid.

The optimal value ``Lambda(alpha, A)`` is the least ground-state energy of
``M + alpha * chi_D`` over cell subsets ``D`` of measure ``A``.  The solver
alternates two exact minimisations: the eigensolve at fixed ``D`` and the
bathtub rearrangement at fixed ``u`` (the ``A`` cells where ``u`` is
smallest).  Neither step can raise the energy, so the eigenvalue history is
non-increasing.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize as sopt

from .eigen import smallest_eigenpair
from .fracop import FracOperator, assemble
from .grid import Configuration, DomainMask

logger = logging.getLogger(__name__)

CYCLE_WINDOW = 50
DEFAULT_STARTS = ("boundary", "random", "halfplane")


class OptimizationError(ValueError):
    pass


@dataclass
class OptimalPair:
    D: Configuration
    u: np.ndarray
    lam: float
    t: float
    history: list = field(default_factory=list)
    status: str = "converged"
    start: str = ""
    alpha: Optional[float] = None

    @property
    def alpha_exceeds_bar(self) -> Optional[bool]:
        # Lambda - alpha is strictly decreasing and vanishes at alpha_bar
        return None if self.alpha is None else bool(self.lam < self.alpha)


@dataclass
class PhysicalParams:
    h: float
    H: float
    M: float
    Theta: float

    def validate(self, omega_measure: float):
        if not 0 <= self.h < self.H:
            raise OptimizationError(f"need 0 <= h < H, got h={self.h}, H={self.H}")
        lo, hi = self.h * omega_measure, self.H * omega_measure
        if not (lo - 1e-12 * hi <= self.M <= hi * (1 + 1e-12)):
            raise OptimizationError(f"mass M={self.M} outside [{lo}, {hi}]")


def _operator(domain, s, op):
    if op is not None:
        if op.domain is not domain and op.domain.n_cells != domain.n_cells:
            raise OptimizationError("operator was assembled on a different domain")
        return op
    return assemble(domain, s)


def quota_cells(domain: DomainMask, A: float) -> int:
    if A < 0 or A > domain.measure * (1 + 1e-12):
        raise OptimizationError(f"area {A} outside [0, {domain.measure}]")
    return min(int(round(A / domain.grid.cell_volume)), domain.n_cells)


def _select(values: np.ndarray, domain: DomainMask, quota: int) -> np.ndarray:
    # stable sort: ties keep lexicographic cell order
    order = np.argsort(values, kind="stable")
    packed = np.zeros(domain.n_cells, dtype=bool)
    packed[order[:quota]] = True
    mask = np.zeros(domain.grid.shape, dtype=bool)
    mask[domain.inside] = packed
    return mask


def rearrange(u: np.ndarray, domain: DomainMask, A: float) -> Configuration:
    """Bathtub step: the ``A / h^dim`` (rounded) cells of smallest ``u``.

    The returned configuration carries the level ``t = sup{c : |{u < c}| < A}``
    so that ``{u < t}`` is contained in D and D in ``{u <= t}``.
    """
    quota = quota_cells(domain, A)
    vals = np.asarray(u, dtype=float)[domain.inside]
    mask = _select(vals, domain, quota)
    if quota == 0:
        t = float(vals.min())
    else:
        t = float(np.sort(vals, kind="stable")[quota - 1])
    return Configuration(mask, A, t)


def initial_configuration(domain: DomainMask, A: float, kind: str = "boundary", seed: int = 0) -> Configuration:
    """Starting sets: ``boundary`` (band next to the boundary), ``random``
    (seeded) or ``halfplane`` (cells of smallest first coordinate)."""
    quota = quota_cells(domain, A)
    if kind == "boundary":
        key = domain.boundary_distance()[domain.inside]
    elif kind == "random":
        key = np.random.default_rng(seed).permutation(domain.n_cells).astype(float)
    elif kind == "halfplane":
        key = domain.grid.centers()[0][domain.inside]
    elif kind == "empty":
        key = np.zeros(domain.n_cells)
        quota = 0
    else:
        raise OptimizationError(f"unknown initialisation {kind!r}")
    return Configuration(_select(key, domain, quota), A)


def _coerce_init(domain, A, init, seed):
    if init is None:
        return initial_configuration(domain, A, "boundary", seed), "boundary"
    if isinstance(init, str):
        return initial_configuration(domain, A, init, seed), init
    if isinstance(init, (int, np.integer)):
        return initial_configuration(domain, A, "random", int(init)), "random"
    mask = init.mask if isinstance(init, Configuration) else np.asarray(init, dtype=bool)
    if mask.shape != domain.grid.shape or np.any(mask & ~domain.inside):
        raise OptimizationError("initial configuration must be a subset of the domain")
    if np.count_nonzero(mask) != quota_cells(domain, A):
        raise OptimizationError("initial configuration does not meet the area quota")
    return Configuration(mask.copy(), A), "given"


def _alternate(op, alpha, A, D, step, start, max_iter, eig_tol):
    """Shared fixed-point loop; ``step(u)`` returns the next configuration."""
    history = []
    recent = deque(maxlen=CYCLE_WINDOW)
    best = None
    status = "iteration-capped"
    for _ in range(max_iter):
        pair = smallest_eigenpair(op, alpha * D.mask, tol=eig_tol)
        history.append(pair.lam)
        if best is None or pair.lam < best[0].lam:
            best = (pair, D)
        recent.append(D.key())
        nxt = step(pair.u)
        if nxt.key() == D.key():
            status = "converged"
            break
        if nxt.key() in recent:
            status = "cycled"
            break
        D = nxt
    pair, D = best if status != "converged" else (pair, D)
    return pair, D, history, status


def optimize(domain: DomainMask, s: float, alpha: float, A: float, init=None, seed: int = 0,
             op: FracOperator | None = None, max_iter: int = 500, eig_tol: float = 1e-12) -> OptimalPair:
    """Alternating eigensolve / rearrangement from one starting set."""
    if not alpha > 0:
        raise OptimizationError(f"alpha must be positive, got {alpha}")
    op = _operator(domain, s, op)
    D, start = _coerce_init(domain, A, init, seed)
    pair, D, history, status = _alternate(
        op, alpha, A, D, lambda u: rearrange(u, domain, A), start, max_iter, eig_tol
    )
    t = rearrange(pair.u, domain, A).threshold
    return OptimalPair(Configuration(D.mask, A, t), pair.u, pair.lam, t, history, status, start, alpha)


def best_pair(domain: DomainMask, s: float, alpha: float, A: float, op: FracOperator | None = None,
              seed: int = 0, starts: Sequence[str] = DEFAULT_STARTS, **kwargs) -> OptimalPair:
    """Multi-start optimisation; the lowest eigenvalue wins (first on ties)."""
    op = _operator(domain, s, op)
    best = None
    for kind in starts:
        res = optimize(domain, s, alpha, A, init=kind, seed=seed, op=op, **kwargs)
        logger.debug("start %s: lambda=%.15g (%s, %d its)", kind, res.lam, res.status, len(res.history))
        if best is None or res.lam < best.lam:
            best = res
    return best


def lambda_opt(domain: DomainMask, s: float, alpha: float, A: float, op: FracOperator | None = None,
               seed: int = 0, starts: Sequence[str] = DEFAULT_STARTS, **kwargs) -> float:
    return best_pair(domain, s, alpha, A, op=op, seed=seed, starts=starts, **kwargs).lam


def first_eigenvalue(domain: DomainMask, s: float, op: FracOperator | None = None) -> float:
    """``mu_Omega``: ground-state energy without potential."""
    op = _operator(domain, s, op)
    return smallest_eigenpair(op).lam


def alpha_bar(domain: DomainMask, s: float, A: float, op: FracOperator | None = None,
              tol: float = 1e-8, seed: int = 0, starts: Sequence[str] = DEFAULT_STARTS) -> float:
    """The crossing value where ``Lambda(alpha, A) = alpha``.

    ``Lambda - alpha`` is strictly decreasing in alpha, equals ``mu`` at 0 and
    is at most ``mu - (1 - A/|Omega|) alpha``, which fixes the bracket.
    """
    op = _operator(domain, s, op)
    omega = domain.measure
    if A < 0 or A >= omega:
        raise OptimizationError(f"alpha_bar needs 0 <= A < |Omega|, got A={A}")
    mu = first_eigenvalue(domain, s, op)
    if quota_cells(domain, A) == 0:
        return mu
    hi = mu / (1.0 - A / omega) + 1.0

    def gap(alpha):
        if alpha == 0.0:
            return mu
        return lambda_opt(domain, s, alpha, A, op=op, seed=seed, starts=starts) - alpha

    f_lo, f_hi = mu, gap(hi)
    if not (f_lo > 0 > f_hi):
        raise OptimizationError(f"alpha_bar bracket failed: f(0)={f_lo}, f({hi})={f_hi}")
    root = sopt.brentq(gap, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(gap(root)) >= tol * max(1.0, root):
        raise OptimizationError(f"alpha_bar residual {gap(root)} above tolerance at {root}")
    return root


def pn_convert(params: PhysicalParams, omega_measure: float) -> tuple:
    """Physical data (h, H, M, Theta) to (alpha, A, Lambda)."""
    if params.H == params.h:
        raise OptimizationError("H = h gives a degenerate density class")
    params.validate(omega_measure)
    alpha = (params.H - params.h) * params.Theta
    A = (params.H * omega_measure - params.M) / (params.H - params.h)
    Lam = params.H * params.Theta
    return alpha, A, Lam


def pn_inverse(alpha: float, A: float, Lam: float, omega_measure: float, H: float) -> PhysicalParams:
    """Invert :func:`pn_convert` for a given density ceiling ``H``."""
    if not H > 0:
        raise OptimizationError("H must be positive")
    theta = Lam / H
    h = H - alpha / theta
    if abs(h) <= 8 * np.finfo(float).eps * H:
        h = 0.0  # rounding residue of a zero floor
    if not h < H:
        raise OptimizationError("inverse gives h >= H")
    M = H * omega_measure - A * (H - h)
    params = PhysicalParams(h, H, M, theta)
    params.validate(omega_measure)
    return params


def radial_rings(domain: DomainMask) -> tuple:
    """Group inside cells by centre radius.

    Returns ``(labels, radii)`` where ``labels`` is a full-grid int array
    (-1 outside) indexing ``radii`` in increasing order.
    """
    if domain.shape_tag not in ("disk", "annulus"):
        raise OptimizationError(f"radial optimisation needs a disk or annulus, got {domain.shape_tag}")
    r, _ = domain.grid.polar()
    key = np.round(r / domain.grid.h_cell, 9)[domain.inside]
    radii, inv = np.unique(key, return_inverse=True)
    labels = np.full(domain.grid.shape, -1, dtype=int)
    labels[domain.inside] = inv
    return labels, radii * domain.grid.h_cell


def _ring_select(order, sizes, quota):
    chosen, count = [], 0
    for ring in order:
        if count >= quota:
            break
        if count + sizes[ring] <= quota or (count + sizes[ring] - quota) < (quota - count):
            chosen.append(ring)
            count += sizes[ring]
        else:
            break
    return chosen


def radial_optimize(domain: DomainMask, s: float, alpha: float, A: float, op: FracOperator | None = None,
                    max_iter: int = 200, eig_tol: float = 1e-12) -> OptimalPair:
    """Optimisation restricted to unions of full rings of equal radius.

    ``u`` is averaged over each ring before the rearrangement, and whole
    rings are taken in increasing order of the average until the cell count
    is as close to the quota as the ring sizes allow.
    """
    if not alpha > 0:
        raise OptimizationError(f"alpha must be positive, got {alpha}")
    op = _operator(domain, s, op)
    labels, radii = radial_rings(domain)
    quota = quota_cells(domain, A)
    lab = labels[domain.inside]
    sizes = np.bincount(lab, minlength=radii.size)

    def to_config(rings):
        keep = np.zeros(radii.size, dtype=bool)
        keep[list(rings)] = True
        mask = np.zeros(domain.grid.shape, dtype=bool)
        mask[domain.inside] = keep[lab]
        return Configuration(mask, A)

    if domain.shape_tag == "disk":
        dist = domain.params["radius"] - radii
    else:
        b = domain.params["b"]
        dist = np.minimum(radii - b, b + 1.0 - radii)
    start = to_config(_ring_select(np.argsort(dist, kind="stable"), sizes, quota))

    def step(u):
        avg = np.bincount(lab, weights=np.asarray(u)[domain.inside], minlength=radii.size) / sizes
        return to_config(_ring_select(np.argsort(avg, kind="stable"), sizes, quota))

    pair, D, history, status = _alternate(op, alpha, A, start, step, "radial", max_iter, eig_tol)
    realized = D.n_cells * domain.grid.cell_volume
    vals = pair.u[domain.inside]
    inD = D.mask[domain.inside]
    t = float(vals[inD].max()) if inD.any() else float(vals.min())
    return OptimalPair(Configuration(D.mask, realized, t), pair.u, pair.lam, t, history, status, "radial", alpha)
