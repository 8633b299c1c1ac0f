"""Steiner symmetrisation, rotational-asymmetry diagnostics and the annulus
symmetry-breaking pipeline.

The breaking chain compares three eigenvalues on the annulus
``b < |x| < b + 1``: ``sigma`` (best radial configuration), ``tau`` (its
energy restricted to fields ``h(r) sin(N theta)``) and ``lambda_1`` of the
sector ``0 <= theta <= pi/N``.  A sector eigenvalue below ``sigma`` exhibits
a non-radial configuration of the same area that beats every radial one.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import integrate

from .eigen import smallest_eigenpair, subspace_eigenvalue
from .fracop import FracOperator, assemble, kernel_constant
from .grid import Configuration, DomainMask, annulus_resolution, build_domain
from .optimize import OptimalPair, optimize, radial_optimize

logger = logging.getLogger(__name__)

ANGULAR_BINS = 64


class SymmetryError(ValueError):
    pass


def mode_number(delta: float) -> int:
    """Smallest N with ``delta < 1 - 1/(2N)``."""
    if not 0 < delta < 1:
        raise SymmetryError(f"area fraction must lie in (0, 1), got {delta}")
    N = 1
    while not delta < 1 - 1 / (2 * N):
        N += 1
    return N


def _line_positions(lo: int, hi: int) -> np.ndarray:
    """Cells lo..hi ordered centre-out; left cell first on ties."""
    pos = np.arange(lo, hi + 1)
    mid = 0.5 * (lo + hi)
    return pos[np.lexsort((pos, np.abs(pos - mid)))]


def steiner(u: np.ndarray, domain: DomainMask, axis: int = 0) -> np.ndarray:
    """Symmetric-decreasing rearrangement of ``u`` along every grid line
    parallel to ``axis``.

    Each line section of the domain must be one run of cells symmetric about
    the box centre.  Values are meant to be nonnegative.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != domain.grid.shape:
        raise SymmetryError("field does not match the grid")
    n = domain.grid.n
    inside = np.moveaxis(domain.inside, axis, 0)
    work = np.moveaxis(u.copy(), axis, 0)
    lines = inside.reshape(n, -1)
    vals = work.reshape(n, -1)
    out = np.zeros_like(vals)
    for j in range(lines.shape[1]):
        cells = np.flatnonzero(lines[:, j])
        if cells.size == 0:
            continue
        lo, hi = cells[0], cells[-1]
        if cells.size != hi - lo + 1 or lo + hi != n - 1:
            raise SymmetryError(f"domain is not symmetric and convex along axis {axis} (line {j})")
        out[_line_positions(lo, hi), j] = np.sort(vals[lo:hi + 1, j])[::-1]
    return np.moveaxis(out.reshape(work.shape), 0, axis)


def _radial_bins(domain: DomainMask):
    if domain.shape_tag == "annulus":
        r0 = domain.params["b"]
    elif domain.shape_tag == "disk":
        r0 = 0.0
    else:
        raise SymmetryError(f"asymmetry needs an annulus or disk, got {domain.shape_tag}")
    r, theta = domain.grid.polar()
    h = domain.grid.h_cell
    rbin = np.floor((r - r0) / h).astype(int)
    abin = np.minimum((theta / (2 * math.pi) * ANGULAR_BINS).astype(int), ANGULAR_BINS - 1)
    return rbin[domain.inside], abin[domain.inside]


def asymmetry(x: Union[Configuration, np.ndarray], domain: DomainMask) -> float:
    """Angular variance of an indicator (or max-normalised field), averaged
    over radial bins of one cell width with weights equal to bin sizes.

    Within a radial bin, cells are grouped into 64 angular bins, each bin
    contributes its mean, and the population variance of those means is
    taken.  Rotation-invariant inputs give 0; a half annulus gives 1/4.
    """
    if isinstance(x, Configuration):
        vals = x.mask.astype(float)
    else:
        x = np.asarray(x)
        if x.dtype == bool:
            vals = x.astype(float)
        else:
            peak = np.max(np.abs(x[domain.inside]))
            vals = x / peak if peak > 0 else x.astype(float)
    vals = vals[domain.inside]
    rbin, abin = _radial_bins(domain)
    total, weight = 0.0, 0
    for rb in np.unique(rbin):
        sel = rbin == rb
        counts = np.bincount(abin[sel], minlength=ANGULAR_BINS)
        sums = np.bincount(abin[sel], weights=vals[sel], minlength=ANGULAR_BINS)
        occupied = counts > 0
        if not occupied.any():
            continue
        means = sums[occupied] / counts[occupied]
        total += float(np.var(means)) * int(sel.sum())
        weight += int(sel.sum())
    if weight == 0:
        raise SymmetryError("no occupied radial bins")
    return total / weight


def membership_profile(config: Configuration, domain: DomainMask) -> np.ndarray:
    """Fraction of each radial bin (one cell wide) covered by ``config``,
    innermost bin first; bins without inside cells are dropped."""
    rbin, _ = _radial_bins(domain)
    inD = config.mask[domain.inside]
    counts = np.bincount(rbin)
    hits = np.bincount(rbin, weights=inD.astype(float), minlength=counts.size)
    occupied = counts > 0
    return hits[occupied] / counts[occupied]


def radially_monotone(config: Configuration, domain: DomainMask) -> bool:
    """True when bin coverage never decreases outward: any bin touched by
    ``config`` is followed only by fully covered bins."""
    frac = membership_profile(config, domain)
    touched = np.flatnonzero(frac > 0)
    if touched.size == 0:
        return True
    return bool(np.all(frac[touched[0] + 1:] == 1.0))


def sector_eigenvalue(b: float, N: int, s: float, resolution: int) -> float:
    """First Dirichlet eigenvalue of the sector ``0 <= theta <= pi/N`` of
    the annulus, on the annulus's grid."""
    if N < 1:
        raise SymmetryError("N must be >= 1")
    sector = build_domain("sector", resolution, b=b, N=N)
    return smallest_eigenpair(assemble(sector, s)).lam


def radial_hats(domain: DomainMask) -> list:
    """Piecewise-linear radial hats with nodes one cell width apart across
    the annulus, sampled at inside cell centres."""
    b = domain.params["b"]
    h = domain.grid.h_cell
    K = max(1, int(round(1.0 / h)))
    nodes = b + np.arange(K + 1) / K
    width = 1.0 / K
    r, _ = domain.grid.polar()
    hats = []
    for node in nodes:
        f = np.clip(1.0 - np.abs(r - node) / width, 0.0, None)
        hats.append(np.where(domain.inside, f, 0.0))
    return hats


def mode_basis(domain: DomainMask, N: int, reflect: bool = False) -> list:
    _, theta = domain.grid.polar()
    angle = np.sin(N * (-theta if reflect else theta))
    return [hat * angle for hat in radial_hats(domain)]


def mode_restricted_tau(b: float, s: float, alpha: float, D_radial, N: int, resolution: int,
                        op: FracOperator | None = None, reflect: bool = False) -> float:
    """Least energy of ``M + alpha chi_D`` over fields ``h(r) sin(N theta)``,
    with ``h`` in the span of radial hats."""
    if op is None:
        op = assemble(build_domain("annulus", resolution, b=b), s)
    domain = op.domain
    mask = D_radial.mask if isinstance(D_radial, Configuration) else np.asarray(D_radial, bool)
    return subspace_eigenvalue(op, alpha * mask, mode_basis(domain, N, reflect))


def radial_subspace_sigma(op: FracOperator, alpha: float, D_radial) -> float:
    """``sigma`` restricted to the same radial hats used for ``tau``."""
    mask = D_radial.mask if isinstance(D_radial, Configuration) else np.asarray(D_radial, bool)
    return subspace_eigenvalue(op, alpha * mask, radial_hats(op.domain))


def _profile(h_profile, b):
    """Callable profile and its interior kinks (nodes of sampled input)."""
    if callable(h_profile):
        return h_profile, []
    vals = np.asarray(h_profile, dtype=float)
    nodes = b + np.linspace(0.0, 1.0, vals.size)
    return (lambda t: np.interp(t, nodes, vals)), list(nodes[1:-1])


def b_operator(h_profile, r: float, b: float, s: float, N: int, tol: float = 1e-8) -> float:
    """Angular coupling term of the reduced radial equation for the
    ``sin(N theta)`` mode, evaluated at radius ``r``.

    ``h_profile`` is a callable of the radius or samples on equispaced radial
    nodes over ``[b, b+1]``.  Shifting the angle by ``pi/(2N)`` turns the
    weight ``1 - sin(N theta)`` into ``1 - cos(N phi)``, even in ``phi``.
    The angular integral is done innermost: it stays finite at ``t = r``
    because the weight vanishes quadratically where the kernel blows up.
    """
    if not b <= r <= b + 1:
        raise SymmetryError(f"r={r} outside [{b}, {b + 1}]")
    h, kinks = _profile(h_profile, b)
    c = kernel_constant(2, s)

    def angular(t):
        gap2 = (r - t) ** 2
        rt4 = 4.0 * r * t
        scale = abs(r - t) / math.sqrt(r * t)

        def f(phi):
            return 2.0 * math.sin(0.5 * N * phi) ** 2 / (gap2 + rt4 * math.sin(0.5 * phi) ** 2) ** (1.0 + s)

        pts = sorted({p for p in (scale, 10 * scale, math.pi / N) if 0 < p < math.pi})
        val, _ = integrate.quad(f, 0.0, math.pi, points=pts or None, epsabs=0.0,
                                epsrel=tol, limit=200)
        return val

    def radial(t):
        ht = float(h(t))
        return 0.0 if ht == 0.0 else ht * t * angular(t)

    pts = sorted(set(kinks) | ({r} if b < r < b + 1 else set()))
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(radial, b, b + 1, points=pts or None, epsabs=0.0, epsrel=tol,
                                    limit=200 + 2 * len(pts))
        except integrate.IntegrationWarning as exc:
            raise SymmetryError(f"B[h] quadrature did not converge at r={r}: {exc}") from exc
    return 2.0 * c * val


def mode_field(domain: DomainMask, h_profile, N: int) -> np.ndarray:
    b = domain.params["b"]
    h, _ = _profile(h_profile, b)
    r, theta = domain.grid.polar()
    return np.where(domain.inside, h(r) * np.sin(N * theta), 0.0)


def energy_split_check(h_profile, N: int, b: float, s: float, resolution: int,
                       op: FracOperator | None = None) -> tuple:
    """Energy of ``v = h(r) sin(N theta)`` against ``2N`` times the energy of
    its restriction to the sector ``0 <= theta < pi/N``."""
    if op is None:
        op = assemble(build_domain("annulus", resolution, b=b), s)
    domain = op.domain
    v = mode_field(domain, h_profile, N)
    _, theta = domain.grid.polar()
    first = theta < math.pi / N
    lhs = op.quadratic_form(v)
    rhs = 2 * N * op.quadratic_form(np.where(first, v, 0.0))
    return lhs, rhs


@dataclass
class BreakingReport:
    s: float
    b: float
    delta: float
    N: int
    alpha: float
    resolution: int
    sigma: float
    tau: float
    lambda_sector: float
    lambda_full: float
    asym: float
    verdict_sector: Optional[bool]
    verdict_full: Optional[bool]
    sigma_status: str = ""
    full_status: str = ""

    @property
    def verdict(self) -> Optional[bool]:
        if self.verdict_sector is None:
            return None
        return bool(self.verdict_sector and self.verdict_full)

    def row(self) -> dict:
        out = asdict(self)
        out["verdict"] = self.verdict
        return out


def _best_unconstrained(domain, s, alpha, A, op, radial: OptimalPair) -> OptimalPair:
    # asymmetric start, plus the radial optimum as a start so the result can
    # never be worse than sigma
    runs = [
        optimize(domain, s, alpha, A, init="halfplane", op=op),
        optimize(domain, s, alpha, A, init=radial.D, op=op),
    ]
    return min(runs, key=lambda p: p.lam)


def breaking_case(s: float, delta: float, b: float, cells_across: int = 8,
                  alpha: float | None = None) -> tuple:
    """One annulus of the breaking scan; returns ``(report, radial, full)``.

    ``alpha`` defaults to the first eigenvalue of the annulus, the crossing
    value at zero area, which keeps it within the admissible range.
    """
    resolution = annulus_resolution(b, cells_across)
    domain = build_domain("annulus", resolution, b=b)
    op = assemble(domain, s)
    if alpha is None:
        alpha = smallest_eigenpair(op).lam
    radial = radial_optimize(domain, s, alpha, delta * domain.measure, op=op)
    A = radial.D.n_cells * domain.grid.cell_volume
    realized = A / domain.measure
    N = mode_number(realized)
    lam_sector = sector_eigenvalue(b, N, s, resolution)
    tau = mode_restricted_tau(b, s, alpha, radial.D, N, resolution, op=op)
    full = _best_unconstrained(domain, s, alpha, A, op, radial)
    report = BreakingReport(
        s=s, b=b, delta=realized, N=N, alpha=alpha, resolution=resolution,
        sigma=radial.lam, tau=tau, lambda_sector=lam_sector, lambda_full=full.lam,
        asym=asymmetry(full.D, domain),
        verdict_sector=bool(lam_sector < radial.lam),
        verdict_full=bool(full.lam < radial.lam),
        sigma_status=radial.status, full_status=full.status,
    )
    return report, radial, full


def disk_control(s: float, delta: float, resolution: int = 64, alpha: float | None = None) -> tuple:
    """The same radial-versus-unconstrained comparison on the unit disk,
    where no breaking is expected.  The verdict fields stay ``None``."""
    domain = build_domain("disk", resolution, radius=1.0)
    op = assemble(domain, s)
    if alpha is None:
        alpha = smallest_eigenpair(op).lam
    radial = radial_optimize(domain, s, alpha, delta * domain.measure, op=op)
    A = radial.D.n_cells * domain.grid.cell_volume
    full = _best_unconstrained(domain, s, alpha, A, op, radial)
    report = BreakingReport(
        s=s, b=0.0, delta=A / domain.measure, N=mode_number(A / domain.measure), alpha=alpha,
        resolution=resolution, sigma=radial.lam, tau=float("nan"), lambda_sector=float("nan"),
        lambda_full=full.lam, asym=asymmetry(full.D, domain),
        verdict_sector=None, verdict_full=None,
        sigma_status=radial.status, full_status=full.status,
    )
    return report, radial, full


def breaking_experiment(s: float, delta: float, b_list: Sequence[float], resolution: int = 8,
                        alpha: float | None = None, workers: int = 1) -> list:
    """Breaking scan over inner radii; ``resolution`` is the number of cells
    across the annulus width.  Reports come back in ``b_list`` order."""
    if not 0 < delta < 1:
        raise SymmetryError(f"delta must lie in (0, 1), got {delta}")
    if not 0 < s < 0.5:
        logger.warning("s=%s is outside (0, 1/2); verdicts carry no expectation", s)

    def job(b):
        return breaking_case(s, delta, b, resolution, alpha)[0]

    if workers <= 1:
        return [job(b) for b in b_list]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, b_list))
