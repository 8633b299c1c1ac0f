"""Discrete integral fractional Laplacian with zero exterior values.

The operator is written in difference form

    (M u)_i = sum_{j != i} w(i - j) (u_i - u_j) + (exterior part) u_i

where ``w(k) = c_{n,s} * integral over cell k of |z|^(-n-2s)``.  Because the
exterior value is zero, every interaction with a cell outside the domain
(inside the embedding box or beyond it) collapses onto the diagonal.  The
diagonal is the kernel mass outside the self cell (the stencil weights plus
the closed-form mass beyond the stencil), plus a second-order
Taylor correction for the self cell that is spread over the nearest
neighbours as a scaled discrete Laplacian.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import integrate, signal, special

from .grid import Configuration, DomainMask, GridSpec

NEAR_FIELD = 2
QUAD_TOL = 1e-10
DENSE_APPLY_LIMIT = 32


class OperatorError(ValueError):
    pass


def kernel_constant(n: int, s: float) -> float:
    """Normalisation making the singular integral match the symbol |xi|^(2s)."""
    if n not in (1, 2):
        raise OperatorError(f"dimension must be 1 or 2, got {n}")
    if not 0.0 < s < 1.0:
        raise OperatorError(f"s must lie in (0, 1), got {s}")
    return (
        2.0 ** (2 * s)
        * s
        * math.gamma(0.5 * n + s)
        / (math.pi ** (0.5 * n) * math.gamma(1.0 - s))
    )


def torsion_constant(s: float) -> float:
    """kappa with (-Delta)^s [kappa (1 - x^2)_+^s] = 1 on (-1, 1)."""
    return math.gamma(0.5) / (2.0 ** (2 * s) * math.gamma(1.0 + s) * math.gamma(0.5 + s))


def interval_torsion(x, s: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return torsion_constant(s) * np.clip(1.0 - x * x, 0.0, None) ** s


def _cos_power_integral(p: float, phi: float) -> float:
    # int_0^phi cos^p(t) dt via the incomplete beta function
    x = math.sin(phi) ** 2
    return 0.5 * special.betainc(0.5, 0.5 * (p + 1), x) * special.beta(0.5, 0.5 * (p + 1))


def _mass_outside_cube(dim: int, s: float, half_width: float) -> float:
    """int over |z|_inf > L of |z|^(-dim-2s), without the c_{n,s} factor."""
    if dim == 1:
        return 2.0 * half_width ** (-2 * s) / (2 * s)
    # polar form per octant: the cube face sits at r = L / cos(phi)
    return 8.0 * half_width ** (-2 * s) * _cos_power_integral(2 * s, math.pi / 4) / (2 * s)


@lru_cache(maxsize=64)
def _self_moment(dim: int, s: float) -> float:
    """int over the unit self cell of |z|^(2 - dim - 2s) (second moment of
    the kernel), for the Taylor correction."""
    if dim == 1:
        return 2.0 * 0.5 ** (2 - 2 * s) / (2 - 2 * s)
    return 8.0 * integrate.quad(
        lambda phi: (0.5 / math.cos(phi)) ** (2 - 2 * s) / (2 - 2 * s),
        0.0,
        math.pi / 4,
        epsabs=0.0,
        epsrel=1e-13,
    )[0]


@lru_cache(maxsize=64)
def _unit_near_weights_2d(s: float) -> dict:
    """Cell integrals of |z|^(-2-2s) over unit cells with |k|_inf <= 2."""
    out = {}
    for k1 in range(0, NEAR_FIELD + 1):
        for k2 in range(0, k1 + 1):
            if k1 == 0:
                continue
            val, _ = integrate.dblquad(
                lambda y, x: (x * x + y * y) ** (-1.0 - s),
                k1 - 0.5,
                k1 + 0.5,
                k2 - 0.5,
                k2 + 0.5,
                epsabs=0.0,
                epsrel=QUAD_TOL,
            )
            out[(k1, k2)] = val
            out[(k2, k1)] = val
    return out


def unit_weights(dim: int, n: int, s: float) -> np.ndarray:
    """Kernel cell integrals for unit cell width on offsets in
    [-(n-1), n-1]^dim; the zero offset holds 0."""
    k = np.arange(-(n - 1), n)
    if dim == 1:
        a = np.abs(k).astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = ((a - 0.5) ** (-2 * s) - (a + 0.5) ** (-2 * s)) / (2 * s)
        w[n - 1] = 0.0
        return w
    k1, k2 = np.meshgrid(np.abs(k), np.abs(k), indexing="ij")
    r2 = (k1 * k1 + k2 * k2).astype(float)
    r2[n - 1, n - 1] = 1.0
    w = r2 ** (-1.0 - s)
    w[n - 1, n - 1] = 0.0
    near = _unit_near_weights_2d(s)
    for (a, b), val in near.items():
        if a <= n - 1 and b <= n - 1:
            for sa in {a, -a}:
                for sb in {b, -b}:
                    w[n - 1 + sa, n - 1 + sb] = val
    return w


@dataclass(eq=False)
class FracOperator:
    s: float
    grid: GridSpec
    c_ns: float
    weights: np.ndarray
    diagonal: float
    tail: np.ndarray
    domain: DomainMask
    _matrix: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_cells(self) -> int:
        return self.domain.n_cells

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume

    def pack(self, field_: np.ndarray) -> np.ndarray:
        field_ = np.asarray(field_, dtype=float)
        if field_.shape != self.grid.shape:
            raise OperatorError(
                f"field shape {field_.shape} does not match grid {self.grid.shape}"
            )
        return field_[self.domain.inside]

    def unpack(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.shape)
        out[self.domain.inside] = vec
        return out

    def matrix(self) -> np.ndarray:
        """Dense matrix on the inside cells (lexicographic order); cached."""
        if self._matrix is None:
            idx = self.domain.indices()
            n = self.grid.n
            offs = [
                (idx[:, None, d] - idx[None, :, d] + (n - 1)).astype(np.int32)
                for d in range(self.grid.dim)
            ]
            mat = -self.weights[tuple(offs)]
            del offs
            np.fill_diagonal(mat, self.diagonal)
            self._matrix = mat
        return self._matrix

    def apply(self, field_: np.ndarray, method: str = "auto") -> np.ndarray:
        """M applied to a full-grid field that vanishes outside the domain."""
        field_ = np.asarray(field_, dtype=float)
        if field_.shape != self.grid.shape:
            raise OperatorError(
                f"field shape {field_.shape} does not match grid {self.grid.shape}"
            )
        if method == "auto":
            method = "dense" if self.grid.n <= DENSE_APPLY_LIMIT else "fft"
        if method == "dense":
            return self.unpack(self.matrix() @ self.pack(field_))
        if method != "fft":
            raise OperatorError(f"unknown apply method {method!r}")
        u = np.where(self.domain.inside, field_, 0.0)
        conv = signal.fftconvolve(u, self.weights, mode="same")
        out = self.diagonal * u - conv
        return np.where(self.domain.inside, out, 0.0)

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        """Packed-vector product, FFT based for large grids."""
        if self._matrix is not None or self.grid.n <= DENSE_APPLY_LIMIT:
            return self.matrix() @ vec
        return self.pack(self.apply(self.unpack(vec), method="fft"))

    def quadratic_form(self, field_: np.ndarray) -> float:
        """Discrete ||(-Delta)^(s/2) u||^2 of the zero extension of u."""
        u = self.pack(field_)
        return float(u @ self.matvec(u)) * self.cell_volume

    def rayleigh(self, alpha: float, config, field_: np.ndarray) -> float:
        mask = config.mask if isinstance(config, Configuration) else np.asarray(config, bool)
        u = np.asarray(field_, dtype=float)
        denom = float(np.sum(u[self.domain.inside] ** 2)) * self.cell_volume
        if denom == 0.0:
            raise OperatorError("Rayleigh quotient of a field vanishing on the domain")
        pot = alpha * float(np.sum(u[mask & self.domain.inside] ** 2)) * self.cell_volume
        return (self.quadratic_form(u) + pot) / denom

    def metadata(self) -> dict:
        return {
            "s": self.s,
            "c_ns": self.c_ns,
            "dim": self.grid.dim,
            "n": self.grid.n,
            "h_cell": self.grid.h_cell,
            "shape_tag": self.domain.shape_tag,
            "params": dict(self.domain.params),
            "weights_sha256": hashlib.sha256(
                np.ascontiguousarray(self.weights).tobytes()
            ).hexdigest(),
        }


def assemble(domain: DomainMask, s: float) -> FracOperator:
    """Assemble the discrete operator on ``domain`` for exponent ``s``."""
    if domain.n_cells == 0:
        raise OperatorError("cannot assemble on an empty domain")
    grid = domain.grid
    dim, n, h = grid.dim, grid.n, grid.h_cell
    c = kernel_constant(dim, s)
    scale = c * h ** (-2 * s)

    moment = _self_moment(dim, s)
    unit = unit_weights(dim, n, s)
    # kernel mass off the self cell, built from the same cell weights as the
    # off-diagonal entries so that quadrature errors cancel for smooth fields
    outside = math.fsum(unit.ravel()) + _mass_outside_cube(dim, s, n - 0.5)
    weights = scale * unit
    # self-cell Taylor term as a discrete Laplacian on nearest neighbours
    corr = scale * moment / (2 * dim)
    centre = (n - 1,) * dim
    for axis in range(dim):
        for sign in (-1, 1):
            pos = list(centre)
            pos[axis] += sign
            weights[tuple(pos)] += corr
    diagonal = scale * (outside + moment)

    # kernel mass reaching other inside cells; the rest is exterior
    reach = signal.fftconvolve(domain.inside.astype(float), weights, mode="same")
    tail = np.where(domain.inside, diagonal - reach, 0.0)
    if np.any(tail[domain.inside] <= 0):
        raise OperatorError("non-positive exterior contribution; check quadrature")
    return FracOperator(s, grid, c, weights, diagonal, tail, domain)
