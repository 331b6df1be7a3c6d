"""Synthetic multi-view measurement models at desk scale.

Each view applies an orthonormal spectral transform (type-II DCT) followed
by a view-specific binary frequency mask.  The masks are rotating angular
sectors that emulate limited-angle coverage, with a missing cone around
the last grid axis that no view measures.  A smooth quadratic nonlinearity
can be switched on to make the data-fidelity terms non-convex; strength
zero recovers the linear model exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .tv_ops import Grid, TvMode, tv_value

# widest half-angle of the unmeasured cone; shrinks as mask_fraction -> 1
_CONE_MAX = math.radians(20.0)


class ViewProblem:
    """One data-fidelity term 1/2 ||H(x) - y||^2.

    Parameters
    ----------
    forward : callable
        Measurement map, flat image -> measurement vector.
    jacobian_vec : callable
        (x, v) -> J(x) v, the linearization of ``forward`` at x applied
        to v.  For linear views this ignores x.
    adjoint_vec : callable
        (x, z) -> J(x)^T z, the exact adjoint of the linearization.
    y : ndarray
        Measurement vector.
    view_id : int
        Index of the view.
    """

    def __init__(self, forward, jacobian_vec, adjoint_vec, y, view_id=0):
        self._forward = forward
        self._jacobian_vec = jacobian_vec
        self._adjoint_vec = adjoint_vec
        self.y = np.asarray(y, dtype=float)
        self.view_id = int(view_id)

    def forward(self, x):
        return self._forward(np.asarray(x, dtype=float))

    def jacobian_vec(self, x, v):
        return self._jacobian_vec(np.asarray(x, dtype=float), np.asarray(v, dtype=float))

    def adjoint_vec(self, x, z):
        return self._adjoint_vec(np.asarray(x, dtype=float), np.asarray(z, dtype=float))

    def value(self, x):
        r = self.forward(x) - self.y
        return 0.5 * float(np.dot(r, r))

    def gradient(self, x):
        return self.adjoint_vec(x, self.forward(x) - self.y)

    def self_check(self, n, rng, adj_tol=1e-10, grad_tol=1e-4):
        """Adjoint and finite-difference gradient tests; raises on failure."""
        x = rng.standard_normal(n)
        v = rng.standard_normal(n)
        z = rng.standard_normal(self.y.shape[0])
        lhs = float(np.dot(self.jacobian_vec(x, v), z))
        rhs = float(np.dot(v, self.adjoint_vec(x, z)))
        scale = max(1.0, abs(lhs), abs(rhs))
        if abs(lhs - rhs) > adj_tol * scale:
            raise RuntimeError(f"view {self.view_id}: adjoint test failed ({lhs} vs {rhs})")
        g = self.gradient(x)
        h = 1e-6
        d = rng.standard_normal(n)
        d /= np.linalg.norm(d)
        fd = (self.value(x + h * d) - self.value(x - h * d)) / (2 * h)
        an = float(np.dot(g, d))
        if abs(fd - an) > grad_tol * max(1.0, abs(fd), abs(an)):
            raise RuntimeError(f"view {self.view_id}: gradient test failed ({an} vs {fd})")


def _dct_flat(grid, x):
    return grid.from_nd(scipy.fft.dctn(grid.to_nd(x), norm="ortho"))


def _idct_flat(grid, z):
    return grid.from_nd(scipy.fft.idctn(grid.to_nd(z), norm="ortho"))


def spectrum_masks(grid, n_views, mask_fraction):
    """Binary frequency masks for the views plus the missing-cone mask.

    Returns
    -------
    masks : list of ndarray (bool, flat)
        One mask per view; their union is the complement of the cone.
        The zero-frequency coefficient belongs to every mask.
    cone : ndarray (bool, flat)
        Frequencies measured by no view (empty in 1-D or when
        ``mask_fraction`` is 1).
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    if not 0.0 < mask_fraction <= 1.0:
        raise ValueError("mask_fraction must lie in (0, 1]")
    n = grid.size
    if grid.ndim == 1:
        # no angular structure in 1-D: round-robin frequency bands, no cone
        idx = np.arange(n)
        masks = [(idx % n_views == v) | (idx == 0) for v in range(n_views)]
        return masks, np.zeros(n, dtype=bool)

    coords = np.meshgrid(
        *[np.arange(k, dtype=float) / max(k - 1, 1) for k in grid.dims], indexing="ij"
    )
    axial = coords[-1]
    perp = np.sqrt(sum(c * c for c in coords[:-1]))
    angle = np.arctan2(perp, axial)  # 0 along the last axis, pi/2 in-plane
    angle_flat = grid.from_nd(angle)
    dc = np.zeros(n, dtype=bool)
    dc[0] = True

    phi_cone = _CONE_MAX * (1.0 - mask_fraction)
    cone = (angle_flat < phi_cone) & ~dc
    span = math.pi / 2.0 - phi_cone
    width = span * max(mask_fraction, 1.0 / n_views)
    masks = []
    for v in range(n_views):
        center = phi_cone + (v + 0.5) * span / n_views
        sector = np.abs(angle_flat - center) <= width / 2.0 + 1e-12
        masks.append((sector & ~cone) | dc)
    return masks, cone


def _smooth_flat(grid, x):
    # separable 3-point edge-clamped mean; symmetric because the per-axis
    # factors are symmetric and commute
    a = grid.to_nd(x).astype(float)
    for axis in range(grid.ndim):
        if grid.dims[axis] == 1:
            continue
        p = np.moveaxis(a, axis, 0)
        padded = np.concatenate([p[:1], p, p[-1:]], axis=0)
        p = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
        a = np.moveaxis(p, 0, axis)
    return grid.from_nd(a)


def _make_views(grid, n_views, mask_fraction, seed, strength, x_gt, noise_snr_db):
    if strength < 0:
        raise ValueError("strength must be nonnegative")
    rng = np.random.default_rng(seed)
    if x_gt is None:
        x_gt = make_phantom(grid, seed=seed).values
    x_gt = np.asarray(x_gt, dtype=float)
    masks, _ = spectrum_masks(grid, n_views, mask_fraction)

    views = []
    for v, mask in enumerate(masks):
        maskf = mask.astype(float)

        def nonlinear_map(x, _m=maskf):
            if strength == 0.0:
                return _m * _dct_flat(grid, x)
            ax = _smooth_flat(grid, x)
            return _m * _dct_flat(grid, x + strength * ax * ax)

        def jac_vec(x, w, _m=maskf):
            if strength == 0.0:
                return _m * _dct_flat(grid, w)
            ax = _smooth_flat(grid, x)
            return _m * _dct_flat(grid, w + 2.0 * strength * ax * _smooth_flat(grid, w))

        def adj_vec(x, z, _m=maskf):
            q = _idct_flat(grid, _m * z)
            if strength == 0.0:
                return q
            ax = _smooth_flat(grid, x)
            return q + 2.0 * strength * _smooth_flat(grid, ax * q)

        y = nonlinear_map(x_gt)
        if noise_snr_db is not None:
            noise = rng.standard_normal(y.shape) * maskf
            power = np.linalg.norm(noise)
            if power > 0:
                noise *= np.linalg.norm(y) / power * 10.0 ** (-noise_snr_db / 20.0)
            y = y + noise
        view = ViewProblem(nonlinear_map, jac_vec, adj_vec, y, view_id=v)
        view.self_check(grid.size, rng)
        views.append(view)
    return views


def make_linear_views(grid, n_views, mask_fraction=0.5, seed=0, x_gt=None, noise_snr_db=None):
    """Linear masked-spectrum views (convex data-fidelity terms).

    With ``mask_fraction`` = 1 every view keeps the full spectrum and the
    forward map is orthonormal.
    """
    return _make_views(grid, n_views, mask_fraction, seed, 0.0, x_gt, noise_snr_db)


def make_nonlinear_views(
    grid, n_views, strength=0.1, mask_fraction=0.5, seed=0, x_gt=None, noise_snr_db=None
):
    """Views with a smooth quadratic nonlinearity (non-convex fidelities).

    The measurement map is H(x) = M F(x + strength * (A x) o (A x)) with A
    a fixed symmetric smoothing operator; strength 0 degenerates to
    :func:`make_linear_views` with identical outputs for equal seeds.
    """
    return _make_views(grid, n_views, mask_fraction, seed, strength, x_gt, noise_snr_db)


def snr_db(x, x_ref):
    """Signal-to-noise ratio 20 log10(||x_ref|| / ||x - x_ref||) in dB."""
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    if x.shape != x_ref.shape:
        raise ValueError("shapes must match")
    err = np.linalg.norm(x - x_ref)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(np.linalg.norm(x_ref) / err)


@dataclass(frozen=True, eq=False)
class Phantom:
    """Piecewise-constant ground truth with spherical inclusions."""

    grid: Grid
    values: np.ndarray
    eta_m: float
    eta_max: float
    spheres: tuple


def make_phantom(grid, kind="spheres", eta_m=1.333, eta_max=1.363, seed=0):
    """Deterministic multi-sphere phantom with nested contrast levels.

    Values lie in [eta_m, eta_max]; the innermost inclusion reaches
    eta_max exactly (unless eta_max == eta_m, which yields a constant
    image).
    """
    if eta_max < eta_m:
        raise ValueError("eta_max must be >= eta_m")
    rng = np.random.default_rng(seed)
    coords = np.meshgrid(
        *[(np.arange(k, dtype=float) + 0.5) / k for k in grid.dims], indexing="ij"
    )
    values = np.full(grid.dims, eta_m, dtype=float)

    if kind == "spheres":
        n_spheres = 3
        # nested contrast: each later (smaller) sphere overrides with a
        # higher level, topping out at eta_max
        levels = eta_m + (eta_max - eta_m) * np.linspace(1.0 / n_spheres, 1.0, n_spheres)
        centers = 0.3 + 0.4 * rng.random((n_spheres, grid.ndim))
        radii = np.linspace(0.32, 0.10, n_spheres) * (0.8 + 0.4 * rng.random(n_spheres))
        spheres = []
        for c, r, level in zip(centers, radii, levels):
            dist2 = sum((coords[i] - c[i]) ** 2 for i in range(grid.ndim))
            values[dist2 <= r * r] = level
            spheres.append((tuple(c), float(r), float(level)))
    elif kind == "cube":
        inside = np.ones(grid.dims, dtype=bool)
        for c in coords:
            inside &= (c > 0.3) & (c < 0.7)
        values[inside] = eta_max
        spheres = [((0.5,) * grid.ndim, 0.2, eta_max)]
    else:
        raise ValueError(f"unknown phantom kind: {kind!r}")
    return Phantom(
        grid=grid,
        values=grid.from_nd(values),
        eta_m=eta_m,
        eta_max=eta_max,
        spheres=tuple(spheres),
    )


def data_fidelity(views, x):
    """Mean of the view fidelities, (1/L) sum_rho f_rho(x)."""
    return sum(v.value(x) for v in views) / len(views)


def full_cost(views, x, tv_weight, grid, mode=TvMode.ISOTROPIC):
    """Reporting cost: mean view fidelity plus tv_weight * TV(x)."""
    cost = data_fidelity(views, x)
    if tv_weight:
        cost += tv_weight * tv_value(grid, x, mode)
    return cost


def subset_value(views, indices, x):
    """F_t(x): mean fidelity over one subset of views."""
    return sum(views[i].value(x) for i in indices) / len(indices)


def subset_gradient(views, indices, x):
    """Gradient of F_t at x, accumulated in fixed index order."""
    g = np.zeros_like(np.asarray(x, dtype=float))
    for i in indices:
        g += views[i].gradient(x)
    return g / len(indices)


__all__ = [
    "ViewProblem",
    "Phantom",
    "spectrum_masks",
    "make_linear_views",
    "make_nonlinear_views",
    "make_phantom",
    "snr_db",
    "data_fidelity",
    "full_cost",
    "subset_value",
    "subset_gradient",
]
