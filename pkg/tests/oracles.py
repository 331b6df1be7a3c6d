"""Independent reference implementations used by the test suite.

Everything here is built directly from definitions (dense matrices,
plain iterations) without touching the package's operator code, so the
tests compare two genuinely different routes to the same quantity.
"""

from __future__ import annotations

import itertools

import numpy as np


def dense_diff_matrices(dims):
    """Dense forward-difference matrices built entry-by-entry.

    Entry (r, c) of the n-th matrix is -1 at c == r and +1 at
    c == r + stride_n, with rows at the far boundary of dimension n left
    zero; flat indices follow the canonical 0-based ordering (first
    dimension fastest).
    """
    dims = tuple(dims)
    n_total = int(np.prod(dims))
    strides = [1]
    for k in dims[:-1]:
        strides.append(strides[-1] * k)
    mats = []
    for n in range(len(dims)):
        mat = np.zeros((n_total, n_total))
        for idx in itertools.product(*[range(k) for k in dims]):
            r = sum(i * s for i, s in zip(idx, strides))
            if idx[n] == dims[n] - 1:
                continue
            mat[r, r] = -1.0
            mat[r, r + strides[n]] = 1.0
        mats.append(mat)
    return mats


def dense_tv(dims, x, isotropic=True):
    """TV by direct summation over the dense difference matrices."""
    mats = dense_diff_matrices(dims)
    g = np.stack([m @ x for m in mats])
    if isotropic:
        return float(np.sum(np.sqrt(np.sum(g * g, axis=0))))
    return float(np.sum(np.abs(g)))


def projected_gradient_box_quadratic(w_dense, x, lower, upper, iters):
    """Minimize 1/2 ||u - x||_W^2 over a box by projected gradient."""
    lam_max = float(np.linalg.eigvalsh(w_dense).max())
    step = 1.0 / lam_max
    u = np.clip(x, lower, upper)
    for _ in range(iters):
        u = np.clip(u - step * (w_dense @ (u - x)), lower, upper)
    return u


def condat_vu_tv(dims, w_dense, v, reg, lower, upper, iters=100_000, isotropic=True):
    """Dense primal-dual solver for the weighted constrained TV prox.

    Solves min_{lower <= x <= upper} 1/2 ||x - v||_W^2 + reg * TV(x) by
    the Condat-Vu splitting with dense difference matrices; an entirely
    different algorithm and code path from the package's dual solver.
    """
    mats = dense_diff_matrices(dims)
    n = v.shape[0]
    k_stack = np.vstack(mats)
    lip = float(np.linalg.eigvalsh(w_dense).max())
    norm_k2 = float(np.linalg.eigvalsh(k_stack.T @ k_stack).max())
    sigma = 0.5
    tau = 1.0 / (lip / 2.0 + sigma * norm_k2 + 1e-9)
    d = len(mats)
    x = np.clip(v, lower, upper)
    p = np.zeros(d * n)
    for _ in range(iters):
        grad = w_dense @ (x - v)
        x_new = np.clip(x - tau * (grad + k_stack.T @ p), lower, upper)
        q = p + sigma * (k_stack @ (2.0 * x_new - x))
        cols = q.reshape(d, n)
        if isotropic:
            norms = np.sqrt(np.sum(cols * cols, axis=0))
            scale = np.minimum(1.0, reg / np.maximum(norms, 1e-300))
            cols = cols * scale
        else:
            cols = np.clip(cols, -reg, reg)
        p = cols.reshape(-1)
        x = x_new
    return x


def tv_objective(dims, w_dense, v, reg, x, isotropic=True):
    """Objective of the weighted constrained TV prox, dense evaluation."""
    diff = x - v
    return 0.5 * float(diff @ w_dense @ diff) + reg * dense_tv(dims, x, isotropic)


def fgp_tv_denoise(image, reg, iters=500):
    """Classical accelerated dual projected gradient for 2-D TV denoising.

    Standard unconstrained isotropic TV denoising written with array
    shifts; independent of the package's grid/operator conventions.
    """
    rows, cols = image.shape
    p = np.zeros((rows, cols))  # vertical dual component
    q = np.zeros((rows, cols))  # horizontal dual component
    p_prev, q_prev = p.copy(), q.copy()
    t = 1.0
    pb, qb = p.copy(), q.copy()
    for _ in range(iters):
        div = np.zeros((rows, cols))
        div[:-1, :] += pb[:-1, :]
        div[1:, :] -= pb[:-1, :]
        div[:, :-1] += qb[:, :-1]
        div[:, 1:] -= qb[:, :-1]
        u = image - reg * div
        gp = np.zeros((rows, cols))
        gq = np.zeros((rows, cols))
        gp[:-1, :] = u[:-1, :] - u[1:, :]
        gq[:, :-1] = u[:, :-1] - u[:, 1:]
        p_new = pb + gp / (8.0 * reg)
        q_new = qb + gq / (8.0 * reg)
        norms = np.maximum(1.0, np.sqrt(p_new**2 + q_new**2))
        p_new /= norms
        q_new /= norms
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        pb = p_new + ((t - 1.0) / t_new) * (p_new - p_prev)
        qb = q_new + ((t - 1.0) / t_new) * (q_new - q_prev)
        p_prev, q_prev = p_new, q_new
        t = t_new
    div = np.zeros((rows, cols))
    div[:-1, :] += p_prev[:-1, :]
    div[1:, :] -= p_prev[:-1, :]
    div[:, :-1] += q_prev[:, :-1]
    div[:, 1:] -= q_prev[:, :-1]
    return image - reg * div
