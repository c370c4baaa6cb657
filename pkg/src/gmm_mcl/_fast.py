"""Compiled inner loops for scan likelihood evaluation.

The public API in :mod:`gmm_mcl.likelihood` stays in plain numpy; these
kernels implement the identical arithmetic with explicit loops so that the
per-particle evaluation inside the filter runs at native speed. Reduction
order within a particle is fixed, so results are reproducible bit-for-bit
regardless of how particles are distributed over worker threads.

Set the environment variable ``GMM_MCL_NO_NUMBA=1`` to force the pure-numpy
fallbacks (mainly useful for debugging).
"""

from __future__ import annotations

import math
import os

import numpy as np

NUMBA_ENABLED = os.environ.get("GMM_MCL_NO_NUMBA", "") not in ("1", "true", "yes")

if NUMBA_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a hard dependency
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:  # identity decorator keeps the module importable

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# Mixture terms this many nats below the running per-point maximum add
# exactly 0.0 to the normalized double-precision sum (exp(-50) ~ 2e-22,
# far below the epsilon of a sum that is at least 1), so skipping them is
# bit-exact, not an approximation.
_NEGLIGIBLE_SPAN = 50.0


@njit(nogil=True, cache=True)
def nll_csr(pts, patch_of, mu, prec6, min_prec, logcoef, indptr, members, floor, scratch):
    """Negative log-likelihood of camera-frame points under patch-restricted
    mixture sums.

    pts: (P, 3) points; patch_of: (P,) patch index per point; mu: (M, 3)
    camera-frame means; prec6: (M, 6) packed precisions (xx, xy, xz, yy, yz,
    zz); min_prec: (M,) smallest precision eigenvalue (rotation invariant),
    used to lower-bound the quadratic form; logcoef: (M,) log-weight minus
    Gaussian log-normalizer; indptr / members: CSR member lists per patch;
    floor: per-point log-density floor; scratch: (M,) workspace.
    """
    total = 0.0
    for p in range(pts.shape[0]):
        pa = patch_of[p]
        s = indptr[pa]
        e = indptr[pa + 1]
        mx = -np.inf
        for k in range(s, e):
            j = members[k]
            dx = pts[p, 0] - mu[j, 0]
            dy = pts[p, 1] - mu[j, 1]
            dz = pts[p, 2] - mu[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if logcoef[j] - 0.5 * min_prec[j] * d2 < mx - _NEGLIGIBLE_SPAN:
                scratch[k - s] = -np.inf
                continue
            q = (
                prec6[j, 0] * dx * dx
                + prec6[j, 3] * dy * dy
                + prec6[j, 5] * dz * dz
                + 2.0 * (prec6[j, 1] * dx * dy + prec6[j, 2] * dx * dz + prec6[j, 4] * dy * dz)
            )
            v = logcoef[j] - 0.5 * q
            scratch[k - s] = v
            if v > mx:
                mx = v
        if e == s or mx == -np.inf:
            logdens = floor
        else:
            acc = 0.0
            for k in range(e - s):
                if scratch[k] > mx - _NEGLIGIBLE_SPAN:
                    acc += math.exp(scratch[k] - mx)
            logdens = mx + math.log(acc)
            if logdens < floor:
                logdens = floor
        total -= logdens
    return total


@njit(nogil=True, cache=True)
def fused_particle_nll(
    rot,
    campos,
    pts,
    patch_of,
    cpx,
    cpy,
    means,
    covs,
    inv_covs,
    min_prec,
    logcoef,
    f,
    cx,
    cy,
    near,
    inflation,
    floor,
):
    """Membership computation fused with the scan NLL for a single pose.

    Equivalent to projecting every component, inflating its 3-sigma ellipse,
    testing each patch center, and evaluating the patch-restricted mixture
    log density at every point (see :mod:`gmm_mcl.likelihood` for the numpy
    reference). rot is the world-to-camera rotation, campos the camera
    origin in world coordinates.
    """
    m = means.shape[0]
    n_patches = cpx.shape[0]

    mu_c = np.empty((m, 3))
    prec6 = np.empty((m, 6))
    is_member = np.zeros(m, dtype=np.bool_)
    members = np.empty((n_patches, m), dtype=np.int32)
    counts = np.zeros(n_patches, dtype=np.int32)

    for j in range(m):
        d0 = means[j, 0] - campos[0]
        d1 = means[j, 1] - campos[1]
        d2 = means[j, 2] - campos[2]
        x = rot[0, 0] * d0 + rot[0, 1] * d1 + rot[0, 2] * d2
        y = rot[1, 0] * d0 + rot[1, 1] * d1 + rot[1, 2] * d2
        z = rot[2, 0] * d0 + rot[2, 1] * d1 + rot[2, 2] * d2
        mu_c[j, 0] = x
        mu_c[j, 1] = y
        mu_c[j, 2] = z

        if z < near:
            continue  # behind the camera: member of no patch

        u = cx + f * x / z
        v = cy + f * y / z
        # Projected 2x2 covariance (J R) Sigma (J R)^T with J the pinhole
        # Jacobian at the transformed mean; rows of A = (z/f) J.
        a00 = rot[0, 0] - (x / z) * rot[2, 0]
        a01 = rot[0, 1] - (x / z) * rot[2, 1]
        a02 = rot[0, 2] - (x / z) * rot[2, 2]
        a10 = rot[1, 0] - (y / z) * rot[2, 0]
        a11 = rot[1, 1] - (y / z) * rot[2, 1]
        a12 = rot[1, 2] - (y / z) * rot[2, 2]
        s = f / z
        b00 = a00 * covs[j, 0, 0] + a01 * covs[j, 1, 0] + a02 * covs[j, 2, 0]
        b01 = a00 * covs[j, 0, 1] + a01 * covs[j, 1, 1] + a02 * covs[j, 2, 1]
        b02 = a00 * covs[j, 0, 2] + a01 * covs[j, 1, 2] + a02 * covs[j, 2, 2]
        b10 = a10 * covs[j, 0, 0] + a11 * covs[j, 1, 0] + a12 * covs[j, 2, 0]
        b11 = a10 * covs[j, 0, 1] + a11 * covs[j, 1, 1] + a12 * covs[j, 2, 1]
        b12 = a10 * covs[j, 0, 2] + a11 * covs[j, 1, 2] + a12 * covs[j, 2, 2]
        c00 = (b00 * a00 + b01 * a01 + b02 * a02) * s * s
        c01 = (b00 * a10 + b01 * a11 + b02 * a12) * s * s
        c11 = (b10 * a10 + b11 * a11 + b12 * a12) * s * s

        half_tr = 0.5 * (c00 + c11)
        det_root = math.sqrt(0.25 * (c00 - c11) * (c00 - c11) + c01 * c01)
        l1 = half_tr + det_root
        l2 = half_tr - det_root
        if l1 < 0.0:
            l1 = 0.0
        if l2 < 0.0:
            l2 = 0.0
        theta = 0.5 * math.atan2(2.0 * c01, c00 - c11)
        sa = 3.0 * math.sqrt(l1) + inflation
        sb = 3.0 * math.sqrt(l2) + inflation
        ct = math.cos(theta)
        st = math.sin(theta)
        for p in range(n_patches):
            dx = cpx[p] - u
            dy = cpy[p] - v
            e1 = (dx * ct + dy * st) / sa
            e2 = (-dx * st + dy * ct) / sb
            if e1 * e1 + e2 * e2 <= 1.0:
                members[p, counts[p]] = j
                counts[p] += 1
                is_member[j] = True

    # Camera-frame precision R @ inv(Sigma) @ R^T, packed upper triangle;
    # only components that joined at least one patch are ever evaluated.
    for j in range(m):
        if not is_member[j]:
            continue
        t00 = rot[0, 0] * inv_covs[j, 0, 0] + rot[0, 1] * inv_covs[j, 1, 0] + rot[0, 2] * inv_covs[j, 2, 0]
        t01 = rot[0, 0] * inv_covs[j, 0, 1] + rot[0, 1] * inv_covs[j, 1, 1] + rot[0, 2] * inv_covs[j, 2, 1]
        t02 = rot[0, 0] * inv_covs[j, 0, 2] + rot[0, 1] * inv_covs[j, 1, 2] + rot[0, 2] * inv_covs[j, 2, 2]
        t10 = rot[1, 0] * inv_covs[j, 0, 0] + rot[1, 1] * inv_covs[j, 1, 0] + rot[1, 2] * inv_covs[j, 2, 0]
        t11 = rot[1, 0] * inv_covs[j, 0, 1] + rot[1, 1] * inv_covs[j, 1, 1] + rot[1, 2] * inv_covs[j, 2, 1]
        t12 = rot[1, 0] * inv_covs[j, 0, 2] + rot[1, 1] * inv_covs[j, 1, 2] + rot[1, 2] * inv_covs[j, 2, 2]
        t20 = rot[2, 0] * inv_covs[j, 0, 0] + rot[2, 1] * inv_covs[j, 1, 0] + rot[2, 2] * inv_covs[j, 2, 0]
        t21 = rot[2, 0] * inv_covs[j, 0, 1] + rot[2, 1] * inv_covs[j, 1, 1] + rot[2, 2] * inv_covs[j, 2, 1]
        t22 = rot[2, 0] * inv_covs[j, 0, 2] + rot[2, 1] * inv_covs[j, 1, 2] + rot[2, 2] * inv_covs[j, 2, 2]
        prec6[j, 0] = t00 * rot[0, 0] + t01 * rot[0, 1] + t02 * rot[0, 2]
        prec6[j, 1] = t00 * rot[1, 0] + t01 * rot[1, 1] + t02 * rot[1, 2]
        prec6[j, 2] = t00 * rot[2, 0] + t01 * rot[2, 1] + t02 * rot[2, 2]
        prec6[j, 3] = t10 * rot[1, 0] + t11 * rot[1, 1] + t12 * rot[1, 2]
        prec6[j, 4] = t10 * rot[2, 0] + t11 * rot[2, 1] + t12 * rot[2, 2]
        prec6[j, 5] = t20 * rot[2, 0] + t21 * rot[2, 1] + t22 * rot[2, 2]

    total = 0.0
    scratch = np.empty(m)
    for p in range(pts.shape[0]):
        pa = patch_of[p]
        n_mem = counts[pa]
        mx = -np.inf
        for k in range(n_mem):
            j = members[pa, k]
            dx = pts[p, 0] - mu_c[j, 0]
            dy = pts[p, 1] - mu_c[j, 1]
            dz = pts[p, 2] - mu_c[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if logcoef[j] - 0.5 * min_prec[j] * d2 < mx - _NEGLIGIBLE_SPAN:
                scratch[k] = -np.inf
                continue
            q = (
                prec6[j, 0] * dx * dx
                + prec6[j, 3] * dy * dy
                + prec6[j, 5] * dz * dz
                + 2.0 * (prec6[j, 1] * dx * dy + prec6[j, 2] * dx * dz + prec6[j, 4] * dy * dz)
            )
            v = logcoef[j] - 0.5 * q
            scratch[k] = v
            if v > mx:
                mx = v
        if n_mem == 0 or mx == -np.inf:
            logdens = floor
        else:
            acc = 0.0
            for k in range(n_mem):
                if scratch[k] > mx - _NEGLIGIBLE_SPAN:
                    acc += math.exp(scratch[k] - mx)
            logdens = mx + math.log(acc)
            if logdens < floor:
                logdens = floor
        total -= logdens
    return total


@njit(nogil=True, cache=True)
def fused_batch_nll(
    positions,
    yaws,
    base,
    pts,
    patch_of,
    cpx,
    cpy,
    means,
    covs,
    inv_covs,
    min_prec,
    logcoef,
    f,
    cx,
    cy,
    near,
    inflation,
    floor,
    lo,
    hi,
    out,
):
    """Per-particle scan NLLs for particles [lo, hi).

    Each particle's world-to-camera rotation is (Rz(yaw) @ base)^T with
    ``base`` the shared pitch/roll rotation. Results land in ``out`` by
    particle index, so any partitioning into slices yields identical output.
    """
    rot = np.empty((3, 3))
    for i in range(lo, hi):
        c = math.cos(yaws[i])
        s = math.sin(yaws[i])
        for r in range(3):
            rot[r, 0] = base[0, r] * c - base[1, r] * s
            rot[r, 1] = base[0, r] * s + base[1, r] * c
            rot[r, 2] = base[2, r]
        out[i] = fused_particle_nll(
            rot,
            positions[i],
            pts,
            patch_of,
            cpx,
            cpy,
            means,
            covs,
            inv_covs,
            min_prec,
            logcoef,
            f,
            cx,
            cy,
            near,
            inflation,
            floor,
        )


def nll_csr_numpy(pts, patch_of, mu, prec6, min_prec, logcoef, indptr, members, floor):
    """Vectorized fallback equivalent of :func:`nll_csr` (summation order
    differs, so results agree only to float round-off)."""
    pts = np.asarray(pts)
    n_pts = pts.shape[0]
    counts = np.diff(indptr)
    lens = counts[patch_of]
    total_pairs = int(lens.sum())
    n_floor = int(np.count_nonzero(lens == 0))
    if total_pairs == 0:
        return -floor * n_pts

    pix_rep = np.repeat(np.arange(n_pts), lens)
    starts = indptr[patch_of]
    bounds = np.concatenate(([0], np.cumsum(lens)))
    offs = np.arange(total_pairs) - np.repeat(bounds[:-1], lens)
    comp_rep = members[np.repeat(starts, lens) + offs]

    diff = pts[pix_rep] - mu[comp_rep]
    pr = prec6[comp_rep]
    quad = (
        pr[:, 0] * diff[:, 0] ** 2
        + pr[:, 3] * diff[:, 1] ** 2
        + pr[:, 5] * diff[:, 2] ** 2
        + 2.0
        * (
            pr[:, 1] * diff[:, 0] * diff[:, 1]
            + pr[:, 2] * diff[:, 0] * diff[:, 2]
            + pr[:, 4] * diff[:, 1] * diff[:, 2]
        )
    )
    vals = logcoef[comp_rep] - 0.5 * quad

    nz = lens > 0
    seg_starts = bounds[:-1][nz]
    seg_max = np.maximum.reduceat(vals, seg_starts)
    seg_sum = np.add.reduceat(np.exp(vals - np.repeat(seg_max, lens[nz])), seg_starts)
    logdens = np.maximum(seg_max + np.log(seg_sum), floor)
    return float(-logdens.sum() - floor * n_floor)
