"""Activated Gaussian parameters and 3D covariances, with analytic derivatives.

Quaternions are ``(w, x, y, z)`` with the Hamilton convention throughout the
package. All functions broadcast over leading axes.
"""

import numpy as np
from scipy.special import expit

from .exceptions import DegenerateQuaternionError

QUAT_EPS = 1e-12


def activate_opacity(f_alpha):
    """Sigmoid of the opacity latent."""
    return expit(np.asarray(f_alpha, dtype=np.float64))


def activate_scale(f_s, d_median):
    """``exp(f_s) * d_median`` componentwise."""
    if np.any(np.asarray(d_median) <= 0):
        raise ValueError("d_median must be positive")
    return np.exp(np.asarray(f_s, dtype=np.float64)) * d_median


def activate_rotation(f_r):
    """Normalize a quaternion latent to unit length.

    Raises DegenerateQuaternionError when any input norm is <= 1e-12.
    """
    f_r = np.asarray(f_r, dtype=np.float64)
    norm = np.linalg.norm(f_r, axis=-1, keepdims=True)
    if np.any(norm <= QUAT_EPS):
        raise DegenerateQuaternionError()
    return f_r / norm


def quaternion_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_to_matrix_jacobian(q):
    """dR/dq with shape ``(..., 3, 3, 4)``; the last axis indexes (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = (2 * q[..., i] for i in range(4))
    zero = np.zeros_like(w)
    # rows of R, each entry differentiated w.r.t. (w, x, y, z)
    J = np.stack([
        np.stack([
            np.stack([zero, zero, -2 * y, -2 * z], -1),
            np.stack([-z, y, x, -w], -1),
            np.stack([y, z, w, x], -1),
        ], -2),
        np.stack([
            np.stack([z, y, x, w], -1),
            np.stack([zero, -2 * x, zero, -2 * z], -1),
            np.stack([-x, -w, z, y], -1),
        ], -2),
        np.stack([
            np.stack([-y, z, -w, x], -1),
            np.stack([x, w, z, y], -1),
            np.stack([zero, -2 * x, -2 * y, zero], -1),
        ], -2),
    ], -3)
    return J


def build_covariance(scale, rotation):
    """Sigma = R(q) diag(s^2) R(q)^T."""
    scale = np.asarray(scale, dtype=np.float64)
    R = quaternion_to_matrix(rotation)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_vjp(scale, rotation, d_sigma):
    """Pull a covariance gradient back to (scale, unit quaternion).

    ``d_sigma`` is the full-matrix gradient dL/dSigma (not assumed symmetric).
    """
    scale = np.asarray(scale, dtype=np.float64)
    R = quaternion_to_matrix(rotation)
    M = R * scale[..., None, :]
    sym = d_sigma + np.swapaxes(d_sigma, -1, -2)
    dM = sym @ M
    d_scale = np.sum(dM * R, axis=-2)
    dR = dM * scale[..., None, :]
    d_quat = np.einsum("...ij,...ijk->...k", dR, quaternion_to_matrix_jacobian(rotation))
    return d_scale, d_quat


def opacity_grad(f_alpha):
    s = activate_opacity(f_alpha)
    return s * (1.0 - s)


def scale_jacobian(f_s, d_median):
    s = activate_scale(f_s, d_median)
    return s[..., :, None] * np.eye(3)


def rotation_jacobian(f_r):
    """d normalize(f)/d f = (I - q q^T) / |f|, shape ``(..., 4, 4)``."""
    f_r = np.asarray(f_r, dtype=np.float64)
    norm = np.linalg.norm(f_r, axis=-1)
    if np.any(norm <= QUAT_EPS):
        raise DegenerateQuaternionError()
    q = f_r / norm[..., None]
    return (np.eye(4) - q[..., :, None] * q[..., None, :]) / norm[..., None, None]


def rotation_vjp(f_r, d_quat):
    f_r = np.asarray(f_r, dtype=np.float64)
    norm = np.linalg.norm(f_r, axis=-1, keepdims=True)
    q = f_r / norm
    return (d_quat - q * np.sum(q * d_quat, axis=-1, keepdims=True)) / norm


def grad_build(f_alpha, f_s, f_r, d_median):
    """Jacobians of every activation and of the covariance w.r.t. the raw latents.

    Returns a dict:

    - ``opacity``: d alpha / d f_alpha, shape ``(...)``
    - ``scale``: d s / d f_s, ``(..., 3, 3)``
    - ``rotation``: d q / d f_r, ``(..., 4, 4)``
    - ``covariance_scale``: d Sigma / d f_s, ``(..., 3, 3, 3)``
    - ``covariance_rotation``: d Sigma / d f_r, ``(..., 3, 3, 4)``
    """
    s = activate_scale(f_s, d_median)
    q = activate_rotation(f_r)
    R = quaternion_to_matrix(q)
    dR = quaternion_to_matrix_jacobian(q)
    # Sigma_ij = sum_k R_ik s_k^2 R_jk
    # d/ds_k: 2 s_k R_ik R_jk; chain with ds_k/df_k = s_k
    d_sigma_ds = 2 * s[..., None, None, :] * R[..., :, None, :] * R[..., None, :, :]
    d_sigma_dfs = d_sigma_ds * s[..., None, None, :]
    s2 = s * s
    # d/dq: dR_ik s_k^2 R_jk + R_ik s_k^2 dR_jk
    term = np.einsum("...ikq,...k,...jk->...ijq", dR, s2, R)
    d_sigma_dq = term + np.swapaxes(term, -3, -2)
    d_sigma_dfr = d_sigma_dq @ rotation_jacobian(f_r)[..., None, :, :]
    return {
        "opacity": opacity_grad(f_alpha),
        "scale": scale_jacobian(f_s, d_median),
        "rotation": rotation_jacobian(f_r),
        "covariance_scale": d_sigma_dfs,
        "covariance_rotation": d_sigma_dfr,
    }
