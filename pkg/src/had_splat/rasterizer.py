"""Differentiable Gaussian splat renderer.

Gaussians are projected with a first-order (EWA) Jacobian, depth-sorted once
per view, and alpha-composited front to back at every pixel. The backward
pass recomputes each pixel's blend, walks it in reverse, and chains the
screen-space gradients back to means, scales, quaternions, opacities and SH
coefficients.

Every non-culled splat is evaluated at every pixel until its kernel drops
below ``KERNEL_CUTOFF``; a hard 3-sigma per-pixel cutoff would make the
image a discontinuous function of the parameters.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ContractError
from .scene import quat_to_rotmat

NEAR_PLANE = 0.01
COV2D_DILATION = 0.3  # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.999
KERNEL_CUTOFF = 1e-14
TRAIN_CUTOFF = 1.0 / 255.0
DEPTH_ALPHA_EPS = 1e-6
SH_C1 = 0.4886025119029199

# the bundled TBB is too old for numba; OpenMP avoids the warning and behaves the same
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"


def set_threads(n=None):
    """Configure numba worker threads; HAD_SPLAT_THREADS overrides ``n``."""
    env = os.environ.get("HAD_SPLAT_THREADS")
    if env:
        n = int(env)
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 where nothing was hit
    alpha: np.ndarray  # (H, W)


@dataclass
class ParamGradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros_like(cls, gset):
        return cls(np.zeros_like(gset.means), np.zeros_like(gset.log_scales), np.zeros_like(gset.quats),
                   np.zeros_like(gset.opacity_logits), np.zeros_like(gset.sh))

    def as_dict(self):
        return {"means": self.means, "log_scales": self.log_scales, "quats": self.quats,
                "opacity_logits": self.opacity_logits, "sh": self.sh}

    def scaled_add(self, other, weight=1.0):
        for name, arr in self.as_dict().items():
            arr += weight * getattr(other, name)
        return self


# ---------------------------------------------------------------------------
# projection


def _sh_color(sh, dirs):
    """View-dependent RGB before clamping. sh: (N, K, 3); dirs: (N, 3) unit."""
    c = sh[:, 0, :].copy()
    if sh.shape[1] == 4:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        c += SH_C1 * (-y * sh[:, 1, :] + z * sh[:, 2, :] - x * sh[:, 3, :])
    return c


def _q_cut(cutoff):
    return -2.0 * np.log(cutoff)


def _project(gset, cam, cutoff=KERNEL_CUTOFF):
    """Vectorized projection of every Gaussian; returns a dict of per-Gaussian arrays."""
    W = cam.rotation_w2c
    q = gset.quats
    qnorm = np.linalg.norm(q, axis=1)
    qn = q / qnorm[:, None]
    R = quat_to_rotmat(qn)
    s = np.exp(gset.log_scales)
    M = R * s[:, None, :]
    cov3d = M @ np.transpose(M, (0, 2, 1))

    t = gset.means @ W.T + cam.translation_w2c
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)

    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    T = J @ W
    cov2d = T @ cov3d @ np.transpose(T, (0, 2, 1))
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
    radius3 = 3.0 * np.sqrt(lam_max)
    radius_cut = np.sqrt(_q_cut(cutoff) * lam_max)
    on_image = ((mean2d[:, 0] + radius3 > 0) & (mean2d[:, 0] - radius3 < cam.width)
                & (mean2d[:, 1] + radius3 > 0) & (mean2d[:, 1] - radius3 < cam.height))
    visible = valid & on_image

    view = gset.means - cam.center
    vnorm = np.linalg.norm(view, axis=1)
    dirs = view / np.maximum(vnorm, 1e-12)[:, None]
    raw_color = _sh_color(gset.sh, dirs)
    color = np.clip(raw_color, 0.0, 1.0)

    opacity = 1.0 / (1.0 + np.exp(-gset.opacity_logits))
    bbox = np.stack([
        np.floor(mean2d[:, 0] - radius_cut), np.ceil(mean2d[:, 0] + radius_cut),
        np.floor(mean2d[:, 1] - radius_cut), np.ceil(mean2d[:, 1] + radius_cut),
    ], axis=1)
    return dict(R=R, qn=qn, qnorm=qnorm, s=s, M=M, cov3d=cov3d, t=t, J=J, T=T, cov2d=cov2d,
                mean2d=mean2d, conic=conic, visible=visible, dirs=dirs, vnorm=vnorm,
                raw_color=raw_color, color=color, opacity=opacity, bbox=bbox, depth=z)


def _sorted_visible(proj):
    idx = np.nonzero(proj["visible"])[0]
    order = idx[np.argsort(proj["depth"][idx], kind="stable")]
    bbox = np.clip(proj["bbox"][order], -1e9, 1e9)
    return (order,
            np.ascontiguousarray(proj["mean2d"][order]),
            np.ascontiguousarray(proj["conic"][order]),
            np.ascontiguousarray(proj["opacity"][order]),
            np.ascontiguousarray(proj["color"][order]),
            np.ascontiguousarray(proj["depth"][order]),
            np.ascontiguousarray(bbox))


def project_gaussian(g, cam):
    """Project one primitive; returns a Splat2D or None when culled."""
    from .scene import GaussianSet

    proj = _project(GaussianSet.from_primitives([g]), cam)
    if not proj["visible"][0]:
        return None
    return Splat2D(proj["mean2d"][0].copy(), proj["cov2d"][0].copy(), float(proj["depth"][0]),
                   proj["color"][0].copy())


# ---------------------------------------------------------------------------
# kernels


@numba.njit(parallel=True, cache=True, fastmath=False)
def _forward_kernel(H, W, mean2d, conic, opacity, color, depth, bbox, bg, q_cut, alpha_max, eps):
    img = np.empty((H, W, 3))
    dep = np.empty((H, W))
    acc = np.empty((H, W))
    n = mean2d.shape[0]
    for py in numba.prange(H):
        fy = py + 0.5
        rows = np.empty(n, dtype=np.int64)
        nr = 0
        for i in range(n):
            if bbox[i, 2] <= fy <= bbox[i, 3]:
                rows[nr] = i
                nr += 1
        for px in range(W):
            fx = px + 0.5
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            d = 0.0
            for r in range(nr):
                i = rows[r]
                if fx < bbox[i, 0] or fx > bbox[i, 1] or fy < bbox[i, 2] or fy > bbox[i, 3]:
                    continue
                dx = fx - mean2d[i, 0]
                dy = fy - mean2d[i, 1]
                q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if q > q_cut:
                    continue
                a = opacity[i] * np.exp(-0.5 * q)
                if a > alpha_max:
                    a = alpha_max
                w = a * T
                c0 += w * color[i, 0]
                c1 += w * color[i, 1]
                c2 += w * color[i, 2]
                d += w * depth[i]
                T *= 1.0 - a
            img[py, px, 0] = c0 + T * bg[0]
            img[py, px, 1] = c1 + T * bg[1]
            img[py, px, 2] = c2 + T * bg[2]
            a_acc = 1.0 - T
            acc[py, px] = a_acc
            dep[py, px] = d / a_acc if a_acc > eps else 0.0
    return img, dep, acc


@numba.njit(parallel=True, cache=True, fastmath=False)
def _backward_kernel(H, W, mean2d, conic, opacity, color, bbox, bg, q_cut, alpha_max, grad_img):
    """Per-row partial gradients, shape (H, n, 9):
    [d_mean2d(2), d_conic(a, b, c), d_opacity, d_color(3)].
    Rows are summed by the caller in fixed order so results do not depend on threading."""
    n = mean2d.shape[0]
    partial = np.zeros((H, n, 9))
    for py in numba.prange(H):
        fy = py + 0.5
        idx = np.empty(n, dtype=np.int64)
        alphas = np.empty(n)
        gvals = np.empty(n)
        Ts = np.empty(n)
        dxs = np.empty(n)
        dys = np.empty(n)
        out = partial[py]
        rows = np.empty(n, dtype=np.int64)
        nr = 0
        for i in range(n):
            if bbox[i, 2] <= fy <= bbox[i, 3]:
                rows[nr] = i
                nr += 1
        for px in range(W):
            fx = px + 0.5
            g0 = grad_img[py, px, 0]
            g1 = grad_img[py, px, 1]
            g2 = grad_img[py, px, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            T = 1.0
            m = 0
            for r in range(nr):
                i = rows[r]
                if fx < bbox[i, 0] or fx > bbox[i, 1] or fy < bbox[i, 2] or fy > bbox[i, 3]:
                    continue
                dx = fx - mean2d[i, 0]
                dy = fy - mean2d[i, 1]
                q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if q > q_cut:
                    continue
                g = np.exp(-0.5 * q)
                idx[m] = i
                gvals[m] = g
                alphas[m] = opacity[i] * g
                Ts[m] = T
                dxs[m] = dx
                dys[m] = dy
                a = alphas[m] if alphas[m] <= alpha_max else alpha_max
                T *= 1.0 - a
                m += 1
            # contribution of everything behind the current splat (starts with the background)
            b0 = bg[0] * T
            b1 = bg[1] * T
            b2 = bg[2] * T
            for k in range(m - 1, -1, -1):
                i = idx[k]
                raw = alphas[k]
                clamped = raw > alpha_max
                a = alpha_max if clamped else raw
                Tk = Ts[k]
                w = a * Tk
                out[i, 6] += g0 * w
                out[i, 7] += g1 * w
                out[i, 8] += g2 * w
                inv = 1.0 / (1.0 - a)
                dalpha = (g0 * (color[i, 0] * Tk - b0 * inv)
                          + g1 * (color[i, 1] * Tk - b1 * inv)
                          + g2 * (color[i, 2] * Tk - b2 * inv))
                b0 += color[i, 0] * w
                b1 += color[i, 1] * w
                b2 += color[i, 2] * w
                if clamped:
                    continue
                gk = gvals[k]
                out[i, 5] += dalpha * gk
                dq = -0.5 * raw * dalpha
                dx = dxs[k]
                dy = dys[k]
                ca = conic[i, 0]
                cb = conic[i, 1]
                cc = conic[i, 2]
                out[i, 0] += -dq * (2.0 * ca * dx + 2.0 * cb * dy)
                out[i, 1] += -dq * (2.0 * cb * dx + 2.0 * cc * dy)
                out[i, 2] += dq * dx * dx
                out[i, 3] += dq * 2.0 * dx * dy
                out[i, 4] += dq * dy * dy
    return partial


# ---------------------------------------------------------------------------
# public API


def _background_only(gset, cam):
    H, W = cam.height, cam.width
    img = np.empty((H, W, 3))
    img[:] = gset.background
    return RenderOutput(img, np.zeros((H, W)), np.zeros((H, W)))


class RenderPass:
    """A forward render whose backward pass can be run once the loss gradient is known."""

    def __init__(self, gset, cam, cutoff=KERNEL_CUTOFF):
        self.gset = gset
        self.cam = cam
        self.cutoff = cutoff
        if len(gset) == 0:
            self.output = _background_only(gset, cam)
            self._packed = None
            return
        self._proj = _project(gset, cam, cutoff)
        self._packed = _sorted_visible(self._proj)
        _, m2, con, op, col, dep, bbox = self._packed
        img, depth, acc = _forward_kernel(cam.height, cam.width, m2, con, op, col, dep, bbox,
                                          gset.background, _q_cut(cutoff), ALPHA_MAX, DEPTH_ALPHA_EPS)
        self.output = RenderOutput(img, depth, acc)

    def backward(self, loss_grad):
        cam = self.cam
        loss_grad = np.ascontiguousarray(loss_grad, dtype=np.float64)
        if loss_grad.shape != (cam.height, cam.width, 3):
            raise ContractError(f"loss_grad shape {loss_grad.shape} does not match camera")
        grads = ParamGradients.zeros_like(self.gset)
        if self._packed is None or len(self._packed[0]) == 0:
            return grads
        order, m2, con, op, col, _, bbox = self._packed
        partial = _backward_kernel(cam.height, cam.width, m2, con, op, col, bbox, self.gset.background,
                                   _q_cut(self.cutoff), ALPHA_MAX, loss_grad)
        _chain_to_params(self.gset, cam, self._proj, order, partial.sum(axis=0), grads)
        return grads


def render(gset, cam, cutoff=KERNEL_CUTOFF):
    """Render ``gset`` from ``cam``. Deterministic for any thread count.

    ``cutoff`` is the kernel value exp(-q/2) below which a splat is skipped at
    a pixel; the default keeps the image smooth to double precision, training
    may pass TRAIN_CUTOFF for speed.
    """
    return RenderPass(gset, cam, cutoff).output


def render_with_grad(gset, cam, loss_grad, cutoff=KERNEL_CUTOFF):
    """Render plus dL/d(parameters) given dL/d(image) (H, W, 3)."""
    rp = RenderPass(gset, cam, cutoff)
    return rp.output, rp.backward(loss_grad)


def _chain_to_params(gset, cam, proj, order, g, grads):
    """Chain screen-space gradients of the visible splats back to parameters."""
    d_mean2d = g[:, 0:2]
    d_conic = g[:, 2:5]
    d_op = g[:, 5]
    d_color = g[:, 6:9]

    conic = proj["conic"][order]
    A = np.empty((len(order), 2, 2))
    A[:, 0, 0] = conic[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = conic[:, 1]
    A[:, 1, 1] = conic[:, 2]
    GA = np.empty_like(A)
    GA[:, 0, 0] = d_conic[:, 0]
    GA[:, 0, 1] = GA[:, 1, 0] = 0.5 * d_conic[:, 1]
    GA[:, 1, 1] = d_conic[:, 2]
    G_cov2d = -A @ GA @ A

    T = proj["T"][order]
    cov3d = proj["cov3d"][order]
    Wr = cam.rotation_w2c
    G_cov3d = np.transpose(T, (0, 2, 1)) @ G_cov2d @ T
    G_T = 2.0 * G_cov2d @ T @ cov3d
    G_J = G_T @ Wr.T

    t = proj["t"][order]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    G_t = np.zeros_like(t)
    G_t[:, 0] = d_mean2d[:, 0] * fx / z
    G_t[:, 1] = d_mean2d[:, 1] * fy / z
    G_t[:, 2] = -d_mean2d[:, 0] * fx * x / z**2 - d_mean2d[:, 1] * fy * y / z**2
    G_t[:, 0] += G_J[:, 0, 2] * (-fx / z**2)
    G_t[:, 1] += G_J[:, 1, 2] * (-fy / z**2)
    G_t[:, 2] += (G_J[:, 0, 0] * (-fx / z**2) + G_J[:, 0, 2] * (2 * fx * x / z**3)
                  + G_J[:, 1, 1] * (-fy / z**2) + G_J[:, 1, 2] * (2 * fy * y / z**3))
    G_mean = G_t @ Wr

    # colour: clamp blocks gradient, degree-1 terms also depend on the view direction
    raw = proj["raw_color"][order]
    G_c = d_color * ((raw >= 0.0) & (raw <= 1.0))
    G_sh = np.zeros((len(order),) + gset.sh.shape[1:])
    G_sh[:, 0, :] = G_c
    if gset.sh.shape[1] == 4:
        dirs = proj["dirs"][order]
        sh = gset.sh[order]
        dx_, dy_, dz_ = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        G_sh[:, 1, :] = -SH_C1 * dy_ * G_c
        G_sh[:, 2, :] = SH_C1 * dz_ * G_c
        G_sh[:, 3, :] = -SH_C1 * dx_ * G_c
        G_dir = np.stack([
            -SH_C1 * np.sum(sh[:, 3, :] * G_c, axis=1),
            -SH_C1 * np.sum(sh[:, 1, :] * G_c, axis=1),
            SH_C1 * np.sum(sh[:, 2, :] * G_c, axis=1),
        ], axis=1)
        vnorm = proj["vnorm"][order]
        G_v = (G_dir - dirs * np.sum(dirs * G_dir, axis=1, keepdims=True)) / vnorm[:, None]
        G_mean += G_v

    # covariance factorisation Sigma = (R S)(R S)^T
    M = proj["M"][order]
    R = proj["R"][order]
    s = proj["s"][order]
    G_M = 2.0 * G_cov3d @ M
    G_R = G_M * s[:, None, :]
    G_s = np.sum(R * G_M, axis=1)
    G_logscale = G_s * s

    qn = proj["qn"][order]
    G_qn = _rotmat_grad_to_quat(qn, G_R)
    G_q = (G_qn - qn * np.sum(qn * G_qn, axis=1, keepdims=True)) / proj["qnorm"][order][:, None]

    op = proj["opacity"][order]
    G_logit = d_op * op * (1.0 - op)

    grads.means[order] = G_mean
    grads.log_scales[order] = G_logscale
    grads.quats[order] = G_q
    grads.opacity_logits[order] = G_logit
    grads.sh[order] = G_sh


def _rotmat_grad_to_quat(q, G):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)
