"""Differentiable software splatting of 3D Gaussians.

Forward path: world covariance from quaternion + log-scales, perspective
projection with a local-affine (Jacobian) covariance map, 0.3 px isotropic
dilation, then front-to-back alpha compositing in view-space depth order
over 16x16 pixel tiles. Per-pixel weights below 1/255 are skipped and the
effective alpha is capped at 0.99, matching the numerics that keep the
backward pass stable.

The per-Gaussian projection chain runs on graph tensors; tile compositing
is a single custom op with a hand-derived backward (depth order is treated
as locally constant). render_naive is an independent per-pixel
over-all-Gaussians compositor used as the correctness oracle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .decoder import GaussianSet
from .diffcore import Tensor

SH0 = 0.28209479177
ALPHA_CEIL = 0.99
WEIGHT_CUTOFF = 1.0 / 255.0
DILATION = 0.3
RADIUS_SIGMA = 3.5  # covers the 1/255 weight ellipse (Mahalanobis 3.33)
TILE = 16
MIN_DET = 1e-12


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_y: float = 49.1
    width: int = 64
    height: int = 64
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position coincides with look_at target")
        if not (0.0 < self.near < self.far):
            raise ValueError(f"camera needs 0 < near < far, got near={self.near}, far={self.far}")
        if not (0.0 < self.fov_y < 180.0):
            raise ValueError(f"fov_y must be in (0,180), got {self.fov_y}")


@dataclass
class RenderedImage:
    pixels: Tensor       # (H,W,3) in [0,1], graph-connected
    alpha: np.ndarray    # (H,W) accumulated opacity = 1 - transmittance


def camera_basis(cam: Camera):
    """World-to-camera rotation (rows: right, down, forward) and position."""
    fwd = cam.look_at - cam.position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, cam.up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("camera forward direction is parallel to up")
    right = right / nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=0), cam.position.copy()


def intrinsics(cam: Camera):
    """Pinhole focal length (square pixels) and principal point."""
    focal = (cam.height / 2.0) / np.tan(np.deg2rad(cam.fov_y) / 2.0)
    return focal, (cam.width - 1) / 2.0, (cam.height - 1) / 2.0


def camera_azimuth_deg(cam: Camera) -> float:
    d = cam.position - cam.look_at
    return float(np.degrees(np.arctan2(d[1], d[0])) % 360.0)


def sample_camera(rng: np.random.Generator, radius_range, fov_y: float, size,
                  look_at=(0.0, 0.0, 0.0), near: float = 0.1, far: float = 100.0) -> Camera:
    """Upper-hemisphere camera looking at the target with world-up +z.

    Azimuth uniform in [0,360), elevation uniform in [0,90), radius uniform
    in [r_min, r_max].
    """
    r_min, r_max = radius_range
    if not (0.0 < r_min <= r_max):
        raise ValueError(f"radius range must satisfy 0 < r_min <= r_max, got {radius_range}")
    az = np.deg2rad(rng.uniform(0.0, 360.0))
    el = np.deg2rad(rng.uniform(0.0, 90.0))
    radius = rng.uniform(r_min, r_max)
    offset = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    w, h = size
    return Camera(position=np.asarray(look_at) + offset, look_at=np.asarray(look_at, dtype=np.float64),
                  fov_y=fov_y, width=int(w), height=int(h), near=near, far=far)


# -- projection on graph tensors -------------------------------------------------


def _quaternion_to_matrix(q: Tensor) -> Tensor:
    """(M,4) scalar-first quaternions (renormalized) -> (M,3,3) rotations."""
    norm = dc.sqrt(dc.sum_(dc.mul(q, q), axis=1, keepdims=True))
    qn = dc.div(q, norm)
    r, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    two = 2.0
    e00 = 1.0 - dc.mul(dc.add(dc.mul(y, y), dc.mul(z, z)), two)
    e01 = dc.mul(dc.sub(dc.mul(x, y), dc.mul(r, z)), two)
    e02 = dc.mul(dc.add(dc.mul(x, z), dc.mul(r, y)), two)
    e10 = dc.mul(dc.add(dc.mul(x, y), dc.mul(r, z)), two)
    e11 = 1.0 - dc.mul(dc.add(dc.mul(x, x), dc.mul(z, z)), two)
    e12 = dc.mul(dc.sub(dc.mul(y, z), dc.mul(r, x)), two)
    e20 = dc.mul(dc.sub(dc.mul(x, z), dc.mul(r, y)), two)
    e21 = dc.mul(dc.add(dc.mul(y, z), dc.mul(r, x)), two)
    e22 = 1.0 - dc.mul(dc.add(dc.mul(x, x), dc.mul(y, y)), two)
    rows = [
        dc.stack([e00, e01, e02], axis=1),
        dc.stack([e10, e11, e12], axis=1),
        dc.stack([e20, e21, e22], axis=1),
    ]
    return dc.stack(rows, axis=1)


def _project(g: GaussianSet, cam: Camera):
    """Graph-side projection: culled, depth-sorted screen-space Gaussians.

    Returns (means2d, conic, opacity, colors) tensors plus numpy radii, or
    None when nothing survives culling.
    """
    dtype = g.centers.dtype
    w_rot, cam_pos = camera_basis(cam)
    focal, cx, cy = intrinsics(cam)
    w_rot = w_rot.astype(dtype)

    t_cam = dc.matmul(dc.sub(g.centers, Tensor(cam_pos.astype(dtype))), Tensor(w_rot.T))
    zs_all = t_cam.data[:, 2]
    keep = (zs_all > cam.near) & (zs_all < cam.far)
    if not keep.any():
        return None
    kept = np.nonzero(keep)[0]
    order = np.argsort(zs_all[kept], kind="stable")
    idx = kept[order]

    t = dc.take(t_cam, idx)
    rot = dc.take(g.rotation, idx)
    scal = dc.take(g.scaling_raw, idx)
    opac = dc.reshape(dc.take(g.opacity, idx), (len(idx),))
    sh = dc.take(g.sh_dc, idx)

    rm = _quaternion_to_matrix(rot)
    s = dc.exp(scal)
    rs = dc.mul(rm, dc.reshape(s, (len(idx), 1, 3)))
    cov3 = dc.matmul(rs, dc.transpose(rs, (0, 2, 1)))
    cov_cam = dc.matmul(dc.matmul(Tensor(w_rot[None]), cov3), Tensor(w_rot.T[None]))

    xs, ys, zs = t[:, 0], t[:, 1], t[:, 2]
    inv_z = dc.powc(zs, -1.0)
    lim_x = 1.3 * (cam.width / 2.0) / focal
    lim_y = 1.3 * (cam.height / 2.0) / focal
    xj = dc.mul(dc.clip(dc.mul(xs, inv_z), -lim_x, lim_x), zs)
    yj = dc.mul(dc.clip(dc.mul(ys, inv_z), -lim_y, lim_y), zs)
    inv_z2 = dc.mul(inv_z, inv_z)
    zero = Tensor(np.zeros(len(idx), dtype=dtype))
    j_flat = dc.stack(
        [
            dc.mul(inv_z, focal), zero, dc.mul(dc.mul(xj, inv_z2), -focal),
            zero, dc.mul(inv_z, focal), dc.mul(dc.mul(yj, inv_z2), -focal),
        ],
        axis=1,
    )
    jac = dc.reshape(j_flat, (len(idx), 2, 3))
    cov2 = dc.matmul(dc.matmul(jac, cov_cam), dc.transpose(jac, (0, 2, 1)))
    cov2 = dc.add(cov2, Tensor((DILATION * np.eye(2)).astype(dtype)[None]))

    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = dc.sub(dc.mul(a, c), dc.mul(b, b))
    valid = det.data >= MIN_DET
    if not valid.any():
        return None
    v_idx = np.nonzero(valid)[0]
    if len(v_idx) != len(idx):
        a, b, c, det = (dc.take(x_, v_idx) for x_ in (a, b, c, det))
        xs, ys, inv_z = dc.take(xs, v_idx), dc.take(ys, v_idx), dc.take(inv_z, v_idx)
        opac, sh = dc.take(opac, v_idx), dc.take(sh, v_idx)

    inv_det = dc.powc(det, -1.0)
    conic = dc.stack([dc.mul(c, inv_det), dc.neg(dc.mul(b, inv_det)), dc.mul(a, inv_det)], axis=1)
    u = dc.add(dc.mul(dc.mul(xs, inv_z), focal), cx)
    v = dc.add(dc.mul(dc.mul(ys, inv_z), focal), cy)
    means2d = dc.stack([u, v], axis=1)
    colors = dc.clip(dc.add(dc.mul(sh, SH0), 0.5), 0.0, 1.0)

    mid = 0.5 * (a.data + c.data)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det.data, 0.0))
    radii = RADIUS_SIGMA * np.sqrt(np.maximum(lam_max, 0.0)) + 1.0
    return means2d, conic, opac, colors, radii


# -- tile compositing (custom op) --------------------------------------------------


def _tile_bins(means2d: np.ndarray, radii: np.ndarray, width: int, height: int):
    """Per-tile lists of Gaussian indices (already globally depth-sorted)."""
    n_ty = (height + TILE - 1) // TILE
    n_tx = (width + TILE - 1) // TILE
    bins = [[[] for _ in range(n_tx)] for _ in range(n_ty)]
    for k in range(means2d.shape[0]):
        u, v = means2d[k]
        r = radii[k]
        if u + r < 0 or u - r > width - 1 or v + r < 0 or v - r > height - 1:
            continue
        tx0 = max(int((u - r) // TILE), 0)
        tx1 = min(int((u + r) // TILE), n_tx - 1)
        ty0 = max(int((v - r) // TILE), 0)
        ty1 = min(int((v + r) // TILE), n_ty - 1)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                bins[ty][tx].append(k)
    return bins


def _tile_alphas(md, cn, op, sel, px, py):
    """(G,P) weights, alphas and the effective-alpha gradient gate."""
    dx = px[None, :] - md[sel, 0][:, None]
    dy = py[None, :] - md[sel, 1][:, None]
    q = cn[sel, 0][:, None] * dx * dx + 2.0 * cn[sel, 1][:, None] * dx * dy + cn[sel, 2][:, None] * dy * dy
    w = np.exp(-0.5 * q)
    live = w >= WEIGHT_CUTOFF
    raw = op[sel][:, None] * w
    alpha = np.where(live, np.minimum(raw, ALPHA_CEIL), 0.0)
    gate = live & (raw < ALPHA_CEIL)
    return dx, dy, w, alpha, gate


def composite_tiles(means2d: Tensor, conic: Tensor, opacity: Tensor, colors: Tensor,
                    radii: np.ndarray, width: int, height: int, background: np.ndarray):
    """Front-to-back compositing over 16x16 tiles; returns (pixels, alpha_map).

    Differentiable w.r.t. all four screen-space attribute tensors; the
    background and the depth order are constants.
    """
    md, cn, op, cl = means2d.data, conic.data, opacity.data, colors.data
    bg = np.asarray(background, dtype=np.float64)
    bins = _tile_bins(md, radii, width, height)
    img = np.zeros((height, width, 3), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)

    for ty, row in enumerate(bins):
        r0, r1 = ty * TILE, min((ty + 1) * TILE, height)
        for tx, sel in enumerate(row):
            c0, c1 = tx * TILE, min((tx + 1) * TILE, width)
            if not sel:
                img[r0:r1, c0:c1] = bg
                continue
            sel = np.asarray(sel)
            yy, xx = np.mgrid[r0:r1, c0:c1]
            px, py = xx.reshape(-1).astype(np.float64), yy.reshape(-1).astype(np.float64)
            _, _, _, alpha, _ = _tile_alphas(md, cn, op, sel, px, py)
            t_incl = np.cumprod(1.0 - alpha, axis=0)
            t_before = np.vstack([np.ones((1, alpha.shape[1])), t_incl[:-1]])
            acc = ((alpha * t_before)[:, :, None] * cl[sel][:, None, :]).sum(axis=0)
            t_fin = t_incl[-1]
            tile_img = acc + t_fin[:, None] * bg
            img[r0:r1, c0:c1] = tile_img.reshape(r1 - r0, c1 - c0, 3)
            trans[r0:r1, c0:c1] = t_fin.reshape(r1 - r0, c1 - c0)

    def backward(grad_img):
        g_md = np.zeros_like(md)
        g_cn = np.zeros_like(cn)
        g_op = np.zeros_like(op)
        g_cl = np.zeros_like(cl)
        for ty, row in enumerate(bins):
            r0, r1 = ty * TILE, min((ty + 1) * TILE, height)
            for tx, sel in enumerate(row):
                if not len(sel):
                    continue
                c0, c1 = tx * TILE, min((tx + 1) * TILE, width)
                sel = np.asarray(sel)
                yy, xx = np.mgrid[r0:r1, c0:c1]
                px, py = xx.reshape(-1).astype(np.float64), yy.reshape(-1).astype(np.float64)
                dx, dy, w, alpha, gate = _tile_alphas(md, cn, op, sel, px, py)
                t_incl = np.cumprod(1.0 - alpha, axis=0)
                t_before = np.vstack([np.ones((1, alpha.shape[1])), t_incl[:-1]])
                t_fin = t_incl[-1]
                g_px = grad_img[r0:r1, c0:c1].reshape(-1, 3)  # (P,3)

                contrib = (alpha * t_before)[:, :, None] * cl[sel][:, None, :]  # (G,P,3)
                # rest[i] = sum_{j>i} contrib[j] + bg * t_fin
                suffix = np.cumsum(contrib[::-1], axis=0)[::-1]
                rest = np.empty_like(contrib)
                rest[:-1] = suffix[1:]
                rest[-1] = 0.0
                rest = rest + (t_fin[:, None] * bg)[None, :, :]

                g_cl[sel] += ((alpha * t_before)[:, :, None] * g_px[None, :, :]).sum(axis=1)
                d_alpha = (g_px[None] * (t_before[:, :, None] * cl[sel][:, None, :]
                                         - rest / (1.0 - alpha)[:, :, None])).sum(axis=2)
                d_raw = d_alpha * gate  # through min(o*w, ceil) and the cutoff mask
                g_op[sel] += (d_raw * w).sum(axis=1)
                d_w = d_raw * op[sel][:, None]
                d_q = -0.5 * w * d_w
                g_cn[sel, 0] += (d_q * dx * dx).sum(axis=1)
                g_cn[sel, 1] += (d_q * 2.0 * dx * dy).sum(axis=1)
                g_cn[sel, 2] += (d_q * dy * dy).sum(axis=1)
                a_ = cn[sel, 0][:, None]
                b_ = cn[sel, 1][:, None]
                c_ = cn[sel, 2][:, None]
                g_md[sel, 0] += (d_q * -(2.0 * a_ * dx + 2.0 * b_ * dy)).sum(axis=1)
                g_md[sel, 1] += (d_q * -(2.0 * b_ * dx + 2.0 * c_ * dy)).sum(axis=1)
        return (g_md.astype(md.dtype), g_cn.astype(cn.dtype),
                g_op.astype(op.dtype), g_cl.astype(cl.dtype))

    pixels = dc.from_op(img.astype(md.dtype), (means2d, conic, opacity, colors), backward)
    return pixels, (1.0 - trans)


def render(g: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderedImage:
    """Splat a GaussianSet; differentiable w.r.t. all five attributes."""
    if g.count == 0:
        raise ValueError("cannot render an empty GaussianSet")
    bg = np.asarray(background, dtype=np.float64)
    proj = _project(g, cam)
    if proj is None:
        pix = np.broadcast_to(bg, (cam.height, cam.width, 3)).astype(g.centers.dtype)
        return RenderedImage(pixels=Tensor(pix.copy()), alpha=np.zeros((cam.height, cam.width)))
    means2d, conic, opac, colors, radii = proj
    pixels, alpha = composite_tiles(means2d, conic, opac, colors, radii, cam.width, cam.height, bg)
    return RenderedImage(pixels=pixels, alpha=alpha)


# -- independent oracle ------------------------------------------------------------


def render_naive(g: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> dict:
    """Per-pixel over-all-Gaussians compositor (forward only, plain numpy).

    Independent of the tiled path: no binning, no bounding boxes. Returns
    pixels, alpha, per-pixel composited weight sum and final transmittance.
    """
    q = np.asarray(g.rotation.data, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    r, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rm = np.empty((q.shape[0], 3, 3))
    rm[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rm[:, 0, 1] = 2 * (x * y - r * z)
    rm[:, 0, 2] = 2 * (x * z + r * y)
    rm[:, 1, 0] = 2 * (x * y + r * z)
    rm[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rm[:, 1, 2] = 2 * (y * z - r * x)
    rm[:, 2, 0] = 2 * (x * z - r * y)
    rm[:, 2, 1] = 2 * (y * z + r * x)
    rm[:, 2, 2] = 1 - 2 * (x * x + y * y)

    s = np.exp(np.asarray(g.scaling_raw.data, dtype=np.float64))
    rs = rm * s[:, None, :]
    cov3 = rs @ np.swapaxes(rs, 1, 2)

    w_rot, cam_pos = camera_basis(cam)
    focal, cx, cy = intrinsics(cam)
    t = (np.asarray(g.centers.data, dtype=np.float64) - cam_pos) @ w_rot.T
    keep = (t[:, 2] > cam.near) & (t[:, 2] < cam.far)
    idx = np.nonzero(keep)[0][np.argsort(t[keep, 2], kind="stable")]

    h_img, w_img = cam.height, cam.width
    img = np.zeros((h_img, w_img, 3))
    trans = np.ones((h_img, w_img))
    wsum = np.zeros((h_img, w_img))
    cols_px, rows_px = np.meshgrid(np.arange(w_img, dtype=np.float64),
                                   np.arange(h_img, dtype=np.float64))
    opac = np.asarray(g.opacity.data, dtype=np.float64).reshape(-1)
    sh = np.asarray(g.sh_dc.data, dtype=np.float64)

    lim_x = 1.3 * (cam.width / 2.0) / focal
    lim_y = 1.3 * (cam.height / 2.0) / focal
    for k in idx:
        tx, ty_, tz = t[k]
        cov_cam = w_rot @ cov3[k] @ w_rot.T
        xj = np.clip(tx / tz, -lim_x, lim_x) * tz
        yj = np.clip(ty_ / tz, -lim_y, lim_y) * tz
        jac = np.array([
            [focal / tz, 0.0, -focal * xj / (tz * tz)],
            [0.0, focal / tz, -focal * yj / (tz * tz)],
        ])
        cov2 = jac @ cov_cam @ jac.T + DILATION * np.eye(2)
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] * cov2[0, 1]
        if det < MIN_DET:
            continue
        conic = np.array([cov2[1, 1], -cov2[0, 1], cov2[0, 0]]) / det
        u = focal * tx / tz + cx
        v = focal * ty_ / tz + cy
        dx = cols_px - u
        dy = rows_px - v
        qf = conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
        w = np.exp(-0.5 * qf)
        live = w >= WEIGHT_CUTOFF
        alpha = np.where(live, np.minimum(opac[k] * w, ALPHA_CEIL), 0.0)
        color = np.clip(SH0 * sh[k] + 0.5, 0.0, 1.0)
        img += (trans * alpha)[:, :, None] * color
        wsum += trans * alpha
        trans = trans * (1.0 - alpha)

    img += trans[:, :, None] * np.asarray(background, dtype=np.float64)
    return {"pixels": img, "alpha": 1.0 - trans, "weight_sum": wsum, "transmittance": trans}


# -- image files -------------------------------------------------------------------


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.clip(pixels, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Binary PPM (P6) from float [0,1] HxWx3 pixels."""
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(to_uint8(pixels).tobytes())


def write_imgf(path, pixels: np.ndarray) -> None:
    """Raw dump: magic IMGF, W u32, H u32, RGB8 payload."""
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(b"IMGF")
        f.write(struct.pack("<II", w, h))
        f.write(to_uint8(pixels).tobytes())


def read_imgf(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"IMGF":
            raise ValueError(f"bad image magic {magic!r}, expected b'IMGF'")
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
        return data.reshape(h, w, 3).copy()
