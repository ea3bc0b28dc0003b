"""Child-to-parent capsule projections.

Children are a grid ``[B, c_i, a_i, H, W]``. Each parent type ``j`` owns a
kernel slice per child type, so a projection keeps the child axis separate:
the result is ``[B, c_i, c_j, a_j, H', W']`` and routing combines children
afterwards.

The deformable variant reads each kernel tap at a learned fractional offset
(one ``(dx, dy)`` per parent type and tap) through bilinear interpolation with
zero padding. Offsets are static parameters, so the interpolation is a fixed
linear map per parent type. ``sampling_matrices`` spells that map out as
sparse matrices; the training path uses the equivalent shifted-window form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, ShapeError, Tensor, as_tensor


@dataclass(frozen=True)
class LayerConfig:
    c_i: int
    a_i: int
    c_j: int
    a_j: int
    k: int = 3
    H: int = 16
    W: int = 16
    stride: int = 1

    def __post_init__(self):
        for field in ("c_i", "a_i", "c_j", "a_j", "k", "H", "W", "stride"):
            if getattr(self, field) <= 0:
                raise ValueError(f"LayerConfig.{field} must be positive, got {getattr(self, field)}")
        if self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.k}")

    @property
    def padding(self) -> int:
        return (self.k - 1) // 2

    @property
    def out_hw(self) -> tuple[int, int]:
        return (self.H - 1) // self.stride + 1, (self.W - 1) // self.stride + 1

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        return (self.c_j, self.a_j, self.c_i, self.a_i, self.k, self.k)

    @property
    def offset_shape(self) -> tuple[int, ...]:
        return (self.c_j, self.k, self.k, 2)


def init_projection_kernel(cfg: LayerConfig, rng: np.random.Generator) -> np.ndarray:
    fan_in = cfg.c_i * cfg.a_i * cfg.k * cfg.k
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=cfg.kernel_shape)


def init_offsets(cfg: LayerConfig) -> np.ndarray:
    return np.zeros(cfg.offset_shape, dtype=DTYPE)


def _check(children: Tensor, kernel: Tensor, cfg: LayerConfig) -> tuple[Tensor, bool]:
    batched = children.ndim == 5
    if not batched:
        if children.ndim != 4:
            raise ShapeError(f"children must be [c_i, a_i, H, W] or batched, got {children.shape}")
        children = children.reshape((1,) + children.shape)
    _, c_i, a_i, H, W = children.shape
    if (c_i, a_i, H, W) != (cfg.c_i, cfg.a_i, cfg.H, cfg.W):
        raise ShapeError(f"children shape {children.shape[1:]} does not match config "
                         f"({cfg.c_i}, {cfg.a_i}, {cfg.H}, {cfg.W})")
    if kernel.shape != cfg.kernel_shape:
        raise ShapeError(f"kernel shape {kernel.shape} does not match config {cfg.kernel_shape}")
    return children, batched


def _kernel_matrix(kernel: np.ndarray, cfg: LayerConfig) -> np.ndarray:
    # [c_j, a_j, c_i, a_i, k, k] -> [c_j, c_i, a_j, a_i*k*k]
    return kernel.transpose(0, 2, 1, 3, 4, 5).reshape(cfg.c_j, cfg.c_i, cfg.a_j, cfg.a_i * cfg.k * cfg.k)


def _finish(out: Tensor, batched: bool) -> Tensor:
    return out if batched else out.reshape(out.shape[1:])


def conv_capsule_project(children, kernel, cfg: LayerConfig) -> Tensor:
    """Locally-constrained projection over a fixed k x k window."""
    children, kernel = as_tensor(children), as_tensor(kernel)
    children, batched = _check(children, kernel, cfg)
    B = children.shape[0]
    k, s, p = cfg.k, cfg.stride, cfg.padding
    Ho, Wo = cfg.out_hw
    L = Ho * Wo
    xp = np.pad(children.data, ((0, 0), (0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((B, cfg.c_i, cfg.a_i, k, k, Ho, Wo), dtype=DTYPE)
    for u in range(k):
        for v in range(k):
            cols[:, :, :, u, v] = xp[:, :, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s]
    cols = cols.reshape(B, cfg.c_i, cfg.a_i * k * k, L)
    wm = _kernel_matrix(kernel.data, cfg)
    out = np.stack([np.matmul(wm[j][None], cols) for j in range(cfg.c_j)], axis=2)
    out_data = out.reshape(B, cfg.c_i, cfg.c_j, cfg.a_j, Ho, Wo)

    def backward(g):
        g = g.reshape(B, cfg.c_i, cfg.c_j, cfg.a_j, L)
        if kernel.requires_grad:
            gw = np.stack([np.matmul(g[:, :, j], np.swapaxes(cols, -1, -2)).sum(axis=0)
                           for j in range(cfg.c_j)])  # [c_j, c_i, a_j, a_i*k*k]
            gw = gw.reshape(cfg.c_j, cfg.c_i, cfg.a_j, cfg.a_i, k, k).transpose(0, 2, 1, 3, 4, 5)
            kernel._accum(gw)
        if children.requires_grad:
            gcols = sum(np.matmul(np.swapaxes(wm[j], -1, -2)[None], g[:, :, j]) for j in range(cfg.c_j))
            gcols = gcols.reshape(B, cfg.c_i, cfg.a_i, k, k, Ho, Wo)
            gxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gxp[:, :, :, u:u + s * (Ho - 1) + 1:s, v:v + s * (Wo - 1) + 1:s] += gcols[:, :, :, u, v]
            children._accum(gxp[:, :, :, p:p + cfg.H, p:p + cfg.W])

    return _finish(Tensor(out_data, _parents=(children, kernel), _backward=backward), batched)


def _bilinear_corners(x: np.ndarray, y: np.ndarray):
    """Four neighbor (row, col, weight, d/dx, d/dy) tuples for each point."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return [
        (y0, x0, (1 - fy) * (1 - fx), -(1 - fy), -(1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx, (1 - fy), -fx),
        (y0 + 1, x0, fy * (1 - fx), -fy, (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx, fy, fx),
    ]


def sampling_matrices(offsets: np.ndarray, cfg: LayerConfig):
    """Sparse interpolation maps for each parent type.

    Returns three lists of length ``c_j`` holding csr matrices of shape
    ``[k*k*H'*W', H*W]``: the sampling weights and their derivatives with
    respect to the x and y offset of the tap that produced each row.
    """
    import scipy.sparse as sp  # reference path only; keeps the CLI import light

    k, s, p = cfg.k, cfg.stride, cfg.padding
    Ho, Wo = cfg.out_hw
    L = Ho * Wo
    oy, ox = np.mgrid[0:Ho, 0:Wo]
    oy = (oy * s).reshape(-1).astype(DTYPE)
    ox = (ox * s).reshape(-1).astype(DTYPE)
    shape = (k * k * L, cfg.H * cfg.W)
    mats, dxs, dys = [], [], []
    for j in range(cfg.c_j):
        rows, cols, w, wx, wy = [], [], [], [], []
        for u in range(k):
            for v in range(k):
                tap = u * k + v
                x = ox + (v - p) + offsets[j, u, v, 0]
                y = oy + (u - p) + offsets[j, u, v, 1]
                row_ids = tap * L + np.arange(L)
                for r, c, wt, dx, dy in _bilinear_corners(x, y):
                    ok = (r >= 0) & (r < cfg.H) & (c >= 0) & (c < cfg.W)
                    rows.append(row_ids[ok])
                    cols.append(r[ok] * cfg.W + c[ok])
                    w.append(np.broadcast_to(wt, x.shape)[ok])
                    wx.append(np.broadcast_to(dx, x.shape)[ok])
                    wy.append(np.broadcast_to(dy, x.shape)[ok])
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        mats.append(sp.csr_matrix((np.concatenate(w), (rows, cols)), shape=shape))
        dxs.append(sp.csr_matrix((np.concatenate(wx), (rows, cols)), shape=shape))
        dys.append(sp.csr_matrix((np.concatenate(wy), (rows, cols)), shape=shape))
    return mats, dxs, dys


def _tap_corners(offsets_j: np.ndarray, cfg: LayerConfig):
    """Per tap: four (row shift, col shift, weight, d/dx, d/dy) corner terms.

    An offset is shared by every output position, so a tap's fractional part
    is constant and the bilinear read is four integer-shifted copies of the
    grid with scalar weights.
    """
    k, p = cfg.k, cfg.padding
    taps = []
    for u in range(k):
        for v in range(k):
            x = np.array((v - p) + offsets_j[u, v, 0])
            y = np.array((u - p) + offsets_j[u, v, 1])
            taps.append([(int(r), int(c), float(w), float(dx), float(dy))
                         for r, c, w, dx, dy in _bilinear_corners(x, y)])
    return taps


def deform_capsule_project(children, kernel, offsets, cfg: LayerConfig) -> Tensor:
    """Projection whose taps sample children at learned fractional offsets."""
    children, kernel, offsets = as_tensor(children), as_tensor(kernel), as_tensor(offsets)
    children, batched = _check(children, kernel, cfg)
    if offsets.shape != cfg.offset_shape:
        raise ShapeError(f"offset shape {offsets.shape} does not match config {cfg.offset_shape}")
    B = children.shape[0]
    k, s = cfg.k, cfg.stride
    Ho, Wo = cfg.out_hw
    L = Ho * Wo
    kk = k * k
    corners = [_tap_corners(offsets.data[j], cfg) for j in range(cfg.c_j)]
    # pad wide enough that every shifted window stays inside the array;
    # windows that land entirely in the padding read zeros
    reach = max(max(abs(r), abs(c)) for taps in corners for tap in taps for r, c, *_ in tap)
    m = reach + 1
    xp = np.pad(children.data, ((0, 0), (0, 0), (0, 0), (m, m), (m, m)))
    Hp, Wp = xp.shape[-2:]

    def window(r, c):
        r0, c0 = m + r, m + c
        if r0 < 0 or c0 < 0 or r0 + s * (Ho - 1) >= Hp or c0 + s * (Wo - 1) >= Wp:
            return None
        return (..., slice(r0, r0 + s * (Ho - 1) + 1, s), slice(c0, c0 + s * (Wo - 1) + 1, s))

    wm = _kernel_matrix(kernel.data, cfg)
    cols, outs = [], []
    for j in range(cfg.c_j):
        cj = np.zeros((B, cfg.c_i, cfg.a_i, kk, Ho, Wo), dtype=DTYPE)
        for t, tap in enumerate(corners[j]):
            for r, c, w, _, _ in tap:
                win = window(r, c)
                if w != 0.0 and win is not None:
                    cj[:, :, :, t] += w * xp[win]
        cj = cj.reshape(B, cfg.c_i, cfg.a_i * kk, L)
        cols.append(cj)
        outs.append(np.matmul(wm[j][None], cj))
    out_data = np.stack(outs, axis=2).reshape(B, cfg.c_i, cfg.c_j, cfg.a_j, Ho, Wo)

    def backward(g):
        g = g.reshape(B, cfg.c_i, cfg.c_j, cfg.a_j, L)
        gw = np.empty((cfg.c_j, cfg.c_i, cfg.a_j, cfg.a_i * kk)) if kernel.requires_grad else None
        gxp = np.zeros_like(xp) if children.requires_grad else None
        goff = np.zeros(cfg.offset_shape) if offsets.requires_grad else None
        for j in range(cfg.c_j):
            gj = g[:, :, j]
            if gw is not None:
                gw[j] = np.matmul(gj, np.swapaxes(cols[j], -1, -2)).sum(axis=0)
            if gxp is None and goff is None:
                continue
            gcols = np.matmul(np.swapaxes(wm[j], -1, -2)[None], gj)
            gcols = gcols.reshape(B, cfg.c_i, cfg.a_i, kk, Ho, Wo)
            for t, tap in enumerate(corners[j]):
                gt = gcols[:, :, :, t]
                for r, c, w, dx, dy in tap:
                    win = window(r, c)
                    if win is None:
                        continue
                    if gxp is not None and w != 0.0:
                        gxp[win] += w * gt
                    if goff is not None:
                        dot = float(np.vdot(gt, xp[win]))
                        goff[j, t // k, t % k, 0] += dx * dot
                        goff[j, t // k, t % k, 1] += dy * dot
        if gw is not None:
            kernel._accum(gw.reshape(cfg.c_j, cfg.c_i, cfg.a_j, cfg.a_i, k, k).transpose(0, 2, 1, 3, 4, 5))
        if gxp is not None:
            children._accum(gxp[..., m:m + cfg.H, m:m + cfg.W])
        if goff is not None:
            offsets._accum(goff)

    out = Tensor(out_data, _parents=(children, kernel, offsets), _backward=backward)
    return _finish(out, batched)


def deform_project_sparse(children: np.ndarray, kernel: np.ndarray, offsets: np.ndarray,
                          cfg: LayerConfig) -> np.ndarray:
    """Forward-only reference built from explicit interpolation matrices."""
    children = np.asarray(children, dtype=DTYPE)
    B = children.shape[0]
    Ho, Wo = cfg.out_hw
    kk = cfg.k * cfg.k
    X = children.reshape(B * cfg.c_i * cfg.a_i, cfg.H * cfg.W)
    mats, _, _ = sampling_matrices(offsets, cfg)
    wm = _kernel_matrix(np.asarray(kernel), cfg)
    outs = []
    for j in range(cfg.c_j):
        cj = np.asarray((mats[j] @ X.T).T).reshape(B, cfg.c_i, cfg.a_i * kk, Ho * Wo)
        outs.append(np.matmul(wm[j][None], cj))
    return np.stack(outs, axis=2).reshape(B, cfg.c_i, cfg.c_j, cfg.a_j, Ho, Wo)


def bilinear_sample(grid, x, y, type_i: int, atom: int) -> Tensor:
    """Bilinearly interpolated child value at fractional (col ``x``, row ``y``).

    ``grid`` is ``[c_i, a_i, H, W]``; locations outside the grid read as zero.
    Differentiable with respect to the grid values and both coordinates.
    """
    grid, x, y = as_tensor(grid), as_tensor(x), as_tensor(y)
    H, W = grid.shape[-2:]
    plane = grid.data[type_i, atom]
    xv, yv = float(x.data), float(y.data)
    total = gx = gy = 0.0
    taps = []
    for r, c, wt, dx, dy in _bilinear_corners(np.array(xv), np.array(yv)):
        r, c = int(r), int(c)
        if 0 <= r < H and 0 <= c < W:
            val = plane[r, c]
            total += float(wt) * val
            gx += float(dx) * val
            gy += float(dy) * val
            taps.append((r, c, float(wt)))

    def backward(g):
        g = float(g)
        if grid.requires_grad:
            full = np.zeros_like(grid.data)
            for r, c, wt in taps:
                full[type_i, atom, r, c] += g * wt
            grid._accum(full)
        if x.requires_grad:
            x._accum(np.full(x.shape, g * gx))
        if y.requires_grad:
            y._accum(np.full(y.shape, g * gy))

    return Tensor(np.array(total), _parents=(grid, x, y), _backward=backward)


PARAM_MODES = ("fully_connected", "conv_caps", "deform_caps", "splitcaps_detect", "splitcaps_imagenet")
BYTES_PER_VALUE = 4


def param_count(mode: str, cfg: LayerConfig | None = None, K: int | None = None,
                batch: int = 32) -> tuple[int, int]:
    """Closed-form parameter count and intermediate-representation bytes.

    ``fully_connected``  H*W*c_i*a_i*c_j*a_j
    ``conv_caps``        k^2*a_i*c_j*a_j
    ``deform_caps``      2*k^2*a_i*c_j*a_j
    ``splitcaps_*``      deform count with one parent type per class (c_j = K)

    Intermediates are ``batch * (H*W for detection) * c_i * c_j * a_j * 4``.
    """
    if mode not in PARAM_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(PARAM_MODES)}")
    if cfg is None:
        raise ValueError(f"mode {mode!r} needs a layer config")
    c_j = cfg.c_j
    if mode.startswith("splitcaps"):
        if K is None:
            raise ValueError(f"mode {mode!r} needs the class count K")
        c_j = K
    if mode == "fully_connected":
        params = cfg.H * cfg.W * cfg.c_i * cfg.a_i * c_j * cfg.a_j
    elif mode == "conv_caps":
        params = cfg.k ** 2 * cfg.a_i * c_j * cfg.a_j
    else:
        params = 2 * cfg.k ** 2 * cfg.a_i * c_j * cfg.a_j
    grid = cfg.H * cfg.W if mode == "splitcaps_detect" else 1
    intermediate = batch * grid * cfg.c_i * c_j * cfg.a_j * BYTES_PER_VALUE
    return params, intermediate


def paper_scenarios() -> list[tuple[str, str, LayerConfig, int | None]]:
    """The five worked parameter/memory examples as (label, mode, cfg, K)."""
    base = LayerConfig(c_i=32, a_i=8, c_j=10, a_j=16, k=5, H=128, W=128)
    return [
        ("fully-connected capsules, 128x128 grid", "fully_connected", base, None),
        ("deformable capsules, 10 classes", "deform_caps", base, None),
        ("convolutional capsules, 10 classes", "conv_caps", base, None),
        ("per-class deformable capsules, COCO detection", "splitcaps_detect", base, 80),
        ("per-class deformable capsules, ImageNet", "splitcaps_imagenet", base, 1000),
    ]
