"""Dense feature grids, resampling, view warps and gradient utilities.

Every grid in this package is a ``torch.Tensor`` laid out as
``(..., height, width, channels)``. Leading dimensions are treated as a batch.
Sampling uses half-pixel centers without corner alignment everywhere
(resample, warp and downsample agree on this).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

Parameter = torch.nn.Parameter


def as_grid(data, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Convert array-like data to a grid tensor and validate its shape."""
    t = torch.as_tensor(data, dtype=dtype)
    check_grid(t)
    return t


def check_grid(x: torch.Tensor, name: str = "grid") -> None:
    if x.dim() < 3:
        raise ValueError(f"{name} must have shape (..., H, W, C), got {tuple(x.shape)}")
    if any(s == 0 for s in x.shape):
        raise ValueError("empty grid")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def to_nchw(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Flatten leading dims and move channels first. Returns the lead shape too."""
    lead = tuple(x.shape[:-3])
    h, w, c = x.shape[-3:]
    return x.reshape(-1, h, w, c).permute(0, 3, 1, 2), lead


def from_nchw(x: torch.Tensor, lead: tuple[int, ...]) -> torch.Tensor:
    x = x.permute(0, 2, 3, 1)
    return x.reshape(*lead, *x.shape[1:])


def bilinear_resample(src: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinearly resample ``src`` to ``out_h x out_w`` (half-pixel centers).

    Sample coordinates outside the source clamp to the edge.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if src.dim() < 3 or any(s == 0 for s in src.shape):
        raise ValueError("empty grid")
    h, w = src.shape[-3:-1]
    if (h, w) == (out_h, out_w):
        return src.clone()
    x, lead = to_nchw(src)
    y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return from_nchw(y, lead)


def area_downsample(src: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Box-filter ``src`` down by an integer ratio."""
    h, w = src.shape[-3:-1]
    if (h, w) == (out_h, out_w):
        return src.clone()
    if h % out_h or w % out_w:
        raise ValueError(f"cannot area-downsample {h}x{w} to {out_h}x{out_w}")
    x, lead = to_nchw(src)
    y = F.avg_pool2d(x, kernel_size=(h // out_h, w // out_w))
    return from_nchw(y, lead)


def resize(src: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Area-average when the ratio is an integer shrink, bilinear otherwise."""
    h, w = src.shape[-3:-1]
    if out_h <= h and out_w <= w and h % out_h == 0 and w % out_w == 0:
        return area_downsample(src, out_h, out_w)
    return bilinear_resample(src, out_h, out_w)


# ---------------------------------------------------------------------------
# View transforms
# ---------------------------------------------------------------------------

_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _homography_from_corners(dst: np.ndarray) -> np.ndarray:
    """Solve the 3x3 homography mapping the unit-square corners onto ``dst``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(_CORNERS, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    h = np.linalg.solve(np.array(rows), np.array(rhs))
    return np.append(h, 1.0).reshape(3, 3)


@dataclass(frozen=True)
class ViewTransform:
    """A parametric 2D view warp in normalized coordinates ([-1, 1] per axis).

    The forward map takes source coordinates to output coordinates as
    ``perspective @ shift @ rotation @ scale @ flip``. ``scale > 1`` zooms in.
    ``perspective`` holds (dx, dy) displacements of the four corners
    (top-left, top-right, bottom-right, bottom-left).
    """

    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)
    hflip: bool = False
    rotation: float = 0.0
    perspective: tuple[float, ...] = field(default=(0.0,) * 8)

    def __post_init__(self):
        if len(self.perspective) != 8:
            raise ValueError("perspective needs 8 corner offsets")

    @property
    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and tuple(self.shift) == (0.0, 0.0)
            and not self.hflip
            and self.rotation == 0.0
            and not any(self.perspective)
        )

    def matrix(self) -> np.ndarray:
        flip = np.diag([-1.0 if self.hflip else 1.0, 1.0, 1.0])
        scale = np.diag([self.scale, self.scale, 1.0])
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        shift = np.array([[1.0, 0.0, self.shift[0]], [0.0, 1.0, self.shift[1]], [0.0, 0.0, 1.0]])
        if any(self.perspective):
            persp = _homography_from_corners(_CORNERS + np.reshape(self.perspective, (4, 2)))
        else:
            persp = np.eye(3)
        return persp @ shift @ rot @ scale @ flip


def _pixel_centers(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def warp_apply(src: torch.Tensor, t: ViewTransform, out_h: int, out_w: int) -> torch.Tensor:
    """Inverse-warp ``src`` through ``t`` with bilinear sampling, edge-clamped."""
    if src.dim() < 3 or any(s == 0 for s in src.shape):
        raise ValueError("empty grid")
    m = t.matrix()
    det = np.linalg.det(m)
    if not np.isfinite(det) or abs(det) < 1e-12:
        raise ValueError("degenerate transform")
    h, w = src.shape[-3:-1]
    if t.is_identity and (h, w) == (out_h, out_w):
        return src.clone()
    inv = np.linalg.inv(m)
    gy, gx = np.meshgrid(_pixel_centers(out_h), _pixel_centers(out_w), indexing="ij")
    pts = np.stack([gx, gy, np.ones_like(gx)], axis=-1) @ inv.T
    denom = pts[..., 2:3]
    if np.any(np.abs(denom) < 1e-12):
        raise ValueError("degenerate transform")
    coords = pts[..., :2] / denom
    x, lead = to_nchw(src)
    grid = torch.as_tensor(coords, dtype=x.dtype).expand(x.shape[0], out_h, out_w, 2)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return from_nchw(y, lead)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def backward(loss: torch.Tensor) -> None:
    """Accumulate reverse-mode gradients of a scalar ``loss`` into its leaves."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.zero_()


@dataclass
class GradCheckResult:
    name: str
    max_abs_error: float
    rel_error: float
    n_entries: int

    @property
    def ok(self) -> bool:
        return self.rel_error < 1e-4


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[tuple[str, torch.Tensor]],
    step: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[GradCheckResult]:
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    The relative error of a tensor is the largest absolute entry discrepancy
    divided by the largest gradient magnitude (analytic or numeric).
    """
    for _, p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    results = []
    for name, p in params:
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = np.sort(rng.choice(idx, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = fn().item()
                flat[i] = orig - step
                minus = fn().item()
                flat[i] = orig
                numeric[k] = (plus - minus) / (2 * step)
        a = analytic.view(-1).numpy()[idx]
        err = np.abs(a - numeric)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        results.append(GradCheckResult(name, float(err.max(initial=0.0)), float(err.max(initial=0.0) / scale), int(idx.size)))
    return results


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


def gather_windows(
    x: torch.Tensor, size: int, stride: int = 1, pad: tuple[int, int] | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gather ``size x size`` windows from an ``(N, H, W, C)`` tensor, zero padded.

    ``pad`` is (before, after) padding per spatial axis; the default centers an
    odd window on each pixel. Returns ``(windows, valid)`` with windows shaped
    ``(N, Ho, Wo, C, size*size)`` and ``valid`` a boolean ``(Ho, Wo, size*size)``
    mask of in-bounds members. Members are ordered row-major within the window.
    """
    if pad is None:
        pad = ((size - 1) // 2, size - 1 - (size - 1) // 2)
    n, h, w, c = x.shape
    before, after = pad
    xp = F.pad(x, (0, 0, before, after, before, after))
    win = xp.unfold(1, size, stride).unfold(2, size, stride)
    ho, wo = win.shape[1:3]
    win = win.reshape(n, ho, wo, c, size * size)
    ones = F.pad(torch.ones(1, h, w, 1, dtype=x.dtype), (0, 0, before, after, before, after))
    valid = ones.unfold(1, size, stride).unfold(2, size, stride).reshape(ho, wo, size * size) > 0.5
    return win, valid


def window_offsets(size: int) -> np.ndarray:
    """(dy, dx) of each window member relative to the window center."""
    r = np.arange(size) - (size - 1) / 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


# ---------------------------------------------------------------------------
# Windowed dot / mix primitives
#
# Both loop over window offsets with shifted views of a padded map instead of
# materializing the (..., C, K) window tensor; the hand-written backward passes
# avoid the scatter-add that autograd would otherwise emit for unfold.
# ---------------------------------------------------------------------------


def _window_geometry(h: int, w: int, size: int, stride: int, pad):
    if pad is None:
        pad = ((size - 1) // 2, size - 1 - (size - 1) // 2)
    before, after = pad
    ho = (h + before + after - size) // stride + 1
    wo = (w + before + after - size) // stride + 1
    return before, after, ho, wo


def _shifted(xp: torch.Tensor, dy: int, dx: int, ho: int, wo: int, stride: int) -> torch.Tensor:
    return xp[:, dy:dy + (ho - 1) * stride + 1:stride, dx:dx + (wo - 1) * stride + 1:stride]


class _WindowDot(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, kmap, size):
        n, h, w, _ = q.shape
        before, after, ho, wo = _window_geometry(h, w, size, 1, None)
        kp = F.pad(kmap, (0, 0, before, after, before, after))
        out = q.new_empty(n, ho, wo, size * size)
        for i in range(size * size):
            dy, dx = divmod(i, size)
            torch.linalg.vecdot(q, _shifted(kp, dy, dx, ho, wo, 1), out=out[..., i])
        ctx.save_for_backward(q, kmap)
        ctx.size = size
        return out

    @staticmethod
    def backward(ctx, g):
        q, kmap = ctx.saved_tensors
        size = ctx.size
        n, h, w, _ = q.shape
        before, after, ho, wo = _window_geometry(h, w, size, 1, None)
        kp = F.pad(kmap, (0, 0, before, after, before, after))
        gq = torch.zeros_like(q) if ctx.needs_input_grad[0] else None
        gkp = torch.zeros_like(kp) if ctx.needs_input_grad[1] else None
        for i in range(size * size):
            dy, dx = divmod(i, size)
            gi = g[..., i:i + 1]
            if gq is not None:
                gq.addcmul_(gi, _shifted(kp, dy, dx, ho, wo, 1))
            if gkp is not None:
                _shifted(gkp, dy, dx, ho, wo, 1).addcmul_(gi, q)
        if gkp is not None:
            gkp = gkp[:, before:before + h, before:before + w]
        return gq, gkp, None


def _to_phases(v: torch.Tensor, before: int, after: int, stride: int) -> torch.Tensor:
    """Pad, then split into stride phases: ``(s, s, N, Hq, Wq, C)``, contiguous.

    Phase ``(a, b)`` holds padded rows ``a, a+s, ...`` and columns ``b, b+s, ...``,
    so a strided window offset becomes a contiguous slice of one phase.
    """
    n, h, w, c = v.shape
    s = stride
    hq, wq = -(-(h + before + after) // s), -(-(w + before + after) // s)
    vp = F.pad(v, (0, 0, before, wq * s - w - before, before, hq * s - h - before))
    return vp.reshape(n, hq, s, wq, s, c).permute(2, 4, 0, 1, 3, 5).contiguous()


def _from_phases(p: torch.Tensor, before: int, h: int, w: int) -> torch.Tensor:
    s, _, n, hq, wq, c = p.shape
    vp = p.permute(2, 3, 0, 4, 1, 5).reshape(n, hq * s, wq * s, c)
    return vp[:, before:before + h, before:before + w]


def _phase_slice(p: torch.Tensor, dy: int, dx: int, ho: int, wo: int) -> torch.Tensor:
    s = p.shape[0]
    return p[dy % s, dx % s, :, dy // s:dy // s + ho, dx // s:dx // s + wo]


class _WindowMix(torch.autograd.Function):
    @staticmethod
    def forward(ctx, weights, v, size, stride, pad):
        n, h, w, c = v.shape
        before, after, ho, wo = _window_geometry(h, w, size, stride, pad)
        ph = _to_phases(v, before, after, stride)
        out = v.new_zeros(n, ho, wo, c)
        for i in range(size * size):
            dy, dx = divmod(i, size)
            out.addcmul_(weights[..., i:i + 1], _phase_slice(ph, dy, dx, ho, wo))
        ctx.save_for_backward(weights, v)
        ctx.geom = (size, stride, pad)
        return out

    @staticmethod
    def backward(ctx, g):
        weights, v = ctx.saved_tensors
        size, stride, pad = ctx.geom
        n, h, w, c = v.shape
        before, after, ho, wo = _window_geometry(h, w, size, stride, pad)
        ph = _to_phases(v, before, after, stride)
        g = g.contiguous()
        gw = torch.empty_like(weights) if ctx.needs_input_grad[0] else None
        gph = torch.zeros_like(ph) if ctx.needs_input_grad[1] else None
        for i in range(size * size):
            dy, dx = divmod(i, size)
            if gw is not None:
                torch.linalg.vecdot(g, _phase_slice(ph, dy, dx, ho, wo), out=gw[..., i])
            if gph is not None:
                _phase_slice(gph, dy, dx, ho, wo).addcmul_(weights[..., i:i + 1], g)
        gv = _from_phases(gph, before, h, w) if gph is not None else None
        return gw, gv, None, None, None


def window_dot(q: torch.Tensor, kmap: torch.Tensor, size: int) -> torch.Tensor:
    """``out[n, y, x, k] = q[n, y, x] . kmap[n, y + dy_k, x + dx_k]`` over a centred odd window.

    Out-of-bounds members read zeros; combine with :func:`window_valid` to mask them.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {size}")
    if q.shape[:-1] != kmap.shape[:-1] or q.shape[-1] != kmap.shape[-1]:
        raise ValueError(f"shape mismatch: {tuple(q.shape)} vs {tuple(kmap.shape)}")
    return _WindowDot.apply(q.contiguous(), kmap.contiguous(), size)


def window_mix(weights: torch.Tensor, v: torch.Tensor, size: int, stride: int = 1,
               pad: tuple[int, int] | None = None) -> torch.Tensor:
    """``out[n, y, x] = sum_k weights[n, y, x, k] * v[n, y*stride - before + dy_k, ...]``.

    Window geometry follows :func:`gather_windows`; out-of-bounds members read zeros.
    """
    n, h, w, _ = v.shape
    _, _, ho, wo = _window_geometry(h, w, size, stride, pad)
    if weights.shape != (n, ho, wo, size * size):
        raise ValueError(f"weights shape {tuple(weights.shape)} != {(n, ho, wo, size * size)}")
    return _WindowMix.apply(weights.contiguous(), v.contiguous(), size, stride, pad)


def window_valid(h: int, w: int, size: int, stride: int = 1, pad: tuple[int, int] | None = None) -> torch.Tensor:
    """Boolean ``(Ho, Wo, size*size)`` mask of in-bounds window members."""
    _, valid = gather_windows(torch.ones(1, h, w, 1, dtype=DTYPE), size, stride, pad)
    return valid
