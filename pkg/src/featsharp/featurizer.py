"""Frozen toy featurizers, the learnable de-bias buffer and PHI-S normalization.

The toy encoders stand in for pretrained ViTs. Each has behaviour that can be
checked analytically:

* ``patch_linear`` maps each non-overlapping p x p patch through one fixed
  affine map, so tiling at patch-aligned boundaries is exact.
* ``smooth_conv`` blurs the image, applies a pointwise projection and ``tanh``,
  then averages over each patch. The blur leaks context across tile borders.
* ``wrapped`` adds a fixed position-dependent bias ``B`` to an inner encoder,
  mimicking the positional artifacts of real ViTs.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg
import torch

from .numerics import DTYPE, bilinear_resample, check_grid

KINDS = ("patch_linear", "smooth_conv", "wrapped")


@dataclass(frozen=True)
class FeaturizerSpec:
    kind: str = "smooth_conv"
    patch: int = 4
    channels: int = 16
    input_resolution: int = 64
    seed: int = 0
    # only used by ``wrapped``
    inner: str = "smooth_conv"
    bias_scale: float = 0.5
    blur_sigma: float = 1.5
    max_resolution: int = 1024

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown featurizer kind {self.kind!r}")
        if self.kind == "wrapped" and self.inner == "wrapped":
            raise ValueError("wrapped featurizer cannot wrap itself")
        if self.patch < 1 or self.channels < 1 or self.input_resolution < 1:
            raise ValueError("patch, channels and input_resolution must be positive")
        if self.input_resolution % self.patch:
            raise ValueError("input_resolution must be a multiple of patch")

    @property
    def grid_side(self) -> int:
        return self.input_resolution // self.patch

    def to_dict(self) -> dict:
        return asdict(self)


class Featurizer:
    """Immutable frozen encoder built deterministically from a spec."""

    def __init__(self, spec: FeaturizerSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        kind = spec.inner if spec.kind == "wrapped" else spec.kind
        self._kind = kind
        p, c = spec.patch, spec.channels
        if kind == "patch_linear":
            fan_in = p * p * 3
            self.weight = torch.as_tensor(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, c)), dtype=DTYPE)
            self.bias = torch.as_tensor(rng.normal(0, 0.1, c), dtype=DTYPE)
        else:
            self.weight = torch.as_tensor(rng.normal(0, 1.5, (3, c)), dtype=DTYPE)
            self.bias = torch.as_tensor(rng.normal(0, 0.2, c), dtype=DTYPE)
            self.blur = gaussian_kernel1d(spec.blur_sigma)
        if spec.kind == "wrapped":
            n = spec.grid_side
            self.position_bias = torch.as_tensor(
                rng.normal(0, spec.bias_scale, (n, n, c)), dtype=DTYPE
            )
        else:
            self.position_bias = None

    def __call__(self, image: torch.Tensor, resolution: int | None = None) -> torch.Tensor:
        return featurize(self, image, resolution)

    @property
    def clean(self) -> "Featurizer":
        """The same encoder without the injected position bias."""
        if self.position_bias is None:
            return self
        out = object.__new__(Featurizer)
        out.__dict__.update(self.__dict__)
        out.position_bias = None
        return out


def gaussian_kernel1d(sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return torch.as_tensor(k / k.sum(), dtype=DTYPE)


@functools.lru_cache(maxsize=32)
def _blur_matrix(n: int, k1d: tuple[float, ...]) -> torch.Tensor:
    """(n, n) operator of a 1-D blur with edge replication folded in."""
    r = (len(k1d) - 1) // 2
    m = np.zeros((n, n))
    rows = np.arange(n)
    for t, kt in enumerate(k1d):
        np.add.at(m, (rows, np.clip(rows + t - r, 0, n - 1)), kt)
    return torch.as_tensor(m, dtype=DTYPE)


def _blur(x: torch.Tensor, k1d: torch.Tensor) -> torch.Tensor:
    """Separable blur of an ``(..., H, W, C)`` tensor with edge replication."""
    key = tuple(k1d.tolist())
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    x = (_blur_matrix(h, key) @ x.reshape(*lead, h, w * c)).reshape(*lead, h, w, c)
    return _blur_matrix(w, key) @ x


def featurize(f: Featurizer, image: torch.Tensor, resolution: int | None = None) -> torch.Tensor:
    """Run the frozen encoder on an ``(..., R, R, 3)`` image.

    ``resolution`` defaults to the encoder's native input resolution; other multiples of
    the patch size are accepted when passed explicitly (used by the over-tiling
    analysis). The image is never resized here.
    """
    spec = f.spec
    res = spec.input_resolution if resolution is None else resolution
    if res % spec.patch or res > spec.max_resolution:
        raise ValueError(f"unsupported resolution {res}")
    if image.dim() < 3 or tuple(image.shape[-3:]) != (res, res, 3):
        raise ValueError(f"resolution mismatch: expected ({res}, {res}, 3), got {tuple(image.shape[-3:])}")
    check_grid(image, "image")
    p = spec.patch
    n = res // p
    lead = tuple(image.shape[:-3])
    if f._kind == "patch_linear":
        x = image.reshape(-1, n, p, n, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(-1, n, n, p * p * 3)
        out = x @ f.weight + f.bias
        out = out.reshape(*lead, n, n, spec.channels)
    else:
        x = torch.tanh((_blur(image, f.blur) - 0.5) @ f.weight + f.bias)
        out = x.reshape(*lead, n, p, n, p, spec.channels).mean(dim=(-4, -2))
    if f.position_bias is not None:
        b = f.position_bias
        if n != spec.grid_side:
            b = bilinear_resample(b, n, n)
        out = out + b
    return out


# ---------------------------------------------------------------------------
# De-bias buffer
# ---------------------------------------------------------------------------


class DebiasBuffer(torch.nn.Module):
    """Learnable additive grid ``g`` cancelling fixed position artifacts."""

    def __init__(self, side: int, channels: int):
        super().__init__()
        self.g = torch.nn.Parameter(torch.zeros(side, side, channels, dtype=DTYPE))

    def forward(self, f_out: torch.Tensor) -> torch.Tensor:
        return debias_apply(f_out, self)


def debias_apply(f_out: torch.Tensor, b: DebiasBuffer | None) -> torch.Tensor:
    if b is None:
        return f_out
    if tuple(f_out.shape[-3:]) != tuple(b.g.shape):
        raise ValueError(f"shape mismatch: features {tuple(f_out.shape[-3:])} vs buffer {tuple(b.g.shape)}")
    return f_out + b.g


# ---------------------------------------------------------------------------
# PHI-S
# ---------------------------------------------------------------------------


@dataclass
class DistributionStats:
    mean: torch.Tensor  # (C,)
    rotation: torch.Tensor  # (C, C), orthogonal
    scale: float

    def __post_init__(self):
        c = self.mean.numel()
        if tuple(self.rotation.shape) != (c, c):
            raise ValueError("rotation must be C x C")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def channels(self) -> int:
        return self.mean.numel()

    @classmethod
    def identity(cls, channels: int) -> "DistributionStats":
        return cls(torch.zeros(channels, dtype=DTYPE), torch.eye(channels, dtype=DTYPE), 1.0)


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _equalizing_rotation(eigvals: np.ndarray) -> np.ndarray:
    """Orthogonal Q with ``diag(Q diag(eigvals) Q^T)`` constant.

    Uses a normalized Hadamard matrix when the size allows, otherwise a
    sequence of Givens rotations that pins one diagonal entry to the mean at a
    time.
    """
    c = eigvals.size
    if _is_pow2(c):
        return scipy.linalg.hadamard(c).astype(np.float64) / math.sqrt(c)
    target = eigvals.mean()
    cov = np.diag(eigvals).astype(np.float64)
    q = np.eye(c)
    tol = 1e-14 * max(1.0, abs(target))
    for _ in range(2 * c):
        dev = np.diag(cov) - target
        if np.abs(dev).max() <= tol:
            break
        i, j = int(np.argmax(dev)), int(np.argmin(dev))
        a, b, off = cov[i, i], cov[j, j], cov[i, j]
        # new (i, i) entry is (a+b)/2 + r cos(2 theta + phi); solve for target
        half = 0.5 * (a - b)
        r = math.hypot(half, off)
        phi = math.atan2(off, half)
        theta = 0.5 * (math.acos(np.clip((target - 0.5 * (a + b)) / r, -1.0, 1.0)) - phi)
        g = np.eye(c)
        cth, sth = math.cos(theta), math.sin(theta)
        g[i, i], g[i, j], g[j, i], g[j, j] = cth, -sth, sth, cth
        cov = g @ cov @ g.T
        q = g @ q
    return q


def phi_s_fit(samples, eps: float = 1e-6) -> DistributionStats:
    """Fit centering, rotation and a single global scale on feature vectors.

    ``samples`` is a feature map, or an iterable of them; every vector along
    the last axis counts as one sample.
    """
    if isinstance(samples, torch.Tensor):
        samples = [samples]
    vecs = torch.cat([s.detach().reshape(-1, s.shape[-1]) for s in samples]).to(DTYPE).numpy()
    c = vecs.shape[1]
    if np.unique(vecs, axis=0).shape[0] < c + 1:
        raise ValueError(f"need at least {c + 1} distinct feature vectors")
    mean = vecs.mean(axis=0)
    centered = vecs - mean
    cov = centered.T @ centered / (vecs.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() <= eps * max(eigvals.max(), 1.0):
        warnings.warn("rank-deficient feature covariance; regularizing with eps*I", RuntimeWarning, stacklevel=2)
        eigvals = eigvals + eps
    eigvals = eigvals[::-1].copy()
    eigvecs = eigvecs[:, ::-1]
    q = _equalizing_rotation(eigvals)
    rotation = q @ eigvecs.T
    scale = math.sqrt(eigvals.mean())
    return DistributionStats(torch.as_tensor(mean, dtype=DTYPE), torch.as_tensor(rotation, dtype=DTYPE), scale)


def _check_stats(fm: torch.Tensor, s: DistributionStats) -> None:
    if fm.shape[-1] != s.channels:
        raise ValueError(f"stats have {s.channels} channels, features have {fm.shape[-1]}")


def phi_s_apply(fm: torch.Tensor, s: DistributionStats) -> torch.Tensor:
    _check_stats(fm, s)
    return (fm - s.mean) @ s.rotation.T / s.scale


def phi_s_invert(fm: torch.Tensor, s: DistributionStats) -> torch.Tensor:
    _check_stats(fm, s)
    return (fm * s.scale) @ s.rotation + s.mean
