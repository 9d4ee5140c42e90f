"""Evaluation metrics, the over-tiling analysis and the tiling cost model."""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .featurizer import DistributionStats, Featurizer, featurize, phi_s_apply, phi_s_fit
from .numerics import bilinear_resample, resize
from .tiler import featurizer_calls, tile_features


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


@dataclass
class FidelityParts:
    """Running sums so fidelity can be aggregated across an evaluation set."""

    sq_err: float = 0.0
    count: int = 0
    y_sum: np.ndarray | None = None
    y_sq_sum: np.ndarray | None = None

    def add(self, x, y) -> None:
        x, y = _np(x), _np(y)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
        y2 = y.reshape(-1, y.shape[-1])
        self.sq_err += float(((x - y) ** 2).sum())
        self.count += y2.shape[0]
        s, sq = y2.sum(0), (y2 ** 2).sum(0)
        self.y_sum = s if self.y_sum is None else self.y_sum + s
        self.y_sq_sum = sq if self.y_sq_sum is None else self.y_sq_sum + sq

    def value(self) -> tuple[float, bool]:
        """Return ``(fidelity, degenerate)``; degenerate means zero error."""
        c = self.y_sum.size
        mu = self.y_sum / self.count
        var_sum = float((self.y_sq_sum - self.count * mu ** 2).sum())
        mse_y = max(var_sum, 0.0) / (self.count * c)
        mse_xy = self.sq_err / (self.count * c)
        if mse_xy == 0.0:
            return math.inf, True
        return mse_y / mse_xy, False


def fidelity(X, Y) -> float:
    """``MSE(Y, mu_Y) / MSE(X, Y)`` with mu_Y the per-channel mean of Y.

    Returns ``inf`` (and warns) when X reproduces Y exactly.
    """
    x, y = _np(X), _np(Y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mu = y.reshape(-1, y.shape[-1]).mean(0)
    mse_xy = np.mean((x - y) ** 2)
    if mse_xy == 0.0:
        warnings.warn("fidelity undefined: predictions equal targets", RuntimeWarning, stacklevel=2)
        return math.inf
    return float(np.mean((y - mu) ** 2) / mse_xy)


def tv_loss(fm) -> float:
    """Mean squared distance between horizontally and vertically adjacent vectors."""
    f = _np(fm)
    dh = ((f[..., :, 1:, :] - f[..., :, :-1, :]) ** 2).sum(-1)
    dv = ((f[..., 1:, :, :] - f[..., :-1, :, :]) ** 2).sum(-1)
    n = dh.size + dv.size
    if n == 0:
        return 0.0
    return float((dh.sum() + dv.sum()) / n)


def crf_offsets(radius: int = 3) -> list[tuple[int, int]]:
    """Half-plane of offsets within ``radius``, so each unordered pair appears once."""
    out = []
    for dy in range(0, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > radius * radius or (dy == 0 and dx <= 0):
                continue
            out.append((dy, dx))
    return out


def crf_loss(fm, guidance, radius: int = 3, sigma_g: float = 0.15) -> tuple[float, int]:
    """Colour-weighted cosine dissimilarity between nearby feature vectors.

    Guidance is resampled to the feature grid. Returns ``(loss, skipped)`` where
    ``skipped`` counts pairs dropped because a feature vector had zero norm.
    """
    f = _np(fm)
    h, w = f.shape[-3:-1]
    g = guidance
    if isinstance(g, torch.Tensor) and tuple(g.shape[-3:-1]) != (h, w):
        g = resize(g, h, w) if g.shape[-3] % h == 0 else bilinear_resample(g, h, w)
    g = _np(g)
    if tuple(g.shape[-3:-1]) != (h, w):
        raise ValueError("guidance must be a tensor or match the feature grid")
    norms = np.linalg.norm(f, axis=-1)
    total, count, skipped = 0.0, 0, 0
    for dy, dx in crf_offsets(radius):
        ys = slice(0, h - dy)
        yd = slice(dy, h)
        xs = slice(max(0, -dx), w - max(0, dx))
        xd = slice(max(0, dx), w - max(0, -dx))
        fa, fb = f[..., ys, xs, :], f[..., yd, xd, :]
        na, nb = norms[..., ys, xs], norms[..., yd, xd]
        ga, gb = g[..., ys, xs, :], g[..., yd, xd, :]
        ok = (na > 0) & (nb > 0)
        skipped += int((~ok).sum())
        cos = (fa * fb).sum(-1) / np.where(ok, na * nb, 1.0)
        wgt = np.exp(-((ga - gb) ** 2).sum(-1) / (2 * sigma_g ** 2))
        total += float((wgt * (1 - cos))[ok].sum())
        count += int(ok.sum())
    return (total / count if count else 0.0), skipped


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.maximum(d, 0.0)


def median_gamma(X) -> float:
    """Inverse of the median pairwise squared distance among X (i != j)."""
    x = _np(X).reshape(-1, np.shape(X)[-1])
    d = _sq_dists(x, x)
    iu = np.triu_indices(x.shape[0], k=1)
    med = float(np.median(d[iu]))
    if med <= 0.0:
        raise ValueError("degenerate bandwidth")
    return 1.0 / med


def mmd2_unbiased(X, Y, gamma: float | None = None) -> float:
    """Unbiased squared MMD with an RBF kernel ``exp(-gamma |x - y|^2)``.

    ``gamma`` defaults to ``median_gamma(X)``.
    """
    x = _np(X).reshape(-1, np.shape(X)[-1])
    y = _np(Y).reshape(-1, np.shape(Y)[-1])
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("need at least two samples in each set")
    if gamma is None:
        gamma = median_gamma(x)
    kxx = np.exp(-gamma * _sq_dists(x, x))
    kyy = np.exp(-gamma * _sq_dists(y, y))
    kxy = np.exp(-gamma * _sq_dists(x, y))
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def tiling_error(featurizer: Featurizer, image: torch.Tensor, levels, stats: DistributionStats | None = None):
    """MSE between brute-force featurization at ``R*u`` and the stitched u x u tiling.

    Both maps are PHI-S normalized; without ``stats`` the transform is fitted on
    the pooled base-resolution and brute-force features of ``image``. Levels
    whose resolution exceeds the featurizer limit are skipped with a warning.
    """
    r = featurizer.spec.input_resolution
    brute = {}
    for u in levels:
        res = r * u
        if res > featurizer.spec.max_resolution:
            warnings.warn(f"skipping tile level {u}: resolution {res} exceeds limit", RuntimeWarning, stacklevel=2)
            continue
        img = resize_image(image, res)
        brute[u] = (img, featurize(featurizer, img, resolution=res))
    if stats is None:
        c = featurizer.spec.channels
        pooled = [featurize(featurizer, resize_image(image, r)).reshape(-1, c)]
        pooled += [f.reshape(-1, c) for _, f in brute.values()]
        stats = phi_s_fit(torch.cat(pooled))
    out = []
    for u, (img, raw) in brute.items():
        if u == 1:
            # a single tile is the brute-force evaluation itself
            out.append((u, 0.0))
            continue
        tiled = tile_features(featurizer, img, u, post=lambda f: phi_s_apply(f, stats))
        out.append((u, float(torch.mean((phi_s_apply(raw, stats) - tiled) ** 2))))
    return out


def resize_image(image: torch.Tensor, side: int) -> torch.Tensor:
    return resize(image, side, side)


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


def cost_model(x: int, c: float = 1.0, progressive: bool = True) -> tuple[float, float]:
    """Relative cost ``(f, g)`` of tiled upsampling vs. running at hi-res.

    ``f`` sums the squared tile counts of every level (progressive) or uses
    just the global view plus the last level; ``g = c x^4``.
    """
    if x < 1:
        raise ValueError("x must be at least 1")
    if progressive:
        f = c * (x * (x + 1) * (2 * x + 1) // 6) if isinstance(c, int) else c * (x * (x + 1) * (2 * x + 1) / 6)
    else:
        f = c * (1 + x * x)
    return f, c * x ** 4


def cost_proof_check(max_x: int) -> bool:
    """Closed form equals the loop sum and ``f <= g`` for ``1 <= x <= max_x``.

    Uses exact integer arithmetic (c = 1); equality must hold at x = 1.
    """
    running = 0
    for x in range(1, max_x + 1):
        running += x * x
        f, g = cost_model(x, 1)
        if f != running:
            return False
        if x == 1 and f != g:
            return False
        if f > g:
            return False
    return True


def throughput_bench(featurizer: Featurizer, upsamplers=("base", "featsharp"), factors=(1, 2, 3),
                     repeats: int = 3, seed: int = 0) -> list[dict]:
    """Wall-clock per-token timing of hi-res featurization vs. the tiled path.

    ``base`` runs the encoder once at ``R * u``; ``featsharp`` runs the global
    view plus ``u x u`` tiles at R. Timings are hardware dependent.
    """
    r = featurizer.spec.input_resolution
    p = featurizer.spec.patch
    g = torch.Generator().manual_seed(seed)
    rows = []
    for name in upsamplers:
        for u in factors:
            image = torch.rand(r * u, r * u, 3, generator=g, dtype=torch.float64)
            if name == "base":
                def run():
                    featurize(featurizer, image, resolution=r * u)
                calls = 1
            elif name == "featsharp":
                def run():
                    featurize(featurizer, resize_image(image, r))
                    tile_features(featurizer, image, u)
                calls = featurizer_calls(u)
            else:
                raise ValueError(f"unknown upsampler {name!r}")
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                best = min(best, time.perf_counter() - t0)
            tokens = (r * u // p) ** 2
            rows.append({
                "upsampler": name, "factor": u, "tokens": tokens, "featurizer_calls": calls,
                "seconds": best, "seconds_per_token": best / tokens,
            })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


@dataclass
class MetricsReport:
    fidelity: float
    tv: float
    crf: float
    mmd2: float
    fidelity_degenerate: bool = False
    crf_skipped_pairs: int = 0
    tiling_error: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tv < 0 or self.crf < 0:
            raise ValueError("tv and crf must be non-negative")

    CSV_FIELDS = ("metric", "value")

    def to_rows(self) -> list[dict]:
        rows = [
            {"metric": "fidelity", "value": repr(self.fidelity)},
            {"metric": "tv", "value": repr(self.tv)},
            {"metric": "crf", "value": repr(self.crf)},
            {"metric": "mmd2", "value": repr(self.mmd2)},
        ]
        for u, mse in self.tiling_error:
            rows.append({"metric": f"tiling_error_u{u}", "value": repr(mse)})
        for x, f, g in self.cost:
            rows.append({"metric": f"cost_f_x{x}", "value": repr(f)})
            rows.append({"metric": f"cost_g_x{x}", "value": repr(g)})
        return rows

    def to_csv(self) -> str:
        return rows_to_csv(self.to_rows())

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["fidelity"]):
            d["fidelity"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True)
