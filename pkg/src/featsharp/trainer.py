"""Multi-view consistency training, evaluation and checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .downsample import DownsamplerParams, attention_downsample
from .featurizer import (
    DebiasBuffer,
    DistributionStats,
    Featurizer,
    FeaturizerSpec,
    debias_apply,
    featurize,
    phi_s_apply,
    phi_s_fit,
)
from .jbu import JbuStack
from .metrics import FidelityParts, MetricsReport, crf_loss, mmd2_unbiased, tv_loss
from .numerics import ViewTransform, backward, bilinear_resample, resize, warp_apply
from .sharpen import SharpenParams, featsharp_combine
from .tiler import s2_combine, tile_features


UPSAMPLERS = ("bilinear", "jbu", "tile", "s2", "featsharp")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugConfig:
    scale_max: float = 1.8
    shift_max: float = 0.2
    hflip_prob: float = 0.5
    rotation_deg: float = 15.0
    perspective: float = 0.05

    @classmethod
    def none(cls) -> "AugConfig":
        return cls(1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 4
    lr: float = 1e-4
    num_jitters: int = 5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    factor: int = 2
    upsampler: str = "featsharp"
    residual: str = "jbu"
    block_mode: str = "attention+mlp"
    window: int = 5
    downsampler_k: int = 7
    jbu_radius: int = 3
    use_debias: bool = True
    s2_beta: float = 0.5
    phi_s_vectors: int = 10000
    checkpoint_every: int = 0
    seed: int = 0
    aug: AugConfig = field(default_factory=AugConfig)
    featurizer: FeaturizerSpec = field(default_factory=FeaturizerSpec)

    def __post_init__(self):
        for name in ("steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("batch_size", "num_jitters", "lr", "eps", "phi_s_vectors"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.factor < 2:
            raise ValueError("factor must be at least 2")
        if self.upsampler not in UPSAMPLERS:
            raise ValueError(f"upsampler must be one of {UPSAMPLERS}")
        if self.residual not in ("bilinear", "jbu"):
            raise ValueError("residual must be 'bilinear' or 'jbu'")

    @property
    def image_resolution(self) -> int:
        """Side of the hi-res training images (featurizer resolution times factor)."""
        return self.featurizer.input_resolution * self.factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        _reject_unknown(cls, d, "train config")
        d = dict(d)
        if "aug" in d:
            _reject_unknown(AugConfig, d["aug"], "aug")
            d["aug"] = AugConfig(**d["aug"])
        if "featurizer" in d:
            _reject_unknown(FeaturizerSpec, d["featurizer"], "featurizer")
            d["featurizer"] = FeaturizerSpec(**d["featurizer"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _reject_unknown(cls, d: dict, what: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class UpsamplerModel(torch.nn.Module):
    """All learnable state for one upsampler configuration.

    ``stats`` (PHI-S) are fitted once before training and stay frozen.
    """

    def __init__(self, cfg: TrainConfig, stats: DistributionStats | None = None):
        super().__init__()
        self.cfg = cfg
        self.featurizer = Featurizer(cfg.featurizer)
        spec = cfg.featurizer
        c = spec.channels
        self.stats = stats if stats is not None else DistributionStats.identity(c)
        self.debias = DebiasBuffer(spec.grid_side, c) if cfg.use_debias else None
        needs_jbu = cfg.upsampler == "jbu" or (cfg.upsampler == "featsharp" and cfg.residual == "jbu")
        self.jbu = JbuStack(cfg.factor, radius=cfg.jbu_radius, seed=cfg.seed) if needs_jbu else None
        if cfg.upsampler == "featsharp":
            self.sharpen = SharpenParams(c, window=cfg.window, mode=cfg.block_mode, seed=cfg.seed)
        else:
            self.sharpen = None
        self.down = DownsamplerParams(c, cfg.factor, k=cfg.downsampler_k)

    def normalize(self, raw: torch.Tensor) -> torch.Tensor:
        """De-bias, then PHI-S."""
        return phi_s_apply(debias_apply(raw, self.debias), self.stats)

    def low_features(self, image_lr: torch.Tensor) -> torch.Tensor:
        return self.normalize(featurize(self.featurizer, image_lr))

    def upsample(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(low-res features, hi-res prediction)`` for hi-res ``image``."""
        cfg = self.cfg
        r = cfg.featurizer.input_resolution
        low = self.low_features(resize(image, r, r))
        n = low.shape[-2] * cfg.factor
        kind = cfg.upsampler
        if kind == "bilinear":
            return low, bilinear_resample(low, n, n)
        if kind == "jbu":
            return low, self.jbu(low, image)
        mosaic = tile_features(self.featurizer, image, cfg.factor, self.debias, post=lambda f: phi_s_apply(f, self.stats))
        if kind == "tile":
            return low, mosaic
        if kind == "s2":
            return low, s2_combine(bilinear_resample(low, n, n), mosaic, cfg.s2_beta)
        residual = self.jbu(low, image) if cfg.residual == "jbu" else bilinear_resample(low, n, n)
        return low, featsharp_combine(residual, mosaic, self.sharpen)

    def view_pair(self, image: torch.Tensor, f_hr: torch.Tensor, t: ViewTransform) -> tuple[torch.Tensor, torch.Tensor]:
        """Prediction and target for one view transform."""
        r = self.cfg.featurizer.input_resolution
        hs = f_hr.shape[-2]
        pred = attention_downsample(warp_apply(f_hr, t, hs, hs), self.down)
        side = image.shape[-2]
        view = resize(warp_apply(image, t, side, side), r, r)
        target = self.low_features(view)
        return pred, target


def fit_stats(cfg: TrainConfig, images: torch.Tensor) -> DistributionStats:
    """PHI-S statistics on raw (not de-biased) features of the training images."""
    f = Featurizer(cfg.featurizer)
    r = cfg.featurizer.input_resolution
    per_image = cfg.featurizer.grid_side ** 2
    n_img = min(len(images), max(1, math.ceil(cfg.phi_s_vectors / per_image)))
    with torch.no_grad():
        feats = featurize(f, resize(images[:n_img], r, r))
    return phi_s_fit(feats)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def sample_view_transform(rng: np.random.Generator, aug: AugConfig) -> ViewTransform:
    """Draw one random view. A fixed number of draws is consumed per call."""
    u = rng.uniform(size=13)
    scale = 1.0 + (aug.scale_max - 1.0) * u[0]
    shift = (aug.shift_max * (2 * u[1] - 1), aug.shift_max * (2 * u[2] - 1))
    hflip = bool(u[3] < aug.hflip_prob)
    rotation = math.radians(aug.rotation_deg) * (2 * u[4] - 1)
    persp = tuple(float(aug.perspective * (2 * v - 1)) for v in u[5:13])
    return ViewTransform(scale=float(scale), shift=(float(shift[0]), float(shift[1])),
                         hflip=hflip, rotation=float(rotation), perspective=persp)


def consistency_loss(model: UpsamplerModel, images: torch.Tensor, transforms: list[ViewTransform]) -> torch.Tensor:
    """Mean over jitters of the per-view MSE (all views share one batched pass)."""
    if images.dim() != 4:
        raise ValueError(f"expected a (B, H, W, 3) batch, got {tuple(images.shape)}")
    if not transforms:
        raise ValueError("need at least one view transform")
    _, f_hr = model.upsample(images)
    r = model.cfg.featurizer.input_resolution
    hs, side = f_hr.shape[-2], images.shape[-2]
    warped_f = torch.cat([warp_apply(f_hr, t, hs, hs) for t in transforms])
    views = torch.cat([warp_apply(images, t, side, side) for t in transforms])
    pred = attention_downsample(warped_f, model.down)
    target = model.low_features(resize(views, r, r))
    # equal-sized views: the global mean equals the mean of per-view means
    return torch.mean((pred - target) ** 2)


def make_optimizer(model: UpsamplerModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.NAdam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def training_step(model: UpsamplerModel, images: torch.Tensor, optimizer: torch.optim.Optimizer,
                  rng: np.random.Generator, batch_seed: int | None = None) -> float:
    """One multi-view consistency update. Returns the (pre-update) loss."""
    cfg = model.cfg
    transforms = [sample_view_transform(rng, cfg.aug) for _ in range(cfg.num_jitters)]
    optimizer.zero_grad(set_to_none=False)
    loss = consistency_loss(model, images, transforms)
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss.item()} (batch seed {batch_seed}, transforms {transforms})"
        )
    backward(loss)
    optimizer.step()
    return loss.item()


@dataclass
class Checkpoint:
    config: TrainConfig
    state: dict[str, torch.Tensor]
    stats: DistributionStats
    step: int = 0
    loss_trace: list[float] = field(default_factory=list)
    version: int = 1

    def build_model(self) -> UpsamplerModel:
        model = UpsamplerModel(self.config, self.stats)
        model.load_state_dict(self.state)
        return model


def snapshot(model: UpsamplerModel, step: int, trace: list[float]) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(model.cfg, state, model.stats, step, list(trace))


def train(cfg: TrainConfig, images: torch.Tensor, out_dir=None, progress=None) -> Checkpoint:
    """Run ``cfg.steps`` consistency updates on ``images`` (N, S, S, 3).

    ``images`` must be at ``cfg.image_resolution``. When ``out_dir`` is set and
    ``cfg.checkpoint_every`` > 0, intermediate checkpoints are written there.
    """
    if images is None or len(images) == 0:
        raise ValueError("missing dataset")
    side = cfg.image_resolution
    if tuple(images.shape[1:]) != (side, side, 3):
        raise ValueError(f"images must be ({side}, {side}, 3), got {tuple(images.shape[1:])}")
    torch.manual_seed(cfg.seed)
    stats = fit_stats(cfg, images)
    model = UpsamplerModel(cfg, stats)
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for step in range(cfg.steps):
        batch_seed = int(rng.integers(2 ** 31))
        idx = np.random.default_rng(batch_seed).choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        loss = training_step(model, images[np.sort(idx)], optimizer, rng, batch_seed)
        trace.append(loss)
        if progress is not None:
            progress(step, loss)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(model, step + 1, trace), Path(out_dir) / f"step_{step + 1:06d}.fskp")
    return snapshot(model, cfg.steps, trace)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(ckpt: Checkpoint, images: torch.Tensor, num_jitters: int | None = None, seed: int = 1234,
             batch_size: int = 8, mmd_samples: int = 400, aug: AugConfig | None = None) -> MetricsReport:
    """Fidelity, TV, CRF and MMD on held-out images; no gradients are taken."""
    if images is None or len(images) == 0:
        raise ValueError("missing dataset")
    if ckpt.version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {ckpt.version} != {CHECKPOINT_VERSION}")
    model = ckpt.build_model()
    cfg = model.cfg
    aug = cfg.aug if aug is None else aug
    n_jit = cfg.num_jitters if num_jitters is None else num_jitters
    rng = np.random.default_rng(seed)
    parts = FidelityParts()
    tvs, crfs, skipped = [], [], 0
    lows, highs = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size]
            low, f_hr = model.upsample(batch)
            for _ in range(n_jit):
                t = sample_view_transform(rng, aug)
                pred, target = model.view_pair(batch, f_hr, t)
                parts.add(pred, target)
            for i in range(len(batch)):
                tvs.append(tv_loss(f_hr[i]))
                c, s = crf_loss(f_hr[i], batch[i])
                crfs.append(c)
                skipped += s
            lows.append(low.reshape(-1, low.shape[-1]))
            highs.append(f_hr.reshape(-1, f_hr.shape[-1]))
    fid, degenerate = parts.value()
    x = torch.cat(lows).numpy()
    y = torch.cat(highs).numpy()
    x = x[rng.choice(len(x), size=min(mmd_samples, len(x)), replace=False)]
    y = y[rng.choice(len(y), size=min(mmd_samples, len(y)), replace=False)]
    mmd = mmd2_unbiased(x, y)
    return MetricsReport(
        fidelity=fid, tv=float(np.mean(tvs)), crf=float(np.mean(crfs)), mmd2=mmd,
        fidelity_degenerate=degenerate, crf_skipped_pairs=skipped,
        metadata={"seed": seed, "config_digest": cfg.digest(), "upsampler": cfg.upsampler,
                  "step": ckpt.step, "num_images": len(images), "num_jitters": n_jit},
    )


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------

MAGIC = b"FSKP"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float64: (0, "<f8"), torch.float32: (1, "<f4"), torch.int64: (2, "<i8"), torch.uint8: (3, "u1")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


def _pack_tensor(name: str, t: torch.Tensor) -> bytes:
    code, np_dt = _DTYPES[t.dtype]
    # ascontiguousarray would promote 0-d tensors to 1-d
    arr = np.array(t.detach().cpu().numpy(), dtype=np_dt, order="C")
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    data = arr.tobytes()
    return head + struct.pack("<Q", len(data)) + data


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``FSKP | u32 version | named tensors...`` (little-endian).

    Each tensor is ``u32 name length, name, u8 dtype code, u32 ndim,
    u64 dims..., u64 byte length, raw data``. Metadata travels as the uint8
    tensor ``__meta__`` holding JSON.
    """
    meta = {
        "version": ckpt.version, "step": ckpt.step, "config": ckpt.config.to_dict(),
        "config_digest": ckpt.config.digest(), "phi_s_scale": ckpt.stats.scale,
    }
    tensors = {"__meta__": torch.frombuffer(bytearray(json.dumps(meta, sort_keys=True).encode()), dtype=torch.uint8)}
    tensors.update({f"params.{k}": v for k, v in ckpt.state.items()})
    tensors["phi_s.mean"] = ckpt.stats.mean
    tensors["phi_s.rotation"] = ckpt.stats.rotation
    tensors["trace.loss"] = torch.tensor(ckpt.loss_trace, dtype=torch.float64)
    blob = MAGIC + struct.pack("<I", ckpt.version)
    blob += b"".join(_pack_tensor(k, v) for k, v in tensors.items())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError("not an FSKP checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version mismatch: file {version}, expected {CHECKPOINT_VERSION}")
    off = 8
    tensors = {}
    while off < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        (size,) = struct.unpack_from("<Q", buf, off)
        off += 8
        dt, np_dt = _CODES[code]
        arr = np.frombuffer(buf, dtype=np_dt, count=size // np.dtype(np_dt).itemsize, offset=off).reshape(shape)
        off += size
        tensors[name] = torch.from_numpy(arr.copy()).to(dt)
    meta = json.loads(bytes(tensors.pop("__meta__").numpy()).decode())
    cfg = TrainConfig.from_dict(meta["config"])
    stats = DistributionStats(tensors.pop("phi_s.mean"), tensors.pop("phi_s.rotation"), meta["phi_s_scale"])
    trace = tensors.pop("trace.loss").tolist()
    state = {k[len("params."):]: v for k, v in tensors.items()}
    return Checkpoint(cfg, state, stats, meta["step"], trace, version)


def initial_checkpoint(cfg: TrainConfig, images: torch.Tensor) -> Checkpoint:
    torch.manual_seed(cfg.seed)
    model = UpsamplerModel(cfg, fit_stats(cfg, images))
    return snapshot(model, 0, [])


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
