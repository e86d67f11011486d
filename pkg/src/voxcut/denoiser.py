"""Volumetric U-Net noise predictor, its training loop and checkpoint format.

The network sees ``[x_n, observed, mask]`` stacked on the channel axis and a
sinusoidal embedding of the diffusion step. A learned null embedding marks
the unconditional branch used for classifier-free guidance.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, make_schedule
from .scenes import SceneDataset, random_box_crop, sample_training_mask

log = logging.getLogger(__name__)

IN_CHANNELS = 7


class NumericError(FloatingPointError):
    pass


class CheckpointError(IOError):
    pass


def set_threads() -> None:
    n = os.environ.get("VOXCUT_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def timestep_embedding(n: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = n.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet3D(nn.Module):
    """Two downsampling and two upsampling stages with skip connections."""

    def __init__(self, widths: tuple[int, int] = (16, 32), time_dim: int = 64):
        super().__init__()
        c1, c2 = widths
        emb = 2 * time_dim
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.null_embedding = nn.Parameter(torch.zeros(emb))
        self.inp = nn.Conv3d(IN_CHANNELS, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, c1, emb)
        self.down1 = nn.Conv3d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, c2, emb)
        self.down2 = nn.Conv3d(c2, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, emb)
        self.dec2 = ResBlock(2 * c2, c2, emb)
        self.dec1 = ResBlock(c2 + c1, c1, emb)
        self.out_norm = nn.GroupNorm(_groups(c1), c1)
        self.out = nn.Conv3d(c1, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def stages(self, x, n, null) -> Iterator[tuple[str, torch.Tensor]]:
        temb = timestep_embedding(n, self.time_dim).to(x.dtype)
        emb = self.time_mlp(temb) + null.to(x.dtype)[:, None] * self.null_embedding
        h0 = self.inp(x)
        yield "inp", h0
        h1 = self.enc1(h0, emb)
        yield "enc1", h1
        h2 = self.enc2(self.down1(h1), emb)
        yield "enc2", h2
        h3 = self.mid(self.down2(h2), emb)
        yield "mid", h3
        u2 = self.dec2(torch.cat([F.interpolate(h3, scale_factor=2.0, mode="nearest"), h2], 1), emb)
        yield "dec2", u2
        u1 = self.dec1(torch.cat([F.interpolate(u2, scale_factor=2.0, mode="nearest"), h1], 1), emb)
        yield "dec1", u1
        yield "out", self.out(F.silu(self.out_norm(u1)))

    def forward(self, x, n, null):
        for _, h in self.stages(x, n, null):
            pass
        return h

    def locate_nonfinite(self, x, n, null) -> tuple[int, str] | None:
        with torch.no_grad():
            for i, (name, h) in enumerate(self.stages(x, n, null)):
                if not torch.isfinite(h).all():
                    return i, name
        return None


@dataclass
class DenoiserConfig:
    K: int = 16
    widths: tuple[int, int] = (16, 32)
    time_dim: int = 64
    N: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.K < 1 or min(self.widths) < 1 or self.time_dim < 2 or self.time_dim % 2:
            raise ValueError(f"invalid denoiser config {self}")


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 2e-4
    p_dropout: float = 0.15
    seed: int = 0
    checkpoint_every: int = 1000
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    max_planes: int = 6
    mask_crop_prob: float = 0.5
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.checkpoint_every < 1:
            raise ValueError(f"invalid training config {self}")
        if not 0.0 <= self.p_dropout <= 1.0 or not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("p_dropout must be in [0, 1] and ema_decay in [0, 1)")


def _pad_to(K: int) -> int:
    return -(-K // 4) * 4


class Denoiser:
    """``eps_theta(x_n, n, c)`` with channels-last tensors of shape ``(B, K, K, K, 3)``."""

    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype=torch.float32):
        self.config = config
        self.schedule: NoiseSchedule = make_schedule(config.N, config.beta_start, config.beta_end)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = UNet3D(config.widths, config.time_dim).to(dtype)
        self.net.eval()
        self.ema: dict[str, torch.Tensor] | None = None
        self.opt_state: dict[str, torch.Tensor] = {}
        self.step = 0
        self.fitted = False
        self.train_weights: dict[str, torch.Tensor] | None = None  # raw weights, kept for resuming

    # -- metadata --
    @property
    def K(self) -> int:
        return self.config.K

    def param_manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self.net.state_dict().items()]

    def arch_hash(self) -> bytes:
        desc = {"K": self.K, "widths": list(self.config.widths), "time_dim": self.config.time_dim,
                "in_channels": IN_CHANNELS, "params": [[k, list(s)] for k, s in self.param_manifest()]}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).digest()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    # -- inference --
    def _raw(self, x, n, observed, mask, null, net=None):
        """Channels-last in/out; pads K up to a multiple of 4 internally."""
        net = net or self.net
        B, K = x.shape[0], x.shape[1]
        if tuple(x.shape[1:]) != (self.K,) * 3 + (3,):
            raise ValueError(f"expected (B, {self.K}, {self.K}, {self.K}, 3), got {tuple(x.shape)}")
        dt = next(net.parameters()).dtype
        inp = torch.cat([x.to(dt), observed.to(dt), mask.to(dt)[..., None]], dim=-1)
        inp = inp.permute(0, 4, 1, 2, 3)
        P = _pad_to(K)
        if P != K:
            inp = F.pad(inp, (0, P - K) * 3)
        if isinstance(n, int):
            n = torch.full((B,), n, dtype=torch.long)
        if isinstance(null, bool):
            null = torch.full((B,), float(null))
        out = net(inp, n, null)
        if not torch.isfinite(out).all():
            where = net.locate_nonfinite(inp, n, null)
            idx, name = where if where else (-1, "unknown")
            raise NumericError(f"non-finite activations at layer {idx} ({name})")
        return out[:, :, :K, :K, :K].permute(0, 2, 3, 4, 1)

    def forward(self, x_n, n, condition) -> torch.Tensor:
        """Predict noise for a batch (or single grid) under ``condition``."""
        single = x_n.ndim == 4
        x = torch.as_tensor(x_n)[None] if single else torch.as_tensor(x_n)
        B = x.shape[0]
        obs = torch.as_tensor(condition.observed).expand(B, *condition.observed.shape)
        mask = torch.as_tensor(condition.mask).expand(B, *condition.mask.shape)
        if condition.null_flag:
            obs, mask = torch.zeros_like(obs), torch.zeros_like(mask)
        with torch.no_grad():
            out = self._raw(x, n, obs, mask, bool(condition.null_flag))
        return out[0] if single else out

    def predict(self, x, n, observed, mask, null):
        if null:
            observed, mask = torch.zeros_like(observed), torch.zeros_like(mask)
        return self._raw(x, n, observed, mask, null).to(x.dtype)

    def predict_pair(self, x, n, observed, mask):
        """Conditional and null-branch predictions from one batched evaluation."""
        B = x.shape[0]
        xx = torch.cat([x, x])
        oo = torch.cat([observed, torch.zeros_like(observed)])
        mm = torch.cat([mask, torch.zeros_like(mask)])
        null = torch.cat([torch.zeros(B), torch.ones(B)])
        out = self._raw(xx, n, oo, mm, null).to(x.dtype)
        return out[:B], out[B:]

    def use_ema(self) -> None:
        """Load the EMA weights into the network used for inference."""
        if self.ema is not None:
            self.net.load_state_dict({**self.net.state_dict(), **self.ema})

    # -- training objective --
    def loss(self, x0, n, eps, observed, mask, null) -> torch.Tensor:
        """Mean squared noise-prediction error over batch and voxels."""
        x_n = _q_sample_batch(x0, n, eps, self.schedule)
        pred = self._raw(x_n, n, observed, mask, null)
        loss = ((eps.to(pred.dtype) - pred) ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericError("non-finite training loss")
        return loss

    def loss_and_grad(self, x0, n, eps, observed, mask, null) -> tuple[float, dict[str, torch.Tensor]]:
        self.net.zero_grad(set_to_none=True)
        loss = self.loss(x0, n, eps, observed, mask, null)
        loss.backward()
        grads = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                 for k, p in self.net.named_parameters()}
        return float(loss.detach()), grads


def _q_sample_batch(x0, n, eps, schedule: NoiseSchedule):
    ab = torch.as_tensor(schedule.alpha_bar[np.asarray(n) - 1], dtype=x0.dtype).reshape(-1, 1, 1, 1, 1)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


# --- training ----------------------------------------------------------------

def make_batch(tensors: np.ndarray, occupancy: np.ndarray, cfg: TrainConfig, N: int,
               rng: np.random.Generator) -> tuple[torch.Tensor, ...]:
    """Draw one batch of (x0, n, eps, observed, mask, null) for the conditional objective."""
    B, K = cfg.batch_size, tensors.shape[1]
    idx = rng.integers(len(tensors), size=B)
    x0 = tensors[idx]
    n = rng.integers(1, N + 1, size=B)
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    masks = np.zeros((B, K, K, K), bool)
    null = rng.random(B) < cfg.p_dropout
    for b in range(B):
        if null[b]:
            continue
        m = sample_training_mask(K, rng, cfg.max_planes) & occupancy[idx[b]]
        if rng.random() < cfg.mask_crop_prob:
            m &= random_box_crop(K, rng)
        masks[b] = m
    observed = np.where(masks[..., None], x0, 0.0).astype(np.float32)
    return (torch.from_numpy(x0), torch.from_numpy(n), torch.from_numpy(eps), torch.from_numpy(observed),
            torch.from_numpy(masks), torch.from_numpy(null.astype(np.float32)))


def _adam_update(model: Denoiser, cfg: TrainConfig, b1=0.9, b2=0.999, eps=1e-8) -> None:
    model.step += 1
    t = model.step
    params = dict(model.net.named_parameters())
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(list(params.values()), cfg.grad_clip)
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = model.opt_state.setdefault("m." + name, torch.zeros_like(p))
            v = model.opt_state.setdefault("v." + name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / (1 - b2 ** t)).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-cfg.lr / (1 - b1 ** t))
        if model.ema is None:
            model.ema = {k: v.detach().clone() for k, v in model.net.state_dict().items()}
        else:
            for k, v in model.net.state_dict().items():
                model.ema[k].mul_(cfg.ema_decay).add_(v, alpha=1 - cfg.ema_decay)


def train(dataset: SceneDataset, config: TrainConfig, model_config: DenoiserConfig | None = None,
          checkpoint_path: str | os.PathLike | None = None, resume: Denoiser | None = None,
          progress: Callable[[int, float], None] | None = None) -> tuple[Denoiser, list[tuple[int, float]]]:
    """Fit the noise predictor; returns the model (EMA weights loaded) and the loss curve."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    set_threads()
    model = resume or Denoiser(model_config or DenoiserConfig(K=dataset.K), seed=config.seed)
    if model.K != dataset.K:
        raise CheckpointError(f"model K={model.K} does not match dataset K={dataset.K}")
    if resume is not None and resume.train_weights is not None:
        model.net.load_state_dict(resume.train_weights)
    tensors = dataset.tensors()
    occupancy = np.stack([g.occupancy for g in dataset.grids])
    curve: list[tuple[int, float]] = []
    model.net.train()
    while model.step < config.steps:
        rng = np.random.default_rng([config.seed, model.step])
        batch = make_batch(tensors, occupancy, config, model.config.N, rng)
        model.net.zero_grad(set_to_none=True)
        loss = model.loss(*batch)
        loss.backward()
        _adam_update(model, config)
        curve.append((model.step, float(loss.detach())))
        if progress and (model.step % config.log_every == 0 or model.step == config.steps):
            progress(model.step, float(loss.detach()))
        if checkpoint_path and (model.step % config.checkpoint_every == 0 or model.step == config.steps):
            save_checkpoint(model, checkpoint_path, training=True)
    model.net.eval()
    model.train_weights = {k: v.detach().clone() for k, v in model.net.state_dict().items()}
    model.use_ema()
    model.fitted = True
    return model, curve


# --- checkpoints -------------------------------------------------------------

MAGIC = b"VXDN"
VERSION = 1


def _tensor_sections(model: Denoiser, training: bool) -> list[tuple[str, torch.Tensor]]:
    weights = model.train_weights if (training and model.train_weights is not None) else model.net.state_dict()
    out = [("param." + k, v) for k, v in weights.items()]
    if model.ema is not None:
        out += [("ema." + k, v) for k, v in model.ema.items()]
    if training:
        out += [("opt." + k, v) for k, v in sorted(model.opt_state.items())]
    return out


def save_checkpoint(model: Denoiser, path: str | os.PathLike, training: bool = True) -> None:
    """Write ``VXDN``: header, arch hash, K, widths, JSON manifest, float32 LE tensors."""
    if training and model.net.training:
        model.train_weights = {k: v.detach().clone() for k, v in model.net.state_dict().items()}
    sections = _tensor_sections(model, training)
    manifest = {
        "config": asdict(model.config),
        "step": model.step,
        "fitted": model.fitted or model.step > 0,
        "tensors": [[name, list(t.shape)] for name, t in sections],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    w = model.config.widths
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<H", VERSION) + model.arch_hash())
        fh.write(struct.pack(f"<HH{len(w)}H", model.K, len(w), *w))
        fh.write(struct.pack("<I", len(blob)) + blob)
        for _, t in sections:
            fh.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expect_K: int | None = None) -> Denoiser:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a VXDN checkpoint")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = data[6:38]
    K, nw = struct.unpack_from("<HH", data, 38)
    off = 42 + 2 * nw
    (mlen,) = struct.unpack_from("<I", data, off)
    manifest = json.loads(data[off + 4:off + 4 + mlen])
    off += 4 + mlen
    if expect_K is not None and K != expect_K:
        raise CheckpointError(f"checkpoint K={K} but K={expect_K} was requested")
    cfg = DenoiserConfig(**manifest["config"])
    model = Denoiser(cfg)
    if model.arch_hash() != digest:
        raise CheckpointError("architecture hash mismatch; checkpoint is incompatible with this build")
    tensors = {}
    for name, shape in manifest["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, "<f4", count, off).reshape(shape)
        off += 4 * count
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
    model.net.load_state_dict(params)
    model.train_weights = {k: v.clone() for k, v in params.items()}
    ema = {k[4:]: v for k, v in tensors.items() if k.startswith("ema.")}
    model.ema = ema or None
    model.opt_state = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}
    model.step = int(manifest["step"])
    model.fitted = bool(manifest.get("fitted", True))
    model.use_ema()
    model.net.eval()
    return model
