"""A small class-conditional DDPM with classifier-free guidance.

Images live in [0, 1] in datasets and in [-1, 1] inside the model.
Timesteps are 1-based: t in [1, T].
"""
import copy
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import TrainingDiverged, digest_of, parameter_checksum


def to_model_space(features):
    return torch.as_tensor(features) * 2.0 - 1.0


def to_data_space(x):
    return ((x.clamp(-1.0, 1.0) + 1.0) / 2.0)


def linear_betas(T, beta_start=1e-4, beta_end=0.02):
    """Linear schedule rescaled by 1000/T so short chains still end near pure noise."""
    scale = 1000.0 / T
    return np.linspace(beta_start * scale, min(beta_end * scale, 0.999), T)


class TimeEmbedding(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim))

    def forward(self, t):
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        args = t.float()[:, None] * freqs[None]
        return self.mlp(torch.cat([args.sin(), args.cos()], dim=1))


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Two-resolution U-Net predicting noise, conditioned on time and class (null token = num_classes)."""

    def __init__(self, in_channels=1, base=32, num_classes=10, emb_dim=64):
        super().__init__()
        self.time_emb = TimeEmbedding(emb_dim)
        self.class_emb = nn.Embedding(num_classes + 1, emb_dim)
        self.inp = nn.Conv2d(in_channels, base, 3, padding=1)
        self.down1 = ResBlock(base, base, emb_dim)
        self.pool = nn.Conv2d(base, base * 2, 3, stride=2, padding=1)
        self.mid = ResBlock(base * 2, base * 2, emb_dim)
        self.up = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.up1 = ResBlock(base * 2, base, emb_dim)
        self.out = nn.Sequential(nn.GroupNorm(8, base), nn.SiLU(), nn.Conv2d(base, in_channels, 3, padding=1))

    def forward(self, x, t, y):
        emb = self.time_emb(t) + self.class_emb(y)
        h0 = self.down1(self.inp(x), emb)
        h = self.mid(self.pool(h0), emb)
        h = self.up1(torch.cat([self.up(h), h0], dim=1), emb)
        return self.out(h)


@dataclass
class DiffusionConfig:
    T: int = 200
    base: int = 32
    epochs: int = 60
    lr: float = 2e-3
    batch_size: int = 128
    p_uncond: float = 0.1
    seed: int = 0

    @property
    def digest(self):
        return digest_of(asdict(self))


class DiffusionCheckpoint:
    def __init__(self, model, betas, num_classes, in_channels=1, image_size=8, base=32,
                 config_digest="", rng_seed=0, parent=None):
        self.model = model
        self.noise_schedule = np.asarray(betas, dtype=np.float64)
        if not np.all((self.noise_schedule > 0) & (self.noise_schedule < 1)):
            raise ValueError("betas must lie in (0, 1)")
        self.num_classes = int(num_classes)
        self.null_token = self.num_classes
        self.in_channels = in_channels
        self.image_size = image_size
        self.base = base
        self.config_digest = config_digest
        self.rng_seed = rng_seed
        self.parent = parent
        alphas_cumprod = np.cumprod(1.0 - self.noise_schedule)
        self.alphas_cumprod = torch.tensor(alphas_cumprod, dtype=torch.float32)
        self.betas_t = torch.tensor(self.noise_schedule, dtype=torch.float32)

    @property
    def T(self):
        return len(self.noise_schedule)

    @property
    def digest(self):
        return parameter_checksum(self.model)

    def clone(self):
        return DiffusionCheckpoint(copy.deepcopy(self.model), self.noise_schedule, self.num_classes,
                                   self.in_channels, self.image_size, self.base, self.config_digest,
                                   self.rng_seed, parent=self.digest)

    def check_t(self, t):
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]")
        return t

    def q_sample(self, x0, t, noise):
        t = self.check_t(t)
        ab = self.alphas_cumprod[t - 1].view(-1, *([1] * (x0.dim() - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * noise

    def eps(self, x_t, t, y):
        t = torch.as_tensor(t, dtype=torch.long)
        y = torch.as_tensor(y, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(len(x_t))
        if y.dim() == 0:
            y = y.expand(len(x_t))
        return self.model(x_t, t, y)

    def manifest(self):
        return {
            "kind": "diffusion",
            "T": self.T,
            "betas": self.noise_schedule.tolist(),
            "num_classes": self.num_classes,
            "null_token": self.null_token,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "base": self.base,
            "seed": self.rng_seed,
            "config_digest": self.config_digest,
            "parent_checkpoint": self.parent,
            "param_digest": self.digest,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), path)
        path.with_suffix(".json").write_text(json.dumps(self.manifest()))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        model = TinyUNet(meta["in_channels"], meta["base"], meta["num_classes"])
        model.load_state_dict(torch.load(path, weights_only=True))
        return cls(model, meta["betas"], meta["num_classes"], meta["in_channels"], meta["image_size"],
                   meta["base"], meta.get("config_digest", ""), meta.get("seed", 0),
                   meta.get("parent_checkpoint"))


def init_diffusion(config, in_channels, image_size, num_classes):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = TinyUNet(in_channels, config.base, num_classes)
    return DiffusionCheckpoint(model, linear_betas(config.T), num_classes, in_channels, image_size,
                               config.base, config.digest, config.seed)


def diffusion_noise_loss(ckpt, x, y, t, noise):
    """Squared L2 distance between ``noise`` and the model's prediction at the noised ``x`` (per example).

    ``x`` is in model space ([-1, 1]). Keeps the autograd graph.
    """
    t = ckpt.check_t(t)
    x_t = ckpt.q_sample(x, t, noise)
    pred = ckpt.eps(x_t, t, y)
    return ((noise - pred) ** 2).flatten(1).sum(1)


def train_diffusion(dataset, indices, config):
    """Train the class-conditional noise predictor with null-label dropout."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("cannot train on an empty view")
    c, h = dataset.shape[0], dataset.shape[-1]
    ckpt = init_diffusion(config, c, h, dataset.num_classes)
    model = ckpt.model
    x_all = to_model_space(dataset.features)
    y_all = torch.from_numpy(dataset.labels)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    steps_per_epoch = math.ceil(len(indices) / config.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, config.lr, total_steps=max(1, config.epochs * steps_per_epoch))
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    log = []
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = indices[rng.permutation(len(indices))]
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            b = torch.from_numpy(order[i:i + config.batch_size])
            x0, y = x_all[b], y_all[b].clone()
            drop = torch.rand(len(b), generator=gen) < config.p_uncond
            y[drop] = ckpt.null_token
            t = torch.randint(1, ckpt.T + 1, (len(b),), generator=gen)
            noise = torch.randn(x0.shape, generator=gen)
            pred = model(ckpt.q_sample(x0, t, noise), t, y)
            loss = F.mse_loss(pred, noise)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(b)
        log.append({"epoch": epoch, "split": "train", "loss": total / len(order), "accuracy": "",
                    "wall_seconds": time.perf_counter() - start})
    model.eval()
    return ckpt, log


@torch.no_grad()
def guided_eps(ckpt, x_t, t, class_id, guidance_scale):
    if class_id == ckpt.null_token:
        return ckpt.eps(x_t, t, ckpt.null_token)
    e_u = ckpt.eps(x_t, t, ckpt.null_token)
    e_c = ckpt.eps(x_t, t, class_id)
    return e_u + guidance_scale * (e_c - e_u)


@torch.no_grad()
def sample_diffusion(ckpt, class_id, count, guidance_scale=2.0, seed=0, batch_size=500):
    """Ancestral sampling over all T steps; returns images in [0, 1], shape (count, C, H, W)."""
    if not (0 <= class_id <= ckpt.null_token):
        raise ValueError(f"class_id {class_id} invalid")
    ckpt.model.eval()
    gen = torch.Generator().manual_seed(seed)
    shape = (count, ckpt.in_channels, ckpt.image_size, ckpt.image_size)
    x = torch.randn(shape, generator=gen)
    betas = ckpt.betas_t
    alphas = 1.0 - betas
    ab = ckpt.alphas_cumprod
    for t in range(ckpt.T, 0, -1):
        z = torch.randn(shape, generator=gen) if t > 1 else torch.zeros(shape)
        eps = torch.cat([guided_eps(ckpt, x[i:i + batch_size], t, class_id, guidance_scale)
                         for i in range(0, count, batch_size)]) if count else x
        mean = (x - betas[t - 1] / (1 - ab[t - 1]).sqrt() * eps) / alphas[t - 1].sqrt()
        x = mean + betas[t - 1].sqrt() * z
    return to_data_space(x)
