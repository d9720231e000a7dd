"""Noise-prediction backends.

Two implementations of the same predict() contract:

* MixtureOracle -- exact minimum-MSE noise predictor for a Gaussian mixture
  under the forward process z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps. Used
  to verify every sampler property without any training.
* ToyDenoiser -- a small conv/attention net with a condition-label
  embedding and a zero-initialized depth-conditioning side branch. Its
  image self-attention layers are routed through the cross-view alignment
  operator.

predict(latents, t, condition, depths, align, view_ids) takes a stacked
(V, C, h, w) batch, a train-step index, a Condition, per-view depth maps
resized to the latent grid, an AlignmentConfig and the batch's view ids,
and returns the (V, C, h, w) noise prediction without tracking gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .attention import AlignmentConfig, AttentionWeights, batch_align_layer
from .diffusion import Condition, NoiseSchedule, build_schedule
from .gten import read_gten, write_gten


# ---------------------------------------------------------------------------
# analytic oracle


@dataclass
class MixtureComponent:
    mean: torch.Tensor  # broadcastable to the latent shape
    variance: float
    weight: float


class MixtureOracle:
    """Exact posterior-mean noise predictor for a Gaussian mixture.

    condition_map sends a condition label to the subset of component
    indices active under that condition; weights are renormalized within
    the subset. Depth maps and the alignment config are ignored: the
    oracle is a verification stand-in for the trained model.
    """

    def __init__(self, components: list[MixtureComponent],
                 condition_map: dict[int, list[int]], sched: NoiseSchedule):
        if not components:
            raise ValueError("need at least one mixture component")
        for c in components:
            if c.variance < 0:
                raise ValueError("component variance must be >= 0")
        self.components = components
        self.condition_map = condition_map
        self.sched = sched

    def _subset(self, cond: Condition) -> list[int]:
        idx = self.condition_map.get(cond.label)
        if not idx:
            raise ValueError(f"condition label {cond.label} maps to no components")
        return idx

    def posterior_mean(self, z: torch.Tensor, t: int, cond: Condition) -> torch.Tensor:
        """Responsibility-weighted E[z0 | z_t] over the active components."""
        a = self.sched.alpha_bar[t].item()
        idx = self._subset(cond)
        comps = [self.components[i] for i in idx]
        sqrt_a = math.sqrt(a)

        log_resp = []
        for c in comps:
            var_t = a * c.variance + (1.0 - a)
            diff = z - sqrt_a * c.mean.to(z.dtype)
            n = z.numel()
            log_resp.append(math.log(c.weight)
                            - 0.5 * (diff * diff).sum().item() / var_t
                            - 0.5 * n * math.log(2 * math.pi * var_t))
        log_resp = torch.tensor(log_resp, dtype=torch.float64)
        resp = torch.softmax(log_resp, dim=0)

        post = torch.zeros_like(z)
        for r, c in zip(resp.tolist(), comps):
            var_t = a * c.variance + (1.0 - a)
            mean_k = c.mean.to(z.dtype)
            gain = sqrt_a * c.variance / var_t
            post = post + r * (mean_k + gain * (z - sqrt_a * mean_k))
        return post

    def oracle_predict(self, z: torch.Tensor, t: int, cond: Condition) -> torch.Tensor:
        a = self.sched.alpha_bar[t].item()
        if 1.0 - a < 1e-12:
            # z_t carries no noise at ab = 1; the MMSE prediction is E[eps] = 0
            return torch.zeros_like(z)
        post = self.posterior_mean(z, t, cond)
        return (z - math.sqrt(a) * post) / math.sqrt(1.0 - a)

    def predict(self, latents: torch.Tensor, t: int, cond: Condition,
                depths=None, align: AlignmentConfig | None = None,
                view_ids=None) -> torch.Tensor:
        with torch.no_grad():
            return torch.stack([self.oracle_predict(z, t, cond) for z in latents])


# ---------------------------------------------------------------------------
# toy trainable denoiser


def sinusoidal_embedding(t: int, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    ang = t * freqs
    return torch.cat([torch.cos(ang), torch.sin(ang)])


class ConvBlock(nn.Module):
    """Two 3x3 convs with a per-channel embedding bias in between."""

    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, channels)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, emb):
        if emb.dim() == 1:
            emb = emb.unsqueeze(0)
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(emb).unsqueeze(-1).unsqueeze(-1)
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class AlignedSelfAttention(nn.Module):
    """Image self-attention layer routed through the alignment operator."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads:
            raise ValueError("channels must divide evenly into heads")
        c = channels // num_heads
        scale = channels ** -0.5
        self.w_q = nn.Parameter(torch.randn(num_heads, channels, c) * scale)
        self.w_k = nn.Parameter(torch.randn(num_heads, channels, c) * scale)
        self.w_v = nn.Parameter(torch.randn(num_heads, channels, c) * scale)
        self.norm = nn.GroupNorm(8, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(self, x, align: AlignmentConfig, view_ids):
        v, ch, h, w = x.shape
        tokens = self.norm(x).reshape(v, ch, h * w).permute(0, 2, 1)
        weights = AttentionWeights(self.w_q, self.w_k, self.w_v)
        attended = batch_align_layer(tokens, view_ids, align, weights)
        out = self.out_proj(attended).permute(0, 2, 1).reshape(v, ch, h, w)
        return x + out


class DepthBranch(nn.Module):
    """Encoder mirror over the depth map; injects through zero-init 1x1 maps."""

    def __init__(self, widths: tuple[int, int, int], emb_dim: int):
        super().__init__()
        w0, w1, w2 = widths
        self.stem = nn.Conv2d(1, w0, 3, padding=1)
        self.block0 = ConvBlock(w0, emb_dim)
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.block1 = ConvBlock(w1, emb_dim)
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.block2 = ConvBlock(w2, emb_dim)
        self.inject = nn.ModuleList([nn.Conv2d(w, w, 1) for w in widths])
        for conv in self.inject:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, depth, emb):
        f0 = self.block0(self.stem(depth), emb)
        f1 = self.block1(self.down1(f0), emb)
        f2 = self.block2(self.down2(f1), emb)
        return [self.inject[0](f0), self.inject[1](f1), self.inject[2](f2)]


class ToyDenoiser(nn.Module):
    """2-down/2-up conv net with aligned attention at 8x8 and the 4x4 bottleneck.

    The output is parameterized as the analytic whitened-data fallback
    sqrt(1 - ab_t) * z_t plus a learned correction with a small-gain head,
    so an untrained model already matches the fallback predictor and
    training spends its capacity on data structure and conditioning
    instead of re-learning the identity map through the normalized trunk.
    """

    def __init__(self, in_channels: int = 48, base_width: int = 32,
                 num_labels: int = 4, emb_dim: int = 64, num_heads: int = 4,
                 depth_strength: float = 1.0, num_train_steps: int = 1000):
        super().__init__()
        w0, w1, w2 = base_width, base_width * 2, base_width * 4
        self.config = {
            "in_channels": in_channels, "base_width": base_width,
            "num_labels": num_labels, "emb_dim": emb_dim,
            "num_heads": num_heads, "depth_strength": depth_strength,
            "num_train_steps": num_train_steps,
        }
        self.depth_strength = depth_strength
        self.num_labels = num_labels

        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(),
                                      nn.Linear(emb_dim, emb_dim))
        self.cond_embed = nn.Embedding(num_labels, emb_dim)
        self.emb_dim = emb_dim

        self.stem = nn.Conv2d(in_channels, w0, 3, padding=1)
        self.enc0 = ConvBlock(w0, emb_dim)
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.enc1 = ConvBlock(w1, emb_dim)
        self.attn_mid = AlignedSelfAttention(w1, num_heads)
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = ConvBlock(w2, emb_dim)
        self.attn_bottom = AlignedSelfAttention(w2, num_heads)
        self.up1 = nn.ConvTranspose2d(w2, w1, 2, stride=2)
        self.dec1 = ConvBlock(w1, emb_dim)
        self.up2 = nn.ConvTranspose2d(w1, w0, 2, stride=2)
        self.dec0 = ConvBlock(w0, emb_dim)
        self.head = nn.Conv2d(w0, in_channels, 3, padding=1)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.zero_()
        self.register_buffer(
            "alpha_bar",
            build_schedule(num_train_steps, 1).alpha_bar.to(torch.float32))

        self.depth_branch = DepthBranch((w0, w1, w2), emb_dim)

    def forward(self, latents: torch.Tensor, t, cond_labels: torch.Tensor,
                depths: torch.Tensor, align: AlignmentConfig, view_ids) -> torch.Tensor:
        if latents.dim() != 4:
            raise ValueError("latents must be (V, C, h, w)")
        if depths.shape[-2:] != latents.shape[-2:]:
            raise ValueError("depth maps must be resized to the latent grid")
        if int(cond_labels.max()) >= self.num_labels or int(cond_labels.min()) < 0:
            raise ValueError("unknown condition label")

        if not torch.is_tensor(t):
            t = torch.tensor(float(t))
        temb = self.time_mlp(sinusoidal_embedding(int(t), self.emb_dim))
        cemb = self.cond_embed(cond_labels)
        # per-view embeddings collapse to one vector when labels agree;
        # blocks consume a single (emb_dim,) vector per call
        emb = temb.unsqueeze(0) + cemb  # (V, emb_dim)

        # the side branch sees the same time/condition embedding as the trunk
        d0, d1, d2 = self.depth_branch(depths, emb)

        x = self.stem(latents)
        x = self.enc0(x, emb)
        x = x + self.depth_strength * d0
        skip0 = x
        x = self.down1(x)
        x = self.enc1(x, emb)
        x = x + self.depth_strength * d1
        x = self.attn_mid(x, align, view_ids)
        skip1 = x
        x = self.down2(x)
        x = self.enc2(x, emb)
        x = x + self.depth_strength * d2
        x = self.attn_bottom(x, align, view_ids)
        x = self.up1(x) + skip1
        x = self.dec1(x, emb)
        x = self.up2(x) + skip0
        x = self.dec0(x, emb)
        fallback_gain = torch.sqrt(1.0 - self.alpha_bar[int(t)])
        return fallback_gain * latents + self.head(x)

    def predict(self, latents: torch.Tensor, t: int, cond: Condition,
                depths: torch.Tensor, align: AlignmentConfig, view_ids) -> torch.Tensor:
        labels = torch.full((latents.shape[0],), cond.label, dtype=torch.long)
        with torch.no_grad():
            return self.forward(latents, t, labels, depths, align, view_ids)

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for name, tensor in self.state_dict().items():
            fname = name.replace(".", "__") + ".gten"
            write_gten(directory / fname, tensor.detach().numpy())
            names.append({"name": name, "file": fname, "shape": list(tensor.shape)})
        manifest = {"config": self.config, "tensors": names}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load_checkpoint(cls, directory: str | Path) -> "ToyDenoiser":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        model = cls(**manifest["config"])
        state = {}
        for entry in manifest["tensors"]:
            arr = torch.from_numpy(read_gten(directory / entry["file"]))
            state[entry["name"]] = arr.reshape(entry["shape"])
        model.load_state_dict(state)
        return model


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingSet:
    """Encoded training triples: latents (N,C,h,w), labels (N,), depths (N,1,h,w)."""

    latents: torch.Tensor
    labels: torch.Tensor
    depths: torch.Tensor


def baseline_eps_mse(latents: torch.Tensor, sched: NoiseSchedule,
                     seed: int = 0, num_batches: int = 64) -> float:
    """MSE of the whitened-data fallback predictor sqrt(1 - ab_t) * z_t."""
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(num_batches):
        i = torch.randint(0, latents.shape[0], (16,), generator=gen)
        t = int(torch.randint(1, sched.num_train_steps + 1, (1,), generator=gen))
        a = sched.alpha_bar[t].item()
        eps = torch.randn(latents[i].shape, generator=gen)
        z_t = math.sqrt(a) * latents[i] + math.sqrt(1 - a) * eps
        pred = math.sqrt(1 - a) * z_t
        total += ((pred - eps) ** 2).mean().item()
        count += 1
    return total / count


def train_toy_denoiser(dataset: TrainingSet, sched: NoiseSchedule,
                       num_steps: int = 6000, batch_size: int = 16,
                       lr: float = 1e-3, seed: int = 0,
                       null_drop_rate: float = 0.1,
                       val_fraction: float = 0.1,
                       model: ToyDenoiser | None = None,
                       log_every: int = 0) -> tuple[ToyDenoiser, dict]:
    """Standard eps-prediction MSE training with classifier-free label drop.

    10% of condition labels are dropped to the null label so guided
    sampling has a usable unconditional branch. Returns the model and a
    report containing the loss curve, validation MSE and the fallback
    baseline it must beat.
    """
    n = dataset.latents.shape[0]
    if n == 0:
        raise ValueError("training dataset is empty")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)

    n_val = max(1, int(n * val_fraction))
    perm = torch.randperm(n, generator=gen)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    if model is None:
        num_labels = int(dataset.labels.max().item()) + 1
        model = ToyDenoiser(in_channels=dataset.latents.shape[1], num_labels=num_labels)
    align_off = AlignmentConfig(lam=1.0, reference_ids=[], enabled=False)

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=num_steps, eta_min=lr * 0.05)
    curve = []
    for step in range(num_steps):
        i = train_idx[torch.randint(0, len(train_idx), (batch_size,), generator=gen)]
        z0 = dataset.latents[i]
        labels = dataset.labels[i].clone()
        drop = torch.rand(batch_size, generator=gen) < null_drop_rate
        labels[drop] = 0
        depths = dataset.depths[i]
        t = int(torch.randint(1, sched.num_train_steps + 1, (1,), generator=gen))
        a = sched.alpha_bar[t].item()
        eps = torch.randn(z0.shape, generator=gen)
        z_t = math.sqrt(a) * z0 + math.sqrt(1 - a) * eps

        pred = model(z_t, t, labels, depths, align_off, list(range(batch_size)))
        loss = ((pred - eps) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        scheduler.step()
        curve.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            recent = sum(curve[-log_every:]) / log_every
            print(f"train step {step + 1}: eps-mse {recent:.4f}")

    val_mse = validate_eps_mse(model, dataset, val_idx, sched, seed=seed + 1)
    report = {
        "loss_curve": curve,
        "val_eps_mse": val_mse,
        "baseline_eps_mse": baseline_eps_mse(dataset.latents[val_idx], sched, seed=seed + 2),
        "num_steps": num_steps,
    }
    return model, report


def validate_eps_mse(model: ToyDenoiser, dataset: TrainingSet, idx: torch.Tensor,
                     sched: NoiseSchedule, seed: int = 0, num_batches: int = 64) -> float:
    gen = torch.Generator().manual_seed(seed)
    align_off = AlignmentConfig(lam=1.0, reference_ids=[], enabled=False)
    total = 0.0
    with torch.no_grad():
        for _ in range(num_batches):
            i = idx[torch.randint(0, len(idx), (16,), generator=gen)]
            t = int(torch.randint(1, sched.num_train_steps + 1, (1,), generator=gen))
            a = sched.alpha_bar[t].item()
            eps = torch.randn(dataset.latents[i].shape, generator=gen)
            z_t = math.sqrt(a) * dataset.latents[i] + math.sqrt(1 - a) * eps
            pred = model(z_t, t, dataset.labels[i], dataset.depths[i], align_off,
                         list(range(len(i))))
            total += ((pred - eps) ** 2).mean().item()
    return total / num_batches
