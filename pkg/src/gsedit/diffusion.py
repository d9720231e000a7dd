"""Deterministic DDIM machinery: schedule, inversion and guided denoising.

Everything here is generic over any noise predictor implementing
`predict(latents, t, condition, depths, align)`. The sampler is the
eta = 0 deterministic DDIM; there is no stochastic branch because the
editing method depends on exact inversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch


@dataclass
class NoiseSchedule:
    """Cumulative signal-retention coefficients and the DDIM step grid.

    alpha_bar has num_train_steps + 1 entries with alpha_bar[0] = 1 by
    convention; timestep_grid is the strictly increasing subsequence of
    train steps actually visited, with endpoints {0, num_train_steps}.
    """

    num_train_steps: int
    alpha_bar: torch.Tensor
    timestep_grid: list[int]

    @property
    def num_grid_steps(self) -> int:
        return len(self.timestep_grid) - 1

    def save(self, path: str | Path) -> None:
        lines = [f"num_train_steps = {self.num_train_steps}",
                 f"beta_min = {float(self._beta_range[0])}",
                 f"beta_max = {float(self._beta_range[1])}",
                 "grid = " + ",".join(str(t) for t in self.timestep_grid)]
        Path(path).write_text("\n".join(lines) + "\n")

    _beta_range: tuple[float, float] = field(default=(1e-4, 2e-2), repr=False)


BETA_MIN = 1e-4
BETA_MAX = 2e-2


def build_schedule(num_train_steps: int, num_ddim_steps: int) -> NoiseSchedule:
    """Linear-beta schedule with an evenly spaced DDIM timestep grid."""
    if num_train_steps < 1:
        raise ValueError("num_train_steps must be >= 1")
    if not (1 <= num_ddim_steps <= num_train_steps):
        raise ValueError("need 1 <= num_ddim_steps <= num_train_steps")
    betas = torch.linspace(BETA_MIN, BETA_MAX, num_train_steps, dtype=torch.float64)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64),
                           torch.cumprod(1.0 - betas, dim=0)])
    grid_f = torch.linspace(0, num_train_steps, num_ddim_steps + 1)
    grid = sorted(set(int(round(v)) for v in grid_f.tolist()))
    return NoiseSchedule(num_train_steps=num_train_steps,
                         alpha_bar=alpha_bar.to(torch.float32),
                         timestep_grid=grid)


def load_schedule(path: str | Path) -> NoiseSchedule:
    kv = {}
    for line in Path(path).read_text().splitlines():
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    sched = build_schedule(int(kv["num_train_steps"]), 1)
    sched.timestep_grid = [int(t) for t in kv["grid"].split(",")]
    return sched


@dataclass
class LatentCode:
    data: torch.Tensor  # (C, h, w)
    timestep: int  # index into the schedule's timestep_grid
    view_id: int = 0

    def clone(self) -> "LatentCode":
        return LatentCode(self.data.clone(), self.timestep, self.view_id)


@dataclass(frozen=True)
class Condition:
    """Discrete stand-in for a text prompt; label 0 is the null condition."""

    label: int

    def __post_init__(self):
        if self.label < 0:
            raise ValueError("condition label must be >= 0")


NULL_CONDITION = Condition(0)


@dataclass
class GuidanceConfig:
    omega: float = 1.0


def _coeffs(sched: NoiseSchedule, t_from: int, t_to: int):
    a_from = sched.alpha_bar[t_from].item()
    a_to = sched.alpha_bar[t_to].item()
    scale = (a_to / a_from) ** 0.5
    return scale, (1.0 - a_to) ** 0.5 - scale * (1.0 - a_from) ** 0.5


def invert_step(z: LatentCode, eps: torch.Tensor, sched: NoiseSchedule) -> LatentCode:
    """One deterministic step toward noise, using the supplied prediction."""
    if z.timestep >= sched.num_grid_steps:
        raise ValueError("latent already at the last grid step")
    if eps.shape != z.data.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(z.data.shape)}")
    t, t_next = sched.timestep_grid[z.timestep], sched.timestep_grid[z.timestep + 1]
    scale, noise_coef = _coeffs(sched, t, t_next)
    return LatentCode(scale * z.data + noise_coef * eps, z.timestep + 1, z.view_id)


def denoise_step(z: LatentCode, eps: torch.Tensor, sched: NoiseSchedule) -> LatentCode:
    """One deterministic step toward data; exact algebraic inverse of invert_step."""
    if z.timestep <= 0:
        raise ValueError("latent already at the first grid step")
    if eps.shape != z.data.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(z.data.shape)}")
    t, t_prev = sched.timestep_grid[z.timestep], sched.timestep_grid[z.timestep - 1]
    scale, noise_coef = _coeffs(sched, t, t_prev)
    return LatentCode(scale * z.data + noise_coef * eps, z.timestep - 1, z.view_id)


def guided_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor,
                 g: GuidanceConfig) -> torch.Tensor:
    """Classifier-free guidance blend; exact identity at omega in {0, 1}."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional/unconditional shapes differ")
    if g.omega == 1.0:
        return eps_cond
    if g.omega == 0.0:
        return eps_uncond
    return eps_uncond + g.omega * (eps_cond - eps_uncond)


# Fixed-point iterations per inversion step. Each inversion step solves for
# the noise prediction at the *destination* state, making the step the exact
# algebraic inverse of the subsequent denoise step; 5 iterations push the
# per-step residual below float32 noise.
INVERSION_FIXED_POINT_ITERS = 5


def invert_batch(latents, condition: Condition, depths, denoiser,
                 sched: NoiseSchedule) -> list[LatentCode]:
    """Invert every view from t=0 to t=T under the source condition.

    Views are inverted independently (no cross-view coupling and no
    guidance). Each grid step runs a short fixed-point iteration so that the
    denoising pass, which evaluates the predictor at its current state,
    retraces the inversion trajectory to within float32 round-off.
    """
    from .attention import AlignmentConfig

    if not latents:
        return []
    shape = latents[0].data.shape
    for z in latents:
        if z.timestep != 0:
            raise ValueError("invert_batch expects all latents at t = 0")
        if z.data.shape != shape:
            raise ValueError("latent shapes differ across views")

    align_off = AlignmentConfig(lam=1.0, reference_ids=[], enabled=False)
    zs = [z.clone() for z in latents]
    view_ids = [z.view_id for z in latents]
    for i in range(sched.num_grid_steps):
        t, t_next = sched.timestep_grid[i], sched.timestep_grid[i + 1]
        stack = torch.stack([z.data for z in zs])
        eps = denoiser.predict(stack, t, condition, depths, align_off, view_ids)
        for _ in range(INVERSION_FIXED_POINT_ITERS):
            nxt = torch.stack([
                invert_step(z, eps[k], sched).data for k, z in enumerate(zs)])
            eps = denoiser.predict(nxt, t_next, condition, depths, align_off, view_ids)
        zs = [invert_step(z, eps[k], sched) for k, z in enumerate(zs)]
    return zs


def edit_batch(latents_t, edit_condition: Condition, depths, denoiser,
               sched: NoiseSchedule, g: GuidanceConfig, align) -> list[LatentCode]:
    """Jointly denoise all views from t=T to t=0 under the edit condition.

    Both the conditional and the unconditional pass run with the alignment
    operator active over the same reference set; reference latents evolve in
    the same batch.
    """
    if not latents_t:
        return []
    view_ids = [z.view_id for z in latents_t]
    if align.enabled and not set(align.reference_ids) <= set(view_ids):
        raise ValueError("alignment reference ids must be a subset of batch view ids")
    for z in latents_t:
        if z.timestep != sched.num_grid_steps:
            raise ValueError("edit_batch expects all latents at t = T")

    zs = [z.clone() for z in latents_t]
    for i in range(sched.num_grid_steps, 0, -1):
        t = sched.timestep_grid[i]
        stack = torch.stack([z.data for z in zs])
        eps_cond = denoiser.predict(stack, t, edit_condition, depths, align, view_ids)
        if g.omega == 1.0:
            eps = eps_cond
        else:
            eps_uncond = denoiser.predict(stack, t, NULL_CONDITION, depths, align, view_ids)
            eps = guided_noise(eps_cond, eps_uncond, g)
        zs = [denoise_step(z, eps[k], sched) for k, z in enumerate(zs)]
    return zs
