"""End-to-end editing pipeline: data generation, codec, edit, evaluation.

The flow mirrors the render -> invert -> jointly denoise -> re-optimize
loop: images and depths come straight from the splatting renderer, an
exactly invertible patch codec stands in for a learned VAE, and the edited
images supervise a fresh optimization of the original scene.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .attention import AlignmentConfig
from .diffusion import (Condition, GuidanceConfig, LatentCode, NoiseSchedule,
                        edit_batch, invert_batch)
from .render import render, optimize_scene
from .scene import Camera, Scene

# image values live on a fixed 12-bit grid so the codec roundtrip is exact
QUANT_LEVELS = 4096.0

STYLE_WARM, STYLE_COOL, STYLE_GRAY = 1, 2, 3
STYLE_LABELS = (STYLE_WARM, STYLE_COOL, STYLE_GRAY)


def subseed(seed: int, name: str) -> int:
    """Named deterministic sub-stream of a single master seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def quantize_image(image: torch.Tensor) -> torch.Tensor:
    """Snap to the 12-bit grid; exact in float32 (4096 is a power of two)."""
    return torch.round(torch.clamp(image, 0.0, 1.0) * QUANT_LEVELS) / QUANT_LEVELS


@dataclass
class PatchCodec:
    """Exactly invertible stand-in for a VAE: space-to-depth plus whitening.

    Operates on images quantized to the 12-bit grid. Whitening statistics
    are fixed from a training dataset; the internal affine runs in float64
    and decode snaps back to the grid, so decode(encode(x)) == x bit-exactly
    for every image in the codec's domain.
    """

    patch_size: int = 4
    mean: torch.Tensor | None = None  # (C,)
    std: torch.Tensor | None = None  # (C,)

    def channels(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def fit_whitening(self, images: list[torch.Tensor]) -> None:
        stacked = torch.stack([self._space_to_depth(quantize_image(img)) for img in images])
        flat = stacked.permute(1, 0, 2, 3).reshape(self.channels(), -1).to(torch.float64)
        mean = flat.mean(dim=1)
        # keep the offset on the quantization grid so decode stays exact
        self.mean = torch.round(mean * QUANT_LEVELS) / QUANT_LEVELS
        self.std = torch.clamp(flat.std(dim=1), min=1e-2)

    def _space_to_depth(self, image: torch.Tensor) -> torch.Tensor:
        h, w, _ = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
        x = image.reshape(h // p, p, w // p, p, 3)
        return x.permute(1, 3, 4, 0, 2).reshape(self.channels(), h // p, w // p)

    def _depth_to_space(self, latent: torch.Tensor) -> torch.Tensor:
        p = self.patch_size
        _, hh, ww = latent.shape
        x = latent.reshape(p, p, 3, hh, ww)
        return x.permute(3, 0, 4, 1, 2).reshape(hh * p, ww * p, 3)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if self.mean is None:
            raise ValueError("codec whitening statistics not fitted")
        planes = self._space_to_depth(quantize_image(image)).to(torch.float64)
        white = (planes - self.mean.reshape(-1, 1, 1)) / self.std.reshape(-1, 1, 1)
        return white.to(torch.float32)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        planes = latent.to(torch.float64) * self.std.reshape(-1, 1, 1) + self.mean.reshape(-1, 1, 1)
        image = self._depth_to_space(planes.to(torch.float32))
        return quantize_image(image)


# ---------------------------------------------------------------------------
# synthetic multi-view dataset


@dataclass
class SceneRecord:
    scene: Scene
    cameras: list[Camera]
    images: torch.Tensor  # (V, H, W, 3)
    depths: torch.Tensor  # (V, H, W)
    alphas: torch.Tensor  # (V, H, W)
    label: int


def ring_cameras(num_views: int, radius: float = 4.0, height: float = 1.2,
                 width: int = 64, image_height: int = 64, phase: float = 0.0) -> list[Camera]:
    cams = []
    for i in range(num_views):
        a = phase + 2.0 * math.pi * i / num_views
        eye = (radius * math.cos(a), radius * math.sin(a), height)
        cams.append(Camera.look_at(eye=eye, target=(0.0, 0.0, 0.0),
                                   width=width, height=image_height))
    return cams


def _style_colors(gen: torch.Generator, n: int, label: int) -> torch.Tensor:
    u = torch.rand(n, 3, generator=gen)
    if label == STYLE_WARM:
        r = 0.65 + 0.35 * u[:, 0]
        g = 0.15 + 0.45 * u[:, 1]
        b = 0.05 + 0.20 * u[:, 2]
    elif label == STYLE_COOL:
        b = 0.65 + 0.35 * u[:, 0]
        g = 0.25 + 0.45 * u[:, 1]
        r = 0.05 + 0.20 * u[:, 2]
    elif label == STYLE_GRAY:
        v = 0.30 + 0.50 * u[:, 0]
        jitter = 0.05 * (u[:, 1:] - 0.5)
        r = v + jitter[:, 0]
        g = v
        b = v + jitter[:, 1]
    else:
        raise ValueError(f"unknown style label {label}")
    return torch.stack([r, g, b], dim=1).clamp(0.0, 1.0)


def random_scene(gen: torch.Generator, label: int, num_gaussians: int | None = None) -> Scene:
    """Random blob cluster; geometry is style-independent, colors are not."""
    if num_gaussians is None:
        num_gaussians = int(torch.randint(20, 81, (1,), generator=gen))
    n = num_gaussians
    means = torch.randn(n, 3, generator=gen) * 0.7
    quats = torch.randn(n, 4, generator=gen)
    log_scales = torch.rand(n, 3, generator=gen) * 0.7 - 1.8
    opacity = torch.rand(n, generator=gen) * 3.0 + 0.5
    colors = _style_colors(gen, n, label)
    return Scene(means, quats, log_scales, opacity, colors,
                 background_color=(0.05, 0.05, 0.08))


def render_record(scene: Scene, cameras: list[Camera], label: int) -> SceneRecord:
    views = [render(scene, cam) for cam in cameras]
    return SceneRecord(
        scene=scene,
        cameras=cameras,
        images=torch.stack([v.color for v in views]),
        depths=torch.stack([v.depth for v in views]),
        alphas=torch.stack([v.alpha for v in views]),
        label=label,
    )


def generate_synthetic_dataset(seed: int, num_scenes: int, views_per_scene: int,
                               width: int = 64, height: int = 64) -> list[SceneRecord]:
    """Labeled 360-degree multi-view scenes, reproducible from the seed."""
    if num_scenes < 1 or views_per_scene < 1:
        raise ValueError("counts must be >= 1")
    records = []
    for i in range(num_scenes):
        label = STYLE_LABELS[i % len(STYLE_LABELS)]
        gen = torch.Generator().manual_seed(subseed(seed, f"scene-{i}"))
        scene = random_scene(gen, label)
        phase = float(torch.rand(1, generator=gen)) * 2.0 * math.pi
        cameras = ring_cameras(views_per_scene, width=width, image_height=height, phase=phase)
        records.append(render_record(scene, cameras, label))
    return records


# ---------------------------------------------------------------------------
# depth conditioning


DEPTH_FG_ALPHA = 1e-4


def normalize_depth(depth: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Per-image min-max to [0, 1]; empty pixels read as far plane (1)."""
    fg = alpha >= DEPTH_FG_ALPHA
    if not bool(fg.any()):
        return torch.ones_like(depth)
    lo = depth[fg].min()
    hi = depth[fg].max()
    norm = (depth - lo) / torch.clamp(hi - lo, min=1e-6)
    return torch.where(fg, norm.clamp(0.0, 1.0), torch.ones_like(depth))


def depth_to_latent_grid(depth: torch.Tensor, alpha: torch.Tensor,
                         grid_hw: tuple[int, int]) -> torch.Tensor:
    norm = normalize_depth(depth, alpha)
    return F.interpolate(norm.reshape(1, 1, *norm.shape), size=grid_hw,
                         mode="bilinear", align_corners=False)[0]


# ---------------------------------------------------------------------------
# style classifier (nearest mean-color centroid)


@dataclass
class StyleClassifier:
    centroids: dict[int, torch.Tensor] = field(default_factory=dict)

    def fit(self, images: list[torch.Tensor], labels: list[int]) -> None:
        sums: dict[int, torch.Tensor] = {}
        counts: dict[int, int] = {}
        for img, lab in zip(images, labels):
            feat = img.reshape(-1, 3).mean(dim=0)
            sums[lab] = sums.get(lab, torch.zeros(3)) + feat
            counts[lab] = counts.get(lab, 0) + 1
        self.centroids = {lab: sums[lab] / counts[lab] for lab in sums}

    def predict(self, image: torch.Tensor) -> int:
        feat = image.reshape(-1, 3).mean(dim=0)
        labs = sorted(self.centroids)
        dists = [(feat - self.centroids[lab]).norm().item() for lab in labs]
        return labs[min(range(len(labs)), key=dists.__getitem__)]

    def to_dict(self) -> dict:
        return {str(k): v.tolist() for k, v in self.centroids.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "StyleClassifier":
        return cls({int(k): torch.tensor(v) for k, v in doc.items()})


# ---------------------------------------------------------------------------
# edit job


@dataclass
class EditJob:
    scene: Scene
    cameras: list[Camera]
    source_condition: Condition
    target_condition: Condition
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    alignment: AlignmentConfig = field(default_factory=lambda: AlignmentConfig(lam=0.6))
    num_references: int = 4
    masks: list[torch.Tensor] | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise ValueError("an edit job needs at least 2 cameras")
        if self.masks is not None and len(self.masks) != len(self.cameras):
            raise ValueError("mask count must match view count")


@dataclass
class EditResult:
    original_images: torch.Tensor  # (V, H, W, 3)
    depths: torch.Tensor  # (V, H, W)
    alphas: torch.Tensor  # (V, H, W)
    edited_images: torch.Tensor  # (V, H, W, 3)
    targets: torch.Tensor  # (V, H, W, 3) supervision after mask compositing
    edited_scene: Scene
    inverted_latents: list[LatentCode]
    reference_ids: list[int]


def choose_references(num_views: int, num_references: int, seed: int) -> list[int]:
    gen = torch.Generator().manual_seed(subseed(seed, "reference-views"))
    perm = torch.randperm(num_views, generator=gen)
    return sorted(perm[:min(num_references, num_views)].tolist())


def run_edit(job: EditJob, denoiser, sched: NoiseSchedule, codec: PatchCodec,
             opt_steps: int = 1000, start_from_noise: bool = False) -> EditResult:
    """Full edit: render, invert, jointly denoise, composite, re-optimize.

    `start_from_noise` replaces the inverted latents with seeded Gaussian
    noise, turning the edit into pure depth-conditioned generation (the
    ablation arm); the default path inverts the rendered views first.
    """
    views = [render(job.scene, cam) for cam in job.cameras]
    originals = torch.stack([v.color for v in views])
    depths = torch.stack([v.depth for v in views])
    alphas = torch.stack([v.alpha for v in views])

    images = [quantize_image(v.color) for v in views]
    latents0 = [LatentCode(codec.encode(img), timestep=0, view_id=i)
                for i, img in enumerate(images)]
    grid_hw = latents0[0].data.shape[-2:]
    depth_cond = torch.stack([depth_to_latent_grid(d, a, grid_hw)
                              for d, a in zip(depths, alphas)])

    if start_from_noise:
        gen = torch.Generator().manual_seed(subseed(job.seed, "noise-start"))
        zt = [LatentCode(torch.randn(latents0[0].data.shape, generator=gen),
                         timestep=sched.num_grid_steps, view_id=i)
              for i in range(len(job.cameras))]
        inverted = []
    else:
        zt = invert_batch(latents0, job.source_condition, depth_cond, denoiser, sched)
        inverted = [z.clone() for z in zt]

    align = job.alignment
    if align.enabled and not align.reference_ids:
        refs = choose_references(len(job.cameras), job.num_references, job.seed)
        align = AlignmentConfig(lam=align.lam, reference_ids=refs, enabled=True)

    edited_latents = edit_batch(zt, job.target_condition, depth_cond, denoiser,
                                sched, job.guidance, align)
    edited = torch.stack([codec.decode(z.data) for z in edited_latents])

    if job.masks is not None:
        targets = []
        for k in range(len(job.cameras)):
            m = job.masks[k].to(edited.dtype).unsqueeze(-1)
            targets.append(m * edited[k] + (1.0 - m) * originals[k])
        targets = torch.stack(targets)
    else:
        targets = edited

    edited_scene = optimize_scene(
        job.scene, [(cam, targets[k], None) for k, cam in enumerate(job.cameras)],
        num_steps=opt_steps)

    return EditResult(original_images=originals, depths=depths, alphas=alphas,
                      edited_images=edited, targets=targets,
                      edited_scene=edited_scene, inverted_latents=inverted,
                      reference_ids=list(align.reference_ids))


# ---------------------------------------------------------------------------
# consistency evaluation


@dataclass
class ConsistencyReport:
    reprojection_error: float
    color_dispersion: float
    edit_magnitude: float
    target_class_rate: float = float("nan")

    def to_text(self) -> str:
        lines = [f"reprojection_error = {self.reprojection_error:.6f}",
                 f"color_dispersion = {self.color_dispersion:.6f}",
                 f"edit_magnitude = {self.edit_magnitude:.6f}",
                 f"target_class_rate = {self.target_class_rate:.6f}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ConsistencyReport":
        kv = {}
        for line in text.splitlines():
            k, _, v = line.partition("=")
            kv[k.strip()] = float(v.strip())
        return cls(reprojection_error=kv["reprojection_error"],
                   color_dispersion=kv["color_dispersion"],
                   edit_magnitude=kv["edit_magnitude"],
                   target_class_rate=kv.get("target_class_rate", float("nan")))


def reproject_pixels(depth: torch.Tensor, cam_src: Camera, cam_dst: Camera):
    """Map every source pixel through its depth into destination pixel coords.

    Returns (x_dst, y_dst, z_dst) as (H, W) tensors in the destination view.
    """
    h, w = depth.shape
    ys = torch.arange(h, dtype=depth.dtype)
    xs = torch.arange(w, dtype=depth.dtype)
    py, px = torch.meshgrid(ys, xs, indexing="ij")
    z = depth
    x_cam = (px - cam_src.cx) / cam_src.fx * z
    y_cam = (py - cam_src.cy) / cam_src.fy * z
    pts_cam = torch.stack([x_cam, y_cam, z], dim=-1)
    r_src = cam_src.rotation.to(depth.dtype)
    t_src = cam_src.translation.to(depth.dtype)
    world = (pts_cam - t_src) @ r_src  # R^T (p - t)
    dst = cam_dst.world_to_camera(world)
    zd = dst[..., 2]
    zs = torch.clamp(zd, min=1e-6)
    xd = cam_dst.fx * dst[..., 0] / zs + cam_dst.cx
    yd = cam_dst.fy * dst[..., 1] / zs + cam_dst.cy
    return xd, yd, zd


def _bilinear_sample(image: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample an (H, W, C) image at float pixel coords; coords must be in range."""
    h, w, _ = image.shape
    x0 = torch.clamp(x.floor().long(), 0, w - 2)
    y0 = torch.clamp(y.floor().long(), 0, h - 2)
    fx = (x - x0).clamp(0.0, 1.0).unsqueeze(-1)
    fy = (y - y0).clamp(0.0, 1.0).unsqueeze(-1)
    c00 = image[y0, x0]
    c01 = image[y0, x0 + 1]
    c10 = image[y0 + 1, x0]
    c11 = image[y0 + 1, x0 + 1]
    return ((1 - fy) * ((1 - fx) * c00 + fx * c01)
            + fy * ((1 - fx) * c10 + fx * c11))


def reprojection_photometric_error(images: torch.Tensor, depths: torch.Tensor,
                                   alphas: torch.Tensor, cameras: list[Camera],
                                   opaque_alpha: float = 0.95,
                                   depth_tol: float = 0.15) -> float:
    """Median photometric error when warping each view onto its ring neighbor.

    Only well-covered (opaque) source pixels are scored, and only where the
    warped depth agrees with the destination depth (visibility check).
    """
    v = images.shape[0]
    errors = []
    for i in range(v):
        j = (i + 1) % v
        xd, yd, zd = reproject_pixels(depths[i], cameras[i], cameras[j])
        h, w = depths[i].shape
        valid = ((alphas[i] >= opaque_alpha) & (zd > cameras[j].near_clip)
                 & (xd >= 0) & (xd <= w - 1) & (yd >= 0) & (yd <= h - 1))
        if not bool(valid.any()):
            continue
        sampled = _bilinear_sample(images[j], xd, yd)
        dst_depth = _bilinear_sample(depths[j].unsqueeze(-1), xd, yd)[..., 0]
        dst_alpha = _bilinear_sample(alphas[j].unsqueeze(-1), xd, yd)[..., 0]
        visible = valid & (dst_alpha >= opaque_alpha) \
            & ((zd - dst_depth).abs() <= depth_tol * torch.clamp(dst_depth, min=1e-6))
        if not bool(visible.any()):
            continue
        diff = (images[i] - sampled).abs().mean(dim=-1)
        errors.append(diff[visible])
    if not errors:
        return float("nan")
    return torch.cat(errors).median().item()


def color_dispersion(images: torch.Tensor) -> float:
    """Std across views of per-view mean color, averaged over channels."""
    means = images.mean(dim=(1, 2))  # (V, 3)
    return means.std(dim=0).mean().item()


def edit_magnitude(edited: torch.Tensor, originals: torch.Tensor) -> float:
    """Mean per-pixel Euclidean RGB distance to the originals."""
    return (edited - originals).norm(dim=-1).mean().item()


def evaluate(originals: torch.Tensor, edited: torch.Tensor, depths: torch.Tensor,
             alphas: torch.Tensor, cameras: list[Camera],
             classifier: StyleClassifier | None = None,
             target_label: int | None = None) -> ConsistencyReport:
    if originals.shape != edited.shape:
        raise ValueError("original/edited view counts or shapes differ")
    rate = float("nan")
    if classifier is not None and target_label is not None:
        hits = sum(classifier.predict(img) == target_label for img in edited)
        rate = hits / edited.shape[0]
    return ConsistencyReport(
        reprojection_error=reprojection_photometric_error(edited, depths, alphas, cameras),
        color_dispersion=color_dispersion(edited),
        edit_magnitude=edit_magnitude(edited, originals),
        target_class_rate=rate,
    )
