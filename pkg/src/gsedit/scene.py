"""Explicit 3D Gaussian scene representation and camera model.

A scene is a fixed-size set of anisotropic 3D Gaussians, each carrying a
mean, a unit quaternion (w, x, y, z), per-axis log standard deviations, a
pre-sigmoid opacity and a linear-RGB color. Parameters are stored stacked
as tensors so rendering and optimization stay vectorized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch


@dataclass
class Gaussian3D:
    mean: tuple[float, float, float]
    quaternion: tuple[float, float, float, float]  # (w, x, y, z), unit norm
    log_scale: tuple[float, float, float]
    opacity_logit: float
    color: tuple[float, float, float]


class Scene:
    """Ordered collection of Gaussians plus a background color.

    The primitive count is fixed for the lifetime of the scene: the edit
    stage fine-tunes an existing reconstruction, so there is no
    densification or pruning.
    """

    def __init__(self, means, quaternions, log_scales, opacity_logits, colors,
                 background_color=(0.0, 0.0, 0.0), dtype=torch.float32):
        self.means = torch.as_tensor(means, dtype=dtype).reshape(-1, 3)
        n = self.means.shape[0]
        if n == 0:
            raise ValueError("scene must contain at least one Gaussian")
        self.quaternions = torch.as_tensor(quaternions, dtype=dtype).reshape(n, 4)
        self.log_scales = torch.as_tensor(log_scales, dtype=dtype).reshape(n, 3)
        self.opacity_logits = torch.as_tensor(opacity_logits, dtype=dtype).reshape(n)
        self.colors = torch.as_tensor(colors, dtype=dtype).reshape(n, 3)
        self.background_color = torch.as_tensor(background_color, dtype=dtype).reshape(3)
        self.normalize_quaternions_()

    @property
    def num_gaussians(self) -> int:
        return self.means.shape[0]

    @property
    def dtype(self):
        return self.means.dtype

    def normalize_quaternions_(self):
        self.quaternions = self.quaternions / self.quaternions.norm(dim=-1, keepdim=True)

    def extent(self) -> float:
        """Largest axis-aligned bounding-box side of the Gaussian means."""
        if self.num_gaussians == 1:
            return 1.0
        span = (self.means.max(dim=0).values - self.means.min(dim=0).values).max().item()
        return max(span, 1e-6)

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D], background_color=(0.0, 0.0, 0.0),
                       dtype=torch.float32) -> "Scene":
        return cls(
            [g.mean for g in gaussians],
            [g.quaternion for g in gaussians],
            [g.log_scale for g in gaussians],
            [g.opacity_logit for g in gaussians],
            [g.color for g in gaussians],
            background_color=background_color,
            dtype=dtype,
        )

    def clone(self) -> "Scene":
        return Scene(self.means.clone(), self.quaternions.clone(), self.log_scales.clone(),
                     self.opacity_logits.clone(), self.colors.clone(),
                     self.background_color.clone(), dtype=self.dtype)

    def to(self, dtype) -> "Scene":
        return Scene(self.means.to(dtype), self.quaternions.to(dtype), self.log_scales.to(dtype),
                     self.opacity_logits.to(dtype), self.colors.to(dtype),
                     self.background_color.to(dtype), dtype=dtype)

    # -- text serialization ------------------------------------------------

    def save(self, path: str | Path) -> None:
        doc = {
            "background_color": self.background_color.tolist(),
            "gaussians": [
                {
                    "mean": self.means[i].tolist(),
                    "quaternion": self.quaternions[i].tolist(),
                    "log_scale": self.log_scales[i].tolist(),
                    "opacity_logit": self.opacity_logits[i].item(),
                    "color": self.colors[i].tolist(),
                }
                for i in range(self.num_gaussians)
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path, dtype=torch.float32) -> "Scene":
        doc = json.loads(Path(path).read_text())
        gs = doc["gaussians"]
        return cls(
            [g["mean"] for g in gs],
            [g["quaternion"] for g in gs],
            [g["log_scale"] for g in gs],
            [g["opacity_logit"] for g in gs],
            [g["color"] for g in gs],
            background_color=doc["background_color"],
            dtype=dtype,
        )


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a rigid world-to-camera map.

    Pixel (row r, col c) samples the image plane at (x, y) = (c, r).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: torch.Tensor  # (3, 3) world-to-camera rotation
    translation: torch.Tensor  # (3,)
    near_clip: float = 0.1

    def __post_init__(self):
        self.rotation = torch.as_tensor(self.rotation, dtype=torch.float64).reshape(3, 3)
        self.translation = torch.as_tensor(self.translation, dtype=torch.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near_clip <= 0:
            raise ValueError("near_clip must be positive")
        err = (self.rotation.T @ self.rotation - torch.eye(3, dtype=torch.float64)).abs().max()
        if err > 1e-6:
            raise ValueError(f"world-to-camera rotation is not orthonormal (err {err:.3g})")

    def world_to_camera(self, points: torch.Tensor) -> torch.Tensor:
        r = self.rotation.to(points.dtype)
        t = self.translation.to(points.dtype)
        return points @ r.T + t

    def save(self, path: str | Path) -> None:
        w2c = torch.cat([self.rotation, self.translation.reshape(3, 1)], dim=1)
        doc = {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "near_clip": self.near_clip,
            "world_to_camera": w2c.tolist(),
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Camera":
        doc = json.loads(Path(path).read_text())
        w2c = torch.tensor(doc["world_to_camera"], dtype=torch.float64).reshape(3, 4)
        return cls(fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
                   width=doc["width"], height=doc["height"], near_clip=doc["near_clip"],
                   rotation=w2c[:, :3], translation=w2c[:, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg=50.0,
                width=64, height=64, near_clip=0.1) -> "Camera":
        """Camera at `eye` with +z looking toward `target` (y down, x right)."""
        eye = torch.as_tensor(eye, dtype=torch.float64)
        target = torch.as_tensor(target, dtype=torch.float64)
        up = torch.as_tensor(up, dtype=torch.float64)
        forward = target - eye
        forward = forward / forward.norm()
        right = torch.linalg.cross(forward, up)
        if right.norm() < 1e-8:
            right = torch.linalg.cross(forward, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))
        right = right / right.norm()
        down = torch.linalg.cross(forward, right)
        rot = torch.stack([right, down, forward])  # camera-from-world rows
        trans = -rot @ eye
        fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        fy = fx
        return cls(fx=fx, fy=fy, cx=(width - 1) / 2, cy=(height - 1) / 2,
                   width=width, height=height, rotation=rot, translation=trans,
                   near_clip=near_clip)


def quaternion_to_rotation(quat: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized here so gradients flow through the
    normalization when raw parameters drift off the unit sphere.
    """
    q = quat / quat.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rot = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))
    return rot


def covariance_from_rs(quaternion: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """World-space covariance R diag(exp(log_scale))^2 R^T for (...,) batches."""
    rot = quaternion_to_rotation(quaternion)
    s2 = torch.exp(2.0 * torch.as_tensor(log_scale, dtype=rot.dtype))
    return rot @ (s2.unsqueeze(-1) * rot.transpose(-1, -2))


def project_gaussians(means: torch.Tensor, quaternions: torch.Tensor,
                      log_scales: torch.Tensor, cam: Camera):
    """Splat a batch of Gaussians into camera pixel space.

    Returns (mean2d (N,2), cov2d (N,2,2), depth (N,), visible (N,) bool).
    cov2d is J R_wc Sigma R_wc^T J^T with J the Jacobian of perspective
    projection at the camera-frame mean. No low-pass term is added here;
    the rasterizer owns that regularization.
    """
    cam_pts = cam.world_to_camera(means)
    x, y, z = cam_pts.unbind(-1)
    visible = z > cam.near_clip
    zs = torch.where(visible, z, torch.ones_like(z))  # keep math finite when clipped

    mean2d = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], dim=-1)

    zero = torch.zeros_like(zs)
    jac = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / zs ** 2], dim=-1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / zs ** 2], dim=-1),
    ], dim=-2)  # (N, 2, 3)

    sigma = covariance_from_rs(quaternions, log_scales)
    r = cam.rotation.to(means.dtype)
    sigma_cam = r @ sigma @ r.T
    cov2d = jac @ sigma_cam @ jac.transpose(-1, -2)
    return mean2d, cov2d, z, visible


def project_gaussian(g: Gaussian3D, cam: Camera, dtype=torch.float64):
    """Single-Gaussian convenience wrapper around project_gaussians."""
    mean = torch.as_tensor(g.mean, dtype=dtype).reshape(1, 3)
    quat = torch.as_tensor(g.quaternion, dtype=dtype).reshape(1, 4)
    ls = torch.as_tensor(g.log_scale, dtype=dtype).reshape(1, 3)
    mean2d, cov2d, depth, visible = project_gaussians(mean, quat, ls, cam)
    return mean2d[0], cov2d[0], depth[0].item(), bool(visible[0])
