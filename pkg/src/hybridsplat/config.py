"""Mapping configuration and its key-value text file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a comment.
Unknown keys are rejected so typos fail loudly. Every field of
:class:`SceneConfig` can be set this way; ``SceneConfig().to_text()`` writes a
fully documented default file.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import FormatError


@dataclass
class SceneConfig:
    # scene families
    sky_radius: float = field(default=500.0, metadata={"doc": "sky sphere radius R (m)"})
    sky_thickness: float = field(default=1.0, metadata={"doc": "fixed radial scale of sky Gaussians (m)"})
    plane_thickness: float = field(default=0.02, metadata={"doc": "fixed normal-axis scale of road Gaussians (m)"})
    plane_distance_threshold: float = field(default=0.15, metadata={"doc": "D_th, road inlier distance (m)"})
    ransac_iterations: int = field(default=200, metadata={"doc": "RANSAC hypotheses per plane fit"})

    # densify / prune
    alpha_threshold: float = field(default=0.005, metadata={"doc": "alpha_th, activated opacity prune threshold"})
    scale_threshold: float = field(default=1.0, metadata={"doc": "s_th, max activated scale before pruning (m)"})
    grad_threshold: float = field(default=2e-4, metadata={"doc": "tau_grad, mean 2D position gradient for densify (px)"})
    split_size_fraction: float = field(default=0.05, metadata={"doc": "split when max scale >= this * scene extent"})
    densify_interval: int = field(default=20, metadata={"doc": "iterations between densify rounds"})

    # loss weights
    lambda_dssim: float = field(default=0.2, metadata={"doc": "lambda, D-SSIM share of the RGB loss"})
    lambda_rgb: float = field(default=1.0, metadata={"doc": "lambda_RGB"})
    lambda_lidar: float = field(default=0.5, metadata={"doc": "lambda_LiDAR"})
    lambda_smooth: float = field(default=0.1, metadata={"doc": "lambda_smooth"})
    lambda_iso: float = field(default=10.0, metadata={"doc": "lambda_iso"})
    lambda_reg: float = field(default=1.0, metadata={"doc": "lambda_reg"})

    # keyframes / schedule
    keyframe_count: int = field(default=10, metadata={"doc": "K, keyframe list length"})
    keyframe_interval: int = field(default=5, metadata={"doc": "n, resample the keyframe list every n frames"})
    iterations_per_frame: int = field(default=100, metadata={"doc": "optimization iterations per incoming frame"})
    importance_interval: int = field(default=5, metadata={"doc": "iterations between importance samples"})
    importance_prune_every: int = field(default=2, metadata={"doc": "frames between importance prunes"})

    # adaptive update
    silhouette_add_threshold: float = field(default=0.5, metadata={"doc": "S_th, seed where silhouette is below"})
    silhouette_filter_threshold: float = field(default=0.9, metadata={"doc": "S_filter, depth valid where silhouette >= this"})
    prune_rate: float = field(default=3.0, metadata={"doc": "eta, importance prune percentage"})
    mde_gate: float = field(default=50.0, metadata={"doc": "seed where depth L1 > mde_gate * MDE"})

    # feature depth
    flow_threshold: float = field(default=2.0, metadata={"doc": "f_th, min flow for triangulation (px)"})
    depth_calibration_default: float = field(default=2000.0, metadata={"doc": "C0 = d_th*f_th/tan(theta_th) fallback (m*px)"})
    theta_min_deg: float = field(default=1.0, metadata={"doc": "lower clamp on ray/axis angle (deg)"})
    seed_radius_px: float = field(default=2.0, metadata={"doc": "seed radius in pixels at its depth"})
    match_stride: int = field(default=3, metadata={"doc": "pixel stride of ground-truth correspondences"})

    # learning rates
    lr_position: float = field(default=1.6e-4, metadata={"doc": "position lr, multiplied by scene extent"})
    lr_color: float = field(default=2.5e-3, metadata={"doc": "color lr"})
    lr_opacity: float = field(default=5e-2, metadata={"doc": "opacity logit lr"})
    lr_scale: float = field(default=5e-3, metadata={"doc": "log-scale lr"})
    lr_rotation: float = field(default=1e-3, metadata={"doc": "quaternion lr"})

    # rasterizer
    tile_size: int = field(default=16, metadata={"doc": "tile edge (px)"})
    near_plane: float = field(default=0.1, metadata={"doc": "cull primitives nearer than this (m)"})
    sort_inliers: bool = field(default=False, metadata={"doc": "depth-sort road Gaussians too"})

    # mesh
    voxel_size: float = field(default=0.1, metadata={"doc": "TSDF voxel edge (m)"})
    truncation_voxels: float = field(default=4.0, metadata={"doc": "TSDF truncation in voxels"})
    max_weight: float = field(default=64.0, metadata={"doc": "TSDF weight cap"})

    seed: int = field(default=0, metadata={"doc": "global RNG seed"})

    def __post_init__(self):
        self.validate()

    def validate(self) -> "SceneConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "sort_inliers"):
                continue
            if f.name == "prune_rate":
                if not 0 <= v < 100:
                    raise ValueError("prune_rate must lie in [0, 100)")
            elif f.name == "lambda_dssim":
                if not 0 <= v <= 1:
                    raise ValueError("lambda_dssim must lie in [0, 1]")
            elif f.name.startswith("lambda_"):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        return self

    def replace(self, **changes) -> "SceneConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = ["# hybridsplat mapping configuration (key = value)"]
        for f in fields(self):
            lines.append(f"# {f.metadata.get('doc', '')}")
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"config line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(types[key], val, lineno)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "SceneConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _parse_value(type_name, val: str, lineno: int):
    try:
        if type_name in (bool, "bool"):
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if type_name in (int, "int"):
            return int(val)
        return float(val)
    except ValueError:
        raise FormatError(f"config line {lineno}: bad value {val!r}") from None
