"""Pipeline configuration: an INI file with sections [scene], [trajectory],
[artifacts], [sector], [camera], [tsdf], [icp], [compound], overridable from
the command line with repeated ``--set section.key=value`` options.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .icp import IcpConfig
from .sector import SectorParams
from .sim import (SCENE_PRESETS, ArtifactSpec, Capsule, Ellipsoid, FanSpec,
                  PhantomScene, Sphere, TrajectorySpec, VolumeSpec)
from .tracking import TrackerConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class CameraConfig:
    width: int = 480
    height: int = 480
    mode: str = "auto"              # auto | manual
    distance_mm: float | None = None
    view_angle_deg: float | None = None
    near_mm: float = 1.0


@dataclass(frozen=True)
class CompoundConfig:
    spacing_mm: float | None = None
    max_dim: int = 320


@dataclass(frozen=True)
class PipelineConfig:
    scene: PhantomScene = field(default_factory=lambda: SCENE_PRESETS["fetal_head"]())
    fan: FanSpec = field(default_factory=FanSpec)
    frames: VolumeSpec = field(default_factory=VolumeSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    artifacts: ArtifactSpec = field(default_factory=ArtifactSpec)
    sector: SectorParams = field(default_factory=SectorParams)
    camera: CameraConfig = field(default_factory=CameraConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    compound: CompoundConfig = field(default_factory=CompoundConfig)
    discriminator_threshold: float = 75.0


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _parse_primitive(text: str):
    """One primitive per key: 'kind label cx cy cz <shape...> mean std'.

    sphere:    sphere    label cx cy cz radius mean std
    ellipsoid: ellipsoid label cx cy cz rx ry rz mean std
    capsule:   capsule   label x0 y0 z0 x1 y1 z1 radius mean std
    """
    parts = text.split()
    kind = parts[0].lower()
    label = parts[1].lower()
    vals = [float(p) for p in parts[2:]]
    if kind == "sphere" and len(vals) == 6:
        return Sphere(center=tuple(vals[0:3]), radius=vals[3], label=label,
                      mean=vals[4], std=vals[5])
    if kind == "ellipsoid" and len(vals) == 8:
        return Ellipsoid(center=tuple(vals[0:3]), radii=tuple(vals[3:6]),
                         label=label, mean=vals[6], std=vals[7])
    if kind == "capsule" and len(vals) == 9:
        return Capsule(p0=tuple(vals[0:3]), p1=tuple(vals[3:6]), radius=vals[6],
                       label=label, mean=vals[7], std=vals[8])
    raise ConfigError(f"cannot parse primitive spec {text!r}")


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Read the INI file (all sections optional) and apply overrides given
    as 'section.key=value' strings."""
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config not found: {path}")
        parser.read(path)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        key, value = item.split("=", 1)
        section, option = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), option.strip(), value.strip())

    def get(section, key, fallback=None):
        return parser.get(section, key, fallback=fallback)

    # [scene]
    preset = get("scene", "preset", fallback="fetal_head")
    primitives = []
    if parser.has_section("scene"):
        for key, value in parser.items("scene"):
            if key.startswith("primitive"):
                primitives.append(_parse_primitive(value))
    if primitives:
        scene = PhantomScene(
            primitives=tuple(primitives),
            background_mean=float(get("scene", "background_mean", "30.0")),
            background_std=float(get("scene", "background_std", "0.0")))
    else:
        if preset not in SCENE_PRESETS:
            raise ConfigError(f"unknown scene preset {preset!r}")
        base = SCENE_PRESETS[preset]()
        scene = PhantomScene(
            primitives=base.primitives,
            background_mean=float(get("scene", "background_mean",
                                      str(base.background_mean))),
            background_std=float(get("scene", "background_std",
                                     str(base.background_std))))

    fan = FanSpec(
        depth_yz_mm=float(get("scene", "fan_depth_yz_mm", "20.0")),
        angle_yz_deg=float(get("scene", "fan_angle_yz_deg", "60.0")),
        depth_xy_mm=float(get("scene", "fan_depth_xy_mm", "25.0")),
        angle_xy_deg=float(get("scene", "fan_angle_xy_deg", "70.0")),
        range_mm=float(get("scene", "fan_range_mm", "150.0")))
    frames = VolumeSpec(
        dims=_ints(get("scene", "frame_dims", "128 128 128")),
        spacing=_floats(get("scene", "frame_spacing_mm", "1.0 1.0 1.0")))

    # [trajectory]
    axis_text = get("trajectory", "orbit_axis", "y")
    orbit_axis = axis_text if axis_text in ("x", "y", "z") else _floats(axis_text)
    standoff = get("trajectory", "standoff_mm", "")
    trajectory = TrajectorySpec(
        frames=int(get("trajectory", "frames", "30")),
        rotation_step_deg=float(get("trajectory", "rotation_step_deg", "5.0")),
        translation_step_mm=float(get("trajectory", "translation_step_mm", "3.0")),
        pattern=get("trajectory", "pattern", "orbit"),
        seed=int(get("trajectory", "seed", "0")),
        standoff_mm=float(standoff) if standoff else None,
        orbit_axis=orbit_axis,
        sweep_axis=get("trajectory", "sweep_axis", "x"))

    artifacts = ArtifactSpec(
        shadow_probability=float(get("artifacts", "shadow_probability", "0.0")),
        shadow_cone_angle_deg=float(get("artifacts", "shadow_cone_angle_deg", "20.0")),
        dropout_probability=float(get("artifacts", "dropout_probability", "0.0")),
        speckle_std=float(get("artifacts", "speckle_std", "0.0")))

    sector = SectorParams(
        threshold=float(get("sector", "threshold", "1.0")),
        closing_kernel=int(get("sector", "closing_kernel", "5")),
        canny_sigma=float(get("sector", "canny_sigma", "1.4")),
        canny_low_ratio=float(get("sector", "canny_low_ratio", "0.10")),
        canny_high_ratio=float(get("sector", "canny_high_ratio", "0.30")),
        hough_angle_step_deg=float(get("sector", "hough_angle_step_deg", "0.5")),
        hough_rho_step_px=float(get("sector", "hough_rho_step_px", "1.0")),
        min_line_separation_deg=float(get("sector", "min_line_separation_deg", "10.0")),
        refine_band_px=float(get("sector", "refine_band_px", "1.5")))

    camera = CameraConfig(
        width=int(get("camera", "width", "480")),
        height=int(get("camera", "height", "480")),
        mode=get("camera", "mode", "auto"),
        distance_mm=float(get("camera", "distance_mm"))
        if get("camera", "distance_mm") else None,
        view_angle_deg=float(get("camera", "view_angle_deg"))
        if get("camera", "view_angle_deg") else None,
        near_mm=float(get("camera", "near_mm", "1.0")))

    icp = IcpConfig(
        pyramid_levels=int(get("icp", "pyramid_levels", "3")),
        iterations_per_level=_ints(get("icp", "iterations_per_level", "10 5 4")),
        distance_gate_mm=float(get("icp", "distance_gate_mm", "25.0")),
        normal_gate_deg=float(get("icp", "normal_gate_deg", "30.0")))
    voxel = get("tsdf", "voxel_size_mm", "")
    tracker = TrackerConfig(
        icp=icp,
        min_inlier_ratio=float(get("icp", "min_inlier_ratio", "0.25")),
        max_mean_residual_mm=float(get("icp", "max_mean_residual_mm", "10.0")),
        grid_max_dim=int(get("tsdf", "max_dim", "256")),
        grid_extent_scale=float(get("tsdf", "extent_scale", "1.5")),
        grid_voxel_size_mm=float(voxel) if voxel else None,
        truncation_voxels=float(get("tsdf", "truncation_voxels", "4.0")),
        max_weight=float(get("tsdf", "max_weight", "64.0")),
        max_incidence_deg=float(get("icp", "max_incidence_deg", "75.0")))

    comp_spacing = get("compound", "spacing_mm", "")
    compound = CompoundConfig(
        spacing_mm=float(comp_spacing) if comp_spacing else None,
        max_dim=int(get("compound", "max_dim", "320")))

    return PipelineConfig(
        scene=scene, fan=fan, frames=frames, trajectory=trajectory,
        artifacts=artifacts, sector=sector, camera=camera, tracker=tracker,
        compound=compound,
        discriminator_threshold=float(get("scene", "discriminator_threshold", "75.0")))
