"""Dataclass configuration plus the plain-text config file format.

Files are sections of ``key = value`` lines (configparser grammar) with a
required versioned header comment::

    # gvio-config v1
    [scenario]
    trajectory = figure8
    ...

One file can carry scenario, noise, camera, landmark, gnss and filter
sections; each command reads the sections it needs.  Unknown keys are
rejected so typos fail loudly (exit code 2 from the CLI).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

CONFIG_HEADER = "# gvio-config v1"


@dataclass
class TrajectorySpec:
    kind: str = "figure8"            # static | line | circle | figure8 | helix
    duration: float = 60.0
    radius: float = 20.0             # circle/helix, m
    speed: float = 3.0               # line/circle/helix tangential, m/s
    amp_x: float = 30.0              # figure8, m
    amp_y: float = 15.0              # figure8, m
    period: float = 40.0             # figure8, s
    height: float = 12.0             # initial/constant height, m
    climb_rate: float = 0.0          # helix, m/s
    pitch: float = 0.0               # constant body pitch, rad
    heading: float = 0.0             # initial heading, rad


@dataclass
class NoiseConfig:
    gyro_noise_density: float = 2.0e-4    # rad/s/sqrt(Hz)
    accel_noise_density: float = 2.0e-3   # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1.0e-6
    accel_bias_walk: float = 1.0e-5
    pixel_sigma: float = 1.0              # px
    focal_px: float = 460.0
    pseudorange_sigma: float = 1.0        # m
    rangerate_sigma: float = 0.1          # m/s
    clock_bias_walk: float = 0.1          # m/sqrt(s)
    clock_drift_walk: float = 0.01        # m/s/sqrt(s)

    @property
    def meas_sigma(self):
        return self.pixel_sigma / self.focal_px


@dataclass
class CameraConfig:
    rate: float = 10.0
    fov_deg: float = 70.0
    depth_min: float = 0.5
    depth_max: float = 80.0
    max_features: int = 100
    feature_lifetime: int = 40     # frames a feature stays trackable
    stereo: bool = False
    baseline: float = 0.12         # m, right camera along left +x
    mount_pitch_deg: float = 0.0   # optical axis pitched down from body +x


@dataclass
class LandmarkConfig:
    count: int = 1200
    box_center: tuple = (0.0, 0.0, 4.0)
    box_size: tuple = (110.0, 80.0, 36.0)


@dataclass
class GnssScenarioConfig:
    rate: float = 5.0
    origin_lat_deg: float = 30.2
    origin_lon_deg: float = 119.9
    origin_height: float = 80.0
    world_yaw: float = 0.35        # true world->ENU yaw, rad
    world_offset: tuple = (2.0, 1.0, 0.5)
    sats_gps: int = 8
    sats_bds: int = 0
    sats_gal: int = 0
    sats_glo: int = 0
    geometry_seed: int = 7
    elevation_floor_deg: float = 15.0
    static_satellites: bool = False
    orbit_radius: float = 26.6e6
    delay_d0: float = 2.0          # m
    delay_d1: float = 3.0          # m / sin(elevation)
    delay_mismatch: float = 0.0    # m added to measurements, not to the model
    initial_clock_bias: float = 50.0   # m, per-constellation seed offsets scale
    initial_clock_drift: float = 1.5   # m/s
    dropout_windows: tuple = ()    # ((t0, t1, visible_count), ...)


@dataclass
class ScenarioConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    imu_rate: float = 200.0
    seed: int = 42
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    landmarks: LandmarkConfig = field(default_factory=LandmarkConfig)
    gnss: GnssScenarioConfig = field(default_factory=GnssScenarioConfig)

    def validate(self):
        if self.trajectory.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.imu_rate <= 0 or self.camera.rate <= 0 or self.gnss.rate <= 0:
            raise ConfigError("rates must be positive")
        if self.imu_rate < self.camera.rate:
            raise ConfigError("imu rate must be at least the camera rate")
        for name, rate in (("camera", self.camera.rate), ("gnss", self.gnss.rate)):
            ratio = self.imu_rate / rate
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError(
                    f"imu rate must be an integer multiple of the {name} rate")
        if self.trajectory.kind not in ("static", "line", "circle",
                                        "figure8", "helix"):
            raise ConfigError(f"unknown trajectory {self.trajectory.kind!r}")
        return self


@dataclass
class FilterConfig:
    n_max: int = 20
    m_max: int = 12
    promote_span: int = 20
    chi2_confidence: float = 0.95
    slam_fail_limit: int = 3
    depth_min: float = 0.2
    depth_max: float = 300.0
    reproj_gate_mult: float = 3.0
    init_var_orientation: float = 1e-2   # rad^2 (roll/pitch)
    init_var_yaw: float = -1.0           # rad^2; < 0 means same as orientation
    init_var_position: float = 1e-2
    init_var_velocity: float = 1e-2
    init_var_bias: float = 1e-4
    init_var_extrinsics: float = 1e-4
    estimate_extrinsics: bool = True
    trapezoidal_qd: bool = False
    sample_init_error: bool = True       # draw the initial error from P0
    # gnss side
    elevation_mask_deg: float = 10.0
    align_min_samples: int = 10
    align_min_span: float = 5.0
    align_refine: bool = False
    align_known: bool = False   # take the world->ECEF transform from the
                                # simulation truth (consistency studies)
    clock_bias_prior_var: float = 900.0
    clock_drift_prior_var: float = 9.0
    soft_sync_tol: float = 0.05
    max_gdop: float = 20.0


_SECTION_MAP = {
    "scenario": ("scenario-root", None),
    "noise": ("noise", NoiseConfig),
    "camera": ("camera", CameraConfig),
    "landmarks": ("landmarks", LandmarkConfig),
    "gnss": ("gnss", GnssScenarioConfig),
    "filter": ("filter", FilterConfig),
}

# [scenario] carries both the trajectory fields and the top-level ones;
# the trajectory kind is spelled "trajectory" in files
_SCENARIO_KEYS = ({f.name for f in dataclasses.fields(TrajectorySpec)}
                  - {"kind"}) | {"trajectory", "imu_rate", "seed"}


def _coerce(raw, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        if not raw:
            return ()
        if ";" in raw or ":" in raw:
            out = []
            for chunk in raw.split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                out.append(tuple(float(v) for v in chunk.split(":")))
            return tuple(out)
        return tuple(float(v) for v in raw.split(","))
    return raw


def _apply(obj, key, raw):
    if not hasattr(obj, key):
        raise ConfigError(f"unknown key {key!r} for section "
                          f"[{type(obj).__name__}]")
    try:
        setattr(obj, key, _coerce(raw, getattr(obj, key)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def parse_config_text(text):
    """Parse a config document into (ScenarioConfig, FilterConfig)."""
    stripped = text.lstrip()
    if not stripped.startswith(CONFIG_HEADER):
        raise ConfigError(f"missing version header {CONFIG_HEADER!r}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    scenario = ScenarioConfig()
    fcfg = FilterConfig()
    for section in parser.sections():
        if section not in _SECTION_MAP:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if section == "scenario":
                if key not in _SCENARIO_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [scenario]")
                if key == "trajectory":
                    scenario.trajectory.kind = raw.strip()
                elif key in ("imu_rate", "seed"):
                    _apply(scenario, key, raw)
                else:
                    _apply(scenario.trajectory, key, raw)
            elif section == "filter":
                _apply(fcfg, key, raw)
            else:
                _apply(getattr(scenario, _SECTION_MAP[section][0]), key, raw)
    scenario.validate()
    return scenario, fcfg


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def dump_config(scenario, fcfg=None):
    """Render configs back to the file format (defaults included)."""
    out = io.StringIO()
    out.write(CONFIG_HEADER + "\n")

    def write_section(name, obj, keys=None):
        out.write(f"\n[{name}]\n")
        for f in dataclasses.fields(obj):
            if keys is not None and f.name not in keys:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                if v and isinstance(v[0], tuple):
                    v = "; ".join(":".join(f"{u:g}" for u in w) for w in v)
                else:
                    v = ",".join(f"{u:g}" for u in v)
            out.write(f"{f.name} = {v}\n")

    out.write("\n[scenario]\n")
    out.write(f"trajectory = {scenario.trajectory.kind}\n")
    for f in dataclasses.fields(TrajectorySpec):
        if f.name != "kind":
            out.write(f"{f.name} = {getattr(scenario.trajectory, f.name)}\n")
    out.write(f"imu_rate = {scenario.imu_rate}\n")
    out.write(f"seed = {scenario.seed}\n")
    write_section("noise", scenario.noise)
    write_section("camera", scenario.camera)
    write_section("landmarks", scenario.landmarks)
    write_section("gnss", scenario.gnss)
    if fcfg is not None:
        write_section("filter", fcfg)
    return out.getvalue()


def gravity_vector():
    from .geometry import GRAVITY_W
    return GRAVITY_W.copy()


def vision_config_from(fcfg, noise, stereo_pose=None):
    from .vision import VisionConfig
    return VisionConfig(
        n_max=fcfg.n_max, m_max=fcfg.m_max, promote_span=fcfg.promote_span,
        chi2_confidence=fcfg.chi2_confidence, meas_sigma=noise.meas_sigma,
        depth_min=fcfg.depth_min, depth_max=fcfg.depth_max,
        reproj_gate_mult=fcfg.reproj_gate_mult,
        slam_fail_limit=fcfg.slam_fail_limit, stereo=stereo_pose,
    )


def gnss_config_from(fcfg, noise):
    from .gnss import GnssConfig
    return GnssConfig(
        pr_sigma=noise.pseudorange_sigma, rr_sigma=noise.rangerate_sigma,
        elevation_mask_deg=fcfg.elevation_mask_deg,
        chi2_confidence=fcfg.chi2_confidence,
        clock_bias_prior_var=fcfg.clock_bias_prior_var,
        clock_drift_prior_var=fcfg.clock_drift_prior_var,
        align_min_samples=fcfg.align_min_samples,
        align_min_span=fcfg.align_min_span, max_gdop=fcfg.max_gdop,
    )


def process_noise_from(noise):
    from .propagation import ProcessNoise
    return ProcessNoise(
        gyro_density=noise.gyro_noise_density,
        accel_density=noise.accel_noise_density,
        gyro_walk=noise.gyro_bias_walk, accel_walk=noise.accel_bias_walk,
        clock_bias_walk=noise.clock_bias_walk,
        clock_drift_walk=noise.clock_drift_walk,
    )
