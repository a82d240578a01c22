"""Run configuration.

Config files are flat ``key = value`` text with ``[section]`` headers
(configparser syntax).  Every key has a default, so an empty or absent
file is a valid configuration; unknown sections or keys are rejected
rather than silently ignored.  Command-line overrides are applied after
the file.
"""

import configparser
import os
from dataclasses import dataclass, fields

import numpy as np

from .association import FeatureFileMatcher, GroundTruthMatcher
from .errors import ConfigError, WorldSpecError
from .jointrefine import JointRefineConfig, default_pair_policy
from .splatmap import MapOptimizeConfig
from .synthgen import WorldSpec

FORMATS = ("generic", "tum")


@dataclass
class PipelineConfig:
    # dataset
    dataset: str = ""
    format: str = "generic"
    stride: int = 1
    max_frames: int = 0  # 0 means no cap
    # matching
    window: int = 5
    anchor_stride: int = 10
    min_matches: int = 8
    pixel_sigma: float = 0.0
    outlier_fraction: float = 0.0
    matcher_seed: int = 0
    # refine
    lambda_c: float = 1.0
    lambda_l: float = 20.0
    lambda_j: float = 10.0
    huber_pixel: float = 2.0
    huber_meter: float = 0.1
    ransac_iters: int = 1000
    inlier_thresh: float = 0.05
    min_inliers: int = 12
    angle_tol_deg: float = 2.0
    trans_tol: float = 0.1
    rate_threshold: float = 0.5
    lift_radius: float = 3.0
    normal_neighbors: int = 10
    planarity_ratio: float = 0.2
    pair_max_dist: float = 0.2
    max_lidar_pairs_per_edge: int = 200
    track_reproj_tol: float = 5.0
    min_track_length: int = 2
    max_outer_iters: int = 10
    extrinsic_tol_rot: float = 1e-4
    extrinsic_tol_trans: float = 1e-4
    r_s_unused: float = 0.3  # reserved smoothing weight; no consumer
    # mapping
    iters_per_frame: int = 60
    lambda_color: float = 0.5
    lambda_depth: float = 1.0
    lambda_ssim: float = 0.2
    keyframe_stride: int = 5
    silhouette_threshold: float = 0.99
    prune_opacity: float = 0.005
    lr_position: float = 1e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_radius: float = 1e-3
    # run
    seed: int = 0
    threads: int = 1
    out: str = "out"
    scene: str = "synthetic"

    def validate(self, require_dataset=False):
        if self.format not in FORMATS:
            raise ConfigError(f"unknown dataset format {self.format!r}")
        if require_dataset and not self.dataset:
            raise ConfigError("no dataset path configured")
        if self.dataset and not os.path.exists(self.dataset):
            raise ConfigError(f"dataset path {self.dataset!r} does not exist")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.max_frames < 0:
            raise ConfigError("max_frames must be >= 0")
        if self.window < 1 or self.anchor_stride < 1:
            raise ConfigError("match window and anchor stride must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for name in (
            "lambda_c",
            "lambda_l",
            "lambda_j",
            "lambda_color",
            "lambda_depth",
            "lambda_ssim",
            "r_s_unused",
            "pixel_sigma",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError("outlier_fraction outside [0, 1)")
        if self.iters_per_frame < 0 or self.max_outer_iters < 1:
            raise ConfigError("iteration budgets out of range")
        return self

    def refine_config(self):
        return JointRefineConfig(
            lambda_c=self.lambda_c,
            lambda_l=self.lambda_l,
            lambda_j=self.lambda_j,
            huber_pixel=self.huber_pixel,
            huber_meter=self.huber_meter,
            ransac_iters=self.ransac_iters,
            inlier_thresh=self.inlier_thresh,
            min_inliers=self.min_inliers,
            angle_tol=np.radians(self.angle_tol_deg),
            trans_tol=self.trans_tol,
            rate_threshold=self.rate_threshold,
            lift_radius=self.lift_radius,
            normal_neighbors=self.normal_neighbors,
            planarity_ratio=self.planarity_ratio,
            pair_max_dist=self.pair_max_dist,
            max_lidar_pairs_per_edge=self.max_lidar_pairs_per_edge,
            track_reproj_tol=self.track_reproj_tol,
            min_track_length=self.min_track_length,
            max_outer_iters=self.max_outer_iters,
            extrinsic_tol_rot=self.extrinsic_tol_rot,
            extrinsic_tol_trans=self.extrinsic_tol_trans,
            seed=self.seed,
        )

    def map_config(self):
        return MapOptimizeConfig(
            iters_per_frame=self.iters_per_frame,
            lr_position=self.lr_position,
            lr_color=self.lr_color,
            lr_opacity=self.lr_opacity,
            lr_radius=self.lr_radius,
            prune_opacity=self.prune_opacity,
            lambda_color=self.lambda_color,
            lambda_depth=self.lambda_depth,
            lambda_ssim=self.lambda_ssim,
            keyframe_stride=self.keyframe_stride,
            silhouette_threshold=self.silhouette_threshold,
            seed=self.seed,
        )

    def matcher(self):
        if self.pixel_sigma > 0 or self.outlier_fraction > 0:
            return GroundTruthMatcher(
                self.pixel_sigma, self.outlier_fraction, self.matcher_seed, self.min_matches
            )
        return FeatureFileMatcher(self.min_matches)

    def pairs(self, n_frames):
        return default_pair_policy(n_frames, self.window, self.anchor_stride)


SECTIONS = {
    "dataset": ("dataset", "format", "stride", "max_frames"),
    "matching": (
        "window",
        "anchor_stride",
        "min_matches",
        "pixel_sigma",
        "outlier_fraction",
        "matcher_seed",
    ),
    "refine": (
        "lambda_c",
        "lambda_l",
        "lambda_j",
        "huber_pixel",
        "huber_meter",
        "ransac_iters",
        "inlier_thresh",
        "min_inliers",
        "angle_tol_deg",
        "trans_tol",
        "rate_threshold",
        "lift_radius",
        "normal_neighbors",
        "planarity_ratio",
        "pair_max_dist",
        "max_lidar_pairs_per_edge",
        "track_reproj_tol",
        "min_track_length",
        "max_outer_iters",
        "extrinsic_tol_rot",
        "extrinsic_tol_trans",
        "r_s_unused",
    ),
    "mapping": (
        "iters_per_frame",
        "lambda_color",
        "lambda_depth",
        "lambda_ssim",
        "keyframe_stride",
        "silhouette_threshold",
        "prune_opacity",
        "lr_position",
        "lr_color",
        "lr_opacity",
        "lr_radius",
    ),
    "run": ("seed", "threads", "out", "scene"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}
_FIELD_SECTION = {name: sec for sec, names in SECTIONS.items() for name in names}


def _coerce(name, raw):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {name!r}: cannot parse {raw!r}")
    return raw


def _parse(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path!r}: {exc}")
    return parser


def load_config(path=None, overrides=None):
    """Config from an optional file plus a {field: value} override map."""
    cfg = PipelineConfig()
    if path is not None:
        parser = _parse(path)
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                setattr(cfg, key, _coerce(key, raw))
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config override {key!r}")
        if value is not None:
            setattr(cfg, key, _coerce(key, value) if isinstance(value, str) else value)
    return cfg.validate()


def dump_config(cfg):
    """Render a config as file text (used for the run manifest)."""
    lines = []
    for section, names in SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {getattr(cfg, name)}")
        lines.append("")
    return "\n".join(lines)


_WORLD_TYPES = {f.name: f.type for f in fields(WorldSpec)}


def load_world_spec(path=None):
    """World parameters from a ``[world]`` section; defaults otherwise."""
    spec = WorldSpec()
    if path is None:
        return spec
    parser = _parse(path)
    for section in parser.sections():
        if section != "world":
            raise WorldSpecError(f"unknown spec section [{section}]")
        for key, raw in parser.items(section):
            if key not in _WORLD_TYPES:
                raise WorldSpecError(f"unknown world key {key!r}")
            current = getattr(spec, key)
            try:
                if isinstance(current, tuple):
                    value = tuple(float(tok) for tok in raw.replace(",", " ").split())
                elif isinstance(current, int):
                    value = int(raw)
                else:
                    value = float(raw)
            except ValueError:
                raise WorldSpecError(f"world key {key!r}: cannot parse {raw!r}")
            setattr(spec, key, value)
    spec.validate()
    return spec
