from .types import Gaussian, ProjectedGaussian, RenderBuffers
from .render import alpha_at, project_gaussian, render, render_backward, render_brute
from .gmap import GaussianMap, load_map, save_map
from .ssim import ssim
from .mapping import (
    MapOptimizeConfig,
    init_from_frame,
    mapping_loss,
    optimize_map,
    project_depth_map,
    update_map,
)

__all__ = [
    "Gaussian",
    "ProjectedGaussian",
    "RenderBuffers",
    "GaussianMap",
    "MapOptimizeConfig",
    "alpha_at",
    "init_from_frame",
    "load_map",
    "mapping_loss",
    "optimize_map",
    "project_depth_map",
    "project_gaussian",
    "render",
    "render_backward",
    "render_brute",
    "save_map",
    "ssim",
    "update_map",
]
