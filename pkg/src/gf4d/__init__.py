"""Dynamic 3D Gaussian fields driven by control points.

Pieces, roughly in pipeline order: :mod:`gf4d.synth` builds oracle scenes,
:mod:`gf4d.render` splats Gaussians into RGB / alpha / depth / normal / flow
maps, :mod:`gf4d.losses` and :mod:`gf4d.trainer` fit a field in three stages,
:mod:`gf4d.tokenflow` regenerates views with flow-guided token propagation,
and :mod:`gf4d.metrics` scores the result.
"""

from .checkpoint import load_checkpoint, save_checkpoint, save_field
from .data import FlowMap, MultiviewSequence, compose_flows
from .errors import FormatError, InvalidArgument, MissingInput, TrainingAborted, UndefinedResult
from .field import DeformationNet, GaussianField, Gaussians, attach_controls, deform
from .losses import LossReport, LossWeights, total_loss
from .metrics import endpoint_error, psnr, ssim
from .render import Camera, default_cameras, rasterize, render_flow, render_sequence
from .synth import SceneSpec, make_scene
from .tokenflow import (FeatureVolume, GenerationConfig, KeyframeSchedule, ToyDenoiser, propagate,
                        regenerate_pipeline, run_generation, warp_features)
from .trainer import TrainConfig, TrainState, new_state, train_stage

__version__ = "0.1.0"

__all__ = [
    "Camera", "DeformationNet", "FeatureVolume", "FlowMap", "FormatError", "GaussianField", "Gaussians",
    "GenerationConfig", "InvalidArgument", "KeyframeSchedule", "LossReport", "LossWeights", "MissingInput",
    "MultiviewSequence", "SceneSpec", "ToyDenoiser", "TrainConfig", "TrainState", "TrainingAborted",
    "UndefinedResult", "attach_controls", "compose_flows", "default_cameras", "deform", "endpoint_error",
    "load_checkpoint", "make_scene", "new_state", "propagate", "psnr", "rasterize", "regenerate_pipeline",
    "render_flow", "render_sequence", "run_generation", "save_checkpoint", "save_field", "ssim",
    "total_loss", "train_stage", "warp_features",
]
