"""visray: occlusion-aware differentiable volume renderer.

Multi-view images in, novel-view frames out. A density volume is fitted in
the target camera's frustum; per-view visibility volumes derived from it
weight each input view's contribution at every ray sample, and rays are
integrated in feature space before a light upsampling head produces the
final image. Fully differentiable end to end with hand-written adjoints.
"""

from .camera import Camera, DepthPlaneMap, FrustumGrid, plane_depth, plane_index, project, select_nearest_views, unproject
from .pipeline import RenderConfig, RenderOutput, render_frame
from .scene import MultiViewDataset, SyntheticScene, generate_scene, load_dataset, psnr, save_dataset, ssim
from .optim import SceneParams, fit_scene, load_checkpoint, save_checkpoint
from .volume import FeatureMap, VolumeGrid, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "DepthPlaneMap",
    "FrustumGrid",
    "FeatureMap",
    "MultiViewDataset",
    "RenderConfig",
    "RenderOutput",
    "SceneParams",
    "SyntheticScene",
    "VolumeGrid",
    "fit_scene",
    "generate_scene",
    "load_checkpoint",
    "load_dataset",
    "load_volume",
    "plane_depth",
    "plane_index",
    "project",
    "psnr",
    "render_frame",
    "save_checkpoint",
    "save_dataset",
    "save_volume",
    "select_nearest_views",
    "ssim",
    "unproject",
]
