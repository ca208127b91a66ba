"""Differentiable semantic Gaussian splatting at desk scale."""

from .bundle import Bundle, View, load_bundle, save_bundle
from .exceptions import (DegenerateAlignmentError, DegenerateQuaternionError, DimensionMismatchError,
                         FeaturesNotCompressedError, FormatError, NonFiniteLossError,
                         NoVisibleGeometryError, SemsplatError)
from .fitting import FitConfig, FitResult, SceneFitter, fit_scene
from .fusion import CrossViewFusion, FusionConfig
from .losses import LossWeights, loss_geo, loss_rgb, loss_sem, loss_total, umeyama
from .metrics import MetricReport, depth_metrics, psnr, seg_metrics, ssim
from .optim import AdamState, adam_step
from .rasterizer import render, render_backward
from .scene import Camera, GaussianPrimitive, GaussianScene, ImageBuffer
from .semantic import FeatureCodec, PrototypeSegmenter, PrototypeSet, segment
from .synth import make_synthetic, perturb_scene

__version__ = "0.1.0"
