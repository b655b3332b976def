"""tilesplat: a deterministic, differentiable, tile-based Gaussian splatting
engine with compact analytic tile binning, load-balanced binning, checkpointed
per-Gaussian backpropagation, multi-view score-guided densification, global
pose refinement, and disparity regularization."""

from .scene import Camera, GaussianSet, activate, validate
from .projection import SplatBatch, project, project_vjp
from .binning import (SnugBox, TileIndex, bin_aabb, bin_load_balanced,
                      bin_sequential, compute_snugboxes, snugbox)
from .forward import RenderBuffers, render
from .backward import Grad2D, backward_per_gaussian, backward_per_pixel
from .losses import (LossReport, depth_weight_schedule, disparity_loss,
                     photometric, psnr)
from .density import DensifyDecision, ErrorMask, apply_decisions, error_mask
from .pose import PoseDelta, apply_delta, bake
from .optim import Adam
from .ingest import (DepthAlignment, Scene, SparseReconstruction,
                     align_depth_scale, densify_seed_points, parse_colmap,
                     read_ply, write_ply)
from .trainer import TrainConfig, TrainResult, evaluate, train

__version__ = "0.1.0"
