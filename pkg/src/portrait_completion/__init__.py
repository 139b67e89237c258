"""Structure-guided portrait completion: parse, complete, refine the face, blend."""

from .blend import BlendProblem, poisson_blend
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .completion import Discriminator, Generator, GeneratorConfig, complete_forward, train_completion
from .data import DatasetConfig, HoleMask, LabeledPortrait, generate_synthetic_figures, sample_hole_mask
from .errors import (
    CheckpointError,
    ConvergenceError,
    FaceNotFoundError,
    PortraitError,
    ShapeError,
    ValidationError,
)
from .face import FaceNet, refine_face, train_face
from .metrics import EvalReport, frechet_distance, l1_error, psnr, ssim
from .parsing import ParsingNet, ParsingNetConfig, mean_iou, parse_forward, train_parsing
from .pipeline import Checkpoints, RunConfig, extrapolate, run_inference

__version__ = "0.1.0"
