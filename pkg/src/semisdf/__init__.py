"""Semi-supervised meta-learning of conditional signed distance functions.

Modules: ``geometry`` (shapes, exact SDFs, sampling, nearest neighbors),
``autodiff`` (reverse-mode engine), ``model`` (encoder/decoder, checkpoints),
``losses``, ``training`` (episodic stage 1, semi-supervised stage 2, refinement),
``reconstruction`` (grids, marching cubes, OBJ), ``evaluation`` (Chamfer, sign
accuracy, noise sweep, ablation) and ``cli``.
"""

from .errors import (CheckpointError, ConfigurationError, DatasetError, EvaluationError, GraphError,
                     LossError, NumericError, SemiSdfError, ShapeError)
from .geometry import ShapeInstance, exact_sdf, sample_surface
from .model import ConditionalSdfModel, DecoderConfig, EncoderConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, refine, train_stage1, train_stage2

__version__ = "0.1.0"
