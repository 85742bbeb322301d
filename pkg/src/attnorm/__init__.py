"""attnorm: attentive normalization and its baselines on plain numpy.

Feature normalization splits into block-wise standardization and a
channel-wise affine re-calibration.  This package keeps the former and
generalizes the latter into an attention-weighted mixture of K affine
transforms, alongside vanilla batch/group normalization, squeeze-excite
gating, residual network builders, a finite-difference gradient checker,
and a small deterministic training harness.
"""

from .attention import (AttentionNet, SqueezeExcite, channel_summary,
                        hsigmoid, sigmoid, softmax_rows)
from .attentive import AttentiveNorm2d, effective_affine
from .checkpoint import load_checkpoint, load_network, save_checkpoint
from .data import BlobSpec, gen_blobs, load_idx_dataset, read_idx, write_idx
from .errors import ConfigError, NumericError, ShapeError
from .gradcheck import finite_diff_check
from .networks import (BasicBlock, Bottleneck, NetSpec, Network, NormSpec,
                       StageSpec, build_block, build_resnet, param_count,
                       parse_norm, resnet_spec, toy_spec)
from .normalize import (BatchNorm2d, BlockScheme, GroupNorm2d, MomentStats,
                        RunningStats, affine, batch_blocks,
                        compute_block_moments, group_blocks, standardize,
                        standardize_backward)
from .ops import (Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2d,
                  Param, ReLU)
from .training import (SGD, Schedule, TrainConfig, cross_entropy, evaluate,
                       lr_at, top1_accuracy, train_loop)

__version__ = "0.1.0"
