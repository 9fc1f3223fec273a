"""Flow-conditioned next-frame video prediction, end to end.

Self-contained: a float64 autodiff engine, Horn-Schunck optical flow,
the three-network prediction pipeline, joint training with Adam, and
PSNR/SSIM evaluation.
"""

from .autodiff import Tensor, activation, backward, concat, finite_diff_check
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SequenceSample,
    SyntheticConfig,
    encode_semantic,
    decode_semantic,
    generate_synthetic_clip,
    generate_synthetic_sequence,
    load_sequence_dir,
    make_training_tuples,
    resize_bilinear,
)
from .errors import (
    ConfigError,
    DataError,
    FlowcastError,
    FormatError,
    NumericError,
    ShapeError,
    StatisticsUnsetError,
)
from .flow import (
    FlowField,
    estimate_flow_horn_schunck,
    flow_to_color,
    read_flo,
    rgb_to_grayscale,
    warp_by_flow,
    write_flo,
)
from .losses import LossWeights, loss_final, loss_gdl, loss_l1, loss_of, loss_st
from .metrics import psnr, ssim
from .model import (
    ModelConfig,
    ModelParams,
    apply_transform,
    identity_transform,
    init_params,
    men_forward,
    ofpn_forward,
    predict_next,
    rollout,
    stpn_forward,
)
from .nn import (
    BatchNormState,
    ConvLSTMGates,
    batch_norm,
    bilinear_sample,
    conv2d,
    conv3d,
    convlstm_cell_step,
)
from .train import (
    AdamState,
    EvalReport,
    EvalSequence,
    TrainConfig,
    adam_step,
    evaluate,
    train,
)

__version__ = "0.1.0"
