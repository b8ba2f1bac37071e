"""Low-rank CNN compression toolkit.

Square conv kernels are factorized along their channel modes (Tucker-2),
fully connected weights by truncated SVD; ranks come from empirical
variational-Bayes estimation plus a channel-ratio rule; factorized models
train in two phases (over-parameterized with an orthogonality penalty,
then truncated and retrained) and are scored by compression ratio,
speed-up ratio, and Top-1 accuracy.
"""

from .data import Dataset, SynthSpec, load_cifar10, load_cifar100, synth_dataset
from .decomp import (
    ConvLayerSpec,
    FactorizedConv,
    FactorizedFc,
    FcLayerSpec,
    factorize_conv_layer,
    factorize_fc_layer,
    tsvd_truncate,
    tucker2_decompose,
    tucker2_reconstruct,
)
from .layers import (
    conv2d_factorized,
    conv2d_factorized_grad,
    conv2d_reference,
    conv2d_reference_grad,
    fc_factorized_forward,
    fc_factorized_grad,
    fc_forward,
)
from .metrics import (
    CompressionReport,
    LayerCompression,
    conv_cr,
    conv_param_counts,
    conv_speedup,
    fc_cr,
    model_cr,
    top1,
)
from .modelio import load_model, save_model
from .rank_select import RankPolicy, RankReport, evbmf_rank, select_conv_ranks, select_fc_rank
from .regularizer import OrthoConfig, ortho_penalty, ortho_penalty_grad, total_loss
from .tensor import SvdResult, fold, frobenius_norm, mode_n_product, svd, unfold
from .trainer import (
    Architecture,
    Model,
    NumericError,
    TrainConfig,
    compress_pipeline,
    evaluate,
    init_model,
    retrain_lowrank,
    tinynet,
    train_overparam,
    truncate_model,
)

__version__ = "0.1.0"
