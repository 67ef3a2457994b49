from .tensor import (
    Tensor,
    GraphError,
    set_verify_mode,
    verify_mode,
    constant,
    exp,
    log,
    log2,
    sqrt,
    absolute,
    clamp_min,
    sigmoid,
    tanh,
    softplus,
    leaky_relu,
    erf,
    matmul,
    concat,
    softmax,
    log_softmax,
    upsample_nearest,
    avg_pool,
    cross_entropy,
    conv2d,
    conv_transpose2d,
)
from .layers import (
    Parameter,
    Module,
    Sequential,
    Conv2d,
    ConvTranspose2d,
    Dense,
    LeakyReLU,
    LayerNorm,
    SftResBlock,
    sft_modulate,
    trunc_normal,
    kaiming_conv,
)
from .optim import Adam, AdamW, OptimError, optimizer_step
from .gradcheck import grad_check
from .checkpoint import save_pick, load_pick, CheckpointError
