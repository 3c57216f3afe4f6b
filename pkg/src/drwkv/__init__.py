"""Diffusion models with a bidirectional-RWKV backbone, built on a small numpy autodiff engine."""

from .backbone import PRESETS, DiffusionRWKV, ModelConfig, model_flops, patchify, unpatchify
from .diffusion import (EmaState, NoiseSchedule, SamplerConfig, cfg_combine, ema_update,
                        linear_schedule, p_sample_step, q_sample, respace, sample_loop,
                        training_loss)
from .rng import Rng
from .tensor import Tensor, backward
from .wkv import WkvParams, wkv_backward, wkv_bidirectional, wkv_causal, wkv_flops, wkv_oracle

__version__ = "0.1.0"
