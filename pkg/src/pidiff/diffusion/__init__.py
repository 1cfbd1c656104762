from .schedule import (
    NoiseSchedule,
    build_linear_schedule,
    ddim_sigma,
    ddim_step,
    ddpm_sigma,
    ddpm_step,
    desk_schedule,
    forward_diffuse,
    forward_step,
    predict_x0,
    q_posterior,
    timestep_subsequence,
)
from .networks import (
    ConvCodec,
    Denoiser,
    EncoderConditioner,
    IdentityCodec,
    MLPConditioner,
    codec_roundtrip,
    codec_train,
    make_codec,
    rgb_to_tensor,
    timestep_embedding,
)
from .sampling import SAMPLERS, image_rng, sample
