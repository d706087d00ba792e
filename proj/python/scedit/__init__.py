"""Skip-connection tuners for diffusion U-Nets."""

from ._scedit import (
    AdapterKind,
    CheckpointError,
    ConfigError,
    Error,
    IoError,
    NoiseSchedule,
    NumericError,
    ShapeError,
    TunerConfig,
    TunerStack,
    UNet,
    UNetConfig,
    count_params,
    ddim_sample,
    extract_color,
    extract_edge,
    gen_toy_dataset,
    load_checkpoint,
    make_schedule,
    predict_noise,
    q_sample,
    random_mask,
    run_cli,
    save_checkpoint,
    sd15_layout,
)

__all__ = [name for name in dir() if not name.startswith("_")]
