"""Multi-scale deformable attention kernels: reference oracle, optimized CPU
kernels with ablation toggles, gather/scatter microbenchmarks."""

from .errors import FormatError, InputError, MsdaError, PlanError, ShapeError, SizeError
from .optimized import DEFAULT_TILE_BUDGET, KernelPlan, OptFlags, msda_backward_opt, msda_forward_opt, plan
from .reference import (
    Mode,
    MsdaConfig,
    MsdaGrads,
    SavedForward,
    bilinear_sample,
    grad_check,
    msda_backward_ref,
    msda_forward_ref,
    paper_config,
    small_config,
)
from .tensor import (
    Dtype,
    FeaturePyramid,
    Fill,
    Layout,
    LevelSpec,
    SamplingTensors,
    make_pyramid,
    random_sampling,
    read_tensor,
    to_channel_last,
    to_pixel_last,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "MsdaError", "SizeError", "ShapeError", "InputError", "PlanError", "FormatError",
    "Dtype", "Layout", "Fill", "LevelSpec", "FeaturePyramid", "SamplingTensors",
    "make_pyramid", "random_sampling", "to_pixel_last", "to_channel_last", "write_tensor", "read_tensor",
    "Mode", "MsdaConfig", "MsdaGrads", "SavedForward", "paper_config", "small_config",
    "bilinear_sample", "msda_forward_ref", "msda_backward_ref", "grad_check",
    "OptFlags", "KernelPlan", "DEFAULT_TILE_BUDGET", "plan", "msda_forward_opt", "msda_backward_opt",
]
