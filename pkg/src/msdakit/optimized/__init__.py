"""Optimized multi-scale deformable attention kernels with ablation toggles."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..reference import MsdaConfig, MsdaGrads, SavedForward
from ..tensor import FeaturePyramid, SamplingTensors
from . import driver
from .plan import DEFAULT_TILE_BUDGET, KernelPlan, OptFlags, ScatterStrategy, plan


def msda_forward_opt(p: FeaturePyramid, s: SamplingTensors, cfg: MsdaConfig,
                     flags: Optional[OptFlags] = None):
    """Optimized forward; same contract as ``msda_forward_ref``.

    Accepts any pyramid layout; the value is converted once to the float32
    pixel-last layout the kernels read (padded when gather fusion is on).
    """
    return driver.forward(p, s, cfg, flags or OptFlags())


def msda_backward_opt(p: FeaturePyramid, s: SamplingTensors, cfg: MsdaConfig,
                      flags: Optional[OptFlags], grad_output: np.ndarray,
                      saved: Optional[SavedForward] = None) -> MsdaGrads:
    """Optimized backward. ``saved`` (from a train-mode forward) replaces the
    re-sampling used for the attention-weight gradient."""
    return driver.backward(p, s, cfg, flags or OptFlags(), grad_output, saved)


__all__ = [
    "DEFAULT_TILE_BUDGET", "KernelPlan", "OptFlags", "ScatterStrategy", "plan",
    "msda_forward_opt", "msda_backward_opt",
]
