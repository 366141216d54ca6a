"""Exactly enumerable laboratory for symmetric multimodal preference optimization."""

from .domain import HyperParams, Prompt, SymmetricSample, WorldConfig
from .objectives import (
    LossValue,
    bt_probability,
    log_ratio,
    loss_ancpo,
    loss_dpo_m,
    loss_margin,
    loss_pair,
    loss_symmpo,
    loss_vco,
    margin_delta,
)
from .partition import GroundTruthReward, loss_vco_star, offset_c, partition_z
from .policy import PolicyParams

__version__ = "0.1.0"

__all__ = [
    "GroundTruthReward",
    "HyperParams",
    "LossValue",
    "PolicyParams",
    "Prompt",
    "SymmetricSample",
    "WorldConfig",
    "bt_probability",
    "log_ratio",
    "loss_ancpo",
    "loss_dpo_m",
    "loss_margin",
    "loss_pair",
    "loss_symmpo",
    "loss_vco",
    "loss_vco_star",
    "margin_delta",
    "offset_c",
    "partition_z",
]
