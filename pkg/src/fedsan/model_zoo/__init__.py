from .adapter import (
    LayerView,
    ModelAdapter,
    SubnetPlan,
    WeightSlice,
    ablate_units,
    build_model,
    construct_narrow,
    copy_selected_weights,
)
from . import nets

__all__ = [
    "LayerView",
    "ModelAdapter",
    "SubnetPlan",
    "WeightSlice",
    "ablate_units",
    "build_model",
    "construct_narrow",
    "copy_selected_weights",
    "nets",
]
