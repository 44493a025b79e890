"""Higher-order (H-block) video networks on a numpy autodiff core."""

from .autodiff import Parameter, Tape, Var, backward, gradcheck
from .hblock import HBlock, HBlockConfig
from .models import BackboneSpec, InsertionPlan, build_backbone, build_model
from .tensor import OffsetGrid

__all__ = [
    "BackboneSpec",
    "HBlock",
    "HBlockConfig",
    "InsertionPlan",
    "OffsetGrid",
    "Parameter",
    "Tape",
    "Var",
    "backward",
    "build_backbone",
    "build_model",
    "gradcheck",
]
