"""Low-dimensional visual attribute (LDVA) encoding pipeline.

Attention-based part discovery, prototype-dictionary part-probability
encoding, and task heads for generalized zero-shot learning, few-shot
learning, and unsupervised domain adaptation, on a small self-contained
float64 autodiff engine.
"""

from ldva.tensorcore import (AdamState, NonFiniteError, ParamSet, ShapeError,
                             Tensor, adam_step, grad_check)

__all__ = ["Tensor", "ParamSet", "AdamState", "ShapeError", "NonFiniteError",
           "adam_step", "grad_check"]
__version__ = "0.1.0"
