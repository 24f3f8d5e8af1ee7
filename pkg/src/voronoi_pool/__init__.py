"""Voronoi-cell second-order pooling with per-instance ZCA whitening, in plain NumPy."""

from .diffcore import Tape, Value, gradcheck
from .pooling import PoolingNets, aggregate, mlp_forward, netvlad_bilinear_oracle, soft_assign
from .whitening import rblw_shrink, scale, shrinkage, svdpi_backward, zca_whiten

__version__ = "0.1.0"

__all__ = [
    "PoolingNets", "Tape", "Value", "aggregate", "gradcheck", "mlp_forward", "netvlad_bilinear_oracle",
    "rblw_shrink", "scale", "shrinkage", "soft_assign", "svdpi_backward", "zca_whiten",
]
