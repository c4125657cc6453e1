"""gatedscale: gated scale-transfer operators and a toy multi-branch segmentation network."""

from gatedscale.errors import ConfigError, FormatError, GatedScaleError, LabelError, NumericError, ShapeError, TapeError
from gatedscale.tensor import Tape, Tensor, backward, no_grad
from gatedscale.params import Conv2dParams, NormParams, ParamStore
from gatedscale.gsto import (
    GateMap,
    GatePredictorParams,
    GstoParams,
    GstoSpec,
    ProbabilityMap,
    ScaleTransferSpec,
    Trace,
    apply_gate,
    compute_gate_supervised,
    compute_gate_unsupervised,
    gate_param_count,
    gsto_transfer,
    st_transfer,
)
from gatedscale.hrnet import NetConfig, build_net, gate_sites, gsto_hrnet_forward
from gatedscale.gradcheck import finite_diff_grad, grad_check
from gatedscale.log import Event, EventLog, MetricsLog
from gatedscale.config import RunConfig

__all__ = [
    "ConfigError",
    "FormatError",
    "GatedScaleError",
    "LabelError",
    "NumericError",
    "ShapeError",
    "TapeError",
    "Tape",
    "Tensor",
    "backward",
    "no_grad",
    "Conv2dParams",
    "NormParams",
    "ParamStore",
    "GateMap",
    "GatePredictorParams",
    "GstoParams",
    "GstoSpec",
    "ProbabilityMap",
    "ScaleTransferSpec",
    "Trace",
    "apply_gate",
    "compute_gate_supervised",
    "compute_gate_unsupervised",
    "gate_param_count",
    "gsto_transfer",
    "st_transfer",
    "NetConfig",
    "build_net",
    "gate_sites",
    "gsto_hrnet_forward",
    "finite_diff_grad",
    "grad_check",
    "Event",
    "EventLog",
    "MetricsLog",
    "RunConfig",
]
