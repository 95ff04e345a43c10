"""MSE-optimal clipping for uniform quantization (OCTAV) and related tools."""

from .estimators import Estimator, MphPolicy, attenuation, backward, exact_attenuation, fake_quant
from .noise import (
    DegenerateTensorError,
    Histogram,
    MseCurve,
    analytical_mse,
    build_histogram,
    empirical_mse,
    local_minima,
    percentile_magnitude,
    point_mass_histogram,
    sweep,
)
from .quantizer import (
    QuantSpec,
    ScalarSet,
    max_scalar,
    quantize_clipped,
    quantize_max_scaled,
    round_half_away,
)
from .solver import OctavConfig, OctavTrace, mse_derivatives, octav, octav_step
from .tensor import (
    GroupView,
    OctvFormatError,
    Tensor,
    group_view,
    load_tensor,
    reduce_sum,
    save_tensor,
)

__version__ = "0.1.0"
