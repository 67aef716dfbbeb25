"""Weight-only quantization with feedback-driven low-rank error compensation.

Quantizing W - Sigma instead of W and adding the low-rank sub-branch Sigma
back caps the reconstructed-weight deviation at half the quantizer's group
scale, independent of Sigma; the sub-branch is then trained layer-wise on
calibration data without the overfitting risk of conventional compensation.
A fused inference path cuts the sub-branch's memory traffic, with byte-exact
counters to prove it.
"""

__version__ = "0.1.0"

from .fbcore import (
    LayerRecord,
    OptimizerSettings,
    QuantizedLayer,
    ReconstructionReport,
    SubBranch,
    baseline_subbranch,
    fb_reconstruct,
    grad_ab,
    grad_sigma,
    grad_sigma_ste,
    gradient_check,
    optimize_layer,
    quantize_model,
    reconstruction_loss,
)
from .illposed import IllposedReport, IllposedScenario, build_perturbation, make_scenario, run_illposed_demo
from .io import FbqLayer, load_bundle, load_fbq, save_bundle, save_fbq
from .quantizer import QuantConfig, QuantizedTensor, dequantize, pack_codes, quantize_rtn, unpack_codes
from .runtime import (
    CostModelQuery,
    FusedLayer,
    TrafficCounter,
    active_backend,
    benchmark,
    expected_traffic,
    fused_forward,
    macs_overhead,
    naive_forward,
)

__all__ = [
    "__version__",
    "LayerRecord",
    "OptimizerSettings",
    "QuantizedLayer",
    "ReconstructionReport",
    "SubBranch",
    "baseline_subbranch",
    "fb_reconstruct",
    "grad_ab",
    "grad_sigma",
    "grad_sigma_ste",
    "gradient_check",
    "optimize_layer",
    "quantize_model",
    "reconstruction_loss",
    "IllposedReport",
    "IllposedScenario",
    "build_perturbation",
    "make_scenario",
    "run_illposed_demo",
    "FbqLayer",
    "load_bundle",
    "load_fbq",
    "save_bundle",
    "save_fbq",
    "QuantConfig",
    "QuantizedTensor",
    "dequantize",
    "pack_codes",
    "quantize_rtn",
    "unpack_codes",
    "CostModelQuery",
    "FusedLayer",
    "TrafficCounter",
    "active_backend",
    "benchmark",
    "expected_traffic",
    "fused_forward",
    "macs_overhead",
    "naive_forward",
]
