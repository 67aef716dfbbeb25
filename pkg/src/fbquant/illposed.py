"""Executable demonstration that conventional sub-branch objectives are
ill-posed under rank-deficient calibration.

When the calibration Gram matrix X^T X has a null space, any sub-branch
solution can be perturbed inside that null space without changing the
calibration loss, while the reconstructed weights drift arbitrarily far from
the originals. The feedback reconstruction is immune: its deviation stays
below half the group scale for every perturbation, because the bound does
not depend on the sub-branch at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .fbcore import LayerRecord, OptimizerSettings, baseline_subbranch, fb_reconstruct
from .linalg import as_matrix, gram, gram_null_basis, truncated_svd
from .quantizer import QuantConfig, dequantize, quantize_rtn

__all__ = [
    "IllposedScenario",
    "IllposedReport",
    "AlphaEntry",
    "build_perturbation",
    "run_illposed_demo",
    "make_scenario",
]

DEFAULT_ALPHAS = (0.0, 1.0, 10.0, 100.0)


@dataclass
class IllposedScenario:
    """A rank-deficient layer plus a conventional sub-branch solution."""

    layer: LayerRecord
    sigma_star: np.ndarray
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    tol: float = 1e-8
    rank: int | None = None  # SVD truncation of sigma_star; inferred when None

    def __post_init__(self):
        self.sigma_star = as_matrix(self.sigma_star, dtype=np.float64)
        if self.sigma_star.shape != self.layer.w.shape:
            raise PreconditionError("sigma_star shape does not match the layer weights")


@dataclass
class AlphaEntry:
    alpha: float
    loss_delta: float
    max_deviation_conventional: float
    max_deviation_fbquant: float
    bound_s_half: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "loss_delta": self.loss_delta,
            "max_deviation_conventional": self.max_deviation_conventional,
            "max_deviation_fbquant": self.max_deviation_fbquant,
            "bound_s_half": self.bound_s_half,
        }


@dataclass
class IllposedReport:
    layer: str
    baseline_loss: float
    entries: list[AlphaEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "baseline_loss": self.baseline_loss,
            "entries": [e.to_dict() for e in self.entries],
        }


def _orthonormalize_rows(rows: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt; rows that fall in the span of earlier ones
    come back as zero rows."""
    out = rows.astype(np.float64, copy=True)
    for i in range(out.shape[0]):
        for j in range(i):
            out[i] -= (out[j] @ out[i]) * out[j]
        norm = np.linalg.norm(out[i])
        if norm > 1e-12:
            out[i] /= norm
        else:
            out[i] = 0.0
    return out


def build_perturbation(sigma_star, x, rank: int, alpha: float) -> np.ndarray:
    """Null-space perturbation U_r S_r (alpha N_r) of a sub-branch solution.

    N_r is built from the first `rank` rows of the Gram null basis of the
    calibration inputs (cycled and re-orthonormalized when the null space has
    fewer than `rank` directions), so the perturbation annihilates X^T X and
    leaves the conventional calibration loss untouched.
    """
    sigma_star = as_matrix(sigma_star, dtype=np.float64)
    if rank < 1 or rank > min(sigma_star.shape):
        raise PreconditionError(f"rank {rank} out of range for {sigma_star.shape}")
    basis = gram_null_basis(as_matrix(x, dtype=np.float64))
    if basis.shape[0] == 0:
        raise PreconditionError("calibration is full rank; ill-posedness premise fails")
    res = truncated_svd(sigma_star, rank)
    if basis.shape[0] >= rank:
        n_r = basis[:rank]
    else:
        reps = -(-rank // basis.shape[0])
        n_r = _orthonormalize_rows(np.tile(basis, (reps, 1))[:rank])
    return (res.u * res.s) @ (alpha * n_r)


def run_illposed_demo(scenario: IllposedScenario, qconfig: QuantConfig) -> IllposedReport:
    """Measure loss invariance and weight deviation over the alpha grid.

    For each alpha: perturb sigma_star inside the Gram null space, check the
    conventional loss is unchanged (within scenario.tol relative), and record
    the conventional reconstruction's max weight deviation next to the
    feedback reconstruction's, which must stay within half the group scale.
    """
    layer = scenario.layer
    w = layer.w.astype(np.float64, copy=False)
    x = layer.x.astype(np.float64, copy=False)
    g = gram(x)
    w_q = dequantize(quantize_rtn(w, qconfig))
    delta = w - w_q

    def conventional_loss(sigma):
        resid = delta - sigma
        return float(((resid @ g) * resid).sum())

    loss_star = conventional_loss(scenario.sigma_star)
    rank = scenario.rank
    if rank is None:
        s = truncated_svd(scenario.sigma_star, min(scenario.sigma_star.shape)).s
        rank = max(1, int((s > 1e-10 * max(s[0], 1e-300)).sum()))

    report = IllposedReport(layer=layer.name, baseline_loss=loss_star)
    for alpha in scenario.alphas:
        sigma_p = scenario.sigma_star + build_perturbation(scenario.sigma_star, x, rank, alpha)
        loss_p = conventional_loss(sigma_p)
        loss_delta = abs(loss_p - loss_star) / max(abs(loss_star), 1e-300)
        dev_conv = float(np.abs(w - (w_q + sigma_p)).max())
        w_f, q_fb = fb_reconstruct(w, sigma_p, qconfig)
        dev_fb = float(np.abs(w - w_f).max())
        report.entries.append(
            AlphaEntry(
                alpha=float(alpha),
                loss_delta=loss_delta,
                max_deviation_conventional=dev_conv,
                max_deviation_fbquant=dev_fb,
                bound_s_half=float(q_fb.scales.max()) / 2.0,
            )
        )
    return report


def make_scenario(
    layer: LayerRecord,
    qconfig: QuantConfig,
    rank: int,
    alphas=DEFAULT_ALPHAS,
    settings: OptimizerSettings | None = None,
    tol: float = 1e-8,
) -> IllposedScenario:
    """Build a scenario with sigma_star from the direct-GD baseline.

    The loss-invariance algebra holds for any sigma_star, so the baseline
    does not need to be an exact minimizer. Raises PreconditionError when the
    calibration inputs are full rank (no null space to perturb into).
    """
    if gram_null_basis(layer.x.astype(np.float64, copy=False)).shape[0] == 0:
        raise PreconditionError("calibration is full rank; ill-posedness premise fails")
    if settings is None:
        settings = OptimizerSettings(rank=rank, learning_rate=5e-3, step_rule="backtracking")
    sub, _ = baseline_subbranch(layer, qconfig, rank, "direct_gd", settings)
    return IllposedScenario(layer=layer, sigma_star=sub.dense(), alphas=tuple(alphas), tol=tol, rank=rank)
