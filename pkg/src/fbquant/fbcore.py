"""Feedback reconstruction and layer-wise sub-branch optimization.

The feedback form quantizes W - Sigma instead of W and adds Sigma back, so
the reconstructed weights deviate from the originals by pure rounding error,
at most half the group scale per entry, no matter what Sigma is. Sub-branch
training minimizes the squared output error over captured calibration inputs
with the quantized term treated as a constant, which yields the closed-form
gradient -2 * (W - W_F) * (X^T X) for Sigma.

Two conventional baselines (SVD of the quantization error, direct gradient
descent on the non-feedback objective) are included for comparison; their
reconstructions carry no deviation bound.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DataError, NumericError, ShapeError
from .linalg import as_matrix, gram, require_finite, truncated_svd
from .quantizer import QuantConfig, QuantizedTensor, dequantize, quantize_rtn

__all__ = [
    "SubBranch",
    "LayerRecord",
    "OptimizerSettings",
    "ReconstructionReport",
    "QuantizedLayer",
    "fb_reconstruct",
    "reconstruction_loss",
    "grad_sigma",
    "grad_sigma_ste",
    "grad_ab",
    "gradient_check",
    "optimize_layer",
    "baseline_subbranch",
    "quantize_model",
    "MODEL_METHODS",
    "BASELINE_METHODS",
]

MODEL_METHODS = ("fbquant", "rtn", "svd_delta", "direct_gd")
BASELINE_METHODS = ("svd_of_delta", "direct_gd")

_MAX_HALVINGS = 20


@dataclass
class SubBranch:
    """Low-rank pair realizing the sub-branch weights: dense form = b @ a.

    a is the (rank, in_dim) down-projection, b the (out_dim, rank)
    up-projection. Fresh branches start with Gaussian a and zero b, so the
    initial dense form is exactly zero.
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"inconsistent sub-branch factors {self.b.shape} @ {self.a.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def out_dim(self) -> int:
        return self.b.shape[0]

    @property
    def in_dim(self) -> int:
        return self.a.shape[1]

    def dense(self) -> np.ndarray:
        if self.rank == 0:
            return np.zeros((self.out_dim, self.in_dim), dtype=self.a.dtype)
        return self.b @ self.a

    def astype(self, dtype) -> "SubBranch":
        return SubBranch(self.a.astype(dtype), self.b.astype(dtype))

    @classmethod
    def initialize(cls, out_dim, in_dim, rank, sigma, rng) -> "SubBranch":
        a = rng.normal(0.0, sigma, size=(rank, in_dim)) if rank else np.zeros((0, in_dim))
        return cls(a, np.zeros((out_dim, rank)))

    @classmethod
    def zero(cls, out_dim, in_dim, rank=0) -> "SubBranch":
        return cls(np.zeros((rank, in_dim)), np.zeros((out_dim, rank)))


@dataclass
class LayerRecord:
    """One linear layer: original weights plus captured calibration inputs."""

    name: str
    w: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.w = require_finite(as_matrix(self.w), f"{self.name}.weight")
        self.x = require_finite(as_matrix(self.x), f"{self.name}.calib_x")
        if self.w.shape[1] != self.x.shape[1]:
            raise ShapeError(
                f"layer {self.name}: weight in_dim {self.w.shape[1]} != calibration dim {self.x.shape[1]}"
            )
        if self.x.shape[0] < 1:
            raise ShapeError(f"layer {self.name}: needs at least one calibration sample")


@dataclass(frozen=True)
class OptimizerSettings:
    """Knobs for the per-layer gradient-descent loop.

    sigma_init is the unscaled init std for the down-projection; the actual
    std is sigma_init / sqrt(in_dim). With step_rule="backtracking" a step is
    halved (up to 20 times) until the loss does not increase, and rejected
    outright otherwise, which makes the loss curve non-increasing.
    """

    epochs: int = 20
    learning_rate: float = 1e-3
    rank: int = 128
    seed: int = 0
    sigma_init: float = 0.02
    step_rule: str = "fixed"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.rank < 0:
            raise ValueError("rank must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")


@dataclass
class ReconstructionReport:
    """Per-layer optimization record with deviation-bound accounting."""

    layer: str
    loss_per_epoch: list[float] = field(default_factory=list)
    initial_rtn_loss: float = 0.0
    final_loss: float = 0.0
    max_weight_deviation: float = 0.0
    bound_s_half: float = 0.0
    bound_violations: int = 0

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "loss_per_epoch": self.loss_per_epoch,
            "initial_rtn_loss": self.initial_rtn_loss,
            "final_loss": self.final_loss,
            "max_weight_deviation": self.max_weight_deviation,
            "bound_s_half": self.bound_s_half,
            "bound_violations": self.bound_violations,
        }


class QuantizedLayer(NamedTuple):
    q: QuantizedTensor
    sub: SubBranch
    report: ReconstructionReport


def _sigma_of(sub_or_sigma) -> np.ndarray:
    if isinstance(sub_or_sigma, SubBranch):
        return sub_or_sigma.dense()
    return as_matrix(sub_or_sigma)


def fb_reconstruct(w, sub_or_sigma, config: QuantConfig):
    """Feedback reconstruction: quantize W - Sigma, then add Sigma back.

    Scales are recomputed from W - Sigma, so entrywise
    |w - w_f| = |(w - sigma) - dequant(quant(w - sigma))| <= s/2.
    Accepts a SubBranch or a dense sigma matrix. Returns (w_f, q).
    """
    w = as_matrix(w)
    sigma = _sigma_of(sub_or_sigma)
    if sigma.shape != w.shape:
        raise ShapeError(f"sub-branch shape {sigma.shape} != weight shape {w.shape}")
    q = quantize_rtn(w - sigma, config)
    return dequantize(q) + sigma, q


def _loss_from_gram(delta: np.ndarray, gram_x: np.ndarray) -> float:
    return float(((delta @ gram_x) * delta).sum())


def reconstruction_loss(w, w_f, x) -> float:
    """Squared output error trace((W - W_F) X^T X (W - W_F)^T)."""
    w = as_matrix(w)
    w_f = as_matrix(w_f)
    x = as_matrix(x)
    if w.shape != w_f.shape:
        raise ShapeError(f"weight shapes differ: {w.shape} vs {w_f.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input dim {x.shape[1]} != weight in_dim {w.shape[1]}")
    return _loss_from_gram(w - w_f, gram(x))


def grad_sigma(delta_f, gram_x) -> np.ndarray:
    """Loss gradient w.r.t. the sub-branch weights with the quantized term
    detached: -2 * Delta_F @ (X^T X)."""
    delta_f = as_matrix(delta_f)
    gram_x = as_matrix(gram_x)
    if delta_f.shape[1] != gram_x.shape[0]:
        raise ShapeError(f"delta {delta_f.shape} incompatible with gram {gram_x.shape}")
    return -2.0 * (delta_f @ gram_x)


def grad_sigma_ste(delta_f, gram_x) -> np.ndarray:
    """The same chain rule WITHOUT detaching the feedback term.

    The straight-through estimator treats the quantizer's Jacobian as the
    identity, so the inner derivative is (0 + I - I) = 0 and the sub-branch
    gradient collapses to the exact zero matrix. Kept as an executable
    statement of why the detach is necessary.
    """
    upstream = 2.0 * (as_matrix(delta_f) @ as_matrix(gram_x))
    inner = (-(-1.0)) - 1.0  # d(Delta_F)/d(Sigma) under straight-through
    return upstream * inner


def grad_ab(grad_sigma_mat, sub: SubBranch):
    """Chain the dense-sigma gradient onto the low-rank factors."""
    g = as_matrix(grad_sigma_mat)
    if g.shape != (sub.out_dim, sub.in_dim):
        raise ShapeError(f"gradient shape {g.shape} != sub-branch shape ({sub.out_dim}, {sub.in_dim})")
    return sub.b.T @ g, g @ sub.a.T


def gradient_check(
    seed: int,
    instances: int = 20,
    max_dim: int = 16,
    rank: int = 4,
    bits: int = 4,
    h: float = 1e-5,
    probes: int = 4,
) -> dict:
    """Central finite differences of the loss against the analytic gradients.

    The quantized term is held frozen during differencing (matching the
    detach semantics), which makes the loss quadratic in the sub-branch
    weights and in each factor, so central differences are exact up to
    roundoff. Probes each gradient along random unit directions, its own
    normalized direction, and the largest-magnitude entry. Also records the
    largest undetached straight-through gradient entry, which must be exactly
    zero. Returns {"sigma", "a", "b", "overall", "ste_abs_max"}.
    """
    worst = {"sigma": 0.0, "a": 0.0, "b": 0.0}
    ste_abs_max = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        out_dim = int(rng.integers(2, max_dim + 1))
        in_dim = int(rng.integers(2, max_dim + 1))
        n = int(rng.integers(2, max_dim + 1))
        r = min(rank, out_dim, in_dim)
        w = rng.standard_normal((out_dim, in_dim))
        x = rng.standard_normal((n, in_dim))
        sub = SubBranch(
            rng.normal(0.0, 0.1, (r, in_dim)),
            rng.normal(0.0, 0.1, (out_dim, r)),
        )
        g = gram(x)
        config = QuantConfig(bits=bits, group_size=min(32, in_dim))
        sigma0 = sub.dense()
        frozen = dequantize(quantize_rtn(w - sigma0, config))
        delta_f = w - frozen - sigma0
        gs = grad_sigma(delta_f, g)
        ga, gb = grad_ab(gs, sub)
        ste_abs_max = max(ste_abs_max, float(np.abs(grad_sigma_ste(delta_f, g)).max()))

        losses = {
            "sigma": (sigma0, gs, lambda s: _loss_from_gram(w - frozen - s, g)),
            "a": (sub.a, ga, lambda a: _loss_from_gram(w - frozen - sub.b @ a, g)),
            "b": (sub.b, gb, lambda b: _loss_from_gram(w - frozen - b @ sub.a, g)),
        }
        for key, (point, grad, loss_fn) in losses.items():
            directions = [rng.standard_normal(point.shape) for _ in range(probes)]
            norm = np.linalg.norm(grad)
            if norm > 0:
                directions.append(grad / norm)
            peak = np.zeros_like(grad)
            peak.flat[int(np.abs(grad).argmax())] = 1.0
            directions.append(peak)
            for v in directions:
                v = v / max(np.linalg.norm(v), 1e-30)
                fd = (loss_fn(point + h * v) - loss_fn(point - h * v)) / (2.0 * h)
                an = float((grad * v).sum())
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-12)
                worst[key] = max(worst[key], rel)
    worst["overall"] = max(worst.values())
    worst["ste_abs_max"] = ste_abs_max
    return worst


def _deviation_stats(w: np.ndarray, w_rec: np.ndarray, q: QuantizedTensor):
    dev = np.abs(w - w_rec)
    half = q.scales.astype(np.float64) / 2.0
    half_e = np.repeat(half, q.config.group_size, axis=1)[:, : w.shape[1]]
    violations = int((dev > half_e).sum())
    return float(dev.max(initial=0.0)), float(half.max(initial=0.0)), violations


def _rtn_state(w: np.ndarray, gram_x: np.ndarray, config: QuantConfig):
    q = quantize_rtn(w, config)
    w_q = dequantize(q)
    return q, w_q, _loss_from_gram(w - w_q, gram_x)


def _try_eval(eval_fn, cand: SubBranch):
    # A wild step can overflow the candidate; treat that as infinite loss so
    # backtracking rejects it and the fixed rule reports a numeric error.
    if not (np.isfinite(cand.a).all() and np.isfinite(cand.b).all()):
        return None, math.inf
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return eval_fn(cand)
    except DataError:
        return None, math.inf


def _descend(eval_fn, sub: SubBranch, grad_fn, settings: OptimizerSettings):
    """Shared gradient-descent loop over the (a, b) factors.

    eval_fn(sub) -> (state, loss); grad_fn(state, sub) -> (grad_a, grad_b).
    Returns (sub, losses, state); losses[0] is the loss at the initial point.
    """
    state, loss = eval_fn(sub)
    losses = [loss]
    if loss == 0.0:
        return sub, losses, state
    for epoch in range(1, settings.epochs + 1):
        ga, gb = grad_fn(state, sub)
        if not (np.isfinite(ga).all() and np.isfinite(gb).all()):
            raise NumericError("non-finite gradient", epoch=epoch)
        if settings.step_rule == "fixed":
            cand = SubBranch(sub.a - settings.learning_rate * ga, sub.b - settings.learning_rate * gb)
            new_state, new_loss = _try_eval(eval_fn, cand)
            if not math.isfinite(new_loss):
                raise NumericError("non-finite loss", epoch=epoch)
            sub, state, loss = cand, new_state, new_loss
        else:
            step = settings.learning_rate
            for _ in range(_MAX_HALVINGS + 1):
                cand = SubBranch(sub.a - step * ga, sub.b - step * gb)
                cand_state, cand_loss = _try_eval(eval_fn, cand)
                if cand_loss <= loss:
                    sub, state, loss = cand, cand_state, cand_loss
                    break
                step *= 0.5
            # If every halving increased the loss, keep the current point.
        losses.append(loss)
        if loss == 0.0:
            break
    return sub, losses, state


def optimize_layer(layer: LayerRecord, qconfig: QuantConfig, settings: OptimizerSettings, rng=None):
    """Layer-wise feedback reconstruction by gradient descent.

    Initializes the down-projection from N(0, (sigma_init/sqrt(in_dim))^2)
    and the up-projection at zero (so the first recorded loss is the plain
    round-to-nearest loss), then per epoch requantizes W - Sigma with fresh
    scales, evaluates the squared output error, and steps both factors along
    the detached gradient. Returns (SubBranch, ReconstructionReport).
    """
    w = layer.w.astype(np.float64, copy=False)
    x = layer.x.astype(np.float64, copy=False)
    g = gram(x)
    out_dim, in_dim = w.shape
    if rng is None:
        rng = np.random.default_rng(settings.seed)
    sigma = settings.sigma_init / math.sqrt(in_dim)
    sub = SubBranch.initialize(out_dim, in_dim, settings.rank, sigma, rng)

    def eval_fn(s):
        w_f, q = fb_reconstruct(w, s, qconfig)
        delta_f = w - w_f
        return (w_f, q, delta_f), _loss_from_gram(delta_f, g)

    def grad_fn(state, s):
        return grad_ab(grad_sigma(state[2], g), s)

    if settings.rank == 0:
        state, loss0 = eval_fn(sub)
        losses = [loss0]
        sub_final = sub
    else:
        sub_final, losses, state = _descend(eval_fn, sub, grad_fn, settings)
    w_f, q, _ = state
    max_dev, bound, violations = _deviation_stats(w, w_f, q)
    report = ReconstructionReport(
        layer=layer.name,
        loss_per_epoch=losses,
        initial_rtn_loss=losses[0],
        final_loss=losses[-1],
        max_weight_deviation=max_dev,
        bound_s_half=bound,
        bound_violations=violations,
    )
    return sub_final, report


def baseline_subbranch(
    layer: LayerRecord,
    qconfig: QuantConfig,
    rank: int,
    method: str,
    settings: OptimizerSettings | None = None,
    rng=None,
):
    """Conventional (non-feedback) sub-branch baselines.

    svd_of_delta: truncated SVD of the quantization error W - dequant(Q(W)),
    split as b = U_r * S_r, a = V_r. direct_gd: gradient descent on the
    conventional output-error objective with Q(W) frozen. Reconstructions
    W_Q + Sigma carry no deviation bound, and the report records any
    entries exceeding half the group scale.
    """
    if method not in BASELINE_METHODS:
        raise ValueError(f"method must be one of {BASELINE_METHODS}, got {method!r}")
    if settings is None:
        settings = OptimizerSettings(rank=rank)
    w = layer.w.astype(np.float64, copy=False)
    x = layer.x.astype(np.float64, copy=False)
    g = gram(x)
    out_dim, in_dim = w.shape
    q, w_q, rtn_loss = _rtn_state(w, g, qconfig)
    delta = w - w_q

    if rank == 0:
        report = ReconstructionReport(
            layer=layer.name,
            loss_per_epoch=[rtn_loss],
            initial_rtn_loss=rtn_loss,
            final_loss=rtn_loss,
        )
        max_dev, bound, violations = _deviation_stats(w, w_q, q)
        report.max_weight_deviation = max_dev
        report.bound_s_half = bound
        report.bound_violations = violations
        return SubBranch.zero(out_dim, in_dim), report

    if method == "svd_of_delta":
        res = truncated_svd(delta, min(rank, *delta.shape))
        sub = SubBranch(res.v, res.u * res.s)
        losses = [rtn_loss, _loss_from_gram(delta - sub.dense(), g)]
    else:
        if rng is None:
            rng = np.random.default_rng(settings.seed)
        sigma = settings.sigma_init / math.sqrt(in_dim)
        sub0 = SubBranch.initialize(out_dim, in_dim, rank, sigma, rng)

        def eval_fn(s):
            resid = delta - s.dense()
            return resid, _loss_from_gram(resid, g)

        def grad_fn(state, s):
            return grad_ab(-2.0 * (state @ g), s)

        sub, losses, _ = _descend(eval_fn, sub0, grad_fn, settings)

    w_rec = w_q + sub.dense()
    max_dev, bound, violations = _deviation_stats(w, w_rec, q)
    return sub, ReconstructionReport(
        layer=layer.name,
        loss_per_epoch=losses,
        initial_rtn_loss=losses[0],
        final_loss=losses[-1],
        max_weight_deviation=max_dev,
        bound_s_half=bound,
        bound_violations=violations,
    )


def _layer_rng(seed: int, name: str):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def quantize_model(layers, qconfig: QuantConfig, settings: OptimizerSettings, method: str):
    """Apply one method to every layer independently.

    Per-layer randomness derives from (settings.seed, layer name), so the
    output is deterministic and order-equivariant: permuting the input
    layers permutes the outputs identically, and serial or parallel
    schedules produce the same bits.
    """
    if method not in MODEL_METHODS:
        raise ValueError(f"method must be one of {MODEL_METHODS}, got {method!r}")
    if not layers:
        raise ValueError("layer list is empty")
    results = []
    for layer in layers:
        rng = _layer_rng(settings.seed, layer.name)
        try:
            if method == "fbquant":
                sub, report = optimize_layer(layer, qconfig, settings, rng=rng)
                _, q = fb_reconstruct(layer.w.astype(np.float64, copy=False), sub, qconfig)
            elif method == "rtn":
                sub, report = baseline_subbranch(layer, qconfig, 0, "svd_of_delta", settings, rng=rng)
                q = quantize_rtn(layer.w.astype(np.float64, copy=False), qconfig)
            else:
                name = "svd_of_delta" if method == "svd_delta" else "direct_gd"
                sub, report = baseline_subbranch(layer, qconfig, settings.rank, name, settings, rng=rng)
                q = quantize_rtn(layer.w.astype(np.float64, copy=False), qconfig)
        except NumericError as exc:
            raise NumericError(f"layer {layer.name}: {exc}", epoch=exc.epoch) from exc
        results.append(QuantizedLayer(q, sub, report))
    return results
