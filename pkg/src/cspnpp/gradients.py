"""Reverse-mode derivatives of the context-aware propagation and the fitting objective.

The backward pass walks a recorded forward run (all branch iterates kept) in
reverse: guided replacement of the output, alpha mixing, lambda accumulation,
per-step guided replacement, the propagation step, and finally the affinity
and sigmoid normalisations. Subgradients at kinks (``|x|`` at 0, hinge at its
threshold) are taken as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.special import expit

from .affinity import kernel_size_of, subwindow_index, valid_neighbors
from .context import CARecord, ca_forward
from .cost import (_cost_table, expected_cost, expected_cost_per_pixel, expected_memory,
                   soft_memory)
from .exceptions import ContractError, DimensionError
from .grid import (AssemblyWeights, ObjectiveConfig, PropagationConfig, SparseObservations,
                   as_grid_array)
from .propagation import shifted

__all__ = [
    "CSPNParams",
    "ParameterGradients",
    "backward",
    "objective",
    "objective_and_grad",
    "finite_difference_check",
    "GradcheckInstance",
    "gradcheck_instance",
    "FAMILIES",
]

FAMILIES = ("raw_affinity", "alpha_logits", "lambda_logits", "confidence_logits", "h0")


@dataclass
class CSPNParams:
    """Free per-pixel parameters of a context-aware propagation."""

    raw_affinity: np.ndarray
    alpha_logits: np.ndarray
    lambda_logits: np.ndarray
    confidence_logits: np.ndarray

    @classmethod
    def initial(cls, height: int, width: int, config: PropagationConfig,
                rng: np.random.Generator, noise: float = 0.05,
                confidence: Optional[np.ndarray] = None) -> "CSPNParams":
        """Small uniform affinity noise, uniform mixtures, given confidence logits."""
        raw = rng.uniform(-noise, noise, size=(height, width, config.n_neighbors))
        K, T = config.n_kernels, config.n_checkpoints
        conf = np.zeros((height, width)) if confidence is None else np.array(confidence, float)
        return cls(raw, np.zeros((height, width, K)), np.zeros((height, width, K, T)), conf)

    def weights(self) -> AssemblyWeights:
        return AssemblyWeights(self.alpha_logits, self.lambda_logits)

    def observations(self, obs: Optional[SparseObservations]) -> Optional[SparseObservations]:
        if obs is None:
            return None
        return obs.with_confidence_logits(self.confidence_logits)

    def copy(self) -> "CSPNParams":
        return CSPNParams(self.raw_affinity.copy(), self.alpha_logits.copy(),
                          self.lambda_logits.copy(), self.confidence_logits.copy())

    def get(self, family: str) -> np.ndarray:
        return getattr(self, family)


@dataclass
class ParameterGradients:
    d_raw_affinity: np.ndarray
    d_alpha_logits: np.ndarray
    d_lambda_logits: np.ndarray
    d_confidence_logits: np.ndarray
    d_h0: np.ndarray
    aux: Dict[str, object] = field(default_factory=dict, repr=False)

    def get(self, family: str) -> np.ndarray:
        return getattr(self, "d_" + family)

    def scaled(self, factor: float) -> "ParameterGradients":
        return ParameterGradients(*(factor * self.get(f) for f in FAMILIES))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(self.get(f))) for f in FAMILIES)


def _sigmoid_normalize_vjp(logits: np.ndarray, grad_norm: np.ndarray) -> np.ndarray:
    """Pull a cotangent on ``sigmoid(l) / sum(sigmoid(l))`` (last axis) back to ``l``."""
    s = expit(logits)
    total = s.sum(axis=-1, keepdims=True)
    a = s / total
    ds = (grad_norm - (grad_norm * a).sum(axis=-1, keepdims=True)) / total
    return ds * s * (1.0 - s)


def _normalize_vjp(raw: np.ndarray, k: int, grad_w: np.ndarray) -> np.ndarray:
    """Cotangent on the cropped, valid raw logits given one on the normalised weights."""
    h, w = raw.shape[:2]
    valid = valid_neighbors(h, w, k)
    sub = raw[:, :, subwindow_index(k, kernel_size_of(raw))] * valid
    total = np.abs(sub).sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    proj = (grad_w * sub).sum(axis=-1, keepdims=True)
    g = grad_w / safe - np.sign(sub) * proj / safe ** 2
    return np.where((total > 0) & valid, g, 0.0)


def backward(record: CARecord, d_output) -> ParameterGradients:
    """Gradients of ``sum(d_output * output)`` with respect to every input.

    Raises
    ------
    ContractError
        If the forward run was not recorded.
    """
    if not record.recorded or any(b.states is None for b in record.branches):
        raise ContractError("backward needs a forward run recorded with all iterates")
    cfg = record.config
    g_out = as_grid_array(d_output)
    if g_out.shape != record.output.shape:
        raise DimensionError(f"cotangent {g_out.shape} does not match output {record.output.shape}")
    H, W, C = g_out.shape
    h0, raw, obs, weights = record.h0, record.raw, record.obs, record.weights
    alpha, lam = weights.alpha(), weights.lam()
    checkpoints = cfg.iteration_checkpoints

    d_g = np.zeros((H, W))
    if obs is not None:
        g = obs.confidence[..., None]
        d_val = obs.values[..., None]
        d_assembled = (1.0 - g) * g_out
        d_g += (g_out * (d_val - record.assembled)).sum(-1)
    else:
        d_assembled = g_out

    d_alpha = np.zeros_like(alpha)
    d_lam = np.zeros_like(lam)
    d_h0 = np.zeros_like(h0)
    d_raw = np.zeros_like(raw)
    k_max = cfg.k_max
    for branch, kern in zip(record.branches, record.kernels):
        i, k = branch.kernel_index, kern.size
        r = k // 2
        d_alpha[:, :, i] = (d_assembled * branch.acc).sum(-1)
        d_acc = alpha[:, :, i, None] * d_assembled
        d_w = np.zeros_like(kern.weights)
        d_center = np.zeros((H, W))
        g_state = np.zeros((H, W, C))
        for t in range(cfg.n_steps, 0, -1):
            if t in checkpoints:
                ti = checkpoints.index(t)
                d_lam[:, :, i, ti] = (d_acc * branch.states[t]).sum(-1)
                g_state = g_state + lam[:, :, i, ti, None] * d_acc
            if obs is not None:
                d_pre = (1.0 - g) * g_state
                d_g += (g_state * (d_val - branch.pre_replace[t])).sum(-1)
            else:
                d_pre = g_state
            d_center += (d_pre * h0).sum(-1)
            d_h0 += kern.center[..., None] * d_pre
            pad_prev = np.pad(branch.states[t - 1], ((r, r), (r, r), (0, 0)))
            g_pad = np.zeros((H + 2 * r, W + 2 * r, C))
            for n, (dy, dx) in enumerate(kern.offsets):
                d_w[:, :, n] += (d_pre * shifted(pad_prev, r, dy, dx, H, W)).sum(-1)
                shifted(g_pad, r, dy, dx, H, W)[...] += kern.weights[:, :, n, None] * d_pre
            g_state = g_pad[r:r + H, r:r + W].copy()
        d_h0 += g_state
        d_raw[:, :, subwindow_index(k, k_max)] += _normalize_vjp(raw, k, d_w - d_center[..., None])

    if obs is not None:
        s = expit(obs.confidence_logits)
        d_conf = np.where(obs.mask, d_g * s * (1.0 - s), 0.0)
    else:
        d_conf = np.zeros((H, W))
    return ParameterGradients(
        d_raw_affinity=d_raw,
        d_alpha_logits=_sigmoid_normalize_vjp(weights.alpha_logits, d_alpha),
        d_lambda_logits=_sigmoid_normalize_vjp(weights.lambda_logits, d_lam),
        d_confidence_logits=d_conf,
        d_h0=d_h0,
    )


def _valid_target(target, valid):
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 3:
        target = target[:, :, 0]
    valid = target > 0 if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ContractError("no valid ground-truth pixel")
    return target, valid


def objective_and_grad(params: CSPNParams, h0, obs: Optional[SparseObservations], target,
                       prop: PropagationConfig, obj: ObjectiveConfig = ObjectiveConfig(),
                       valid=None) -> Tuple[float, ParameterGradients]:
    """Fitting loss and its gradient.

    ``loss = data + eta1 * decay + eta2 * E(c)
    + eta2' * [E(c) - C_l]_+ + eta3 * [soft E(cm) - C_m]_+``

    where ``data`` is the mean over valid ground-truth pixels of the squared
    error (summed over channels, measured in ``depth_scale`` units) and
    ``decay`` is the mean over pixels of the squared parameter norm
    (confidence logits only where an observation exists). The memory hinge
    uses the alpha-mixture surrogate because the argmax definition has no
    gradient; the argmax value is reported in ``aux["e_mem"]``.

    Raises
    ------
    ContractError
        If no ground-truth pixel is valid.
    """
    target, valid = _valid_target(target, valid)
    h0 = as_grid_array(h0)
    H, W, _ = h0.shape
    n_pix = H * W
    weights = params.weights()
    rec = ca_forward(h0, params.raw_affinity, params.observations(obs), weights, prop)
    out = rec.output
    scale = obj.depth_scale
    resid = np.where(valid[..., None], (out - target[..., None]) * scale, 0.0)
    n_valid = int(valid.sum())
    data = float((resid ** 2).sum() / n_valid)
    grads = backward(rec, 2.0 * resid * scale / n_valid)

    mask = obs.mask if obs is not None else np.zeros((H, W), bool)
    conf_reg = np.where(mask, params.confidence_logits, 0.0)
    decay = float((params.raw_affinity ** 2).sum() + (params.alpha_logits ** 2).sum()
                  + (params.lambda_logits ** 2).sum() + (conf_reg ** 2).sum()) / n_pix
    c = 2.0 * obj.eta1 / n_pix
    grads.d_raw_affinity += c * params.raw_affinity
    grads.d_alpha_logits += c * params.alpha_logits
    grads.d_lambda_logits += c * params.lambda_logits
    grads.d_confidence_logits += c * conf_reg

    e_cost = expected_cost(weights, prop)
    e_soft_mem = soft_memory(weights, prop)
    hinge_l = hinge_m = 0.0
    cost_coef = obj.eta2
    if obj.budget_latency is not None:
        hinge_l = max(e_cost - obj.budget_latency, 0.0)
        if e_cost > obj.budget_latency:
            cost_coef += obj.eta2_prime
    mem_coef = 0.0
    if obj.budget_memory is not None:
        hinge_m = max(e_soft_mem - obj.budget_memory, 0.0)
        if e_soft_mem > obj.budget_memory:
            mem_coef = obj.eta3

    alpha, lam = weights.alpha(), weights.lam()
    table = _cost_table(prop)
    d_alpha = np.zeros_like(alpha)
    d_lam = np.zeros_like(lam)
    if cost_coef:
        d_alpha += cost_coef / n_pix * np.einsum("hwkt,kt->hwk", lam, table)
        d_lam += cost_coef / n_pix * alpha[..., None] * table
    if mem_coef:
        ks = np.asarray(prop.kernel_sizes, dtype=np.float64)
        d_alpha += mem_coef / n_pix * (ks ** 2 / prop.k_max ** 2)
    if cost_coef or mem_coef:
        grads.d_alpha_logits += _sigmoid_normalize_vjp(params.alpha_logits, d_alpha)
        grads.d_lambda_logits += _sigmoid_normalize_vjp(params.lambda_logits, d_lam)

    loss = (data + obj.eta1 * decay + obj.eta2 * e_cost
            + obj.eta2_prime * hinge_l + obj.eta3 * hinge_m)
    grads.aux.update(
        loss=loss, data=data, decay=decay, e_cost=e_cost, e_soft_mem=e_soft_mem,
        e_mem=expected_memory(weights, prop), hinge_latency=hinge_l, hinge_memory=hinge_m,
        output=out,
    )
    return loss, grads


def objective(params: CSPNParams, h0, obs, target, prop, obj=ObjectiveConfig(), valid=None):
    """Loss value only (no backward pass).

    Arithmetic follows the dtype of the inputs, so passing ``np.longdouble``
    arrays gives an extended-precision evaluation.
    """
    target, valid = _valid_target(target, valid)
    h0 = as_grid_array(h0)
    H, W, _ = h0.shape
    weights = params.weights()
    rec = ca_forward(h0, params.raw_affinity, params.observations(obs), weights, prop, record=False)
    resid = np.where(valid[..., None], (rec.output - target[..., None]) * obj.depth_scale, 0.0)
    data = (resid ** 2).sum() / valid.sum()
    mask = obs.mask if obs is not None else np.zeros((H, W), bool)
    conf_reg = np.where(mask, params.confidence_logits, 0.0)
    decay = ((params.raw_affinity ** 2).sum() + (params.alpha_logits ** 2).sum()
             + (params.lambda_logits ** 2).sum() + (conf_reg ** 2).sum()) / (H * W)
    e_cost = expected_cost_per_pixel(weights, prop).mean()
    loss = data + obj.eta1 * decay + obj.eta2 * e_cost
    if obj.budget_latency is not None:
        loss += obj.eta2_prime * max(e_cost - obj.budget_latency, 0.0)
    if obj.budget_memory is not None:
        ks = np.asarray(prop.kernel_sizes, dtype=np.float64)
        soft = (weights.alpha() * ks ** 2).sum(-1).mean() / prop.k_max ** 2
        loss += obj.eta3 * max(soft - obj.budget_memory, 0.0)
    return loss


def _extended(params: CSPNParams, h0, obs, target):
    ld = np.longdouble
    p = CSPNParams(*(np.array(params.get(f), dtype=ld) for f in FAMILIES[:4]))
    o = None if obs is None else SparseObservations(
        np.array(obs.values, dtype=ld), obs.mask, np.array(obs.confidence_logits, dtype=ld))
    return p, np.array(as_grid_array(h0), dtype=ld), o, np.array(target, dtype=ld)


def finite_difference_check(params: CSPNParams, h0, obs, target, prop: PropagationConfig,
                            obj: ObjectiveConfig = ObjectiveConfig(), epsilon: float = 1e-5,
                            samples: int = 200, seed: int = 0,
                            families: Iterable[str] = FAMILIES, valid=None,
                            details: Optional[dict] = None, extended: bool = True) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``samples`` coordinates are drawn per parameter family. Relative error
    uses ``max(|analytic|, |fd|, 1e-8)`` as denominator. Raw-affinity
    coordinates within ``10 * epsilon`` of zero (the ``|x|`` kink) are not
    sampled. If ``details`` is a dict it receives per-family maxima.

    With ``extended=True`` (default) the difference quotient is evaluated in
    ``np.longdouble`` so that cancellation error stays far below the
    tolerance even for coordinates with tiny gradients or for depth-valued
    anchors in millimetres; the analytic side is always float64.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    h0 = as_grid_array(h0).copy()
    _, grads = objective_and_grad(params, h0, obs, target, prop, obj, valid)
    if extended:
        params, h0, obs, target = _extended(params, h0, obs, target)
    worst = 0.0
    for fam in families:
        base = h0 if fam == "h0" else params.get(fam)
        analytic = grads.get(fam)
        flat = base.reshape(-1)
        candidates = np.arange(flat.size)
        if fam == "raw_affinity":
            candidates = candidates[np.abs(flat) > 10 * epsilon]
        if candidates.size == 0:
            continue
        picks = rng.choice(candidates, size=min(samples, candidates.size), replace=False)
        fam_worst = 0.0
        for j in picks:
            p_plus, p_minus = params.copy(), params.copy()
            h_plus, h_minus = h0.copy(), h0.copy()
            if fam == "h0":
                h_plus.reshape(-1)[j] += epsilon
                h_minus.reshape(-1)[j] -= epsilon
            else:
                p_plus.get(fam).reshape(-1)[j] += epsilon
                p_minus.get(fam).reshape(-1)[j] -= epsilon
            f_plus = objective(p_plus, h_plus, obs, target, prop, obj, valid)
            f_minus = objective(p_minus, h_minus, obs, target, prop, obj, valid)
            fd = float((f_plus - f_minus) / (2 * epsilon))
            a = analytic.reshape(-1)[j]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            fam_worst = max(fam_worst, err)
        if details is not None:
            details[fam] = fam_worst
        worst = max(worst, fam_worst)
    return worst


@dataclass
class GradcheckInstance:
    """A small seeded problem for comparing analytic and numerical gradients."""

    params: CSPNParams
    h0: np.ndarray
    obs: SparseObservations
    target: np.ndarray
    prop: PropagationConfig
    obj: ObjectiveConfig

    def check(self, epsilon: float = 1e-5, samples: int = 200, seed: int = 0,
              details: Optional[dict] = None) -> float:
        return finite_difference_check(self.params, self.h0, self.obs, self.target, self.prop,
                                       self.obj, epsilon, samples, seed, details=details)


def gradcheck_instance(seed: int, size: int = 6,
                       prop: PropagationConfig = PropagationConfig((3, 5, 7), (3, 6))
                       ) -> GradcheckInstance:
    """Random ``size x size`` problem with every loss term active.

    Depths are in millimetres around 2 to 8 m, roughly 30% of pixels carry an
    observation and both budgets are placed 0.05 below the current costs, so
    the hinges are active and far from their kinks.
    """
    if size < 1:
        raise DimensionError("size must be positive")
    rng = np.random.default_rng([seed, 3])
    K, T, M = prop.n_kernels, prop.n_checkpoints, prop.n_neighbors
    params = CSPNParams(
        raw_affinity=rng.uniform(-1.0, 1.0, (size, size, M)),
        alpha_logits=rng.normal(0.0, 1.0, (size, size, K)),
        lambda_logits=rng.normal(0.0, 1.0, (size, size, K, T)),
        confidence_logits=rng.normal(0.0, 1.0, (size, size)),
    )
    target = rng.uniform(2000.0, 8000.0, (size, size))
    h0 = (target + rng.normal(0.0, 500.0, target.shape))[..., None]
    mask = rng.random(target.shape) < 0.3
    obs = SparseObservations(target * (1.0 + 0.05 * rng.normal(size=target.shape)), mask,
                             params.confidence_logits)
    weights = params.weights()
    obj = ObjectiveConfig(budget_latency=max(expected_cost(weights, prop) - 0.05, 1e-3),
                          budget_memory=max(soft_memory(weights, prop) - 0.05, 1e-3))
    return GradcheckInstance(params, h0, obs, target, prop, obj)
