"""Interference analytics.

Weight disentanglement error (prediction disagreement between single-edit
and joint-edit models), the logit-ratio hypothesis test with its
first-order variance model, a Taylor-linearization validation helper, and
pairwise cosine-similarity matrices of task vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .params import ParameterSet, TaskVector, add_scaled, cosine_similarity, flatten, unflatten
from .tinyvit import ModelConfig, forward


@dataclass(frozen=True)
class HypothesisResult:
    ratio_samples: np.ndarray
    threshold: float
    z_beta: float
    beta: float
    reject_rate: float
    variance_estimate: float


@dataclass(frozen=True)
class WdeReport:
    xi: float                        # sum over tasks of mean disagreement
    per_task_disagreement: np.ndarray
    lambda_single: float
    lambda_joint: float
    sample_counts: np.ndarray


def wde(base: ParameterSet, task_vectors: list[TaskVector], lambda_single: float,
        lambda_joint: float, datasets, cfg: ModelConfig,
        max_samples: int | None = None) -> WdeReport:
    """Disagreement between f(x; base + lambda_single * tau_i) and
    f(x; base + lambda_joint * sum_j tau_j), averaged over each task's own
    evaluation data and summed over tasks."""
    if len(task_vectors) != len(datasets):
        raise ValueError("need one dataset per task vector")
    joint = add_scaled(base, task_vectors, lambda_joint)
    rates, counts = [], []
    for tau, data in zip(task_vectors, datasets):
        single = add_scaled(base, [tau], lambda_single)
        images = data.test.images
        if max_samples is not None:
            images = images[:max_samples]
        pred_single = np.argmax(forward(single, cfg, images), axis=1)
        pred_joint = np.argmax(forward(joint, cfg, images), axis=1)
        rates.append(float(np.mean(pred_single != pred_joint)))
        counts.append(images.shape[0])
    rates = np.asarray(rates)
    return WdeReport(xi=float(rates.sum()), per_task_disagreement=rates,
                     lambda_single=lambda_single, lambda_joint=lambda_joint,
                     sample_counts=np.asarray(counts, dtype=np.int64))


def logit_ratio(model_cfg: ModelConfig, theta_u: ParameterSet,
                theta_d: ParameterSet, x) -> float:
    """R(x) = z_u(x)[k] / z_d(x)[k] at the undisturbed model's argmax class k.

    That coordinate determines the prediction, aligning the scalar ratio with
    prediction-change semantics. Use logit_ratio_vector for all classes.
    """
    zu, zd, k = _logit_pair(model_cfg, theta_u, theta_d, x)
    if abs(zd[k]) < 1e-12:
        raise ZeroDivisionError("disturbed logit at the reference class is ~0")
    return float(zu[k] / zd[k])


def logit_ratio_vector(model_cfg: ModelConfig, theta_u: ParameterSet,
                       theta_d: ParameterSet, x) -> np.ndarray:
    """Per-class ratios z_u/z_d (diagnostic companion to logit_ratio)."""
    zu, zd, _k = _logit_pair(model_cfg, theta_u, theta_d, x)
    if np.any(np.abs(zd) < 1e-12):
        raise ZeroDivisionError("a disturbed logit is ~0")
    return zu / zd


def _logit_pair(cfg, theta_u, theta_d, x):
    theta_u.check_compatible(theta_d)
    batch = np.asarray(x, dtype=np.float64)[None, ...]
    zu = forward(theta_u, cfg, batch)[0]
    zd = forward(theta_d, cfg, batch)[0]
    return zu, zd, int(np.argmax(zu))


def taylor_check(model_cfg: ModelConfig, theta_u: ParameterSet, delta_theta,
                 x, h: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """(exact logit shift, linearized shift) for a parameter perturbation.

    The linearized shift is the directional derivative of the logits along
    delta_theta, estimated by a central finite difference with step h; for a
    linear model the two agree exactly, otherwise they differ at second
    order in ||delta_theta||.
    """
    flat_u = flatten(theta_u)
    if isinstance(delta_theta, ParameterSet):
        flat_d = flatten(delta_theta)
    else:
        flat_d = np.asarray(delta_theta, dtype=np.float64)
    if flat_d.size != flat_u.size:
        raise ValueError("delta_theta does not match the parameter dimension")

    def logits_at(vec):
        z = forward(unflatten(vec, theta_u), model_cfg,
                    np.asarray(x, dtype=np.float64)[None, ...])[0]
        return z

    exact = logits_at(flat_u + flat_d) - logits_at(flat_u)
    linear = (logits_at(flat_u + h * flat_d) - logits_at(flat_u - h * flat_d)) / (2.0 * h)
    return exact, linear


def directional_shifts(f, theta_flat, delta_flat, h: float = 1e-4):
    """taylor_check over a generic logits function f(theta_flat) -> vector;
    used to validate the finite-difference machinery on closed-form maps."""
    theta_flat = np.asarray(theta_flat, dtype=np.float64)
    delta_flat = np.asarray(delta_flat, dtype=np.float64)
    exact = f(theta_flat + delta_flat) - f(theta_flat)
    linear = (f(theta_flat + h * delta_flat) - f(theta_flat - h * delta_flat)) / (2.0 * h)
    return exact, linear


def threshold(beta: float, variance_estimate: float) -> float:
    """T = z_beta * sqrt(variance); z_beta is the standard-normal upper-beta
    quantile."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    if variance_estimate < 0.0:
        raise ValueError("variance must be nonnegative")
    z = float(norm.ppf(1.0 - beta))
    return z * float(np.sqrt(variance_estimate))


def variance_of_ratio(jacobian_row_norm_sq_over_zu_sq: float, sum_mse: float) -> float:
    """First-order variance model Var[|R - 1|] ~ (J/z_u)^2 * sum of MSEs."""
    if jacobian_row_norm_sq_over_zu_sq < 0 or sum_mse < 0:
        raise ValueError("inputs must be nonnegative")
    return jacobian_row_norm_sq_over_zu_sq * sum_mse


def run_hypothesis_test(ratio_samples, threshold_value: float,
                        beta: float = float("nan"),
                        z_beta: float = float("nan")) -> HypothesisResult:
    """Reject per sample iff |R - 1| > T."""
    samples = np.asarray(ratio_samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("no ratio samples")
    dev = np.abs(samples - 1.0)
    return HypothesisResult(
        ratio_samples=samples,
        threshold=float(threshold_value),
        z_beta=z_beta,
        beta=beta,
        reject_rate=float(np.mean(dev > threshold_value)),
        variance_estimate=float(np.var(dev)),
    )


def cosine_matrix(vectors: list[TaskVector]) -> np.ndarray:
    """Symmetric pairwise cosine-similarity matrix with unit diagonal."""
    if len(vectors) < 2:
        raise ValueError("need at least two task vectors")
    n = len(vectors)
    M = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            M[i, j] = M[j, i] = cosine_similarity(vectors[i], vectors[j])
    return M


def mean_max_offdiag(M: np.ndarray) -> tuple[float, float]:
    """Mean and max of the strict upper triangle (reporting helper)."""
    iu = np.triu_indices(M.shape[0], k=1)
    vals = M[iu]
    return float(vals.mean()), float(vals.max())
