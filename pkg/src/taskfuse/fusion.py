"""Task-vector transport under channel-induced noise and aggregation.

Transport adds zero-mean Gaussian noise whose per-element variance is
kappa * mu_q * (||tau||^2 / d): proportional to the user's MMSE and to the
task vector's own mean-square element, so the perturbation is relative to
task-vector scale and invariant to reparameterization.

The noise a user's task vector picks up is a mixture of a private component
(stream seeded by (seed, task_id)) and a component shared by every user in
the same transmission round (stream seeded by the round seed alone): all
task vectors are decoded against the same realized channel noise, so their
post-decoding errors are correlated. common_noise_fraction sets the shared
share of the variance; the per-element marginal is exactly the variance
above for any mixture. Streams are content-seeded, so matched-seed
comparisons between noise regimes share noise directions and differ only in
per-user magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterSet, TaskVector, add_scaled, flatten, unflatten
from .seeding import derive_rng
from .tinyvit import ModelConfig, evaluate


def default_lambda_table() -> dict[int, float]:
    """Fusion coefficients per task count, calibrated once on the default
    toy setup: a single task vector is applied in full (base + tau is the
    fine-tuned model), small fusions use a conservative 0.4, and the
    coefficient ramps toward 1.0 as the task count grows."""
    return {1: 1.0, 2: 0.4, 3: 0.4, 4: 0.4, 5: 0.6, 6: 0.8, 7: 0.9, 8: 1.0}


@dataclass(frozen=True)
class TransportConfig:
    kappa: float = 1.0
    lambda_table: dict[int, float] = field(default_factory=default_lambda_table)
    common_noise_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if not 0.0 <= self.common_noise_fraction <= 1.0:
            raise ValueError("common_noise_fraction must lie in [0, 1]")
        for n, lam in self.lambda_table.items():
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"lambda for N={n} must lie in [0, 1], got {lam}")

    def lambda_for(self, n: int) -> float:
        if n not in self.lambda_table:
            raise KeyError(f"no fusion coefficient configured for N={n} tasks")
        return self.lambda_table[n]


def transmit_task_vector(tau: TaskVector, mu_q: float,
                         tcfg: TransportConfig) -> TaskVector:
    """tau + Gaussian noise with per-element variance kappa*mu_q*||tau||^2/d.

    kappa = 0 returns the input bit-identically. The noise realization is
    deterministic per (tcfg.seed, task_id).
    """
    if not 0.0 < mu_q <= 1.0:
        raise ValueError(f"mu_q must lie in (0, 1], got {mu_q}")
    if tau.is_perturbed:
        raise ValueError("task vector was already transported")
    if tcfg.kappa == 0.0:
        # clean transport: same delta arrays, marked as transported
        return TaskVector(delta=tau.delta, task_id=tau.task_id,
                          source_user=tau.source_user, is_perturbed=True,
                          noise_variance_used=0.0)
    flat = flatten(tau.delta)
    d = flat.size
    sigma_sq = tcfg.kappa * mu_q * float(np.sum(flat * flat)) / d
    w = tcfg.common_noise_fraction
    unit = np.zeros(d)
    if w < 1.0:
        private = derive_rng("transport", tcfg.seed, tau.task_id)
        unit += np.sqrt(1.0 - w) * private.standard_normal(d)
    if w > 0.0:
        shared = derive_rng("transport-common", tcfg.seed)
        unit += np.sqrt(w) * shared.standard_normal(d)
    noisy = flat + np.sqrt(sigma_sq) * unit
    return TaskVector(
        delta=unflatten(noisy, tau.delta),
        task_id=tau.task_id,
        source_user=tau.source_user,
        is_perturbed=True,
        noise_variance_used=sigma_sq,
    )


def fuse(base: ParameterSet, vectors: list[TaskVector],
         tcfg: TransportConfig) -> ParameterSet:
    """base + lambda_N * sum of deltas with lambda_N from the table."""
    lam = tcfg.lambda_for(len(vectors))
    return add_scaled(base, vectors, lam)


def normalized_accuracy(merged: ParameterSet, finetuned_refs: list[ParameterSet],
                        datasets, cfg: ModelConfig) -> tuple[np.ndarray, float]:
    """Per-task acc(merged) / acc(ref) on each task's test split, plus the
    mean over tasks. Values may exceed 1; they are reported unclamped."""
    if len(finetuned_refs) != len(datasets):
        raise ValueError("need one reference model per dataset")
    per_task = []
    for ref, data in zip(finetuned_refs, datasets):
        ref_acc = evaluate(ref, cfg, data.test)
        if ref_acc == 0.0:
            raise ZeroDivisionError(
                "reference accuracy is zero; normalized accuracy undefined")
        per_task.append(evaluate(merged, cfg, data.test) / ref_acc)
    arr = np.asarray(per_task)
    return arr, float(arr.mean())
