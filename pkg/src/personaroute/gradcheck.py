"""Finite-difference verification of the analytic gradients.

Probes the exact function the tape differentiates: the decoder's persona
weight and the auxiliary LM sample are frozen once and reused for every
probe, since both enter the combined loss as constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import TrainingExample
from .model import DialogueModel
from .training import TrainConfig, sample_context_utterances, total_finetune_loss


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    passed: bool


def gradient_check(
    model: DialogueModel,
    examples: Sequence[TrainingExample],
    cfg: TrainConfig,
    h: float = 1e-4,
    tol: float = 1e-3,
    rel_floor: float = 1e-8,
    corrupt: str | None = None,
) -> list[GradCheckResult]:
    """Central finite differences over every element of every parameter.

    `corrupt` perturbs the named parameter's analytic gradient before the
    comparison; it exists as a negative control for the harness itself.
    """
    if np.dtype(model.dtype) != np.float64:
        raise ValueError("gradient_check requires a float64 model")

    frozen_rng = np.random.default_rng(cfg.seed)
    lm_seqs = sample_context_utterances(examples, model.vocab, frozen_rng)
    with nm.no_grad():
        enc_c, mask_c = model.encode_context_batch([ex.context for ex in examples])
        alpha_frozen = model.predict_alpha_batch(enc_c, mask_c).data.copy()

    def loss_value() -> float:
        with nm.no_grad():
            loss, _ = total_finetune_loss(
                model, examples, cfg, alpha_override=alpha_frozen, lm_seqs=lm_seqs
            )
        return float(loss.data)

    for p in model.parameters():
        p.zero_grad()
    loss, _ = total_finetune_loss(
        model, examples, cfg, alpha_override=alpha_frozen, lm_seqs=lm_seqs
    )
    loss.backward()

    results = []
    for p in model.parameters():
        analytic = p.grad.copy()
        if corrupt == p.name:
            analytic = analytic + 1.0
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), rel_floor)
        err = float((np.abs(analytic - numeric) / denom).max())
        results.append(GradCheckResult(p.name, err, err < tol))
    return results
