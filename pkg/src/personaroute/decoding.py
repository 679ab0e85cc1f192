"""Autoregressive response generation with a controllable persona weight.

The weight is either predicted from the context encoding or fixed by the
caller; every emitted token's model log-probability is recorded so decoded
sequences can be re-scored exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import DialogueContext, Persona, TrainingExample
from .model import DialogueModel, PersonaWeight
from .text import BOS_ID, EOS_ID, PAD_ID, decode


class DecodeError(ValueError):
    pass


@dataclass
class DecodeConfig:
    strategy: str = "greedy"  # "greedy" | "top_k"
    k: int = 8
    temperature: float = 0.9
    max_tokens: int = 64
    alpha: float | None = None  # None: predicted from the context
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "top_k"):
            raise DecodeError(f"unknown strategy {self.strategy!r}")
        if self.max_tokens < 1:
            raise DecodeError("max_tokens must be at least 1")
        if self.k < 1:
            raise DecodeError("k must be at least 1")
        if self.temperature <= 0:
            raise DecodeError("temperature must be positive")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise DecodeError(f"fixed alpha {self.alpha} outside [0, 1]")


@dataclass
class Generation:
    response: str
    alpha_used: PersonaWeight
    token_ids: list[int] = field(repr=False, default_factory=list)
    logprobs: list[float] = field(repr=False, default_factory=list)


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def generate_batch(
    model: DialogueModel,
    contexts: Sequence[DialogueContext],
    personas: Sequence[Persona],
    cfg: DecodeConfig,
) -> list[Generation]:
    """Decode one response per (context, persona) pair, batched."""
    if len(contexts) != len(personas) or not contexts:
        raise DecodeError("contexts and personas must be equal-length and non-empty")
    bsz = len(contexts)
    rng = np.random.default_rng(cfg.seed)
    with nm.no_grad():
        enc_c, mask_c = model.encode_context_batch(list(contexts))
        enc_t, mask_t = model.encode_persona_batch(list(personas))
        if cfg.alpha is None:
            alphas = model.predict_alpha_batch(enc_c, mask_c).data.astype(np.float64)
            source = "predicted"
        else:
            alphas = np.full(bsz, cfg.alpha, dtype=np.float64)
            source = "fixed"

        prefix = np.full((bsz, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(bsz, dtype=bool)
        tokens: list[list[int]] = [[] for _ in range(bsz)]
        logprobs: list[list[float]] = [[] for _ in range(bsz)]
        max_prefix = model.cfg.context_window
        for _ in range(cfg.max_tokens):
            if done.all() or prefix.shape[1] >= max_prefix:
                break
            logits = model.decode_batch(
                prefix, enc_c, mask_c, enc_t, mask_t, alphas.astype(model.dtype)
            ).data[:, -1, :]
            nxt = np.empty(bsz, dtype=np.int64)
            for b in range(bsz):
                if done[b]:
                    nxt[b] = PAD_ID
                    continue
                row = logits[b].astype(np.float64)
                if cfg.strategy == "greedy":
                    choice = int(row.argmax())
                else:
                    scaled = row / cfg.temperature
                    top = np.argsort(scaled)[::-1][: cfg.k]
                    probs = np.exp(scaled[top] - scaled[top].max())
                    probs /= probs.sum()
                    choice = int(top[rng.choice(len(top), p=probs)])
                nxt[b] = choice
                logprobs[b].append(float(_log_softmax(row)[choice]))
                tokens[b].append(choice)
                if choice == EOS_ID:
                    done[b] = True
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)

    out = []
    for b in range(bsz):
        out.append(
            Generation(
                response=decode(model.vocab, tokens[b]),
                alpha_used=PersonaWeight(float(alphas[b]), source),
                token_ids=tokens[b],
                logprobs=logprobs[b],
            )
        )
    return out


def generate(
    model: DialogueModel,
    context: DialogueContext,
    persona: Persona,
    cfg: DecodeConfig,
) -> Generation:
    return generate_batch(model, [context], [persona], cfg)[0]


def alpha_sweep(
    model: DialogueModel,
    eval_set: Sequence[TrainingExample],
    grid: Sequence[float],
    cfg: DecodeConfig | None = None,
    decode_batch_size: int = 64,
) -> list[dict]:
    """Fixed-alpha decode of the whole eval set for each grid value, with the
    response metrics per value."""
    from .metrics import bleu, char_f1, distinct, persona_accuracy

    if not len(grid):
        raise DecodeError("alpha grid must be non-empty")
    cfg = cfg or DecodeConfig()
    rows = []
    references = [ex.response for ex in eval_set]
    for alpha in grid:
        step_cfg = DecodeConfig(
            strategy=cfg.strategy, k=cfg.k, temperature=cfg.temperature,
            max_tokens=cfg.max_tokens, alpha=float(alpha), seed=cfg.seed,
        )
        responses = []
        for lo in range(0, len(eval_set), decode_batch_size):
            chunk = eval_set[lo : lo + decode_batch_size]
            gens = generate_batch(
                model,
                [ex.context for ex in chunk],
                [ex.target_persona for ex in chunk],
                step_cfg,
            )
            responses.extend(g.response for g in gens)
        rows.append(
            {
                "alpha": float(alpha),
                "acc": persona_accuracy(
                    list(zip(responses, (ex.target_persona for ex in eval_set)))
                ),
                "bleu": bleu(responses, references),
                "f1": float(np.mean([char_f1(c, r) for c, r in zip(responses, references)])),
                "distinct1": distinct(responses, 1),
                "distinct2": distinct(responses, 2),
            }
        )
    return rows
