"""Automatic evaluation: persona accuracy via the rule-based attribute
matcher, character-level BLEU-1/2, character F1, distinct-1/2, perplexity.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .data import Persona, TrainingExample, heuristic_label
from .decoding import DecodeConfig, generate_batch
from .model import DialogueModel
from .training import response_nll


class MetricsError(ValueError):
    pass


ACCURACY_NOTE = (
    "persona accuracy judged by the deterministic attribute-exhibition rules, "
    "not a trained classifier"
)


def persona_accuracy(pairs: Sequence[tuple[str, Persona]]) -> float:
    """Fraction of responses that exhibit their target persona per the rules."""
    pairs = list(pairs)
    if not pairs:
        raise MetricsError("persona_accuracy: empty evaluation set")
    return sum(heuristic_label(r, p) for r, p in pairs) / len(pairs)


def _ngrams(chars: str, n: int) -> Counter:
    return Counter(chars[i : i + n] for i in range(len(chars) - n + 1))


def bleu(candidates: Sequence[str], references: Sequence[str], n_max: int = 2) -> float:
    """Corpus BLEU over character n-grams: clipped precisions, geometric mean,
    brevity penalty."""
    if len(candidates) != len(references):
        raise MetricsError("bleu: candidate/reference length mismatch")
    if not candidates:
        raise MetricsError("bleu: empty candidate set")
    matches = [0] * n_max
    totals = [0] * n_max
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, n_max + 1):
            cgrams = _ngrams(cand, n)
            rgrams = _ngrams(ref, n)
            matches[n - 1] += sum((cgrams & rgrams).values())
            totals[n - 1] += sum(cgrams.values())
    if cand_len == 0:
        return 0.0
    if any(m == 0 or t == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / n_max
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec)


def char_f1(candidate: str, reference: str) -> float:
    """Harmonic mean of character multiset precision and recall."""
    overlap = sum((Counter(candidate) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(candidate)
    recall = overlap / len(reference)
    return 2 * precision * recall / (precision + recall)


def distinct(responses: Sequence[str], n: int) -> float:
    """Unique / total character n-grams across the whole corpus."""
    if n < 1:
        raise MetricsError("distinct: n must be at least 1")
    total = 0
    unique = set()
    for r in responses:
        for i in range(len(r) - n + 1):
            unique.add(r[i : i + n])
            total += 1
    if total == 0:
        raise MetricsError(f"distinct: corpus has no {n}-grams")
    return len(unique) / total


def perplexity(
    model: DialogueModel, examples: Sequence[TrainingExample], batch_size: int = 64
) -> float:
    """exp of the token-weighted mean response negative log likelihood,
    teacher-forced with the predicted persona weight."""
    if not examples:
        raise MetricsError("perplexity: empty evaluation set")
    nll, tokens = response_nll(model, examples, batch_size=batch_size)
    return math.exp(nll / tokens)


@dataclass
class EvalReport:
    split: str
    metrics: dict[str, float]
    examples: list[dict] = field(repr=False)
    note: str = ACCURACY_NOTE

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": self.split,
                "note": self.note,
                "metrics": self.metrics,
                "examples": self.examples,
            },
            ensure_ascii=False,
            indent=2,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def evaluate(
    model: DialogueModel,
    examples: Sequence[TrainingExample],
    cfg: DecodeConfig,
    split_name: str,
    decode_batch_size: int = 64,
) -> EvalReport:
    """Decode every example and compute the five metrics."""
    if not examples:
        raise MetricsError("evaluate: empty split")
    generations = []
    for lo in range(0, len(examples), decode_batch_size):
        chunk = examples[lo : lo + decode_batch_size]
        generations.extend(
            generate_batch(
                model,
                [ex.context for ex in chunk],
                [ex.target_persona for ex in chunk],
                cfg,
            )
        )
    records = []
    for ex, gen in zip(examples, generations):
        records.append(
            {
                "response": gen.response,
                "reference": ex.response,
                "alpha_used": gen.alpha_used.alpha,
                "alpha_source": gen.alpha_used.source,
                "persona_hit": heuristic_label(gen.response, ex.target_persona),
            }
        )
    responses = [r["response"] for r in records]
    references = [r["reference"] for r in records]
    metrics = {
        "acc": sum(r["persona_hit"] for r in records) / len(records),
        "bleu": bleu(responses, references),
        "f1": sum(char_f1(c, r) for c, r in zip(responses, references)) / len(records),
        "distinct1": distinct(responses, 1),
        "distinct2": distinct(responses, 2),
        "ppl": perplexity(model, examples),
    }
    return EvalReport(split=split_name, metrics=metrics, examples=records)
