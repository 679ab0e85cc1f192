"""Pre-training and fine-tuning loops.

Pre-training optimizes next-character likelihood on plain text. Fine-tuning
optimizes the dialogue loss plus a weighted auxiliary LM loss on context
utterances and a weighted predictor loss on the rule-generated labels:

    total = dialogue + lambda1 * lm + lambda2 * weight

The decoder consumes the predicted persona weight as a constant: the
predictor is trained only through its own loss (and, through the pooled
context encoding, trains the encoder jointly).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .data import TrainingExample
from .model import DialogueModel, LanguageModel
from .numerics import Tensor
from .text import BOS_ID, EOS_ID, PAD_ID, Vocab, encode


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.2
    lambda2: float = 0.5
    learning_rate: float = 2.5e-4
    warmup_steps: int = 100
    batch_size: int = 32
    epochs_pretrain: int = 70
    epochs_finetune: int = 30
    seed: int = 0
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    early_stop_patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise TrainingError("lambda weights must be non-negative")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be at least 1")


class Adam:
    """Adam with linear warmup to a constant rate and global-norm clipping."""

    def __init__(
        self,
        params,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        warmup_steps: int = 0,
        grad_clip: float = 0.0,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def clip_gradients(self) -> float:
        """Scale all grads so the global norm is at most grad_clip; returns
        the post-clip norm."""
        norm = float(np.sqrt(sum(float((p.grad**2).sum()) for p in self.params)))
        if self.grad_clip > 0.0 and norm > self.grad_clip:
            scale = self.grad_clip / norm
            for p in self.params:
                p.grad *= scale
            return self.grad_clip
        return norm

    def step(self) -> None:
        self.t += 1
        lr_t = self.lr
        if self.warmup_steps > 0:
            lr_t *= min(1.0, self.t / self.warmup_steps)
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            if self.weight_decay > 0.0:
                p.data -= lr_t * self.weight_decay * p.data
            p.data -= (lr_t * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def response_sequences(examples: Sequence[TrainingExample], vocab: Vocab) -> np.ndarray:
    """(B, L) int array: BOS + response + EOS, right-padded with PAD."""
    encoded = [
        [BOS_ID] + encode(vocab, ex.response) + [EOS_ID] for ex in examples
    ]
    length = max(len(e) for e in encoded)
    out = np.full((len(encoded), length), PAD_ID, dtype=np.int64)
    for i, ids in enumerate(encoded):
        out[i, : len(ids)] = ids
    return out


def pack_token_rows(rows: Sequence[list[int]]) -> np.ndarray:
    length = max(len(r) for r in rows)
    out = np.full((len(rows), length), PAD_ID, dtype=np.int64)
    for i, ids in enumerate(rows):
        out[i, : len(ids)] = ids
    return out


def sample_context_utterances(
    examples: Sequence[TrainingExample], vocab: Vocab, rng: np.random.Generator
) -> np.ndarray:
    """One utterance per example, tokenized, for the auxiliary LM loss."""
    rows = []
    for ex in examples:
        turn = ex.context.turns[int(rng.integers(len(ex.context.turns)))]
        rows.append(encode(vocab, turn[0].text))
    return pack_token_rows(rows)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def lm_loss(model, seq_batch: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy of the causal LM path; PAD ignored."""
    seqs = np.asarray(seq_batch, dtype=np.int64)
    if seqs.size == 0 or seqs.shape[0] == 0:
        raise TrainingError("lm_loss: empty batch")
    if seqs.shape[1] < 2:
        raise TrainingError("lm_loss: sequences must have at least 2 tokens")
    inputs, targets = seqs[:, :-1], seqs[:, 1:]
    logits = model.lm_batch(inputs)
    flat = nm.reshape(logits, (inputs.shape[0] * inputs.shape[1], model.cfg.vocab_size))
    return nm.cross_entropy(flat, targets.reshape(-1), ignore_index=PAD_ID)


def _nonempty(examples: Sequence[TrainingExample]) -> list[TrainingExample]:
    kept = [ex for ex in examples if ex.response]
    if len(kept) < len(examples):
        warnings.warn(f"skipping {len(examples) - len(kept)} empty-response examples")
    if not kept:
        raise TrainingError("dialogue batch has no usable examples")
    return kept


def dialogue_loss(
    model: DialogueModel,
    examples: Sequence[TrainingExample],
    alpha_override: np.ndarray | None = None,
) -> Tensor:
    """Teacher-forced response cross-entropy conditioned on context, persona
    and the (predicted, by default) persona weight."""
    examples = _nonempty(examples)
    enc_c, mask_c = model.encode_context_batch([ex.context for ex in examples])
    enc_t, mask_t = model.encode_persona_batch([ex.target_persona for ex in examples])
    if alpha_override is None:
        alpha = model.predict_alpha_batch(enc_c, mask_c).detach()
    else:
        alpha = np.asarray(alpha_override)
    seqs = response_sequences(examples, model.vocab)
    logits = model.decode_batch(
        seqs[:, :-1], enc_c, mask_c, enc_t, mask_t, alpha
    )
    n, t = seqs.shape[0], seqs.shape[1] - 1
    flat = nm.reshape(logits, (n * t, model.cfg.vocab_size))
    return nm.cross_entropy(flat, seqs[:, 1:].reshape(-1), ignore_index=PAD_ID)


def weight_loss(model: DialogueModel, examples: Sequence[TrainingExample]) -> Tensor:
    """Binary cross-entropy of the predicted persona weight against labels."""
    labels = np.array([ex.persona_label for ex in examples], dtype=np.float64)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise TrainingError("labels must be 0 or 1")
    enc_c, mask_c = model.encode_context_batch([ex.context for ex in examples])
    logits = model.predict_alpha_logits_batch(enc_c, mask_c)
    return nm.binary_cross_entropy_with_logits(logits, labels.astype(model.dtype))


def total_finetune_loss(
    model: DialogueModel,
    examples: Sequence[TrainingExample],
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    alpha_override: np.ndarray | None = None,
    lm_seqs: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Combined fine-tuning loss; context encodings are shared across the
    three components. Returns the loss node and float components.

    alpha_override / lm_seqs freeze the decoder's persona weight and the
    auxiliary LM sample; the gradient checker uses them to probe the exact
    function the tape differentiates.
    """
    examples = _nonempty(examples)
    enc_c, mask_c = model.encode_context_batch([ex.context for ex in examples])
    enc_t, mask_t = model.encode_persona_batch([ex.target_persona for ex in examples])
    alpha_logits = model.predict_alpha_logits_batch(enc_c, mask_c)
    if alpha_override is None:
        alpha_dec = nm.sigmoid(alpha_logits).detach()
    else:
        alpha_dec = np.asarray(alpha_override)

    seqs = response_sequences(examples, model.vocab)
    logits = model.decode_batch(seqs[:, :-1], enc_c, mask_c, enc_t, mask_t, alpha_dec)
    n, t = seqs.shape[0], seqs.shape[1] - 1
    loss_d = nm.cross_entropy(
        nm.reshape(logits, (n * t, model.cfg.vocab_size)),
        seqs[:, 1:].reshape(-1),
        ignore_index=PAD_ID,
    )

    if lm_seqs is None:
        if rng is None:
            raise TrainingError("total_finetune_loss needs an rng when lm_seqs is not given")
        lm_seqs = sample_context_utterances(examples, model.vocab, rng)
    loss_lm = lm_loss(model, np.column_stack([np.full(len(examples), BOS_ID), lm_seqs]))

    labels = np.array([ex.persona_label for ex in examples], dtype=model.dtype)
    loss_w = nm.binary_cross_entropy_with_logits(alpha_logits, labels)

    total = nm.add(
        nm.add(loss_d, nm.mul(loss_lm, cfg.lambda1)), nm.mul(loss_w, cfg.lambda2)
    )
    parts = {
        "loss_d": float(loss_d.data),
        "loss_lm": float(loss_lm.data),
        "loss_w": float(loss_w.data),
    }
    parts["loss_total"] = (
        parts["loss_d"] + cfg.lambda1 * parts["loss_lm"] + cfg.lambda2 * parts["loss_w"]
    )
    return total, parts


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def response_nll(
    model: DialogueModel,
    examples: Sequence[TrainingExample],
    batch_size: int = 64,
    alpha_override: float | None = None,
) -> tuple[float, int]:
    """(total nll, token count) of gold responses, teacher-forced, predicted
    persona weight unless overridden. Token-weighted across batches."""
    total, count = 0.0, 0
    with nm.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = list(examples[lo : lo + batch_size])
            override = None
            if alpha_override is not None:
                override = np.full(len(chunk), alpha_override, dtype=model.dtype)
            loss = dialogue_loss(model, chunk, alpha_override=override)
            toks = sum(len(ex.response) + 1 for ex in chunk)  # +1 for EOS
            total += float(loss.data) * toks
            count += toks
    return total, count


def predictor_accuracy(
    model: DialogueModel, examples: Sequence[TrainingExample], batch_size: int = 64
) -> float:
    hits = 0
    with nm.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = list(examples[lo : lo + batch_size])
            enc_c, mask_c = model.encode_context_batch([ex.context for ex in chunk])
            alpha = model.predict_alpha_batch(enc_c, mask_c).data
            labels = np.array([ex.persona_label for ex in chunk])
            hits += int(((alpha > 0.5).astype(int) == labels).sum())
    return hits / len(examples)


def _check_loss(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at {where}; aborting run")


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def chunk_text(text: str, vocab: Vocab, window: int) -> np.ndarray:
    """Non-overlapping windows of window+1 tokens; a short tail is padded."""
    ids = np.asarray(encode(vocab, text), dtype=np.int64)
    step = window + 1
    n_chunks = int(np.ceil(len(ids) / step))
    padded = np.full(n_chunks * step, PAD_ID, dtype=np.int64)
    padded[: len(ids)] = ids
    return padded.reshape(n_chunks, step)


def pretrain(
    model: LanguageModel,
    text: str,
    cfg: TrainConfig,
    report_path: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Optimize next-character likelihood; returns per-epoch loss records."""
    seqs = chunk_text(text, model.vocab, model.cfg.context_window)
    if seqs.shape[0] == 0:
        raise TrainingError("pretraining text is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(
        model.parameters(), cfg.learning_rate, warmup_steps=cfg.warmup_steps,
        grad_clip=cfg.grad_clip, weight_decay=cfg.weight_decay,
    )
    report: list[dict] = []
    for epoch in range(cfg.epochs_pretrain):
        order = rng.permutation(seqs.shape[0])
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = seqs[order[lo : lo + cfg.batch_size]]
            opt.zero_grad()
            loss = lm_loss(model, batch)
            _check_loss(float(loss.data), f"pretrain epoch {epoch} step {lo // cfg.batch_size}")
            loss.backward()
            opt.clip_gradients()
            opt.step()
            losses.append(float(loss.data))
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        report.append(record)
        if log:
            log(f"pretrain epoch {epoch}: loss {record['loss']:.4f}")
    if report_path is not None:
        _write_report(report, report_path)
    return report


def finetune(
    model: DialogueModel,
    train: Sequence[TrainingExample],
    valid: Sequence[TrainingExample],
    cfg: TrainConfig,
    report_path: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Optimize the combined loss on the train split; per-epoch validation
    perplexity and predictor accuracy go into the report."""
    if not train:
        raise TrainingError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(
        model.parameters(), cfg.learning_rate, warmup_steps=cfg.warmup_steps,
        grad_clip=cfg.grad_clip, weight_decay=cfg.weight_decay,
    )
    # batch contexts of similar length together (random tie-break, shuffled
    # batch order) so padding does not dominate the encoder cost
    ctx_lengths = np.array(
        [sum(len(u.text) + 1 for u, _ in ex.context.turns) for ex in train]
    )
    report: list[dict] = []
    best_ppl = np.inf
    stale = 0
    for epoch in range(cfg.epochs_finetune):
        order = np.lexsort((rng.random(len(train)), ctx_lengths))
        starts = np.arange(0, len(order), cfg.batch_size)
        rng.shuffle(starts)
        sums = {"loss_d": 0.0, "loss_lm": 0.0, "loss_w": 0.0}
        n_steps = 0
        for lo in starts:
            batch = [train[i] for i in order[lo : lo + cfg.batch_size]]
            opt.zero_grad()
            loss, parts = total_finetune_loss(model, batch, cfg, rng=rng)
            _check_loss(parts["loss_total"], f"finetune epoch {epoch} step {n_steps}")
            loss.backward()
            opt.clip_gradients()
            opt.step()
            for k in sums:
                sums[k] += parts[k]
            n_steps += 1
        record = {"epoch": epoch}
        record.update({k: v / n_steps for k, v in sums.items()})
        record["loss_total"] = (
            record["loss_d"] + cfg.lambda1 * record["loss_lm"] + cfg.lambda2 * record["loss_w"]
        )
        if valid:
            nll, toks = response_nll(model, valid)
            record["val_ppl"] = float(np.exp(nll / toks))
            record["predictor_acc"] = predictor_accuracy(model, valid)
        else:
            record["val_ppl"] = None
            record["predictor_acc"] = None
        report.append(record)
        if log:
            log(
                f"finetune epoch {epoch}: total {record['loss_total']:.4f} "
                f"d {record['loss_d']:.4f} lm {record['loss_lm']:.4f} "
                f"w {record['loss_w']:.4f} val_ppl {record['val_ppl']}"
            )
        if cfg.early_stop_patience > 0 and record["val_ppl"] is not None:
            if record["val_ppl"] < best_ppl - 1e-9:
                best_ppl = record["val_ppl"]
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    if log:
                        log(f"early stop after epoch {epoch}")
                    break
    if report_path is not None:
        _write_report(report, report_path)
    return report


def _write_report(report: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in report:
            fh.write(json.dumps(record) + "\n")
