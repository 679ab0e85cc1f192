"""Shared-stack transformer with attribute-aware context encoding, a
three-route decoder (persona / context / previously decoded tokens) merged
under a persona weight alpha, and the pooled predictor that produces alpha.

The encoder and decoder are the same parameter set: the context encoder,
persona encoder, language-model path and dialogue decoder all run the same
blocks, differing only in which attention routes are active.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import DialogueContext, Persona, Registries, render_persona
from .numerics import Parameter, Tensor
from .text import SPE_ID, Vocab, encode

CHECKPOINT_MAGIC = b"PRCK"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    n_blocks: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    context_window: int = 128
    n_genders: int = 3
    n_locations: int = 10
    n_tags: int = 12
    merge_variant: str = "verbatim"
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.context_window < 2:
            raise ModelError("context_window must be at least 2")
        if self.merge_variant not in ("verbatim", "simplified"):
            raise ModelError(f"unknown merge_variant {self.merge_variant!r}")

    @staticmethod
    def large(vocab_size: int = 13084) -> "ModelConfig":
        """Full-scale preset: 12 blocks, 12 heads, width 768, window 512."""
        return ModelConfig(
            vocab_size=vocab_size, n_blocks=12, n_heads=12, d_model=768,
            d_ff=3072, context_window=512,
        )


@dataclass(frozen=True)
class AttributeIds:
    """Per-token speaker attributes aligned with the context token sequence."""
    gender_ids: np.ndarray
    location_ids: np.ndarray
    tag_ids: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.tag_ids)


@dataclass
class PersonaWeight:
    alpha: float
    source: str  # "predicted" | "fixed"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ModelError(f"persona weight {self.alpha} outside [0, 1]")
        if self.source not in ("predicted", "fixed"):
            raise ModelError(f"unknown persona weight source {self.source!r}")


@dataclass
class RouteOutputs:
    persona_out: np.ndarray
    context_out: np.ndarray
    self_out: np.ndarray
    merged: np.ndarray
    alpha: np.ndarray


def _validate_alpha_values(alpha: np.ndarray) -> None:
    if alpha.size and (alpha.min() < 0.0 or alpha.max() > 1.0):
        raise ModelError(f"alpha outside [0, 1]: {alpha}")


def context_tokens(
    context: DialogueContext, vocab: Vocab, registries: Registries, max_len: int
) -> tuple[np.ndarray, AttributeIds]:
    """SPE-joined context tokens plus aligned per-token speaker attributes.

    Oldest turns are dropped first when the concatenation exceeds max_len;
    a separator carries the attributes of the segment that follows it.
    """
    turns = list(context.turns)
    while True:
        lengths = [len(u.text) for u, _ in turns]
        total = sum(lengths) + max(0, len(turns) - 1)
        if total <= max_len or len(turns) == 1:
            break
        turns = turns[1:]

    ids: list[int] = []
    genders: list[int] = []
    locations: list[int] = []
    tags: list[tuple[int, ...]] = []
    for k, (utt, persona) in enumerate(turns):
        registries.validate(persona)
        g = registries.gender_id(persona.gender)
        l = registries.location_id(persona.location)
        t = tuple(registries.tag_id(x) for x in persona.tags)
        if k > 0:
            ids.append(SPE_ID)
            genders.append(g)
            locations.append(l)
            tags.append(t)
        for tok in encode(vocab, utt.text):
            ids.append(tok)
            genders.append(g)
            locations.append(l)
            tags.append(t)
    if len(ids) > max_len:
        ids, genders, locations, tags = (
            ids[-max_len:], genders[-max_len:], locations[-max_len:], tags[-max_len:],
        )
    return (
        np.asarray(ids, dtype=np.int64),
        AttributeIds(
            np.asarray(genders, dtype=np.int64),
            np.asarray(locations, dtype=np.int64),
            tuple(tags),
        ),
    )


# ---------------------------------------------------------------------------
# shared transformer stack
# ---------------------------------------------------------------------------

class _Block:
    def __init__(self, idx: int, cfg: ModelConfig, rng: np.random.Generator, dtype):
        d, f = cfg.d_model, cfg.d_ff
        res_std = 0.02 / np.sqrt(2.0 * cfg.n_blocks)

        def w(shape, std=0.02):
            return rng.normal(0.0, std, size=shape)

        p = f"block{idx}"
        self.wq = Parameter(w((d, d)), f"{p}.attn.wq", dtype)
        self.bq = Parameter(np.zeros(d), f"{p}.attn.bq", dtype)
        self.wk = Parameter(w((d, d)), f"{p}.attn.wk", dtype)
        self.bk = Parameter(np.zeros(d), f"{p}.attn.bk", dtype)
        self.wv = Parameter(w((d, d)), f"{p}.attn.wv", dtype)
        self.bv = Parameter(np.zeros(d), f"{p}.attn.bv", dtype)
        self.wo = Parameter(w((d, d), res_std), f"{p}.attn.wo", dtype)
        self.bo = Parameter(np.zeros(d), f"{p}.attn.bo", dtype)
        self.ln1_gain = Parameter(np.ones(d), f"{p}.ln1.gain", dtype)
        self.ln1_bias = Parameter(np.zeros(d), f"{p}.ln1.bias", dtype)
        self.w1 = Parameter(w((d, f)), f"{p}.ff.w1", dtype)
        self.b1 = Parameter(np.zeros(f), f"{p}.ff.b1", dtype)
        self.w2 = Parameter(w((f, d), res_std), f"{p}.ff.w2", dtype)
        self.b2 = Parameter(np.zeros(d), f"{p}.ff.b2", dtype)
        self.ln2_gain = Parameter(np.ones(d), f"{p}.ln2.gain", dtype)
        self.ln2_bias = Parameter(np.zeros(d), f"{p}.ln2.bias", dtype)

    def parameters(self) -> list[Parameter]:
        return [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.ln1_gain, self.ln1_bias, self.w1, self.b1, self.w2, self.b2,
            self.ln2_gain, self.ln2_bias,
        ]


class TransformerCore:
    """Token/positional embeddings plus the block stack shared by every path."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        d = cfg.d_model
        self.tok_emb = Parameter(rng.normal(0.0, 0.02, size=(cfg.vocab_size, d)), "tok_emb", dtype)
        self.pos_emb = Parameter(rng.normal(0.0, 0.02, size=(cfg.context_window, d)), "pos_emb", dtype)
        self.blocks = [_Block(i, cfg, rng, dtype) for i in range(cfg.n_blocks)]
        self.training = False
        self._drop_rng = np.random.default_rng(rng.integers(2**63))

    def parameters(self) -> list[Parameter]:
        out = [self.tok_emb, self.pos_emb]
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        t = ids.shape[-1]
        if t > self.cfg.context_window:
            raise ModelError(
                f"sequence length {t} exceeds context window {self.cfg.context_window}"
            )
        return nm.add(
            nm.embedding(self.tok_emb, ids),
            nm.embedding(self.pos_emb, np.arange(t)),
        )

    def _dropout(self, x: Tensor) -> Tensor:
        p = self.cfg.dropout
        if p <= 0.0 or not self.training:
            return x
        keep = (self._drop_rng.random(x.data.shape) >= p).astype(x.data.dtype)
        return nm.mul(x, Tensor(keep * (1.0 / (1.0 - p))))

    def _split_heads(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        h, dh = self.cfg.n_heads, self.cfg.d_model // self.cfg.n_heads
        bsz, t = x.data.shape[0], x.data.shape[1]
        return nm.transpose(nm.reshape(nm.linear(x, w, b), (bsz, t, h, dh)), (0, 2, 1, 3))

    def _mha(
        self,
        block: _Block,
        q_in: Tensor,
        kv_in: Tensor,
        mask: np.ndarray | None,
        q_heads: Tensor | None = None,
    ) -> Tensor:
        """One multi-head attention; q_heads reuses an already-projected query."""
        cfg = self.cfg
        dh = cfg.d_model // cfg.n_heads
        bsz, tq = q_in.data.shape[0], q_in.data.shape[1]
        q = q_heads if q_heads is not None else self._split_heads(q_in, block.wq, block.bq)
        k = self._split_heads(kv_in, block.wk, block.bk)
        v = self._split_heads(kv_in, block.wv, block.bv)
        scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        probs = nm.softmax_masked(scores, mask)
        ctx = nm.reshape(nm.transpose(nm.matmul(probs, v), (0, 2, 1, 3)), (bsz, tq, cfg.d_model))
        return nm.linear(ctx, block.wo, block.bo)

    def _merge_routes(
        self,
        persona_out: Tensor,
        context_out: Tensor,
        self_out: Tensor,
        alpha: Tensor,
    ) -> Tensor:
        a = nm.reshape(alpha, (alpha.data.shape[0], 1, 1))
        one_minus = nm.add(nm.mul(a, -1.0), 1.0)
        merged = nm.add(nm.mul(persona_out, a), nm.mul(context_out, one_minus))
        if self.cfg.merge_variant == "verbatim":
            merged = nm.add(merged, context_out)
        return nm.add(merged, self_out)

    def run_blocks(
        self,
        x: Tensor,
        *,
        causal: bool,
        self_key_mask: np.ndarray | None = None,
        context: tuple[Tensor, np.ndarray] | None = None,
        persona: tuple[Tensor, np.ndarray] | None = None,
        alpha: Tensor | None = None,
        collect_routes: list[RouteOutputs] | None = None,
    ) -> Tensor:
        t = x.data.shape[1]
        mask = None
        if causal:
            mask = np.tril(np.ones((t, t), dtype=bool))
        if self_key_mask is not None:
            pad = self_key_mask[:, None, None, :]
            mask = pad if mask is None else (mask & pad)

        for block in self.blocks:
            if context is not None or persona is not None:
                q = self._split_heads(x, block.wq, block.bq)
                self_out = self._mha(block, x, x, mask, q_heads=q)
                ctx_enc, ctx_mask = context
                per_enc, per_mask = persona
                context_out = self._mha(block, x, ctx_enc, ctx_mask[:, None, None, :], q_heads=q)
                persona_out = self._mha(block, x, per_enc, per_mask[:, None, None, :], q_heads=q)
                merged = self._merge_routes(persona_out, context_out, self_out, alpha)
                if collect_routes is not None:
                    collect_routes.append(
                        RouteOutputs(
                            persona_out.data.copy(), context_out.data.copy(),
                            self_out.data.copy(), merged.data.copy(), alpha.data.copy(),
                        )
                    )
            else:
                merged = self._mha(block, x, x, mask)
            x = nm.layer_norm(
                nm.add(x, self._dropout(merged)), block.ln1_gain, block.ln1_bias
            )
            ff = nm.linear(nm.gelu(nm.linear(x, block.w1, block.b1)), block.w2, block.b2)
            x = nm.layer_norm(nm.add(x, self._dropout(ff)), block.ln2_gain, block.ln2_bias)
        return x

    def logits(self, x: Tensor) -> Tensor:
        return nm.matmul(x, nm.transpose(self.tok_emb, (1, 0)))

    def lm_batch(self, ids: np.ndarray) -> Tensor:
        """Causal language model over the shared stack: self route only."""
        return self.logits(self.run_blocks(self.embed_tokens(ids), causal=True))


def _check_unique_names(params: list[Parameter]) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ModelError(f"duplicate parameter names: {dupes}")


class LanguageModel:
    """Pre-training artifact: the shared stack run as a plain causal LM."""

    kind = "lm"

    def __init__(self, cfg: ModelConfig, vocab: Vocab, seed: int = 0, dtype=np.float32):
        if cfg.vocab_size != len(vocab):
            raise ModelError(f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.cfg = cfg
        self.vocab = vocab
        self.core = TransformerCore(cfg, np.random.default_rng(seed), dtype)
        _check_unique_names(self.parameters())

    @property
    def dtype(self):
        return self.core.dtype

    def parameters(self) -> list[Parameter]:
        return self.core.parameters()

    def lm_batch(self, ids: np.ndarray) -> Tensor:
        return self.core.lm_batch(np.asarray(ids, dtype=np.int64))

    def lm_forward(self, token_ids: np.ndarray) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        return nm.reshape(self.core.lm_batch(ids[None, :]), (ids.shape[0], self.cfg.vocab_size))


class DialogueModel:
    """Persona-conditioned dialogue model over the shared stack."""

    kind = "dialogue"

    def __init__(
        self,
        cfg: ModelConfig,
        vocab: Vocab,
        registries: Registries,
        seed: int = 0,
        dtype=np.float32,
    ):
        if cfg.vocab_size != len(vocab):
            raise ModelError(f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        if (cfg.n_genders, cfg.n_locations, cfg.n_tags) != (
            len(registries.genders), len(registries.locations), len(registries.tags)
        ):
            raise ModelError("registry sizes disagree with model config")
        self.cfg = cfg
        self.vocab = vocab
        self.registries = registries
        rng = np.random.default_rng(seed)
        self.core = TransformerCore(cfg, rng, dtype)
        d = cfg.d_model
        self.gender_emb = Parameter(rng.normal(0.0, 0.02, size=(cfg.n_genders, d)), "gender_emb", dtype)
        self.location_emb = Parameter(rng.normal(0.0, 0.02, size=(cfg.n_locations, d)), "location_emb", dtype)
        self.tag_emb = Parameter(rng.normal(0.0, 0.02, size=(cfg.n_tags, d)), "tag_emb", dtype)
        self.pred_w1 = Parameter(rng.normal(0.0, 0.02, size=(d, d)), "predictor.w1", dtype)
        self.pred_b1 = Parameter(np.zeros(d), "predictor.b1", dtype)
        self.pred_w2 = Parameter(rng.normal(0.0, 0.02, size=(d, 1)), "predictor.w2", dtype)
        self.pred_b2 = Parameter(np.zeros(1), "predictor.b2", dtype)
        _check_unique_names(self.parameters())

    @property
    def dtype(self):
        return self.core.dtype

    def parameters(self) -> list[Parameter]:
        return self.core.parameters() + [
            self.gender_emb, self.location_emb, self.tag_emb,
            self.pred_w1, self.pred_b1, self.pred_w2, self.pred_b2,
        ]

    def predictor_parameters(self) -> list[Parameter]:
        return [self.pred_w1, self.pred_b1, self.pred_w2, self.pred_b2]

    # -- encoding ----------------------------------------------------------

    def _tag_weights(self, tag_ids_batch: list[tuple[tuple[int, ...], ...]], length: int) -> np.ndarray:
        w = np.zeros((len(tag_ids_batch), length, self.cfg.n_tags), dtype=self.dtype)
        for b, per_pos in enumerate(tag_ids_batch):
            for i, tags in enumerate(per_pos):
                if tags:
                    w[b, i, list(tags)] = 1.0 / len(tags)
        return w

    def embed_context(
        self, token_ids: np.ndarray, attrs: AttributeIds, positions: np.ndarray | None = None
    ) -> Tensor:
        """Word + positional + attribute embeddings for one context sequence."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        n = token_ids.shape[0]
        if len(attrs) != n:
            raise ModelError(f"attribute length {len(attrs)} != token length {n}")
        if n > self.cfg.context_window:
            raise ModelError(f"context length {n} exceeds window {self.cfg.context_window}")
        if positions is None:
            positions = np.arange(n)
        x = nm.add(
            nm.embedding(self.core.tok_emb, token_ids),
            nm.embedding(self.core.pos_emb, np.asarray(positions)),
        )
        x = nm.add(x, nm.embedding(self.gender_emb, attrs.gender_ids))
        x = nm.add(x, nm.embedding(self.location_emb, attrs.location_ids))
        tag_w = self._tag_weights([attrs.tag_ids], n)[0]
        return nm.add(x, nm.matmul(Tensor(tag_w), self.tag_emb))

    def _embed_context_batch(
        self, token_batch: np.ndarray, gender_batch: np.ndarray,
        location_batch: np.ndarray, tag_weights: np.ndarray,
    ) -> Tensor:
        x = self.core.embed_tokens(token_batch)
        x = nm.add(x, nm.embedding(self.gender_emb, gender_batch))
        x = nm.add(x, nm.embedding(self.location_emb, location_batch))
        return nm.add(x, nm.matmul(Tensor(tag_weights), self.tag_emb))

    def encode_context_batch(
        self, contexts: list[DialogueContext]
    ) -> tuple[Tensor, np.ndarray]:
        """Pad, embed and run the stack bidirectionally; returns (enc, keep mask)."""
        if not contexts:
            raise ModelError("empty context batch")
        per = [
            context_tokens(c, self.vocab, self.registries, self.cfg.context_window)
            for c in contexts
        ]
        bsz = len(per)
        length = max(len(ids) for ids, _ in per)
        tokens = np.zeros((bsz, length), dtype=np.int64)
        genders = np.zeros((bsz, length), dtype=np.int64)
        locations = np.zeros((bsz, length), dtype=np.int64)
        mask = np.zeros((bsz, length), dtype=bool)
        tag_sets: list[tuple[tuple[int, ...], ...]] = []
        for b, (ids, attrs) in enumerate(per):
            n = len(ids)
            tokens[b, :n] = ids
            genders[b, :n] = attrs.gender_ids
            locations[b, :n] = attrs.location_ids
            mask[b, :n] = True
            tag_sets.append(attrs.tag_ids + ((),) * (length - n))
        x = self._embed_context_batch(tokens, genders, locations, self._tag_weights(tag_sets, length))
        enc = self.core.run_blocks(x, causal=False, self_key_mask=mask)
        return enc, mask

    def encode_context(self, context: DialogueContext) -> Tensor:
        enc, _ = self.encode_context_batch([context])
        return nm.reshape(enc, enc.data.shape[1:])

    def encode_persona_batch(self, personas: list[Persona]) -> tuple[Tensor, np.ndarray]:
        """Render to text, embed with word+positional only, run the stack."""
        rendered = [render_persona(p) for p in personas]
        id_lists = [encode(self.vocab, r) for r in rendered]
        length = max(len(ids) for ids in id_lists)
        if length > self.cfg.context_window:
            raise ModelError(f"rendered persona length {length} exceeds context window")
        bsz = len(id_lists)
        tokens = np.zeros((bsz, length), dtype=np.int64)
        mask = np.zeros((bsz, length), dtype=bool)
        for b, ids in enumerate(id_lists):
            tokens[b, : len(ids)] = ids
            mask[b, : len(ids)] = True
        enc = self.core.run_blocks(self.core.embed_tokens(tokens), causal=False, self_key_mask=mask)
        return enc, mask

    def encode_persona(self, persona: Persona) -> Tensor:
        enc, _ = self.encode_persona_batch([persona])
        return nm.reshape(enc, enc.data.shape[1:])

    # -- persona weight -----------------------------------------------------

    def predict_alpha_logits_batch(self, enc: Tensor, mask: np.ndarray) -> Tensor:
        """Masked mean pool over positions, one hidden layer; pre-squash logits."""
        counts = mask.sum(axis=-1, keepdims=True)
        weights = (mask / np.maximum(counts, 1)).astype(self.dtype)[:, None, :]
        pooled = nm.reshape(nm.matmul(Tensor(weights), enc), (enc.data.shape[0], self.cfg.d_model))
        hidden = nm.gelu(nm.linear(pooled, self.pred_w1, self.pred_b1))
        logit = nm.linear(hidden, self.pred_w2, self.pred_b2)
        return nm.reshape(logit, (enc.data.shape[0],))

    def predict_alpha_batch(self, enc: Tensor, mask: np.ndarray) -> Tensor:
        return nm.sigmoid(self.predict_alpha_logits_batch(enc, mask))

    def predict_alpha(self, context: DialogueContext) -> PersonaWeight:
        enc, mask = self.encode_context_batch([context])
        alpha = self.predict_alpha_batch(enc, mask)
        return PersonaWeight(float(alpha.data[0]), "predicted")

    # -- decoding ------------------------------------------------------------

    def _as_alpha_tensor(self, alpha, bsz: int) -> Tensor:
        if isinstance(alpha, Tensor):
            _validate_alpha_values(alpha.data)
            return alpha
        arr = np.asarray(alpha, dtype=self.dtype)
        if arr.ndim == 0:
            arr = np.full(bsz, float(arr), dtype=self.dtype)
        _validate_alpha_values(arr)
        return Tensor(arr)

    def attention_route(
        self,
        e_prev: Tensor,
        e_t: Tensor,
        e_c: Tensor,
        alpha,
        causal_mask: np.ndarray | None = None,
        block_idx: int = 0,
    ) -> RouteOutputs:
        """One routed attention over a single example, instrumenting outputs."""

        def batched(x: Tensor) -> Tensor:
            return nm.reshape(x, (1,) + x.data.shape) if x.data.ndim == 2 else x

        e_prev, e_t, e_c = batched(e_prev), batched(e_t), batched(e_c)
        t = e_prev.data.shape[1]
        if causal_mask is None:
            causal_mask = np.tril(np.ones((t, t), dtype=bool))
        alpha_t = self._as_alpha_tensor(alpha, e_prev.data.shape[0])
        block = self.core.blocks[block_idx]
        self_out = self.core._mha(block, e_prev, e_prev, causal_mask)
        context_out = self.core._mha(block, e_prev, e_c, None)
        persona_out = self.core._mha(block, e_prev, e_t, None)
        merged = self.core._merge_routes(persona_out, context_out, self_out, alpha_t)
        return RouteOutputs(
            persona_out.data[0].copy(), context_out.data[0].copy(),
            self_out.data[0].copy(), merged.data[0].copy(), alpha_t.data.copy(),
        )

    def decode_batch(
        self,
        prefix_ids: np.ndarray,
        context_enc: Tensor,
        context_mask: np.ndarray,
        persona_enc: Tensor,
        persona_mask: np.ndarray,
        alpha,
        collect_routes: list[RouteOutputs] | None = None,
    ) -> Tensor:
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        alpha_t = self._as_alpha_tensor(alpha, prefix_ids.shape[0])
        x = self.core.embed_tokens(prefix_ids)
        x = self.core.run_blocks(
            x,
            causal=True,
            context=(context_enc, context_mask),
            persona=(persona_enc, persona_mask),
            alpha=alpha_t,
            collect_routes=collect_routes,
        )
        return self.core.logits(x)

    def decode_forward(
        self,
        prefix_ids: np.ndarray,
        context_enc: Tensor,
        persona_enc: Tensor,
        alpha: float,
        collect_routes: list[RouteOutputs] | None = None,
    ) -> Tensor:
        """Single-example teacher-forced decode; returns (dec_len, vocab) logits."""

        def batched(x: Tensor) -> Tensor:
            return nm.reshape(x, (1,) + x.data.shape) if x.data.ndim == 2 else x

        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        ctx = batched(context_enc)
        per = batched(persona_enc)
        logits = self.decode_batch(
            prefix_ids[None, :],
            ctx, np.ones(ctx.data.shape[:2], dtype=bool),
            per, np.ones(per.data.shape[:2], dtype=bool),
            alpha,
            collect_routes=collect_routes,
        )
        return nm.reshape(logits, logits.data.shape[1:])

    def lm_batch(self, ids: np.ndarray) -> Tensor:
        return self.core.lm_batch(np.asarray(ids, dtype=np.int64))

    def lm_forward(self, token_ids: np.ndarray) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        return nm.reshape(self.core.lm_batch(ids[None, :]), (ids.shape[0], self.cfg.vocab_size))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_checkpoint(model, path: str | Path) -> None:
    """Versioned binary container: JSON header + raw little-endian parameters."""
    params = model.parameters()
    dtype = np.dtype(model.dtype)
    wire = "<f4" if dtype == np.float32 else "<f8"
    manifest = []
    offset = 0
    for p in params:
        nbytes = p.data.size * dtype.itemsize
        manifest.append({"name": p.name, "shape": list(p.data.shape), "offset": offset})
        offset += nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "dtype": dtype.name,
        "config": asdict(model.cfg),
        "vocab": list(model.vocab.id_to_token),
        "registries": (
            {
                "genders": list(model.registries.genders),
                "locations": list(model.registries.locations),
                "tags": list(model.registries.tags),
            }
            if model.kind == "dialogue"
            else None
        ),
        "params": manifest,
    }
    blob = _canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data).astype(wire, copy=False).tobytes())


def _read_header(fh) -> dict:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ModelError("not a model checkpoint (bad magic)")
    version, header_len = struct.unpack("<IQ", fh.read(12))
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    return json.loads(fh.read(header_len).decode("utf-8"))


def load_checkpoint(path: str | Path):
    """Rebuild the saved model bit-exactly (LM or dialogue, per the header)."""
    from .text import Vocab  # local alias for clarity

    with open(path, "rb") as fh:
        header = _read_header(fh)
        body = fh.read()
    cfg = ModelConfig(**header["config"])
    vocab = Vocab.from_tokens(header["vocab"][5:])
    if header["kind"] == "dialogue":
        reg = Registries(
            tuple(header["registries"]["genders"]),
            tuple(header["registries"]["locations"]),
            tuple(header["registries"]["tags"]),
        )
        model = DialogueModel(cfg, vocab, reg, seed=0, dtype=np.dtype(header["dtype"]))
    else:
        model = LanguageModel(cfg, vocab, seed=0, dtype=np.dtype(header["dtype"]))
    _load_params(model, header, body)
    return model


def _load_params(model, header: dict, body: bytes) -> None:
    dtype = np.dtype(header["dtype"])
    wire = "<f4" if dtype == np.float32 else "<f8"
    by_name = {p.name: p for p in model.parameters()}
    manifest_names = [m["name"] for m in header["params"]]
    if set(manifest_names) != set(by_name):
        missing = sorted(set(by_name) - set(manifest_names))
        extra = sorted(set(manifest_names) - set(by_name))
        raise ModelError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for m in header["params"]:
        p = by_name[m["name"]]
        if list(p.data.shape) != m["shape"]:
            raise ModelError(
                f"shape mismatch for {m['name']}: checkpoint {m['shape']}, model {list(p.data.shape)}"
            )
        count = int(np.prod(m["shape"])) if m["shape"] else 1
        arr = np.frombuffer(
            body, dtype=wire, count=count, offset=m["offset"]
        ).reshape(m["shape"])
        p.data = arr.astype(dtype, copy=True)


def init_from_lm_checkpoint(model: DialogueModel, path: str | Path) -> None:
    """Copy the shared stack from a pre-training checkpoint into a dialogue
    model, leaving its fresh attribute tables and predictor untouched.

    Every core parameter must match by name and shape; mismatches are
    reported with the offending parameter names.
    """
    with open(path, "rb") as fh:
        header = _read_header(fh)
        body = fh.read()
    if header["kind"] != "lm":
        raise ModelError(f"expected an lm checkpoint, got kind {header['kind']!r}")
    dtype = np.dtype(header["dtype"])
    wire = "<f4" if dtype == np.float32 else "<f8"
    core_params = {p.name: p for p in model.core.parameters()}
    manifest = {m["name"]: m for m in header["params"]}
    if set(manifest) != set(core_params):
        raise ModelError(
            f"core parameter names disagree: checkpoint {sorted(manifest)}, "
            f"model {sorted(core_params)}"
        )
    bad = [
        name for name, m in manifest.items()
        if list(core_params[name].data.shape) != m["shape"]
    ]
    if bad:
        detail = ", ".join(
            f"{n} (checkpoint {manifest[n]['shape']}, model {list(core_params[n].data.shape)})"
            for n in sorted(bad)
        )
        raise ModelError(f"shape mismatch loading pre-trained stack: {detail}")
    for name, m in manifest.items():
        p = core_params[name]
        count = int(np.prod(m["shape"])) if m["shape"] else 1
        arr = np.frombuffer(body, dtype=wire, count=count, offset=m["offset"]).reshape(m["shape"])
        p.data = arr.astype(np.dtype(model.dtype), copy=True)
