"""Scratch: route-level diagnosis of value grounding (not part of the package)."""
import sys

import numpy as np

from personaroute import numerics as nm
from personaroute.data import CorpusConfig, generate_corpus, split_corpus
from personaroute.model import load_checkpoint
from personaroute.text import BOS_ID, encode
from personaroute.training import dialogue_loss

ckpt = sys.argv[1] if len(sys.argv) > 1 else "/tmp/pilot4_dialogue.ckpt"
model = load_checkpoint(ckpt)
vocab = model.vocab
examples = generate_corpus(CorpusConfig(n_dialogues=4000, persona_density=0.162, seed=11))
splits = split_corpus(examples, seed=11, n_valid=300, n_test_random=300, n_test_biased=80)

# teacher-forced probability of the value's first char at its position
probs_first = []
kinds = []
with nm.no_grad():
    for ex in splits.test_biased:
        value = None
        for v in (ex.target_persona.location, *ex.target_persona.tags):
            if v in ex.response:
                value = v
                break
        if value is None:
            continue
        pos = ex.response.find(value)
        enc_c = model.encode_context(ex.context)
        enc_t = model.encode_persona(ex.target_persona)
        pw = model.predict_alpha(ex.context)
        ids = np.array([BOS_ID] + encode(vocab, ex.response)[:-1])
        logits = model.decode_forward(ids[: pos + 1], enc_c, enc_t, pw.alpha).data[-1]
        row = logits.astype(np.float64)
        p = np.exp(row - row.max()); p /= p.sum()
        probs_first.append(float(p[vocab.token_to_id[value[0]]]))
print(f"teacher-forced P(first value char) over {len(probs_first)} biased examples:")
print(f"  mean {np.mean(probs_first):.3f} median {np.median(probs_first):.3f} "
      f">0.5: {np.mean(np.array(probs_first) > 0.5):.2f}")

# gradient magnitudes reaching the two encodings
batch = splits.test_biased[:16]
enc_grads = {}
for name in ("context", "persona"):
    for p in model.parameters():
        p.zero_grad()
    loss = dialogue_loss(model, batch)
    loss.backward()
    enc_grads[name] = None
g_tag = float(np.abs(model.tag_emb.grad).mean())
g_tok = float(np.abs(model.core.tok_emb.grad).mean())
print(f"grad |tag_emb| {g_tag:.2e} vs |tok_emb| {g_tok:.2e}")
