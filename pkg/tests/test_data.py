import json

import numpy as np
import pytest

from personaroute.data import (
    GENDER_LEXICON,
    CorpusConfig,
    DataError,
    DEFAULT_REGISTRIES,
    Persona,
    TemplateBanks,
    TrainingExample,
    Utterance,
    DialogueContext,
    example_to_json,
    generate_corpus,
    generate_pretrain_text,
    heuristic_label,
    load_jsonl,
    render_persona,
    save_jsonl,
    split_corpus,
)


def independent_matcher(response: str, persona: Persona) -> int:
    """Second rule implementation used as the oracle: token scan, no regex."""
    low = response.casefold()
    if persona.location.casefold() in low:
        return 1
    if any(t.casefold() in low for t in persona.tags):
        return 1
    words = set("".join(c if c.isalpha() else " " for c in low).split())
    if any(w in words for w in GENDER_LEXICON.get(persona.gender, ())):
        return 1
    return 0


def test_heuristic_location_hit():
    p = Persona("female", "cradley", ("chess",))
    assert heuristic_label("i am based over in cradley .", p) == 1


def test_heuristic_no_match():
    p = Persona("female", "cradley", ("chess",))
    assert heuristic_label("ok, see you", p) == 0


def test_heuristic_tag_and_gender_rules():
    p = Persona("male", "cradley", ("chess",))
    assert heuristic_label("chess all night", p) == 1
    assert heuristic_label("i am a man of habit", p) == 1
    assert heuristic_label("many things to do", p) == 0  # word boundary
    assert heuristic_label("I AM A MAN", p) == 1  # case folded


def test_heuristic_agrees_with_independent_matcher_on_fixture():
    rng = np.random.default_rng(42)
    reg = DEFAULT_REGISTRIES
    pieces = (
        list(reg.locations)
        + list(reg.tags)
        + ["man", "woman", "girl", "boy", "lady", "fellow", "many", "mango",
           "hello", "see", "you", "soon", "tired", "later", "boyish", "germany"]
    )
    checked = 0
    for _ in range(200):
        persona = Persona(
            reg.genders[rng.integers(3)],
            reg.locations[rng.integers(len(reg.locations))],
            tuple(reg.tags[i] for i in rng.choice(len(reg.tags), size=rng.integers(0, 3), replace=False)),
        )
        words = [pieces[i] for i in rng.integers(0, len(pieces), size=rng.integers(1, 8))]
        response = " ".join(words)
        assert heuristic_label(response, persona) == independent_matcher(response, persona)
        checked += 1
    assert checked == 200


def test_generate_corpus_density():
    cfg = CorpusConfig(n_dialogues=1000, persona_density=0.162, seed=7)
    examples = generate_corpus(cfg)
    frac = sum(ex.persona_label for ex in examples) / len(examples)
    assert 0.142 <= frac <= 0.182


def test_generate_corpus_zero_density():
    examples = generate_corpus(CorpusConfig(n_dialogues=200, persona_density=0.0, seed=1))
    assert all(ex.persona_label == 0 for ex in examples)


def test_generate_corpus_deterministic():
    cfg = CorpusConfig(n_dialogues=300, persona_density=0.3, seed=11)
    a = [example_to_json(ex) for ex in generate_corpus(cfg)]
    b = [example_to_json(ex) for ex in generate_corpus(cfg)]
    assert json.dumps(a) == json.dumps(b)


def test_generate_corpus_labels_consistent_with_rules():
    cfg = CorpusConfig(n_dialogues=500, persona_density=0.4, seed=3)
    for ex in generate_corpus(cfg):
        assert ex.persona_label == heuristic_label(ex.response, ex.target_persona)


def test_generic_templates_never_trip_rules():
    banks = TemplateBanks()
    reg = DEFAULT_REGISTRIES
    worst = Persona("female", "nowhere", reg.tags)
    for text in banks.generic_responses + banks.generic_questions + banks.greetings:
        for gender in reg.genders:
            p = Persona(gender, "zzz-unused", reg.tags)
            assert heuristic_label(text, p) == 0, text
        for loc in reg.locations:
            assert loc not in text
    assert heuristic_label("placeholder", worst) == 0


def test_invalid_density_errors():
    with pytest.raises(DataError, match="outside"):
        generate_corpus(CorpusConfig(n_dialogues=10, persona_density=1.5))


def test_split_biased_is_all_labeled():
    examples = generate_corpus(CorpusConfig(n_dialogues=1000, persona_density=0.2, seed=5))
    splits = split_corpus(examples, seed=5, n_valid=100, n_test_random=100, n_test_biased=50)
    assert len(splits.test_biased) == 50
    assert all(ex.persona_label == 1 for ex in splits.test_biased)


def test_split_disjoint_and_union_subset():
    examples = generate_corpus(CorpusConfig(n_dialogues=600, persona_density=0.3, seed=9))
    splits = split_corpus(examples, seed=2, n_valid=50, n_test_random=50, n_test_biased=20)
    parts = [splits.train, splits.valid, splits.test_random, splits.test_biased]
    ids = [set(id(ex) for ex in part) for part in parts]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            assert not (ids[i] & ids[j])
    assert sum(len(p) for p in parts) == len(examples)


def test_split_desk_default_sizes():
    examples = generate_corpus(CorpusConfig(n_dialogues=9100, persona_density=0.162, seed=0))
    splits = split_corpus(examples, seed=0)
    sizes = tuple(len(p) for p in (splits.train, splits.valid, splits.test_random, splits.test_biased))
    assert sizes == (8000, 500, 500, 100)


def test_split_insufficient_labeled_errors():
    examples = generate_corpus(CorpusConfig(n_dialogues=100, persona_density=0.0, seed=1))
    with pytest.raises(DataError, match="biased"):
        split_corpus(examples, seed=0, n_valid=10, n_test_random=10, n_test_biased=5)


def test_jsonl_round_trip(tmp_path):
    examples = generate_corpus(CorpusConfig(n_dialogues=50, persona_density=0.3, seed=13))
    path = tmp_path / "corpus.jsonl"
    save_jsonl(examples, path)
    loaded = load_jsonl(path)
    assert loaded == examples


def test_jsonl_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_jsonl(path) == []


def test_jsonl_missing_field_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps(example_to_json(generate_corpus(CorpusConfig(5, 0.0, 1))[0]))
    bad = json.dumps({"context": [], "response": "x", "label": 0})
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(DataError, match="bad.jsonl:2"):
        load_jsonl(path)


def test_render_persona_is_injective_and_tag_sorted():
    a = Persona("female", "ashvale", ("chess", "baking"))
    b = Persona("female", "ashvale", ("baking", "chess"))
    c = Persona("female", "brimford", ("chess", "baking"))
    assert render_persona(a) == render_persona(b)
    assert render_persona(a) != render_persona(c)
    assert render_persona(a) == "gender:female ; location:ashvale ; tags:baking,chess"


def test_utterance_rejects_empty_text():
    with pytest.raises(DataError):
        Utterance("s", "")


def test_context_rejects_zero_turns():
    with pytest.raises(DataError):
        DialogueContext(())


def test_pretrain_text_size_and_determinism():
    a = generate_pretrain_text(seed=21, min_chars=5000)
    b = generate_pretrain_text(seed=21, min_chars=5000)
    assert a == b
    assert len(a) >= 5000
    assert a.endswith("\n")
