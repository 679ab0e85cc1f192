"""Personas, dialogues, the rule-based persona-exhibition labeler, and a
seeded synthetic corpus generator for persona-sparse training data.

The generator builds two kinds of exchanges from template banks: revealing
ones, whose response embeds a value from the responder's persona, and generic
ones, whose templates are audited to never trip the labeling rules. That
makes the rule labeler exact on generated data.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Persona:
    gender: str
    location: str
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(sorted(set(self.tags))))

    def to_json(self) -> dict:
        return {"gender": self.gender, "location": self.location, "tags": list(self.tags)}

    @staticmethod
    def from_json(obj: dict) -> "Persona":
        return Persona(obj["gender"], obj["location"], tuple(obj.get("tags", ())))


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise DataError("utterance text must be non-empty")


@dataclass(frozen=True)
class DialogueContext:
    turns: tuple[tuple[Utterance, Persona], ...]

    def __post_init__(self):
        if not self.turns:
            raise DataError("dialogue context needs at least one turn")


@dataclass(frozen=True)
class TrainingExample:
    context: DialogueContext
    target_persona: Persona
    response: str
    persona_label: int


def render_persona(persona: Persona) -> str:
    """Fixed textual form fed to the persona encoder; injective over registries."""
    return (
        f"gender:{persona.gender} ; location:{persona.location}"
        f" ; tags:{','.join(persona.tags)}"
    )


# ---------------------------------------------------------------------------
# registries and template banks
# ---------------------------------------------------------------------------

GENDERS = ("female", "male", "unspecified")

# Keywords whose word-bounded appearance in a response counts as revealing
# the speaker's gender.
GENDER_LEXICON: dict[str, tuple[str, ...]] = {
    "female": ("girl", "woman", "lady"),
    "male": ("boy", "man", "fellow"),
    "unspecified": (),
}

# Every location and tag starts with a distinct letter: a character-level
# decoder only has to get the first character right off the persona encoding
# and the language model completes the value.
DEFAULT_LOCATIONS = (
    "ashvale", "brimford", "cradley", "dunmore", "eastwick",
    "farrowden", "glenbrook", "harwick", "ilverton", "juneberry",
)

DEFAULT_TAGS = (
    "astronomy", "baking", "chess", "darts", "embroidery", "fishing",
    "gardening", "hiking", "juggling", "kites", "origami", "poetry",
)


@dataclass(frozen=True)
class Registries:
    genders: tuple[str, ...] = GENDERS
    locations: tuple[str, ...] = DEFAULT_LOCATIONS
    tags: tuple[str, ...] = DEFAULT_TAGS

    def gender_id(self, value: str) -> int:
        return self.genders.index(value)

    def location_id(self, value: str) -> int:
        return self.locations.index(value)

    def tag_id(self, value: str) -> int:
        return self.tags.index(value)

    def validate(self, persona: Persona) -> None:
        if persona.gender not in self.genders:
            raise DataError(f"unknown gender {persona.gender!r}")
        if persona.location not in self.locations:
            raise DataError(f"unknown location {persona.location!r}")
        for t in persona.tags:
            if t not in self.tags:
                raise DataError(f"unknown tag {t!r}")


DEFAULT_REGISTRIES = Registries()


def default_persona(registries: Registries = DEFAULT_REGISTRIES) -> Persona:
    return Persona("unspecified", registries.locations[0], ())


LOCATION_QUESTIONS = (
    "so tell me , where do you live these days ?",
    "which town are you from originally ?",
    "where are you based at the moment ?",
    "what place do you call home now ?",
    "whereabouts do you stay , if i may ask ?",
)
TAG_QUESTIONS = (
    "so what do you do for fun lately ?",
    "any hobbies taking up your weekends ?",
    "what keeps you busy after work these days ?",
    "got a favourite pastime to recommend ?",
    "how do you usually spend your free time ?",
)
GENDER_QUESTIONS = (
    "are you a boy or a girl , by the way ?",
    "man or woman , if you do not mind me asking ?",
    "may i ask your gender ?",
)
GENERIC_QUESTIONS = (
    "how is your day going ?",
    "did you sleep well last night ?",
    "what time is it over there ?",
    "have you eaten dinner yet ?",
    "how was the commute today ?",
    "is it still raining out there ?",
    "are you done with work yet ?",
    "did you watch the match last night ?",
    "any plans for the evening ?",
    "how did the meeting go ?",
    "is the heating fixed yet ?",
    "when does your shift end today ?",
)
GENERIC_GREETINGS = (
    "hey there !",
    "good evening !",
    "hello again !",
    "hi , long time no see !",
    "howdy , stranger !",
    "evening , all !",
)

# Response bodies carry no trailing period; responses are composed as
# prefix + body + suffix + " ." so the surface variety stays combinatorial.
# Most reveal bodies are value-first: the attribute value right at the start
# of the response keeps its retrieval from the persona encoding a clean,
# early decoding decision.
LOCATION_REVEALS = (
    "{value} born and raised",
    "{value} is where i live",
    "{value} is home for me",
    "i am from {value}",
    "i live in {value}",
)
TAG_REVEALS = (
    "{value} is my hobby",
    "{value} keeps me busy",
    "{value} fills my weekends",
    "mostly {value} these days",
    "i am really into {value}",
)
GENDER_REVEALS = (
    "{value} here , plain and simple",
    "just a {value} here",
    "i am a {value}",
    "a {value} like me would agree",
)
GENERIC_RESPONSES = (
    "it is going fine , thanks for asking",
    "not too bad , just a bit tired",
    "pretty quiet on my end",
    "i slept late again , sadly",
    "nothing much , same old routine",
    "that sounds exhausting",
    "maybe later , i still have chores",
    "time flies when the week is full",
    "almost done , one more task to go",
    "i missed it , too busy with dishes",
    "the rain finally stopped an hour ago",
    "long day , glad it is over now",
    "cannot complain , things are steady",
    "the commute was slow as usual",
    "dinner first , then we can talk",
    "my phone kept buzzing all evening",
)

REVEAL_PREFIXES = ("", "well , ", "honestly , ", "oh , ", "to be fair , ")
RESPONSE_SUFFIXES = ("", " , honestly", " , i suppose", " , you know", " , to be fair")

QUESTIONS_BY_KIND = {
    "location": LOCATION_QUESTIONS,
    "tag": TAG_QUESTIONS,
    "gender": GENDER_QUESTIONS,
}
REVEALS_BY_KIND = {
    "location": LOCATION_REVEALS,
    "tag": TAG_REVEALS,
    "gender": GENDER_REVEALS,
}


@dataclass(frozen=True)
class TemplateBanks:
    questions_by_kind: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(QUESTIONS_BY_KIND)
    )
    reveals_by_kind: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(REVEALS_BY_KIND)
    )
    generic_questions: tuple[str, ...] = GENERIC_QUESTIONS
    generic_responses: tuple[str, ...] = GENERIC_RESPONSES
    greetings: tuple[str, ...] = GENERIC_GREETINGS
    prefixes: tuple[str, ...] = REVEAL_PREFIXES
    suffixes: tuple[str, ...] = RESPONSE_SUFFIXES


@dataclass(frozen=True)
class CorpusConfig:
    n_dialogues: int = 9100
    persona_density: float = 0.162
    seed: int = 0
    registries: Registries = DEFAULT_REGISTRIES
    banks: TemplateBanks = field(default_factory=TemplateBanks)
    # fraction of revealing exchanges whose final context turn is a matching
    # question rather than small talk
    prompted_fraction: float = 0.75


# ---------------------------------------------------------------------------
# rule-based labeling
# ---------------------------------------------------------------------------

def heuristic_label(response: str, persona: Persona) -> int:
    """1 iff the response surface-exhibits any attribute of the persona.

    Rules: the location appears as a substring, any tag appears as a
    substring, or a gender-lexicon keyword appears as a whole word. Matching
    is case-folded throughout.
    """
    low = response.casefold()
    if persona.location and persona.location.casefold() in low:
        return 1
    for tag in persona.tags:
        if tag.casefold() in low:
            return 1
    for word in GENDER_LEXICON.get(persona.gender, ()):
        if re.search(rf"\b{re.escape(word.casefold())}\b", low):
            return 1
    return 0


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def _sample_persona(rng: np.random.Generator, reg: Registries) -> Persona:
    gender = reg.genders[rng.integers(len(reg.genders))]
    location = reg.locations[rng.integers(len(reg.locations))]
    n_tags = int(rng.choice([0, 1, 2, 3], p=[0.15, 0.35, 0.30, 0.20]))
    tags = tuple(rng.choice(len(reg.tags), size=n_tags, replace=False))
    return Persona(gender, location, tuple(reg.tags[i] for i in tags))


def _pick(rng: np.random.Generator, items: Sequence[str]) -> str:
    return items[int(rng.integers(len(items)))]


def _reveal_kinds(persona: Persona) -> list[str]:
    kinds = ["location"]
    if persona.tags:
        kinds.append("tag")
    if GENDER_LEXICON.get(persona.gender):
        kinds.append("gender")
    return kinds


def _compose(rng: np.random.Generator, banks: TemplateBanks, body: str) -> str:
    return _pick(rng, banks.prefixes) + body + _pick(rng, banks.suffixes) + " ."


def generate_corpus(cfg: CorpusConfig) -> list[TrainingExample]:
    """Deterministic synthetic persona-sparse corpus.

    Exactly round(persona_density * n) exchanges are persona-revealing; the
    generator asserts the rule labeler agrees with the intended label of
    every example it emits.
    """
    if not 0.0 <= cfg.persona_density <= 1.0:
        raise DataError(f"persona_density {cfg.persona_density} outside [0, 1]")
    if cfg.persona_density > 0 and not cfg.banks.reveals_by_kind:
        raise DataError("persona_density > 0 needs revealing templates")
    if cfg.persona_density < 1 and not cfg.banks.generic_responses:
        raise DataError("persona_density < 1 needs generic templates")

    rng = np.random.default_rng(cfg.seed)
    reg = cfg.registries
    banks = cfg.banks

    n_reveal = round(cfg.persona_density * cfg.n_dialogues)
    reveal_flags = np.zeros(cfg.n_dialogues, dtype=bool)
    reveal_flags[:n_reveal] = True
    rng.shuffle(reveal_flags)

    examples: list[TrainingExample] = []
    for i in range(cfg.n_dialogues):
        partner = _sample_persona(rng, reg)
        responder = _sample_persona(rng, reg)
        partner_id, responder_id = f"d{i}a", f"d{i}b"

        revealing = bool(reveal_flags[i])
        if revealing:
            kind = _pick(rng, _reveal_kinds(responder))
            prompted = rng.random() < cfg.prompted_fraction
            question_bank = banks.questions_by_kind[kind] if prompted else banks.generic_questions
            if kind == "location":
                value = responder.location
            elif kind == "tag":
                value = _pick(rng, responder.tags)
            else:
                value = _pick(rng, GENDER_LEXICON[responder.gender])
            response = _compose(rng, banks, _pick(rng, banks.reveals_by_kind[kind]).format(value=value))
        else:
            question_bank = banks.generic_questions
            response = _compose(rng, banks, _pick(rng, banks.generic_responses))

        turns: list[tuple[Utterance, Persona]] = []
        shape = rng.random()
        if shape < 0.35:
            turns.append((Utterance(responder_id, _pick(rng, banks.greetings)), responder))
        elif shape < 0.55:
            turns.append((Utterance(partner_id, _pick(rng, banks.generic_questions)), partner))
            turns.append(
                (Utterance(responder_id, _compose(rng, banks, _pick(rng, banks.generic_responses))), responder)
            )
        turns.append((Utterance(partner_id, _pick(rng, question_bank)), partner))

        label = heuristic_label(response, responder)
        if label != int(revealing):
            raise DataError(
                f"template banks drifted: intended label {int(revealing)} but rules "
                f"produced {label} for response {response!r}"
            )
        examples.append(
            TrainingExample(DialogueContext(tuple(turns)), responder, response, label)
        )
    return examples


@dataclass(frozen=True)
class CorpusSplits:
    train: list[TrainingExample]
    valid: list[TrainingExample]
    test_random: list[TrainingExample]
    test_biased: list[TrainingExample]

    def as_dict(self) -> dict[str, list[TrainingExample]]:
        return {
            "train": self.train,
            "valid": self.valid,
            "test_random": self.test_random,
            "test_biased": self.test_biased,
        }


def split_corpus(
    examples: Sequence[TrainingExample],
    seed: int,
    n_valid: int = 500,
    n_test_random: int = 500,
    n_test_biased: int = 100,
) -> CorpusSplits:
    """Disjoint train/valid/random-test splits plus a biased test split of
    persona-revealing examples only."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]

    labeled_positions = [i for i, ex in enumerate(shuffled) if ex.persona_label == 1]
    if len(labeled_positions) < n_test_biased:
        raise DataError(
            f"need {n_test_biased} persona-revealing examples for the biased split, "
            f"only {len(labeled_positions)} available"
        )
    biased_set = set(labeled_positions[:n_test_biased])
    biased = [shuffled[i] for i in sorted(biased_set)]
    rest = [ex for i, ex in enumerate(shuffled) if i not in biased_set]
    if len(rest) < n_valid + n_test_random:
        raise DataError("not enough examples for the requested split sizes")
    test_random = rest[:n_test_random]
    valid = rest[n_test_random : n_test_random + n_valid]
    train = rest[n_test_random + n_valid :]
    return CorpusSplits(train, valid, test_random, biased)


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

def example_to_json(ex: TrainingExample) -> dict:
    return {
        "context": [
            {"speaker": u.speaker_id, "text": u.text, "persona": p.to_json()}
            for u, p in ex.context.turns
        ],
        "target_persona": ex.target_persona.to_json(),
        "response": ex.response,
        "label": ex.persona_label,
    }


def example_from_json(obj: dict) -> TrainingExample:
    for key in ("context", "target_persona", "response", "label"):
        if key not in obj:
            raise DataError(f"missing field {key!r}")
    turns = tuple(
        (Utterance(t["speaker"], t["text"]), Persona.from_json(t["persona"]))
        for t in obj["context"]
    )
    return TrainingExample(
        DialogueContext(turns),
        Persona.from_json(obj["target_persona"]),
        obj["response"],
        int(obj["label"]),
    )


def save_jsonl(examples: Iterable[TrainingExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_json(ex), ensure_ascii=False) + "\n")


def load_jsonl(path: str | Path) -> list[TrainingExample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(example_from_json(json.loads(line)))
            except (json.JSONDecodeError, DataError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# pre-training text
# ---------------------------------------------------------------------------

def generate_pretrain_text(
    seed: int,
    min_chars: int = 1_100_000,
    registries: Registries = DEFAULT_REGISTRIES,
    banks: TemplateBanks | None = None,
) -> str:
    """Plain text in the corpus register, one utterance per line, ≥ min_chars."""
    banks = banks or TemplateBanks()
    rng = np.random.default_rng(seed)
    flat_questions = tuple(
        q for bank in banks.questions_by_kind.values() for q in bank
    ) + banks.generic_questions
    lines: list[str] = []
    total = 0
    while total < min_chars:
        r = rng.random()
        if r < 0.25:
            line = _pick(rng, flat_questions)
        elif r < 0.45:
            kind = _pick(rng, ("location", "tag", "gender"))
            if kind == "location":
                value = _pick(rng, registries.locations)
            elif kind == "tag":
                value = _pick(rng, registries.tags)
            else:
                value = _pick(rng, GENDER_LEXICON["female"] + GENDER_LEXICON["male"])
            line = _compose(rng, banks, _pick(rng, banks.reveals_by_kind[kind]).format(value=value))
        elif r < 0.65:
            # profile line immediately followed by a first-person line
            # grounded in that profile: the stack models the rendering format
            # next to the value strings it introduces, and learns to carry a
            # value across lines within one window
            persona = _sample_persona(rng, registries)
            kind = _pick(rng, _reveal_kinds(persona))
            if kind == "location":
                value = persona.location
            elif kind == "tag":
                value = _pick(rng, persona.tags)
            else:
                value = _pick(rng, GENDER_LEXICON[persona.gender])
            line = render_persona(persona) + "\n" + _compose(
                rng, banks, _pick(rng, banks.reveals_by_kind[kind]).format(value=value)
            )
        elif r < 0.72:
            line = _pick(rng, banks.greetings)
        else:
            line = _compose(rng, banks, _pick(rng, banks.generic_responses))
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines) + "\n"


def corpus_character_stream(
    examples: Iterable[TrainingExample], extra_text: str = ""
) -> Iterable[str]:
    """Every character the model will ever see, for vocabulary building."""
    if extra_text:
        yield extra_text
    for ex in examples:
        for u, p in ex.context.turns:
            yield u.text
            yield render_persona(p)
        yield ex.response
        yield render_persona(ex.target_persona)
