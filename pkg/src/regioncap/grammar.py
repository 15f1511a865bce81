"""Closed caption grammar over procedural shape scenes.

The language is deliberately low-entropy: attribute distributions are skewed
and the narration templates carry long deterministic scaffolding, so a small
causal LM can model held-out sentences tightly.  Captions follow the template
"a <color> <shape> <relation-verb-phrase> <other>"; class labels are bare
category names like "red triangle".

Every vocabulary word carries a part-of-speech tag in {noun, verb, other};
color words are additionally flagged as noun-phrase modifiers for phrase
extraction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COLORS = ("red", "blue", "green", "yellow")
COLOR_PROBS = (0.60, 0.20, 0.12, 0.08)
COLOR_RGB = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "green": (0.10, 0.75, 0.20),
    "yellow": (0.90, 0.85, 0.10),
}

SHAPES = ("triangle", "square", "circle")
SHAPE_PROBS = (0.60, 0.25, 0.15)

VERBS = ("sits", "rests", "floats")
# subject shape strongly selects the verb; remaining mass split 0.06 / 0.04
VERB_FOR_SHAPE = {"triangle": "sits", "square": "rests", "circle": "floats"}
VERB_PRIMARY_PROB = 0.90
VERB_OTHER_PROBS = (0.06, 0.04)

DIRECTIONS = ("left", "right", "north", "south")
OPPOSITE = {"left": "right", "right": "left", "north": "south", "south": "north"}
HORIZONTAL_PROB = 0.80

FUNCTION_WORDS = ("a", "there", "is", "all", "alone", "in", "the",
                  "and", "it", "to", "of")

WORDS = FUNCTION_WORDS + DIRECTIONS + COLORS + SHAPES + VERBS + ("picture",)

POS = {}
for _w in WORDS:
    POS[_w] = "other"
for _w in SHAPES + ("picture",):
    POS[_w] = "noun"
for _w in VERBS:
    POS[_w] = "verb"
# inflected forms the grammar never emits but the phrase matcher may see
for _w in SHAPES + ("picture",):
    POS[_w + "s"] = "noun"

MODIFIERS = frozenset(COLORS)


@dataclass(frozen=True)
class ObjectSpec:
    """One placed object plus its relation to the scene's other object."""
    kind: str
    color: str
    size_class: str
    center: tuple  # (cx, cy) pixels, float
    size: float    # characteristic extent in pixels
    verb: str | None = None       # relation verb when a second object exists
    direction: str | None = None  # this object lies <direction> of the other
    other: int | None = None      # index of the related object


def sample_color(rng: np.random.Generator) -> str:
    return COLORS[rng.choice(len(COLORS), p=COLOR_PROBS)]


def sample_shape(rng: np.random.Generator) -> str:
    return SHAPES[rng.choice(len(SHAPES), p=SHAPE_PROBS)]


def sample_verb(rng: np.random.Generator, shape: str) -> str:
    primary = VERB_FOR_SHAPE[shape]
    rest = [v for v in VERBS if v != primary]
    probs = (VERB_PRIMARY_PROB,) + VERB_OTHER_PROBS
    return ([primary] + rest)[rng.choice(3, p=probs)]


def sample_direction(rng: np.random.Generator) -> str:
    if rng.random() < HORIZONTAL_PROB:
        return "left" if rng.random() < 0.5 else "right"
    return "north" if rng.random() < 0.5 else "south"


def caption_words(obj: ObjectSpec, objects) -> list:
    """Caption word sequence for one region of a scene.

    Solo objects get "a <color> <shape>"; related objects get the relation
    template with exactly one verb word.
    """
    head = ["a", obj.color, obj.kind]
    if obj.other is None:
        return head
    other = objects[obj.other]
    return head + [obj.verb, "to", "the", obj.direction, "of",
                   "a", other.color, other.kind]


def label_words(obj: ObjectSpec) -> list:
    """Bare category name used as the weak-supervision target."""
    return [obj.color, obj.kind]


def narration_words(obj: ObjectSpec, objects) -> list:
    """Long narrated form of a region description (LM pretraining text)."""
    if obj.other is None:
        return ["there", "is", "a", obj.color, obj.kind,
                "all", "alone", "in", "the", "picture"]
    other = objects[obj.other]
    return ["there", "is", "a", obj.color, obj.kind, "in", "the", "picture",
            "and", "it", obj.verb, "to", "the", obj.direction, "of",
            "a", other.color, other.kind]


def noun_phrases(words) -> list:
    """Noun phrases as "<modifiers> <noun>" strings, e.g. "red triangle"."""
    phrases = []
    run = []
    for w in words:
        if POS.get(w) == "noun":
            phrases.append(" ".join(run + [w]))
            run = []
        elif w in MODIFIERS:
            run.append(w)
        else:
            run = []
    return phrases


def verb_phrases(words) -> list:
    return [w for w in words if POS.get(w) == "verb"]
