"""Visual-cue generation and parsing.

A cue is an object phrase the search must localize before the question can
be answered. Cues are produced by the oracle from in-context examples and
parsed out of its completion; phrases starting with "all" are collective
(type 2) and searched exhaustively instead of best-first.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum

from .oracle import SearchOracle

log = logging.getLogger(__name__)


class CueType(str, Enum):
    TYPE1 = "type1"
    TYPE2 = "type2"


@dataclass(frozen=True)
class VisualCue:
    phrase: str
    cue_type: CueType


@dataclass(frozen=True)
class CueExemplars:
    """Ordered (question, assistant completion) pairs used as in-context turns."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("exemplar set must hold at least one pair")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class ParsedCues:
    """Cue sequence plus a flag marking degraded parses (marker missing or
    nothing usable in the completion)."""

    cues: tuple[VisualCue, ...]
    degraded: bool = False

    def __iter__(self):
        return iter(self.cues)

    def __len__(self) -> int:
        return len(self.cues)

    def __getitem__(self, index):
        return self.cues[index]


CUE_QUESTION_TEMPLATE = (
    "Question: {} If you want to answer the question, "
    "which objects' information do you need?"
)

_CUE_MARKER = "following objects:"


def _classify(phrase: str) -> CueType:
    first_word = phrase.split(None, 1)[0].lower()
    return CueType.TYPE2 if first_word == "all" else CueType.TYPE1


def parse_cues(completion: str) -> ParsedCues:
    """Extract cues from a completion.

    Takes the text after the last "following objects:" marker up to the
    first period (or end), splits on commas and " and ", and classifies
    each phrase. Without the marker the whole trimmed completion becomes a
    single type-1 cue and the parse is flagged degraded; an empty
    completion yields an empty, degraded parse.
    """
    text = (completion or "").strip()
    if not text:
        return ParsedCues((), degraded=True)
    marker_at = text.lower().rfind(_CUE_MARKER)
    if marker_at < 0:
        return ParsedCues((VisualCue(text, CueType.TYPE1),), degraded=True)
    tail = text[marker_at + len(_CUE_MARKER):].split(".", 1)[0]
    cues = tuple(
        VisualCue(phrase, _classify(phrase))
        for phrase in (piece.strip() for piece in re.split(r",| and ", tail))
        if phrase
    )
    return ParsedCues(cues, degraded=not cues)


def generate_cues(oracle: SearchOracle, question: str, exemplars: CueExemplars) -> ParsedCues:
    """Ask the oracle which objects the question needs, then parse its reply.

    The exemplar pairs become prior text-only turns and the question is
    wrapped in the same shape as the first exemplar. An unparseable reply
    degrades to a single type-1 cue holding the raw question.
    """
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    history: list[tuple[str, str]] = []
    for exemplar_question, exemplar_completion in exemplars.pairs:
        history.append(("user", exemplar_question))
        history.append(("assistant", exemplar_completion))
    completion = oracle.generate(
        CUE_QUESTION_TEMPLATE.format(question),
        history=tuple(history),
    )
    parsed = parse_cues(completion)
    if not parsed.cues:
        log.warning("cue generation yielded nothing parseable; using the raw question")
        return ParsedCues((VisualCue(question.strip(), CueType.TYPE1),), degraded=True)
    return parsed


# In-context exemplar sets. The wording is part of the scoring surface and
# is byte-pinned, including the bare-question turns after the first pair.

VSTAR_EXEMPLARS = CueExemplars((
    (
        "Question: What is the color of the boy's bag? If you want to answer the "
        "question, which objects' information do you need?",
        "To answer the question, I need know the location of the boy with a bag so "
        "that I can determine the color of the bag. So I need the information about "
        "the following objects: boy with a bag.",
    ),
    (
        "Is the yellow car on the left or right side of the white car?",
        "To answer the question, I need know the location of the yellow car and the "
        "white car so that I can determine the positional relationship between the "
        "two of them. So I need the information about the following objects: white "
        "car and yellow car.",
    ),
    (
        "Tell me the number on the black board.",
        "To answer the question, I need know the location of the black board so that "
        "I can determine the number on it. So I need the information about the "
        "following objects: black board",
    ),
    (
        "Is the girl with pink hair on the left or right side of the man with backpack?",
        "To answer the question, I need know the location of the girl with pink hair "
        "and the man with backpack so that I can determine the positional relationship "
        "between the two of them. So I need the information about the following "
        "objects: girl with pink hair and man with backpack.",
    ),
    (
        "What kind of animal is on the red sign?",
        "To answer the question, I need know the location of the red sign so that I "
        "can determine the kind of animal on it. So I need the information about the "
        "following objects: red sign.",
    ),
    (
        "From the information on that advertising board, what is the type of this shop?",
        "To answer the question, I need know the location of the advertising board so "
        "that I can determine the type of the shop. So I need the information about "
        "the following objects: advertising board.",
    ),
))

HRBENCH_EXEMPLARS = CueExemplars((
    VSTAR_EXEMPLARS.pairs[0],
    VSTAR_EXEMPLARS.pairs[1],
    (
        "Tell me the number on the black board above the dog.",
        "To answer the question, I need know the location of the black board above "
        "the dog so that I can determine the number on it. So I need the information "
        "about the following objects: black board above the dog.",
    ),
    VSTAR_EXEMPLARS.pairs[3],
    VSTAR_EXEMPLARS.pairs[4],
    (
        "How many cars in the image?",
        "To answer the question, I need know the location of all cars so that I can "
        "determine the number of cars. So I need the information about the following "
        "objects: all cars.",
    ),
))

EXEMPLAR_SETS = {
    "vstar": VSTAR_EXEMPLARS,
    "hrbench": HRBENCH_EXEMPLARS,
}
