"""Typed multi-turn conversations and their line-delimited JSON record schema.

A record is one JSON object per line with the base fields ``id``, ``image`` and
``conversations`` (a list of ``{"from": "human"|"gpt", "value": str}`` entries,
strictly alternating human/gpt). Optional fields extend the base schema without
breaking readers that ignore them:

* ``kinds``          explicit per-turn kind tags, written only when pattern
                     inference from the turn texts would disagree
* ``main_question``  the standing question a transcript was produced for
* ``activity_label`` / ``split``  sample-level metadata

Structured conversations follow a fixed shape: one question-generation turn
whose reply lists ``Q<i>.`` questions, one Q&A turn per listed question (the
human side repeats the question verbatim), one detailed-description turn and
one condensed-caption turn, so the turn count is always the question count
plus three. ``validate_structure`` checks that shape without pinning the
question-generation turn to the first position, because training-time
augmentation may relocate it.
"""

from __future__ import annotations

import re
import json
import unicodedata
from dataclasses import dataclass
from typing import Any, Literal, Mapping, Sequence

from .jsonio import canonical_json

IMAGE_PLACEHOLDER = "<image>"
MAX_QUESTIONS = 20

Role = Literal["human", "assistant"]
TurnKind = Literal["question_gen", "qa", "description", "caption", "freeform"]

TURN_KINDS: tuple[str, ...] = ("question_gen", "qa", "description", "caption", "freeform")

_WIRE_TO_ROLE = {"human": "human", "gpt": "assistant"}


class MalformedRecord(ValueError):
    """Record violates the conversation schema (roles, placeholder, fields)."""


class EmptyTurn(ValueError):
    """A turn text is empty after whitespace normalization."""


def normalize_text(text: str) -> str:
    """NFC-normalize, unify newlines, collapse space runs, trim blank edges.

    Idempotent, so parse -> serialize -> parse is stable.
    """
    text = unicodedata.normalize("NFC", text.replace("\r\n", "\n").replace("\r", "\n"))
    lines = [re.sub(r"[ \t]+", " ", line).strip() for line in text.split("\n")]
    while lines and not lines[0]:
        lines.pop(0)
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines)


@dataclass(frozen=True)
class Question:
    index: int
    text: str


@dataclass(frozen=True)
class QuestionList:
    """Ordered questions with contiguous indices 0..N-1, N in 1..20."""

    questions: tuple[Question, ...]
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        n = len(self.questions)
        if not 1 <= n <= MAX_QUESTIONS:
            raise ValueError(f"question list length {n} outside 1..{MAX_QUESTIONS}")
        for pos, q in enumerate(self.questions):
            if q.index != pos:
                raise ValueError(f"question index {q.index} at position {pos} breaks contiguity")

    def __len__(self) -> int:
        return len(self.questions)

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(q.text for q in self.questions)


@dataclass(frozen=True)
class QAPair:
    index: int
    question: str
    answer: str

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("QAPair index must be non-negative")
        if not self.answer.strip():
            raise ValueError("QAPair answer must be non-empty")


@dataclass(frozen=True)
class Turn:
    """One human/assistant exchange. Texts are normalized at construction."""

    human_text: str
    assistant_text: str
    kind: str = "freeform"

    def __post_init__(self) -> None:
        if self.kind not in TURN_KINDS:
            raise ValueError(f"unknown turn kind {self.kind!r}")
        human = normalize_text(self.human_text)
        assistant = normalize_text(self.assistant_text)
        if not human or not assistant:
            raise EmptyTurn("turn text empty after normalization")
        object.__setattr__(self, "human_text", human)
        object.__setattr__(self, "assistant_text", assistant)


@dataclass(frozen=True)
class Conversation:
    image_ref: str
    turns: tuple[Turn, ...]
    main_question: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise MalformedRecord("conversation has no turns")

    def __len__(self) -> int:
        return len(self.turns)

    def turns_of_kind(self, kind: str) -> tuple[Turn, ...]:
        return tuple(t for t in self.turns if t.kind == kind)


@dataclass(frozen=True)
class CapQASample:
    id: str
    image_ref: str
    activity_label: str
    conversation: Conversation
    split: str = "train"

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class Dataset:
    samples: tuple[CapQASample, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_qa_pairs(self) -> int:
        # equals sum of (turns - 3) on structured samples
        return sum(len(s.conversation.turns_of_kind("qa")) for s in self.samples)


# --- turn-kind inference -----------------------------------------------------

_QUESTION_GEN_PAT = re.compile(r"\bformulate\b[\s\S]{0,200}?\bquestions\b", re.IGNORECASE)
_DESCRIBE_PAT = re.compile(r"^write down a detailed description\b", re.IGNORECASE)
_SUMMARIZE_PAT = re.compile(r"^summarize the details\b", re.IGNORECASE)

QUESTION_LINE_RE = re.compile(r"^\s*Q(\d+)\s*[.):]\s*(\S.*?)\s*$")


def extract_question_lines(text: str) -> list[tuple[int, str]]:
    """All ``Q<i>. <text>`` lines in order of appearance, with their raw indices."""
    found = []
    for line in text.split("\n"):
        m = QUESTION_LINE_RE.match(line)
        if m:
            found.append((int(m.group(1)), m.group(2)))
    return found


def infer_turn_kinds(pairs: Sequence[tuple[str, str]]) -> list[str]:
    """Tag turns by prompt patterns, then mark turns repeating a listed question as qa."""
    kinds: list[str] = []
    for human, _ in pairs:
        if _QUESTION_GEN_PAT.search(human):
            kinds.append("question_gen")
        elif _DESCRIBE_PAT.match(human):
            kinds.append("description")
        elif _SUMMARIZE_PAT.match(human):
            kinds.append("caption")
        else:
            kinds.append("freeform")
    first_qg = next((i for i, k in enumerate(kinds) if k == "question_gen"), None)
    if first_qg is not None:
        listed = {normalize_text(text) for _, text in extract_question_lines(pairs[first_qg][1])}
        for i, k in enumerate(kinds):
            if k == "freeform" and normalize_text(pairs[i][0]) in listed:
                kinds[i] = "qa"
    return kinds


# --- record (de)serialization -------------------------------------------------


def parse_conversation_record(record: str | Mapping[str, Any]) -> Conversation:
    """Parse one record (JSON text or mapping) into a typed Conversation.

    Raises MalformedRecord on non-alternating roles, a missing or duplicated
    image placeholder, or schema violations; EmptyTurn on blank turn texts.
    """
    if isinstance(record, str):
        try:
            record = json.loads(record)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"record is not valid JSON: {exc}") from exc
    if not isinstance(record, Mapping):
        raise MalformedRecord("record must be a JSON object")

    messages = record.get("conversations")
    if not isinstance(messages, list) or not messages:
        raise MalformedRecord("record has no conversations")
    if len(messages) % 2 != 0:
        raise MalformedRecord("dangling human message: odd message count")

    raw_pairs: list[tuple[str, str]] = []
    for i, msg in enumerate(messages):
        if not isinstance(msg, Mapping):
            raise MalformedRecord(f"message {i} is not an object")
        role = _WIRE_TO_ROLE.get(msg.get("from"))
        if role is None:
            raise MalformedRecord(f"message {i} has unknown speaker {msg.get('from')!r}")
        expected = "human" if i % 2 == 0 else "assistant"
        if role != expected:
            raise MalformedRecord(f"message {i} breaks human/gpt alternation")
        if not isinstance(msg.get("value"), str):
            raise MalformedRecord(f"message {i} has no text value")
    for i in range(0, len(messages), 2):
        raw_pairs.append((messages[i]["value"], messages[i + 1]["value"]))

    placeholder_count = sum(
        h.count(IMAGE_PLACEHOLDER) + a.count(IMAGE_PLACEHOLDER) for h, a in raw_pairs
    )
    if placeholder_count == 0:
        raise MalformedRecord("missing image placeholder")
    if placeholder_count > 1:
        raise MalformedRecord(f"image placeholder appears {placeholder_count} times")

    normalized = [(normalize_text(h), normalize_text(a)) for h, a in raw_pairs]
    kinds = record.get("kinds")
    if kinds is not None:
        if (
            not isinstance(kinds, list)
            or len(kinds) != len(normalized)
            or any(k not in TURN_KINDS for k in kinds)
        ):
            raise MalformedRecord("kinds field does not match the turns")
    else:
        kinds = infer_turn_kinds(normalized)

    turns = tuple(Turn(h, a, k) for (h, a), k in zip(normalized, kinds))
    main_question = record.get("main_question")
    if main_question is not None and not isinstance(main_question, str):
        raise MalformedRecord("main_question must be a string")
    image_ref = record.get("image", "")
    if not isinstance(image_ref, str):
        raise MalformedRecord("image must be a string path or URI")
    return Conversation(image_ref=image_ref, turns=turns, main_question=main_question)


def conversation_to_record(conv: Conversation, record_id: str = "") -> dict[str, Any]:
    messages: list[dict[str, str]] = []
    for turn in conv.turns:
        messages.append({"from": "human", "value": turn.human_text})
        messages.append({"from": "gpt", "value": turn.assistant_text})
    record: dict[str, Any] = {"id": record_id, "image": conv.image_ref, "conversations": messages}
    inferred = infer_turn_kinds([(t.human_text, t.assistant_text) for t in conv.turns])
    stored = [t.kind for t in conv.turns]
    if inferred != stored:
        record["kinds"] = stored
    if conv.main_question is not None:
        record["main_question"] = conv.main_question
    return record


def serialize_conversation(conv: Conversation, record_id: str = "") -> str:
    """Canonical one-line JSON record. parse(serialize(c)) == c for valid c."""
    return canonical_json(conversation_to_record(conv, record_id))


def sample_to_record(sample: CapQASample) -> dict[str, Any]:
    record = conversation_to_record(sample.conversation, record_id=sample.id)
    record["image"] = sample.image_ref
    if sample.activity_label:
        record["activity_label"] = sample.activity_label
    record["split"] = sample.split
    return record


def serialize_sample(sample: CapQASample) -> str:
    return canonical_json(sample_to_record(sample))


def parse_sample_record(record: str | Mapping[str, Any]) -> CapQASample:
    if isinstance(record, str):
        try:
            record = json.loads(record)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"record is not valid JSON: {exc}") from exc
    conv = parse_conversation_record(record)
    return CapQASample(
        id=str(record.get("id", "")),
        image_ref=record.get("image", ""),
        activity_label=record.get("activity_label", ""),
        conversation=conv,
        split=record.get("split", "train"),
    )


# --- structural validation ----------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def _label_pattern(activity_label: str) -> re.Pattern[str]:
    phrase = normalize_text(activity_label)
    return re.compile(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", re.IGNORECASE)


def contains_label(text: str, activity_label: str) -> bool:
    """Case-insensitive whole-phrase check. No paraphrase detection."""
    if not activity_label.strip():
        return False
    return bool(_label_pattern(activity_label).search(normalize_text(text)))


def validate_structure(
    conv: Conversation, activity_label: str | None = None
) -> list[Violation]:
    """Report every violated structural invariant; an empty list means valid.

    Applies to structured conversations in assembled or augmented order: the
    question-generation pair may sit anywhere, but counts, question/turn
    correspondence and the single image placeholder must hold.
    """
    violations: list[Violation] = []
    positions: dict[str, list[int]] = {}
    for i, turn in enumerate(conv.turns):
        positions.setdefault(turn.kind, []).append(i)

    for kind in ("question_gen", "description", "caption"):
        where = positions.get(kind, [])
        if not where:
            violations.append(Violation("MissingStage", f"no {kind} turn"))
        elif len(where) > 1:
            violations.append(Violation("DuplicateStage", f"{len(where)} {kind} turns"))
    for i in positions.get("freeform", []):
        violations.append(Violation("UnexpectedTurnKind", f"turn {i} is freeform"))

    placeholder_count = sum(
        t.human_text.count(IMAGE_PLACEHOLDER) + t.assistant_text.count(IMAGE_PLACEHOLDER)
        for t in conv.turns
    )
    if placeholder_count != 1:
        violations.append(
            Violation("PlaceholderCount", f"image placeholder appears {placeholder_count} times")
        )

    question_gen = positions.get("question_gen", [])
    if len(question_gen) == 1:
        listed = extract_question_lines(conv.turns[question_gen[0]].assistant_text)
        n = len(listed)
        if len(conv.turns) != n + 3:
            violations.append(
                Violation(
                    "StructuralArity",
                    f"{len(conv.turns)} turns for {n} listed questions, expected {n + 3}",
                )
            )
        raw_indices = [idx for idx, _ in listed]
        if raw_indices != list(range(n)):
            violations.append(
                Violation("IndexGap", f"question indices {raw_indices} not contiguous from 0")
            )
        expected = [normalize_text(text) for _, text in listed]
        asked = [conv.turns[i].human_text for i in positions.get("qa", [])]
        if asked != expected:
            violations.append(
                Violation("QuestionMismatch", "qa turns do not repeat the listed questions in order")
            )

    if activity_label:
        for kind in ("description", "caption"):
            for i in positions.get(kind, []):
                if contains_label(conv.turns[i].assistant_text, activity_label):
                    violations.append(
                        Violation("LabelLeak", f"activity label appears in the {kind} turn")
                    )
    return violations


_SECTION_HEADER_RE = re.compile(r"^(detailed|concise)\s+description\s*:?\s*", re.IGNORECASE)


def strip_section_header(text: str) -> str:
    """Drop a leading 'Detailed Description:' / 'Concise Description:' header."""
    m = _SECTION_HEADER_RE.match(text)
    if not m:
        return text
    rest = text[m.end():].lstrip("\n ")
    return rest if rest else text
