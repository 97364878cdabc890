"""Staged self-ask / self-answer inference against an image-capable chat backend.

Three-turn mode runs the question-generation, batch-answering and final-answer
stages over one persistent conversation; one-turn mode sends the main question
directly. The image is attached to the first request only (the conversation
context carries it forward); ``reattach_image`` forces it onto every stage for
backends without session context.
"""

from __future__ import annotations

import base64
import os
import re
from dataclasses import dataclass

from .conversation import (
    IMAGE_PLACEHOLDER,
    Conversation,
    QAPair,
    Question,
    QuestionList,
    Turn,
    conversation_to_record,
    extract_question_lines,
    normalize_text,
)
from .gateway import (
    ChatMessage,
    ChatRequest,
    Gateway,
    ImagePart,
    ResponseCache,
    TextPart,
    request_key,
)
from .jsonio import canonical_json, sha256_hex

DEFAULT_MAIN_QUESTION = (
    "Use detailed descriptions to characterize the activities of the person in the image."
)

SELF_ANSWER_PROMPT = (
    "Please answer all the questions one by one directly, answers are split by line break."
)

DESCRIBE_PROMPT = "Write down a detailed description of the person's activity in the image."

SUMMARIZE_PROMPT = "Summarize the details of the person's activity in the image."

UNANSWERED = "[unanswered]"

MODES = ("one_turn", "three_turn_main_question", "three_turn_describe_summarize")


class BoundsError(ValueError):
    """Question count bounds violate 1 <= min <= max <= 20."""


class EmptyQuestionList(ValueError):
    """No question lines found in the reply."""


class TooManyQuestions(ValueError):
    """More than 20 question lines found."""


class UnparseableBlock(ValueError):
    """Answer block matches neither the interleaved nor the per-line format."""


class EmptyReply(RuntimeError):
    """The model returned an empty reply where text is required."""


class PipelineAborted(RuntimeError):
    """A stage failed; carries the stage tag, the cause and the partial transcript."""

    def __init__(self, stage: str, cause: Exception, transcript: Conversation | None):
        super().__init__(f"pipeline aborted at stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause
        self.transcript = transcript


def build_self_ask_prompt(main_question: str, min_q: int = 6, max_q: int = 8) -> str:
    if not (1 <= min_q <= max_q <= 20):
        raise BoundsError(f"bounds ({min_q}, {max_q}) violate 1 <= min <= max <= 20")
    return (
        f"Please formulate {min_q} to {max_q} questions related to the activity details in "
        f"the image. The purpose of these questions should be to assist the model in complete "
        f"the answer to this question: '{main_question}'. Aim to ask questions that can be "
        f"definitively answered and avoid questions that do not have clear answers."
    )


def build_self_answer_prompt() -> str:
    return SELF_ANSWER_PROMPT


def build_describe_prompt() -> str:
    return DESCRIBE_PROMPT


def build_summarize_prompt() -> str:
    return SUMMARIZE_PROMPT


def parse_question_list(text: str) -> QuestionList:
    """Extract ``Q<i>. <text>`` lines, tolerate surrounding prose, reindex to 0..N-1."""
    found = extract_question_lines(normalize_text(text))
    if not found:
        raise EmptyQuestionList("no question lines found in reply")
    if len(found) > 20:
        raise TooManyQuestions(f"{len(found)} question lines exceed the cap of 20")
    warnings: tuple[str, ...] = ()
    raw_indices = [idx for idx, _ in found]
    if raw_indices != list(range(len(found))):
        warnings = (f"reindexed questions from {raw_indices} to 0..{len(found) - 1}",)
    questions = tuple(
        Question(index=i, text=normalize_text(t)) for i, (_, t) in enumerate(found)
    )
    return QuestionList(questions=questions, warnings=warnings)


_ANSWER_MARKER_RE = re.compile(r"^\s*A\d*\s*[.):]\s*(.*)$")


def parse_answer_block(text: str, questions: QuestionList) -> tuple[list[QAPair], list[str]]:
    """Pair a reply with the questions it answers.

    Two formats are supported: interleaved ``Q<i>. ...`` / ``A. <answer>`` blocks
    matched by index, and plain one-answer-per-line matched by position. Always
    returns exactly len(questions) pairs; missing answers are padded with the
    UNANSWERED marker and reported in the warnings list.
    """
    text = normalize_text(text)
    lines = text.split("\n")
    if not any(line.strip() for line in lines):
        raise UnparseableBlock("empty answer block")

    warnings: list[str] = []
    answers_by_index: dict[int, str] = {}

    q_positions = [
        (i, int(m.group(1)))
        for i, line in enumerate(lines)
        if (m := re.match(r"^\s*Q(\d+)\s*[.):]", line))
    ]
    if q_positions:
        # interleaved format: answer text runs from after the Q line to the next Q line
        for pos, (line_no, q_index) in enumerate(q_positions):
            end = q_positions[pos + 1][0] if pos + 1 < len(q_positions) else len(lines)
            chunk = lines[line_no + 1 : end]
            collected: list[str] = []
            for raw in chunk:
                m = _ANSWER_MARKER_RE.match(raw)
                if m and not collected:
                    collected.append(m.group(1))
                else:
                    collected.append(raw)
            answer = normalize_text("\n".join(collected))
            if answer:
                if q_index in answers_by_index:
                    warnings.append(f"duplicate answer block for question {q_index}")
                answers_by_index.setdefault(q_index, answer)
    else:
        # positional format: each non-empty line answers the next question
        positional = []
        for raw in lines:
            if not raw.strip():
                continue
            m = _ANSWER_MARKER_RE.match(raw)
            positional.append(normalize_text(m.group(1)) if m else normalize_text(raw))
        positional = [p for p in positional if p]
        if len(positional) > len(questions):
            warnings.append(
                f"{len(positional)} answers for {len(questions)} questions; extras dropped"
            )
        for i, answer in enumerate(positional[: len(questions)]):
            answers_by_index[i] = answer

    pairs: list[QAPair] = []
    for q in questions.questions:
        answer = answers_by_index.get(q.index)
        if answer is None:
            warnings.append(f"no answer for question {q.index}; padded")
            answer = UNANSWERED
        pairs.append(QAPair(index=q.index, question=q.text, answer=answer))
    return pairs, warnings


@dataclass(frozen=True)
class PipelineOptions:
    mode: str = "three_turn_main_question"
    min_questions: int = 6
    max_questions: int = 8
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = 0
    reattach_image: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class InferenceResult:
    mode: str
    questions: QuestionList | None
    qa_pairs: tuple[QAPair, ...]
    detailed_description: str | None
    summarized_caption: str | None
    final_answer: str
    transcript: Conversation
    request_digests: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()


_SUFFIX_MEDIA = {".png": "image/png", ".gif": "image/gif", ".webp": "image/webp"}


def image_part_for(image_ref: str) -> ImagePart:
    """Build an image part: local files are inlined as base64, URLs pass through.

    Unresolvable references are forwarded verbatim so mock-backed runs do not
    need real image files on disk.
    """
    if image_ref.startswith(("http://", "https://", "data:")):
        return ImagePart(image=image_ref)
    if os.path.isfile(image_ref):
        with open(image_ref, "rb") as fh:
            payload = base64.b64encode(fh.read()).decode("ascii")
        suffix = os.path.splitext(image_ref)[1].lower()
        return ImagePart(image=payload, media_type=_SUFFIX_MEDIA.get(suffix, "image/jpeg"))
    return ImagePart(image=image_ref)


def user_message(text: str, image_ref: str | None) -> ChatMessage:
    parts: tuple = (TextPart(text),)
    if image_ref is not None:
        parts = parts + (image_part_for(image_ref),)
    return ChatMessage(role="user", parts=parts)


class _Session:
    """Accumulates the conversation context across stages of one run."""

    def __init__(self, gateway: Gateway, backend_id: str, options: PipelineOptions, cache):
        self.gateway = gateway
        self.backend_id = backend_id
        self.model = gateway.profile(backend_id).model
        self.options = options
        self.cache = cache
        self.messages: list[ChatMessage] = []
        self.digests: list[str] = []

    def ask(self, prompt: str, image_ref: str | None) -> str:
        self.messages.append(user_message(prompt, image_ref))
        req = ChatRequest(
            backend_id=self.backend_id,
            model=self.model,
            messages=tuple(self.messages),
            temperature=self.options.temperature,
            max_tokens=self.options.max_tokens,
            seed=self.options.seed,
        )
        self.digests.append(request_key(req))
        reply = self.gateway.ask(req, cache=self.cache).text
        self.messages.append(ChatMessage(role="assistant", parts=(TextPart(reply),)))
        return reply


def run_three_turn(
    gateway: Gateway,
    backend_id: str,
    image_ref: str,
    main_question: str = DEFAULT_MAIN_QUESTION,
    options: PipelineOptions = PipelineOptions(),
    cache: ResponseCache | None = None,
) -> InferenceResult:
    """Self-ask, self-answer, then produce the final answer per the selected mode."""
    if options.mode == "one_turn":
        raise ValueError("use run_one_turn for one_turn mode")
    session = _Session(gateway, backend_id, options, cache)
    turns: list[Turn] = []
    warnings: list[str] = []

    def partial() -> Conversation | None:
        if not turns:
            return None
        return Conversation(image_ref=image_ref, turns=tuple(turns), main_question=main_question)

    def reattach() -> str | None:
        return image_ref if options.reattach_image else None

    # stage 1: self-ask
    ask_prompt = build_self_ask_prompt(main_question, options.min_questions, options.max_questions)
    reply = session.ask(ask_prompt, image_ref)
    if not normalize_text(reply):
        raise PipelineAborted("self_ask", EmptyReply("empty question reply"), partial())
    turns.append(Turn(ask_prompt + "\n" + IMAGE_PLACEHOLDER, reply, "question_gen"))
    try:
        questions = parse_question_list(reply)
    except (EmptyQuestionList, TooManyQuestions) as exc:
        raise PipelineAborted("self_ask", exc, partial()) from exc
    warnings.extend(questions.warnings)

    # stage 2: self-answer over the full accumulated context
    reply = session.ask(SELF_ANSWER_PROMPT, reattach())
    if not normalize_text(reply):
        raise PipelineAborted("self_answer", EmptyReply("empty answer reply"), partial())
    turns.append(Turn(SELF_ANSWER_PROMPT, reply, "qa"))
    try:
        qa_pairs, answer_warnings = parse_answer_block(reply, questions)
    except UnparseableBlock as exc:
        raise PipelineAborted("self_answer", exc, partial()) from exc
    warnings.extend(answer_warnings)

    detailed: str | None = None
    caption: str | None = None
    if options.mode == "three_turn_main_question":
        reply = session.ask(main_question, reattach())
        if not normalize_text(reply):
            raise PipelineAborted("final_answer", EmptyReply("empty final reply"), partial())
        turns.append(Turn(main_question, reply, "description"))
        final_answer = normalize_text(reply)
    else:
        reply = session.ask(DESCRIBE_PROMPT, reattach())
        if not normalize_text(reply):
            raise PipelineAborted("describe", EmptyReply("empty description reply"), partial())
        turns.append(Turn(DESCRIBE_PROMPT, reply, "description"))
        detailed = normalize_text(reply)
        reply = session.ask(SUMMARIZE_PROMPT, reattach())
        if not normalize_text(reply):
            raise PipelineAborted("summarize", EmptyReply("empty caption reply"), partial())
        turns.append(Turn(SUMMARIZE_PROMPT, reply, "caption"))
        caption = normalize_text(reply)
        final_answer = caption

    return InferenceResult(
        mode=options.mode,
        questions=questions,
        qa_pairs=tuple(qa_pairs),
        detailed_description=detailed,
        summarized_caption=caption,
        final_answer=final_answer,
        transcript=Conversation(
            image_ref=image_ref, turns=tuple(turns), main_question=main_question
        ),
        request_digests=tuple(session.digests),
        warnings=tuple(warnings),
    )


def run_one_turn(
    gateway: Gateway,
    backend_id: str,
    image_ref: str,
    main_question: str = DEFAULT_MAIN_QUESTION,
    options: PipelineOptions = PipelineOptions(mode="one_turn"),
    cache: ResponseCache | None = None,
) -> InferenceResult:
    """Send the main question directly; no self-ask stage."""
    session = _Session(gateway, backend_id, options, cache)
    reply = session.ask(main_question, image_ref)
    if not normalize_text(reply):
        raise EmptyReply("empty model reply")
    transcript = Conversation(
        image_ref=image_ref,
        turns=(Turn(main_question + "\n" + IMAGE_PLACEHOLDER, reply, "freeform"),),
        main_question=main_question,
    )
    return InferenceResult(
        mode="one_turn",
        questions=None,
        qa_pairs=(),
        detailed_description=None,
        summarized_caption=None,
        final_answer=normalize_text(reply),
        transcript=transcript,
        request_digests=tuple(session.digests),
    )


def result_to_record(result: InferenceResult, item_id: str = "") -> dict:
    """JSON-ready view of a result, used for manifests and digests."""
    return {
        "id": item_id,
        "mode": result.mode,
        "questions": list(result.questions.texts) if result.questions else [],
        "qa": [
            {"index": p.index, "question": p.question, "answer": p.answer}
            for p in result.qa_pairs
        ],
        "description": result.detailed_description,
        "caption": result.summarized_caption,
        "final_answer": result.final_answer,
        "request_digests": list(result.request_digests),
        "transcript": conversation_to_record(result.transcript, record_id=item_id),
        "warnings": list(result.warnings),
    }


def result_digest(result: InferenceResult) -> str:
    return sha256_hex(canonical_json(result_to_record(result)))
