"""Instruction-data generation: annotator prompting, reply parsing, conversation
assembly, split/augment/export passes.

An annotator backend is asked for questions, answers and a detailed plus a
concise activity description for each (image, activity label) pair. Replies
that leak the label into a description, or that cannot be parsed, are retried
with a corrective sentence and skipped after the attempt budget.
"""

from __future__ import annotations

import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .conversation import (
    IMAGE_PLACEHOLDER,
    CapQASample,
    Conversation,
    Dataset,
    QAPair,
    QuestionList,
    Turn,
    contains_label,
    extract_question_lines,
    normalize_text,
    parse_sample_record,
    sample_to_record,
    validate_structure,
)
from .gateway import ChatRequest, Gateway, ResponseCache, request_key
from .jsonio import iter_jsonl, write_jsonl_atomic
from .pipeline import (
    DESCRIBE_PROMPT,
    SUMMARIZE_PROMPT,
    TooManyQuestions,
    UnparseableBlock,
    user_message,
    parse_answer_block,
    parse_question_list,
)


class MissingDescriptions(ValueError):
    """Reply lacks the detailed/concise description blocks."""


class LabelLeak(ValueError):
    """A description contains the ground-truth activity phrase."""


class InfeasibleSplit(ValueError):
    """Requested split sizes exceed the corpus."""


class NoQuestionGenTurn(ValueError):
    """Conversation has no question-generation turn to relocate."""


ANNOTATION_PROMPT_TEMPLATE = (
    "Please come up with 5-8 questions related to the details of the activity and answer them "
    "based on the image. If certain questions remain uncertain, further refine those questions, "
    "then come up with 5 necessary questions for those uncertain aspects and provide answers. "
    "Summarize the refined questions and answers to attempt addressing the uncertain questions "
    "again, without exceeding 20 questions in total. Finally, compile all questions and answers "
    "to complete two descriptions of the activity depicted in the image. It is known that the "
    "activity is '{label}', but do not include this phrase in your descriptions. Start with a "
    "detailed description, our main task is to detect the activity based on the image, so please "
    "provide as detailed a description as possible, related to this main task. You should aim "
    "for a granular and comprehensive description of every detail of the activity, within 1000 "
    "words; then provide a concise description, simplifying the detailed description to retain "
    "only the parts most relevant to the activity, within 400 words. Please self-ask and "
    "self-answer again."
)


def build_annotation_prompt(activity_label: str) -> str:
    if not activity_label.strip():
        raise ValueError("activity label must be non-empty")
    return ANNOTATION_PROMPT_TEMPLATE.format(label=activity_label)


def build_label_question_prompt(min_q: int = 5, max_q: int = 8, extra_q: int = 5, cap: int = 20) -> str:
    """The question-generation human turn used in assembled training conversations."""
    return (
        f"Please formulate {min_q} to {max_q} questions related to the activity details in the "
        f"image. If some questions are uncertain, further refine them, and pose an additional "
        f"{extra_q} questions specifically targeting these uncertainties, with a total not "
        f"exceeding {cap} questions. The purpose of these questions should be to assist the "
        f"model in determining the type of activity and in uncovering details of the activity. "
        f"Aim to ask questions that can be definitively answered and avoid questions that do "
        f"not have clear answers."
    )


@dataclass(frozen=True)
class AnnotationReply:
    questions: QuestionList
    qa_pairs: tuple[QAPair, ...]
    detailed_description: str
    concise_description: str
    warnings: tuple[str, ...] = ()


def _find_header(lines: list[str], word: str) -> int | None:
    pattern = word.lower() + " description"
    for i, line in enumerate(lines):
        if line.strip().lower().rstrip(":").strip() == pattern:
            return i
        if line.strip().lower().startswith(pattern + ":"):
            return i
    return None


def _split_descriptions(text: str) -> tuple[str, str, str] | None:
    """Return (body_before, detailed, concise) using headers, or None."""
    lines = text.split("\n")
    di = _find_header(lines, "detailed")
    ci = _find_header(lines, "concise")
    if di is None or ci is None or ci <= di:
        return None

    def strip_inline(line: str, word: str) -> str:
        prefix = word + " description"
        low = line.strip().lower()
        if low.startswith(prefix):
            return line.strip()[len(prefix):].lstrip(": ").strip()
        return line

    detailed_lines = [strip_inline(lines[di], "detailed")] + lines[di + 1 : ci]
    concise_lines = [strip_inline(lines[ci], "concise")] + lines[ci + 1 :]
    detailed = normalize_text("\n".join(detailed_lines))
    concise = normalize_text("\n".join(concise_lines))
    body = "\n".join(lines[:di])
    if not detailed or not concise:
        return None
    return body, detailed, concise


def _positional_descriptions(text: str) -> tuple[str, str, str] | None:
    """Fallback: the last two blank-line-separated prose blocks, in order."""
    blocks = [b for b in re.split(r"\n\s*\n", text) if normalize_text(b)]
    prose = [b for b in blocks if not extract_question_lines(b)]
    if len(prose) < 2:
        return None
    detailed, concise = prose[-2], prose[-1]
    cut = text.rfind(detailed)
    body = text[:cut] if cut >= 0 else text
    return body, normalize_text(detailed), normalize_text(concise)


def parse_annotation_reply(text: str, activity_label: str) -> AnnotationReply:
    """Extract questions, answers and both descriptions from an annotator reply.

    Raises MissingDescriptions when neither the explicit headers nor the
    positional fallback locate two descriptions, TooManyQuestions past the cap,
    and LabelLeak when a description contains the activity phrase (leaking
    replies are rejected so the sample can be regenerated).
    """
    text = normalize_text(text)
    located = _split_descriptions(text) or _positional_descriptions(text)
    if located is None:
        raise MissingDescriptions("could not locate detailed and concise descriptions")
    body, detailed, concise = located

    questions = parse_question_list(body)  # raises on none found or > 20

    warnings: list[str] = list(questions.warnings)
    has_marker = any(
        re.match(r"^\s*A\d*\s*[.):]", line) for line in body.split("\n")
    )
    if has_marker:
        answer_text = body
    else:
        answer_text = "\n".join(
            line for line in body.split("\n") if not re.match(r"^\s*Q\d+\s*[.):]", line)
        )
    try:
        qa_pairs, answer_warnings = parse_answer_block(answer_text, questions)
        warnings.extend(answer_warnings)
    except UnparseableBlock:
        qa_pairs = [
            QAPair(index=q.index, question=q.text, answer="[unanswered]")
            for q in questions.questions
        ]
        warnings.append("no answers found in reply; all pairs padded")

    for name, desc in (("detailed", detailed), ("concise", concise)):
        if contains_label(desc, activity_label):
            raise LabelLeak(f"activity label appears in the {name} description")
    if len(concise) >= len(detailed):
        warnings.append("concise description is not shorter than the detailed one")

    return AnnotationReply(
        questions=questions,
        qa_pairs=tuple(qa_pairs),
        detailed_description=detailed,
        concise_description=concise,
        warnings=tuple(warnings),
    )


def assemble_conversation(reply: AnnotationReply, image_ref: str) -> Conversation:
    """Lay the reply out as the structured training conversation."""
    question_block = "\n".join(f"Q{q.index}. {q.text}" for q in reply.questions.questions)
    turns = [Turn(build_label_question_prompt() + "\n" + IMAGE_PLACEHOLDER, question_block, "question_gen")]
    for pair in reply.qa_pairs:
        turns.append(Turn(pair.question, pair.answer, "qa"))
    turns.append(Turn(DESCRIBE_PROMPT, "Detailed Description:\n" + reply.detailed_description, "description"))
    turns.append(Turn(SUMMARIZE_PROMPT, "Concise Description:\n" + reply.concise_description, "caption"))
    return Conversation(image_ref=image_ref, turns=tuple(turns))


# --- corpus ingestion and generation -------------------------------------------


@dataclass(frozen=True)
class CorpusEntry:
    id: str
    image: str
    activity_label: str


def load_corpus(path) -> list[CorpusEntry]:
    entries = []
    for record in iter_jsonl(path):
        entries.append(
            CorpusEntry(
                id=str(record["id"]),
                image=record.get("image", ""),
                activity_label=record.get("activity_label", ""),
            )
        )
    return entries


@dataclass(frozen=True)
class GenerationPolicy:
    max_attempts: int = 3
    temperature: float = 0.0
    max_tokens: int = 2048
    seed: int | None = 0


CORRECTIVE_SENTENCE = (
    "Your previous reply was rejected. Do not include the phrase '{label}' anywhere in the "
    "descriptions, list questions as 'Q<i>.' lines, and end with the two descriptions "
    "(attempt {attempt})."
)


@dataclass(frozen=True)
class RejectedSample:
    id: str
    image: str
    activity_label: str
    attempts: int
    reason: str


@dataclass(frozen=True)
class GenerationResult:
    samples: tuple[CapQASample, ...]
    rejected: tuple[RejectedSample, ...]
    request_digests: tuple[str, ...]


def annotate_entry(
    gateway: Gateway,
    backend_id: str,
    entry: CorpusEntry,
    policy: GenerationPolicy = GenerationPolicy(),
    cache: ResponseCache | None = None,
) -> tuple[CapQASample | None, RejectedSample | None, list[str]]:
    model = gateway.profile(backend_id).model
    base_prompt = build_annotation_prompt(entry.activity_label)
    digests: list[str] = []
    reason = "no attempts made"
    for attempt in range(policy.max_attempts):
        prompt = base_prompt
        if attempt:
            prompt += "\n" + CORRECTIVE_SENTENCE.format(
                label=entry.activity_label, attempt=attempt + 1
            )
        req = ChatRequest(
            backend_id=backend_id,
            model=model,
            messages=(user_message(prompt, entry.image),),
            temperature=policy.temperature,
            max_tokens=policy.max_tokens,
            seed=policy.seed,
        )
        digests.append(request_key(req))
        reply_text = gateway.ask(req, cache=cache).text
        try:
            reply = parse_annotation_reply(reply_text, entry.activity_label)
        except (LabelLeak, MissingDescriptions, TooManyQuestions, ValueError) as exc:
            reason = f"{type(exc).__name__}: {exc}"
            continue
        conversation = assemble_conversation(reply, entry.image)
        sample = CapQASample(
            id=entry.id,
            image_ref=entry.image,
            activity_label=entry.activity_label,
            conversation=conversation,
        )
        return sample, None, digests
    rejected = RejectedSample(
        id=entry.id,
        image=entry.image,
        activity_label=entry.activity_label,
        attempts=policy.max_attempts,
        reason=reason,
    )
    return None, rejected, digests


def generate_dataset(
    gateway: Gateway,
    backend_id: str,
    corpus: Sequence[CorpusEntry],
    policy: GenerationPolicy = GenerationPolicy(),
    cache: ResponseCache | None = None,
    concurrency: int = 1,
) -> GenerationResult:
    """Annotate every corpus entry; failures are logged, not fatal."""
    ordered = sorted(corpus, key=lambda e: e.id)
    if concurrency > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = list(
                pool.map(lambda e: annotate_entry(gateway, backend_id, e, policy, cache), ordered)
            )
    else:
        outcomes = [annotate_entry(gateway, backend_id, e, policy, cache) for e in ordered]
    samples = tuple(s for s, _, _ in outcomes if s is not None)
    rejected = tuple(r for _, r, _ in outcomes if r is not None)
    digests = tuple(d for _, _, ds in outcomes for d in ds)
    return GenerationResult(samples=samples, rejected=rejected, request_digests=digests)


# --- split / augment / export ---------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    test_count: int
    seed: int = 0
    stratify: bool = True


def _quotas(sizes: Sequence[int], total: int) -> list[int]:
    """Largest-remainder allocation of `total` across groups, capped by size."""
    population = sum(sizes)
    raw = [total * s / population for s in sizes]
    quotas = [min(math.floor(r), s) for r, s in zip(raw, sizes)]
    remainders = sorted(
        range(len(sizes)), key=lambda i: (-(raw[i] - math.floor(raw[i])), i)
    )
    deficit = total - sum(quotas)
    cursor = 0
    while deficit > 0:
        i = remainders[cursor % len(remainders)]
        if quotas[i] < sizes[i]:
            quotas[i] += 1
            deficit -= 1
        cursor += 1
    return quotas


def split_dataset(samples: Iterable[CapQASample], spec: SplitSpec) -> Dataset:
    """Deterministic seeded shuffle then partition; stratified by activity label."""
    pool = sorted(samples, key=lambda s: s.id)
    if spec.train_count < 0 or spec.test_count < 0:
        raise InfeasibleSplit("split counts must be non-negative")
    if spec.train_count + spec.test_count > len(pool):
        raise InfeasibleSplit(
            f"requested {spec.train_count}+{spec.test_count} from {len(pool)} samples"
        )
    rng = random.Random(spec.seed)
    labels = sorted({s.activity_label for s in pool})
    use_strata = spec.stratify and len(labels) > 1 and all(label for label in labels)

    test: list[CapQASample] = []
    rest: list[CapQASample] = []
    if use_strata:
        groups = {label: [s for s in pool if s.activity_label == label] for label in labels}
        for label in labels:
            rng.shuffle(groups[label])
        quotas = _quotas([len(groups[label]) for label in labels], spec.test_count)
        for label, quota in zip(labels, quotas):
            test.extend(groups[label][:quota])
            rest.extend(groups[label][quota:])
    else:
        shuffled = list(pool)
        rng.shuffle(shuffled)
        test = shuffled[: spec.test_count]
        rest = shuffled[spec.test_count :]

    rng.shuffle(rest)
    train = rest[: spec.train_count]
    tagged = [replace(s, split="train") for s in sorted(train, key=lambda s: s.id)]
    tagged += [replace(s, split="test") for s in sorted(test, key=lambda s: s.id)]
    return Dataset(samples=tuple(tagged))


def augment_question_list_position(conv: Conversation, seed: int) -> Conversation:
    """Relocate the question-generation turn pair to a seeded uniform position.

    The pair moves as a unit, other turns keep their relative order, and the
    output stays role-alternating. Position 0 reproduces the input when the
    pair already leads.
    """
    qg_index = next((i for i, t in enumerate(conv.turns) if t.kind == "question_gen"), None)
    if qg_index is None:
        raise NoQuestionGenTurn("conversation has no question_gen turn")
    pair = conv.turns[qg_index]
    others = [t for i, t in enumerate(conv.turns) if i != qg_index]
    position = random.Random(seed).randrange(len(conv.turns))
    new_turns = others[:position] + [pair] + others[position:]
    return replace(conv, turns=tuple(new_turns))


def export_instruction_jsonl(dataset: Dataset, path) -> int:
    """Write the record schema one sample per line; returns records written."""
    return write_jsonl_atomic(path, (sample_to_record(s) for s in dataset.samples))


def load_instruction_jsonl(path) -> Dataset:
    return Dataset(samples=tuple(parse_sample_record(r) for r in iter_jsonl(path)))


def dataset_stats(dataset: Dataset) -> dict:
    n = dataset.n_samples
    qa = dataset.n_qa_pairs
    return {
        "n_samples": n,
        "n_qa_pairs": qa,
        "qa_per_sample_mean": (qa / n) if n else 0.0,
    }


def check_dataset(dataset: Dataset) -> list[str]:
    """Cross-sample issues: duplicate ids and per-sample structural violations."""
    problems: list[str] = []
    seen: set[str] = set()
    for sample in dataset.samples:
        if sample.id in seen:
            problems.append(f"duplicate sample id {sample.id!r}")
        seen.add(sample.id)
        for violation in validate_structure(sample.conversation, sample.activity_label):
            problems.append(f"{sample.id}: {violation.code}: {violation.message}")
    return problems
