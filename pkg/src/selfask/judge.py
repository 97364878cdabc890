"""Pairwise judge scoring of descriptions and question lists, with ratio metrics.

A judge backend rates two responses (Assistant 1 = ground truth, Assistant 2 =
prediction) on a fixed first-line "score score" contract. Per metric the
aggregate is 100 * mean(prediction scores) / mean(ground-truth scores),
averaged over repeated runs; both sides are re-judged every run.

Scores are treated as higher-is-better for both metrics. The hallucination
rubric's own wording points the other way, so ``invert_scale`` is available to
flip per-item scores (s -> scale_max + 1 - s) for judges that follow the
rubric literally; the orientation in force is recorded in the summary.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from statistics import mean
from typing import Mapping, Sequence

from .conversation import CapQASample, strip_section_header
from .gateway import ChatRequest, Gateway, ResponseCache, request_key, text_message


class MalformedVerdict(ValueError):
    """First verdict line does not contain exactly two numbers."""


class OutOfScale(ValueError):
    """A parsed score falls outside [1, scale_max]."""


class DegenerateGroundTruth(ValueError):
    """Mean ground-truth score is zero; the ratio is undefined."""


class CoverageError(ValueError):
    """A test-set sample has no system output."""


HAL_SCALE_MAX = 10.0
QQ_SCALE_MAX = 5.0

HAL_RUBRIC = (
    "We would like to request your feedback on the performance of two AI assistants in response "
    "to the user question displayed above. The user asks the question on observing an image. For "
    "your reference, the visual content in the image is represented with a few sentences "
    "describing the image.\n"
    "Please rate their responses based on the hallucination (i.e., unreal or unfounded content). "
    "Each assistant receives an overall score on a scale of 1 to 10, where a lower score "
    "indicates fewer hallucinations and better performance. Please first output a single line "
    "containing only two values indicating the scores for Assistant 1 and Assistant 2, "
    "respectively. The two scores are separated by a space. In the subsequent line, please "
    "provide a comprehensive explanation of your evaluation, avoiding any potential bias and "
    "ensuring that the order in which the responses were presented does not affect your judgment."
)

QQ_RUBRIC = (
    "We would like to request your feedback on the performance of two AI assistants in "
    "generating questions based on the image content. The task for the assistant is to propose "
    "several diverse and effective questions, aimed at obtaining a more accurate detailed "
    "description. For your reference, we will provide additional information about the image "
    "and questions (such as the expected questions, human-generated questions, and hints given "
    "by annotators). Note that the assistant can only see the image content and question text, "
    "and all other reference information is used to help you better understand the questions "
    "and content of the image only. The major criteria for evaluation are the diversity, "
    "effectiveness, and accuracy of the questions generated.\n"
    "Each assistant receives an overall score on a scale of 1 to 5, where a higher score "
    "indicates better overall performance. Please first output a single line containing only "
    "two values indicating the scores for Assistant 1 and Assistant 2, respectively. The two "
    "scores are separated by a space. In the subsequent line, please provide a comprehensive "
    "explanation of your evaluation, avoiding any potential bias and ensuring that the order "
    "in which the responses were presented does not affect your judgment."
)


def build_hal_judge_prompt(
    question: str,
    reference_description: str,
    answer_gt: str,
    answer_pred: str,
    swap_order: bool = False,
) -> str:
    for name, value in (
        ("question", question),
        ("reference_description", reference_description),
        ("answer_gt", answer_gt),
        ("answer_pred", answer_pred),
    ):
        if not value.strip():
            raise ValueError(f"{name} must be non-empty")
    first, second = (answer_pred, answer_gt) if swap_order else (answer_gt, answer_pred)
    return (
        f"[Question]\n{question}\n\n"
        f"[Context]\n{reference_description}\n\n"
        f"[Assistant 1]\n{first}\n\n[End of Assistant 1]\n\n"
        f"[Assistant 2]\n{second}\n\n[End of Assistant 2]\n\n"
        f"[System]\n{HAL_RUBRIC}"
    )


def build_qq_judge_prompt(
    image_context: str,
    reference_questions: str,
    questions_gt: str,
    questions_pred: str,
    swap_order: bool = False,
) -> str:
    if not image_context.strip() or not reference_questions.strip():
        raise ValueError("image_context and reference_questions must be non-empty")
    first, second = (
        (questions_pred, questions_gt) if swap_order else (questions_gt, questions_pred)
    )
    return (
        f"[Image Context]\n{image_context}\n\n"
        f"[Reference Questions]\n{reference_questions}\n\n"
        f"[Assistant 1]\n{first}\n\n[End of Assistant 1]\n\n"
        f"[Assistant 2]\n{second}\n\n[End of Assistant 2]\n\n"
        f"[System]\n{QQ_RUBRIC}"
    )


_TWO_SCORES_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s+(\d+(?:\.\d+)?)\s*$")


def parse_pairwise_scores(text: str, scale_max: float) -> tuple[float, float]:
    """Exactly two numbers on the first non-empty line; the rest is rationale."""
    first_line = next((line for line in text.split("\n") if line.strip()), "")
    m = _TWO_SCORES_RE.match(first_line)
    if not m:
        raise MalformedVerdict(f"first line is not two scores: {first_line!r}")
    scores = (float(m.group(1)), float(m.group(2)))
    for s in scores:
        if not 1.0 <= s <= scale_max:
            raise OutOfScale(f"score {s} outside [1, {scale_max}]")
    return scores


def verdict_rationale(text: str) -> str:
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if line.strip():
            return "\n".join(lines[i + 1 :]).strip()
    return ""


def invert_scale(score: float, scale_max: float) -> float:
    return scale_max + 1.0 - score


def compute_ratio_score(scores_pred: Sequence[float], scores_gt: Sequence[float]) -> float:
    """100 * mean(pred) / mean(gt)."""
    if len(scores_pred) != len(scores_gt) or not scores_pred:
        raise ValueError("score lists must be the same non-zero length")
    gt_mean = mean(scores_gt)
    if gt_mean == 0:
        raise DegenerateGroundTruth("mean ground-truth score is zero")
    return 100.0 * mean(scores_pred) / gt_mean


@dataclass(frozen=True)
class JudgeVerdict:
    sample_id: str
    score_gt: float
    score_pred: float
    rationale: str
    raw: str


@dataclass(frozen=True)
class EvalRunReport:
    metric: str
    per_sample: tuple[JudgeVerdict, ...]
    mean_gt: float
    mean_pred: float
    ratio_score: float
    n_failed: int
    failures: tuple[tuple[str, str], ...] = ()


METRICS = {"hals": HAL_SCALE_MAX, "qqs": QQ_SCALE_MAX}


def _format_questions(questions: Sequence[str]) -> str:
    return "\n".join(f"Q{i}. {q}" for i, q in enumerate(questions))


def judge_prompt_for_sample(sample: CapQASample, output: Mapping, metric: str) -> str:
    """Build the judge request text for one test sample and its system output."""
    conv = sample.conversation
    description_turns = conv.turns_of_kind("description")
    caption_turns = conv.turns_of_kind("caption")
    if not description_turns or not caption_turns:
        raise ValueError(f"sample {sample.id!r} lacks description/caption turns")
    gt_description = strip_section_header(description_turns[0].assistant_text)
    gt_caption = strip_section_header(caption_turns[0].assistant_text)

    if metric == "hals":
        predicted = output.get("final_answer") or output.get("description") or ""
        if not predicted.strip():
            predicted = "(no description produced)"
        return build_hal_judge_prompt(
            question=description_turns[0].human_text,
            reference_description=gt_caption,
            answer_gt=gt_description,
            answer_pred=predicted,
        )
    if metric == "qqs":
        question_gen = conv.turns_of_kind("question_gen")
        if not question_gen:
            raise ValueError(f"sample {sample.id!r} lacks a question_gen turn")
        reference = question_gen[0].assistant_text
        predicted_questions = output.get("questions") or []
        return build_qq_judge_prompt(
            image_context=gt_caption,
            reference_questions=reference,
            questions_gt=reference,
            questions_pred=_format_questions(predicted_questions),
        )
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class CapQAEvalResult:
    metric: str
    runs: tuple[EvalRunReport, ...]
    avg_ratio: float
    orientation: str
    request_digests: tuple[str, ...]


def run_capqa_eval(
    gateway: Gateway,
    backend_id: str,
    testset: Sequence[CapQASample],
    outputs: Mapping[str, Mapping],
    metric: str,
    repeats: int = 3,
    seed: int = 0,
    invert_hallucination_scale: bool = False,
    temperature: float = 0.0,
    max_tokens: int = 512,
    cache: ResponseCache | None = None,
    concurrency: int = 1,
) -> CapQAEvalResult:
    """Judge every sample `repeats` times and average the per-run ratios.

    Ground truth and prediction are re-judged together every run. Verdicts that
    fail to parse are counted in n_failed and excluded from the means. Judge
    calls within a run go through the gateway concurrently; aggregation stays
    a deterministic reduction in sample-id order.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    scale_max = METRICS[metric]
    samples = sorted(testset, key=lambda s: s.id)
    missing = [s.id for s in samples if s.id not in outputs]
    if missing:
        raise CoverageError(f"missing system outputs for {missing}")

    model = gateway.profile(backend_id).model
    runs: list[EvalRunReport] = []
    digests: list[str] = []
    for run_index in range(repeats):

        def judge_one(sample: CapQASample) -> tuple[str, str, str]:
            prompt = judge_prompt_for_sample(sample, outputs[sample.id], metric)
            req = ChatRequest(
                backend_id=backend_id,
                model=model,
                messages=(text_message("user", prompt),),
                temperature=temperature,
                max_tokens=max_tokens,
                seed=seed + run_index,
            )
            return sample.id, request_key(req), gateway.ask(req, cache=cache).text

        if concurrency > 1 and len(samples) > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                raw_replies = list(pool.map(judge_one, samples))
        else:
            raw_replies = [judge_one(s) for s in samples]

        verdicts: list[JudgeVerdict] = []
        failures: list[tuple[str, str]] = []
        for sample_id, digest, raw in raw_replies:
            digests.append(digest)
            try:
                score_gt, score_pred = parse_pairwise_scores(raw, scale_max)
            except (MalformedVerdict, OutOfScale) as exc:
                failures.append((sample_id, f"{type(exc).__name__}: {exc}"))
                continue
            if invert_hallucination_scale:
                score_gt = invert_scale(score_gt, scale_max)
                score_pred = invert_scale(score_pred, scale_max)
            verdicts.append(
                JudgeVerdict(
                    sample_id=sample_id,
                    score_gt=score_gt,
                    score_pred=score_pred,
                    rationale=verdict_rationale(raw),
                    raw=raw,
                )
            )
        if not verdicts:
            raise DegenerateGroundTruth("all verdicts failed to parse")
        ratio = compute_ratio_score(
            [v.score_pred for v in verdicts], [v.score_gt for v in verdicts]
        )
        runs.append(
            EvalRunReport(
                metric=metric,
                per_sample=tuple(verdicts),
                mean_gt=mean(v.score_gt for v in verdicts),
                mean_pred=mean(v.score_pred for v in verdicts),
                ratio_score=ratio,
                n_failed=len(failures),
                failures=tuple(failures),
            )
        )
    return CapQAEvalResult(
        metric=metric,
        runs=tuple(runs),
        avg_ratio=mean(r.ratio_score for r in runs),
        orientation="inverted" if invert_hallucination_scale else "higher_is_better",
        request_digests=tuple(digests),
    )
