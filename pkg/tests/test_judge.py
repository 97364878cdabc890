"""Judge prompts, verdict parsing, ratio metrics, and the eval runner."""

from __future__ import annotations

from statistics import mean

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfask.judge import (
    CoverageError,
    DegenerateGroundTruth,
    MalformedVerdict,
    OutOfScale,
    build_hal_judge_prompt,
    build_qq_judge_prompt,
    compute_ratio_score,
    invert_scale,
    parse_pairwise_scores,
    run_capqa_eval,
    verdict_rationale,
)
from tests.conftest import scripted_gateway


def test_hal_prompt_contains_rubric_and_sections():
    prompt = build_hal_judge_prompt("What happens?", "A quiet scene.", "gt text", "pred text")
    assert "unreal or unfounded content" in prompt
    assert "[Assistant 1]\ngt text" in prompt
    assert "[Assistant 2]\npred text" in prompt
    assert "scale of 1 to 10" in prompt


def test_hal_prompt_swap_order_moves_blocks_only():
    normal = build_hal_judge_prompt("q", "ref", "gt", "pred")
    swapped = build_hal_judge_prompt("q", "ref", "gt", "pred", swap_order=True)
    assert "[Assistant 1]\npred" in swapped and "[Assistant 2]\ngt" in swapped
    assert normal.replace("[Assistant 1]\ngt", "X").replace(
        "[Assistant 2]\npred", "Y"
    ) == swapped.replace("[Assistant 1]\npred", "X").replace("[Assistant 2]\ngt", "Y")


def test_hal_prompt_identical_answers_still_valid():
    prompt = build_hal_judge_prompt("q", "ref", "same", "same")
    assert prompt.count("same") == 2


def test_hal_prompt_rejects_empty_inputs():
    with pytest.raises(ValueError):
        build_hal_judge_prompt("", "ref", "a", "b")
    with pytest.raises(ValueError):
        build_hal_judge_prompt("q", "ref", "a", "  ")


def test_qq_prompt_contains_rubric():
    prompt = build_qq_judge_prompt("context", "Q0. ref?", "Q0. gt?", "Q0. pred?")
    assert "propose several diverse and effective questions" in prompt
    assert "scale of 1 to 5" in prompt
    assert "diversity, effectiveness, and accuracy" in prompt


def test_qq_prompt_allows_empty_prediction():
    prompt = build_qq_judge_prompt("context", "Q0. ref?", "Q0. gt?", "")
    assert "[Assistant 2]\n\n" in prompt


def test_qq_prompt_swapped_variant_differs_only_in_block_order():
    normal = build_qq_judge_prompt("c", "r", "gt", "pred")
    swapped = build_qq_judge_prompt("c", "r", "gt", "pred", swap_order=True)
    assert normal != swapped
    assert sorted(normal.split("\n")) == sorted(swapped.split("\n"))


# --- verdict parsing -----------------------------------------------------------------


def test_parse_scores_basic():
    assert parse_pairwise_scores("7 4\nAssistant 1 was closer to the reference.", 10) == (7.0, 4.0)


def test_parse_scores_decimals():
    assert parse_pairwise_scores("8.5 9", 10) == (8.5, 9.0)


def test_parse_scores_skips_leading_blank_lines():
    assert parse_pairwise_scores("\n\n  3 2\nrationale", 5) == (3.0, 2.0)


def test_parse_scores_malformed():
    with pytest.raises(MalformedVerdict):
        parse_pairwise_scores("scores: seven and four", 10)
    with pytest.raises(MalformedVerdict):
        parse_pairwise_scores("7 4 2", 10)
    with pytest.raises(MalformedVerdict):
        parse_pairwise_scores("", 10)


def test_parse_scores_out_of_scale():
    with pytest.raises(OutOfScale):
        parse_pairwise_scores("11 3", 10)
    with pytest.raises(OutOfScale):
        parse_pairwise_scores("0.5 2", 10)
    with pytest.raises(OutOfScale):
        parse_pairwise_scores("4 6", 5)


def test_rationale_is_everything_after_first_line():
    raw = "7 4\nline one\nline two"
    assert verdict_rationale(raw) == "line one\nline two"


# --- ratio arithmetic -----------------------------------------------------------------


def test_ratio_reproduces_reported_cells():
    assert compute_ratio_score([42.0], [80.0]) == pytest.approx(52.5)
    assert compute_ratio_score([39.0], [40.0]) == pytest.approx(97.5)
    assert compute_ratio_score([34.7], [40.0]) == pytest.approx(86.75)


def test_ratio_identity():
    assert compute_ratio_score([3, 5, 7], [3, 5, 7]) == pytest.approx(100.0)


def test_ratio_errors():
    with pytest.raises(ValueError):
        compute_ratio_score([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        compute_ratio_score([], [])
    with pytest.raises(DegenerateGroundTruth):
        compute_ratio_score([1.0], [0.0])


@settings(max_examples=80, deadline=None)
@given(
    scores=st.lists(st.floats(min_value=1, max_value=10), min_size=1, max_size=20),
    factor=st.floats(min_value=0.1, max_value=10),
)
def test_ratio_scale_invariance(scores, factor):
    pred = [s * 0.7 for s in scores]
    base = compute_ratio_score(pred, scores)
    scaled = compute_ratio_score([s * factor for s in pred], [s * factor for s in scores])
    assert scaled == pytest.approx(base, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    gt=st.lists(st.floats(min_value=1, max_value=10), min_size=1, max_size=10),
    pred=st.lists(st.floats(min_value=1, max_value=10), min_size=1, max_size=10),
)
def test_ratio_swap_inverts_through_100_squared(gt, pred):
    n = min(len(gt), len(pred))
    gt, pred = gt[:n], pred[:n]
    forward = compute_ratio_score(pred, gt)
    backward = compute_ratio_score(gt, pred)
    assert forward * backward == pytest.approx(100.0**2, rel=1e-9)


def test_invert_scale():
    assert invert_scale(8, 10) == 3
    assert invert_scale(1, 10) == 10
    assert invert_scale(3, 5) == 3


# --- eval runner -------------------------------------------------------------------------


def make_testset(nightcar_sample, n: int = 3):
    from dataclasses import replace

    return [
        replace(nightcar_sample, id=f"sample-{i:02d}", split="test") for i in range(n)
    ]


def outputs_for(testset):
    return {
        s.id: {
            "id": s.id,
            "final_answer": "A person stands near a parked car at night, door open.",
            "questions": ["What is the person doing?", "Is it day or night?"],
        }
        for s in testset
    }


def judge_gateway(reply: str = "8 8\nEven.", extra_entries=None):
    entries = list(extra_entries or [])
    entries.append({"match": {"contains": "[System]"}, "reply": reply})
    return scripted_gateway(entries)


def test_eval_constant_judge_gives_100(nightcar_sample):
    testset = make_testset(nightcar_sample)
    gateway, _ = judge_gateway("8 8\nEven.")
    result = run_capqa_eval(
        gateway, "mock", testset, outputs_for(testset), metric="hals", repeats=1
    )
    assert result.runs[0].ratio_score == pytest.approx(100.0)
    assert result.runs[0].n_failed == 0


def test_eval_half_score_judge(nightcar_sample):
    testset = make_testset(nightcar_sample)
    gateway, _ = judge_gateway("8 4\nSecond weaker.")
    result = run_capqa_eval(
        gateway, "mock", testset, outputs_for(testset), metric="hals", repeats=1
    )
    assert result.runs[0].ratio_score == pytest.approx(50.0)


def test_eval_three_repeats_average_recomputable(nightcar_sample):
    testset = make_testset(nightcar_sample, n=1)
    # vary the verdict per call: three runs of one sample each
    entries = [
        {"match": {"call_index": 0}, "reply": "8 4\nr0"},
        {"match": {"call_index": 1}, "reply": "8 6\nr1"},
        {"match": {"call_index": 2}, "reply": "8 8\nr2"},
    ]
    gateway, _ = scripted_gateway(entries)
    result = run_capqa_eval(
        gateway, "mock", testset, outputs_for(testset), metric="hals", repeats=3
    )
    per_run = [run.ratio_score for run in result.runs]
    assert per_run == [pytest.approx(50.0), pytest.approx(75.0), pytest.approx(100.0)]
    # summary equals the mean of per-run ratios recomputed from the verdict lists
    recomputed = [
        compute_ratio_score(
            [v.score_pred for v in run.per_sample], [v.score_gt for v in run.per_sample]
        )
        for run in result.runs
    ]
    assert result.avg_ratio == pytest.approx(mean(recomputed))


def test_eval_failed_verdicts_excluded(nightcar_sample):
    testset = make_testset(nightcar_sample, n=3)
    outputs = outputs_for(testset)
    outputs["sample-01"]["final_answer"] = "UNIQUE-MARKER answer"
    entries = [
        {"match": {"contains": "UNIQUE-MARKER"}, "reply": "no numbers here"},
    ]
    gateway, _ = judge_gateway("8 4\nFine.", extra_entries=entries)
    result = run_capqa_eval(gateway, "mock", testset, outputs, metric="hals", repeats=1)
    run = result.runs[0]
    assert run.n_failed == 1
    assert len(run.per_sample) == 2
    assert run.ratio_score == pytest.approx(50.0)
    assert run.failures[0][0] == "sample-01"


def test_eval_qqs_uses_five_point_scale(nightcar_sample):
    testset = make_testset(nightcar_sample, n=2)
    gateway, _ = judge_gateway("4 3\nSlightly weaker.")
    result = run_capqa_eval(
        gateway, "mock", testset, outputs_for(testset), metric="qqs", repeats=1
    )
    assert result.runs[0].ratio_score == pytest.approx(75.0)


def test_eval_inverted_orientation(nightcar_sample):
    testset = make_testset(nightcar_sample, n=1)
    gateway, _ = judge_gateway("8 4\nLess is better here.")
    result = run_capqa_eval(
        gateway,
        "mock",
        testset,
        outputs_for(testset),
        metric="hals",
        repeats=1,
        invert_hallucination_scale=True,
    )
    # 8 -> 3, 4 -> 7 on the 10 scale
    assert result.runs[0].ratio_score == pytest.approx(100.0 * 7 / 3)
    assert result.orientation == "inverted"


def test_eval_coverage_error(nightcar_sample):
    testset = make_testset(nightcar_sample, n=2)
    outputs = outputs_for(testset)
    del outputs["sample-01"]
    gateway, _ = judge_gateway()
    with pytest.raises(CoverageError):
        run_capqa_eval(gateway, "mock", testset, outputs, metric="hals")


def test_eval_judges_gt_and_pred_each_run(nightcar_sample):
    testset = make_testset(nightcar_sample, n=1)
    gateway, mock = judge_gateway("8 7\nClose.")
    run_capqa_eval(gateway, "mock", testset, outputs_for(testset), metric="hals", repeats=3)
    assert mock.calls == 3  # one pairwise judgement per run, gt re-judged every time
