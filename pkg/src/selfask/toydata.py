"""Self-contained toy workspace for offline end-to-end runs.

Writes a small corpus manifest, a fully scripted backend covering annotation,
staged inference, judging and existence probes, a probe annotations file, and
a run config wired to the in-process mock. Everything is deterministic, so two
runs with the same seed produce byte-identical outputs.
"""

from __future__ import annotations

import json
import os

from .jsonio import write_jsonl_atomic

ACTIVITIES = [
    ("toy-001", "person enters car"),
    ("toy-002", "person opens door"),
    ("toy-003", "person rides bicycle"),
    ("toy-004", "person walks dog"),
    ("toy-005", "person carries box"),
]

_SCENES = {
    "person enters car": (
        "getting into a parked sedan at the curb",
        "A driver in a grey coat is settling into a sedan parked at the curb; the door stands "
        "open and the street behind is empty.",
        "A driver in a grey coat settles into a parked sedan.",
    ),
    "person opens door": (
        "pulling a building door open",
        "Someone in a blue shirt pulls a glass building door open with one hand while holding "
        "a phone in the other; the lobby beyond is bright.",
        "Someone in a blue shirt pulls a glass door open.",
    ),
    "person rides bicycle": (
        "pedaling along a tree-lined path",
        "A cyclist wearing a helmet and a bright jacket pedals along a paved, tree-lined path; "
        "the posture is upright and the path ahead is clear.",
        "A cyclist in a bright jacket pedals along a tree-lined path.",
    ),
    "person walks dog": (
        "leading a leashed dog along the sidewalk",
        "A walker in a green parka leads a small leashed dog along the sidewalk past a row of "
        "hedges; the dog trots slightly ahead.",
        "A walker in a green parka leads a small leashed dog.",
    ),
    "person carries box": (
        "carrying a cardboard box toward a van",
        "A mover in work gloves carries a large cardboard box toward an open van, leaning back "
        "slightly to balance the weight.",
        "A mover carries a large cardboard box toward a van.",
    ),
}


def _annotation_reply(label: str) -> str:
    doing, detailed, concise = _SCENES[label]
    return "\n".join(
        [
            "Q0. What is the person doing?",
            f"A. The person is {doing}.",
            "Q1. What is the person wearing?",
            "A. Practical outdoor clothing suited to the task.",
            "Q2. What does the surrounding area look like?",
            "A. An ordinary street scene with no other activity.",
            "Q3. Is anyone else visible?",
            "A. No, the person is alone.",
            "Q4. What time of day does it appear to be?",
            "A. It appears to be daytime with soft light.",
            "Detailed Description:",
            detailed,
            "Concise Description:",
            concise,
        ]
    )


INFER_QUESTIONS = "\n".join(
    [
        "Q0. What is the person doing in the image?",
        "Q1. What is the person wearing?",
        "Q2. What objects is the person interacting with?",
        "Q3. What does the background show?",
        "Q4. Is the scene indoors or outdoors?",
        "Q5. What can be inferred about the person's intent?",
    ]
)

INFER_ANSWERS = "\n".join(
    [
        "The person is in the middle of an everyday activity.",
        "The person wears practical outdoor clothing.",
        "The person interacts with one large object in front of them.",
        "The background shows a quiet street.",
        "The scene is outdoors.",
        "The person intends to finish the activity and move on.",
    ]
)

INFER_FINAL = (
    "In the image, a person is engaged in an everyday outdoor activity on a quiet street, "
    "wearing practical clothing and interacting with a single large object in front of them. "
    "Nothing else in the scene draws attention, and the person appears focused on finishing "
    "the activity."
)


def toy_script() -> list[dict]:
    # judge entries must precede the inference entries: judge prompts quote the
    # describe prompt inside their [Question] section and would match it first
    entries = [
        {
            "match": {"contains": "based on the hallucination"},
            "reply": "8 6\nBoth descriptions stay close to the reference; the second adds minor detail.",
        },
        {
            "match": {"contains": "generating questions based on the image content"},
            "reply": "4 3\nThe reference questions are more specific; the candidate list is adequate.",
        },
    ]
    for _, label in ACTIVITIES:
        entries.append({"match": {"contains": f"'{label}'"}, "reply": _annotation_reply(label)})
    entries += [
        {"match": {"contains": "formulate"}, "reply": INFER_QUESTIONS},
        {"match": {"contains": "answer all the questions"}, "reply": INFER_ANSWERS},
        {"match": {"contains": "Use detailed descriptions"}, "reply": INFER_FINAL},
        {"match": {"contains": "Write down a detailed description"}, "reply": INFER_FINAL},
        {
            "match": {"contains": "Summarize the details"},
            "reply": "A person finishes an everyday outdoor activity on a quiet street.",
        },
        {"match": {"contains": "Is there a"}, "reply": "Yes."},
    ]
    return entries


POPE_IMAGES = [
    ("img-01", ["person", "car", "street", "tree"]),
    ("img-02", ["person", "door", "box", "street"]),
    ("img-03", ["person", "bicycle", "tree", "street"]),
    ("img-04", ["person", "dog", "tree", "street"]),
    ("img-05", ["person", "box", "car", "door"]),
]


def make_toy_workspace(root: str, seed: int = 0, cache: str | None = None) -> dict[str, str]:
    """Write corpus, script, probe annotations and config under `root`."""
    os.makedirs(root, exist_ok=True)
    paths = {
        "corpus": os.path.join(root, "corpus.jsonl"),
        "script": os.path.join(root, "script.json"),
        "pope_annotations": os.path.join(root, "pope_annotations.jsonl"),
        "config": os.path.join(root, "config.json"),
    }
    write_jsonl_atomic(
        paths["corpus"],
        (
            {"id": item_id, "image": f"images/{item_id}.jpg", "activity_label": label}
            for item_id, label in ACTIVITIES
        ),
    )
    with open(paths["script"], "w", encoding="utf-8") as fh:
        json.dump(toy_script(), fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    write_jsonl_atomic(
        paths["pope_annotations"],
        (
            {"image_id": image_id, "image": f"images/{image_id}.jpg", "objects": objects}
            for image_id, objects in POPE_IMAGES
        ),
    )
    config = {
        "default_backend": "mock",
        "seed": seed,
        "out": "out",
        "concurrency": 2,
        "backends": {
            "mock": {
                "endpoint": "mock:script.json",
                "model": "scripted-1",
                "retry_budget": 1,
                "backoff_base": 0.01,
            }
        },
    }
    if cache:
        config["cache"] = cache
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump(config, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    return paths
