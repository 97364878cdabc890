"""Object-existence probing: negative sampling over co-occurrence statistics and
binary classification metrics.

Each image contributes k_pos present objects (labeled yes) and k_neg absent
objects (labeled no) chosen by the active setting:

* random       seeded uniform draw from the absent vocabulary
* popular      most frequent absent objects (frequency desc, name asc)
* adversarial  absent objects ranked by total co-occurrence with the image's
               present objects (desc, then frequency desc, then name asc)

"Yes" is the positive class throughout.
"""

from __future__ import annotations

import random
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .gateway import ChatMessage, ChatRequest, Gateway, ResponseCache, TextPart, request_key
from .jsonio import iter_jsonl, sha256_hex
from .pipeline import image_part_for


class InsufficientVocabulary(ValueError):
    """Fewer absent objects than requested negatives."""


class InsufficientObjects(ValueError):
    """An image has fewer present objects than requested positives."""


SETTINGS = ("random", "popular", "adversarial")

QUESTION_TEMPLATE = "Is there a {object} in the image?"


def normalize_object(name: str) -> str:
    return re.sub(r"\s+", " ", name).strip().lower()


@dataclass(frozen=True)
class ImageObjects:
    image_id: str
    image: str
    objects: frozenset[str]


class ObjectAnnotations:
    """Per-image object sets with the derived vocabulary and frequency table."""

    def __init__(self, images: Iterable[ImageObjects]):
        ordered = sorted(images, key=lambda im: im.image_id)
        seen: set[str] = set()
        for im in ordered:
            if im.image_id in seen:
                raise ValueError(f"duplicate image_id {im.image_id!r}")
            seen.add(im.image_id)
        self.images: tuple[ImageObjects, ...] = tuple(ordered)
        self.by_id: dict[str, ImageObjects] = {im.image_id: im for im in ordered}
        frequency: dict[str, int] = defaultdict(int)
        for im in ordered:
            for obj in im.objects:
                frequency[obj] += 1
        self.frequency: dict[str, int] = dict(frequency)
        self.vocabulary: tuple[str, ...] = tuple(sorted(frequency))

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "ObjectAnnotations":
        images = []
        for record in records:
            objects = frozenset(
                normalize_object(o) for o in record.get("objects", []) if normalize_object(o)
            )
            images.append(
                ImageObjects(
                    image_id=str(record["image_id"]),
                    image=record.get("image", ""),
                    objects=objects,
                )
            )
        return cls(images)

    @classmethod
    def load(cls, path) -> "ObjectAnnotations":
        return cls.from_records(iter_jsonl(path))


class CoOccurrence:
    """Symmetric image-level co-occurrence counts; the diagonal is the frequency."""

    def __init__(self, counts: Mapping[str, Mapping[str, int]], frequency: Mapping[str, int]):
        self._counts = {a: dict(row) for a, row in counts.items()}
        self._frequency = dict(frequency)

    def count(self, a: str, b: str) -> int:
        if a == b:
            return self._frequency.get(a, 0)
        return self._counts.get(a, {}).get(b, 0)


def build_cooccurrence(ann: ObjectAnnotations) -> CoOccurrence:
    if not ann.images:
        raise ValueError("annotations are empty")
    counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for im in ann.images:
        objects = sorted(im.objects)
        for i, a in enumerate(objects):
            for b in objects[i + 1 :]:
                counts[a][b] += 1
                counts[b][a] += 1
    return CoOccurrence(counts, ann.frequency)


def sample_negatives(
    ann: ObjectAnnotations,
    cooc: CoOccurrence | None,
    image_id: str,
    setting: str,
    k: int,
    seed: int,
) -> list[str]:
    """Choose k absent objects for an image under the given setting."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    image = ann.by_id[image_id]
    absent = sorted(set(ann.vocabulary) - image.objects)
    if len(absent) < k:
        raise InsufficientVocabulary(
            f"image {image_id!r}: {len(absent)} absent objects, need {k}"
        )
    if setting == "random":
        return random.Random(seed).sample(absent, k)
    if setting == "popular":
        ranked = sorted(absent, key=lambda o: (-ann.frequency[o], o))
        return ranked[:k]
    if cooc is None:
        raise ValueError("adversarial sampling needs co-occurrence counts")
    present = sorted(image.objects)

    def adversarial_rank(candidate: str):
        score = sum(cooc.count(candidate, p) for p in present)
        return (-score, -ann.frequency[candidate], candidate)

    return sorted(absent, key=adversarial_rank)[:k]


@dataclass(frozen=True)
class PopeItem:
    image_id: str
    object: str
    label: str  # "yes" | "no"
    setting: str
    question_text: str


def _derived_seed(seed: int, image_id: str, salt: str) -> int:
    digest = sha256_hex(f"{seed}:{salt}:{image_id}")
    return int(digest[:16], 16)


def build_pope_set(
    ann: ObjectAnnotations,
    setting: str,
    k_pos: int = 3,
    k_neg: int = 3,
    seed: int = 0,
    question_template: str = QUESTION_TEMPLATE,
    cooc: CoOccurrence | None = None,
) -> list[PopeItem]:
    """Per image: k_pos seeded-uniform present objects (yes) and k_neg negatives (no)."""
    if setting == "adversarial" and cooc is None:
        cooc = build_cooccurrence(ann)
    items: list[PopeItem] = []
    for im in ann.images:
        present = sorted(im.objects)
        if len(present) < k_pos:
            raise InsufficientObjects(
                f"image {im.image_id!r}: {len(present)} objects, need {k_pos} positives"
            )
        pos_rng = random.Random(_derived_seed(seed, im.image_id, "pos"))
        positives = pos_rng.sample(present, k_pos)
        negatives = sample_negatives(
            ann,
            cooc if setting == "adversarial" else None,
            im.image_id,
            setting,
            k_neg,
            _derived_seed(seed, im.image_id, "neg"),
        )
        for obj in positives:
            items.append(
                PopeItem(im.image_id, obj, "yes", setting, question_template.format(object=obj))
            )
        for obj in negatives:
            items.append(
                PopeItem(im.image_id, obj, "no", setting, question_template.format(object=obj))
            )
    return items


@dataclass(frozen=True)
class YesNoVerdict:
    verdict: str  # "yes" | "no"
    parsed: bool


_TOKEN_RE = re.compile(r"[a-z']+")


def parse_yes_no(response: str) -> YesNoVerdict:
    """First standalone yes/no token decides; neither defaults to no, unparsed."""
    for token in _TOKEN_RE.findall(response.lower()):
        if token == "yes":
            return YesNoVerdict("yes", True)
        if token == "no":
            return YesNoVerdict("no", True)
    return YesNoVerdict("no", False)


@dataclass(frozen=True)
class PopeMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    yes_rate: float
    undefined_precision: bool = False


def f1_from_precision_recall(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_pope_metrics(judged: Sequence[tuple[PopeItem, str]]) -> PopeMetrics:
    """Confusion-matrix metrics over (item, verdict) pairs, yes as positive."""
    if not judged:
        raise ValueError("no judged items")
    tp = fp = fn = tn = 0
    for item, verdict in judged:
        if item.label == "yes":
            if verdict == "yes":
                tp += 1
            else:
                fn += 1
        else:
            if verdict == "yes":
                fp += 1
            else:
                tn += 1
    total = tp + fp + fn + tn
    predicted_yes = tp + fp
    undefined = predicted_yes == 0
    precision = tp / predicted_yes if predicted_yes else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    return PopeMetrics(
        accuracy=(tp + tn) / total,
        precision=precision,
        recall=recall,
        f1=f1_from_precision_recall(precision, recall),
        yes_rate=predicted_yes / total,
        undefined_precision=undefined,
    )


def metrics_to_dict(metrics: PopeMetrics) -> dict:
    return {
        "accuracy": metrics.accuracy,
        "precision": metrics.precision,
        "recall": metrics.recall,
        "f1": metrics.f1,
        "yes_rate": metrics.yes_rate,
        "undefined_precision": metrics.undefined_precision,
    }


def run_pope_eval(
    gateway: Gateway,
    backend_id: str,
    ann: ObjectAnnotations,
    setting: str,
    k_pos: int = 3,
    k_neg: int = 3,
    seed: int = 0,
    temperature: float = 0.0,
    max_tokens: int = 32,
    cache: ResponseCache | None = None,
    question_template: str = QUESTION_TEMPLATE,
    concurrency: int = 1,
) -> tuple[PopeMetrics, list[dict], list[str]]:
    """Build probes, query the model per item, parse verdicts, compute metrics.

    Returns (metrics, item manifest rows, request digests). Queries may run
    concurrently; the manifest keeps item order and is sufficient to recompute
    the metrics offline.
    """
    items = build_pope_set(ann, setting, k_pos=k_pos, k_neg=k_neg, seed=seed,
                           question_template=question_template)
    model = gateway.profile(backend_id).model

    def query(item: PopeItem) -> tuple[str, str]:
        image_ref = ann.by_id[item.image_id].image or item.image_id
        message = ChatMessage(
            role="user", parts=(TextPart(item.question_text), image_part_for(image_ref))
        )
        req = ChatRequest(
            backend_id=backend_id,
            model=model,
            messages=(message,),
            temperature=temperature,
            max_tokens=max_tokens,
            seed=seed,
        )
        return request_key(req), gateway.ask(req, cache=cache).text

    if concurrency > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            replies = list(pool.map(query, items))
    else:
        replies = [query(item) for item in items]

    rows: list[dict] = []
    judged: list[tuple[PopeItem, str]] = []
    digests: list[str] = []
    for item, (digest, raw) in zip(items, replies):
        digests.append(digest)
        verdict = parse_yes_no(raw)
        judged.append((item, verdict.verdict))
        rows.append(
            {
                "image_id": item.image_id,
                "object": item.object,
                "setting": item.setting,
                "label": item.label,
                "verdict": verdict.verdict,
                "parsed": verdict.parsed,
                "raw": raw,
            }
        )
    return compute_pope_metrics(judged), rows, digests


def metrics_from_manifest(rows: Iterable[Mapping]) -> PopeMetrics:
    """Recompute metrics from persisted manifest rows."""
    judged = [
        (
            PopeItem(
                image_id=row["image_id"],
                object=row["object"],
                label=row["label"],
                setting=row.get("setting", "random"),
                question_text="",
            ),
            row["verdict"],
        )
        for row in rows
    ]
    return compute_pope_metrics(judged)
