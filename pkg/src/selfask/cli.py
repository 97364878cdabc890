"""Command-line surface tying the modules into reproducible pipelines.

Subcommands: generate, infer, eval-capqa, eval-pope, export, stats, mock-serve.
Every command writes a manifest carrying the config digest, the seeds in
force, the backend identity and the request digests, so any reported number
can be recomputed offline. Output files are written atomically.

Exit codes: 0 success, 1 fatal, 2 partial failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Any, Mapping, Sequence

from . import datagen, judge, pope
from .config import ConfigError, RunConfig, config_digest, load_config, make_gateway
from .conversation import parse_sample_record
from .gateway import AuthError, ProtocolError, ResponseCache, TransportError
from .jsonio import atomic_write_text, iter_jsonl, pretty_json, sha256_hex, write_jsonl_atomic
from .mockllm import MockBackend, MockServer
from .pipeline import (
    DEFAULT_MAIN_QUESTION,
    EmptyReply,
    PipelineAborted,
    PipelineOptions,
    result_to_record,
    run_one_turn,
    run_three_turn,
)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


def _open_cache(config: RunConfig) -> ResponseCache | None:
    if not config.cache_path:
        return None
    return ResponseCache(config.cache_path)


def _backend_identity(config: RunConfig, backend_id: str) -> dict[str, str]:
    profile = config.backend(backend_id)
    return {
        "backend_id": profile.backend_id,
        "model": profile.model,
        "endpoint": profile.endpoint,
    }


def _write_manifest(
    config: RunConfig,
    command: str,
    backend_id: str,
    seeds: Mapping[str, Any],
    request_digests: Sequence[str],
    extra: Mapping[str, Any],
) -> str:
    manifest = {
        "command": command,
        "config_digest": config_digest(config),
        "seeds": dict(seeds),
        "backend": _backend_identity(config, backend_id),
        "request_digests": sorted(request_digests),
    }
    manifest.update(extra)
    path = os.path.join(config.out_dir, f"manifest_{command.replace('-', '_')}.json")
    atomic_write_text(path, pretty_json(manifest))
    return path


# --- generate -------------------------------------------------------------------


def cmd_generate(config: RunConfig, args: argparse.Namespace) -> tuple[int, dict]:
    gateway = make_gateway(config)
    cache = _open_cache(config)
    backend_id = config.backend(args.backend).backend_id
    corpus = datagen.load_corpus(args.corpus)
    policy = datagen.GenerationPolicy(max_attempts=args.max_attempts, seed=config.seed)

    def annotate(entry: datagen.CorpusEntry):
        try:
            return datagen.annotate_entry(gateway, backend_id, entry, policy, cache), None
        except (TransportError, AuthError, ProtocolError) as exc:
            reason = f"{type(exc).__name__}: {exc}"
            reject = datagen.RejectedSample(
                id=entry.id,
                image=entry.image,
                activity_label=entry.activity_label,
                attempts=0,
                reason=reason,
            )
            return (None, reject, []), reason

    ordered = sorted(corpus, key=lambda e: e.id)
    if config.concurrency > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            outcomes = list(pool.map(annotate, ordered))
    else:
        outcomes = [annotate(e) for e in ordered]

    samples: list = []
    rejected: list[datagen.RejectedSample] = []
    digests: list[str] = []
    fatal: str | None = None
    for (sample, reject, entry_digests), failure in outcomes:
        fatal = fatal or failure
        digests.extend(entry_digests)
        if sample is not None:
            samples.append(sample)
        if reject is not None:
            rejected.append(reject)

    if args.train_count is not None or args.test_count is not None:
        spec = datagen.SplitSpec(
            train_count=args.train_count or 0,
            test_count=args.test_count or 0,
            seed=args.split_seed if args.split_seed is not None else config.seed,
        )
        dataset = datagen.split_dataset(samples, spec)
        split_seed = spec.seed
    else:
        dataset = datagen.Dataset(samples=tuple(sorted(samples, key=lambda s: s.id)))
        split_seed = None

    dataset_path = os.path.join(config.out_dir, "dataset.jsonl")
    datagen.export_instruction_jsonl(dataset, dataset_path)
    stats = datagen.dataset_stats(dataset)
    atomic_write_text(os.path.join(config.out_dir, "stats.json"), pretty_json(stats))
    write_jsonl_atomic(
        os.path.join(config.out_dir, "rejected.jsonl"),
        (
            {
                "id": r.id,
                "image": r.image,
                "activity_label": r.activity_label,
                "attempts": r.attempts,
                "reason": r.reason,
            }
            for r in rejected
        ),
    )
    _write_manifest(
        config,
        "generate",
        backend_id,
        seeds={"run": config.seed, "split": split_seed},
        request_digests=digests,
        extra={
            "corpus": os.path.basename(str(args.corpus)),
            "n_samples": dataset.n_samples,
            "n_rejected": len(rejected),
            "stats": stats,
            "fatal_error": fatal,
        },
    )
    code = EXIT_FATAL if fatal else EXIT_OK
    return code, {"samples": dataset.n_samples, "rejected": len(rejected), "stats": stats}


# --- infer ----------------------------------------------------------------------


def _infer_items(args: argparse.Namespace) -> list[tuple[str, str, str]]:
    """(id, image_ref, main_question) triples from a testset or a single image."""
    if args.testset:
        items = []
        for record in iter_jsonl(args.testset):
            sample = parse_sample_record(record)
            main_question = sample.conversation.main_question or args.question
            items.append((sample.id, sample.image_ref, main_question))
        return sorted(items)
    if not args.image:
        raise ConfigError("infer needs --testset or --image")
    return [(args.id or os.path.basename(args.image), args.image, args.question)]


def cmd_infer(config: RunConfig, args: argparse.Namespace) -> tuple[int, dict]:
    gateway = make_gateway(config)
    cache = _open_cache(config)
    backend_id = config.backend(args.backend).backend_id
    mode = (
        "one_turn"
        if args.mode == "1turn"
        else (
            "three_turn_describe_summarize"
            if args.final_stage == "describe_summarize"
            else "three_turn_main_question"
        )
    )
    options = PipelineOptions(
        mode=mode,
        min_questions=args.min_questions,
        max_questions=args.max_questions,
        seed=config.seed,
        reattach_image=args.reattach_image,
    )
    items = _infer_items(args)

    def infer_one(item):
        item_id, image_ref, main_question = item
        try:
            if mode == "one_turn":
                result = run_one_turn(gateway, backend_id, image_ref, main_question, options, cache)
            else:
                result = run_three_turn(
                    gateway, backend_id, image_ref, main_question, options, cache
                )
        except (PipelineAborted, EmptyReply, TransportError, AuthError, ProtocolError) as exc:
            return item_id, None, f"{type(exc).__name__}: {exc}"
        return item_id, result, None

    if config.concurrency > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            outcomes = list(pool.map(infer_one, items))
    else:
        outcomes = [infer_one(item) for item in items]

    results: list[dict] = []
    errors: list[dict] = []
    digests: list[str] = []
    for item_id, result, error in outcomes:
        if error is not None:
            errors.append({"id": item_id, "error": error})
            continue
        record = result_to_record(result, item_id)
        record["options"] = {
            "mode": options.mode,
            "min_questions": options.min_questions,
            "max_questions": options.max_questions,
            "seed": options.seed,
            "reattach_image": options.reattach_image,
        }
        results.append(record)
        digests.extend(result.request_digests)

    write_jsonl_atomic(os.path.join(config.out_dir, "results.jsonl"), results)
    _write_manifest(
        config,
        "infer",
        backend_id,
        seeds={"run": config.seed},
        request_digests=digests,
        extra={
            "mode": mode,
            "n_items": len(items),
            "n_ok": len(results),
            "errors": sorted(errors, key=lambda e: e["id"]),
        },
    )
    if items and not results:
        return EXIT_FATAL, {"ok": 0, "failed": len(errors)}
    if errors:
        return EXIT_PARTIAL, {"ok": len(results), "failed": len(errors)}
    return EXIT_OK, {"ok": len(results), "failed": 0}


# --- eval-capqa ------------------------------------------------------------------


def cmd_eval_capqa(config: RunConfig, args: argparse.Namespace) -> tuple[int, dict]:
    gateway = make_gateway(config)
    cache = _open_cache(config)
    backend_id = config.backend(args.backend).backend_id
    testset = [parse_sample_record(r) for r in iter_jsonl(args.testset)]
    outputs = {str(r["id"]): r for r in iter_jsonl(args.outputs)}
    result = judge.run_capqa_eval(
        gateway,
        backend_id,
        testset,
        outputs,
        metric=args.metric,
        repeats=args.repeats,
        seed=config.seed,
        invert_hallucination_scale=args.invert_hallucination_scale,
        cache=cache,
        concurrency=config.concurrency,
    )
    for run_index, run in enumerate(result.runs):
        write_jsonl_atomic(
            os.path.join(config.out_dir, f"capqa_{args.metric}_run{run_index}.jsonl"),
            (
                {
                    "id": v.sample_id,
                    "score_gt": v.score_gt,
                    "score_pred": v.score_pred,
                    "rationale": v.rationale,
                    "raw": v.raw,
                }
                for v in run.per_sample
            ),
        )
    summary = {
        "metric": result.metric,
        "orientation": result.orientation,
        "repeats": args.repeats,
        "runs": [
            {
                "ratio_score": run.ratio_score,
                "mean_gt": run.mean_gt,
                "mean_pred": run.mean_pred,
                "n_failed": run.n_failed,
                "failures": [list(f) for f in run.failures],
            }
            for run in result.runs
        ],
        "avg": result.avg_ratio,
        "config_digest": config_digest(config),
        "seeds": {"run": config.seed},
    }
    atomic_write_text(
        os.path.join(config.out_dir, f"capqa_{args.metric}_summary.json"), pretty_json(summary)
    )
    _write_manifest(
        config,
        "eval-capqa",
        backend_id,
        seeds={"run": config.seed},
        request_digests=result.request_digests,
        extra={"metric": args.metric, "avg": result.avg_ratio, "n_samples": len(testset)},
    )
    return EXIT_OK, {"metric": args.metric, "avg": result.avg_ratio}


# --- eval-pope -------------------------------------------------------------------


def cmd_eval_pope(config: RunConfig, args: argparse.Namespace) -> tuple[int, dict]:
    gateway = make_gateway(config)
    cache = _open_cache(config)
    backend_id = config.backend(args.backend).backend_id
    ann = pope.ObjectAnnotations.load(args.annotations)
    metrics, rows, digests = pope.run_pope_eval(
        gateway,
        backend_id,
        ann,
        setting=args.setting,
        k_pos=args.k_pos,
        k_neg=args.k_neg,
        seed=config.seed,
        cache=cache,
        concurrency=config.concurrency,
    )
    write_jsonl_atomic(os.path.join(config.out_dir, "pope_items.jsonl"), rows)
    n_unparsed = sum(1 for r in rows if not r["parsed"])
    summary = {
        "setting": args.setting,
        "k_pos": args.k_pos,
        "k_neg": args.k_neg,
        "n_items": len(rows),
        "n_unparsed": n_unparsed,
        "metrics": pope.metrics_to_dict(metrics),
        "config_digest": config_digest(config),
        "seeds": {"run": config.seed},
    }
    atomic_write_text(os.path.join(config.out_dir, "pope_summary.json"), pretty_json(summary))
    _write_manifest(
        config,
        "eval-pope",
        backend_id,
        seeds={"run": config.seed},
        request_digests=digests,
        extra={
            "setting": args.setting,
            "metrics": pope.metrics_to_dict(metrics),
            "n_items": len(rows),
            "n_unparsed": n_unparsed,
        },
    )
    return EXIT_OK, {"setting": args.setting, "metrics": pope.metrics_to_dict(metrics)}


# --- export / stats ---------------------------------------------------------------


def cmd_export(config: RunConfig, args: argparse.Namespace) -> tuple[int, dict]:
    dataset = datagen.load_instruction_jsonl(args.dataset)
    samples = list(dataset.samples)
    if args.split != "all":
        samples = [s for s in samples if s.split == args.split]
    if args.augment:
        augmented = []
        for sample in samples:
            item_seed = int(sha256_hex(f"{config.seed}:{sample.id}")[:16], 16)
            conv = datagen.augment_question_list_position(sample.conversation, item_seed)
            augmented.append(replace(sample, conversation=conv))
        samples = augmented
    out_path = args.output or os.path.join(config.out_dir, "export.jsonl")
    dataset = datagen.Dataset(samples=tuple(samples))
    count = datagen.export_instruction_jsonl(dataset, out_path)
    _write_manifest(
        config,
        "export",
        config.default_backend,
        seeds={"run": config.seed, "augment": config.seed if args.augment else None},
        request_digests=[],
        extra={"n_samples": count, "split": args.split, "augment": bool(args.augment)},
    )
    return EXIT_OK, {"exported": count}


def cmd_stats(config: RunConfig, args: argparse.Namespace) -> tuple[int, dict]:
    dataset = datagen.load_instruction_jsonl(args.dataset)
    stats = datagen.dataset_stats(dataset)
    atomic_write_text(os.path.join(config.out_dir, "stats.json"), pretty_json(stats))
    return EXIT_OK, stats


# --- mock-serve -------------------------------------------------------------------


def cmd_mock_serve(args: argparse.Namespace) -> tuple[int, dict]:
    backend = MockBackend.load(args.script)
    if args.default_reply is not None:
        backend.default_reply = args.default_reply
    try:
        server = MockServer(backend, host=args.host, port=args.port)
    except OSError as exc:
        print(f"cannot bind port {args.port}: {exc}", file=sys.stderr)
        return EXIT_FATAL, {"error": str(exc)}
    server.start()
    print(f"serving scripted backend on {server.endpoint} (ctrl-c to stop)")
    try:
        server._thread.join()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK, {}


# --- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfask",
        description="Self-questioning pipelines, dataset generation and hallucination evals",
    )
    parser.add_argument("--config", help="path to the JSON run config")
    parser.add_argument("--backend", help="backend name (default from config)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--cache", help="response cache path")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--concurrency", type=int, help="max concurrent items")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate instruction data from a corpus manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-count", type=int, default=None)
    p.add_argument("--test-count", type=int, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--max-attempts", type=int, default=3)

    p = sub.add_parser("infer", help="run 1-turn or staged inference")
    p.add_argument("--testset")
    p.add_argument("--image")
    p.add_argument("--id")
    p.add_argument("--question", default=DEFAULT_MAIN_QUESTION)
    p.add_argument("--mode", choices=["1turn", "3turn"], default="3turn")
    p.add_argument(
        "--final-stage",
        choices=["main_question", "describe_summarize"],
        default="main_question",
    )
    p.add_argument("--min-questions", type=int, default=6)
    p.add_argument("--max-questions", type=int, default=8)
    p.add_argument("--reattach-image", action="store_true")

    p = sub.add_parser("eval-capqa", help="judge-based hallucination / question-quality eval")
    p.add_argument("--testset", required=True)
    p.add_argument("--outputs", required=True)
    p.add_argument("--metric", choices=["hals", "qqs"], required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--invert-hallucination-scale", action="store_true")

    p = sub.add_parser("eval-pope", help="object-existence probing eval")
    p.add_argument("--annotations", required=True)
    p.add_argument("--setting", choices=list(pope.SETTINGS), required=True)
    p.add_argument("--k-pos", type=int, default=3)
    p.add_argument("--k-neg", type=int, default=3)

    p = sub.add_parser("export", help="filter/augment a dataset and re-export it")
    p.add_argument("--dataset", required=True)
    p.add_argument("--output")
    p.add_argument("--split", choices=["train", "test", "all"], default="all")
    p.add_argument("--augment", action="store_true")

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("mock-serve", help="serve a scripted backend over HTTP")
    p.add_argument("--script", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8091)
    p.add_argument("--default-reply")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "mock-serve":
        code, info = cmd_mock_serve(args)
        return code

    if not args.config:
        print("--config is required for this command", file=sys.stderr)
        return EXIT_FATAL
    try:
        config = load_config(
            args.config,
            backend=args.backend,
            seed=args.seed,
            cache=args.cache,
            out=args.out,
            concurrency=args.concurrency,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_FATAL

    os.makedirs(config.out_dir, exist_ok=True)
    handlers = {
        "generate": cmd_generate,
        "infer": cmd_infer,
        "eval-capqa": cmd_eval_capqa,
        "eval-pope": cmd_eval_pope,
        "export": cmd_export,
        "stats": cmd_stats,
    }
    try:
        code, info = handlers[args.command](config, args)
    except (ConfigError, judge.CoverageError, datagen.InfeasibleSplit) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (TransportError, AuthError, ProtocolError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(json.dumps(info, ensure_ascii=False, sort_keys=True))
    return code


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
