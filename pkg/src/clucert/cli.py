"""Command-line interface.

Runs in-process by default; with ``--server URL`` the certify, predict and
perturb verbs are forwarded to a running ``clucert serve`` instance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import httpx

from .evaluation import (
    RunSummary,
    emit_reports,
    load_dataset,
    read_results,
    result_line,
    run_certification,
    summarize,
)
from .model_client import get_task
from .perturbation import sample_batch, to_sentence
from .refine import refine, score_importance
from .settings import Settings, build_pipeline, load_settings
from .smoothing import CertificationResult, predict

log = logging.getLogger("clucert")

# flag dest -> Settings field
_SETTING_FLAGS = {
    "task": "task", "mask_rate": "mask_rate", "samples_n": "samples_n",
    "samples_n_prime": "samples_n_prime", "alpha": "alpha", "gamma": "gamma",
    "cluster_eps": "cluster_eps", "cluster_min_samples": "cluster_min_samples", "tau": "tau",
    "refine_length": "refine_length", "scorer": "scorer", "seed": "seed", "endpoint": "endpoint",
    "model": "model", "classifier": "classifier", "lexicon": "lexicon", "embedder": "embedder",
    "cache": "cache", "workers": "workers", "query_workers": "query_workers",
}


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML settings file")
    p.add_argument("--task", choices=["sentiment2", "topic4", "math_numeric"])
    p.add_argument("--mask-rate", type=float)
    p.add_argument("--samples-n", type=int, help="samples for the predict round")
    p.add_argument("--samples-n-prime", type=int, help="samples for the certify round")
    p.add_argument("--alpha", type=float, help="significance level (default 0.05)")
    p.add_argument("--gamma", help="fixed:<v> or estimate")
    p.add_argument("--no-cluster", action="store_true", help="disable cluster denoising")
    p.add_argument("--cluster-eps", type=float)
    p.add_argument("--cluster-min-samples", type=int)
    p.add_argument("--tau", type=float, help="candidate similarity threshold")
    p.add_argument("--refine-length", type=int)
    p.add_argument("--scorer", choices=["offline", "llm"])
    p.add_argument("--seed", type=int)
    p.add_argument("--endpoint", help="chat endpoint base URL")
    p.add_argument("--model", help="chat model name")
    p.add_argument("--classifier", help="llm | constant:L | keyword:HIT:MISS:w1,w2 | position:I:V:HIT:MISS | hash")
    p.add_argument("--lexicon", help="lexicon JSON (default: bundled sample)")
    p.add_argument("--fold-case", action="store_true", help="lowercase lexicon and lookups")
    p.add_argument("--embedder", help="'hashing' or an embedding endpoint URL")
    p.add_argument("--cache", help="response cache JSONL path")
    p.add_argument("--workers", type=int, help="records certified in parallel")
    p.add_argument("--query-workers", type=int, help="concurrent classifier queries per round")
    p.add_argument("--bonferroni", action="store_true", help="split alpha across classes")
    p.add_argument("--server", help="forward to a running clucert service at this URL")


def _settings(args: argparse.Namespace) -> Settings:
    overrides: dict[str, Any] = {
        field: getattr(args, dest) for dest, field in _SETTING_FLAGS.items() if getattr(args, dest, None) is not None
    }
    if getattr(args, "no_cluster", False):
        overrides["cluster"] = False
    if getattr(args, "fold_case", False):
        overrides["fold_case"] = True
    if getattr(args, "bonferroni", False):
        overrides["bonferroni"] = True
    return load_settings(getattr(args, "config", None), overrides)


def _remote_params(settings: Settings) -> dict:
    keys = [
        "mask_rate", "samples_n", "samples_n_prime", "alpha", "gamma", "cluster", "cluster_eps",
        "cluster_min_samples", "tau", "refine_length", "seed", "bonferroni",
    ]
    return {k: getattr(settings, k) for k in keys}


def _input_tokens(args: argparse.Namespace) -> tuple[str, ...]:
    return to_sentence(args.text)


# -- verbs ------------------------------------------------------------------


def cmd_certify(args: argparse.Namespace) -> int:
    settings = _settings(args)
    task = get_task(settings.task)
    records = load_dataset(args.dataset, task, sample_n=args.sample_n, seed=settings.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.server:
        results, summary = _certify_remote(args.server, records, settings, args.poll)
    else:
        pipeline = build_pipeline(settings)
        with open(out / "results.jsonl", "w", encoding="utf-8") as sink:
            def stream(res: CertificationResult) -> None:
                sink.write(result_line(res) + "\n")
                sink.flush()
                log.info("%s: %s radius=%s", res.input_id, res.predicted_label, res.radius)

            results, summary = run_certification(records, pipeline, workers=settings.workers, sink=stream)
    emit_reports(results, summary, out)
    print(json.dumps({k: v for k, v in asdict(summary).items() if k != "cert_acc_correct_curve"}, indent=2))
    return 1 if summary.n_failed else 0


def _certify_remote(server: str, records, settings: Settings, poll: float):
    payload = {
        "records": [asdict(r) for r in records],
        "task": settings.task,
        "classifier": settings.classifier,
        "params": _remote_params(settings),
        "workers": settings.workers,
    }
    with httpx.Client(base_url=server, timeout=60.0) as client:
        resp = client.post("/v1/jobs", json=payload)
        resp.raise_for_status()
        job = resp.json()
        while job["status"] in ("queued", "running"):
            time.sleep(poll)
            job = client.get(f"/v1/jobs/{job['id']}").json()
            log.info("job %s: %d/%d", job["id"], job["done"], job["total"])
        if job["status"] != "done":
            raise RuntimeError(f"job failed: {job.get('error')}")
        rows = client.get(f"/v1/jobs/{job['id']}/results").json()
    results = [CertificationResult.from_record(r) for r in rows]
    summary = RunSummary(**job["summary"])
    return results, summary


def cmd_predict(args: argparse.Namespace) -> int:
    settings = _settings(args)
    if args.dataset:
        records = [(r.id, r.text) for r in load_dataset(args.dataset, get_task(settings.task))]
    else:
        records = [("text", args.text)]
    if args.server:
        with httpx.Client(base_url=args.server, timeout=600.0) as client:
            for rid, text in records:
                resp = client.post("/v1/predict", json={
                    "id": rid, "text": text, "task": settings.task,
                    "classifier": settings.classifier, "params": _remote_params(settings),
                })
                resp.raise_for_status()
                body = resp.json()
                print(json.dumps({"id": rid, "label": body["label"], "top_prob": body["top_prob"]}))
        return 0
    pipeline = build_pipeline(settings)
    for rid, text in records:
        tokens = to_sentence(text)
        refined = refine(tokens, score_importance(tokens, pipeline.scorer), settings.refine_length)
        label, share, votes = predict(
            refined.tokens, pipeline.model, pipeline.config, pipeline.lexicon, pipeline.embedder
        )
        print(json.dumps({"id": rid, "label": label, "top_prob": share, "votes": votes.counts}))
    return 0


def cmd_perturb(args: argparse.Namespace) -> int:
    settings = _settings(args)
    if args.server:
        with httpx.Client(base_url=args.server, timeout=600.0) as client:
            resp = client.post("/v1/perturb", json={
                "text": args.text, "n": args.n, "params": _remote_params(settings),
            })
            resp.raise_for_status()
            for s in resp.json()["samples"]:
                print(json.dumps(s, ensure_ascii=False))
        return 0
    pipeline = build_pipeline(settings.merged({"classifier": "constant:none"}))
    tokens = _input_tokens(args)
    samples = sample_batch(
        tokens, args.n, settings.mask_rate, pipeline.lexicon, pipeline.embedder, settings.tau,
        settings.seed,
    )
    for s in samples:
        print(json.dumps({
            "tokens": list(s.tokens),
            "substituted_positions": sorted(s.substituted_positions),
            "origin_seed": list(s.origin_seed),
        }, ensure_ascii=False))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    results = read_results(args.results)
    summary = summarize(results)
    emit_reports(results, summary, args.out)
    print(json.dumps(asdict(summary), indent=2))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(_settings(args), job_workers=args.job_workers), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clucert", description="Certified word-substitution robustness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="certify every record of a JSONL dataset")
    _add_pipeline_flags(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--sample-n", type=int, help="certify a seeded random subset")
    p.add_argument("--out", type=Path, default=Path("clucert-out"))
    p.add_argument("--poll", type=float, default=1.0, help="job polling interval with --server")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("predict", help="smoothed prediction without certification")
    _add_pipeline_flags(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--dataset", type=Path)
    group.add_argument("--text")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("perturb", help="dump perturbed samples for one input")
    _add_pipeline_flags(p)
    p.add_argument("--text", required=True)
    p.add_argument("--n", type=int, default=10)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("report", help="recompute summary files from results.jsonl")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the HTTP service")
    _add_pipeline_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--job-workers", type=int, default=1)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, httpx.HTTPError) as exc:
        print(f"clucert: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
