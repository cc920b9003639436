"""Command-line entry point.

Exit codes: 0 success, 2 configuration error (including usage errors),
3 data error, 4 backend or checkpoint error. Failures print a one-line JSON
summary to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .aesthetic import train_aesthetic
from .benchmark import (BenchmarkReport, BenchmarkScorers, MethodOutputs, ablation_report,
                        emit_report, load_benchmark_spec, make_extractor, read_details,
                        render_ablation_markdown, run_benchmark, write_details)
from .data import (ScoreRecord, atomic_write_text, load_manifest, load_rated_corpus,
                   load_style_corpus, read_jsonl, write_jsonl)
from .errors import ConfigError, DataError, StyleFilterError
from .filtering import filter_dataset, score_manifest
from .style import StyleEncoderCheckpoint, retrieval_eval, train_style_encoder

log = logging.getLogger("stylefilter")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command}: --out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output folder {out}: {exc}") from exc
    return out


def write_run_record(out: Path, args, cfg: dict, outputs: list[Path], inputs=(),
                     service=None, extra: dict | None = None) -> None:
    """Reproducibility record: effective config, its hash, seed, backends, file hashes."""
    rec = {
        "command": args.command,
        "config": cfg,
        "config_hash": C.config_hash(cfg),
        "seed": cfg["seed"],
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
    }
    if service is not None:
        rec["backend_ids"] = service.registry.ids()
        rec["backend_calls"] = dict(sorted(service.computed.items()))
        if service.cache is not None:
            rec["cache"] = dict(sorted(service.cache.stats.items()))
    rec.update(extra or {})
    atomic_write_text(out / "run.json", json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")


def _effective_config(args) -> dict:
    overrides = {
        "seed": args.seed,
        "jobs": args.jobs,
        "cache_dir": args.cache_dir,
        "log_level": args.log_level,
        "content.alpha": args.alpha,
        "filter.weights": C.parse_weights(args.weights) if args.weights else None,
    }
    for flag, key in (("style_checkpoint", "style.checkpoint"),
                      ("aesthetic_checkpoint", "aesthetic.checkpoint"),
                      ("epochs", "style.epochs")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if args.command == "train-aesthetic":
        overrides["aesthetic.epochs_stage1"] = args.epochs_stage1
        overrides["aesthetic.epochs_stage2"] = args.epochs_stage2
    return C.load_config(args.config, overrides)


# -- subcommands ------------------------------------------------------------------

def cmd_score(args, cfg) -> int:
    out = _out_dir(args)
    service = C.build_service(cfg)
    scorers = C.build_scorers(cfg, service)
    m = load_manifest(args.manifest)
    chash = C.config_hash(cfg)
    records = score_manifest(m, scorers, C.filter_config(cfg), cfg["jobs"], chash)
    scores = out / "scores.jsonl"
    write_jsonl(scores, [r.to_dict() for r in records])
    write_run_record(out, args, cfg, [scores], [args.manifest], service)
    print(f"scored {len(records)} triplets -> {scores}")
    return 0


def cmd_filter(args, cfg) -> int:
    out = _out_dir(args)
    service = C.build_service(cfg)
    scorers = C.build_scorers(cfg, service)
    m = load_manifest(args.manifest)
    filtered, records = filter_dataset(m, scorers, C.filter_config(cfg, resume=args.resume),
                                       out_dir=out, jobs=cfg["jobs"],
                                       config_hash=C.config_hash(cfg))
    outputs = [out / "filtered_manifest.jsonl", out / "scores.jsonl"]
    write_run_record(out, args, cfg, outputs, [args.manifest], service)
    print(f"kept {len(filtered)} of {len(m)} triplets -> {outputs[0]}")
    return 0


def cmd_train_style(args, cfg) -> int:
    from .plotting import plot_training_curve

    out = _out_dir(args)
    corpus = load_style_corpus(args.corpus)
    service = C.build_service(cfg)
    ckpt = train_style_encoder(corpus, C.contrastive_config(cfg), service)
    path = out / "style_encoder.ckpt"
    ckpt.save(path)
    fig = plot_training_curve({"contrastive loss": ckpt.train_metrics}, out / "style_training.png")
    write_run_record(out, args, cfg, [path], [], service,
                     {"backend_id": ckpt.backend_id, "train_metrics": ckpt.train_metrics,
                      "figures": [fig.name]})
    last = ckpt.train_metrics[-1][1] if ckpt.train_metrics else float("nan")
    print(f"style encoder {ckpt.backend_id} final loss {last:.4f} -> {path}")
    return 0


def cmd_train_aesthetic(args, cfg) -> int:
    from .plotting import plot_training_curve

    out = _out_dir(args)
    stage1 = load_rated_corpus(args.stage1)
    stage2 = load_rated_corpus(args.stage2) if args.stage2 else []
    service = C.build_service(cfg)
    ckpt = train_aesthetic(stage1, stage2, C.aesthetic_config(cfg), service)
    path = out / "aesthetic.ckpt"
    ckpt.save(path)
    fig = plot_training_curve(ckpt.stage_metrics, out / "aesthetic_training.png", ylabel="MSE")
    inputs = [args.stage1] + ([args.stage2] if args.stage2 else [])
    write_run_record(out, args, cfg, [path], inputs, service,
                     {"stage_metrics": ckpt.stage_metrics, "figures": [fig.name]})
    final = {k: v[-1][1] for k, v in ckpt.stage_metrics.items() if v}
    print("aesthetic regressor " + " ".join(f"{k} mse={v:.5f}" for k, v in final.items())
          + f" -> {path}")
    return 0


def cmd_retrieval_eval(args, cfg) -> int:
    queries = load_style_corpus(args.queries)
    keys = load_style_corpus(args.keys)
    service = C.build_service(cfg)
    ckpt = C.style_checkpoint(cfg)
    results = {ckpt.backend_id: retrieval_eval(queries, keys, ckpt, service)}
    if args.compare_base and ckpt.head is not None:
        base = StyleEncoderCheckpoint.identity(ckpt.config.base_backend)
        results[base.backend_id] = retrieval_eval(queries, keys, base, service)
    for name, (r1, r5, r10) in results.items():
        print(f"{name}: Rank1={r1:.3f} Rank5={r5:.3f} Rank10={r10:.3f}")
    if args.out:
        from .plotting import plot_retrieval

        out = _out_dir(args)
        path = out / "retrieval.json"
        atomic_write_text(path, json.dumps(
            {k: dict(zip(("rank1", "rank5", "rank10"), v)) for k, v in results.items()},
            indent=2, sort_keys=True) + "\n")
        fig = plot_retrieval(results, out / "retrieval.png")
        write_run_record(out, args, cfg, [path], [], service, {"figures": [fig.name]})
    return 0


def _method_dirs(args) -> list[Path]:
    dirs = [Path(p) for p in (args.method or [])]
    if args.methods:
        root = Path(args.methods)
        if not root.is_dir():
            raise DataError(f"methods folder not found: {root}")
        dirs += sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ConfigError("benchmark: give --methods DIR or at least one --method DIR")
    return dirs


def _emit_all(report: BenchmarkReport, out: Path, fmt: str) -> list[Path]:
    from .plotting import plot_benchmark

    paths = []
    if fmt in ("csv", "both"):
        paths.append(emit_report(report, "csv", out / "report.csv"))
    if fmt in ("markdown", "both"):
        paths.append(emit_report(report, "markdown", out / "report.md"))
    if report.rows:
        plot_benchmark(report, out / "benchmark.png")
    return paths


def cmd_benchmark(args, cfg) -> int:
    out = _out_dir(args)
    service = C.build_service(cfg)
    s = C.build_scorers(cfg, service)
    spec = load_benchmark_spec(args.spec)
    scorers = BenchmarkScorers(s.content, s.style, s.aesthetic,
                               make_extractor(cfg["benchmark"]["style_loss_extractor"]))
    methods = [MethodOutputs.from_directory(d) for d in _method_dirs(args)]
    report = run_benchmark(spec, methods, scorers, cfg["jobs"])
    report.metadata["config_hash"] = C.config_hash(cfg)
    paths = _emit_all(report, out, args.format)
    write_details(report, out / "details.csv")
    paths.append(out / "details.csv")
    missing = {r.method: [f"{c}__{s_}" for c, s_ in r.missing] for r in report.rows if r.missing}
    write_run_record(out, args, cfg, paths, [args.spec], service,
                     {"report_metadata": report.metadata, "missing": missing})
    for r in report.rows:
        flag = " (partial)" if r.partial else ""
        print(f"{r.method}{flag}: " + " ".join(f"{k}={v:.4f}" for k, v in
                                               zip(("content", "style", "aesthetic", "style_loss"),
                                                   r.metrics())))
    return 0


def cmd_report(args, cfg) -> int:
    out = _out_dir(args)
    paths = []
    if args.details:
        report = BenchmarkReport.from_details(read_details(args.details),
                                              {"config_hash": C.config_hash(cfg)})
        paths += _emit_all(report, out, args.format)
    if args.manifest:
        from .plotting import plot_ablation

        if not args.scores:
            raise ConfigError("report: ablation needs --scores next to --manifest")
        m = load_manifest(args.manifest)
        records = [ScoreRecord.from_dict(r) for r in read_jsonl(args.scores)]
        rows = ablation_report(m, records=records, cfg=C.filter_config(cfg),
                               extractor=make_extractor(cfg["benchmark"]["style_loss_extractor"]))
        path = out / "ablation.md"
        atomic_write_text(path, render_ablation_markdown(rows))
        plot_ablation(rows, out / "ablation.png")
        paths.append(path)
        print(render_ablation_markdown(rows), end="")
    if not paths:
        raise ConfigError("report: give --details and/or --manifest with --scores")
    write_run_record(out, args, cfg, paths)
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_make_toy(args, cfg) -> int:
    from . import synthetic

    out = _out_dir(args)
    seed = cfg["seed"]
    if args.kind == "manifest":
        synthetic.make_toy_manifest(out, seed=seed)
    elif args.kind == "style-corpus":
        synthetic.make_style_corpus(out / "train", seed=seed)
        synthetic.make_style_corpus(out / "heldout", n_per_style=8, seed=seed + 1)
    elif args.kind == "rated":
        synthetic.make_rated_corpus(out, seed=seed, cfg=C.aesthetic_config(cfg),
                                    service=C.build_service(cfg))
    elif args.kind == "benchmark":
        synthetic.make_toy_benchmark(out, seed=seed)
    print(f"wrote toy {args.kind} under {out}")
    return 0


COMMANDS = {
    "score": cmd_score, "filter": cmd_filter, "train-style": cmd_train_style,
    "train-aesthetic": cmd_train_aesthetic, "retrieval-eval": cmd_retrieval_eval,
    "benchmark": cmd_benchmark, "report": cmd_report, "make-toy": cmd_make_toy,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--out", help="output folder")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker threads for batch stages")
    common.add_argument("--cache-dir", help="embedding cache folder")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--alpha", type=float, help="content blend weight")
    common.add_argument("--weights", help="a,b,c weights for content,style,aesthetic")

    ckpts = argparse.ArgumentParser(add_help=False)
    ckpts.add_argument("--style-checkpoint")
    ckpts.add_argument("--aesthetic-checkpoint")

    p = argparse.ArgumentParser(prog="stylefilter",
                                description="Score, filter and benchmark style-transfer triplets.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("score", parents=[common, ckpts], help="score every triplet of a manifest")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("filter", parents=[common, ckpts], help="keep the best candidate per group")
    s.add_argument("--manifest", required=True)
    s.add_argument("--resume", action="store_true", help="continue from progress.jsonl")

    s = sub.add_parser("train-style", parents=[common], help="train the style embedding head")
    s.add_argument("--corpus", required=True, help="folder laid out as <root>/<style>/*.png")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("train-aesthetic", parents=[common], help="train the aesthetic regressor")
    s.add_argument("--stage1", required=True, help="rated CSV (natural images)")
    s.add_argument("--stage2", help="rated CSV (artistic images) for fine-tuning")
    s.add_argument("--epochs-stage1", type=int)
    s.add_argument("--epochs-stage2", type=int)

    s = sub.add_parser("retrieval-eval", parents=[common, ckpts], help="Rank@1/5/10 style retrieval")
    s.add_argument("--queries", required=True)
    s.add_argument("--keys", required=True)
    s.add_argument("--compare-base", action="store_true",
                   help="also evaluate the untrained base embedder")

    s = sub.add_parser("benchmark", parents=[common, ckpts], help="evaluate method outputs")
    s.add_argument("--spec", required=True, help="benchmark spec file")
    s.add_argument("--methods", help="folder with one sub-folder per method")
    s.add_argument("--method", action="append", help="a single method output folder")
    s.add_argument("--format", choices=["csv", "markdown", "both"], default="both")

    s = sub.add_parser("report", parents=[common], help="re-render reports and figures")
    s.add_argument("--details", help="details.csv written by `benchmark`")
    s.add_argument("--format", choices=["csv", "markdown", "both"], default="both")
    s.add_argument("--manifest", help="manifest for the component ablation")
    s.add_argument("--scores", help="scores.jsonl matching --manifest")

    s = sub.add_parser("make-toy", parents=[common], help="write synthetic demo data")
    s.add_argument("--kind", choices=["manifest", "style-corpus", "rated", "benchmark"],
                   required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _effective_config(args)
        logging.basicConfig(level=getattr(logging, cfg["log_level"], logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args, cfg)
    except StyleFilterError as exc:
        print(json.dumps(exc.summary(), sort_keys=True, default=str), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
