"""Command-line entry point: ``georank <subcommand> ...``.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on data
or runtime errors. Data goes to files (written atomically) or stdout; logs
go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from georank import evaluation as ev
from georank.geo import GpsCoordinate
from georank.index import Candidate, CandidateSet, WorldIndex, build_index, read_manifest, search_batch
from georank.io import atomic_write_text, dumps_jsonl
from georank.rerank import ClusterParams, RerankResult, refine
from georank.selftest import run_selftest
from georank import thinker

log = logging.getLogger("georank")


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    k: int = 20
    eps_km: float = 5.0
    min_pts: int = 2
    n: int = 10
    template: str | None = None
    endpoint: str | None = None
    mock: str | None = None
    thresholds: list | None = None
    seed: int = 0
    threads: int = 1

    def validate(self, uses_n: bool = True) -> None:
        if self.k < 1:
            raise UsageError("k must be >= 1")
        if self.n < 1:
            raise UsageError("n must be >= 1")
        if uses_n and self.n >= self.k:
            raise UsageError("n must be < k")
        if not self.eps_km > 0:
            raise UsageError("eps_km must be > 0")
        if self.min_pts < 2:
            raise UsageError("min_pts must be >= 2")
        if self.threads < 0:
            raise UsageError("threads must be >= 0")

    def threshold_set(self) -> ev.ThresholdSet:
        if not self.thresholds:
            return ev.ThresholdSet()
        try:
            return ev.ThresholdSet(tuple((str(name), float(km)) for name, km in self.thresholds))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid thresholds: {exc}") from None


def load_config(path: str | None, args: argparse.Namespace, uses_n: bool = True) -> PipelineConfig:
    values: dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        names = {f.name for f in fields(PipelineConfig)}
        unknown = set(data) - names
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        values.update(data)
    for f in fields(PipelineConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    cfg = PipelineConfig(**values)
    cfg.validate(uses_n)
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}")


def _candidate_row(c: Candidate, **extra) -> dict[str, Any]:
    return {"id": c.id, "lat": c.location.lat, "lon": c.location.lon, "score": c.score, **extra}


def _parse_candidates(rows: Sequence[dict]) -> list[Candidate]:
    return [Candidate(r["id"], GpsCoordinate(r["lat"], r["lon"]), float(r.get("score", 0.0))) for r in rows]


def _emit(out: str | None, text: str) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _load_queries(path: str) -> list[dict]:
    rows = list(read_manifest(path))
    for r in rows:
        if "id" not in r or "embedding" not in r:
            raise ValueError(f"query row missing id or embedding: {str(r)[:80]}")
    return rows


def _retrieve(args, cfg: PipelineConfig) -> tuple[list[dict], list[CandidateSet]]:
    index = WorldIndex.load(args.index)
    queries = _load_queries(args.query_manifest)
    if not queries:
        return [], []
    emb = np.array([q["embedding"] for q in queries], dtype=np.float64)
    return queries, search_batch(index, emb, cfg.k, threads=cfg.threads)


# --------------------------------------------------------------------------
# subcommands


def cmd_index(args, cfg: PipelineConfig) -> int:
    if args.index_cmd == "build":
        index = build_index(read_manifest(args.manifest), args.dim)
        index.save(args.out)
        log.info("wrote %d records (dim %d) to %s", len(index), index.dim, args.out)
        return 0
    index = WorldIndex.load(args.path)
    info = {"path": args.path, "dim": index.dim, "count": len(index), "manifest_digest": index.manifest_digest.hex()}
    if args.json:
        print(json.dumps(info, sort_keys=True))
    else:
        for key, value in info.items():
            print(f"{key:16} {value}")
    return 0


def cmd_query(args, cfg: PipelineConfig) -> int:
    queries, results = _retrieve(args, cfg)
    rows = [
        {
            "id": q["id"],
            "similar": [_candidate_row(c) for c in cs.similar],
            "dissimilar": [_candidate_row(c) for c in cs.dissimilar],
        }
        for q, cs in zip(queries, results)
    ]
    _emit(args.out, dumps_jsonl(rows))
    return 0


def refine_row(query: dict, cs: CandidateSet, result: RerankResult) -> dict[str, Any]:
    return {
        "id": query["id"],
        "image": query.get("image", query["id"]),
        "reference": {"lat": result.reference.lat, "lon": result.reference.lon},
        "used_fallback": result.used_fallback,
        "reranked": [
            _candidate_row(c, distance_km=d) for c, d in zip(result.reranked, result.reranked_distances_km)
        ],
        "dissimilar": [_candidate_row(c) for c in cs.dissimilar],
    }


def cmd_refine(args, cfg: PipelineConfig) -> int:
    params = ClusterParams(cfg.eps_km, cfg.min_pts)
    queries, results = _retrieve(args, cfg)
    rows = [refine_row(q, cs, refine(cs, params)) for q, cs in zip(queries, results)]
    _emit(args.out, dumps_jsonl(rows))
    return 0


def cmd_think(args, cfg: PipelineConfig) -> int:
    mock = cfg.mock
    if mock is None and not cfg.endpoint:
        raise UsageError("think needs --endpoint URL or --mock echo|centroid")
    if mock is not None and mock not in thinker.MOCK_CLIENTS:
        raise UsageError(f"unknown mock {mock!r}; choose from {', '.join(thinker.MOCK_CLIENTS)}")
    template = thinker.DEFAULT_TEMPLATE
    template_id = "default"
    if cfg.template:
        template = thinker.load_template(cfg.template)
        template_id = Path(cfg.template).name
    client = thinker.MOCK_CLIENTS[mock]() if mock else thinker.HttpLmmClient()
    lmm = thinker.LmmConfig(
        endpoint_url=cfg.endpoint or "",
        timeout_s=args.timeout,
        max_retries=args.max_retries,
        max_in_flight=args.max_in_flight,
    )
    refined = list(read_manifest(args.refined))
    bundles, fallbacks = [], []
    for row in refined:
        reranked = _parse_candidates(row["reranked"])
        if len(reranked) < cfg.k:
            raise ValueError(f"query {row['id']}: {len(reranked)} re-ranked candidates but k={cfg.k}")
        result = RerankResult(
            GpsCoordinate(row["reference"]["lat"], row["reference"]["lon"]),
            tuple(c.get("distance_km", 0.0) for c in row["reranked"]),
            tuple(range(len(reranked))),
            tuple(reranked),
            bool(row.get("used_fallback", False)),
        )
        bundles.append(
            thinker.build_prompt(
                row.get("image", row["id"]), result, _parse_candidates(row["dissimilar"]), cfg.n,
                template, template_id, k=cfg.k,
            )
        )
        fallbacks.append(reranked[0].location)
    replies = thinker.query_many(bundles, lmm, client)
    out_rows = []
    for row, bundle, fallback, reply in zip(refined, bundles, fallbacks, replies):
        if isinstance(reply, Exception):
            log.warning("query %s: %s; using re-ranked top-1", row["id"], reply)
            pred = thinker.Prediction(fallback, thinker.Source.FALLBACK_TOP1, "")
        else:
            pred = thinker.parse_prediction(reply, fallback)
        out_rows.append(
            {"id": row["id"], "lat": pred.location.lat, "lon": pred.location.lon, "source": pred.source.value}
        )
        if args.save_prompts:
            out_rows[-1]["prompt"] = bundle.rendered_text
    _emit(args.out, dumps_jsonl(out_rows))
    return 0


def _report_output(args, reports: list[ev.EvalReport]) -> None:
    if args.json:
        text = dumps_jsonl(row for r in reports for row in r.rows())
    else:
        text = ev.format_reports(reports) + "\n"
    _emit(getattr(args, "out", None), text)


def cmd_eval(args, cfg: PipelineConfig) -> int:
    preds = {r["id"]: GpsCoordinate(r["lat"], r["lon"]) for r in read_manifest(args.pred)}
    truths = {r["id"]: GpsCoordinate(r["lat"], r["lon"]) for r in read_manifest(args.truth)}
    missing = [qid for qid in truths if qid not in preds]
    if missing:
        raise ValueError(f"{len(missing)} truth id(s) have no prediction, e.g. {missing[0]}")
    ids = list(truths)
    report = ev.accuracy_at_thresholds([preds[i] for i in ids], [truths[i] for i in ids], cfg.threshold_set(), args.variant)
    _report_output(args, [report])
    return 0


def cmd_synth(args, cfg: PipelineConfig) -> int:
    data: dict[str, Any] = {}
    if args.synth_config:
        data = json.loads(Path(args.synth_config).read_text(encoding="utf-8"))
    for name in ("n_records", "n_queries", "dim", "noise_sigma", "outlier_rate", "seed"):
        value = getattr(args, f"synth_{name}")
        if value is not None:
            data[name] = value
    try:
        config = ev.SynthConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    files = ev.write_world(ev.generate_synthetic_world(config), args.out_dir)
    log.info("wrote synthetic world to %s", args.out_dir)
    meta = json.loads(files["world.json"])
    print(json.dumps({"out_dir": args.out_dir, "n_planted_outliers": meta["n_planted_outliers"], **meta["digests"]}, sort_keys=True))
    return 0


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    world = ev.load_world(args.world)
    index = world.build_index()
    kw = dict(min_pts=cfg.min_pts, thresholds=cfg.threshold_set(), threads=cfg.threads)
    if args.sweep == "eps":
        reports = ev.eps_sweep(index, world.queries, k=cfg.k, **kw)
    elif args.sweep == "n":
        reports = ev.n_sweep(index, world.queries, eps_km=cfg.eps_km, **kw)
    else:
        try:
            variants = [ev.parse_variant(v) for v in (args.variants or ["top1", f"rerank({cfg.eps_km:g})"])]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        reports = ev.run_ablation(index, world.queries, variants, k=cfg.k, **kw)
    _report_output(args, reports)
    return 0


def cmd_selftest(args, cfg: PipelineConfig) -> int:
    checks = run_selftest(seed=cfg.seed, quick=args.quick)
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 2


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="georank", description="Geo-localization retrieval, re-ranking and evaluation.")
    p.add_argument("--config", dest="pipeline_config", help="JSON file with pipeline parameters")
    p.add_argument("--threads", type=int, help="search worker threads (0 = auto)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    idx = sub.add_parser("index", help="build or inspect a world index")
    isub = idx.add_subparsers(dest="index_cmd", required=True, parser_class=_Parser)
    b = isub.add_parser("build")
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--dim", type=int, required=True)
    info = isub.add_parser("info")
    info.add_argument("path")
    info.add_argument("--json", action="store_true")

    def retrieval(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--index", required=True)
        sp.add_argument("--query-manifest", required=True)
        sp.add_argument("--k", type=int)
        sp.add_argument("--out")

    q = sub.add_parser("query", help="top-k similar and dissimilar retrieval")
    retrieval(q)

    r = sub.add_parser("refine", help="retrieval followed by cluster re-ranking")
    retrieval(r)
    r.add_argument("--eps-km", dest="eps_km", type=float)
    r.add_argument("--min-pts", dest="min_pts", type=int)

    t = sub.add_parser("think", help="LMM arbitration over refined candidates")
    t.add_argument("--refined", required=True)
    t.add_argument("--n", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--dataset", choices=sorted(thinker.DATASET_N), help="use the dataset's default n")
    t.add_argument("--template")
    t.add_argument("--endpoint")
    t.add_argument("--mock", choices=sorted(thinker.MOCK_CLIENTS))
    t.add_argument("--timeout", type=float, default=30.0)
    t.add_argument("--max-retries", type=int, default=2)
    t.add_argument("--max-in-flight", type=int, default=4)
    t.add_argument("--save-prompts", action="store_true")
    t.add_argument("--out")

    e = sub.add_parser("eval", help="threshold accuracy of predictions")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--variant", default="")
    e.add_argument("--json", action="store_true")
    e.add_argument("--out")

    s = sub.add_parser("synth", help="generate a synthetic world")
    s.add_argument("--config", dest="synth_config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", dest="synth_seed", type=int)
    s.add_argument("--n-records", dest="synth_n_records", type=int)
    s.add_argument("--n-queries", dest="synth_n_queries", type=int)
    s.add_argument("--dim", dest="synth_dim", type=int)
    s.add_argument("--noise-sigma", dest="synth_noise_sigma", type=float)
    s.add_argument("--outlier-rate", dest="synth_outlier_rate", type=float)

    a = sub.add_parser("ablate", help="compare pipeline variants on a synthetic world")
    a.add_argument("--world", required=True)
    a.add_argument("--variants", nargs="+", help="e.g. top1 'rerank(5)' 'rerank(5)+echo(10)'")
    a.add_argument("--sweep", choices=["eps", "n"])
    a.add_argument("--k", type=int)
    a.add_argument("--eps-km", dest="eps_km", type=float)
    a.add_argument("--min-pts", dest="min_pts", type=int)
    a.add_argument("--json", action="store_true")
    a.add_argument("--out")

    st = sub.add_parser("selftest", help="run the numerical self-checks")
    st.add_argument("--quick", action="store_true")
    return p


COMMANDS = {
    "index": cmd_index,
    "query": cmd_query,
    "refine": cmd_refine,
    "think": cmd_think,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def execute(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if getattr(args, "dataset", None) and args.n is None:
            args.n = thinker.DATASET_N[args.dataset]
        cfg = load_config(args.pipeline_config, args, uses_n=args.command == "think")
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, thinker.LmmError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(execute())


if __name__ == "__main__":
    main()
