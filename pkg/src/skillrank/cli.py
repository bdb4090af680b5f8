"""skillrank command-line interface."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench as bench_mod
from . import corpus as corpus_mod
from . import dense as dense_mod
from . import lexical as lexical_mod
from . import metrics as metrics_mod
from . import quant as quant_mod
from .corpus import FieldVariant, Query
from .ranker import Reranker, RerankConfig
from .tokenizer import WordTokenizer

log = logging.getLogger(__name__)


def _add_ingest(sub):
    p = sub.add_parser("ingest", help="load a course file, optionally print length stats")
    p.add_argument("--courses", required=True)
    p.add_argument("--stats", action="store_true")
    p.add_argument("--limit", type=int, default=512)
    p.set_defaults(func=cmd_ingest)


def cmd_ingest(args):
    docs = corpus_mod.ingest_courses(args.courses)
    print(f"{len(docs)} courses loaded from {args.courses}")
    if args.stats:
        tokenizer = WordTokenizer(vocab_size=2)
        stats = corpus_mod.corpus_stats(docs, tokenizer.tokenize, limit=args.limit)
        print(f"over {args.limit}-token limit: {stats.over_limit_fraction:.1%}")
        for provider, counts in sorted(stats.histogram.items()):
            total = sum(counts)
            print(f"  {provider}: {total} docs, length buckets (x{stats.bucket_width}): {counts}")


def _add_index(sub):
    p = sub.add_parser("index", help="build and persist a BM25 index")
    p.add_argument("--courses", required=True)
    p.add_argument("--variant", default="original")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)


def cmd_index(args):
    docs = corpus_mod.ingest_courses(args.courses)
    index = lexical_mod.index_corpus(docs, FieldVariant.parse(args.variant))
    lexical_mod.save_index(index, args.out)
    print(f"indexed {index.doc_count} docs -> {args.out}")


def _add_search(sub):
    p = sub.add_parser("search", help="BM25 search")
    p.add_argument("--index", required=True)
    p.add_argument("--skill", required=True)
    p.add_argument("--occupation", required=True)
    p.add_argument("-k", type=int, default=20)
    p.set_defaults(func=cmd_search)


def cmd_search(args):
    index = lexical_mod.load_index(args.index)
    q = Query(id="cli", skill=args.skill, occupation=args.occupation)
    results = lexical_mod.search(index, q, args.k)
    for rank, (doc_id, score) in enumerate(results.entries, start=1):
        print(f"{rank}\t{doc_id}\t{score:.4f}")


def _add_pool(sub):
    p = sub.add_parser("pool", help="interleave dense and lexical candidates")
    p.add_argument("--dense", required=True, help="doc embeddings file")
    p.add_argument("--query-vec", required=True, help="query embeddings file")
    p.add_argument("--query-id", required=True)
    p.add_argument("--lexical-index", required=True)
    p.add_argument("--skill", required=True)
    p.add_argument("--occupation", required=True)
    p.add_argument("--depth", type=int, default=25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pool)


def cmd_pool(args):
    store = dense_mod.load_embeddings(args.dense)
    queries = dense_mod.load_embeddings(args.query_vec)
    index = lexical_mod.load_index(args.lexical_index)
    q = Query(id=args.query_id, skill=args.skill, occupation=args.occupation)
    dense_list = dense_mod.cosine_topk(store, queries.vector(args.query_id), args.depth, query_id=q.id)
    lexical_list = lexical_mod.search(index, q, args.depth)
    pool = dense_mod.interleave_pools(dense_list, lexical_list, args.depth)
    Path(args.out).write_text("\n".join(pool) + "\n", encoding="utf-8")
    print(f"pool of {len(pool)} docs -> {args.out}")


def _add_quantize(sub):
    p = sub.add_parser("quantize", help="quantize an FP32 weight archive")
    p.add_argument("--weights", required=True)
    p.add_argument("--scheme", choices=["dynamic", "static", "smoothquant"], required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--calib", help="text file of calibration inputs, one per line")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)


def cmd_quantize(args):
    from .encoder import TokenBatch

    model = quant_mod.load_quantized_model(args.weights)
    config = quant_mod.QuantConfig(scheme=args.scheme, alpha=args.alpha)
    stats = None
    if args.scheme in ("static", "smoothquant"):
        if not args.calib:
            sys.exit("static/smoothquant quantization requires --calib")
        tokenizer = _tokenizer_for(model, args.vocab)
        lines = [l for l in Path(args.calib).read_text(encoding="utf-8").splitlines() if l.strip()]
        batches = [TokenBatch.from_sequences([tokenizer.encode(l)[: model.config.max_input_len]]) for l in lines]
        stats = quant_mod.calibrate(model, batches, config)
    quantized = quant_mod.apply_quantization(model, config, stats)
    quant_mod.save_model(quantized, args.out)
    before = quant_mod.model_size_bytes(model)
    after = quant_mod.model_size_bytes(quantized)
    print(f"{args.scheme}: {before / 1e6:.1f} MB -> {after / 1e6:.1f} MB ({before / after:.2f}x)")


def _tokenizer_for(model, vocab_path):
    if vocab_path:
        return WordTokenizer.from_vocab_file(vocab_path, model.config.vocab_size)
    return WordTokenizer(model.config.vocab_size)


def _add_rerank(sub):
    p = sub.add_parser("rerank", help="re-rank a run file with the encoder")
    p.add_argument("--weights", required=True)
    p.add_argument("--scheme", choices=["none", "dynamic", "static", "smoothquant"], default="none")
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--max-len", type=int, choices=[128, 256, 512], default=256)
    p.add_argument("--variant", default="original")
    p.add_argument("--courses", required=True)
    p.add_argument("--queries", required=True, help="TSV: qid<TAB>skill<TAB>occupation[<TAB>description]")
    p.add_argument("--vocab")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank)


def cmd_rerank(args):
    from .service import load_queries_tsv

    model = quant_mod.load_quantized_model(args.weights)
    if model.scheme == "none" and args.scheme != "none":
        model = quant_mod.apply_quantization(model, quant_mod.QuantConfig(scheme=args.scheme))
    reranker = Reranker(model, _tokenizer_for(model, args.vocab))
    docs = {d.id: d for d in corpus_mod.ingest_courses(args.courses)}
    queries = {q.id: q for q in load_queries_tsv(args.queries)}
    run = metrics_mod.load_run(args.run, stage="lexical")
    cfg = RerankConfig(depth=args.depth, max_input_len=args.max_len, variant=FieldVariant.parse(args.variant))
    out = {}
    for qid, scored in run.items():
        if qid not in queries:
            log.warning("query %s not in %s, passed through", qid, args.queries)
            out[qid] = scored
            continue
        out[qid] = reranker.rerank(queries[qid], scored, docs, cfg)
    metrics_mod.save_run(out, args.out, tag=f"rankt5-{args.scheme}")
    print(f"re-ranked {len(out)} queries -> {args.out}")


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="ndcg@10,mrr@10,map@10,recall@20")
    p.add_argument("--compare", help="second run for a paired t-test")
    p.add_argument("--ttest", action="store_true")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--comparisons", type=int, default=1, help="Bonferroni m")
    p.set_defaults(func=cmd_evaluate)


def cmd_evaluate(args):
    qrels = metrics_mod.load_qrels(args.qrels)
    run = metrics_mod.load_run(args.run)
    specs = tuple(s.strip() for s in args.metrics.split(",") if s.strip())
    report = metrics_mod.evaluate_run(run, qrels, specs)
    print(report.format_table())
    if args.compare:
        other = metrics_mod.evaluate_run(metrics_mod.load_run(args.compare), qrels, specs)
        print(f"\nvs {args.compare}:")
        for spec in specs:
            delta = report.mean[spec] - other.mean[spec]
            line = f"  {spec}: {report.mean[spec]:.4f} vs {other.mean[spec]:.4f} (delta {delta:+.4f})"
            if args.ttest:
                qids = sorted(qrels.queries())
                result = metrics_mod.paired_ttest(
                    [report.per_query[spec][q] for q in qids],
                    [other.per_query[spec][q] for q in qids],
                    alpha=args.alpha,
                    m=args.comparisons,
                )
                marker = "*" if result.significant else ""
                line += f" t={result.t:.3f} p={result.p:.4f}{marker}"
            print(line)


def _add_bench(sub):
    p = sub.add_parser("bench", help="throughput / model-size benchmark")
    p.add_argument("--weights", required=True)
    p.add_argument("--scheme", choices=["none", "dynamic", "static", "smoothquant"], action="append", required=True)
    p.add_argument("--len", type=int, choices=[256, 512], default=256, dest="input_len")
    p.add_argument("--reps", type=int, default=8)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--measured", type=int, default=200)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--pairs", required=True, help="text file: one 'query<TAB>document' per line")
    p.add_argument("--vocab")
    p.add_argument("--calib", help="calibration inputs for static/smoothquant")
    p.set_defaults(func=cmd_bench)


def cmd_bench(args):
    from .encoder import TokenBatch

    base = quant_mod.load_quantized_model(args.weights)
    tokenizer = _tokenizer_for(base, args.vocab)
    lines = [l for l in Path(args.pairs).read_text(encoding="utf-8").splitlines() if l.strip()]
    pairs = []
    for line in lines:
        query_text, _, doc_text = line.partition("\t")
        pairs.append(f"Query: {query_text} Document: {doc_text}")
    protocol = bench_mod.BenchProtocol(
        warmup_queries=args.warmup, measured_pairs=args.measured,
        batch_size=args.batch, repetitions=args.reps,
        input_len=args.input_len, threads=args.threads,
    )
    stats = None
    if any(s in ("static", "smoothquant") for s in args.scheme):
        calib_lines = lines[: quant_mod.QuantConfig().calibration_size]
        if args.calib:
            calib_lines = [l for l in Path(args.calib).read_text(encoding="utf-8").splitlines() if l.strip()]
        batches = [TokenBatch.from_sequences([tokenizer.encode(l)[: args.input_len]]) for l in calib_lines]
        stats = quant_mod.calibrate(base, batches)
    results: dict[str, dict[int, bench_mod.BenchResult]] = {}
    for scheme in args.scheme:
        model = base if scheme == "none" else quant_mod.apply_quantization(
            base, quant_mod.QuantConfig(scheme=scheme), stats
        )
        reranker = Reranker(model, tokenizer)
        scorer = lambda batch, r=reranker: r.score_texts(batch, protocol.input_len)
        result = bench_mod.measure_throughput(
            scorer, pairs, protocol, model_size=quant_mod.model_size_bytes(model)
        )
        results[scheme] = {protocol.input_len: result}
        print(f"{scheme}: {result.throughput_mean:.3f} pairs/s (±{result.throughput_std:.3f})")
    print()
    print(bench_mod.bench_report(results))


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the recommendation service")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_serve)


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.config), host=args.host, port=args.port)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="skillrank")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_ingest, _add_index, _add_search, _add_pool, _add_quantize,
                _add_rerank, _add_evaluate, _add_bench, _add_serve):
        add(sub)
    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
