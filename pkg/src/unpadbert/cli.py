"""``unpadbert`` command line: one subcommand per experiment, JSON/CSV reports."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import attention, balance, embedding, fmha, fusion, kernels, lamb, pipeline, varlen
from .errors import AllGatherShapeError, BoundNotApplicableError, InvalidInputError, UnpadError
from .report import Report, data_path, emit_report, error_report

log = logging.getLogger("unpadbert")


class ConfigError(UnpadError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _lengths_arg(args, max_seq_len=None) -> varlen.SequenceLengths:
    if getattr(args, "lengths_list", None):
        return varlen.SequenceLengths.of(args.lengths_list, max_seq_len)
    if getattr(args, "lengths", None):
        return varlen.read_lengths(args.lengths, max_seq_len)
    hist = varlen.read_histogram(args.histogram or data_path("wiki_like_histogram.json"))
    return varlen.gen_lengths(hist, args.n, args.seed, max_seq_len)


# -- subcommands -------------------------------------------------------------


def cmd_gen_lengths(args) -> Report:
    hist_path = args.histogram or data_path("wiki_like_histogram.json")
    lengths = varlen.gen_lengths(varlen.read_histogram(hist_path), args.n, args.seed, args.max_seq_len)
    if args.write:
        varlen.write_lengths(args.write, lengths)
        log.info("wrote %d lengths to %s", lengths.batch_size, args.write)
    arr = np.asarray(lengths.lengths)
    counts = sorted(Counter(lengths.lengths).items())
    return Report(
        "gen-lengths",
        {"histogram": str(args.histogram or "wiki_like_histogram.json"), "n": args.n, "seed": args.seed},
        {"n": lengths.batch_size, "max_seq_len": lengths.max_seq_len, "mean": float(arr.mean()),
         "min": int(arr.min()), "max": int(arr.max()), **varlen.redundancy_ratio(lengths).as_dict()},
        {"length_counts": [[int(k), v] for k, v in counts]},
    )


def cmd_redundancy(args) -> Report:
    lengths = _lengths_arg(args, args.max_seq_len)
    red = varlen.redundancy_ratio(lengths)
    src = args.lengths or ("inline" if args.lengths_list else "generated")
    return Report(
        "redundancy",
        {"lengths": str(src), "max_seq_len": lengths.max_seq_len, "seed": args.seed},
        {"batch_size": lengths.batch_size, "max_seq_len": lengths.max_seq_len, **red.as_dict()},
    )


def _random_ragged(rng, max_batch, max_len, max_d, heads_choices):
    heads = int(rng.choice(heads_choices))
    d_model = heads * int(rng.integers(1, max_d // heads + 1))
    lengths = rng.integers(1, max_len + 1, size=int(rng.integers(1, max_batch + 1)))
    return heads, d_model, lengths


def cmd_attention_check(args) -> Report:
    rng = np.random.default_rng(args.seed)
    worst_rel, worst_perturb = 0.0, 0.0
    for _ in range(args.trials):
        heads, d, lengths = _random_ragged(rng, args.max_batch, args.max_len, args.max_d_model, args.heads)
        L = args.max_len
        mask = varlen.mask_from_lengths(lengths, L)
        q, k, v = (rng.standard_normal((len(lengths), L, d)) for _ in range(3))
        padded = attention.mha_padded(q, k, v, mask, heads)
        pos = varlen.nonzero_indices(mask)
        gathered = padded.reshape(-1, d)[pos]
        offs = varlen.compute_batch_offset(lengths)
        flat = [a.reshape(-1, d)[pos] for a in (q, k, v)]
        unpadded = attention.mha_unpadded(*flat, offs, heads)
        scale = max(float(np.abs(unpadded).max()), np.finfo(float).tiny)
        worst_rel = max(worst_rel, float(np.abs(gathered - unpadded).max()) / scale)
        noise = ~mask.astype(bool)
        q2, k2, v2 = (np.where(noise[:, :, None], 1e3 * rng.standard_normal(a.shape), a) for a in (q, k, v))
        worst_perturb = max(worst_perturb, float(np.abs(attention.mha_padded(q2, k2, v2, mask, heads) - padded).max()))
    return Report(
        "attention-check",
        {"trials": args.trials, "max_batch": args.max_batch, "max_len": args.max_len,
         "max_d_model": args.max_d_model, "heads": list(args.heads), "seed": args.seed},
        {"max_relative_error": worst_rel, "max_perturbation_change": worst_perturb,
         "passed": worst_rel <= 1e-10 and worst_perturb == 0.0},
    )


def _cost_model(args) -> fmha.FmhaCostModel:
    return fmha.FmhaCostModel(args.c_quadratic, args.c_linear, args.c_launch, args.lane_capacity, args.barrier_cost)


def cmd_schedule_fmha(args) -> Report:
    if args.lengths_list or args.lengths:
        lengths = _lengths_arg(args).lengths
    else:
        lengths = (60, 120, 200, 250, 300, 400)
    buckets = fmha.read_bucket_set(args.buckets) if args.buckets else fmha.DEFAULT_BUCKETS
    cm = _cost_model(args)
    plan = fmha.group_sequences(lengths, buckets)
    sched = fmha.build_stream_schedule(plan, args.lanes, cm)
    est = fmha.estimate_time(sched, cm)
    base = fmha.baseline_plan(lengths, buckets)
    if args.timeline_csv:
        rows = ["lane,label,bucket_lower,bucket_upper,count,start,end"]
        for r in sched.timeline():
            lo, hi = r.get("bucket", ("", ""))
            lane = "" if r["lane"] is None else r["lane"]
            rows.append(f"{lane},{r['label']},{lo},{hi},{r.get('count', '')},{r['start']!r},{r['end']!r}")
        Path(args.timeline_csv).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return Report(
        "schedule-fmha",
        {"num_sequences": len(lengths), "lanes": args.lanes,
         "buckets": [[b.lower, b.upper] for b in buckets],
         "cost_model": {"c_quadratic": cm.c_quadratic, "c_linear": cm.c_linear, "c_launch": cm.c_launch,
                        "lane_capacity": cm.lane_capacity, "barrier_cost": cm.barrier_cost}},
        {"groups": len(plan.groups), **est.as_dict(), "lane_loads": sched.lane_loads(),
         "grouped_cost": fmha.plan_cost(plan, cm), "baseline_cost": fmha.plan_cost(base, cm)},
        {"groups": [{"bucket": [b.lower, b.upper], "kernel_id": b.kernel_id, "sequences": m}
                    for b, m in plan.groups.items()],
         "timeline": sched.timeline()},
    )


def _balance_input(args) -> list[list[int]]:
    if args.input:
        doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
        unknown = set(doc) - {"num_workers", "batch_size", "lengths"}
        if unknown:
            raise InvalidInputError(f"unknown keys in balance input: {sorted(unknown)}")
        per_worker = doc["lengths"]
        if "num_workers" in doc and doc["num_workers"] != len(per_worker):
            raise InvalidInputError(f"num_workers {doc['num_workers']} but {len(per_worker)} shards given")
        if "batch_size" in doc and any(len(s) != doc["batch_size"] for s in per_worker):
            raise AllGatherShapeError(f"every shard must hold batch_size={doc['batch_size']} samples")
        return per_worker
    lengths = list(_lengths_arg(args).lengths)
    need = args.workers * args.batch_size
    if len(lengths) < need:
        raise InvalidInputError(f"{len(lengths)} lengths cannot fill {args.workers} x {args.batch_size}")
    # dataset tail that cannot fill a whole step is dropped, not padded
    return [lengths[w * args.batch_size:(w + 1) * args.batch_size] for w in range(args.workers)]


def cmd_balance(args) -> Report:
    per_worker = _balance_input(args)
    shards = balance.shards_from_lengths(per_worker)
    plan, metrics = balance.exchange_padding(shards)
    return Report(
        "balance",
        {"num_workers": len(shards), "batch_size": len(per_worker[0]), "seed": args.seed},
        metrics.as_dict(),
        plan.as_dict(),
    )


def cmd_simulate_pipeline(args) -> Report:
    scen = pipeline.Scenario.read(args.scenario or data_path("three_batch_scenario.json"))
    spec = scen.spec
    if args.sync_every_n is not None:
        spec = pipeline.StageSpec(**{**spec.as_dict(), "sync_every_n": args.sync_every_n})
    balanced = None
    if scen.samples is not None and scen.workers > 1:
        _, balanced = pipeline.balanced_steps(scen.samples)
    report, serial, over = pipeline.simulate(scen.batches, spec, scen.workers, balanced)
    metrics = report.as_dict()
    try:
        metrics["steady_state_bound"] = pipeline.plain(pipeline.steady_state_bound(scen.batches, spec, scen.workers))
    except BoundNotApplicableError as exc:
        metrics["steady_state_bound"] = None
        log.info("steady-state bound not applicable: %s", exc)
    if args.timeline_csv:
        text = "mode," + serial.to_csv().splitlines()[0] + "\n"
        for tl in (serial, over):
            text += "".join(f"{tl.mode},{row}\n" for row in tl.to_csv().splitlines()[1:])
        Path(args.timeline_csv).write_text(text, encoding="utf-8")
    return Report(
        "simulate-pipeline",
        {"scenario": str(args.scenario or "three_batch_scenario.json"), "workers": scen.workers,
         "batches": len(scen.batches), "spec": spec.as_dict()},
        metrics,
        {"serial": [e.as_dict() for e in serial.events], "overlapped": [e.as_dict() for e in over.events]},
    )


def cmd_plan_lamb(args) -> Report:
    budget = lamb.ChunkMetaBudget()
    chunk_size = args.chunk_size
    if args.input:
        doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
        unknown = set(doc) - {"tensors", "chunk_size", "budget"}
        if unknown:
            raise InvalidInputError(f"unknown keys in plan-lamb input: {sorted(unknown)}")
        tensors = lamb.descs(doc["tensors"])
        chunk_size = doc.get("chunk_size", chunk_size)
        budget = lamb.ChunkMetaBudget.from_dict(doc.get("budget", {}))
        source = str(args.input)
    else:
        tensors = lamb.load_tensor_list(data_path("bert_large_tensors.json"))
        source = "bert_large_tensors.json"
    shards = lamb.shard_tensors(tensors, args.shards)
    per_shard = []
    for i, shard in enumerate(shards):
        if not shard:
            continue
        apex = lamb.plan_apex(shard, chunk_size, budget)
        contig = lamb.plan_contiguous(sum(t.numel for t in shard), chunk_size, budget)
        per_shard.append({"shard": i, "tensors": len(shard), "numel": apex.total_numel,
                          "apex": apex.summary(), "contiguous": contig.summary()})
    apex_counts = [s["apex"]["launches"] for s in per_shard]
    contig_counts = [s["contiguous"]["launches"] for s in per_shard]
    return Report(
        "plan-lamb",
        {"tensors": source, "num_tensors": len(tensors), "chunk_size": chunk_size,
         "shards": args.shards, "budget": budget.as_dict()},
        {"apex_launches_max": max(apex_counts), "contiguous_launches_max": max(contig_counts),
         "apex_launches_total": sum(apex_counts), "contiguous_launches_total": sum(contig_counts),
         "apex_metadata_bytes": lamb.metadata_size(budget.max_tensor_num, budget.max_chunk_num, budget),
         "contiguous_max_chunk_num": lamb.contiguous_max_chunk_num(budget)},
        {"shards": per_shard},
    )


def cmd_fusion_report(args) -> Report:
    rules = fusion.ALL_RULES if args.rules is None else set(args.rules)
    g = fusion.canonical_encoder_graph(args.layers)
    counts = fusion.count_kernels(g, rules)
    rows = fusion.table_rows(g)
    return Report(
        "fusion-report",
        {"rules": [r for r in fusion.RULE_ORDER if r in rules], "layers": args.layers},
        {"overall": counts["overall"],
         "table_matches_published": all(
             ((r["forward_unfused"], r["backward_unfused"]), (r["forward_fused"], r["backward_fused"]))
             == fusion.PUBLISHED_COUNTS[r["pattern"]] for r in rows)},
        {"table": rows, "patterns": counts["patterns"]},
        table=rows,
    )


def cmd_embed_check(args) -> Report:
    rng = np.random.default_rng(args.seed)
    if args.dim % 2:
        raise InvalidInputError("embed-check needs an even dim so both lane widths apply")
    mismatches, conserved = 0, True
    for t in range(args.trials):
        ids = rng.integers(0, args.vocab, size=args.tokens)
        grads = rng.integers(-8, 9, size=(args.tokens, args.dim)).astype(np.float64)
        ref = embedding.embedding_backward_sorted(grads, ids, args.vocab)
        for width in (1, 2):
            got = embedding.embedding_backward_scatter(grads, ids, args.vocab, width, seed=args.seed + t)
            mismatches += int(not np.array_equal(got, ref))
        conserved &= bool(np.array_equal(ref.sum(axis=0), grads.sum(axis=0)))
    return Report(
        "embed-check",
        {"vocab": args.vocab, "tokens": args.tokens, "dim": args.dim, "trials": args.trials, "seed": args.seed},
        {"comparisons": 2 * args.trials, "mismatches": mismatches, "column_sums_conserved": conserved,
         "passed": mismatches == 0 and conserved},
    )


# -- parser ------------------------------------------------------------------


def _add_globals(p, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="seed for all randomness (default 0)")
    p.add_argument("--config", default=d(None), help="JSON file of option defaults for the subcommand")
    p.add_argument("--out", default=d(None), help="write the report here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default=d("json"))
    p.add_argument("--timeline-csv", default=d(None), help="also write the event timeline as CSV")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _add_lengths_source(p) -> None:
    p.add_argument("--lengths", help="lengths file (one per line, or JSON)")
    p.add_argument("--lengths-list", type=_int_list, help="inline lengths, e.g. '60,120,200'")
    p.add_argument("--histogram", help="histogram JSON used when no lengths are given")
    p.add_argument("--n", type=int, default=1000, help="number of generated lengths")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="unpadbert", description=__doc__)
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    subs = {}

    def add(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        _add_globals(p, suppress=True)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen-lengths", cmd_gen_lengths, "sample sequence lengths from a histogram")
    p.add_argument("--histogram")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--max-seq-len", type=int, default=None)
    p.add_argument("--write", help="also write the lengths to this file")

    p = add("redundancy", cmd_redundancy, "padding redundancy and theoretical unpadded speedup")
    _add_lengths_source(p)
    p.add_argument("--max-seq-len", type=int, default=None)

    p = add("attention-check", cmd_attention_check, "padded vs unpadded attention equivalence trials")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--max-batch", type=int, default=8)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--max-d-model", type=int, default=64)
    p.add_argument("--heads", type=int, nargs="+", default=[1, 2, 4])

    p = add("schedule-fmha", cmd_schedule_fmha, "bucket sequences and plan multi-lane attention kernels")
    _add_lengths_source(p)
    p.add_argument("--buckets", help="bucket-set JSON: list of {lower, upper}")
    p.add_argument("--lanes", type=int, default=4)
    p.add_argument("--c-quadratic", type=float, default=1.0)
    p.add_argument("--c-linear", type=float, default=0.0)
    p.add_argument("--c-launch", type=float, default=0.0)
    p.add_argument("--lane-capacity", type=float, default=float("inf"))
    p.add_argument("--barrier-cost", type=float, default=0.0)

    p = add("balance", cmd_balance, "padding exchange across data-parallel workers")
    p.add_argument("--input", help='JSON {"num_workers", "batch_size", "lengths": [[...], ...]}')
    _add_lengths_source(p)
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=32)

    p = add("simulate-pipeline", cmd_simulate_pipeline, "serial vs overlapped training pipeline timelines")
    p.add_argument("--scenario", help="scenario JSON (default: the committed three-batch case)")
    p.add_argument("--sync-every-n", type=int, default=None)

    p = add("plan-lamb", cmd_plan_lamb, "multi-tensor-apply launch plans for LAMB norms")
    p.add_argument("--input", help='JSON {"tensors": [numel, ...], "chunk_size", "budget"}')
    p.add_argument("--chunk-size", type=int, default=65536)
    p.add_argument("--shards", type=int, default=8, help="data-parallel optimizer shards")

    p = add("fusion-report", cmd_fusion_report, "kernel counts with and without fusion")
    p.add_argument("--rules", nargs="*", choices=fusion.RULE_ORDER, default=None,
                   help="rules to enable (default: all)")
    p.add_argument("--layers", type=int, default=1)

    p = add("embed-check", cmd_embed_check, "sorted vs scatter embedding backward equivalence")
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--trials", type=int, default=20)
    return parser, subs


def _option_dests(p: argparse.ArgumentParser) -> dict:
    return {a.dest: a for a in p._actions if a.option_strings and a.dest not in ("help", "config")}


def _apply_config(parser, subs, args) -> None:
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    actions = _option_dests(subs[args.command])
    cfg = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        act = actions[dest]
        if isinstance(value, str) and act.type is not None and act.nargs is None:
            value = act.type(value)
        if act.choices is not None:
            for v in value if isinstance(value, list) else [value]:
                if v not in act.choices:
                    raise ConfigError(f"config {key}={v!r} not in {list(act.choices)}")
        cfg[dest] = value
    globals_ = {k: cfg.pop(k) for k in list(cfg) if k in ("seed", "out", "format", "timeline_csv", "verbose")}
    parser.set_defaults(**globals_)
    subs[args.command].set_defaults(**cfg)


def run(argv=None, stdout=None) -> int:
    stdout = stdout if stdout is not None else sys.stdout.buffer
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _apply_config(parser, subs, args)
            args = parser.parse_args(argv)
        log.info("kernel backend: %s", kernels.BACKEND)
        report = args.func(args)
        data = emit_report(report, args.format)
    except (UnpadError, IndexError, KeyError, OSError, json.JSONDecodeError) as exc:
        err = error_report(getattr(args, "command", None), exc)
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        stdout.write(data)
        stdout.flush()
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
