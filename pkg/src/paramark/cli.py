"""Command-line front: every pipeline stage as a subcommand.

Data goes to files, logs go to stderr, exit code is non-zero on any error
with the failing stage named.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .corpus import SplitSpec, load_corpus, split_corpus, write_corpus, filter_by_length
from .experiment import (
    evaluate_run,
    generate_records,
    load_config,
    rank_curve_of,
    read_generations,
    read_logprob_dump,
    run_compare,
    score_record,
    stats_of,
    train_for_paratype,
    write_generations,
    write_logprob_dump,
)
from .lm import load_checkpoint, save_checkpoint
from .metrics import write_report_csv
from .synth import SynthSpec, generate_corpus
from .textcodec import Codec, ParaType, train_codec


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_docs(args):
    return load_corpus(args.corpus, args.format, args.lang)


def _add_corpus_args(p):
    p.add_argument("--corpus", required=True, help="corpus file (jsonl or twofile base path)")
    p.add_argument("--format", default="jsonl", choices=["jsonl", "prompt_story_twofile"])
    p.add_argument("--lang", default="english", choices=["english", "chinese"])


def cmd_synth_corpus(args) -> int:
    spec = SynthSpec(
        n_docs=args.n_docs, seed=args.seed, closing_prob=args.closing_prob, noise_prob=args.noise_prob
    )
    docs = generate_corpus(spec)
    write_corpus(docs, args.out)
    _log(f"wrote {len(docs)} synthetic documents to {args.out}")
    _log(json.dumps(stats_of(docs)))
    return 0


def cmd_train_codec(args) -> int:
    docs = _load_docs(args)
    reserved = {s.strip().upper() for s in args.reserve.split(",") if s.strip()}
    codec = train_codec(docs, args.mode, args.vocab_size, reserved_specials=reserved)
    codec.save(args.out)
    _log(f"trained {args.mode} codec: {len(codec.vocab)} tokens, {len(codec.merges)} merges -> {args.out}")
    return 0


def cmd_prep(args) -> int:
    docs = _load_docs(args)
    codec = Codec.load(args.codec)
    paratype = ParaType.parse(args.paratype)
    kept = filter_by_length(docs, codec, paratype, args.max_tokens, append_eos=not args.no_eos)
    _log(f"filtered {len(docs) - len(kept)} of {len(docs)} documents over {args.max_tokens} tokens")
    fracs = [float(x) for x in args.split.split(",")]
    train_docs, valid_docs, test_docs = split_corpus(kept, SplitSpec(*fracs, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train_docs), ("valid", valid_docs), ("test", test_docs)):
        write_corpus(part, out / f"{name}.jsonl")
    stats = {name: stats_of(part) for name, part in
             (("train", train_docs), ("valid", valid_docs), ("test", test_docs)) if part}
    (out / "stats.json").write_text(json.dumps(stats, indent=2), encoding="utf-8")
    _log(f"split {len(kept)} docs into {len(train_docs)}/{len(valid_docs)}/{len(test_docs)} -> {out}")
    return 0


def _experiment_cfg(args, paratype: str) -> dict:
    return load_config(
        {
            "out_dir": "unused",
            "seed": args.seed,
            "paratypes": [paratype],
            "append_eos": not args.no_eos,
            "model": {
                "n_layers": args.layers,
                "n_heads": args.heads,
                "d_model": args.d_model,
                "d_ff": args.d_ff,
                "context_len": args.context,
                "dropout": args.dropout,
            },
            "train": {
                "total_steps": args.steps,
                "batch_size": args.batch_size,
                "warmup_steps": args.warmup,
                "peak_lr": args.lr,
                "grad_clip": args.grad_clip,
                "eval_every": args.eval_every,
            },
        }
    )


def cmd_train(args) -> int:
    codec = Codec.load(args.codec)
    train_docs = load_corpus(args.train)
    valid_docs = load_corpus(args.valid) if args.valid else train_docs[: max(1, len(train_docs) // 10)]
    cfg = _experiment_cfg(args, args.paratype)
    ckpt = train_for_paratype(cfg, codec, ParaType.parse(args.paratype), train_docs, valid_docs)
    save_checkpoint(ckpt, args.out)
    evals = [(s, v) for s, _, v in ckpt.history if v is not None]
    _log(f"trained {len(ckpt.history)} steps; best valid nll {min(v for _, v in evals):.4f} "
         f"at step {ckpt.step} -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    codec = Codec.load(args.codec)
    model = load_checkpoint(args.ckpt).materialize()
    docs = load_corpus(args.test)
    if args.num:
        docs = docs[: args.num]
    gen_cfg = {"p": args.p, "max_new_tokens": args.max_new, "temperature": args.temperature}
    records = generate_records(model, codec, docs, gen_cfg, args.system, args.seed)
    write_generations(records, args.out)
    ended = sum(1 for r in records if r["ended_with_eos"])
    _log(f"generated {len(records)} continuations ({ended} ended with EOS) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    codec = Codec.load(args.codec)
    paratype = ParaType.parse(args.paratype)
    docs = load_corpus(args.test)
    doc_map = {d.id: d for d in docs}
    append_eos = not args.no_eos

    if args.logprobs:
        records = read_logprob_dump(args.logprobs)
    elif args.ckpt:
        model = load_checkpoint(args.ckpt).materialize()
        score_docs = docs[: args.num_eval] if args.num_eval else docs
        records = [
            r for d in score_docs if (r := score_record(model, codec, d, paratype, append_eos))
        ]
        if args.dump:
            write_logprob_dump(records, args.dump)
    else:
        records = []
    gen_records = read_generations(args.gens) if args.gens else []
    if not records and not gen_records:
        raise SystemExit("eval needs --ckpt, --logprobs or --gens")

    report = evaluate_run(codec, paratype, doc_map, gen_records, records, append_eos, args.length_unit)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    if args.csv:
        write_report_csv([report], args.csv)
    _log(f"report -> {args.out}")
    return 0


def cmd_rank_curve(args) -> int:
    codec = Codec.load(args.codec)
    model = load_checkpoint(args.ckpt).materialize()
    docs = load_corpus(args.test)
    if args.num:
        docs = docs[: args.num]
    curve = rank_curve_of(
        model, codec, docs, ParaType.parse(args.paratype),
        append_eos=not args.no_eos, marker_inclusive=not args.content_token,
    )
    curve.write_csv(args.out)
    _log(f"rank curve over {sum(curve.counts.values())} paragraph boundaries -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg["out_dir"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    reports = run_compare(cfg, progress=_log)
    for r in reports:
        _log(r.to_json())
    _log(f"comparison table -> {Path(cfg['out_dir']) / 'compare.csv'}")
    return 0


def cmd_study_serve(args) -> int:
    import uvicorn

    from .service import StudyStore, create_app

    app = create_app(
        StudyStore(args.store),
        admin_token=args.admin_token,
        ui_dir=args.ui,
        rank_curve_csv=args.rank_curve,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_study_report(args) -> int:
    import itertools

    from .humaneval import METRICS, fleiss_kappa, win_matrix, HumanEvalError
    from .service import StudyStore

    store = StudyStore(args.store)
    study = store.get(args.study)
    events = store.logs[args.study].events
    matrix = win_matrix(study, events)
    kappas = {}
    for metric in METRICS:
        kappas[metric] = {}
        for a, b in itertools.combinations(study.systems, 2):
            try:
                k = fleiss_kappa(study, events, metric, (a, b))
                kappas[metric][f"{a}|{b}"] = {"value": k.value, "band": k.band, "degenerate": k.degenerate}
            except HumanEvalError as exc:
                kappas[metric][f"{a}|{b}"] = {"error": str(exc)}
    payload = {
        "study_id": study.id,
        "systems": study.systems,
        "num_tasks": len(study.pair_assignments),
        "win_matrices": matrix.as_nested(),
        "kappas": kappas,
        "judgments": len(events),
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paramark", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("synth-corpus", help="emit the deterministic synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-docs", type=int, default=2600)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--closing-prob", type=float, default=0.65)
    sp.add_argument("--noise-prob", type=float, default=0.05)
    sp.set_defaults(fn=cmd_synth_corpus)

    sp = sub.add_parser("train-codec", help="fit a char/bpe codec on a corpus")
    _add_corpus_args(sp)
    sp.add_argument("--mode", default="bpe", choices=["char", "bpe"])
    sp.add_argument("--vocab-size", type=int, default=512)
    sp.add_argument("--reserve", default="EOP,SEP", help="comma list of DIY specials to reserve")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_codec)

    sp = sub.add_parser("prep", help="filter by serialized length and split")
    _add_corpus_args(sp)
    sp.add_argument("--codec", required=True)
    sp.add_argument("--paratype", default="eop-diy")
    sp.add_argument("--max-tokens", type=int, default=1024)
    sp.add_argument("--no-eos", action="store_true")
    sp.add_argument("--split", default="0.8,0.1,0.1")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_prep)

    sp = sub.add_parser("train", help="train one model for one paratype")
    sp.add_argument("--train", required=True)
    sp.add_argument("--valid")
    sp.add_argument("--codec", required=True)
    sp.add_argument("--paratype", required=True)
    sp.add_argument("--no-eos", action="store_true")
    sp.add_argument("--layers", type=int, default=4)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--d-model", type=int, default=128)
    sp.add_argument("--d-ff", type=int, default=512)
    sp.add_argument("--context", type=int, default=256)
    sp.add_argument("--dropout", type=float, default=0.0)
    sp.add_argument("--steps", type=int, default=800)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--warmup", type=int, default=None)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--grad-clip", type=float, default=1.0)
    sp.add_argument("--eval-every", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("generate", help="sample continuations for test prompts")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--codec", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--num", type=int, default=None)
    sp.add_argument("--p", type=float, default=0.95)
    sp.add_argument("--max-new", type=int, default=None)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--system", default="model")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("eval", help="compute the metric report for one run")
    sp.add_argument("--codec", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--paratype", required=True)
    sp.add_argument("--ckpt")
    sp.add_argument("--logprobs", help="metric-only mode: logprob dump instead of a checkpoint")
    sp.add_argument("--gens")
    sp.add_argument("--num-eval", type=int, default=None)
    sp.add_argument("--length-unit", default="word", choices=["word", "token"])
    sp.add_argument("--no-eos", action="store_true")
    sp.add_argument("--dump", help="also write the logprob dump here")
    sp.add_argument("--csv")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("rank-curve", help="EOS rank vs relative paragraph position")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--codec", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--paratype", required=True)
    sp.add_argument("--num", type=int, default=None)
    sp.add_argument("--no-eos", action="store_true")
    sp.add_argument("--content-token", action="store_true",
                    help="query at the last content token instead of the marker")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_rank_curve)

    sp = sub.add_parser("compare", help="full per-paratype comparison from a config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("study-serve", help="run the human-evaluation service")
    sp.add_argument("--store", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8040)
    sp.add_argument("--admin-token", default="paramark-admin")
    sp.add_argument("--ui", default=None, help="directory with the built web UI")
    sp.add_argument("--rank-curve", default=None, help="rank-curve CSV to serve at /data/rank-curve.csv")
    sp.set_defaults(fn=cmd_study_serve)

    sp = sub.add_parser("study-report", help="offline aggregation of a stored study")
    sp.add_argument("--store", required=True)
    sp.add_argument("--study", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_study_report)

    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits itself on bad flags
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (Exception, SystemExit) as exc:
        if isinstance(exc, SystemExit) and exc.code in (0, None):
            return 0
        _log(f"paramark {args.cmd}: error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
