"""Experiment pipeline: declarative config plus the stages the CLI exposes.

A run serializes a corpus under one or more marker schemes, trains one model
per scheme from scratch with a shared codec and seed, generates continuations
with nucleus sampling, and scores the full automatic-metric suite into one
report row per scheme. Every stage is deterministic given the config.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .corpus import Document, SplitSpec, compute_stats, count_words, filter_by_length, load_corpus, split_corpus, write_corpus
from .decoder import GenConfig, generate
from .lm import Checkpoint, LanguageModel, ModelConfig, TrainConfig, save_checkpoint, token_logprobs, train
from .metrics import DocScores, EvalReport, RankCurve, build_report, eos_rank_curve, write_report_csv
from .synth import SynthSpec, generate_corpus
from .textcodec import Codec, Example, ParaType, TokenSeq, encode_example, serialize_document, strip_special, train_codec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "out_dir": "runs/exp",
    "seed": 0,
    "corpus": {
        # either a seeded synthetic corpus (grammar defaults live in SynthSpec) ...
        "synth": {"n_docs": 2600},
        # ... or paths: {"path": "corpus.jsonl", "format": "jsonl", "lang": "english"}
        "path": None,
        "format": "jsonl",
        "lang": "english",
        "split": {"train": 0.8, "valid": 0.1, "test": 0.1},
    },
    "codec": {"mode": "bpe", "vocab_size": 512, "reserved_specials": ["EOP", "SEP"]},
    "paratypes": ["none", "sep-nl", "sep-diy", "eop-nl", "eop-diy"],
    "append_eos": True,
    "max_tokens": 1024,
    "model": {"n_layers": 4, "n_heads": 4, "d_model": 128, "d_ff": 512, "context_len": 256, "dropout": 0.0},
    "train": {"total_steps": 800, "batch_size": 32, "warmup_steps": None, "peak_lr": 3e-4,
              "grad_clip": 1.0, "eval_every": 100, "lr_decay": "none"},
    "gen": {"p": 0.95, "max_new_tokens": None, "temperature": 1.0, "num_docs": 200},
    "eval": {"num_docs": None, "length_unit": "word"},
}


class ConfigError(ValueError):
    pass


_OPAQUE = {"corpus.synth"}  # validated by SynthSpec, not the schema


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if path + key in _OPAQUE and isinstance(value, dict):
            out[key] = {**defaults[key], **value}
        elif isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(source) -> dict:
    """Accepts a path, a JSON string, or a dict; applies schema defaults."""
    if isinstance(source, (str, Path)) and Path(source).exists():
        given = json.loads(Path(source).read_text(encoding="utf-8"))
    elif isinstance(source, str):
        given = json.loads(source)
    else:
        given = dict(source)
    version = given.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    cfg = _merge(DEFAULT_CONFIG, given)
    if not cfg["paratypes"]:
        raise ConfigError("paratypes must be non-empty")
    for pt in cfg["paratypes"]:
        ParaType.parse(pt)
    return cfg


def train_config_of(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    if t.get("warmup_steps") is None:
        t["warmup_steps"] = max(10, t["total_steps"] // 10)
    return TrainConfig(**t)


def model_config_of(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, seed=cfg["seed"], **cfg["model"])


# ------------------------------------------------------------------ corpus


def corpus_of(cfg: dict) -> tuple[list[Document], list[Document], list[Document]]:
    c = cfg["corpus"]
    if c.get("path"):
        docs = load_corpus(c["path"], c.get("format", "jsonl"), c.get("lang", "english"))
    else:
        synth = dict(c["synth"])
        docs = generate_corpus(SynthSpec(seed=cfg["seed"], **synth))
    s = c["split"]
    return split_corpus(docs, SplitSpec(s["train"], s["valid"], s["test"], seed=cfg["seed"]))


# ------------------------------------------------------------------ examples


def context_ids(doc: Document, codec: Codec) -> list[int]:
    """Generation/eval context: prompt + NL, or a bare EOS anchor (documents
    follow an EOS in the training stream, so EOS marks a document start)."""
    if doc.prompt:
        return codec.encode(doc.prompt) + [codec.vocab.special("NL")]
    return [codec.vocab.special("EOS")]


def eval_example(doc: Document, codec: Codec, paratype: ParaType, append_eos: bool = True) -> Example:
    ex = encode_example(doc, codec, paratype, append_eos)
    if ex.story_start > 0:
        return ex
    eos = codec.vocab.special("EOS")
    return Example(
        doc_id=ex.doc_id,
        ids=(eos,) + ex.ids,
        boundary_marks=tuple(m + 1 for m in ex.boundary_marks),
        story_start=1,
        lang=ex.lang,
    )


# ------------------------------------------------------------------ scoring


def score_record(model: LanguageModel, codec: Codec, doc: Document, paratype: ParaType,
                 append_eos: bool = True) -> dict | None:
    """Logprob-dump record for one document; None if it exceeds the context."""
    ex = eval_example(doc, codec, paratype, append_eos)
    if len(ex.ids) > model.context_len:
        log.warning("doc %s exceeds context (%d tokens), skipped", doc.id, len(ex.ids))
        return None
    recs = token_logprobs(model, ex.ids)
    vocab = codec.vocab
    drop = vocab.marker_special_ids()
    nl = vocab.special("NL")
    marker_nl = {p for p in ex.boundary_marks if ex.ids[p] == nl}
    eos = vocab.special("EOS")

    targets, logprobs, special, is_eos = [], [], [], []
    for t, (target, lp) in enumerate(recs):
        pos = t + 1
        if pos < ex.story_start:
            continue
        targets.append(target)
        logprobs.append(lp)
        special.append(target in drop or pos in marker_nl)
        is_eos.append(bool(append_eos) and target == eos and pos == len(ex.ids) - 1)
    return {
        "doc_id": doc.id,
        "targets": targets,
        "logprobs": logprobs,
        "special_mask": special,
        "eos_mask": is_eos,
        "word_count": count_words(doc.story, doc.lang),
    }


def scores_from_record(rec: dict, codec: Codec | None = None) -> DocScores:
    """DocScores from a dump record; bare {doc_id, targets, logprobs} records
    derive masks from the codec's special ids (marker line breaks unknowable)."""
    targets = rec["targets"]
    if "special_mask" in rec:
        special = rec["special_mask"]
        eos_mask = rec["eos_mask"]
    else:
        if codec is None:
            raise ConfigError("bare logprob record needs a codec to derive masks")
        drop = codec.vocab.marker_special_ids()
        eos = codec.vocab.special("EOS")
        special = [t in drop for t in targets]
        eos_mask = [t == eos for t in targets]
    return DocScores(
        doc_id=rec["doc_id"],
        logprobs=rec["logprobs"],
        is_special=special,
        is_eos=eos_mask,
        word_count=rec.get("word_count", len(targets)),
    )


def write_logprob_dump(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_logprob_dump(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------------ generation


def generate_records(model: LanguageModel, codec: Codec, docs, gen_cfg: dict, system: str,
                     base_seed: int) -> list[dict]:
    eos = codec.vocab.special("EOS")
    max_new = gen_cfg.get("max_new_tokens") or model.context_len
    records = []
    for i, doc in enumerate(docs):
        ctx = context_ids(doc, codec)
        ctx = ctx[-(model.context_len - 1):]
        cfg = GenConfig(
            max_new_tokens=max_new,
            p=gen_cfg.get("p", 0.95),
            seed=base_seed + i,
            temperature=gen_cfg.get("temperature", 1.0),
        )
        g = generate(model, ctx, cfg, eos)
        stripped = strip_special(TokenSeq(g.output_ids), codec.vocab)
        records.append(
            {
                "doc_id": doc.id,
                "system": system,
                "output_text": codec.decode(stripped.ids),
                "output_ids": list(g.output_ids),
                "ended_with_eos": g.ended_with_eos,
                "seed": cfg.seed,
            }
        )
    return records


def write_generations(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_generations(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------------ stages


@dataclass
class GenView:
    ended_with_eos: bool


def evaluate_run(codec: Codec, paratype: ParaType, doc_map: dict[str, Document],
                 gen_records, score_records, append_eos: bool, length_unit: str) -> EvalReport:
    """Assemble the report row from generation records and logprob records."""
    doc_scores = [scores_from_record(r, codec) for r in score_records]
    cands, refs, cand_texts = [], [], []
    for rec in gen_records:
        doc = doc_map[rec["doc_id"]]
        ref = strip_special(serialize_document(doc, codec, paratype, append_eos), codec.vocab)
        cand = strip_special(TokenSeq(rec["output_ids"]), codec.vocab)
        refs.append(list(ref.ids))
        cands.append(list(cand.ids))
        cand_texts.append(codec.decode(cand.ids))
    gens = [GenView(bool(r["ended_with_eos"])) for r in gen_records]
    word_unit = length_unit == "word"
    return build_report(
        paratype.value,
        doc_scores=doc_scores or None,
        gens=gens or None,
        cands=cands or None,
        refs=refs or None,
        cand_texts=cand_texts,
        length_unit=length_unit,
        word_unit=word_unit,
    )


def rank_curve_of(model: LanguageModel, codec: Codec, docs, paratype: ParaType,
                  append_eos: bool = True, marker_inclusive: bool = True) -> RankCurve:
    examples = []
    for doc in docs:
        ex = eval_example(doc, codec, paratype, append_eos)
        if len(ex.ids) <= model.context_len:
            examples.append(ex)
    marker_ids = {codec.vocab.special_ids[n] for n in ("NL", "EOP", "SEP") if codec.vocab.has_special(n)}
    return eos_rank_curve(
        model,
        examples,
        eos_id=codec.vocab.special("EOS"),
        marker_inclusive=marker_inclusive,
        marker_ids=marker_ids,
    )


def train_for_paratype(cfg: dict, codec: Codec, paratype: ParaType,
                       train_docs, valid_docs) -> Checkpoint:
    append_eos = cfg["append_eos"]
    train_seqs = [encode_example(d, codec, paratype, append_eos).ids for d in train_docs]
    valid_seqs = [encode_example(d, codec, paratype, append_eos).ids for d in valid_docs]
    return train(model_config_of(cfg, len(codec.vocab)), train_config_of(cfg), train_seqs, valid_seqs)


def run_compare(cfg: dict, progress=None) -> list[EvalReport]:
    """The full comparison table: for each paratype, serialize, train,
    generate, evaluate; emits per-paratype artifacts plus a combined CSV."""
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2), encoding="utf-8")

    train_docs, valid_docs, test_docs = corpus_of(cfg)
    codec = train_codec(
        train_docs,
        cfg["codec"]["mode"],
        cfg["codec"]["vocab_size"],
        reserved_specials=set(cfg["codec"]["reserved_specials"]),
    )
    codec.save(out / "codec.json")

    # one filter pass under the longest serialization keeps a single document
    # set comparable across every scheme
    budget = min(cfg["max_tokens"], cfg["model"]["context_len"])
    train_docs = filter_by_length(train_docs, codec, ParaType.EOP_DIY, budget, cfg["append_eos"])
    valid_docs = filter_by_length(valid_docs, codec, ParaType.EOP_DIY, budget, cfg["append_eos"])
    test_docs = filter_by_length(test_docs, codec, ParaType.EOP_DIY, budget, cfg["append_eos"])
    for name, docs in (("train", train_docs), ("valid", valid_docs), ("test", test_docs)):
        write_corpus(docs, out / f"{name}.jsonl")

    reports = []
    for name in cfg["paratypes"]:
        pt = ParaType.parse(name)
        run_dir = out / pt.value
        run_dir.mkdir(exist_ok=True)
        if progress:
            progress(f"[{pt.value}] training")
        ckpt = train_for_paratype(cfg, codec, pt, train_docs, valid_docs)
        save_checkpoint(ckpt, run_dir / "model.ckpt")
        model = ckpt.materialize()

        if progress:
            progress(f"[{pt.value}] generating")
        n_gen = cfg["gen"].get("num_docs") or len(test_docs)
        gen_docs = test_docs[:n_gen]
        gen_records = generate_records(model, codec, gen_docs, cfg["gen"], pt.value, cfg["seed"])
        write_generations(gen_records, run_dir / "generations.jsonl")

        if progress:
            progress(f"[{pt.value}] scoring")
        n_eval = cfg["eval"].get("num_docs") or len(test_docs)
        score_docs = test_docs[:n_eval]
        records = [
            r for d in score_docs
            if (r := score_record(model, codec, d, pt, cfg["append_eos"])) is not None
        ]
        write_logprob_dump(records, run_dir / "logprobs.jsonl")

        doc_map = {d.id: d for d in test_docs}
        report = evaluate_run(
            codec, pt, doc_map, gen_records, records, cfg["append_eos"], cfg["eval"]["length_unit"]
        )
        (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        write_report_csv([report], run_dir / "report.csv")

        curve = rank_curve_of(model, codec, score_docs, pt, cfg["append_eos"])
        curve.write_csv(run_dir / "rank_curve.csv")
        reports.append(report)

    write_report_csv(reports, out / "compare.csv")
    return reports


def stats_of(docs) -> dict:
    s = compute_stats(docs)
    return {
        "num_samples": s.num_samples,
        "avg_words_per_sample": s.avg_words_per_sample,
        "avg_paragraphs_per_sample": s.avg_paragraphs_per_sample,
    }
