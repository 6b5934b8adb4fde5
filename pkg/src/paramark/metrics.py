"""Automatic metrics: the perplexity family, EOS statistics, sample-level
smoothed BLEU / truncated BLEU, distinct-n, average length, and the
EOS-rank-vs-paragraph-position curve.

Perplexities are macro-averaged: mean over documents of per-document
perplexity, never pooled over tokens. BLEU and DIST are likewise per-sample
macro averages (recorded in report metadata so alternates can be compared).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BLEU_EPS = 1e-9

REPORT_META = {"ppl_average": "macro", "bleu_scope": "macro-smoothed", "dist_scope": "macro"}


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class DocScores:
    """Per-position log-probabilities of one document's gold continuation.

    ``logprobs[t]`` is log P(target_t | preceding tokens); ``is_special[t]``
    flags targets that are EOS/EOP/SEP or marker line breaks; ``is_eos[t]``
    flags the EOS target. ``word_count`` counts the reference continuation's
    words (specials never count as words).
    """

    doc_id: str
    logprobs: tuple[float, ...]
    is_special: tuple[bool, ...]
    is_eos: tuple[bool, ...]
    word_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "logprobs", tuple(float(x) for x in self.logprobs))
        object.__setattr__(self, "is_special", tuple(bool(x) for x in self.is_special))
        object.__setattr__(self, "is_eos", tuple(bool(x) for x in self.is_eos))
        if not len(self.logprobs) == len(self.is_special) == len(self.is_eos):
            raise MetricError(f"doc {self.doc_id}: mismatched score vectors")


def perplexity(docs: list[DocScores], selector: str = "all", unit: str = "token") -> float:
    """Macro-averaged perplexity.

    Per document: exp(total selected NLL / denominator) where the denominator
    is the number of selected tokens (unit="token") or the reference word
    count (unit="word"). Documents with no selected positions are excluded
    with a warning; if all are excluded this raises.
    """
    if selector not in ("all", "exclude_specials", "eos_only"):
        raise MetricError(f"unknown selector {selector!r}")
    if unit not in ("token", "word"):
        raise MetricError(f"unknown unit {unit!r}")
    ppls = []
    for doc in docs:
        if selector == "all":
            picked = range(len(doc.logprobs))
        elif selector == "exclude_specials":
            picked = [t for t in range(len(doc.logprobs)) if not doc.is_special[t]]
        else:
            picked = [t for t in range(len(doc.logprobs)) if doc.is_eos[t]]
        denom = len(picked) if unit == "token" else doc.word_count
        if not picked or denom <= 0:
            log.warning("perplexity: doc %s has no selected positions, excluded", doc.doc_id)
            continue
        nll = -math.fsum(doc.logprobs[t] for t in picked)
        ppls.append(math.exp(nll / denom))
    if not ppls:
        raise MetricError(f"perplexity: no document has positions for selector {selector!r}")
    return math.fsum(ppls) / len(ppls)


def eos_rate(gens) -> float:
    """Percent of generations terminated by emitting EOS."""
    if not gens:
        raise MetricError("eos_rate of an empty generation list")
    ended = sum(1 for g in gens if getattr(g, "ended_with_eos", g))
    return 100.0 * ended / len(gens)


def _ngrams(seq, n: int):
    return [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]


def _pair_bleu(cand, ref, n: int) -> float:
    if not cand:
        log.warning("bleu: empty candidate scored 0")
        return 0.0
    log_precisions = []
    for k in range(1, n + 1):
        cand_counts = Counter(_ngrams(cand, k))
        total = max(0, len(cand) - k + 1)
        if total == 0:
            log_precisions.append(math.log(BLEU_EPS))
            continue
        ref_counts = Counter(_ngrams(ref, k))
        clipped = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        log_precisions.append(math.log(max(clipped, BLEU_EPS) / total))
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(math.fsum(log_precisions) / n)


def bleu(cands, refs, n: int = 1) -> float:
    """Sample-level smoothed BLEU-n, macro-averaged over pairs, in percent.

    Modified n-gram precision with clipping, geometric mean over orders 1..n,
    epsilon smoothing on zero counts, brevity penalty exp(1 - |ref|/|cand|)
    for short candidates. Specials must already be stripped.
    """
    if len(cands) != len(refs):
        raise MetricError(f"bleu: {len(cands)} candidates vs {len(refs)} references")
    if not cands:
        raise MetricError("bleu of an empty pair list")
    return 100.0 * math.fsum(_pair_bleu(c, r, n) for c, r in zip(cands, refs)) / len(cands)


def truncated_bleu(cands, refs, n: int = 1) -> float:
    """BLEU after cutting each candidate to its reference's token length."""
    return bleu([c[: len(r)] for c, r in zip(cands, refs)], refs, n)


def distinct_n(seqs, n: int = 1) -> float:
    """Per-sequence unique-ngram ratio in percent, macro-averaged."""
    scores = []
    for i, seq in enumerate(seqs):
        grams = _ngrams(seq, n)
        if not grams:
            log.warning("distinct_n: sequence %d shorter than n=%d, skipped", i, n)
            continue
        scores.append(100.0 * len(set(grams)) / max(1, len(grams)))
    if not scores:
        raise MetricError(f"distinct_n: no sequence of length >= {n}")
    return math.fsum(scores) / len(scores)


def avg_length(items, unit: str = "token") -> float:
    """Mean length after special stripping: token count of id sequences, or
    whitespace word count of decoded texts (unit="word")."""
    if not items:
        raise MetricError("avg_length of an empty list")
    if unit == "token":
        lengths = [len(x) for x in items]
    elif unit == "word":
        lengths = [len(x.split()) for x in items]
    else:
        raise MetricError(f"unknown unit {unit!r}")
    return sum(lengths) / len(items)


# ------------------------------------------------------------------ rank curve


@dataclass
class RankCurve:
    """Mean rank of the EOS probability at paragraph-final positions, bucketed
    by relative paragraph position (0 = first paragraph, 100 = last)."""

    rank_sums: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def add(self, bucket: int, rank: int) -> None:
        if rank < 1:
            raise MetricError(f"rank must be >= 1, got {rank}")
        self.rank_sums[bucket] = self.rank_sums.get(bucket, 0.0) + rank
        self.counts[bucket] = self.counts.get(bucket, 0) + 1

    @property
    def buckets(self) -> dict[int, tuple[float, int]]:
        return {
            b: (self.rank_sums[b] / self.counts[b], self.counts[b])
            for b in sorted(self.counts)
        }

    def mean_over(self, lo: int, hi: int) -> float:
        """Sample-weighted mean rank over buckets in [lo, hi]."""
        total = sum(self.rank_sums[b] for b in self.counts if lo <= b <= hi)
        count = sum(self.counts[b] for b in self.counts if lo <= b <= hi)
        if count == 0:
            raise MetricError(f"no samples in buckets [{lo}, {hi}]")
        return total / count

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "mean_rank", "count"])
            for b, (mean, count) in self.buckets.items():
                w.writerow([b, repr(mean), count])

    @classmethod
    def read_csv(cls, path) -> "RankCurve":
        curve = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                b, count = int(row["bucket"]), int(row["count"])
                curve.rank_sums[b] = float(row["mean_rank"]) * count
                curve.counts[b] = count
        return curve


def rank_of(probs: np.ndarray, token_id: int) -> int:
    """1-based rank of token_id by descending probability; ties go to the
    smaller token id."""
    p = float(probs[token_id])
    greater = int(np.sum(probs > p))
    ties_ahead = int(np.sum((probs[:token_id] == p)))
    return 1 + greater + ties_ahead


def relative_position(i: int, n: int) -> int:
    """Bucket of paragraph i among n: 100 for a single paragraph, else
    round-half-up of 100*i/(n-1)."""
    if n == 1:
        return 100
    return int(math.floor(100.0 * i / (n - 1) + 0.5))


def eos_rank_curve(
    model,
    examples,
    eos_id: int,
    marker_inclusive: bool = True,
    marker_ids: set[int] | None = None,
) -> RankCurve:
    """Rank of the EOS probability in the next-token distribution queried at
    each paragraph's final token.

    ``model`` must expose next_token_distribution(ids) -> (len, vocab) row-
    stochastic array. With marker_inclusive=False the query moves off a
    trailing marker token (any id in marker_ids) onto the paragraph's last
    content token.
    """
    if not marker_inclusive and marker_ids is None:
        raise MetricError("marker_inclusive=False needs the marker id set")
    curve = RankCurve()
    for ex in examples:
        marks = ex.boundary_marks
        if not marks:
            raise MetricError(f"doc {getattr(ex, 'doc_id', '?')} has no boundary marks")
        dist = model.next_token_distribution(ex.ids)
        n = len(marks)
        for i, pos in enumerate(marks):
            if not marker_inclusive and ex.ids[pos] in marker_ids:
                pos = pos - 1
            curve.add(relative_position(i, n), rank_of(dist[pos], eos_id))
    return curve


# ------------------------------------------------------------------ report


ABSENT = None


@dataclass
class EvalReport:
    """One row of the automatic-metric results table for a (model, paratype)
    run. Inapplicable fields hold None and render as "-" in CSV."""

    paratype: str
    w_ppl: float | None = ABSENT
    w_ppl_minus: float | None = ABSENT
    t_ppl: float | None = ABSENT
    t_ppl_minus: float | None = ABSENT
    eos_ppl: float | None = ABSENT
    eos_rate: float | None = ABSENT
    bleu1: float | None = ABSENT
    bleu2: float | None = ABSENT
    t_bleu1: float | None = ABSENT
    t_bleu2: float | None = ABSENT
    dist1: float | None = ABSENT
    dist2: float | None = ABSENT
    avg_length: float | None = ABSENT
    meta: dict = field(default_factory=lambda: dict(REPORT_META))

    CSV_COLUMNS = (
        "paratype",
        "w_ppl",
        "w_ppl_minus",
        "t_ppl",
        "t_ppl_minus",
        "eos_ppl",
        "eos_rate",
        "bleu1",
        "bleu2",
        "t_bleu1",
        "t_bleu2",
        "dist1",
        "dist2",
        "avg_length",
    )

    def to_json(self) -> str:
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps(payload, ensure_ascii=False)

    @classmethod
    def from_json(cls, s: str) -> "EvalReport":
        return cls(**json.loads(s))

    def csv_row(self) -> list[str]:
        row = []
        for col in self.CSV_COLUMNS:
            v = getattr(self, col)
            if v is ABSENT:
                row.append("-")
            elif isinstance(v, float):
                row.append(repr(v))
            else:
                row.append(str(v))
        return row

    @classmethod
    def from_csv_row(cls, row: list[str]) -> "EvalReport":
        kwargs = {}
        for col, raw in zip(cls.CSV_COLUMNS, row):
            if col == "paratype":
                kwargs[col] = raw
            else:
                kwargs[col] = ABSENT if raw == "-" else float(raw)
        return cls(**kwargs)


def write_report_csv(reports: list[EvalReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EvalReport.CSV_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row())


def read_report_csv(path) -> list[EvalReport]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != EvalReport.CSV_COLUMNS:
        raise MetricError(f"unexpected report header in {path}")
    return [EvalReport.from_csv_row(r) for r in rows[1:]]


def build_report(
    paratype: str,
    doc_scores: list[DocScores] | None = None,
    gens=None,
    cands=None,
    refs=None,
    cand_texts=None,
    length_unit: str = "token",
    word_unit: bool = False,
) -> EvalReport:
    """Assemble every applicable metric for one run.

    doc_scores feed the perplexity family; gens feed EOS%; cands/refs
    (special-stripped token sequences) feed BLEU/T-BLEU/DIST and average
    length (with cand_texts when length_unit="word"). Fields without inputs
    stay absent.
    """
    report = EvalReport(paratype=str(getattr(paratype, "value", paratype)))
    if doc_scores:
        report.t_ppl = perplexity(doc_scores, "all", "token")
        report.t_ppl_minus = perplexity(doc_scores, "exclude_specials", "token")
        if word_unit:
            report.w_ppl = perplexity(doc_scores, "all", "word")
            report.w_ppl_minus = perplexity(doc_scores, "exclude_specials", "word")
        if any(any(d.is_eos) for d in doc_scores):
            report.eos_ppl = perplexity(doc_scores, "eos_only", "token")
    if gens is not None:
        report.eos_rate = eos_rate(gens)
    if cands is not None:
        if refs is None or len(cands) != len(refs):
            raise MetricError("build_report: candidates and references are inconsistent")
        report.bleu1 = bleu(cands, refs, 1)
        report.bleu2 = bleu(cands, refs, 2)
        report.t_bleu1 = truncated_bleu(cands, refs, 1)
        report.t_bleu2 = truncated_bleu(cands, refs, 2)
        report.dist1 = distinct_n(cands, 1)
        report.dist2 = distinct_n(cands, 2)
        if length_unit == "word":
            if cand_texts is None:
                raise MetricError("build_report: word lengths need cand_texts")
            report.avg_length = avg_length(cand_texts, "word")
        else:
            report.avg_length = avg_length(cands, "token")
    return report
