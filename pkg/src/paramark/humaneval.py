"""Blinded pairwise human-evaluation studies.

A study fixes a set of systems, samples test documents, and creates one task
per (unordered system pair, sample) with a coin-flipped left/right
presentation. Raters record three-way judgments (left / right /
indistinguishable) on four metrics. Aggregation produces per-metric win
matrices (ties skipped) and Fleiss' kappa per (metric, pair) computed on
blinded positional categories, so kappa is invariant to the hidden side
assignment.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRICS = ("topic_relevance", "fluency", "ending_quality", "overall_preference")
VERDICTS = ("left", "right", "indistinguishable")

KAPPA_BANDS = (
    (0.0, "poor agreement"),
    (0.2, "slight agreement"),
    (0.4, "fair agreement"),
    (0.6, "moderate agreement"),
    (0.8, "substantial agreement"),
    (1.0, "almost perfect agreement"),
)


class HumanEvalError(ValueError):
    pass


@dataclass(frozen=True)
class PairTask:
    task_id: str
    sample_id: str
    left_system: str  # hidden from raters; server-side only
    right_system: str

    def __post_init__(self) -> None:
        if self.left_system == self.right_system:
            raise HumanEvalError(f"task {self.task_id}: left and right are the same system")

    @property
    def pair(self) -> frozenset:
        return frozenset((self.left_system, self.right_system))


@dataclass(frozen=True)
class Judgment:
    task_id: str
    rater_id: str
    metric: str
    verdict: str
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise HumanEvalError(f"unknown metric {self.metric!r}")
        if self.verdict not in VERDICTS:
            raise HumanEvalError(f"unknown verdict {self.verdict!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "task_id": self.task_id,
                "rater_id": self.rater_id,
                "metric": self.metric,
                "verdict": self.verdict,
                "timestamp": self.timestamp,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Judgment":
        return cls(**json.loads(line))


@dataclass
class Study:
    id: str
    systems: list[str]
    samples: list[str]
    raters: list[str]
    pair_assignments: list[PairTask]
    generations: dict[str, dict[str, str]]  # system -> sample -> text
    prompts: dict[str, str] = field(default_factory=dict)
    metrics: tuple[str, ...] = METRICS
    seed: int = 0

    def task(self, task_id: str) -> PairTask:
        for t in self.pair_assignments:
            if t.task_id == task_id:
                return t
        raise HumanEvalError(f"unknown task {task_id!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "systems": self.systems,
                "samples": self.samples,
                "raters": self.raters,
                "pair_assignments": [
                    [t.task_id, t.sample_id, t.left_system, t.right_system]
                    for t in self.pair_assignments
                ],
                "generations": self.generations,
                "prompts": self.prompts,
                "metrics": list(self.metrics),
                "seed": self.seed,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, s: str) -> "Study":
        d = json.loads(s)
        d["pair_assignments"] = [PairTask(*row) for row in d["pair_assignments"]]
        d["metrics"] = tuple(d["metrics"])
        return cls(**d)


def create_study(
    systems: list[str],
    generations: dict[str, dict[str, str]],
    sample_count: int,
    rater_ids: list[str],
    seed: int,
    prompts: dict[str, str] | None = None,
    study_id: str | None = None,
) -> Study:
    """Sample documents and build one blinded task per system pair per sample.

    Samples are drawn uniformly without replacement; each task's left/right
    side is an independent fair coin. Every task goes to every rater.
    """
    if len(systems) < 2 or len(set(systems)) != len(systems):
        raise HumanEvalError("need at least two distinct systems")
    if not rater_ids:
        raise HumanEvalError("need at least one rater")
    pool = sorted({s for gen in generations.values() for s in gen})
    if sample_count > len(pool):
        raise HumanEvalError(f"asked for {sample_count} samples but only {len(pool)} available")
    rng = np.random.Generator(np.random.Philox(seed))
    chosen = [pool[i] for i in rng.permutation(len(pool))[:sample_count]]
    for system in systems:
        for sample in chosen:
            if sample not in generations.get(system, {}):
                raise HumanEvalError(f"no generation for system {system!r} sample {sample!r}")

    tasks = []
    counter = 0
    for a, b in itertools.combinations(systems, 2):
        for sample in chosen:
            left, right = (a, b) if rng.random() < 0.5 else (b, a)
            tasks.append(PairTask(f"t{counter:05d}", sample, left, right))
            counter += 1
    return Study(
        id=study_id or f"study-{seed}",
        systems=list(systems),
        samples=chosen,
        raters=list(rater_ids),
        pair_assignments=tasks,
        generations={s: dict(generations[s]) for s in systems},
        prompts=dict(prompts or {}),
        seed=seed,
    )


def latest_judgments(judgments) -> dict[tuple[str, str, str], Judgment]:
    """Upsert fold: the last event per (task, rater, metric) wins."""
    state: dict[tuple[str, str, str], Judgment] = {}
    for j in judgments:
        state[(j.task_id, j.rater_id, j.metric)] = j
    return state


class JudgmentLog:
    """Append-only event log with upsert-on-replay semantics."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.events: list[Judgment] = []
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                self.events = [Judgment.from_json(line) for line in fh if line.strip()]

    def record(self, study: Study, judgment: Judgment) -> Judgment:
        """Validate against the study, append to the log, then ack."""
        study.task(judgment.task_id)
        if judgment.rater_id not in study.raters:
            raise HumanEvalError(f"rater {judgment.rater_id!r} not in study")
        if judgment.timestamp == 0.0:
            judgment = Judgment(
                judgment.task_id, judgment.rater_id, judgment.metric, judgment.verdict, time.time()
            )
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(judgment.to_json() + "\n")
        self.events.append(judgment)
        return judgment

    def state(self) -> dict[tuple[str, str, str], Judgment]:
        return latest_judgments(self.events)


# ------------------------------------------------------------------ win matrix


@dataclass
class WinMatrix:
    """cells[metric][(row, col)] = percent of decided comparisons row won."""

    systems: tuple[str, ...]
    cells: dict[str, dict[tuple[str, str], float]]

    def cell(self, metric: str, row: str, col: str) -> float | None:
        return self.cells.get(metric, {}).get((row, col))

    def as_nested(self) -> dict:
        out: dict = {}
        for metric in METRICS:
            out[metric] = {
                row: {
                    col: self.cell(metric, row, col)
                    for col in self.systems
                    if col != row
                }
                for row in self.systems
            }
        return out


def win_matrix(study: Study, judgments) -> WinMatrix:
    """Pairwise win percentages per metric; indistinguishable verdicts are
    skipped when counting winners. Pairs with no decided comparison get no
    cell."""
    tasks = {t.task_id: t for t in study.pair_assignments}
    wins: dict[str, dict[tuple[str, str], int]] = {m: {} for m in METRICS}
    for j in latest_judgments(judgments).values():
        if j.verdict == "indistinguishable":
            continue
        task = tasks.get(j.task_id)
        if task is None:
            raise HumanEvalError(f"judgment references unknown task {j.task_id!r}")
        winner = task.left_system if j.verdict == "left" else task.right_system
        loser = task.right_system if j.verdict == "left" else task.left_system
        wins[j.metric][(winner, loser)] = wins[j.metric].get((winner, loser), 0) + 1

    cells: dict[str, dict[tuple[str, str], float]] = {m: {} for m in METRICS}
    for metric in METRICS:
        for a, b in itertools.combinations(study.systems, 2):
            wa = wins[metric].get((a, b), 0)
            wb = wins[metric].get((b, a), 0)
            if wa + wb == 0:
                continue
            cells[metric][(a, b)] = 100.0 * wa / (wa + wb)
            cells[metric][(b, a)] = 100.0 * wb / (wa + wb)
    return WinMatrix(systems=tuple(study.systems), cells=cells)


# ------------------------------------------------------------------ kappa


@dataclass(frozen=True)
class KappaResult:
    value: float
    degenerate: bool
    n_items: int
    n_excluded: int
    n_raters: int

    @property
    def band(self) -> str:
        return kappa_band(self.value)


def kappa_band(value: float) -> str:
    """Interpretation band; edges at 0, 0.2, 0.4, 0.6, 0.8."""
    if value < 0:
        return KAPPA_BANDS[0][1]
    for upper, label in KAPPA_BANDS[1:]:
        if value <= upper + 1e-12:
            return label
    return KAPPA_BANDS[-1][1]


def fleiss_kappa(
    study: Study,
    judgments,
    metric: str,
    pair,
    drop_indistinguishable: bool = False,
) -> KappaResult:
    """Fleiss' kappa over the tasks of one system pair for one metric.

    Items are tasks with a judgment from every rater (incomplete tasks are
    excluded and counted); categories are the blinded positions
    left/right/indistinguishable. With drop_indistinguishable=True, tasks
    containing any tie verdict are excluded and kappa runs on two categories.
    If every judgment lands in one category, observed agreement is perfect and
    1.0 is returned with the degenerate flag set.
    """
    if metric not in METRICS:
        raise HumanEvalError(f"unknown metric {metric!r}")
    pair = frozenset(pair)
    if not pair <= set(study.systems) or len(pair) != 2:
        raise HumanEvalError(f"unknown system pair {sorted(pair)}")
    r = len(study.raters)
    if r < 2:
        raise HumanEvalError("fleiss kappa needs at least 2 raters")
    state = latest_judgments(judgments)
    categories = ("left", "right") if drop_indistinguishable else VERDICTS

    rows = []
    excluded = 0
    for task in study.pair_assignments:
        if task.pair != pair:
            continue
        verdicts = []
        for rater in study.raters:
            j = state.get((task.task_id, rater, metric))
            if j is not None:
                verdicts.append(j.verdict)
        if len(verdicts) != r or (drop_indistinguishable and "indistinguishable" in verdicts):
            excluded += 1
            continue
        rows.append([verdicts.count(c) for c in categories])
    if len(rows) < 2:
        raise HumanEvalError(
            f"fleiss kappa needs >= 2 complete items, got {len(rows)} ({excluded} excluded)"
        )

    n = len(rows)
    p_bar = sum((sum(c * c for c in row) - r) / (r * (r - 1)) for row in rows) / n
    totals = [sum(row[k] for row in rows) for k in range(len(categories))]
    p_e = sum((t / (n * r)) ** 2 for t in totals)
    if abs(1.0 - p_e) < 1e-12:
        return KappaResult(1.0, True, n, excluded, r)
    value = (p_bar - p_e) / (1.0 - p_e)
    return KappaResult(value, False, n, excluded, r)
