import itertools

import numpy as np
import pytest

from paramark.humaneval import (
    METRICS,
    HumanEvalError,
    Judgment,
    JudgmentLog,
    create_study,
    fleiss_kappa,
    kappa_band,
    latest_judgments,
    win_matrix,
)


def gens_for(systems, n_samples):
    return {s: {f"s{i:03d}": f"text {s} {i}" for i in range(n_samples)} for s in systems}


def study_of(systems, n_samples=50, raters=("r1", "r2"), seed=0):
    return create_study(
        systems, gens_for(systems, n_samples), n_samples, list(raters), seed
    )


# ---------------------------------------------------------------- creation

def test_three_systems_fifty_samples_150_tasks():
    study = study_of(["none", "sep", "eop"], 50)
    assert len(study.pair_assignments) == 150


def test_two_systems_fifty_tasks():
    study = study_of(["none", "eop"], 50)
    assert len(study.pair_assignments) == 50


def test_every_pair_sample_exactly_once():
    study = study_of(["a", "b", "c"], 20)
    combos = {(frozenset((t.left_system, t.right_system)), t.sample_id) for t in study.pair_assignments}
    assert len(combos) == len(study.pair_assignments)
    expected = {
        (frozenset(p), s)
        for p in itertools.combinations(study.systems, 2)
        for s in study.samples
    }
    assert combos == expected


def test_same_seed_identical_assignments():
    a = study_of(["x", "y"], 30, seed=5)
    b = study_of(["x", "y"], 30, seed=5)
    assert a.pair_assignments == b.pair_assignments
    assert a.samples == b.samples


def test_sides_are_randomized():
    study = study_of(["x", "y"], 50, seed=1)
    lefts = {t.left_system for t in study.pair_assignments}
    assert lefts == {"x", "y"}


def test_missing_generation_names_system_and_sample():
    gens = gens_for(["a", "b"], 10)
    del gens["b"]["s003"]
    with pytest.raises(HumanEvalError, match="'b'.*'s003'"):
        create_study(["a", "b"], gens, 10, ["r"], 0)


def test_sampling_without_replacement():
    study = study_of(["a", "b"], 40)
    assert len(set(study.samples)) == 40


def test_study_json_roundtrip():
    study = study_of(["a", "b"], 5)
    from paramark.humaneval import Study

    assert Study.from_json(study.to_json()) == study


# ---------------------------------------------------------------- recording

def test_record_upsert_overwrites(tmp_path):
    study = study_of(["a", "b"], 4)
    log = JudgmentLog(tmp_path / "log.jsonl")
    t = study.pair_assignments[0].task_id
    log.record(study, Judgment(t, "r1", "fluency", "left"))
    log.record(study, Judgment(t, "r1", "fluency", "right"))
    state = log.state()
    assert state[(t, "r1", "fluency")].verdict == "right"
    assert len(log.events) == 2  # log keeps history


def test_record_unknown_rater():
    study = study_of(["a", "b"], 4)
    log = JudgmentLog()
    with pytest.raises(HumanEvalError, match="not in study"):
        log.record(study, Judgment(study.pair_assignments[0].task_id, "nobody", "fluency", "left"))


def test_record_unknown_task():
    study = study_of(["a", "b"], 4)
    with pytest.raises(HumanEvalError, match="unknown task"):
        JudgmentLog().record(study, Judgment("t99999", "r1", "fluency", "left"))


def test_bad_verdict_rejected():
    with pytest.raises(HumanEvalError, match="verdict"):
        Judgment("t0", "r", "fluency", "both")
    with pytest.raises(HumanEvalError, match="metric"):
        Judgment("t0", "r", "speed", "left")


def test_log_replay_reproduces_state(tmp_path):
    study = study_of(["a", "b"], 6)
    path = tmp_path / "log.jsonl"
    log = JudgmentLog(path)
    rng = np.random.Generator(np.random.Philox(0))
    for t in study.pair_assignments:
        for rater in study.raters:
            for m in METRICS:
                v = ("left", "right", "indistinguishable")[int(rng.integers(0, 3))]
                log.record(study, Judgment(t.task_id, rater, m, v))
    replayed = JudgmentLog(path)
    assert replayed.state() == log.state()
    assert win_matrix(study, replayed.events) == win_matrix(study, log.events)


# ---------------------------------------------------------------- win matrix

def decide(study, task, winner, metric="overall_preference", rater="r1"):
    side = "left" if task.left_system == winner else "right"
    return Judgment(task.task_id, rater, metric, side)


def test_win_matrix_ties_skipped_11_9_5():
    study = study_of(["eop", "none"], 25)
    tasks = study.pair_assignments
    judgments = []
    for t in tasks[:11]:
        judgments.append(decide(study, t, "eop"))
    for t in tasks[11:20]:
        judgments.append(decide(study, t, "none"))
    for t in tasks[20:25]:
        judgments.append(Judgment(t.task_id, "r1", "overall_preference", "indistinguishable"))
    m = win_matrix(study, judgments)
    assert m.cell("overall_preference", "eop", "none") == pytest.approx(55.0)
    assert m.cell("overall_preference", "none", "eop") == pytest.approx(45.0)


def test_win_matrix_all_ties_absent():
    study = study_of(["a", "b"], 5)
    judgments = [
        Judgment(t.task_id, "r1", "fluency", "indistinguishable") for t in study.pair_assignments
    ]
    m = win_matrix(study, judgments)
    assert m.cell("fluency", "a", "b") is None


def test_win_matrix_sweep_100_0():
    study = study_of(["a", "b"], 5)
    judgments = [decide(study, t, "a", metric="fluency") for t in study.pair_assignments]
    m = win_matrix(study, judgments)
    assert m.cell("fluency", "a", "b") == 100.0
    assert m.cell("fluency", "b", "a") == 0.0


def test_win_matrix_complement_property():
    rng = np.random.Generator(np.random.Philox(17))
    study = study_of(["a", "b", "c"], 12)
    for _ in range(20):
        judgments = []
        for t in study.pair_assignments:
            for rater in study.raters:
                for m in METRICS:
                    if rng.random() < 0.3:
                        continue  # partial data allowed
                    v = ("left", "right", "indistinguishable")[int(rng.integers(0, 3))]
                    judgments.append(Judgment(t.task_id, rater, m, v))
        matrix = win_matrix(study, judgments)
        for metric in METRICS:
            for a, b in itertools.combinations(study.systems, 2):
                ab, ba = matrix.cell(metric, a, b), matrix.cell(metric, b, a)
                assert (ab is None) == (ba is None)
                if ab is not None:
                    assert ab + ba == pytest.approx(100.0, abs=1e-9)


# ---------------------------------------------------------------- kappa

def judge_all(study, per_task_verdicts, metric="fluency"):
    out = []
    for t, verdicts in zip(study.pair_assignments, per_task_verdicts):
        for rater, v in zip(study.raters, verdicts):
            out.append(Judgment(t.task_id, rater, metric, v))
    return out


def test_kappa_perfect_split_agreement():
    study = study_of(["a", "b"], 2)
    js = judge_all(study, [("left", "left"), ("right", "right")])
    k = fleiss_kappa(study, js, "fluency", ("a", "b"))
    assert k.value == pytest.approx(1.0)
    assert not k.degenerate


def test_kappa_full_disagreement_minus_one():
    study = study_of(["a", "b"], 2)
    js = judge_all(study, [("left", "right"), ("left", "right")])
    k = fleiss_kappa(study, js, "fluency", ("a", "b"))
    assert k.value == pytest.approx(-1.0)


def test_kappa_degenerate_single_category():
    study = study_of(["a", "b"], 3)
    js = judge_all(study, [("left", "left")] * 3)
    k = fleiss_kappa(study, js, "fluency", ("a", "b"))
    assert k.value == 1.0
    assert k.degenerate


def test_kappa_incomplete_tasks_excluded():
    study = study_of(["a", "b"], 4)
    js = judge_all(study, [("left", "left"), ("right", "right")])
    # two more tasks rated by only one rater
    t3, t4 = study.pair_assignments[2:4]
    js += [Judgment(t3.task_id, "r1", "fluency", "left")]
    k = fleiss_kappa(study, js, "fluency", ("a", "b"))
    assert k.n_items == 2
    assert k.n_excluded == 2


def test_kappa_too_few_items():
    study = study_of(["a", "b"], 3)
    js = judge_all(study, [("left", "left")])
    with pytest.raises(HumanEvalError, match="complete items"):
        fleiss_kappa(study, js, "fluency", ("a", "b"))


def test_kappa_side_relabel_invariance():
    rng = np.random.Generator(np.random.Philox(23))
    study = study_of(["a", "b"], 10, raters=("r1", "r2", "r3"))
    flip = {"left": "right", "right": "left", "indistinguishable": "indistinguishable"}
    for _ in range(25):
        verdicts = [
            tuple(("left", "right", "indistinguishable")[int(rng.integers(0, 3))] for _ in range(3))
            for _ in range(10)
        ]
        js = judge_all(study, verdicts)
        flipped = [Judgment(j.task_id, j.rater_id, j.metric, flip[j.verdict]) for j in js]
        k1 = fleiss_kappa(study, js, "fluency", ("a", "b"))
        k2 = fleiss_kappa(study, flipped, "fluency", ("a", "b"))
        assert k1.value == pytest.approx(k2.value, abs=1e-12)


def test_kappa_category_permutation_invariance():
    rng = np.random.Generator(np.random.Philox(29))
    study = study_of(["a", "b"], 8, raters=("r1", "r2"))
    perm = {"left": "indistinguishable", "indistinguishable": "right", "right": "left"}
    for _ in range(25):
        verdicts = [
            tuple(("left", "right", "indistinguishable")[int(rng.integers(0, 3))] for _ in range(2))
            for _ in range(8)
        ]
        js = judge_all(study, verdicts)
        relabeled = [Judgment(j.task_id, j.rater_id, j.metric, perm[j.verdict]) for j in js]
        k1 = fleiss_kappa(study, js, "fluency", ("a", "b"))
        k2 = fleiss_kappa(study, relabeled, "fluency", ("a", "b"))
        assert k1.value == pytest.approx(k2.value, abs=1e-12)


def test_kappa_drop_ties_toggle():
    study = study_of(["a", "b"], 4)
    js = judge_all(
        study,
        [("left", "left"), ("right", "right"), ("indistinguishable", "left"), ("left", "left")],
    )
    k = fleiss_kappa(study, js, "fluency", ("a", "b"), drop_indistinguishable=True)
    assert k.n_items == 3
    assert k.n_excluded == 1


def test_kappa_bands():
    assert kappa_band(-0.2) == "poor agreement"
    assert kappa_band(0.1) == "slight agreement"
    assert kappa_band(0.2) == "slight agreement"
    assert kappa_band(0.3) == "fair agreement"
    assert kappa_band(0.5) == "moderate agreement"
    assert kappa_band(0.65) == "substantial agreement"
    assert kappa_band(0.8) == "substantial agreement"
    assert kappa_band(0.81) == "almost perfect agreement"
    assert kappa_band(1.0) == "almost perfect agreement"


def test_latest_judgments_upsert():
    a = Judgment("t1", "r", "fluency", "left")
    b = Judgment("t1", "r", "fluency", "right")
    assert latest_judgments([a, b])[("t1", "r", "fluency")] is b
