"""HTTP front for human-evaluation studies.

Endpoints (JSON in/out, errors as {code, message}):

* POST /studies                     create a study (admin token required)
* GET  /studies/{id}/tasks?rater=R  next unjudged task for a rater, blinded
* POST /studies/{id}/judgments      record one judgment (idempotent upsert)
* GET  /studies/{id}/report         win matrices, kappas, completion,
                                    unblinded mapping (admin token required)

Rater-facing payloads never contain system names; the (task, side) -> system
mapping is only reachable through the admin report.
"""

from __future__ import annotations

import itertools
import threading
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, Header, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .humaneval import (
    METRICS,
    HumanEvalError,
    Judgment,
    JudgmentLog,
    Study,
    create_study,
    fleiss_kappa,
    win_matrix,
)


class StudyStore:
    """Study definitions plus append-only judgment logs under one directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.studies: dict[str, Study] = {}
        self.logs: dict[str, JudgmentLog] = {}
        self.lock = threading.Lock()
        for path in sorted(self.root.glob("*.study.json")):
            study = Study.from_json(path.read_text(encoding="utf-8"))
            self.studies[study.id] = study
            self.logs[study.id] = JudgmentLog(self.root / f"{study.id}.judgments.jsonl")

    def add(self, study: Study) -> None:
        with self.lock:
            if study.id in self.studies:
                raise HumanEvalError(f"study {study.id!r} already exists")
            (self.root / f"{study.id}.study.json").write_text(study.to_json(), encoding="utf-8")
            self.studies[study.id] = study
            self.logs[study.id] = JudgmentLog(self.root / f"{study.id}.judgments.jsonl")

    def get(self, study_id: str) -> Study:
        if study_id not in self.studies:
            raise KeyError(study_id)
        return self.studies[study_id]

    def record(self, study_id: str, judgment: Judgment) -> Judgment:
        study = self.get(study_id)
        with self.lock:
            return self.logs[study_id].record(study, judgment)


class CreateStudyRequest(BaseModel):
    systems: list[str]
    generations: dict[str, dict[str, str]]
    sample_count: int
    rater_ids: list[str]
    seed: int = 0
    prompts: dict[str, str] = {}
    study_id: str | None = None


class JudgmentRequest(BaseModel):
    task_id: str
    rater_id: str
    metric: Literal["topic_relevance", "fluency", "ending_quality", "overall_preference"]
    verdict: Literal["left", "right", "indistinguishable"]


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "message": message})


def _completion(study: Study, state: dict) -> dict:
    done = {}
    for rater in study.raters:
        finished = sum(
            1
            for t in study.pair_assignments
            if all((t.task_id, rater, m) in state for m in METRICS)
        )
        done[rater] = {"done": finished, "total": len(study.pair_assignments)}
    return done


def create_app(
    store: StudyStore | str | Path,
    admin_token: str = "paramark-admin",
    ui_dir: str | Path | None = None,
    rank_curve_csv: str | Path | None = None,
) -> FastAPI:
    if not isinstance(store, StudyStore):
        store = StudyStore(store)
    app = FastAPI(title="paramark human evaluation")
    app.state.store = store

    @app.exception_handler(HumanEvalError)
    async def _domain_error(request: Request, exc: HumanEvalError):
        return _error(400, "bad_request", str(exc))

    @app.exception_handler(KeyError)
    async def _missing(request: Request, exc: KeyError):
        return _error(404, "not_found", f"unknown study {exc.args[0]!r}")

    @app.exception_handler(RequestValidationError)
    async def _schema_error(request: Request, exc: RequestValidationError):
        return _error(400, "schema_error", str(exc.errors()[:3]))

    def require_admin(token: str | None) -> JSONResponse | None:
        if token != admin_token:
            return _error(403, "unauthorized", "admin token required")
        return None

    @app.post("/studies")
    def post_study(req: CreateStudyRequest, x_admin_token: str | None = Header(default=None)):
        if (err := require_admin(x_admin_token)) is not None:
            return err
        study = create_study(
            systems=req.systems,
            generations=req.generations,
            sample_count=req.sample_count,
            rater_ids=req.rater_ids,
            seed=req.seed,
            prompts=req.prompts,
            study_id=req.study_id,
        )
        store.add(study)
        return {"study_id": study.id, "num_tasks": len(study.pair_assignments)}

    @app.get("/studies/{study_id}/tasks")
    def next_task(study_id: str, rater: str = Query(...)):
        study = store.get(study_id)
        if rater not in study.raters:
            raise HumanEvalError(f"rater {rater!r} not in study")
        state = store.logs[study_id].state()
        total = len(study.pair_assignments)
        done = 0
        for task in study.pair_assignments:
            if all((task.task_id, rater, m) in state for m in METRICS):
                done += 1
                continue
            judged = {
                m: state[(task.task_id, rater, m)].verdict
                for m in METRICS
                if (task.task_id, rater, m) in state
            }
            return {
                "done": False,
                "task_id": task.task_id,
                "prompt": study.prompts.get(task.sample_id, ""),
                "generation_a": study.generations[task.left_system][task.sample_id],
                "generation_b": study.generations[task.right_system][task.sample_id],
                "metrics": list(METRICS),
                "judged": judged,
                "position": done,
                "total": total,
            }
        return {"done": True, "position": done, "total": total}

    @app.post("/studies/{study_id}/judgments")
    def post_judgment(study_id: str, req: JudgmentRequest):
        stored = store.record(
            study_id,
            Judgment(req.task_id, req.rater_id, req.metric, req.verdict),
        )
        return {"ok": True, "task_id": stored.task_id, "metric": stored.metric}

    @app.get("/studies/{study_id}/report")
    def report(study_id: str, x_admin_token: str | None = Header(default=None)):
        if (err := require_admin(x_admin_token)) is not None:
            return err
        study = store.get(study_id)
        events = store.logs[study_id].events
        matrix = win_matrix(study, events)
        kappas: dict[str, dict[str, dict | None]] = {}
        for metric in METRICS:
            kappas[metric] = {}
            for a, b in itertools.combinations(study.systems, 2):
                key = f"{a}|{b}"
                try:
                    k = fleiss_kappa(study, events, metric, (a, b))
                    kappas[metric][key] = {
                        "value": k.value,
                        "band": k.band,
                        "degenerate": k.degenerate,
                        "items": k.n_items,
                        "excluded": k.n_excluded,
                    }
                except HumanEvalError:
                    kappas[metric][key] = None
        return {
            "study_id": study.id,
            "systems": study.systems,
            "num_samples": len(study.samples),
            "num_tasks": len(study.pair_assignments),
            "raters": study.raters,
            "win_matrices": matrix.as_nested(),
            "kappas": kappas,
            "completion": _completion(study, store.logs[study_id].state()),
            "mapping": {
                t.task_id: {"left": t.left_system, "right": t.right_system, "sample": t.sample_id}
                for t in study.pair_assignments
            },
        }

    if rank_curve_csv is not None:
        curve_path = Path(rank_curve_csv)

        @app.get("/data/rank-curve.csv")
        def rank_curve():
            if not curve_path.exists():
                return _error(404, "not_found", "rank curve file missing")
            return FileResponse(curve_path, media_type="text/csv")

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
