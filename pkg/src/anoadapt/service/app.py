"""FastAPI surface of the anomaly-detection engine."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from ..errors import EngineError, TrainingAbortedError
from . import ops, schemas


def create_app() -> FastAPI:
    app = FastAPI(title="anoadapt", description="Feature-adaptation anomaly detection engine")

    def guarded(fn, *args):
        try:
            return fn(*args)
        except TrainingAbortedError as err:
            raise HTTPException(status_code=500, detail=f"training aborted: {err}")
        except (EngineError, ValueError, FileNotFoundError) as err:
            raise HTTPException(status_code=400, detail=str(err))

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/pretrain", response_model=schemas.PretrainResponse)
    def pretrain(req: schemas.PretrainRequest):
        return guarded(ops.run_pretrain, req)

    @app.post("/adapt", response_model=schemas.AdaptResponse)
    def adapt(req: schemas.AdaptRequest):
        return guarded(ops.run_adapt, req)

    @app.post("/score", response_model=schemas.ScoreResponse)
    def score(req: schemas.ScoreRequest):
        return guarded(ops.run_score, req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        return guarded(ops.run_eval, req)

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        return guarded(ops.run_synth, req)

    @app.post("/experiment", response_model=schemas.ExperimentResponse)
    def experiment(req: schemas.ExperimentRequest):
        return guarded(ops.run_experiment, req)

    @app.post("/bench-synth", response_model=schemas.BenchResponse)
    def bench_synth():
        return guarded(ops.run_bench)

    return app


app = create_app()
