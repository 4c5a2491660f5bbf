"""JSON HTTP facade for the what-if UI.

Handlers are stateless orchestration over the immutable engine; every number
in a response comes from the same library calls the CLI uses. The only
mutable state is the optimization job registry, guarded by a lock, with one
job running at a time and the rest queued.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import asdict, dataclass, field

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .engine import Engine, InvalidAssignmentError
from .geo import CityGraph
from .optimize import AnnealingConfig, anneal, surrogate_evaluator


class EvaluateRequest(BaseModel):
    assignment: dict[str, str]
    exact: bool = False


class ScheduleRequest(BaseModel):
    initial_temp: float | None = None
    cooling_rate: float = 0.95
    iters_per_temp: int = 200
    max_temps: int = 50
    stall_limit: int = 10


class OptimizeRequest(BaseModel):
    seed: int = 0
    max_shifts: int | None = None
    schedule: ScheduleRequest = ScheduleRequest()
    idempotency_key: str | None = None


@dataclass
class OptimizeJob:
    id: str
    status: str = "queued"            # queued / running / done / failed
    progress: float = 0.0             # completed temperature fraction
    idempotency_key: str | None = None
    result_assignment: dict[str, str] | None = None
    objective: float | None = None
    shifts_from_base: int | None = None
    error: str | None = None
    trace: list[dict] = field(default_factory=list)


class JobRegistry:
    """Serial job executor; terminal job states never change afterwards."""

    def __init__(self, engine: Engine):
        self._engine = engine
        self._jobs: dict[str, OptimizeJob] = {}
        self._lock = threading.Lock()
        self._queue: queue.Queue[tuple[OptimizeJob, OptimizeRequest]] = queue.Queue()
        self._counter = 0
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def submit(self, request: OptimizeRequest) -> OptimizeJob | None:
        with self._lock:
            if request.idempotency_key is not None:
                for job in self._jobs.values():
                    if (job.idempotency_key == request.idempotency_key
                            and job.status in ("queued", "running")):
                        return None
            self._counter += 1
            job = OptimizeJob(id=f"job-{self._counter}",
                              idempotency_key=request.idempotency_key)
            self._jobs[job.id] = job
        self._queue.put((job, request))
        return job

    def get(self, job_id: str) -> OptimizeJob | None:
        with self._lock:
            return self._jobs.get(job_id)

    def _run(self):
        while True:
            job, request = self._queue.get()
            with self._lock:
                job.status = "running"
            try:
                eng = self._engine
                constraints = eng.constraints
                if request.max_shifts is not None:
                    from dataclasses import replace
                    constraints = replace(constraints, max_shifts=request.max_shifts)
                cfg = AnnealingConfig(
                    initial_temp=request.schedule.initial_temp,
                    cooling_rate=request.schedule.cooling_rate,
                    iters_per_temp=request.schedule.iters_per_temp,
                    max_temps=request.schedule.max_temps,
                    stall_limit=request.schedule.stall_limit,
                    seed=request.seed)

                def on_temp(done, total):
                    with self._lock:
                        job.progress = done / total

                best, f_best, trace = anneal(
                    eng.city, eng.base, surrogate_evaluator(eng.surrogate),
                    constraints, cfg, on_temperature=on_temp)
                from .geo import design_diff
                with self._lock:
                    job.result_assignment = dict(best.assignment)
                    job.objective = f_best
                    job.shifts_from_base = design_diff(eng.base, best)[0]
                    job.trace = trace[-50:]
                    job.progress = 1.0
                    job.status = "done"
            except Exception as exc:  # surfaced to the client, job is terminal
                with self._lock:
                    job.error = str(exc)
                    job.status = "failed"


def create_app(engine: Engine | None, static_dir: str | None = None,
               city_only: CityGraph | None = None) -> FastAPI:
    """Build the service app.

    ``engine=None`` serves 503 everywhere (pre-initialization); ``city_only``
    additionally enables the static city payload for servers that have
    geometry but no baseline design yet.
    """
    app = FastAPI(title="zonedesign service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    registry = JobRegistry(engine) if engine is not None else None

    def city_payload(city: CityGraph) -> dict:
        features = []
        for beat in city.beats:
            features.append({
                "type": "Feature",
                "properties": {"beat_id": beat, "area_km2": city.area[beat]},
                "geometry": (city.geometry or {}).get(beat),
            })
        return {
            "type": "FeatureCollection",
            "features": features,
            "adjacency": sorted(list(p) for p in city.adjacency),
        }

    @app.get("/city")
    def get_city():
        city = engine.city if engine is not None else city_only
        if city is None:
            return JSONResponse({"detail": "service not initialized"}, status_code=503)
        return city_payload(city)

    @app.get("/design/base")
    def get_base_design():
        if engine is None:
            if city_only is not None:
                return JSONResponse({"detail": "no base design loaded"}, status_code=404)
            return JSONResponse({"detail": "service not initialized"}, status_code=503)
        return {
            "assignment": dict(sorted(engine.base.assignment.items())),
            "zones": list(engine.base.zones),
            "constraints": {
                "max_shifts": engine.constraints.max_shifts,
                "n_max": engine.constraints.n_max,
                "zeta1": engine.constraints.zeta1,
                "zeta2": engine.constraints.zeta2,
            },
        }

    @app.post("/evaluate")
    def evaluate(request: EvaluateRequest):
        if engine is None:
            return JSONResponse({"detail": "service not initialized"}, status_code=503)
        try:
            response = engine.evaluate(request.assignment, exact=request.exact)
        except InvalidAssignmentError as exc:
            return JSONResponse({"detail": "invalid assignment",
                                 "violations": exc.violations}, status_code=422)
        return asdict(response)

    @app.post("/optimize")
    def optimize_job(request: OptimizeRequest):
        if engine is None:
            return JSONResponse({"detail": "service not initialized"}, status_code=503)
        job = registry.submit(request)
        if job is None:
            return JSONResponse(
                {"detail": f"job with idempotency key {request.idempotency_key!r} "
                           "is already running"}, status_code=409)
        return {"job_id": job.id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        if engine is None:
            return JSONResponse({"detail": "service not initialized"}, status_code=503)
        job = registry.get(job_id)
        if job is None:
            return JSONResponse({"detail": f"no job {job_id}"}, status_code=404)
        return asdict(job)

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
