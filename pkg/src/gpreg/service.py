"""HTTP service exposing the pipeline runners.

Run with ``uvicorn gpreg.service:app``.  Endpoints mirror the CLI
subcommands and operate on server-local paths; responses carry the run
manifest so results can be located and reproduced.  Precondition failures
map to 400, numerical aborts to 409.
"""

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from ._version import __version__
from .errors import NonFiniteLossError, PreconditionError
from .optim import GpConfig, conflict_rate
from .pipeline import resolve_mode, run_eval, run_register, run_sweep, run_synth


class SynthRequest(BaseModel):
    out: str
    seed: int = 0
    dims: tuple[int, int, int] = (48, 48, 48)
    blobs: int = 5
    max_disp: float = 4.0


class SynthResponse(BaseModel):
    manifest: dict


class RegisterRequest(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    fixed: str
    moving: str
    out: str
    mode: str = "gp"
    variant: str = "projected_onto"
    steps: int = 100
    lr: float = 0.1
    lam: float = Field(1.5, alias="lambda")
    wd: float = 1e-3
    seed: int = 0
    sigma: float = 5.0
    lncc_eps: float = 1e-5


class RegisterResponse(BaseModel):
    manifest: dict
    steps: int
    conflict_rate: float
    final_total: float


class EvalRequest(BaseModel):
    pair_dir: str
    fields_dir: str
    out: str


class EvalResponse(BaseModel):
    report: dict


class SweepRequest(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    out: str
    pairs: int
    seed: int = 0
    steps: int = 100
    modes: list[str] = ["scalar", "gp"]
    dims: tuple[int, int, int] = (48, 48, 48)
    blobs: int = 5
    max_disp: float = 4.0
    lr: float = 0.1
    lam: float = Field(1.5, alias="lambda")
    wd: float = 1e-3
    variant: str = "projected_onto"
    sigma: float = 5.0
    lncc_eps: float = 1e-5


class SweepResponse(BaseModel):
    manifest: dict
    aggregates: list[dict]


def create_app() -> FastAPI:
    app = FastAPI(title="gpreg", version=__version__)

    @app.exception_handler(PreconditionError)
    async def precondition_handler(request, exc: PreconditionError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(NonFiniteLossError)
    async def nonfinite_handler(request, exc: NonFiniteLossError):
        return JSONResponse(status_code=409,
                            content={"detail": str(exc),
                                     "steps_completed": len(exc.logs)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest) -> SynthResponse:
        _, manifest = run_synth(req.out, req.seed, req.dims, req.blobs,
                                req.max_disp)
        return SynthResponse(manifest=manifest)

    @app.post("/register", response_model=RegisterResponse)
    def register(req: RegisterRequest) -> RegisterResponse:
        cfg = GpConfig(lam=req.lam, steps=req.steps, lr=req.lr,
                       weight_decay=req.wd, mode=resolve_mode(req.mode),
                       denominator_variant=req.variant, seed=req.seed,
                       sigma=req.sigma, lncc_eps=req.lncc_eps)
        _, _, logs, manifest = run_register(req.fixed, req.moving, req.out, cfg)
        return RegisterResponse(manifest=manifest, steps=len(logs),
                                conflict_rate=conflict_rate(logs),
                                final_total=logs[-1].total)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest) -> EvalResponse:
        _, report = run_eval(req.pair_dir, req.fields_dir, req.out)
        return EvalResponse(report=report)

    @app.post("/sweep", response_model=SweepResponse)
    def sweep(req: SweepRequest) -> SweepResponse:
        _, aggregates, manifest = run_sweep(
            req.out, req.pairs, req.seed, req.steps, req.modes, req.dims,
            req.blobs, req.max_disp, req.lr, req.lam, req.wd, req.variant,
            req.sigma, req.lncc_eps)
        return SweepResponse(manifest=manifest, aggregates=aggregates)

    return app


app = create_app()
