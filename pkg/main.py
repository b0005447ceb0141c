from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from config import settings
from models import HealthResponse
from routes import runs

app = FastAPI(
    title="CSFT Run Browser",
    description="Read-only access to the artifacts of completed experiment runs",
    version="1.0.0",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["GET"],
    allow_headers=["*"],
)

app.include_router(runs.router, prefix="/api")


@app.get("/")
async def root():
    return {
        "message": "CSFT run browser",
        "version": "1.0.0",
        "runs_dir": settings.runs_dir,
        "endpoints": {
            "runs": "/api/runs",
            "config": "/api/runs/{run}/config",
            "metrics": "/api/runs/{run}/metrics/{stage}",
            "cis": "/api/runs/{run}/cis",
            "eval": "/api/runs/{run}/eval",
            "ablation": "/api/runs/{run}/ablation",
        },
    }


@app.get("/health", response_model=HealthResponse)
async def health_check() -> HealthResponse:
    return HealthResponse(status="healthy", message="Run browser is running")


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host=settings.host, port=settings.port)
