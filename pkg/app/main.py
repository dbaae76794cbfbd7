import logging
from contextlib import asynccontextmanager
from fastapi import APIRouter, FastAPI
from fastapi.middleware.cors import CORSMiddleware
from app.core.config import settings
from app.core.log_config import setup_logging
from app.core.rng import ALGORITHM
from app.routes import cell, clouds, experiments, grid

# --- 1. Setup Logging ---
setup_logging()
logger = logging.getLogger(__name__)

# --- 2. Lifespan (Startup/Shutdown) ---
@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Executes on Startup.
    """
    threads = settings.HOMOG_THREADS or "executor default"
    logger.info(f"🚀 {settings.PROJECT_NAME} ready (rng={ALGORITHM}, threads={threads})")

    yield

    logger.info("🛑 Shutting down...")

# --- 3. App Definition ---
app = FastAPI(
    title=settings.PROJECT_NAME,
    lifespan=lifespan
)

# --- 4. CORS ---
if settings.BACKEND_CORS_ORIGINS:
    app.add_middleware(
        CORSMiddleware,
        allow_origins=[str(origin) for origin in settings.BACKEND_CORS_ORIGINS],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

# --- 5. Include Routers ---
api_router = APIRouter()

api_router.include_router(clouds.router, prefix="/clouds", tags=["Clouds"])
api_router.include_router(cell.router, prefix="/cell", tags=["Cell problem"])
api_router.include_router(grid.router, prefix="/grid", tags=["Grids"])
api_router.include_router(experiments.router, prefix="/experiments", tags=["Experiments"])

# Mount the API router under /api/v1
app.include_router(api_router, prefix=settings.API_V1_STR)

@app.get("/health")
def health_check():
    return {"status": "ok", "app": settings.PROJECT_NAME}

@app.get("/")
def root():
    return {"message": f"Welcome to {settings.PROJECT_NAME}!"}

if __name__ == "__main__":
    import uvicorn
    uvicorn.run("app.main:app", host="0.0.0.0", port=8000, reload=True)
