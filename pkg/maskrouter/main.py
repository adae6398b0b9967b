# maskrouter/main.py
import os
from contextlib import asynccontextmanager
from typing import List, Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from maskrouter.engine.router import MaskRegistry, StorageReport, load_registry
from maskrouter.utils.errors import ContractError, MaskRouterError, UnknownTaskError
from maskrouter.utils.logger import setup_logger

# Load environment variables from .env file
load_dotenv()

logger = setup_logger("maskrouter")

# Global registry instance
registry: Optional[MaskRegistry] = None


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup
    global registry
    manifest = os.getenv("MASKROUTER_MANIFEST")
    if not manifest:
        logger.error("MASKROUTER_MANIFEST not set; no registry to serve")
        registry = None
    else:
        try:
            registry = load_registry(manifest)
            logger.info(f"Registry loaded from {manifest}: tasks={registry.task_ids}")
        except MaskRouterError as e:
            logger.error(f"Failed to load registry: {type(e).__name__}: {e}")
            registry = None

    yield

    # Shutdown
    logger.info("Shutting down...")


app = FastAPI(
    title="Mask Router API",
    description="Routed inference: one frozen backbone, per-task binary masks and heads",
    version="1.0.0",
    lifespan=lifespan,
)


# Request models
class PredictRequest(BaseModel):
    task_id: str
    tokens: List[List[int]]
    return_logits: bool = False


class PredictResponse(BaseModel):
    task_id: str
    labels: List[int]
    logits: Optional[List[List[float]]] = None


class TaskInfo(BaseModel):
    task_id: str
    n_classes: int
    sparsity: float
    scope: str
    masked_layers: int
    mode: str


def _registry() -> MaskRegistry:
    if registry is None:
        raise HTTPException(
            status_code=503,
            detail="Registry not loaded. Check server logs and MASKROUTER_MANIFEST.",
        )
    return registry


def _task_info(reg: MaskRegistry, task_id: str) -> TaskInfo:
    slot = reg.slot(task_id)
    return TaskInfo(
        task_id=task_id,
        n_classes=slot.head.n_classes,
        sparsity=slot.budget.sparsity,
        scope=str(slot.scope),
        masked_layers=len(slot.masks or {}),
        mode=slot.mode.value,
    )


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {
        "status": "healthy",
        "registry_status": "loaded" if registry is not None else "not_loaded",
        "task_count": len(registry) if registry is not None else 0,
    }


@app.get("/tasks")
async def list_tasks():
    reg = _registry()
    tasks = [_task_info(reg, tid) for tid in reg.task_ids]
    return {"tasks": tasks, "total_count": len(tasks)}


@app.get("/tasks/{task_id}", response_model=TaskInfo)
async def get_task(task_id: str):
    reg = _registry()
    try:
        return _task_info(reg, task_id)
    except UnknownTaskError as e:
        raise HTTPException(status_code=404, detail=str(e))


@app.post("/predict", response_model=PredictResponse)
async def predict(request: PredictRequest):
    """Switch to the requested task and classify a token batch"""
    reg = _registry()
    try:
        model = reg.switch_task(request.task_id)
        logits = model.logits(request.tokens)
    except UnknownTaskError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except (ContractError, ValueError) as e:
        logger.warning(f"Rejected predict request for {request.task_id}: {e}")
        raise HTTPException(status_code=422, detail=str(e))

    return PredictResponse(
        task_id=request.task_id,
        labels=[int(v) for v in logits.argmax(axis=1)],
        logits=logits.tolist() if request.return_logits else None,
    )


@app.get("/storage", response_model=StorageReport)
async def storage():
    reg = _registry()
    try:
        return reg.storage_report()
    except ContractError as e:
        raise HTTPException(status_code=422, detail=str(e))
