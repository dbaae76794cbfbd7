import asyncio
import logging
import math
from typing import Any, Callable

from fastapi import HTTPException
from pydantic import BaseModel, ValidationError

from app.core.exceptions import HomogenizationError

logger = logging.getLogger(__name__)


def finite_json(obj: Any) -> Any:
    """JSON-ready copy with NaN/inf replaced by null."""
    if isinstance(obj, BaseModel):
        obj = obj.model_dump(mode="json")
    if isinstance(obj, dict):
        return {k: finite_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [finite_json(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


async def run_blocking(fn: Callable[..., Any], *args, **kwargs) -> Any:
    """Run numerical work off the event loop; library errors become HTTP errors."""
    try:
        result = await asyncio.to_thread(fn, *args, **kwargs)
    except HomogenizationError as e:
        logger.warning(f"⚠️ {type(e).__name__}: {e.message}")
        raise HTTPException(status_code=e.status_code, detail=e.message)
    except ValidationError as e:
        detail = [{"loc": list(err["loc"]), "msg": err["msg"]} for err in e.errors()]
        raise HTTPException(status_code=422, detail=detail)
    return finite_json(result)
