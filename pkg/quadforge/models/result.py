from typing import Any, Optional

from pydantic import BaseModel, ConfigDict


class WorkItem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    index: int
    payload: Any


class ChunkResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    processor: str
    index: int
    output: Any = None
    error: Optional[str] = None
