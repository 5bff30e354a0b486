import json
import os
from typing import Any, Dict, Sequence

import numpy as np
from pydantic import BaseModel

from quadforge.models.field import BoundaryCurve, ScalarField
from quadforge.utils.logger import get_logger

logger = get_logger(__name__)

FLOAT_FORMAT = "%.17g"


def write_table(path: str, header: Sequence[str], rows: np.ndarray):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0:
        rows = np.zeros((0, len(header)))
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt=FLOAT_FORMAT)
    logger.debug(f"Wrote {len(rows)} rows to {path}")


def read_table(path: str) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_field(path: str, field: ScalarField):
    """Rows x,y,value in row-major node order."""
    x, y = field.grid.coords
    write_table(path, ("x", "y", "value"), np.column_stack([x.ravel(), y.ravel(), field.values.ravel()]))


def write_boundary(path: str, boundary: BoundaryCurve):
    write_table(path, ("mx", "my", "len", "nx", "ny"),
                np.column_stack([boundary.midpoints, boundary.lengths, boundary.normals]))


def write_models(path: str, header: Sequence[str], models: Sequence[BaseModel]):
    write_table(path, header, np.array([[getattr(model, key) for key in header] for model in models]))


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json", by_alias=True)
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    if isinstance(value, (complex, np.complexfloating)):
        return {"real": float(value.real), "imag": float(value.imag)}
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_json(path: str, document: Dict[str, Any]):
    with open(path, 'w') as file:
        json.dump(_jsonable(document), file, indent=2, sort_keys=True, allow_nan=True)
        file.write("\n")
    logger.debug(f"Wrote {path}")


def read_json(path: str) -> Dict[str, Any]:
    with open(path, 'r') as file:
        return json.load(file)


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
