import os
from enum import Enum
from typing import Any, Dict, List, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field

from quadforge.models.minimizer import SweepOrder
from quadforge.utils.logger import get_logger

logger = get_logger(__name__)

OUTPUT_ENV_VAR = "QUADFORGE_OUT"
DEFAULT_OUTPUT_DIR = "quadforge-out"


class Command(Enum):
    radial = "radial"
    thresholds = "thresholds"
    minimize = "minimize"
    verify = "verify"
    nonscatter = "nonscatter"
    sweep_lambda = "sweep-lambda"
    null_radii = "null-radii"


class RunConfig(BaseModel):
    """One run of the command-line front end. Keys left unset fall back to the documented defaults."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True, use_enum_values=False)

    command: Command
    # Radial problem
    n: int = 2
    lam: Optional[float] = Field(default=None, alias="lambda")
    a: Optional[float] = None
    b: Optional[float] = None
    r1: Optional[float] = None
    R: Optional[float] = None
    g: float = 0.0
    g_start: Optional[float] = None
    # Grid minimization
    m: int = 129
    sweep_order: SweepOrder = SweepOrder.lexicographic
    max_sweeps: int = 100_000
    lambdas: List[float] = []
    # Thresholds and mollification
    k: Optional[float] = None
    beta: Optional[float] = None
    eps: Optional[float] = None
    mass: Optional[float] = None
    b0: Optional[float] = None
    count: int = 3
    # Verification
    num_waves: int = 32
    ring_radius: Optional[float] = None
    ring_points: int = 64
    circle_nodes: int = 2048
    num_directions: int = 64
    delta_cells: float = 10.0
    comparison_trials: int = Field(default=8, ge=0)
    # Run control
    out: Optional[str] = None
    threads: int = Field(default=1, ge=1)
    # Seeds the random fields of the comparison trials.
    seed: int = 0

    def require(self, *keys: str) -> Dict[str, Any]:
        missing = [key for key in keys if getattr(self, key) is None]
        if missing:
            raise ValueError(f"Command '{self.command.value}' requires the keys {missing}.")
        return {key: getattr(self, key) for key in keys}

    @property
    def output_dir(self) -> str:
        return self.out or os.environ.get(OUTPUT_ENV_VAR) or DEFAULT_OUTPUT_DIR


def load_configuration_file(file_path: str) -> Dict[str, Any]:
    with open(file_path, 'r') as file:
        data = yaml.safe_load(file)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"Configuration file {file_path} must hold a mapping, got {type(data).__name__}.")
    return data


def parse_overrides(tokens: List[str]) -> Dict[str, Any]:
    """Turn `--key value` pairs into a dict; values are parsed as YAML scalars or lists."""
    overrides = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or i + 1 >= len(tokens):
            raise ValueError(f"Expected '--key value' overrides, got {tokens[i:]}.")
        key = token[2:].replace("-", "_")
        overrides[key] = yaml.safe_load(tokens[i + 1])
        i += 2
    return overrides


def build_run_config(command: str, file_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
                     ) -> RunConfig:
    data = load_configuration_file(file_path) if file_path else {}
    data.update(overrides or {})
    configured = data.pop("command", command)
    if configured != command:
        raise ValueError(f"Configuration is for command '{configured}' but '{command}' was requested.")
    config = RunConfig(command=Command(command), **data)
    logger.debug(f"Run configuration: {config.model_dump(mode='json', by_alias=True)}")
    return config
