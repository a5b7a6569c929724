"""
Configuration Management
========================

Environment settings, the central tolerance record and the flat
``key = value`` config file format shared by every CLI command.
"""

import logging
import os
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

from dotenv import load_dotenv
from dotenv.parser import parse_stream
from pydantic import BaseModel, Field

from cgcv.errors import ConfigurationError
from cgcv.io_formats import atomic_write

logger = logging.getLogger(__name__)

# Pick up a local .env once at import; real environment variables win
load_dotenv(override=False)


# ============================================
# ENVIRONMENT SETTINGS
# ============================================

class Settings(BaseModel):
    """Process-level settings read from the environment"""
    log_level: str = Field("INFO", description="Root log level for entry points")
    num_threads: int = Field(0, ge=0, description="torch intra-op threads (0 = torch default)")
    default_seed: int = Field(0, description="Seed used when a command gets none")

    @classmethod
    def from_env(cls) -> "Settings":
        """
        Raises:
            ConfigurationError: if a numeric variable is not an integer
        """
        return cls(
            log_level=os.getenv("CGCV_LOG_LEVEL", "INFO").upper(),
            num_threads=_env_int("CGCV_NUM_THREADS", 0),
            default_seed=_env_int("CGCV_DEFAULT_SEED", 0),
        )


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{name} must be an integer, got {raw!r}") from None


# ============================================
# NUMERIC TOLERANCES
# ============================================

class Tolerances(BaseModel):
    """All numeric tolerances in one place"""
    oracle_rtol_single: float = 1e-5
    oracle_rtol_double: float = 1e-12
    softmax_sum_atol: float = 1e-5
    pyramid_mean_atol: float = 1e-5
    gradcheck_rtol: float = 1e-4
    gradcheck_atol: float = 1e-7
    gradcheck_tiny_grad: float = 1e-6
    fd_step: float = 1e-5
    fd_max_coords: int = 64


TOLERANCES = Tolerances()


# ============================================
# KEY = VALUE CONFIG FILES
# ============================================

def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Parse a flat ``key = value`` file with the dotenv line grammar.

    Blank lines and ``#`` comments are ignored. Keys are lower-cased and
    dashes are folded to underscores so file keys match CLI flag names.

    Raises:
        ConfigurationError: on a line without ``=`` or an unparsable line
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")

    values: Dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as stream:
            bindings = list(parse_stream(stream))
    except UnicodeDecodeError as e:
        raise ConfigurationError(f"{path}: not UTF-8 text ({e.reason} at byte {e.start})") from None

    for binding in bindings:
        text = binding.original.string
        lineno = binding.original.line + text[:len(text) - len(text.lstrip())].count("\n")
        if binding.error:
            raise ConfigurationError(f"{path}:{lineno}: cannot parse {text.strip()!r}")
        if binding.key is None:
            continue
        if binding.value is None:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {binding.key!r}")
        values[binding.key.lower().replace("-", "_")] = binding.value

    logger.debug(f"Read {len(values)} keys from {path}")
    return values


def write_config_file(path: Union[str, Path], values: Mapping[str, object]) -> None:
    """Write a flat ``key = value`` file (lists are comma-joined), atomically"""
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{key} = {value}")
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def merge_overrides(file_values: Mapping[str, object],
                    cli_values: Mapping[str, Optional[object]]) -> Dict[str, object]:
    """CLI values override file values; ``None`` means the flag was not given"""
    merged: Dict[str, object] = dict(file_values)
    for key, value in cli_values.items():
        if value is not None:
            merged[key] = value
    return merged
