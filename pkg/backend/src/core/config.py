# src/core/config.py
import os
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel, Field

TOOL_VERSION = "0.3.0"

PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent.parent


class Settings(BaseModel):
    log_level: str = "INFO"
    output_root: Path = PROJECT_ROOT / "output"
    workers: int = Field(default=1, ge=1)


@lru_cache
def get_settings() -> Settings:
    """
    Environment-driven settings. Values in a local .env file are loaded first
    and never override variables already set in the process environment.
    """
    load_dotenv()

    values = {}
    if "CRASHSIM_LOG_LEVEL" in os.environ:
        values["log_level"] = os.environ["CRASHSIM_LOG_LEVEL"]
    if "CRASHSIM_OUTPUT_ROOT" in os.environ:
        values["output_root"] = Path(os.environ["CRASHSIM_OUTPUT_ROOT"])
    if "CRASHSIM_WORKERS" in os.environ:
        values["workers"] = int(os.environ["CRASHSIM_WORKERS"])

    return Settings(**values)
