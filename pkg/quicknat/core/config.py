from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from quicknat.core.exceptions import UsageError

PACKAGE_DIR = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="QUICKNAT_", extra="ignore")

    PROJECT_NAME: str = "QuickNAT desk-scale toolkit"
    LOG_LEVEL: str = "INFO"
    OUTPUT_DIR: str = "runs"
    DEFAULT_SEED: int = 0
    TRAIN_DTYPE: str = "float32"
    REMAP_TABLE_PATH: str = str(PACKAGE_DIR / "data" / "remap_table.csv")
    CHECKPOINT_SUFFIX: str = ".ckpt"
    VIEW_WEIGHTS: str = "0.4,0.4,0.2"  # axial, coronal, sagittal

    @property
    def view_weights_list(self) -> list:
        """Parse VIEW_WEIGHTS string into a list of floats"""
        return [float(w.strip()) for w in self.VIEW_WEIGHTS.split(",") if w.strip()]


settings = Settings()


def parse_key_value_text(text: str) -> Dict[str, str]:
    """Parse `key = value` lines; blank lines and `#` comments are skipped."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"config line {lineno}: empty key")
        values[key] = value
    return values


def load_run_config(path: Path, defaults: Optional[Dict[str, Any]] = None, **overrides: Any):
    """Read a key-value run config file into a validated RunConfig.

    Precedence: `overrides` (non-None) over file values over `defaults`.
    """
    from quicknat.models.training import RunConfig

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values: Dict[str, Any] = dict(defaults or {})
    values.update(parse_key_value_text(path.read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise UsageError(f"invalid run config {path}: {e}") from e


def dump_run_config(config) -> str:
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
