"""Pipeline configuration with layered overrides.

Precedence, strongest first: explicit CLI flags, environment variables
(GIGASLIDE_DB, GIGASLIDE_DATA, GIGASLIDE_PORT), a JSON config file, and the
built-in defaults below.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ValidationError

# Skin spindle-cell neoplasm classes shipped as the default label set.
DEFAULT_CLASSES = ("lm", "lms", "df", "dfs", "mfc", "fxa", "cef")

ENV_DB = "GIGASLIDE_DB"
ENV_DATA = "GIGASLIDE_DATA"
ENV_PORT = "GIGASLIDE_PORT"


@dataclass
class Config:
    data_dir: str = "data"
    db_path: str = "gigaslide.db"
    port: int = 8080
    tile_size: int = 254
    overlap: int = 1
    tile_format: str = "png"
    patch_size: int = 512
    stride: int = 256
    min_tissue_fraction: float = 0.2
    tau: float = 0.5
    min_area_px: float = 1024.0
    map_scale: float = 0.125
    session_cap_minutes: float = 30.0
    classes: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValidationError("tile_size must be >= 1")
        if not (0 <= self.overlap < self.tile_size):
            raise ValidationError("overlap must be >= 0 and < tile_size")
        if not (1 <= self.stride <= self.patch_size):
            raise ValidationError("need patch_size >= stride >= 1")
        if not (0.0 <= self.min_tissue_fraction <= 1.0):
            raise ValidationError("min_tissue_fraction must be in [0, 1]")
        if not (0.0 < self.tau < 1.0):
            raise ValidationError("tau must be in (0, 1)")
        if not (0.0 < self.map_scale <= 1.0):
            raise ValidationError("map_scale must be in (0, 1]")
        if self.min_area_px < 0:
            raise ValidationError("min_area_px must be >= 0")
        if self.session_cap_minutes <= 0:
            raise ValidationError("session_cap_minutes must be > 0")
        self.classes = tuple(self.classes)


def load_config(file_path: str | None = None,
                env: dict[str, str] | None = None,
                **overrides) -> Config:
    """Assemble a Config from file < env < explicit overrides.

    ``overrides`` entries set to None are ignored so CLI flags can be passed
    through unconditionally.
    """
    env = os.environ if env is None else env
    values: dict = {}
    if file_path:
        try:
            with open(file_path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}") from exc
        known = {f.name for f in fields(Config)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        values.update(raw)
    if env.get(ENV_DB):
        values["db_path"] = env[ENV_DB]
    if env.get(ENV_DATA):
        values["data_dir"] = env[ENV_DATA]
    if env.get(ENV_PORT):
        try:
            values["port"] = int(env[ENV_PORT])
        except ValueError as exc:
            raise ValidationError(f"{ENV_PORT} must be an integer") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return Config(**values)


def ensure_dirs(cfg: Config) -> None:
    Path(cfg.data_dir).mkdir(parents=True, exist_ok=True)
    db_parent = Path(cfg.db_path).parent
    if str(db_parent) not in ("", "."):
        db_parent.mkdir(parents=True, exist_ok=True)
