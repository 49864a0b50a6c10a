"""
Effective run configuration: built-in defaults < config file < command-line flags

The config file is INI-style, ``key = value`` lines under section headers:

    [paths]   out_dir
    [window]  center, width
    [unet]    levels, base_channels
    [train]   epochs, batch_size, lr, beta1, beta2, eps, dice_smooth, seed,
              black_frac, finetune_epochs
    [loader]  workers, queue_ratio
    [split]   ratios (comma separated), seed
    [eval]    threshold
"""
import configparser
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from config import config
from src.models import AdamConfig, LoaderConfig, TrainConfig, UNetConfig, WindowSpec

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Unknown key, unreadable file or contradictory settings"""


# (section, key) -> location inside the RunConfig document
KEY_PATHS: Dict[Tuple[str, str], Tuple[str, ...]] = {
    ("paths", "out_dir"): ("out_dir",),
    ("window", "center"): ("window", "center"),
    ("window", "width"): ("window", "width"),
    ("unet", "levels"): ("unet", "levels"),
    ("unet", "base_channels"): ("unet", "base_channels"),
    ("train", "epochs"): ("train", "epochs"),
    ("train", "batch_size"): ("train", "batch_size"),
    ("train", "lr"): ("train", "adam", "lr"),
    ("train", "beta1"): ("train", "adam", "beta1"),
    ("train", "beta2"): ("train", "adam", "beta2"),
    ("train", "eps"): ("train", "adam", "eps"),
    ("train", "dice_smooth"): ("train", "dice_smooth"),
    ("train", "seed"): ("train", "seed"),
    ("train", "black_frac"): ("train", "black_frac"),
    ("train", "finetune_epochs"): ("train", "finetune_epochs"),
    ("loader", "workers"): ("loader", "workers"),
    ("loader", "queue_ratio"): ("loader", "queue_ratio"),
    ("split", "ratios"): ("split_ratios",),
    ("split", "seed"): ("split_seed",),
    ("eval", "threshold"): ("threshold",),
}


class RunConfig(BaseModel):
    """Every setting a subcommand may consume, validated up front"""
    out_dir: str = "runs"
    window: WindowSpec = Field(default_factory=WindowSpec)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loader: LoaderConfig = Field(default_factory=LoaderConfig)
    split_ratios: Tuple[float, float, float] = config.SPLIT_RATIOS
    split_seed: int = config.SPLIT_SEED
    threshold: float = Field(default=config.THRESHOLD, ge=0, le=1)
    max_workers: int = Field(default=config.MAX_WORKERS, ge=1)

    @field_validator("split_ratios", mode="before")
    @classmethod
    def parse_ratios(cls, v):
        if isinstance(v, str):
            try:
                v = tuple(float(part) for part in v.split(","))
            except ValueError:
                raise ValueError(f"ratios must be comma-separated numbers, got {v!r}")
        return v

    @field_validator("split_ratios")
    @classmethod
    def check_ratios(cls, v):
        if any(r <= 0 for r in v):
            raise ValueError(f"ratios must be positive, got {v}")
        if abs(sum(v) - 1.0) > 1e-6:
            raise ValueError(f"ratios must sum to 1, got {sum(v)}")
        return v

    @model_validator(mode="after")
    def check_worker_cap(self):
        if self.loader.workers > self.max_workers:
            raise ValueError(f"loader.workers={self.loader.workers} exceeds the cap of {self.max_workers} (NODULE_MAX_WORKERS)")
        return self

    @property
    def adam(self) -> AdamConfig:
        return self.train.adam


def _assign(doc: Dict[str, Any], path: Tuple[str, ...], value: Any):
    node = doc
    for part in path[:-1]:
        node = node.setdefault(part, {})
    node[path[-1]] = value


def read_config_file(path: Path) -> Dict[Tuple[str, str], str]:
    """Raw (section, key) -> value strings from an INI file; unknown keys are errors"""
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    values = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if (section, key) not in KEY_PATHS:
                raise ConfigError(f"{path}: unknown setting [{section}] {key}")
            values[(section, key)] = value
    return values


def build_run_config(config_file: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Merge the config file and flag overrides over the built-in defaults

    Args:
        config_file: optional INI file
        overrides: "section.key" -> value; None values mean "flag not given"

    Raises:
        ConfigError: unknown key or unreadable file
        pydantic.ValidationError: a merged value fails validation
    """
    doc: Dict[str, Any] = {}
    if config_file is not None:
        for key, value in read_config_file(Path(config_file)).items():
            _assign(doc, KEY_PATHS[key], value)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if (section, key) not in KEY_PATHS:
            raise ConfigError(f"unknown setting {dotted}")
        _assign(doc, KEY_PATHS[(section, key)], value)
    run_config = RunConfig.model_validate(doc)
    logger.info("Effective config: %s", run_config.model_dump_json())
    return run_config
