import math
import re
from os import PathLike
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sohkan import __version__
from sohkan.data_utils import SplitOffsets
from sohkan.thermal_sim import CycleProfile, ResistanceSchedule, ThermalParams
from sohkan.trainer import TrainConfig
from sohkan.utils import generate_base64_hash, write_json


sohkan_version = __version__
if ver_match := re.match(r"^\d+\.\d+\.\d+", sohkan_version):
    sohkan_version = ver_match.group(0)

YAML_SUFFIXES = (".yaml", ".yml")
SECTIONS = ("thermal", "profile", "schedule", "train", "analysis")


class AnalysisConfig(BaseModel):
    """Settings of CC-phase detection, symbolic extraction and SoH reporting"""

    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    offset_handling: Literal["raw", "anchored"] = "raw"
    threshold_percent: float = Field(70.0, gt=0, le=100)
    n_samples: int = Field(1001, ge=2)
    ir_step_threshold: float = Field(0.5, gt=0)
    cc_tolerance: float = Field(0.05, ge=0)
    cc_current: float | None = Field(None, gt=0)


class PipelineConfig(BaseModel):
    """All settings of a run, one section per stage"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    thermal: ThermalParams = Field(default_factory=ThermalParams)
    profile: CycleProfile = Field(default_factory=CycleProfile)
    schedule: ResistanceSchedule = Field(default_factory=ResistanceSchedule)
    train: TrainConfig = Field(default_factory=TrainConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)

    @model_validator(mode="after")
    def check_split_offsets(self) -> "PipelineConfig":
        self.split_offsets().check_disjoint()
        return self

    def check_simulated_cc_phase(self):
        """Fail before simulating if the simulated CC phase cannot hold the horizon and split offsets.
        Measured datasets are checked against their own CC phases when the pairs are built."""
        offsets = self.split_offsets()
        required = offsets.max_offset + self.train.horizon_n + 1
        n_cc = math.floor(self.profile.cc_duration / self.thermal.tau + 1e-9)
        if n_cc < required:
            raise ValueError(
                f"cc_duration={self.profile.cc_duration} s holds {n_cc} samples, but horizon N={self.train.horizon_n}"
                f" with split offsets {offsets.as_dict()} needs {required}"
            )

    def split_offsets(self) -> SplitOffsets:
        return SplitOffsets.for_horizon(self.train.horizon_n)

    def snapshot(self) -> dict[str, Any]:
        """JSON-ready config, with the keys accepted by `load_config`."""
        return self.model_dump(mode="json", by_alias=True)

    def with_overrides(self, overrides: dict[str, dict[str, Any]]) -> "PipelineConfig":
        """Revalidated copy with `{section: {key: value}}` overrides applied. None values are ignored."""
        merged = self.snapshot()
        for section, values in overrides.items():
            if section not in SECTIONS:
                raise ValueError(f"Unknown config section '{section}', choose from {SECTIONS}")
            merged[section].update({key: value for key, value in values.items() if value is not None})
        return PipelineConfig(**merged)


class RunManifest(BaseModel):
    """Record of a finished command. It is written last, so a run is complete iff its manifest exists."""

    command: str
    config: dict[str, Any]
    inputs: list[str] = Field(default_factory=list)
    outputs: dict[str, str] = Field(default_factory=dict)
    seed: int
    version: str = sohkan_version
    wall_time: float

    def add_output(self, pfout: PathLike):
        self.outputs[str(pfout)] = generate_base64_hash(pfout)

    def write(self, out_dir: PathLike) -> Path:
        return write_json(self.model_dump(), Path(out_dir) / f"manifest-{self.command}.json")


def parse_flat_config(text: str, source: str = "<config>") -> dict[str, dict[str, Any]]:
    """Parse `key=value` lines into config sections. Bare keys (`lambda=0.001`) belong to the train
    section, dotted keys (`profile.current=3.0`) name their section. Values are parsed as YAML
    scalars; blank lines and `#` comments are skipped.
    """
    config: dict[str, dict[str, Any]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got '{line}'")

        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.rpartition(".")
        section = section or "train"
        if section not in SECTIONS:
            raise ValueError(f"{source}:{lineno}: unknown section '{section}', choose from {SECTIONS}")
        config.setdefault(section, {})[name] = yaml.safe_load(value) if value else None
    return config


def load_config(pfin: PathLike | None) -> PipelineConfig:
    """Load a YAML (`.yaml`/`.yml`) or flat key=value config. Without a path, the defaults are used."""
    if pfin is None:
        return PipelineConfig()

    pfin = Path(pfin)
    if not pfin.is_file():
        raise FileNotFoundError(f"Config file not found: {pfin}")

    text = pfin.read_text(encoding="utf-8")
    if pfin.suffix.lower() in YAML_SUFFIXES:
        config = yaml.safe_load(text) or {}
        if not isinstance(config, dict):
            raise ValueError(f"{pfin}: a YAML config must be a mapping of sections")
    else:
        config = parse_flat_config(text, source=str(pfin))

    return PipelineConfig(**config)
