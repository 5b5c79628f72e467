"""Declarative dataset and run configuration.

A dataset is described by a YAML document listing its event tables, the
stays (demographics) table and an optional diagnoses table.  Paths inside a
dataset document are resolved relative to the document's directory.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

TimeFormat = Literal["datetime", "offset"]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DefinitionJoin(_Model):
    column: str
    path: str
    key_column: str
    value_column: str


class TableConfig(_Model):
    path: str
    event_type: str
    timestamp_column: str
    timestamp_format: TimeFormat = "offset"
    stay_id_column: str
    patient_id_column: Optional[str] = None
    definition_joins: list[DefinitionJoin] = Field(default_factory=list)
    excluded_columns: list[str] = Field(default_factory=list)


class StaysConfig(_Model):
    """Demographics / encounter table.

    With ``time_format: datetime`` all times are absolute.  With ``offset``
    the in-time orders stays inside an admission, while out-time and death
    time are minutes from that stay's unit admission.
    """

    path: str
    stay_id_column: str
    patient_id_column: str
    admission_id_column: str
    age_column: str
    intime_column: str
    outtime_column: str
    time_format: TimeFormat = "offset"
    discharge_location_column: str
    expired_column: str
    expired_values: list[str] = Field(default_factory=lambda: ["1", "Expired"])
    death_time_column: str
    # raw discharge-location string -> class name; extends the built-in map
    location_map: dict[str, str] = Field(default_factory=dict)


class DiagnosesConfig(_Model):
    path: str
    stay_id_column: str
    class_column: str


class DatasetConfig(_Model):
    name: str
    tables: list[TableConfig]
    stays: StaysConfig
    diagnoses: Optional[DiagnosesConfig] = None
    # event_type -> kept feature names, used by the selected-feature baselines
    selection: dict[str, list[str]] = Field(default_factory=dict)
    int_distinct_threshold: int = 50
    min_feature_count: int = 5
    base_dir: str = "."

    @field_validator("tables")
    @classmethod
    def _unique_event_types(cls, tables):
        if not tables:
            raise ValueError("at least one table is required")
        seen = set()
        for t in tables:
            if t.event_type in seen:
                raise ValueError(f"duplicate event_type {t.event_type!r}")
            seen.add(t.event_type)
        return tables

    @model_validator(mode="after")
    def _selection_lists_nonempty(self):
        for event_type, names in self.selection.items():
            if not names:
                raise ValueError(f"selection for {event_type!r} is empty")
        return self

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def load_dataset_config(path: str | os.PathLike) -> DatasetConfig:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.yaml"
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    root = path.parent.resolve()
    doc["base_dir"] = str(root / doc.get("base_dir", "."))
    return DatasetConfig.model_validate(doc)


def dump_dataset_config(cfg: DatasetConfig, path: str | os.PathLike) -> None:
    doc = cfg.model_dump(exclude={"base_dir"}, exclude_none=True)
    text = yaml.safe_dump(doc, sort_keys=False)
    Path(path).write_text(text, encoding="utf-8")


class CohortOptions(_Model):
    """Cohort filters; every rule can be switched off independently."""

    min_age: Optional[float] = 18.0
    min_los_minutes: Optional[int] = 24 * 60
    first_stay_only: bool = True
    min_events: Optional[int] = 5
    window_minutes: Optional[int] = 12 * 60
