from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

MODEL_INPUT = "model-input"

LayerPair = tuple[str, str]
Location = Union[LayerPair, str]


class Category(str, enum.Enum):
    PP = "PP"
    ID = "ID"
    TSS = "TSS"
    WB = "WB"
    LH = "LH"
    CG = "CG"

    def __str__(self) -> str:
        return self.value


INPUT_CATEGORIES = (Category.PP, Category.ID, Category.TSS)
LAYER_CATEGORIES = (Category.WB, Category.LH, Category.CG)


@dataclass
class FaultReport:
    category: Category
    location: Location
    detail: dict[str, Any]
    suspicious_rank: int | None = None

    @property
    def layer_pair(self) -> LayerPair | None:
        return self.location if isinstance(self.location, tuple) else None

    def key(self) -> tuple[str, str]:
        """(category, location) identity used for localisation accounting."""
        loc = self.location if isinstance(self.location, str) else "/".join(self.location)
        return self.category.value, loc

    def to_dict(self) -> dict[str, Any]:
        return {
            "category": self.category.value,
            "location": list(self.location) if isinstance(self.location, tuple) else self.location,
            "detail": to_jsonable(self.detail),
            "suspicious_rank": self.suspicious_rank,
        }


def to_jsonable(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        if hasattr(value, "to_dict"):
            return to_jsonable(value.to_dict())
        return to_jsonable(dataclasses.asdict(value))
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass
class LocalizationResult:
    """All reports from one localisation pass, grouped by category."""

    reports: list[FaultReport] = field(default_factory=list)

    def by_category(self, category: Category) -> list[FaultReport]:
        return [r for r in self.reports if r.category == category]

    def for_layer(self, category: Category, pair: LayerPair) -> list[FaultReport]:
        return [r for r in self.reports if r.category == category and r.location == pair]

    def counts(self) -> dict[str, int]:
        return {c.value: len(self.by_category(c)) for c in Category}
