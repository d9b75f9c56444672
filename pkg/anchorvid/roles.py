"""Anchor roles, segment roles and token positions."""
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

VIEWPOINTS: Tuple[str, ...] = ("front", "back", "left", "right")
EXPRESSIONS: Tuple[str, ...] = ("surprise", "angry", "disgust", "fear", "contempt", "sad", "neutral", "happy")


class AnchorKind(str, Enum):
    GLOBAL = "global"
    VIEWPOINT = "viewpoint"
    EXPRESSION = "expression"


_SUB_LIMITS = {AnchorKind.GLOBAL: 1, AnchorKind.VIEWPOINT: len(VIEWPOINTS), AnchorKind.EXPRESSION: len(EXPRESSIONS)}


@dataclass(frozen=True, order=True)
class AnchorRole:
    kind: AnchorKind
    sub_index: int = 0

    def __post_init__(self):
        limit = _SUB_LIMITS[AnchorKind(self.kind)]
        if not 0 <= self.sub_index < limit:
            raise ValueError(f"sub_index {self.sub_index} out of range for {self.kind.value} anchors")

    @property
    def label(self) -> str:
        if self.kind == AnchorKind.VIEWPOINT:
            return VIEWPOINTS[self.sub_index]
        if self.kind == AnchorKind.EXPRESSION:
            return EXPRESSIONS[self.sub_index]
        return "global"

    @property
    def name(self) -> str:
        """Stable string key, e.g. 'viewpoint:back'."""
        if self.kind == AnchorKind.GLOBAL:
            return "global"
        return f"{self.kind.value}:{self.label}"

    @classmethod
    def parse(cls, name: str) -> "AnchorRole":
        if name == "global":
            return cls(AnchorKind.GLOBAL, 0)
        kind, label = name.split(":", 1)
        kind = AnchorKind(kind)
        names = VIEWPOINTS if kind == AnchorKind.VIEWPOINT else EXPRESSIONS
        return cls(kind, names.index(label))

    @classmethod
    def viewpoint(cls, label: str) -> "AnchorRole":
        return cls(AnchorKind.VIEWPOINT, VIEWPOINTS.index(label))

    @classmethod
    def expression(cls, label: str) -> "AnchorRole":
        return cls(AnchorKind.EXPRESSION, EXPRESSIONS.index(label))


GLOBAL_ROLE = AnchorRole(AnchorKind.GLOBAL, 0)


class SegmentKind(str, Enum):
    FIRST_FRAME = "first_frame"
    PREFIX = "prefix"
    VIDEO = "video"
    ANCHOR = "anchor"


@dataclass(frozen=True)
class SegmentRole:
    kind: SegmentKind
    anchor: Optional[AnchorRole] = None

    @property
    def name(self) -> str:
        return self.anchor.name if self.kind == SegmentKind.ANCHOR else self.kind.value


@dataclass(frozen=True)
class PositionTriple:
    t: int
    h: int
    w: int

    def __post_init__(self):
        if self.t < 0 or self.h < 0 or self.w < 0:
            raise ValueError(f"Positions must be non-negative, got {self}")

    def shifted(self, dt: int) -> "PositionTriple":
        return PositionTriple(self.t + dt, self.h, self.w)
