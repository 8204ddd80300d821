"""Label sets for surgical actions and instruments."""

from __future__ import annotations

import enum


class Action(enum.Enum):
    CLIPPING = "clipping"
    GRASPING = "grasping"
    CUTTING = "cutting"
    DISSECTING = "dissecting"

    @classmethod
    def parse(cls, name: str) -> "Action":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown action {name!r}; expected one of "
                f"{[a.value for a in cls]}"
            ) from None


class Tool(enum.Enum):
    GRASPER = "grasper"
    HOOK = "hook"
    CLIPPER = "clipper"
    SCISSORS = "scissors"

    @classmethod
    def parse(cls, name: str) -> "Tool":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown tool {name!r}; expected one of "
                f"{[t.value for t in cls]}"
            ) from None

    @property
    def class_id(self) -> int:
        """Integer class in [0, 3], stable across runs."""
        return _TOOL_CLASS_IDS[self]


_TOOL_CLASS_IDS = {
    Tool.GRASPER: 0,
    Tool.HOOK: 1,
    Tool.CLIPPER: 2,
    Tool.SCISSORS: 3,
}

TOOL_BY_CLASS_ID = {v: k for k, v in _TOOL_CLASS_IDS.items()}

# Instrument/action pairs that make sense for rare-action augmentation.
# Clips are generated for the target action with the matching instrument.
AUGMENTATION_PAIRS = {
    Action.CLIPPING: Tool.CLIPPER,
    Action.CUTTING: Tool.SCISSORS,
}
