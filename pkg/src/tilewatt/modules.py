"""The six modeled hardware modules, execution phases, and activity factors."""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass


class Module(str, enum.Enum):
    DRAM = "dram"
    L2 = "l2"
    SHARED = "shared"
    TENSOR = "tensor"
    CUDA = "cuda"
    SFU = "sfu"


MODULES = tuple(Module)
ON_CHIP = tuple(m for m in Module if m is not Module.DRAM)


class Phase(str, enum.Enum):
    PROLOGUE = "prologue"
    MAINLOOP = "mainloop"
    EPILOGUE = "epilogue"
    MONOLITHIC = "monolithic"


# slack tolerated above 1.0 before clamping turns into an error
_CLAMP_SLACK = 1e-6


@dataclass(frozen=True)
class Utilization:
    """Activity factor per module, each in [0, 1]."""

    dram: float = 0.0
    l2: float = 0.0
    shared: float = 0.0
    tensor: float = 0.0
    cuda: float = 0.0
    sfu: float = 0.0

    def __post_init__(self):
        for m in MODULES:
            v = float(getattr(self, m.value))
            if v != v or v < -_CLAMP_SLACK or v > 1 + _CLAMP_SLACK:
                raise ValueError(f"utilization {m.value}={v} outside [0, 1]")
            if v > 1 or v < 0:
                warnings.warn(f"clamping utilization {m.value}={v!r} into [0, 1]", stacklevel=3)
                v = min(max(v, 0.0), 1.0)
            object.__setattr__(self, m.value, v)

    @classmethod
    def clamped(cls, values) -> "Utilization":
        """Build from a module->value mapping, silently clamping into [0, 1]."""
        return cls(**{m.value: min(max(float(values.get(m, 0.0)), 0.0), 1.0) for m in MODULES})

    def __getitem__(self, module) -> float:
        return getattr(self, Module(module).value)

    def as_dict(self) -> dict:
        return {m.value: getattr(self, m.value) for m in MODULES}
