"""Numeric fields that are either fixed literals or named model parameters."""
from __future__ import annotations

import math
from typing import Mapping, Union

RefLike = Union[float, int, str, "Ref"]


class Ref:
    """A scalar that is either a constant or looked up by name in theta."""

    __slots__ = ("name", "const")

    def __init__(self, spec: RefLike):
        if isinstance(spec, Ref):
            self.name, self.const = spec.name, spec.const
        elif isinstance(spec, str):
            self.name, self.const = spec, None
        elif isinstance(spec, (int, float)) and not isinstance(spec, bool):
            if not math.isfinite(spec):
                raise ValueError(f"non-finite constant {spec}")
            self.name, self.const = None, float(spec)
        else:
            raise TypeError(f"expected a number or parameter name, got {spec!r}")

    @property
    def is_param(self) -> bool:
        return self.name is not None

    def __call__(self, theta: Mapping[str, float]) -> float:
        if self.name is None:
            return self.const
        try:
            return float(theta[self.name])
        except KeyError:
            raise KeyError(f"parameter {self.name!r} missing from theta") from None

    def to_json(self):
        return self.name if self.name is not None else self.const

    def __repr__(self):
        return f"Ref({self.to_json()!r})"


def collect_names(*refs) -> tuple:
    """Distinct parameter names referenced, in first-seen order."""
    out = []
    for r in refs:
        if r is not None and r.name is not None and r.name not in out:
            out.append(r.name)
    return tuple(out)
