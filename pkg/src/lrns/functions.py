"""Named built-in space-time functions ``f(x, y, t)`` usable from configs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Builtin:
    fn: Callable
    time_dependent: bool
    doc: str

    def __call__(self, x, y, t=0.0):
        return self.fn(np.asarray(x, dtype=float), np.asarray(y, dtype=float), t)


def _const(c):
    return lambda x, y, t: np.full(np.broadcast(x, y).shape, c)


REGISTRY: dict[str, Builtin] = {
    "zero": Builtin(_const(0.0), False, "0"),
    "one": Builtin(_const(1.0), False, "1"),
    "x": Builtin(lambda x, y, t: x + 0.0 * y, False, "x"),
    "x_plus_y": Builtin(lambda x, y, t: x + y, False, "x + y"),
    "sin2pi_sin2pi": Builtin(
        lambda x, y, t: np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y), False,
        "sin(2 pi x) sin(2 pi y)"),
    "sin2pi_sinpi": Builtin(
        lambda x, y, t: np.sin(2 * np.pi * x) * np.sin(np.pi * y), False,
        "sin(2 pi x) sin(pi y)"),
    "exp_decay_sin2pi_sinpi": Builtin(
        lambda x, y, t: np.exp(-np.pi * t) * np.sin(2 * np.pi * x) * np.sin(np.pi * y), True,
        "exp(-pi t) sin(2 pi x) sin(pi y)"),
    "t_times_x": Builtin(lambda x, y, t: t * x + 0.0 * y, True, "t x"),
}


def lookup(name: str) -> Builtin:
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown built-in function {name!r}; available: {', '.join(sorted(REGISTRY))}") from None
