"""Link functions for the working structural model.

Each link bundles the forward map, its inverse (mean function), and the
derivative of the inverse, which the estimating-equation solver needs for
its Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import DesignError

ArrayLike = np.ndarray


@dataclass(frozen=True)
class LinkFunction:
    kind: str
    forward: Callable[[ArrayLike], ArrayLike]
    inverse: Callable[[ArrayLike], ArrayLike]
    inverse_deriv: Callable[[ArrayLike], ArrayLike]
    binary_outcome: bool = field(default=False)

    def __repr__(self) -> str:
        return f"LinkFunction({self.kind!r})"


def _logit_forward(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _logit_inverse_deriv(x):
    mu = expit(np.asarray(x, dtype=float))
    return mu * (1.0 - mu)


IDENTITY = LinkFunction(
    kind="identity",
    forward=lambda x: np.asarray(x, dtype=float),
    inverse=lambda x: np.asarray(x, dtype=float),
    inverse_deriv=lambda x: np.ones_like(np.asarray(x, dtype=float)),
)

LOG = LinkFunction(
    kind="log",
    forward=lambda x: np.log(np.asarray(x, dtype=float)),
    inverse=lambda x: np.exp(np.asarray(x, dtype=float)),
    inverse_deriv=lambda x: np.exp(np.asarray(x, dtype=float)),
)

LOGIT = LinkFunction(
    kind="logit",
    forward=_logit_forward,
    inverse=lambda x: expit(np.asarray(x, dtype=float)),
    inverse_deriv=_logit_inverse_deriv,
    binary_outcome=True,
)

_LINKS = {"identity": IDENTITY, "log": LOG, "logit": LOGIT}


def get_link(kind: str) -> LinkFunction:
    try:
        return _LINKS[kind]
    except KeyError:
        raise DesignError(
            f"unknown link {kind!r}; expected one of {sorted(_LINKS)}"
        ) from None
