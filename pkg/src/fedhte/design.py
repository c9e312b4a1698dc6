"""Working structural model: basis construction and the estimate container.

The working model says ``link(E[Y(a) | modifiers]) = basis(modifiers, a) @ beta``.
The default basis is ``(1, a, x, a*x)`` over the designated modifier columns,
which reduces to a marginal structural model when the modifier set is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DesignError
from .links import LinkFunction, get_link
from .tables import ObservationTable


def _linear_rows(x_mod: np.ndarray, a: int) -> np.ndarray:
    n, k = x_mod.shape
    out = np.empty((n, 2 * (1 + k)))
    out[:, 0] = 1.0
    out[:, 1] = a
    out[:, 2 : 2 + k] = x_mod
    out[:, 2 + k :] = a * x_mod
    return out


@dataclass(frozen=True)
class WorkingDesign:
    """Basis builder, coefficient labels, and link for the working model."""

    basis: Callable[[np.ndarray, int], np.ndarray]
    labels: tuple[str, ...]
    link: LinkFunction
    # Optional vectorized builder: (n, k) modifier matrix -> (n, q) rows.
    matrix_basis: Callable[[np.ndarray, int], np.ndarray] | None = field(default=None)
    # "linear" designs can cross the wire; custom bases stay in-process.
    basis_kind: str = "custom"
    modifier_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.modifier_names is not None:
            object.__setattr__(self, "modifier_names", tuple(self.modifier_names))
        if not self.labels:
            raise DesignError("design must have at least one coefficient label")

    @property
    def q(self) -> int:
        return len(self.labels)

    @classmethod
    def linear(cls, modifier_names, link: LinkFunction | str = "logit") -> "WorkingDesign":
        """Default design ``(1, a, x, a*x)`` over the named modifiers."""
        names = tuple(modifier_names)
        if isinstance(link, str):
            link = get_link(link)
        labels = (
            "intercept",
            "treatment",
            *names,
            *(f"treatment:{m}" for m in names),
        )

        def basis(x_mod: np.ndarray, a: int) -> np.ndarray:
            x_mod = np.atleast_1d(np.asarray(x_mod, dtype=float))
            if x_mod.shape != (len(names),):
                raise DesignError(
                    f"basis expects {len(names)} modifier value(s), got shape {x_mod.shape}"
                )
            return np.concatenate(([1.0, float(a)], x_mod, a * x_mod))

        return cls(
            basis=basis,
            labels=labels,
            link=link,
            matrix_basis=_linear_rows,
            basis_kind="linear",
            modifier_names=names,
        )

    def rows(self, x_mod: np.ndarray, a: int) -> np.ndarray:
        """Evaluate the basis for every row of an (n, k) modifier matrix."""
        x_mod = np.asarray(x_mod, dtype=float)
        if x_mod.ndim != 2:
            raise DesignError("modifier matrix must be 2-d")
        if self.matrix_basis is not None:
            out = self.matrix_basis(x_mod, a)
            if out.shape != (x_mod.shape[0], self.q):
                raise DesignError(
                    f"matrix basis returned shape {out.shape}, expected "
                    f"{(x_mod.shape[0], self.q)}"
                )
            return out
        rows = np.empty((x_mod.shape[0], self.q))
        for i in range(x_mod.shape[0]):
            row = np.asarray(self.basis(x_mod[i], a), dtype=float)
            if row.shape != (self.q,):
                raise DesignError(
                    f"basis returned {row.shape[0] if row.ndim == 1 else row.shape} "
                    f"values for row {i}, expected {self.q}"
                )
            rows[i] = row
        return rows


def build_design_rows(
    table: ObservationTable, design: WorkingDesign
) -> tuple[np.ndarray, np.ndarray]:
    """Materialize the basis at both treatment arms for every subject.

    Returns ``(rows_a0, rows_a1)``, each of shape ``(n, q)``.
    """
    x_mod = table.modifier_matrix()
    return design.rows(x_mod, 0), design.rows(x_mod, 1)


@dataclass(frozen=True)
class HteEstimate:
    """Solved working-model coefficients with solver metadata."""

    beta: np.ndarray
    labels: tuple[str, ...]
    covariance: np.ndarray | None = None
    se_source: str = "none"
    solver_iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "labels", tuple(self.labels))
        if beta.shape != (len(self.labels),):
            raise DesignError("beta length does not match labels")
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=float)
            if cov.shape != (beta.size, beta.size):
                raise DesignError("covariance shape does not match beta")
            if not np.allclose(cov, cov.T, atol=1e-8):
                raise DesignError("covariance must be symmetric")
            eigvals = np.linalg.eigvalsh(0.5 * (cov + cov.T))
            if eigvals.min() < -1e-8 * max(1.0, eigvals.max()):
                raise DesignError("covariance must be positive semidefinite")
            object.__setattr__(self, "covariance", cov)
        if self.se_source not in ("bootstrap", "sandwich", "none"):
            raise DesignError(f"unknown se_source {self.se_source!r}")

    @property
    def se(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.labels, self.beta.tolist()))
