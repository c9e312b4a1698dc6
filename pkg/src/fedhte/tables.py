"""Per-site rectangular datasets and CSV ingestion.

An :class:`ObservationTable` holds one site's outcome, treatment, and
covariate columns plus the designation of which covariates are candidate
effect modifiers.  Tables are immutable after construction and validated
eagerly: downstream numerics assume finite values and a {0, 1} treatment.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataValidationError


@dataclass(frozen=True)
class TableSchema:
    """Column-role map used when loading a CSV file."""

    outcome: str
    treatment: str
    covariates: tuple[str, ...]
    modifiers: tuple[str, ...] = ()
    delimiter: str = ","

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "modifiers", tuple(self.modifiers))
        if len(set(self.covariates)) != len(self.covariates):
            raise DataValidationError("duplicate covariate names in schema")
        missing = [m for m in self.modifiers if m not in self.covariates]
        if missing:
            raise DataValidationError(
                f"modifier columns {missing} are not among the covariates"
            )


@dataclass(frozen=True)
class ObservationTable:
    site_id: str
    outcome: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    modifier_columns: tuple[int, ...] = field(default=())

    def __post_init__(self):
        outcome = np.ascontiguousarray(self.outcome, dtype=float)
        treatment = np.ascontiguousarray(self.treatment, dtype=float)
        covariates = np.ascontiguousarray(self.covariates, dtype=float)
        if covariates.ndim != 2:
            raise DataValidationError("covariates must be a 2-d matrix")
        n = outcome.shape[0]
        if n < 1:
            raise DataValidationError("n >= 1 violated: table has no rows")
        if treatment.shape != (n,) or covariates.shape[0] != n:
            raise DataValidationError("columns differ in length")
        names = tuple(self.covariate_names)
        if len(names) != covariates.shape[1]:
            raise DataValidationError(
                f"{len(names)} covariate names for {covariates.shape[1]} columns"
            )
        if len(set(names)) != len(names):
            raise DataValidationError("duplicate covariate names")
        if not np.isfinite(outcome).all():
            raise DataValidationError("non-finite value in outcome column")
        if not np.isfinite(covariates).all():
            raise DataValidationError("non-finite value in covariate matrix")
        if not np.isin(treatment, (0.0, 1.0)).all():
            raise DataValidationError("treatment values must be in {0, 1}")
        mods = tuple(int(j) for j in self.modifier_columns)
        if len(set(mods)) != len(mods):
            raise DataValidationError("duplicate modifier column indices")
        if any(j < 0 or j >= covariates.shape[1] for j in mods):
            raise DataValidationError("modifier column index out of range")
        for arr in (outcome, treatment, covariates):
            arr.setflags(write=False)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "treatment", treatment)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "modifier_columns", mods)

    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def modifier_names(self) -> tuple[str, ...]:
        return tuple(self.covariate_names[j] for j in self.modifier_columns)

    def modifier_matrix(self) -> np.ndarray:
        return self.covariates[:, list(self.modifier_columns)]

    def column_index(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise DataValidationError(
                f"covariate {name!r} not present in table {self.site_id!r}"
            ) from None

    def column(self, name: str) -> np.ndarray:
        return self.covariates[:, self.column_index(name)]

    def take(self, indices: np.ndarray, site_id: str | None = None) -> "ObservationTable":
        """Row subset (used for bootstrap resampling)."""
        return ObservationTable(
            site_id=self.site_id if site_id is None else site_id,
            outcome=self.outcome[indices],
            treatment=self.treatment[indices],
            covariates=self.covariates[indices],
            covariate_names=self.covariate_names,
            modifier_columns=self.modifier_columns,
        )


def from_schema(
    site_id: str,
    schema: TableSchema,
    outcome: np.ndarray,
    treatment: np.ndarray,
    covariates: np.ndarray,
) -> ObservationTable:
    modifier_columns = tuple(schema.covariates.index(m) for m in schema.modifiers)
    return ObservationTable(
        site_id=site_id,
        outcome=outcome,
        treatment=treatment,
        covariates=covariates,
        covariate_names=schema.covariates,
        modifier_columns=modifier_columns,
    )


def load_csv(path, schema: TableSchema, site_id: str | None = None) -> ObservationTable:
    """Load and validate one site's dataset from a delimited text file.

    Errors name the offending data row (1-based, excluding the header) and
    column so multi-site ingestion problems can be traced back to a cell.
    """
    path = str(path)
    with open(path, newline="") as handle:
        reader = csv.reader(handle, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file (header row required)")
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataValidationError(f"{path}: duplicate column names in header")
        wanted = [schema.outcome, schema.treatment, *schema.covariates]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataValidationError(f"{path}: missing column(s) {missing}")
        positions = {c: header.index(c) for c in wanted}

        outcome, treatment = [], []
        covariates = []
        for row_num, row in enumerate(reader, start=1):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) != len(header):
                raise DataValidationError(
                    f"{path}: row {row_num} has {len(row)} fields, expected {len(header)}"
                )

            def cell(col: str) -> float:
                raw = row[positions[col]].strip()
                try:
                    value = float(raw)
                except ValueError:
                    raise DataValidationError(
                        f"{path}: row {row_num}, column {col!r}: "
                        f"cannot parse {raw!r} as a number"
                    ) from None
                if not np.isfinite(value):
                    raise DataValidationError(
                        f"{path}: row {row_num}, column {col!r}: non-finite value {raw!r}"
                    )
                return value

            a = cell(schema.treatment)
            if a not in (0.0, 1.0):
                raise DataValidationError(
                    f"{path}: row {row_num}, column {schema.treatment!r}: "
                    f"treatment must be 0 or 1, got {a!r}"
                )
            outcome.append(cell(schema.outcome))
            treatment.append(a)
            covariates.append([cell(c) for c in schema.covariates])

    if not outcome:
        raise DataValidationError(f"{path}: n >= 1 violated (no data rows)")
    return from_schema(
        site_id=site_id if site_id is not None else path,
        schema=schema,
        outcome=np.asarray(outcome),
        treatment=np.asarray(treatment),
        covariates=np.asarray(covariates),
    )
