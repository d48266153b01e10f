"""ARD survey data model, validation and file ingestion.

Responses are stored as an integer matrix plus an optional boolean mask of
missing cells. Estimators promote to float and skip masked cells.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class SurveyError(ValueError):
    """Raised when survey data cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    row: int | None = None
    column: str | None = None

    def __str__(self) -> str:
        where = []
        if self.row is not None:
            where.append(f"row {self.row}")
        if self.column is not None:
            where.append(f"column {self.column!r}")
        loc = f" ({', '.join(where)})" if where else ""
        return f"{self.message}{loc}"


@dataclass(frozen=True, eq=False)
class ArdSurvey:
    """Respondent-by-subpopulation count matrix with its size metadata.

    ``known_sizes`` is keyed by column name; every column not in it is unknown.
    ``missing`` marks item nonresponse (True = missing); the value stored in
    ``responses`` under a missing cell is ignored.
    """

    responses: np.ndarray
    columns: tuple[str, ...]
    population_total: int
    known_sizes: Mapping[str, int]
    respondent_ids: tuple[str, ...] | None = None
    missing: np.ndarray | None = None
    weights: np.ndarray | None = None
    covariates: np.ndarray | None = None
    likert: np.ndarray | None = None
    likert_upper: Mapping[str, float] | None = None

    def __post_init__(self) -> None:
        resp = np.asarray(self.responses)
        if resp.ndim != 2:
            raise SurveyError("responses must be a 2-d matrix")
        object.__setattr__(self, "responses", resp.astype(np.int64, copy=True))
        object.__setattr__(self, "columns", tuple(str(c) for c in self.columns))
        object.__setattr__(self, "known_sizes", dict(self.known_sizes))
        if self.respondent_ids is None:
            ids = tuple(str(i + 1) for i in range(resp.shape[0]))
        else:
            ids = tuple(str(i) for i in self.respondent_ids)
        object.__setattr__(self, "respondent_ids", ids)
        for name in ("missing", "weights", "covariates", "likert"):
            value = getattr(self, name)
            if value is not None:
                arr = np.array(value, dtype=bool if name == "missing" else float)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.missing is not None and not self.missing.any():
            object.__setattr__(self, "missing", None)
        if self.likert_upper is not None:
            object.__setattr__(self, "likert_upper", dict(self.likert_upper))
        self.responses.setflags(write=False)

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def K(self) -> int:
        return self.responses.shape[1]

    @property
    def known_columns(self) -> list[str]:
        return [c for c in self.columns if c in self.known_sizes]

    @property
    def unknown_columns(self) -> list[str]:
        return [c for c in self.columns if c not in self.known_sizes]

    def index(self, column: str | int) -> int:
        if isinstance(column, (int, np.integer)):
            if not 0 <= column < self.K:
                raise SurveyError(f"column index {column} out of range")
            return int(column)
        try:
            return self.columns.index(column)
        except ValueError:
            raise SurveyError(f"no column named {column!r}") from None

    def name(self, column: str | int) -> str:
        return self.columns[self.index(column)]

    def observed(self) -> np.ndarray:
        """Boolean matrix, True where a response was given."""
        if self.missing is None:
            return np.ones(self.responses.shape, dtype=bool)
        return ~self.missing

    def values(self) -> np.ndarray:
        """Responses as floats with missing cells set to NaN."""
        y = self.responses.astype(float)
        if self.missing is not None:
            y[self.missing] = np.nan
        return y

    def column(self, column: str | int) -> np.ndarray:
        return self.values()[:, self.index(column)]

    def known_block(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(counts, sizes, observed) restricted to known columns."""
        idx = [self.index(c) for c in self.known_columns]
        sizes = np.array([self.known_sizes[c] for c in self.known_columns], dtype=float)
        return self.responses[:, idx].astype(float), sizes, self.observed()[:, idx]

    def with_known(self, known_sizes: Mapping[str, int]) -> "ArdSurvey":
        return self.replace(known_sizes=dict(known_sizes))

    def without_columns(self, drop: Sequence[str]) -> "ArdSurvey":
        keep = [i for i, c in enumerate(self.columns) if c not in set(drop)]
        cols = tuple(self.columns[i] for i in keep)
        return self.replace(
            responses=self.responses[:, keep],
            columns=cols,
            known_sizes={c: v for c, v in self.known_sizes.items() if c in cols},
            missing=None if self.missing is None else self.missing[:, keep],
            likert=None if self.likert is None else self.likert[:, keep],
            likert_upper=None
            if self.likert_upper is None
            else {c: v for c, v in self.likert_upper.items() if c in cols},
        )

    def take(self, rows: Sequence[int] | np.ndarray) -> "ArdSurvey":
        """Subset (or reorder) respondents."""
        rows = np.asarray(rows, dtype=int)
        sub = lambda a: None if a is None else a[rows]  # noqa: E731
        return self.replace(
            responses=self.responses[rows],
            respondent_ids=tuple(self.respondent_ids[i] for i in rows),
            missing=sub(self.missing),
            weights=sub(self.weights),
            covariates=sub(self.covariates),
            likert=sub(self.likert),
        )

    def replace(self, **changes) -> "ArdSurvey":
        fields_ = {
            "responses": self.responses,
            "columns": self.columns,
            "population_total": self.population_total,
            "known_sizes": self.known_sizes,
            "respondent_ids": self.respondent_ids,
            "missing": self.missing,
            "weights": self.weights,
            "covariates": self.covariates,
            "likert": self.likert,
            "likert_upper": self.likert_upper,
        }
        fields_.update(changes)
        return ArdSurvey(**fields_)


@dataclass(frozen=True)
class DegreeEstimates:
    degrees: np.ndarray
    method_tag: str

    def __post_init__(self) -> None:
        d = np.asarray(self.degrees, dtype=float)
        if d.ndim != 1 or not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("degrees must be a finite nonnegative vector")
        d.setflags(write=False)
        object.__setattr__(self, "degrees", d)

    def __len__(self) -> int:
        return len(self.degrees)


@dataclass(frozen=True)
class SizeEstimate:
    point: float
    method: str
    std_error: float | None = None
    interval: tuple[float, float] | None = None
    calibrations_applied: tuple[str, ...] = ()
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (self.point >= 0 and math.isfinite(self.point)):
            raise ValueError(f"point estimate must be finite and >= 0, got {self.point}")
        if self.std_error is not None and not self.std_error >= 0:
            raise ValueError("std_error must be >= 0")
        if self.interval is not None:
            lo, hi = (float(v) for v in self.interval)
            # tolerance for float round-off when lo/hi were computed independently
            slack = 1e-9 * max(1.0, abs(self.point))
            if not (lo - slack <= self.point <= hi + slack):
                raise ValueError(f"interval ({lo}, {hi}) does not bracket {self.point}")
            object.__setattr__(self, "interval", (lo, hi))
        object.__setattr__(self, "calibrations_applied", tuple(self.calibrations_applied))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "point": self.point,
            "se": self.std_error,
            "ci": None if self.interval is None else list(self.interval),
            "calibrations_applied": list(self.calibrations_applied),
            "metadata": _jsonable(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SizeEstimate":
        try:
            ci = data.get("ci")
            return cls(
                point=float(data["point"]),
                method=str(data["method"]),
                std_error=None if data.get("se") is None else float(data["se"]),
                interval=None if ci is None else (float(ci[0]), float(ci[1])),
                calibrations_applied=tuple(data.get("calibrations_applied", ())),
                metadata=data.get("metadata", {}),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise SurveyError(f"malformed estimate record: {exc}") from None


@dataclass(frozen=True)
class EnrichedArd:
    """Hidden-population sample with awareness reports (GNSUM input)."""

    out_reports: np.ndarray
    aware_counts: np.ndarray
    inclusion_probs: np.ndarray
    frame_total: int
    member_ids: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        out = np.asarray(self.out_reports, dtype=np.int64)
        aware = np.asarray(self.aware_counts, dtype=np.int64)
        pi = np.asarray(self.inclusion_probs, dtype=float)
        if not (out.ndim == aware.ndim == pi.ndim == 1 and len(out) == len(aware) == len(pi)):
            raise SurveyError("enriched ARD columns must be equal-length vectors")
        if len(out) == 0:
            raise SurveyError("enriched sample is empty")
        if np.any(aware < 0) or np.any(aware > out):
            bad = int(np.flatnonzero((aware < 0) | (aware > out))[0])
            raise SurveyError(f"aware_counts must lie in [0, out_reports] (member row {bad})")
        if np.any(~(pi > 0)) or np.any(pi > 1):
            raise SurveyError("inclusion probabilities must lie in (0, 1]")
        if self.frame_total <= 0:
            raise SurveyError("frame_total must be positive")
        ids = self.member_ids
        ids = tuple(str(i + 1) for i in range(len(out))) if ids is None else tuple(map(str, ids))
        for name, arr in (("out_reports", out), ("aware_counts", aware), ("inclusion_probs", pi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "member_ids", ids)

    @property
    def hidden_sample_size(self) -> int:
        return len(self.out_reports)


def validate(survey: ArdSurvey) -> list[Violation]:
    """Check every ArdSurvey invariant; never raises."""
    report: list[Violation] = []
    try:
        N = survey.population_total
        if not (isinstance(N, (int, np.integer)) and N > 0):
            report.append(Violation("population", "population_total must be a positive integer"))
            N = None
        for name, size in survey.known_sizes.items():
            if name not in survey.columns:
                report.append(Violation("partition", "known size for absent column", column=name))
            elif not size > 0:
                report.append(Violation("known_size", "known size must be > 0", column=name))
            elif N is not None and not size < N:
                report.append(Violation("known_size", "known size must be < N", column=name))
        if len(set(survey.columns)) != len(survey.columns):
            report.append(Violation("partition", "duplicate column names"))
        if len(survey.respondent_ids) != survey.n:
            report.append(Violation("shape", "respondent_ids length differs from row count"))
        obs = survey.observed()
        y = survey.responses
        for i, k in zip(*np.nonzero((y < 0) & obs)):
            report.append(Violation("count", "response must be >= 0", int(i), survey.columns[k]))
        if N is not None:
            for i, k in zip(*np.nonzero((y > N) & obs)):
                report.append(
                    Violation("count", "response exceeds population", int(i), survey.columns[k])
                )
        for c in survey.unknown_columns:
            k = survey.index(c)
            n_miss = int((~obs[:, k]).sum())
            if n_miss:
                report.append(
                    Violation(
                        "missing_unknown",
                        f"{n_miss} missing responses in unknown column",
                        column=c,
                    )
                )
        if survey.weights is not None:
            w = survey.weights
            if w.shape != (survey.n,):
                report.append(Violation("weights", "weights must have one entry per respondent"))
            else:
                for i in np.flatnonzero(~(w > 0) | ~np.isfinite(w)):
                    report.append(Violation("weights", "weight must be > 0", int(i)))
        if survey.covariates is not None and survey.covariates.shape[0] != survey.n:
            report.append(Violation("covariates", "covariates must have one row per respondent"))
        if survey.likert is not None:
            if survey.likert.shape != y.shape:
                report.append(Violation("likert", "likert matrix must match responses shape"))
            if survey.likert_upper is None:
                report.append(Violation("likert", "likert responses need a scale upper bound"))
    except Exception as exc:  # validate is total
        report.append(Violation("internal", f"validation could not complete: {exc}"))
    return report


def check(survey: ArdSurvey) -> ArdSurvey:
    report = validate(survey)
    if report:
        raise SurveyError("invalid survey: " + "; ".join(map(str, report)))
    return survey


def summarize(survey: ArdSurvey) -> list[dict]:
    """Per-column mean, variance and proportion of zero responses.

    Missing cells are excluded; ``n`` counts observed cells. Variance is the
    population (ddof=0) variance.
    """
    rows = []
    obs = survey.observed()
    for k, name in enumerate(survey.columns):
        col = survey.responses[obs[:, k], k].astype(float)
        n_obs = len(col)
        rows.append(
            {
                "subpop": name,
                "known_size": survey.known_sizes.get(name),
                "n": n_obs,
                "mean": float(col.mean()) if n_obs else math.nan,
                "variance": float(col.var()) if n_obs else math.nan,
                "zero_proportion": float(np.mean(col == 0)) if n_obs else math.nan,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# file formats


def load_sizes(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SurveyError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict) or "population_total" not in data:
        raise SurveyError(f"{path}: sizes file needs a population_total")
    data.setdefault("known", {})
    data.setdefault("unknown", [])
    return data


def load_survey(
    path: str | Path,
    sizes: str | Path | Mapping | None = None,
    format: str | None = None,
) -> ArdSurvey:
    """Read a survey file and validate it.

    CSV files carry only counts; their size metadata comes from ``sizes``
    (a path to the known-sizes JSON, or the already-parsed mapping). JSON
    survey files are self-contained (see :func:`save_survey`).
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "json":
        survey = _load_survey_json(path)
    elif fmt == "csv":
        if sizes is None:
            raise SurveyError("CSV surveys need a sizes file")
        meta = sizes if isinstance(sizes, Mapping) else load_sizes(sizes)
        survey = _load_survey_csv(path, meta)
    else:
        raise SurveyError(f"unsupported survey format {fmt!r}")
    return check(survey)


def _load_survey_csv(path: Path, meta: Mapping) -> ArdSurvey:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SurveyError(f"{path}: no respondent rows") from None
        if not header or header[0].strip() != "respondent_id":
            raise SurveyError(f"{path}: line 1: first header field must be respondent_id")
        columns = [h.strip() for h in header[1:]]
        ids, rows, miss = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise SurveyError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(rec)}"
                )
            ids.append(rec[0].strip())
            vals, m = [], []
            for col, field_ in enumerate(rec[1:], start=2):
                field_ = field_.strip()
                if field_ == "":
                    vals.append(0)
                    m.append(True)
                    continue
                try:
                    vals.append(int(field_))
                except ValueError:
                    raise SurveyError(
                        f"{path}: line {lineno} column {col}: not an integer count: {field_!r}"
                    ) from None
                m.append(False)
            rows.append(vals)
            miss.append(m)
    if not rows:
        raise SurveyError(f"{path}: no respondent rows")
    known = {str(k): int(v) for k, v in meta.get("known", {}).items()}
    unknown = [str(u) for u in meta.get("unknown", [])]
    named = set(known) | set(unknown)
    for c in columns:
        if c not in named:
            raise SurveyError(f"{path}: column {c!r} missing from sizes file")
    for c in named:
        if c not in columns:
            raise SurveyError(f"{path}: sizes file names column {c!r} absent from survey header")
    if set(known) & set(unknown):
        raise SurveyError("sizes file lists a column as both known and unknown")
    return ArdSurvey(
        responses=np.array(rows, dtype=np.int64),
        columns=tuple(columns),
        population_total=int(meta["population_total"]),
        known_sizes=known,
        respondent_ids=tuple(ids),
        missing=np.array(miss, dtype=bool),
    )


def save_survey(survey: ArdSurvey, path: str | Path, sizes_path: str | Path | None = None) -> None:
    """Write a survey. CSV writes counts (+ sizes JSON if requested); JSON is complete."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(_survey_to_json(survey), indent=2, sort_keys=True) + "\n")
        return
    obs = survey.observed()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["respondent_id", *survey.columns])
        for i, rid in enumerate(survey.respondent_ids):
            w.writerow(
                [rid, *(str(v) if o else "" for v, o in zip(survey.responses[i], obs[i]))]
            )
    if sizes_path is not None:
        write_sizes(survey, sizes_path)


def write_sizes(survey: ArdSurvey, path: str | Path) -> None:
    data = {
        "population_total": int(survey.population_total),
        "known": {c: int(survey.known_sizes[c]) for c in survey.known_columns},
        "unknown": survey.unknown_columns,
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _survey_to_json(s: ArdSurvey) -> dict:
    arr = lambda a: None if a is None else a.tolist()  # noqa: E731
    return {
        "columns": list(s.columns),
        "respondent_ids": list(s.respondent_ids),
        "responses": s.responses.tolist(),
        "missing": arr(s.missing),
        "population_total": int(s.population_total),
        "known": {c: int(s.known_sizes[c]) for c in s.known_columns},
        "unknown": s.unknown_columns,
        "weights": arr(s.weights),
        "covariates": arr(s.covariates),
        "likert": arr(s.likert),
        "likert_upper": None if s.likert_upper is None else dict(s.likert_upper),
    }


def _load_survey_json(path: Path) -> ArdSurvey:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SurveyError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not data.get("responses"):
        raise SurveyError(f"{path}: no respondent rows")
    try:
        return ArdSurvey(
            responses=np.array(data["responses"], dtype=np.int64),
            columns=tuple(data["columns"]),
            population_total=int(data["population_total"]),
            known_sizes=data.get("known", {}),
            respondent_ids=data.get("respondent_ids"),
            missing=data.get("missing"),
            weights=data.get("weights"),
            covariates=data.get("covariates"),
            likert=data.get("likert"),
            likert_upper=data.get("likert_upper"),
        )
    except KeyError as exc:
        raise SurveyError(f"{path}: missing field {exc}") from None


def load_enriched(path: str | Path, frame_total: int) -> EnrichedArd:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = ["member_id", "out_reports", "aware_counts", "inclusion_prob"]
        if reader.fieldnames is None:
            raise SurveyError(f"{path}: no member rows")
        absent = [c for c in need if c not in reader.fieldnames]
        if absent:
            raise SurveyError(f"{path}: missing column(s) {', '.join(absent)}")
        ids, out, aware, pi = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            try:
                ids.append(rec["member_id"])
                out.append(int(rec["out_reports"]))
                aware.append(int(rec["aware_counts"]))
                pi.append(float(rec["inclusion_prob"]))
            except (TypeError, ValueError) as exc:
                raise SurveyError(f"{path}: line {lineno}: {exc}") from None
    if not ids:
        raise SurveyError(f"{path}: no member rows")
    return EnrichedArd(out, aware, pi, frame_total, tuple(ids))


def save_enriched(enriched: EnrichedArd, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member_id", "out_reports", "aware_counts", "inclusion_prob"])
        for row in zip(
            enriched.member_ids,
            enriched.out_reports.tolist(),
            enriched.aware_counts.tolist(),
            enriched.inclusion_probs.tolist(),
        ):
            w.writerow([row[0], row[1], row[2], repr(float(row[3]))])


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj
