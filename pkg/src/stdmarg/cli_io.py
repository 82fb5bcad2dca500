"""CSV ingestion, analysis configuration and report rendering.

A CSV with a header row is turned into a :class:`TrialDataset`: the outcome,
follow-up and numeric covariates are parsed as floats, categorical covariates
become reference-coded indicators, and treatment labels are mapped to arm
indices.  Levels are ordered numerically when every label is an integer and
lexicographically otherwise; the first level is the reference.

:func:`analyze` fits each configured working model once and evaluates every
requested (arm, estimator, variance method) cell.  Reports render to text,
CSV or JSON; the JSON form reads back into an identical report.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import marginal
from .dataset import TrialDataset
from .errors import (
    EmptyArm,
    InvalidConfig,
    MissingColumn,
    MissingValue,
    NonNumericValue,
    NonPositiveFollowup,
    StdMargError,
)
from .glm_core import ModelSpec, column_names, fit

SCHEMA_VERSION = 1
FORMATS = ("text", "csv", "json")


@dataclass(frozen=True)
class DataSchema:
    """Which CSV columns hold what; ``categorical`` is a subset of ``covariates``."""

    outcome: str
    treatment: str
    covariates: Tuple[str, ...] = ()
    categorical: Tuple[str, ...] = ()
    followup: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        stray = [c for c in self.categorical if c not in self.covariates]
        if stray:
            raise InvalidConfig(f"categorical columns {stray} are not listed as covariates")


@dataclass(frozen=True)
class LoadedData:
    """A parsed dataset plus the bookkeeping needed to explain it."""

    dataset: TrialDataset
    treatment_levels: Tuple[str, ...]
    covariate_groups: Dict[str, Tuple[int, ...]]


def _levels(values: Sequence[str]) -> List[str]:
    uniq = set(values)
    try:
        return sorted(uniq, key=int)
    except ValueError:
        return sorted(uniq)


def load_dataset(path, schema: DataSchema) -> LoadedData:
    """Read ``path`` (or an open text stream) into a :class:`LoadedData`.

    Row numbers in error messages count data rows from 1, so row 1 is the
    line after the header.
    """
    if hasattr(path, "read"):
        rows = list(csv.reader(path))
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    if not rows:
        raise MissingColumn("CSV file is empty (no header row)")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise MissingValue("CSV file has a header but no data rows")
    wanted = [schema.outcome, schema.treatment, *schema.covariates]
    if schema.followup is not None:
        wanted.append(schema.followup)
    index = {}
    for col in wanted:
        if col not in header:
            raise MissingColumn(f"column {col!r} not found; header has {header}")
        index[col] = header.index(col)

    def cells(col):
        j = index[col]
        out = []
        for i, r in enumerate(body, start=1):
            v = r[j].strip() if j < len(r) else ""
            if v == "" or v.upper() == "NA":
                raise MissingValue(f"row {i}, column {col!r}: missing value")
            out.append(v)
        return out

    def numbers(col):
        out = np.empty(len(body))
        for i, v in enumerate(cells(col)):
            try:
                out[i] = float(v)
            except ValueError:
                raise NonNumericValue(f"row {i + 1}, column {col!r}: {v!r} is not a number") from None
            if not math.isfinite(out[i]):
                raise NonNumericValue(f"row {i + 1}, column {col!r}: {v!r} is not finite")
        return out

    y = numbers(schema.outcome)
    t = None
    if schema.followup is not None:
        t = numbers(schema.followup)
        bad = np.flatnonzero(t <= 0)
        if bad.size:
            raise NonPositiveFollowup(
                f"row {bad[0] + 1}, column {schema.followup!r}: follow-up {t[bad[0]]} is not > 0")

    labels = cells(schema.treatment)
    levels = _levels(labels)
    if len(levels) < 2:
        raise EmptyArm(f"treatment column {schema.treatment!r} has a single level {levels}")
    code = {lv: k for k, lv in enumerate(levels)}
    z = np.array([code[v] for v in labels])

    blocks, names, groups = [], [], {}
    for col in schema.covariates:
        start = len(names)
        if col in schema.categorical:
            vals = cells(col)
            lv = _levels(vals)
            arr = np.array(vals)
            for level in lv[1:]:
                blocks.append((arr == level).astype(float))
                names.append(f"{col}[{level}]")
        else:
            blocks.append(numbers(col))
            names.append(col)
        groups[col] = tuple(range(start, len(names)))
    x = np.column_stack(blocks) if blocks else np.zeros((len(body), 0))
    ds = TrialDataset(y=y, x=x, z=z, t=t, n_arms=len(levels), covariate_names=tuple(names),
                      arm_labels=tuple(levels))
    return LoadedData(ds, tuple(levels), groups)


@dataclass(frozen=True)
class ModelConfig:
    label: str
    family: str
    link: Optional[str] = None
    interactions: Tuple[str, ...] = ()
    offset: bool = True


@dataclass(frozen=True)
class AnalysisConfig:
    """What to fit and which cells to report.

    ``arms`` may hold treatment labels or arm indices; ``None`` means all
    arms.  ``ci_scale`` of ``None`` picks log for count families and
    identity otherwise.  ``offset`` on a model only takes effect when the
    data carry follow-up times and the link is log.
    """

    models: Tuple[ModelConfig, ...]
    arms: Optional[Tuple] = None
    estimators: Tuple[str, ...] = ("mu1", "mu2", "mu3")
    variance_methods: Tuple[str, ...] = ("fixed_x", "random_x")
    ci_scale: Optional[str] = None
    ci_level: float = 0.95
    vcov_source: str = "sandwich"
    printed_variance: bool = False
    schema: Optional[DataSchema] = None

    def __post_init__(self):
        if not self.estimators:
            raise InvalidConfig("at least one estimator must be requested")
        for e in self.estimators:
            if e not in marginal.ESTIMATORS:
                raise InvalidConfig(f"unknown estimator {e!r}; expected one of {marginal.ESTIMATORS}")
        for m in self.variance_methods:
            if m not in marginal.MU2_METHODS:
                raise InvalidConfig(f"unknown variance method {m!r}")
        if ("mu2" in self.estimators or "mu3" in self.estimators) and not self.models:
            raise InvalidConfig("mu2/mu3 need at least one model")
        labels = [m.label for m in self.models]
        if len(set(labels)) != len(labels):
            raise InvalidConfig(f"model labels must be unique: {labels}")
        if self.ci_scale not in (None, "log", "identity"):
            raise InvalidConfig(f"unknown ci_scale {self.ci_scale!r}")
        if not 0 < self.ci_level < 1:
            raise InvalidConfig(f"ci_level must be in (0, 1), got {self.ci_level}")
        if self.vcov_source not in ("sandwich", "model"):
            raise InvalidConfig(f"unknown vcov_source {self.vcov_source!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported schema_version {version}")
        raw_models = d.pop("models", None)
        if raw_models is None:
            raw_models = [d.pop("model")] if "model" in d else []
        models = []
        for i, m in enumerate(raw_models):
            m = dict(m)
            m.setdefault("label", m.get("family", f"model{i}"))
            m["interactions"] = tuple(m.get("interactions", ()))
            try:
                models.append(ModelConfig(**m))
            except TypeError as exc:
                raise InvalidConfig(f"bad model entry {m}: {exc}") from None
        kwargs = {"models": tuple(models)}
        if "columns" in d:
            c = dict(d.pop("columns"))
            try:
                kwargs["schema"] = DataSchema(
                    outcome=c.pop("outcome"), treatment=c.pop("treatment"),
                    covariates=tuple(c.pop("covariates", ())),
                    categorical=tuple(c.pop("categorical", ())),
                    followup=c.pop("followup", None))
            except KeyError as exc:
                raise InvalidConfig(f"columns needs {exc.args[0]!r}") from None
            if c:
                raise InvalidConfig(f"unknown column keys: {sorted(c)}")
        for key in ("arms", "estimators", "variance_methods"):
            if key in d and d[key] is not None:
                kwargs[key] = tuple(d.pop(key))
        for key in ("ci_scale", "ci_level", "vcov_source", "printed_variance"):
            if key in d:
                kwargs[key] = d.pop(key)
        d.pop("arms", None)
        if d:
            raise InvalidConfig(f"unknown config keys: {sorted(d)}")
        return cls(**kwargs)


@dataclass
class FitSummary:
    label: str
    family: str
    link: str
    offset: bool
    converged: bool
    iterations: int
    loglik: float
    n: int
    coefficients: List[dict]
    dispersion: Optional[float] = None


@dataclass
class AnalysisReport:
    treatment_levels: List[str]
    fits: List[FitSummary]
    rows: List[dict]
    ci_level: float = 0.95

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "ci_level": self.ci_level,
            "treatment_levels": list(self.treatment_levels),
            "fits": [asdict(f) for f in self.fits],
            "rows": [dict(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported schema_version {d.get('schema_version')}")
        return cls(treatment_levels=list(d["treatment_levels"]),
                   fits=[FitSummary(**f) for f in d["fits"]],
                   rows=[dict(r) for r in d["rows"]],
                   ci_level=d["ci_level"])

    def __eq__(self, other):
        if not isinstance(other, AnalysisReport):
            return NotImplemented
        return _canonical_json(self.to_dict()) == _canonical_json(other.to_dict())


ROW_FIELDS = ("model", "arm", "arm_label", "estimator", "variance_method", "estimate",
              "variance", "se", "ci_low", "ci_high", "ci_scale", "ci_level", "n_used",
              "vcov_source")


def _resolve_arms(requested, ds: TrialDataset) -> List[int]:
    if requested is None:
        return list(range(ds.n_arms))
    labels = list(ds.arm_labels or [str(a) for a in range(ds.n_arms)])
    out = []
    for a in requested:
        if isinstance(a, str) and a in labels:
            out.append(labels.index(a))
        elif isinstance(a, (int, np.integer)) and not isinstance(a, bool) and 0 <= a < ds.n_arms:
            out.append(int(a))
        else:
            raise EmptyArm(f"arm {a!r} is not present in the data (arms: {labels})")
    return out


def _model_spec(m: ModelConfig, ds: TrialDataset, groups: Dict[str, Tuple[int, ...]]) -> ModelSpec:
    names = list(ds.covariate_names or [f"x{j}" for j in range(ds.p)])
    idx = []
    for term in m.interactions:
        if term in groups:
            idx.extend(groups[term])
        elif term in names:
            idx.append(names.index(term))
        else:
            raise InvalidConfig(f"model {m.label!r}: interaction covariate {term!r} not in data")
    spec = ModelSpec(m.family, m.link, tuple(idx))
    if m.offset and not ds.unit_followup and spec.link == "log":
        spec = ModelSpec(m.family, m.link, tuple(idx), offset_rule="log_followup")
    return spec


def _cell(label, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StdMargError as exc:
        raise type(exc)(f"{label}: {exc}") from exc


def analyze(data, config: AnalysisConfig) -> AnalysisReport:
    """Fit each configured model and compute every requested cell.

    ``data`` is a :class:`LoadedData` or a bare :class:`TrialDataset`.
    """
    if isinstance(data, LoadedData):
        ds, groups = data.dataset, data.covariate_groups
    else:
        ds, groups = data, {}
    arms = _resolve_arms(config.arms, ds)
    levels = list(ds.arm_labels or [str(a) for a in range(ds.n_arms)])
    names = list(ds.covariate_names or [f"x{j}" for j in range(ds.p)])

    fits, summaries = [], []
    if "mu2" in config.estimators or "mu3" in config.estimators:
        for m in config.models:
            spec = _cell(f"model {m.label!r}", _model_spec, m, ds, groups)
            res = _cell(f"model {m.label!r}", fit, ds, spec)
            se = np.sqrt(np.diag(res.vcov_sandwich))
            coef = [{"term": term, "estimate": float(b), "sandwich_se": float(s)}
                    for term, b, s in zip(column_names(names, ds.n_arms, spec, levels),
                                          res.beta_hat, se)]
            dispersion = None
            if res.eta_hat is not None:
                dispersion = float(res.eta_hat)
                coef.append({"term": "(dispersion)", "estimate": dispersion,
                             "sandwich_se": float(se[-1]) if se.size > res.q else float("nan")})
            fits.append((m, res))
            summaries.append(FitSummary(
                label=m.label, family=spec.family, link=spec.link,
                offset=spec.offset_rule == "log_followup", converged=bool(res.converged),
                iterations=int(res.iterations), loglik=float(res.loglik), n=int(res.n),
                coefficients=coef, dispersion=dispersion))

    def scale_for(res):
        if config.ci_scale is not None:
            return config.ci_scale
        family = res.spec.family if res is not None else (
            fits[0][1].spec.family if fits else "gaussian")
        return "log" if family in ("poisson", "negbin2") else "identity"

    rows = []
    for arm in arms:
        where = f"arm {levels[arm]!r}"
        if "mu1" in config.estimators:
            est = _cell(f"{where}, mu1", marginal.mu1, ds, arm, ci_scale=scale_for(None),
                        level=config.ci_level, printed_variance=config.printed_variance)
            rows.append(_row(None, arm, levels[arm], est))
        for m, res in fits:
            if "mu2" in config.estimators:
                for method in config.variance_methods:
                    est = _cell(f"{where}, model {m.label!r}, mu2 {method}", marginal.mu2,
                                ds, res, arm, method, vcov_source=config.vcov_source,
                                ci_scale=scale_for(res), level=config.ci_level)
                    rows.append(_row(m.label, arm, levels[arm], est))
            if "mu3" in config.estimators:
                est = _cell(f"{where}, model {m.label!r}, mu3", marginal.mu3, ds, res, arm,
                            ci_scale=scale_for(res), level=config.ci_level,
                            printed_variance=config.printed_variance)
                rows.append(_row(m.label, arm, levels[arm], est))
    return AnalysisReport(treatment_levels=levels, fits=summaries, rows=rows,
                          ci_level=config.ci_level)


def _row(model, arm, label, est: marginal.MarginalEstimate) -> dict:
    return {
        "model": model,
        "arm": int(arm),
        "arm_label": label,
        "estimator": est.estimator,
        "variance_method": est.variance_method,
        "estimate": float(est.estimate),
        "variance": float(est.variance),
        "se": float(est.se),
        "ci_low": float(est.ci_low),
        "ci_high": float(est.ci_high),
        "ci_scale": est.ci_scale,
        "ci_level": float(est.ci_level),
        "n_used": int(est.n_used),
        "vcov_source": est.vcov_source,
    }


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def _canonical_json(d: dict) -> str:
    return json.dumps(_jsonable(d), indent=2, allow_nan=False) + "\n"


def report_from_json(text) -> AnalysisReport:
    body = json.loads(text)

    def back(v, key=None):
        if isinstance(v, dict):
            return {k: back(x, k) for k, x in v.items()}
        if isinstance(v, list):
            return [back(x) for x in v]
        if v is None and key in ("sandwich_se", "estimate", "se", "variance"):
            return float("nan")
        return v

    return AnalysisReport.from_dict(back(body))


_METHOD_LABEL = {"iid_sandwich": "", "fixed_x": " fixed X", "random_x": " random X",
                 "full_influence": " full influence", "augmented": ""}


def _row_label(r: dict) -> str:
    if r["estimator"] == "mu1":
        return "mu1 (unadjusted)"
    return f"{r['estimator']}{_METHOD_LABEL[r['variance_method']]} [{r['model']}]"


def _fmt(v: float) -> str:
    return "-" if v is None or not math.isfinite(v) else f"{v:.3f}"


def _text(report: AnalysisReport) -> str:
    arms = list(dict.fromkeys((r["arm"], r["arm_label"]) for r in report.rows))
    labels = list(dict.fromkeys(_row_label(r) for r in report.rows))
    grid = {(_row_label(r), r["arm"]): r for r in report.rows}
    pct = f"{100 * report.ci_level:g}%"
    lines = [["", *[lab for _, lab in arms]]]
    for lab in labels:
        line = [lab]
        for a, _ in arms:
            r = grid.get((lab, a))
            line.append("" if r is None else
                        f"{_fmt(r['estimate'])} ({_fmt(r['ci_low'])}, {_fmt(r['ci_high'])})")
        lines.append(line)
    widths = [max(len(line[j]) for line in lines) for j in range(len(lines[0]))]
    out = [f"Marginal mean estimates with {pct} confidence intervals", ""]
    for line in lines:
        out.append("  ".join([line[0].ljust(widths[0])]
                             + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]).rstrip())
    out.append("")
    out.append("Treatment coding: " + ", ".join(
        f"{k}={lv}" for k, lv in enumerate(report.treatment_levels)))
    for f in report.fits:
        status = f"converged in {f.iterations} iterations" if f.converged else "NOT converged"
        out.append("")
        out.append(f"Model [{f.label}]: {f.family}/{f.link}"
                   f"{', log follow-up offset' if f.offset else ''}; {status}; "
                   f"n = {f.n}; log-likelihood = {f.loglik:.3f}")
        tw = max(len(c["term"]) for c in f.coefficients)
        out.append(f"  {'term'.ljust(tw)}  {'estimate':>10}  {'sandwich SE':>11}")
        for c in f.coefficients:
            out.append(f"  {c['term'].ljust(tw)}  {_fmt(c['estimate']):>10}  "
                       f"{_fmt(c['sandwich_se']):>11}")
    return "\n".join(out) + "\n"


def _csv(report: AnalysisReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in report.rows:
        w.writerow(["" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k]
                    for k in ROW_FIELDS])
    return buf.getvalue()


def render_report(report: AnalysisReport, fmt: str = "text") -> bytes:
    """Render as ``text`` (3 decimals), ``csv`` or ``json`` (full precision)."""
    if fmt == "json":
        return _canonical_json(report.to_dict()).encode()
    if fmt == "csv":
        return _csv(report).encode()
    if fmt == "text":
        return _text(report).encode()
    raise InvalidConfig(f"unknown output format {fmt!r}; expected one of {FORMATS}")
