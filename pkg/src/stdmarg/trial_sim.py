"""Monte Carlo study of the marginal mean estimators in simulated count trials.

Each replicate draws a binary covariate X ~ Bernoulli(0.5), follow-up T
(Uniform(0, 1] for a random quarter of patients, else 1), a frailty with mean
one, and Y ~ Poisson(frailty * T * exp(lp(X, Z))).  The four scenarios differ
in frailty law, whether lp has an X x Z interaction, and the working model.

Random streams are keyed by (seed, replicate, role) on Philox generators, so
any replicate can be regenerated in isolation and results do not depend on
how replicates are split across worker processes.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import marginal
from .dataset import TrialDataset
from .errors import InvalidConfig, OddBlockForProbabilities, SimulationAborted, StdMargError
from .glm_core import ModelSpec, fit

SCHEMA_VERSION = 1
KINDS = ("simple", "permuted_block", "stratified_permuted_block")
_ROLES = {"x": 0, "t": 1, "gamma": 2, "y": 3, "randomization": 4}
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class RandomizationScheme:
    kind: str = "permuted_block"
    block_size: int = 4
    strata_covariates: Tuple[int, ...] = ()
    p_assign: Tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown randomization kind {self.kind!r}; expected one of {KINDS}")
        p = tuple(float(v) for v in self.p_assign)
        if len(p) < 2 or any(v <= 0 for v in p) or abs(sum(p) - 1.0) > 1e-9:
            raise InvalidConfig(f"p_assign must be >= 2 positive probabilities summing to 1: {p}")
        object.__setattr__(self, "p_assign", p)
        object.__setattr__(self, "strata_covariates", tuple(int(j) for j in self.strata_covariates))
        if self.kind != "simple":
            counts = [self.block_size * v for v in p]
            if self.block_size < 1 or any(abs(c - round(c)) > 1e-9 for c in counts):
                raise OddBlockForProbabilities(
                    f"block size {self.block_size} cannot hold allocation {p} exactly")
        if self.kind == "stratified_permuted_block" and not self.strata_covariates:
            raise InvalidConfig("stratified randomization needs strata_covariates")

    @property
    def block_counts(self) -> np.ndarray:
        return np.array([round(self.block_size * v) for v in self.p_assign])


def _blocks(m: int, scheme: RandomizationScheme, rng: np.random.Generator) -> np.ndarray:
    base = np.repeat(np.arange(len(scheme.p_assign)), scheme.block_counts)
    nb = -(-m // scheme.block_size)
    return rng.permuted(np.tile(base, (nb, 1)), axis=1).ravel()[:m]


def assign_treatments(n: int, scheme: RandomizationScheme, x_matrix: Optional[np.ndarray],
                      rng: np.random.Generator) -> np.ndarray:
    """Allocate ``n`` patients (in enrolment order) to arms.

    Stratified allocation runs an independent permuted-block sequence inside
    each stratum, strata visited in sorted order of their covariate values.
    """
    if scheme.kind == "simple":
        return rng.choice(len(scheme.p_assign), size=n, p=scheme.p_assign)
    if scheme.kind == "permuted_block":
        return _blocks(n, scheme, rng)
    x = np.asarray(x_matrix, dtype=float).reshape(n, -1)
    try:
        keys = x[:, list(scheme.strata_covariates)]
    except IndexError:
        raise InvalidConfig(f"strata covariates {scheme.strata_covariates} out of range") from None
    if not np.all(np.isfinite(keys)) or np.any(keys != np.round(keys)):
        raise InvalidConfig("stratification covariates must be discrete (integer-coded)")
    _, stratum = np.unique(keys, axis=0, return_inverse=True)
    stratum = stratum.ravel()
    z = np.empty(n, dtype=np.int64)
    for s in range(stratum.max() + 1):
        idx = np.flatnonzero(stratum == s)
        z[idx] = _blocks(idx.size, scheme, rng)
    return z


@dataclass(frozen=True)
class ScenarioSpec:
    """One of the four count-outcome scenarios (ids 1-4), defaults filled from the id."""

    id: int
    n: int = 400
    frailty: Optional[str] = None
    intercept: float = 0.0
    x_coef: float = 3.0
    z_coef: float = 1.0
    xz_coef: Optional[float] = None
    partial_followup_prob: float = 0.25
    working_model: Optional[str] = None

    def __post_init__(self):
        if self.id not in (1, 2, 3, 4):
            raise InvalidConfig(f"scenario id must be 1-4, got {self.id}")
        if self.frailty is None:
            object.__setattr__(self, "frailty", "lognormal" if self.id == 2 else "gamma")
        if self.frailty not in ("gamma", "lognormal"):
            raise InvalidConfig(f"unknown frailty {self.frailty!r}")
        if self.xz_coef is None:
            object.__setattr__(self, "xz_coef", -1.5 if self.id in (3, 4) else 0.0)
        if self.working_model is None:
            object.__setattr__(self, "working_model", "poisson" if self.id == 4 else "negbin2")

    def log_rate(self, x, z):
        return self.intercept + self.x_coef * x + self.z_coef * z + self.xz_coef * x * z

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.working_model, offset_rule="log_followup")


# gamma(shape 2, scale 1/2): mean 1, variance 1/2
_GAMMA_SHAPE, _GAMMA_SCALE = 2.0, 0.5
# lognormal with natural-scale mean 1 and variance 1/2
_LN_SIGMA2 = math.log(1.5)
_LN_MU = -_LN_SIGMA2 / 2.0


def stream(seed: int, replicate_index: int, role: str) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replicate_index), _ROLES[role]))
    return np.random.Generator(np.random.Philox(ss))


def draw_frailty(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "gamma":
        return rng.gamma(_GAMMA_SHAPE, _GAMMA_SCALE, size)
    return rng.lognormal(_LN_MU, math.sqrt(_LN_SIGMA2), size)


def generate_scenario(spec: ScenarioSpec, scheme: RandomizationScheme, seed: int,
                      replicate_index: int) -> TrialDataset:
    n = spec.n
    x = (stream(seed, replicate_index, "x").random(n) < 0.5).astype(float)
    rt = stream(seed, replicate_index, "t")
    partial = rt.random(n) < spec.partial_followup_prob
    t = np.where(partial, 1.0 - rt.random(n), 1.0)
    gamma = draw_frailty(spec.frailty, n, stream(seed, replicate_index, "gamma"))
    z = assign_treatments(n, scheme, x[:, None], stream(seed, replicate_index, "randomization"))
    mean = gamma * t * np.exp(spec.log_rate(x, z))
    y = stream(seed, replicate_index, "y").poisson(mean).astype(float)
    return TrialDataset(y=y, x=x[:, None], z=z, t=t, n_arms=len(scheme.p_assign),
                        covariate_names=("x",))


def true_marginal_mean(spec: ScenarioSpec, z: int) -> float:
    """Exact event rate under arm ``z``: E[frailty] = 1 and X is enumerated."""
    return 0.5 * (math.exp(spec.log_rate(0.0, z)) + math.exp(spec.log_rate(1.0, z)))


def oracle_marginal_mean(spec: ScenarioSpec, z: int, oracle_draws: int = 10**7,
                         seed: int = 0, chunk: int = 10**6) -> Tuple[float, float]:
    """Brute-force Monte Carlo of E[frailty * exp(lp(X, z))] with its MC standard error."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    total = total_sq = 0.0
    done = 0
    while done < oracle_draws:
        m = min(chunk, oracle_draws - done)
        x = (rng.random(m) < 0.5).astype(float)
        v = draw_frailty(spec.frailty, m, rng) * np.exp(spec.log_rate(x, z))
        total += v.sum()
        total_sq += np.dot(v, v)
        done += m
    mean = total / oracle_draws
    var = (total_sq - oracle_draws * mean**2) / (oracle_draws - 1)
    return mean, math.sqrt(var / oracle_draws)


@dataclass(frozen=True)
class SimulationConfig:
    scenarios: Tuple[int, ...] = (1, 2, 3, 4)
    schemes: Tuple[RandomizationScheme, ...] = (RandomizationScheme(),)
    n: int = 400
    replicates: int = 10_000
    seed: int = 20240101
    arms: Tuple[int, ...] = (0, 1)
    estimators: Tuple[str, ...] = ("mu1", "mu2", "mu3")
    variance_methods: Tuple[str, ...] = ("fixed_x", "random_x")
    ci_scale: str = "log"
    ci_level: float = 0.95
    vcov_source: str = "sandwich"
    printed_variance: bool = False
    workers: int = 1

    def __post_init__(self):
        for e in self.estimators:
            if e not in marginal.ESTIMATORS:
                raise InvalidConfig(f"unknown estimator {e!r}")
        for m in self.variance_methods:
            if m not in marginal.MU2_METHODS:
                raise InvalidConfig(f"unknown mu2 variance method {m!r}")
        if self.replicates < 1 or self.n < 2:
            raise InvalidConfig("need replicates >= 1 and n >= 2")
        if self.ci_scale not in ("log", "identity"):
            raise InvalidConfig(f"unknown ci_scale {self.ci_scale!r}")
        for s in self.scenarios:
            ScenarioSpec(s)

    @property
    def cells(self) -> List[Tuple[int, str, str]]:
        """(arm, estimator, variance method) in fixed report order."""
        out = []
        for arm in self.arms:
            if "mu1" in self.estimators:
                out.append((arm, "mu1", "iid_sandwich"))
            if "mu2" in self.estimators:
                out.extend((arm, "mu2", m) for m in self.variance_methods)
            if "mu3" in self.estimators:
                out.append((arm, "mu3", "augmented"))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        d["schemes"] = [asdict(s) for s in self.schemes]
        return d

    @classmethod
    def from_dict(cls, d: dict, workers: Optional[int] = None) -> "SimulationConfig":
        """Build from the JSON config layout (``scenario``, ``randomization``, ...)."""
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported schema_version {version}")
        scen = d.pop("scenario", d.pop("scenarios", [1, 2, 3, 4]))
        scen = (scen,) if isinstance(scen, int) else tuple(scen)
        rand = d.pop("randomization", d.pop("schemes", {"kind": "permuted_block"}))
        rand = [rand] if isinstance(rand, dict) else list(rand)
        schemes = []
        for r in rand:
            r = dict(r)
            strata = r.pop("strata", r.pop("strata_covariates", None))
            if strata is None:
                strata = [0] if r.get("kind") == "stratified_permuted_block" else []
            r["strata_covariates"] = tuple(strata)
            if "p_assign" in r:
                r["p_assign"] = tuple(r["p_assign"])
            schemes.append(RandomizationScheme(**r))
        kwargs = {"scenarios": scen, "schemes": tuple(schemes)}
        for key in ("arms", "estimators", "variance_methods"):
            if key in d:
                kwargs[key] = tuple(d.pop(key))
        for key in ("n", "replicates", "seed", "ci_scale", "ci_level", "vcov_source",
                    "printed_variance", "workers"):
            if key in d:
                kwargs[key] = d.pop(key)
        if d:
            raise InvalidConfig(f"unknown config keys: {sorted(d)}")
        if workers is not None:
            kwargs["workers"] = workers
        return cls(**kwargs)


_FIELDS = 4  # estimate, variance, ci_low, ci_high


def _replicate(spec: ScenarioSpec, scheme: RandomizationScheme, cfg: SimulationConfig,
               r: int) -> np.ndarray:
    cells = cfg.cells
    out = np.full((len(cells), _FIELDS), np.nan)
    data = generate_scenario(spec, scheme, cfg.seed, r)
    model = None
    if "mu2" in cfg.estimators or "mu3" in cfg.estimators:
        try:
            model = fit(data, spec.model_spec)
        except StdMargError:
            model = None
    for i, (arm, est, method) in enumerate(cells):
        try:
            if est == "mu1":
                res = marginal.mu1(data, arm, ci_scale=cfg.ci_scale, level=cfg.ci_level,
                                   printed_variance=cfg.printed_variance)
            elif model is None:
                continue
            elif est == "mu2":
                res = marginal.mu2(data, model, arm, method, vcov_source=cfg.vcov_source,
                                   ci_scale=cfg.ci_scale, level=cfg.ci_level)
            else:
                res = marginal.mu3(data, model, arm, ci_scale=cfg.ci_scale, level=cfg.ci_level,
                                   printed_variance=cfg.printed_variance)
        except StdMargError:
            continue
        out[i] = (res.estimate, res.variance, res.ci_low, res.ci_high)
    return out


def _run_chunk(args) -> np.ndarray:
    spec, scheme, cfg, start, stop = args
    return np.stack([_replicate(spec, scheme, cfg, r) for r in range(start, stop)])


def run_replicates(spec: ScenarioSpec, scheme: RandomizationScheme, cfg: SimulationConfig,
                   workers: int = 1, pool: Optional[ProcessPoolExecutor] = None) -> np.ndarray:
    """Raw per-replicate results, shape (replicates, cells, 4)."""
    R = cfg.replicates
    if workers <= 1 and pool is None:
        return _run_chunk((spec, scheme, cfg, 0, R))
    n_chunks = max(1, min(R, 8 * workers))
    edges = np.linspace(0, R, n_chunks + 1).astype(int)
    jobs = [(spec, scheme, cfg, int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    return np.concatenate(list(pool.map(_run_chunk, jobs)))


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v


def summarize_cell(est: np.ndarray, var: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                   truth: float, reference: Optional[np.ndarray] = None) -> Dict[str, float]:
    """Bias, empirical variance, coverage and their Monte Carlo SEs for one cell.

    ``reference`` holds the crude estimator's replicates for relative
    efficiency (ratio of empirical variances, computed on replicates where
    both succeeded).
    """
    ok = np.isfinite(est)
    R = int(ok.sum())
    out = {"replicates": R, "failures": int(est.size - R)}
    e = est[ok]
    nan = float("nan")
    if R == 0:
        return out
    mean = float(e.mean())
    sd = float(e.std(ddof=1)) if R > 1 else nan
    dev2 = (e - mean) ** 2
    covered = (lo[ok] <= truth) & (truth <= hi[ok])
    c = float(covered.mean())
    out.update(
        true_mean=truth,
        mean=mean,
        mean_mc_se=sd / math.sqrt(R),
        bias=mean - truth,
        bias_mc_se=sd / math.sqrt(R),
        empirical_variance=sd**2,
        empirical_variance_mc_se=float(dev2.std(ddof=1)) / math.sqrt(R) if R > 1 else nan,
        mean_estimated_se=float(np.sqrt(var[ok]).mean()),
        coverage=100.0 * c,
        coverage_mc_se=100.0 * math.sqrt(c * (1.0 - c) / R),
    )
    if reference is not None:
        both = ok & np.isfinite(reference)
        m = int(both.sum())
        if m > 1:
            a = (reference[both] - reference[both].mean()) ** 2
            b = (est[both] - est[both].mean()) ** 2
            ratio = float(a.sum() / b.sum())
            # delta method on the ratio of two paired means
            se = float(np.std(a - ratio * b, ddof=1) / (b.mean() * math.sqrt(m)))
            out.update(relative_efficiency=ratio, relative_efficiency_mc_se=se)
        else:
            out.update(relative_efficiency=nan, relative_efficiency_mc_se=nan)
    return out


@dataclass
class SimulationReport:
    config: dict
    rows: List[dict] = field(default_factory=list)

    def to_json(self) -> str:
        body = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "rows": [{k: _nan_to_none(v) for k, v in row.items()} for row in self.rows],
        }
        return json.dumps(body, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimulationReport":
        body = json.loads(text)
        if body.get("schema_version") != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported schema_version {body.get('schema_version')}")
        rows = [{k: (float("nan") if v is None else v) for k, v in row.items()}
                for row in body["rows"]]
        return cls(config=body["config"], rows=rows)

    def find(self, **keys) -> dict:
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in keys.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {keys}")
        return hits[0]

    def to_text(self) -> str:
        return render_tables(self)


def run_simulation(config: SimulationConfig, workers: Optional[int] = None) -> SimulationReport:
    """Run every (scenario, scheme) pair and summarize each estimator cell.

    Results are identical for any number of workers: replicate streams are
    keyed by index and summaries are computed once, in replicate order.
    """
    workers = config.workers if workers is None else workers
    cells = config.cells
    rows = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for scen_id in config.scenarios:
            spec = ScenarioSpec(scen_id, n=config.n)
            for scheme in config.schemes:
                raw = run_replicates(spec, scheme, config, workers, pool)
                refs = {arm: raw[:, i, 0] for i, (arm, est, _) in enumerate(cells)
                        if est == "mu1"}
                for i, (arm, est, method) in enumerate(cells):
                    truth = true_marginal_mean(spec, arm)
                    stats = summarize_cell(raw[:, i, 0], raw[:, i, 1], raw[:, i, 2],
                                           raw[:, i, 3], truth, refs.get(arm))
                    if stats["failures"] > MAX_FAILURE_RATE * config.replicates:
                        raise SimulationAborted(
                            f"scenario {scen_id}, {scheme.kind}: {est}/{method} arm {arm} "
                            f"failed in {stats['failures']} of {config.replicates} replicates")
                    rows.append({
                        "scenario": scen_id,
                        "randomization": scheme.kind,
                        "working_model": spec.working_model,
                        "arm": arm,
                        "estimator": est,
                        "variance_method": method,
                        **stats,
                    })
    finally:
        if pool is not None:
            pool.shutdown()
    return SimulationReport(config=config.to_dict(), rows=rows)


_TABLE_ROWS = [
    ("mu1", None, "Mean", "mean"),
    ("mu1", "iid_sandwich", "95% CI Cov.", "coverage"),
    ("mu2", None, "Bias", "bias"),
    ("mu2", None, "Rel. eff.", "relative_efficiency"),
    ("mu2", "fixed_x", "Fixed X 95% CI Cov.", "coverage"),
    ("mu2", "random_x", "Random X 95% CI Cov.", "coverage"),
    ("mu2", "full_influence", "Full influence 95% CI Cov.", "coverage"),
    ("mu3", None, "Bias", "bias"),
    ("mu3", None, "Rel. eff.", "relative_efficiency"),
    ("mu3", "augmented", "95% CI Cov.", "coverage"),
]


def _fmt(v, key):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "-"
    return f"{v:.2f}"


def render_tables(report: SimulationReport) -> str:
    """Aligned text tables: one per (randomization, arm), scenarios as columns."""
    rows = report.rows
    schemes = list(dict.fromkeys(r["randomization"] for r in rows))
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    scens = list(dict.fromkeys(r["scenario"] for r in rows))
    out = []
    for kind in schemes:
        for arm in arms:
            sub = [r for r in rows if r["randomization"] == kind and r["arm"] == arm]
            if not sub:
                continue
            header = ["", *[f"Scenario {s}" for s in scens]]
            lines = [header]
            current = None
            for est, method, label, key in _TABLE_ROWS:
                cand = [r for r in sub if r["estimator"] == est
                        and (method is None or r["variance_method"] == method)]
                if not cand:
                    continue
                if est != current:
                    lines.append([f"{est}({arm})"] + [""] * len(scens))
                    current = est
                vals = []
                for s in scens:
                    hit = [r for r in cand if r["scenario"] == s]
                    vals.append(_fmt(hit[0].get(key), key) if hit else "-")
                lines.append([f"  {label}", *vals])
            widths = [max(len(line[j]) for line in lines) for j in range(len(header))]
            out.append(f"Randomization: {kind}, arm {arm}, "
                       f"{report.config.get('replicates')} replicates")
            for line in lines:
                out.append("  ".join([line[0].ljust(widths[0])]
                                     + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]))
            out.append("")
    return "\n".join(out)


def default_workers() -> int:
    env = os.environ.get("STDMARG_THREADS")
    return int(env) if env else 1
