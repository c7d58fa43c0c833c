"""Simulation models, accuracy metrics and replicate-grid benchmarks."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from .distributions import TensorTParams, sample_tt
from .estimators import Dataset, center, fit
from .tensor import KroneckerScale, ar_matrix

log = logging.getLogger(__name__)

MODELS = ("M1", "M2", "M3", "M4-rhombus", "M4-bat", "M4-cross")
_DEFAULT_Q = {"M1": 1, "M2": 5, "M3": 4, "M4-rhombus": 10, "M4-bat": 10, "M4-cross": 10}
_DEFAULT_N = {"M1": 100, "M2": 100, "M3": 50, "M4-rhombus": 100, "M4-bat": 100, "M4-cross": 100}
_DEFAULT_B = {"M1": 1.0, "M2": 1.0, "M3": 0.8, "M4-rhombus": 1.0, "M4-bat": 1.0, "M4-cross": 1.0}


@lru_cache(maxsize=None)
def _fixture():
    with resources.files("ttreg").joinpath("data/shapes.json").open("r") as fh:
        return json.load(fh)


def shape_mask(name: str) -> np.ndarray:
    """32 x 32 boolean mask from the packaged fixture (``cross``, ``diagonal``, ``bat``, ``rhombus``)."""
    doc = _fixture()
    if doc.get("version") != 1:
        raise ValueError(f"unsupported shape fixture version {doc.get('version')}")
    try:
        rows = doc["masks"][name]
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; available: {sorted(doc['masks'])}") from None
    return np.array([[c == "1" for c in row] for row in rows])


@dataclass(frozen=True)
class SimConfig:
    model: str = "M1"
    dims: tuple = (32, 32)
    n: int | None = None
    rho: float = 0.5
    nu: float = 4.0
    b: float | None = None
    s: float = 0.03
    seed: int = 0
    replicates: int = 100

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODELS}")
        if not 0 < self.s <= 1:
            raise ValueError("sparsity s must lie in (0, 1]")
        if self.n is not None and self.n < 2:
            raise ValueError("n must be at least 2")
        if any(int(d) < 1 for d in self.dims):
            raise ValueError("dims must be positive")
        if self.model != "M1" and tuple(self.dims) != (32, 32):
            raise ValueError(f"{self.model} is defined on 32 x 32 responses only")
        if not (self.nu > 0):
            raise ValueError("nu must be positive")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def sample_size(self) -> int:
        return self.n if self.n is not None else _DEFAULT_N[self.model]

    @property
    def signal(self) -> float:
        return self.b if self.b is not None else _DEFAULT_B[self.model]

    @property
    def q(self) -> int:
        return _DEFAULT_Q[self.model]


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for replicate ``index`` of a run seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _top_fraction(v: np.ndarray, frac: float) -> np.ndarray:
    """Keep the ``frac`` largest entries by magnitude (ties to the lower index), zero the rest."""
    k = int(round(frac * v.size))
    order = np.lexsort((np.arange(v.size), -np.abs(v)))
    out = np.zeros_like(v)
    out[order[:k]] = v[order[:k]]
    return out


def true_coefficients(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    dims, b = cfg.dims, cfg.signal
    p = int(np.prod(dims))
    if cfg.model == "M1":
        k = int(round(cfg.s * p))
        flat = np.zeros(p)
        flat[rng.choice(p, size=k, replace=False)] = 1.0
        return b * flat.reshape(dims + (1,), order="F")
    if cfg.model == "M2":
        a1 = _top_fraction(rng.normal(0, math.sqrt(0.5), 32), 0.2)
        a2 = _top_fraction(rng.normal(0, math.sqrt(0.5), 32), 0.2)
        a3 = _top_fraction(rng.normal(0, math.sqrt(0.5), 5), 0.2)
        return b * np.einsum("i,j,k->ijk", a1, a2, a3)
    if cfg.model == "M3":
        out = np.zeros(dims + (4,))
        for k, name in zip((1, 2, 3), ("cross", "diagonal", "bat")):
            out[..., k] = b * shape_mask(name)
        return out
    mask = shape_mask(cfg.model.split("-")[1])
    return b * np.repeat(mask[..., None].astype(float), cfg.q, axis=-1)


def generate(cfg: SimConfig, index: int = 0):
    """Draw one replicate: ``(Dataset, B, support)`` with support over cells or fibers."""
    rng = replicate_rng(cfg.seed, index)
    btrue = true_coefficients(cfg, rng)
    n, q = cfg.sample_size, cfg.q
    x = rng.standard_normal((q, n))
    xi = KroneckerScale([ar_matrix(p, cfg.rho) for p in cfg.dims])
    e, _ = sample_tt(TensorTParams(np.zeros(cfg.dims), xi, cfg.nu), rng, size=n)
    p = int(np.prod(cfg.dims))
    y = (btrue.reshape(p, q, order="F") @ x).reshape(cfg.dims + (n,), order="F") + e
    return Dataset(x, y), btrue, support(btrue, cfg.model)


def support(b: np.ndarray, model: str = "M1") -> np.ndarray:
    """Boolean support: per coefficient, or per response-cell fiber for M4."""
    if model.startswith("M4"):
        return np.any(b != 0, axis=-1)
    return b != 0


def ree(b_hat: np.ndarray, b: np.ndarray) -> float:
    """Relative estimation error in percent."""
    denom = float(np.sum(np.asarray(b) ** 2))
    if denom == 0:
        raise ValueError("REE undefined for a zero true coefficient tensor")
    return 100.0 * float(np.sum((np.asarray(b_hat) - b) ** 2)) / denom


def tpr_fpr(est: np.ndarray, truth: np.ndarray):
    """True- and false-positive selection rates in percent over a common universe."""
    est, truth = np.asarray(est, bool), np.asarray(truth, bool)
    pos, neg = truth.sum(), (~truth).sum()
    tpr = 100.0 * (est & truth).sum() / pos if pos else math.nan
    fpr = 100.0 * (est & ~truth).sum() / neg if neg else math.nan
    return float(tpr), float(fpr)


# ---------------------------------------------------------------------------
# replicate grid


@dataclass
class MetricReport:
    model: str
    method: str
    replicates: int
    failures: int
    ree_mean: float
    ree_se: float
    tpr_mean: float
    tpr_se: float
    fpr_mean: float
    fpr_se: float
    seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = asdict(self)
        out.pop("config")
        return out


def _group_kind(method: str, model: str) -> str:
    return "group" if model.startswith("M4") and method in ("apl", "apn", "apt", "ost", "host") else "lasso"


def run_replicate(cfg: SimConfig, index: int, methods, fit_kwargs: dict | None = None) -> dict:
    """Fit every method on one replicate; returns ``{method: (ree, tpr, fpr)}`` or an error string."""
    fit_kwargs = fit_kwargs or {}
    ds, btrue, supp = generate(cfg, index)
    ds = center(ds, warn=False)
    out = {}
    for m in methods:
        try:
            kw = dict(fit_kwargs.get(m, {}))
            if m not in ("ols", "tols"):
                kw.setdefault("kind", _group_kind(m, cfg.model))
                kw.setdefault("seed", index)
            res = fit(ds, m, **kw)
            bh = res.b_hat
            e = ree(bh, btrue)
            if m == "ols":
                tp, fp = math.nan, math.nan
            else:
                tp, fp = tpr_fpr(support(bh, cfg.model), supp)
            out[m] = (e, tp, fp)
        except Exception as exc:  # a failed replicate is recorded, not fatal
            log.warning("replicate %d method %s failed: %s", index, m, exc)
            out[m] = f"{type(exc).__name__}: {exc}"
    return out


def _mean_se(vals):
    a = np.array([v for v in vals if not math.isnan(v)])
    if a.size == 0:
        return math.nan, math.nan
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else math.nan
    return float(a.mean()), se


def _job(args):
    cfg, index, methods, fit_kwargs = args
    return run_replicate(cfg, index, methods, fit_kwargs)


def run_grid(configs, methods, jobs: int = 1, fit_kwargs: dict | None = None) -> list[MetricReport]:
    """Means and standard errors per (config, method); replicate order fixes the aggregation.

    Standard errors are ``nan`` (reported as NA) when fewer than two
    replicates succeed.
    """
    methods = [m.lower() for m in methods]
    reports = []
    for cfg in configs:
        t0 = time.perf_counter()
        tasks = [(cfg, i, methods, fit_kwargs) for i in range(cfg.replicates)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_job, tasks))
        else:
            results = [_job(t) for t in tasks]
        elapsed = time.perf_counter() - t0
        for m in methods:
            ok = [r[m] for r in results if not isinstance(r[m], str)]
            fails = len(results) - len(ok)
            ree_m, ree_s = _mean_se([v[0] for v in ok])
            tpr_m, tpr_s = _mean_se([v[1] for v in ok])
            fpr_m, fpr_s = _mean_se([v[2] for v in ok])
            reports.append(MetricReport(cfg.model, m, len(ok), fails, ree_m, ree_s, tpr_m, tpr_s,
                                        fpr_m, fpr_s, elapsed, asdict(cfg)))
    return reports


def replicate_table(cfg: SimConfig, methods, jobs: int = 1, fit_kwargs=None):
    """Per-replicate metrics as a list of dicts (for pairwise comparisons across methods)."""
    tasks = [(cfg, i, [m.lower() for m in methods], fit_kwargs) for i in range(cfg.replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_job, tasks))
    return [_job(t) for t in tasks]
