"""End-to-end experiments: strategies, configuration, run persistence and reports.

One *run* is a (strategy, error kind, work exponent, measurement, repetition)
tuple. Runs are written to ``<out>/runs/<run_id>.json`` as soon as they
finish, so an interrupted experiment resumes where it stopped. Reports are
plain CSV built from those records and contain no timing information, which
keeps them byte-identical across reruns with the same master seed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .bayes import Measurement, PriorBox, log_posterior_batch
from .design import ToleranceVector, apply_design_update, optimize_tolerances, select_candidates
from .error_models import ErrorKind, log_error_model_estimate
from .forward_models import SimulatedEvaluator, make_model
from .gp_core import (
    DegenerateDataWarning,
    Design,
    Kernel,
    TrainingData,
    default_kernel,
    fit,
    penalized_log_marginal_likelihood,
    tune_hyperparameters,
)
from .metrics import cached_reference, metric_KL, metric_L2
from .sampler import (
    PAPER_SCHEDULES,
    ChainClampWarning,
    SampleChain,
    SampleSchedule,
    init_ensemble,
    n_walkers,
    run as run_sampler,
    update_chain,
)
from .work_model import WorkModel, design_work, geometric_ratio_for_total, is_refinement, schedule

log = logging.getLogger(__name__)

STRATEGIES = ("AGP-geom", "AGP-const", "posAGP", "LHSGP")
BUDGET_ATOL = 1e-9

# purpose tags for seed derivation
_TRUTH, _NOISE, _INIT_PTS, _INIT_EVAL, _EVAL, _MCMC, _LHS, _REF = range(8)


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    error_kind: str
    exponent: float
    tol_default: float
    J: int
    candidates_per_iter: int
    geometric_ratio: float = 1.0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}")
        ErrorKind(self.error_kind)
        if self.J < 1 or self.candidates_per_iter < 1 or not self.tol_default > 0:
            raise ValueError("J, candidates per iteration and tau_default must be positive")

    @property
    def adaptive(self) -> bool:
        return self.name.startswith("AGP")

    @property
    def work_model(self) -> WorkModel:
        return WorkModel(self.exponent)

    def budget_increments(self) -> list[float]:
        unit = self.work_model.work_of_tol(self.tol_default)
        if self.name == "AGP-geom":
            return schedule("geometric", unit, self.J, self.geometric_ratio)
        return schedule("constant", self.candidates_per_iter * unit, self.J)

    @property
    def total_budget(self) -> float:
        return float(sum(self.budget_increments()))

    @property
    def label(self) -> str:
        return f"{self.name}_{self.error_kind}_q{self.exponent:g}"


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    n_measurements: int
    repetitions: int
    seed: int
    initial_size: int
    tol_default: float
    noise_std: float
    J: int
    candidates_per_iter: int
    geometric_ratio: float
    exponents: tuple = (1.0,)
    strategies: tuple = STRATEGIES
    error_kinds: tuple = ("KL", "L2")
    sample_schedule: SampleSchedule | None = None
    warmup_first: int = 200
    warmup_later: int = 50
    opt_samples: int = 2000  # chain subsample used by the design step
    reference_samples: int = 20000
    grid_coarse: int = 200
    grid_refine: int = 4
    preset: str = "custom"

    def __post_init__(self):
        make_model(self.problem)
        for name in ("n_measurements", "repetitions", "initial_size", "J", "candidates_per_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        object.__setattr__(self, "exponents", tuple(float(q) for q in self.exponents))
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "error_kinds", tuple(str(k).upper() for k in self.error_kinds))
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")
        if self.sample_schedule is None:
            object.__setattr__(self, "sample_schedule", dataclasses.replace(PAPER_SCHEDULES[self.problem], J=self.J))
        elif isinstance(self.sample_schedule, dict):
            object.__setattr__(self, "sample_schedule", SampleSchedule(**self.sample_schedule))
        if self.sample_schedule.J != self.J:
            raise ValueError("sample schedule J must match the experiment J")

    def strategy_configs(self) -> list[StrategyConfig]:
        return [
            StrategyConfig(s, k, q, self.tol_default, self.J, self.candidates_per_iter, self.geometric_ratio)
            for s in self.strategies
            for k in self.error_kinds
            for q in self.exponents
        ]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["exponents"], d["strategies"], d["error_kinds"] = list(self.exponents), list(self.strategies), list(self.error_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


# problem setups: initial size, tau_default, noise std, J, candidates/iteration, geometric ratio,
# measurements, repetitions, exponents
_PAPER_SETUPS = {
    "synthetic2d": dict(initial_size=5, tol_default=0.05, noise_std=0.02, J=13, candidates_per_iter=3,
                        geometric_ratio=1.173, n_measurements=5, repetitions=5, exponents=(1.0, 1.5, 2.0, 3.0)),
    "diffusion3d": dict(initial_size=9, tol_default=0.02, noise_std=0.01, J=15, candidates_per_iter=4,
                        geometric_ratio=1.178, n_measurements=3, repetitions=5, exponents=(1.0, 2.0)),
    "poisson4d": dict(initial_size=17, tol_default=0.04, noise_std=0.05, J=20, candidates_per_iter=5,
                      geometric_ratio=1.148, n_measurements=3, repetitions=4, exponents=(1.0, 2.0)),
}

DESK_J = 6
DESK_CHAIN = 4000


def preset(problem: str, name: str = "desk", seed: int = 0) -> ExperimentConfig:
    """Full-scale (``paper``) or reduced (``desk``) configuration of a problem."""
    if problem not in _PAPER_SETUPS:
        raise KeyError(f"no preset for problem {problem!r}")
    base = dict(_PAPER_SETUPS[problem])
    if name == "paper":
        return ExperimentConfig(problem=problem, seed=seed, preset="paper", **base)
    if name != "desk":
        raise ValueError(f"unknown preset {name!r}")
    paper_sched = PAPER_SCHEDULES[problem]
    base.update(
        J=DESK_J,
        n_measurements=2,
        repetitions=2,
        exponents=(1.0,),
        geometric_ratio=geometric_ratio_for_total(DESK_J, DESK_J * base["candidates_per_iter"]),
        sample_schedule=paper_sched.scaled(DESK_CHAIN / paper_sched.n_last, DESK_J),
        reference_samples=10000,
        opt_samples=1000,
    )
    return ExperimentConfig(problem=problem, seed=seed, preset="desk", **base)


def load_config(path, preset_name: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Read a JSON config: ``problem``, optional ``preset`` and any field overrides."""
    raw = json.loads(Path(path).read_text())
    if "problem" not in raw:
        raise ValueError("config needs a 'problem' entry")
    name = preset_name or raw.pop("preset", None) or "desk"
    raw.pop("preset", None)
    cfg = preset(raw.pop("problem"), name, seed if seed is not None else raw.pop("seed", 0))
    raw.pop("seed", None)
    unknown = set(raw) - {f.name for f in dataclasses.fields(ExperimentConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "J" in raw and "sample_schedule" not in raw:
        raw["sample_schedule"] = dataclasses.replace(cfg.sample_schedule, J=raw["J"])
    return dataclasses.replace(cfg, **raw)


# --- seeding and setup -----------------------------------------------------


def _seed(cfg: ExperimentConfig, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(cfg.seed, spawn_key=tuple(int(t) for t in tags))


def _rng(cfg, *tags) -> np.random.Generator:
    return np.random.default_rng(_seed(cfg, *tags))


def lhs_points(n: int, lower, upper, rng) -> np.ndarray:
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    return lower + (upper - lower) * qmc.LatinHypercube(len(lower), seed=rng).random(n)


def initial_design(problem: str, size: int, tol_default: float, seed) -> tuple[Design, TrainingData]:
    """LHS points over the domain, all evaluated at ``tol_default``.

    ``seed`` may be an int or a pair of seeds (points, evaluations).
    """
    fm = make_model(problem)
    s_pts, s_eval = seed if isinstance(seed, tuple) else np.random.SeedSequence(seed).spawn(2)
    pts = lhs_points(size, fm.lower, fm.upper, np.random.default_rng(s_pts))
    ev = SimulatedEvaluator(fm, s_eval)
    design = Design(pts, np.full(size, float(tol_default)))
    vals = np.array([ev.evaluate(p, tol_default) for p in pts])
    return design, TrainingData(design, vals)


def measurements(cfg: ExperimentConfig) -> list[tuple[np.ndarray, Measurement]]:
    """Truth parameters (LHS over the domain) and noisy exact-model measurements."""
    fm = make_model(cfg.problem)
    truths = lhs_points(cfg.n_measurements, fm.lower, fm.upper, _rng(cfg, _TRUTH))
    out = []
    for i, p in enumerate(truths):
        y = fm.eval_exact(p) + cfg.noise_std * _rng(cfg, _NOISE, i).standard_normal(fm.dim_out)
        out.append((p, Measurement(y, cfg.noise_std)))
    return out


# --- records ---------------------------------------------------------------


@dataclass
class RunRecord:
    run_id: str
    strategy: str
    error_kind: str
    exponent: float
    measurement: int
    repetition: int
    rows: list = field(default_factory=list)
    final_data: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    audits: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    samples_file: str = ""

    @property
    def passed_audits(self) -> bool:
        return all(v for k, v in self.audits.items() if k != "messages")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def run_id(strat: StrategyConfig, meas_idx: int, rep: int) -> str:
    return f"{strat.label}_m{meas_idx}_r{rep}"


def _thin(samples: np.ndarray, n_max: int) -> np.ndarray:
    if len(samples) <= n_max:
        return samples
    idx = np.linspace(0, len(samples) - 1, n_max).round().astype(int)
    return samples[idx]


def _pad_from_chain(chain: np.ndarray, taken: np.ndarray, n: int, lower, upper, rng) -> np.ndarray:
    """Up to ``n`` distinct chain samples away from the points in ``taken``."""
    width = np.asarray(upper) - np.asarray(lower)
    out = []
    for i in rng.permutation(len(chain)):
        x = chain[i]
        block = np.concatenate([taken, np.array(out).reshape(-1, len(x))])
        if len(block) == 0 or np.min(np.max(np.abs(block - x) / width, axis=1)) > 1e-2:
            out.append(x)
        if len(out) == n:
            break
    return np.array(out).reshape(-1, taken.shape[1])


@dataclass
class _Context:
    cfg: ExperimentConfig
    meas: Measurement
    prior: PriorBox
    reference: object
    init: TrainingData


def _context(cfg: ExperimentConfig, meas_idx: int, rep: int, out_dir) -> _Context:
    fm = make_model(cfg.problem)
    _, meas = measurements(cfg)[meas_idx]
    prior = PriorBox(fm.lower, fm.upper)
    ref = cached_reference(
        Path(out_dir) / "refcache", cfg.problem, fm.eval_exact, meas, prior, [cfg.seed, _REF, meas_idx],
        **_reference_kwargs(cfg),
    )
    init_seeds = (_seed(cfg, _INIT_PTS, meas_idx, rep), _seed(cfg, _INIT_EVAL, meas_idx, rep))
    _, data = initial_design(cfg.problem, cfg.initial_size, cfg.tol_default, init_seeds)
    return _Context(cfg, meas, prior, ref, data)


def _reference_kwargs(cfg):
    if len(make_model(cfg.problem).lower) <= 2:
        return dict(n_coarse=cfg.grid_coarse, refine=cfg.grid_refine)
    return dict(n_samples=cfg.reference_samples)


LENGTHSCALE_FLOOR = 0.1  # relative to the box width
BROAD_LENGTHSCALE = 0.5


def _tune(data: TrainingData, kernel: Kernel, lower, upper) -> Kernel:
    """Best of a warm start and a broad restart, lengthscales floored.

    With few points the lengthscale prior alone drives the lengthscales to
    zero, where the surrogate reverts to its prior mean and a warm start
    can no longer recover; the floor and the restart prevent that.
    """
    width = np.asarray(upper, float) - np.asarray(lower, float)
    broad = Kernel(BROAD_LENGTHSCALE * width, default_kernel(data, lower, upper).variances)
    best, best_val = kernel, -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDataWarning)
        for init in (kernel, broad):
            k = tune_hyperparameters(data, init, min_lengthscale=LENGTHSCALE_FLOOR * width)
            val = penalized_log_marginal_likelihood(k, data)
            if val > best_val:
                best, best_val = k, val
    return best


def run_single(cfg: ExperimentConfig, strat: StrategyConfig, meas_idx: int, rep: int, out_dir) -> RunRecord:
    """Execute J design iterations plus the final sampling step for one run."""
    t_start = time.perf_counter()
    ctx = _context(cfg, meas_idx, rep, out_dir)
    fm = make_model(cfg.problem)
    lo, hi = fm.lower, fm.upper
    d = len(lo)
    meas, prior = ctx.meas, ctx.prior
    wm = strat.work_model
    kind = ErrorKind(strat.error_kind)
    s_idx = STRATEGIES.index(strat.name)
    k_idx = cfg.error_kinds.index(strat.error_kind)
    q_idx = cfg.exponents.index(strat.exponent)
    tags = (meas_idx, rep, s_idx, k_idx, q_idx)
    if strat.name == "LHSGP":
        tags = (meas_idx, rep, s_idx, 0, q_idx)  # independent of the error kind
    evaluator = SimulatedEvaluator(fm, _seed(cfg, _EVAL, *tags))
    rng = _rng(cfg, _MCMC, *tags)
    lhs_rng = _rng(cfg, _LHS, *tags)

    data = ctx.init
    kernel = _tune(data, default_kernel(data, lo, hi), lo, hi)
    gp = fit(kernel, data)
    work0 = design_work(wm, data.design)
    increments = strat.budget_increments()
    chain = SampleChain.empty(d)
    ens = None
    carry = 0.0
    n_eval = 0
    rows = []
    audits = {"refinement": True, "budget": True, "chain": True, "tolerances": True, "messages": []}
    info = {"noop_iterations": [], "chain_clamps": [], "acceptance": [], "unreliable_metrics": 0}

    for j in range(1, strat.J + 2):
        n_j, h_j = cfg.sample_schedule.counts(j)
        if n_j > 0:
            logpdf = lambda P, gp=gp: log_posterior_batch(meas, prior, gp, P)
            ens = init_ensemble(logpdf, lo, hi, n_walkers(d), rng) if ens is None else ens.retarget(logpdf)
            warm = cfg.warmup_first if j == 1 else cfg.warmup_later
            new, ens = run_sampler(ens, logpdf, n_j, warm)
            info["acceptance"].append(ens.acceptance_rate)
            before = len(chain)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ChainClampWarning)
                chain = update_chain(chain, new, h_j, j)
            if any(issubclass(w.category, ChainClampWarning) for w in caught):
                info["chain_clamps"].append(j)
            if len(chain) != max(before - h_j, 0) + n_j:
                audits["chain"] = False
                audits["messages"].append(f"chain length mismatch at iteration {j}")

        rows.append(_row(j - 1, data, gp, wm, work0, n_eval, chain, ctx, info, t_start))
        if j == strat.J + 1:
            break

        available = increments[j - 1] + carry
        old_data = data
        opt_samples = _thin(chain.samples, cfg.opt_samples)
        halton_seed = int(rng.integers(2**31))
        c = strat.candidates_per_iter
        if strat.adaptive:
            cands = select_candidates(gp, meas, kind, opt_samples, wm, c, lo, hi, seed=halton_seed, exclude=data.points)
            if len(cands) == 0:
                info["noop_iterations"].append(j)
                log.info("%s iteration %d: no candidates, budget carried forward", strat.label, j)
            else:
                tv = optimize_tolerances(
                    data.design, cands, available, gp, meas, kind, opt_samples, wm, strat.tol_default, seed=halton_seed
                )
                data, k = apply_design_update(data, tv, cands.points, evaluator)
                n_eval += k
            new_pts = None if len(cands) == 0 else cands.points
        elif strat.name == "posAGP":
            cands = select_candidates(gp, meas, kind, opt_samples, wm, c, lo, hi, seed=halton_seed, exclude=data.points)
            new_pts = cands.points
            if len(new_pts) < c:
                extra = _pad_from_chain(chain.samples, np.concatenate([data.points, new_pts]), c - len(new_pts), lo, hi, rng)
                new_pts = np.concatenate([new_pts, extra])
        else:
            new_pts = lhs_points(c, lo, hi, lhs_rng)
        if not strat.adaptive:
            tv = ToleranceVector(
                np.concatenate([data.tolerances, np.full(len(new_pts), strat.tol_default)]), len(data), np.nan, np.nan
            )
            data, k = apply_design_update(data, tv, new_pts, evaluator)
            n_eval += k
            if len(new_pts) != c:
                audits["messages"].append(f"iteration {j}: {len(new_pts)} points instead of {c}")

        spent = design_work(wm, data.design) - design_work(wm, old_data.design)
        carry = available - spent
        if not is_refinement(data.design, old_data.design):
            audits["refinement"] = False
            audits["messages"].append(f"iteration {j}: design is not a refinement")
        budget_so_far = float(sum(increments[:j]))
        if design_work(wm, data.design) - work0 > budget_so_far + BUDGET_ATOL:
            audits["budget"] = False
            audits["messages"].append(f"iteration {j}: cumulative work exceeds budget")
        if not strat.adaptive and not np.all(data.tolerances == strat.tol_default):
            audits["tolerances"] = False
        if len(data) > len(old_data) or not np.array_equal(data.tolerances, old_data.tolerances):
            kernel = _tune(data, kernel, lo, hi)
            gp = fit(kernel, data)

    rid = run_id(strat, meas_idx, rep)
    samples_file = f"samples/{rid}.csv"
    path = Path(out_dir) / samples_file
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, chain.samples, delimiter=",", fmt="%.17g")
    info["n_evaluations"] = n_eval
    info["wall_time"] = time.perf_counter() - t_start
    info["total_budget"] = strat.total_budget
    return RunRecord(
        rid, strat.name, strat.error_kind, strat.exponent, meas_idx, rep, rows,
        data.to_dict(), kernel.to_dict(), audits, info, samples_file,
    )


def _row(k, data, gp, wm, work0, n_eval, chain, ctx: _Context, info, t_start) -> dict:
    row = {
        "iteration": k,
        "cumulative_work": design_work(wm, data.design) - work0,
        "design_size": len(data),
        "n_evaluations": n_eval,
        "chain_length": len(chain),
    }
    for kind in ErrorKind:
        lv = log_error_model_estimate(kind, ctx.meas, gp, chain.samples) if len(chain) else float("nan")
        row[f"log_error_model_{kind.value.lower()}"] = lv
    m_kl = metric_KL(ctx.reference, gp, ctx.meas, ctx.prior, ctx.cfg.grid_coarse, ctx.cfg.grid_refine)
    m_l2 = metric_L2(ctx.reference, gp)
    row.update(
        metric_kl=m_kl.value, metric_kl_stderr=m_kl.stderr, metric_kl_reliable=bool(m_kl.reliable),
        metric_l2=m_l2.value, metric_l2_stderr=m_l2.stderr,
        wall_time=time.perf_counter() - t_start,
    )
    if not m_kl.reliable:
        info["unreliable_metrics"] += 1
    return row


# --- experiments -----------------------------------------------------------


def _relabel(rec: RunRecord, strat: StrategyConfig) -> RunRecord:
    d = rec.to_dict()
    d["run_id"] = run_id(strat, rec.measurement, rec.repetition)
    d["error_kind"] = strat.error_kind
    return RunRecord.from_dict(d)


def _run_task(args) -> RunRecord:
    cfg, strat, m, r, out_dir = args
    return run_single(cfg, strat, m, r, out_dir)


def _write_record(rec: RunRecord, out_dir) -> None:
    path = Path(out_dir) / "runs" / f"{rec.run_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(rec.to_dict(), indent=1, sort_keys=True))
    tmp.replace(path)


def load_records(in_dir) -> list[RunRecord]:
    paths = sorted((Path(in_dir) / "runs").glob("*.json"))
    return [RunRecord.from_dict(json.loads(p.read_text())) for p in paths]


def run_experiment(cfg: ExperimentConfig, out_dir, workers: int = 1, resume: bool = True) -> list[RunRecord]:
    """All runs of an experiment; finished runs found in ``out_dir`` are reused."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    # build shared references up front so workers only read the cache
    for i in range(cfg.n_measurements):
        _context(cfg, i, 0, out_dir)

    done: dict[str, RunRecord] = {}
    if resume:
        done = {r.run_id: r for r in load_records(out_dir)}
    todo, alias = [], []
    for m in range(cfg.n_measurements):
        for r in range(cfg.repetitions):
            lhs_first: dict[float, StrategyConfig] = {}
            for strat in cfg.strategy_configs():
                rid = run_id(strat, m, r)
                if strat.name == "LHSGP":
                    # point placement ignores the error kind; run once, relabel
                    if strat.exponent in lhs_first:
                        alias.append((lhs_first[strat.exponent], strat, m, r))
                        continue
                    lhs_first[strat.exponent] = strat
                if rid not in done:
                    todo.append((cfg, strat, m, r, out_dir))

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for rec in pool.map(_run_task, todo):
                _write_record(rec, out_dir)
                done[rec.run_id] = rec
    else:
        for task in todo:
            rec = _run_task(task)
            _write_record(rec, out_dir)
            done[rec.run_id] = rec
            log.info("finished %s in %.1fs", rec.run_id, rec.info["wall_time"])
    for src, strat, m, r in alias:
        rid = run_id(strat, m, r)
        if rid not in done:
            rec = _relabel(done[run_id(src, m, r)], strat)
            _write_record(rec, out_dir)
            done[rid] = rec
    return [done[k] for k in sorted(done)]


# --- reports ---------------------------------------------------------------

CONVERGENCE_COLUMNS = [
    "strategy", "error_kind", "exponent", "measurement", "repetition", "iteration",
    "cumulative_work", "error_model", "metric_kl", "metric_l2", "design_size",
    "log_error_model", "metric_kl_stderr", "metric_kl_reliable", "metric_l2_stderr", "n_evaluations",
]


def _group_key(rec: RunRecord):
    return (rec.strategy, rec.error_kind, rec.exponent)


def _error_model(row, kind):
    lv = row[f"log_error_model_{kind.lower()}"]
    return float(np.exp(min(lv, 700.0))), lv


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def report(records: list[RunRecord], out_dir) -> dict[str, Path]:
    """Convergence, tolerance, averaged-curve and summary CSVs."""
    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.run_id)
    paths = {}

    conv = []
    for rec in records:
        for row in rec.rows:
            e, le = _error_model(row, rec.error_kind)
            conv.append([
                rec.strategy, rec.error_kind, rec.exponent, rec.measurement, rec.repetition, row["iteration"],
                row["cumulative_work"], e, row["metric_kl"], row["metric_l2"], row["design_size"],
                le, row["metric_kl_stderr"], int(row["metric_kl_reliable"]), row["metric_l2_stderr"],
                row["n_evaluations"],
            ])
    paths["convergence"] = out_dir / "convergence.csv"
    _write_csv(paths["convergence"], CONVERGENCE_COLUMNS, conv)

    tol_rows = []
    for rec in records:
        data = TrainingData.from_dict(rec.final_data)
        wm = WorkModel(rec.exponent)
        for i, (p, t) in enumerate(zip(data.points, data.tolerances)):
            tol_rows.append([rec.strategy, rec.error_kind, rec.exponent, rec.measurement, rec.repetition, i,
                             t, np.log10(t), wm.work_of_tol(t), *p])
    d = len(TrainingData.from_dict(records[0].final_data).points[0])
    paths["tolerances"] = out_dir / "tolerances.csv"
    _write_csv(paths["tolerances"], ["strategy", "error_kind", "exponent", "measurement", "repetition", "point_index",
                                     "tolerance", "log10_tolerance", "work"] + [f"p{a}" for a in range(d)], tol_rows)

    avg_rows = []
    groups: dict = {}
    for rec in records:
        groups.setdefault(_group_key(rec), []).append(rec)
    fields = ("cumulative_work", "log_error_model", "metric_kl", "metric_l2", "design_size")
    for key in sorted(groups):
        recs = groups[key]
        levels = [(str(m), [r for r in recs if r.measurement == m]) for m in sorted({r.measurement for r in recs})]
        levels.append(("all", recs))
        for level, members in levels:
            for it in range(len(members[0].rows)):
                vals = {f: [] for f in fields}
                for r in members:
                    row = r.rows[it]
                    vals["log_error_model"].append(_error_model(row, r.error_kind)[1])
                    for f in fields:
                        if f != "log_error_model":
                            vals[f].append(row[f])
                avg_rows.append([*key, level, len(members), it] + [float(np.mean(vals[f])) for f in fields])
    paths["averaged"] = out_dir / "averaged.csv"
    _write_csv(paths["averaged"], ["strategy", "error_kind", "exponent", "measurement", "n_runs", "iteration",
                                   "mean_cumulative_work", "mean_log_error_model", "mean_metric_kl",
                                   "mean_metric_l2", "mean_design_size"], avg_rows)

    summary = []
    for key in sorted(groups):
        recs = groups[key]
        final = [r.rows[-1] for r in recs]
        summary.append([
            *key, len(recs),
            float(np.mean([f["design_size"] for f in final])),
            float(np.median([f["metric_kl"] for f in final])),
            float(np.median([f["metric_l2"] for f in final])),
            float(np.mean([f["cumulative_work"] for f in final])),
            float(np.mean([r.info["n_evaluations"] for r in recs])),
            int(all(r.passed_audits for r in recs)),
        ])
    paths["summary"] = out_dir / "summary.csv"
    _write_csv(paths["summary"], ["strategy", "error_kind", "exponent", "n_runs", "mean_final_design_size",
                                  "median_final_metric_kl", "median_final_metric_l2", "mean_final_work",
                                  "mean_evaluations", "audits_passed"], summary)
    return paths


def audit_failures(records: list[RunRecord]) -> list[str]:
    out = []
    for rec in records:
        if not rec.passed_audits:
            msg = "; ".join(rec.audits.get("messages", [])) or "audit failed"
            out.append(f"{rec.run_id}: {msg}")
        works = [row["cumulative_work"] for row in rec.rows]
        sizes = [row["design_size"] for row in rec.rows]
        if np.any(np.diff(works) < -BUDGET_ATOL) or np.any(np.diff(sizes) < 0):
            out.append(f"{rec.run_id}: work or design size decreased")
    return out
