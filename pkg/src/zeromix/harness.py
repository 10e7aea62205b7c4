"""Simulation study, report emission, and the bundled worked example.

The study simulates balanced cortisol-washout datasets from a known
truth whose covariance carries two structural zeros, fits each dataset
with the unconstrained EM estimator and the zero-constrained EM
estimator, derives the naive zero-forced estimator from the
unconstrained fit, and aggregates per-parameter Mean, S.E., and root
mean quadratic error across replicates.  Per-replicate likelihood
ratio p-values feed a QQ-plot data file.

Everything is keyed off a single master seed: replicate r derives all
of its randomness from (master seed, r, attempt), so reports are
byte-identical across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .covariance import SpdMatrix, ZeroPattern, min_eig_repair, zero_forced
from .exceptions import NumericalError, ValueOutOfRangeError
from .inference import loglik_is, lr_test
from .mcem import FitConfig, FitState, fit
from .models import CortisolModel, Dataset, load_dataset, save_dataset, simulate_dataset

ESTIMATOR_NAMES = ("em", "em_icf", "zero_forced")

# Column prefixes used in aggregate rows and the table CSV.
_PREFIX = {"em": "em", "em_icf": "icf", "zero_forced": "zf"}

_TRUTH_M = (50.0, 70.0, 1.5, 0.08)
_TRUTH_SIGMA = (
    (20.0, -4.5, -0.3, 0.0),
    (-4.5, 2.5, -0.1, -2e-3),
    (-0.3, -0.1, 0.05, 0.0),
    (0.0, -2e-3, 0.0, 1e-5),
)
_TRUTH_THETA = 0.015


def table_param_labels(q):
    """Row labels of the summary table: means, covariance entries, theta."""
    labels = [f"m{i}" for i in range(1, q + 1)]
    for i in range(1, q + 1):
        for j in range(1, i + 1):
            labels.append(f"sigma_{i}_{j}")
    labels.append("theta")
    return labels


def _param_vector(m, sigma_values, theta):
    q = len(m)
    tril = [sigma_values[i, j] for i in range(q) for j in range(i + 1)]
    return np.array([*m, *tril, theta], dtype=float)


@dataclass(frozen=True)
class SimStudyConfig:
    """Inputs of one simulation study.

    The fit configuration applies to every estimator; per-replicate
    seeds are derived from ``master_seed``, so the ``seed`` field of
    ``fit`` is ignored.  The starting covariance is diagonal
    (``init_sigma_diag``) and deliberately wide: the sampler must mix
    across the latent scale before the step-size decay sets in.
    """

    n_replicates: int = 20
    n_individuals: int = 30
    truth_m: tuple = _TRUTH_M
    truth_sigma: tuple = _TRUTH_SIGMA
    truth_theta: float = _TRUTH_THETA
    pattern_pairs: tuple = ((1, 4), (3, 4))
    estimators: tuple = ESTIMATOR_NAMES
    master_seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)
    init_m: tuple = (50.0, 70.0, 1.0, 0.1)
    init_sigma_diag: tuple = (25.0, 49.0, 0.25, 1.6e-3)
    init_theta: float = 0.04
    lr_samples: int = 1000

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        if "zero_forced" in self.estimators and "em" not in self.estimators:
            raise ValueError("zero_forced is derived from em; include em")
        # The truth must be a valid constrained covariance.
        SpdMatrix(np.asarray(self.truth_sigma, dtype=float), pattern=self.pattern)

    @property
    def q(self):
        return len(self.truth_m)

    @property
    def pattern(self):
        return ZeroPattern(self.pattern_pairs, dim=len(self.truth_m))


@dataclass
class SimStudyReport:
    """Aggregates plus per-replicate records from one study run."""

    n_replicates: int
    n_used: int
    estimators: tuple
    rows: list
    loglik_row: dict
    p_values: list
    lr_df: int
    records: list
    excluded: list
    retried: list
    master_seed: int

    def to_dict(self):
        return {
            "n_replicates": self.n_replicates,
            "n_used": self.n_used,
            "estimators": list(self.estimators),
            "rows": self.rows,
            "loglik": self.loglik_row,
            "lr": {"df": self.lr_df, "p_values": self.p_values},
            "replicates": self.records,
            "excluded": self.excluded,
            "retried": self.retried,
            "master_seed": self.master_seed,
        }


def _replicate_seeds(master_seed, replicate, attempt):
    words = np.random.SeedSequence((master_seed, replicate, attempt)).generate_state(4)
    return {
        "data": int(words[0]),
        "em": int(words[1]),
        "em_icf": int(words[2]),
        "loglik": int(words[3]),
    }


def _study_init(cfg, pattern):
    sigma = SpdMatrix(
        np.diag(np.asarray(cfg.init_sigma_diag, dtype=float)),
        pattern=None if pattern.is_empty() else pattern,
    )
    return FitState(m=np.asarray(cfg.init_m, dtype=float), sigma=sigma,
                    theta=cfg.init_theta)


def _run_replicate(cfg, model, replicate, attempt):
    """One simulate-and-fit pass.  Raises NumericalError on hard failure;
    returns a record with converged flags otherwise."""
    seeds = _replicate_seeds(cfg.master_seed, replicate, attempt)
    pattern = cfg.pattern
    truth_sigma = np.asarray(cfg.truth_sigma, dtype=float)
    data, _ = simulate_dataset(model, np.asarray(cfg.truth_m, dtype=float),
                               truth_sigma, cfg.truth_theta,
                               cfg.n_individuals, seeds["data"])

    record = {"replicate": replicate, "attempt": attempt, "estimates": {},
              "converged": {}, "iterations": {}}
    empty = ZeroPattern([], dim=cfg.q)
    results = {}
    for name in ("em", "em_icf"):
        if name not in cfg.estimators:
            continue
        pat = empty if name == "em" else pattern
        fit_cfg = FitConfig(
            chain_length=cfg.fit.chain_length,
            burn_in=cfg.fit.burn_in,
            schedule=cfg.fit.schedule,
            outer_tol=cfg.fit.outer_tol,
            max_outer=cfg.fit.max_outer,
            window=cfg.fit.window,
            icf_tol=cfg.fit.icf_tol,
            icf_max_sweeps=cfg.fit.icf_max_sweeps,
            seed=seeds[name],
        )
        res = fit(model, data, pat, _study_init(cfg, pat), fit_cfg)
        results[name] = res
        record["converged"][name] = bool(res.converged)
        record["iterations"][name] = int(res.iterations)
        record["estimates"][name] = {
            "m": [float(v) for v in res.state.m],
            "sigma": [[float(v) for v in row] for row in res.state.sigma.values],
            "theta": float(res.state.theta),
        }

    if "zero_forced" in cfg.estimators:
        em_state = results["em"].state
        zf = zero_forced(em_state.sigma.values, pattern)
        lam_min = float(np.linalg.eigvalsh(zf)[0])
        repaired = min_eig_repair(zf, cfg.n_individuals)
        record["estimates"]["zero_forced"] = {
            "m": [float(v) for v in em_state.m],
            "sigma": [[float(v) for v in row] for row in repaired.values],
            "theta": float(em_state.theta),
            "min_eig_before_repair": lam_min,
        }

    if "em" in results and "em_icf" in results:
        lls = {}
        for name in ("em", "em_icf"):
            st = results[name].state
            lls[name] = loglik_is(model, data, st.m, st.sigma, st.theta,
                                  n_samples=cfg.lr_samples, seed=seeds["loglik"])
        lr = lr_test(lls["em_icf"].loglik, lls["em"].loglik, pattern)
        record["loglik"] = {
            "em": lls["em"].loglik, "em_mc_se": lls["em"].mc_se,
            "em_icf": lls["em_icf"].loglik, "em_icf_mc_se": lls["em_icf"].mc_se,
        }
        record["lr"] = {"stat": lr.stat, "df": lr.df, "p": lr.p_value}

    failed = [n for n, ok in record["converged"].items() if not ok]
    return record, failed


def _aggregate(vectors, truth):
    """Mean, empirical SD, and sqrt(bias^2 + variance) per coordinate."""
    arr = np.asarray(vectors, dtype=float)
    mean = arr.mean(axis=0)
    if arr.shape[0] > 1:
        se = arr.std(axis=0, ddof=1)
    else:
        se = np.zeros(arr.shape[1])
    bias = mean - truth
    rmqe = np.sqrt(bias * bias + se * se)
    return mean, se, rmqe


def run_simulation_study(cfg):
    """Run the full study; deterministic given the master seed.

    A replicate whose fit raises a numerical error or fails to converge
    is re-run once with a fresh derived seed; if the second attempt
    also fails, the replicate is excluded from the aggregates and
    counted in the report.
    """
    model = CortisolModel()
    records = []
    excluded = []
    retried = []
    for r in range(cfg.n_replicates):
        kept = None
        attempts = []
        for attempt in (0, 1):
            try:
                record, failed = _run_replicate(cfg, model, r, attempt)
            except NumericalError as exc:
                attempts.append({"attempt": attempt, "error": str(exc)})
                continue
            if failed:
                attempts.append({"attempt": attempt,
                                 "error": f"not converged: {', '.join(failed)}"})
                continue
            kept = record
            break
        if kept is None:
            excluded.append({"replicate": r, "attempts": attempts})
        else:
            if attempts:
                retried.append({"replicate": r, "attempts": attempts})
            records.append(kept)

    labels = table_param_labels(cfg.q)
    truth = _param_vector(np.asarray(cfg.truth_m, dtype=float),
                          np.asarray(cfg.truth_sigma, dtype=float),
                          cfg.truth_theta)
    rows = []
    loglik_row = {}
    p_values = []
    if records and cfg.estimators:
        per_est = {}
        for name in cfg.estimators:
            vecs = [_param_vector(np.asarray(rec["estimates"][name]["m"]),
                                  np.asarray(rec["estimates"][name]["sigma"]),
                                  rec["estimates"][name]["theta"])
                    for rec in records]
            per_est[name] = _aggregate(vecs, truth)
        for idx, label in enumerate(labels):
            row = {"param": label, "true": float(truth[idx])}
            for name in cfg.estimators:
                mean, se, rmqe = per_est[name]
                pfx = _PREFIX[name]
                row[f"{pfx}_mean"] = float(mean[idx])
                row[f"{pfx}_se"] = float(se[idx])
                row[f"{pfx}_rmqe"] = float(rmqe[idx])
            rows.append(row)
        if all("lr" in rec for rec in records):
            for name in ("em", "em_icf"):
                vals = np.array([rec["loglik"][name] for rec in records])
                pfx = _PREFIX[name]
                loglik_row[f"{pfx}_mean"] = float(vals.mean())
                loglik_row[f"{pfx}_se"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            p_values = [rec["lr"]["p"] for rec in records]

    return SimStudyReport(
        n_replicates=cfg.n_replicates,
        n_used=len(records),
        estimators=tuple(cfg.estimators),
        rows=rows,
        loglik_row=loglik_row,
        p_values=p_values,
        lr_df=len(cfg.pattern),
        records=records,
        excluded=excluded,
        retried=retried,
        master_seed=cfg.master_seed,
    )


def qq_data(p_values):
    """Pair sorted p-values with uniform plotting positions (i - 0.5)/n."""
    arr = np.asarray(list(p_values), dtype=float)
    if arr.size == 0:
        return []
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueOutOfRangeError("p-values must lie in [0, 1]")
    arr = np.sort(arr)
    n = arr.size
    u = (np.arange(1, n + 1) - 0.5) / n
    return list(zip(u.tolist(), arr.tolist()))


def fit_report(result, se=None, loglik=None, lr=None):
    """Assemble the JSON-ready report of one fit."""
    st = result.state
    report = {
        "params": {
            "m": [float(v) for v in st.m],
            "sigma": [[float(v) for v in row] for row in st.sigma.values],
            "theta": float(st.theta),
        },
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "accept_rate": float(result.accept_rate),
        "se": None,
        "loglik": None,
        "mc_se": None,
        "lr": None,
    }
    if se is not None:
        report["se"] = {k: float(v) for k, v in se.se.items()}
        report["se_flagged"] = bool(se.flagged)
    if loglik is not None:
        report["loglik"] = float(loglik.loglik)
        report["mc_se"] = float(loglik.mc_se)
    if lr is not None:
        report["lr"] = {"stat": float(lr.stat), "df": int(lr.df),
                        "p": float(lr.p_value)}
    return report


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trace_csv(result, path):
    """Iteration trace: state coordinates plus sampler summaries."""
    if not result.trace:
        raise ValueError("fit result carries no trace")
    q = len(result.trace[0].m)
    labels = table_param_labels(q)
    header = ["k", *labels, "accept_rate", "delta"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in result.trace:
            vec = _param_vector(row.m, row.sigma, row.theta)
            cells = [str(row.k), *(repr(float(v)) for v in vec),
                     repr(float(row.accept_rate)), repr(float(row.delta))]
            fh.write(",".join(cells) + "\n")


def write_table_csv(report, path):
    """Table-1-style CSV: 15 parameter rows plus a log-likelihood row."""
    header = ["param", "true", "em_mean", "em_se", "em_rmqe",
              "icf_mean", "icf_se", "icf_rmqe"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in report.rows:
            cells = [row["param"], repr(row["true"])]
            for pfx in ("em", "icf"):
                for stat in ("mean", "se", "rmqe"):
                    key = f"{pfx}_{stat}"
                    cells.append(repr(row[key]) if key in row else "")
            fh.write(",".join(cells) + "\n")
        cells = ["loglik", ""]
        for pfx in ("em", "icf"):
            for stat in ("mean", "se", "rmqe"):
                key = f"{pfx}_{stat}"
                val = report.loglik_row.get(key)
                cells.append(repr(val) if val is not None else "")
        fh.write(",".join(cells) + "\n")


def write_qq_csv(pairs, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("u,p\n")
        for u, p in pairs:
            fh.write(f"{u!r},{p!r}\n")


# Generating parameters of the bundled synthetic assay: a constrained
# fit of the washout model with zeros at (1,4) and (3,4), used here as
# a plausible truth so the packaged example exercises realistic scales.
_EXAMPLE_M = (48.84, 71.46, 1.47, 0.084)
_EXAMPLE_SIGMA = (
    (19.50, -4.66, -0.29, 0.0),
    (-4.66, 2.33, -0.095, -0.0024),
    (-0.29, -0.095, 0.058, 0.0),
    (0.0, -0.0024, 0.0, 1.44e-5),
)
_EXAMPLE_THETA = 0.0151
_EXAMPLE_N = 30
_EXAMPLE_SEED = 181
_EXAMPLE_INI = """[model]
name = cortisol

[pattern]
pairs = (1,4), (3,4)

[init]
m = 50, 70, 1, 0.1
sigma_diag = 25, 49, 0.01, 0.0001
theta = 0.04

[mcem]
chain_length = 500
burn_in = 100
gamma_a = 1.0
gamma_b = 0.8
warmup = 150
outer_tol = 0.002
max_outer = 300
seed = 0
"""


def write_example_bundle(directory):
    """Regenerate the bundled example dataset and config into ``directory``."""
    model = CortisolModel()
    data, _ = simulate_dataset(model, np.asarray(_EXAMPLE_M),
                               np.asarray(_EXAMPLE_SIGMA), _EXAMPLE_THETA,
                               _EXAMPLE_N, _EXAMPLE_SEED)
    import os
    csv_path = os.path.join(str(directory), "cortisol_example.csv")
    ini_path = os.path.join(str(directory), "cortisol_example.ini")
    save_dataset(data, csv_path)
    with open(ini_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_EXAMPLE_INI)
    return csv_path, ini_path


def example_paths():
    """Filesystem paths of the bundled dataset and config."""
    from importlib.resources import files
    root = files("zeromix") / "data"
    return str(root / "cortisol_example.csv"), str(root / "cortisol_example.ini")


def cortisol_example():
    """Load the bundled synthetic cortisol dataset and its run config."""
    from .config import load_config
    csv_path, ini_path = example_paths()
    return load_dataset(csv_path), load_config(ini_path)


def run_validation(out=print):
    """Built-in oracle and property checks; returns the failure count.

    A fast subset of the full test suite, suitable for verifying an
    installation from the command line.
    """
    from .covariance import (SufficientStats, icf_column_update, icf_solve,
                             kkt_residual, objective, schur_split)
    from .mcem import mh_chain, FitState as _FS
    from .models import LinearGaussianModel

    failures = 0

    def check(name, ok, detail=""):
        nonlocal failures
        if ok:
            out(f"ok    {name}")
        else:
            failures += 1
            out(f"FAIL  {name}  {detail}")

    # Corner-split identities on random SPD matrices.
    rng = np.random.default_rng(20_000)
    worst = 0.0
    for _ in range(200):
        q = int(rng.integers(2, 7))
        g = rng.standard_normal((q, q))
        sigma = SpdMatrix(g @ g.T + q * np.eye(q))
        j = int(rng.integers(1, q + 1))
        sp = schur_split(sigma, j)
        rest = [t for t in range(q) if t != j - 1]
        rebuilt = np.zeros((q, q))
        rebuilt[np.ix_(rest, rest)] = sp.a
        rebuilt[rest, j - 1] = sp.b
        rebuilt[j - 1, rest] = sp.b
        rebuilt[j - 1, j - 1] = sp.c
        err = abs(rebuilt - sigma.values).max() / abs(sigma.values).max()
        det = sp.s * np.linalg.det(sp.a)
        err = max(err, abs(det - np.linalg.det(sigma.values)) / abs(det))
        worst = max(worst, err)
    check("corner split identities (200 random SPD)", worst < 1e-10,
          f"worst rel err {worst:.2e}")

    # Constrained covariance solve on the pinned 3x3 example.
    xtilde = np.array([[4.0, -3.0, 3.0], [-3.0, 4.0, -3.0], [3.0, -3.0, 4.0]])
    pat13 = ZeroPattern([(1, 3)], dim=3)
    stats = SufficientStats(xtilde, n=100)
    sol, diag = icf_solve(stats, pat13)
    check("icf reaches a stationary point", diag.kkt < 1e-6,
          f"kkt {diag.kkt:.2e}")
    check("icf pinned entry sigma_12 = -12/7",
          abs(sol.values[0, 1] + 12.0 / 7.0) < 1e-6,
          f"got {sol.values[0, 1]!r}")
    check("icf zero stays exactly zero", sol.values[0, 2] == 0.0,
          f"got {sol.values[0, 2]!r}")
    resweep = icf_column_update(sol, stats, 1, pat13)
    drift = abs(resweep.values - sol.values).max()
    check("icf solution is a column-update fixed point", drift < 1e-8,
          f"drift {drift:.2e}")

    zf = zero_forced(SpdMatrix(xtilde).values, pat13)
    lam = float(np.linalg.eigvalsh(zf)[0])
    check("zero-forcing indefiniteness (pinned eigenvalue)",
          abs(lam - (4.0 - 3.0 * np.sqrt(2.0))) < 1e-9, f"lam_min {lam!r}")
    rep = min_eig_repair(zf, 30)
    check("diagonal repair keeps the zeros",
          rep.values[0, 2] == 0.0 and rep.values[2, 0] == 0.0)
    check("constrained solve beats repaired zero-forcing",
          objective(sol, stats) < objective(rep, stats) - 1e-9,
          f"{objective(sol, stats)!r} vs {objective(rep, stats)!r}")

    # Monotone descent along column updates from a rough start.
    start = SpdMatrix(np.diag(np.diag(xtilde)), pattern=pat13)
    obj_prev = objective(start, stats)
    mono = True
    cur = start
    for sweep in range(3):
        for j in (1, 2, 3):
            cur = icf_column_update(cur, stats, j, pat13)
            obj_new = objective(cur, stats)
            mono = mono and obj_new <= obj_prev + 1e-12
            obj_prev = obj_new
    check("column updates never increase the objective", mono)

    # Likelihood ratio mechanics on pinned inputs.
    pat2 = ZeroPattern([(1, 4), (3, 4)], dim=4)
    lr = lr_test(-754.23, -750.25, pat2)
    check("lr statistic 2*(l1 - l0)", abs(lr.stat - 7.96) < 1e-9,
          f"stat {lr.stat!r}")
    check("lr p-value = exp(-stat/2) at df 2",
          abs(lr.p_value - float(np.exp(-3.98))) < 1e-12,
          f"p {lr.p_value!r}")

    # Sampler determinism.
    lin = LinearGaussianModel(3)
    state = _FS(m=np.zeros(3), sigma=SpdMatrix(np.eye(3)), theta=0.5)
    y = np.array([0.3, -0.2, 0.9])
    c1 = mh_chain(lin, y, state, chain_length=200, burn_in=50, seed=42)
    c2 = mh_chain(lin, y, state, chain_length=200, burn_in=50, seed=42)
    check("sampler is bitwise deterministic",
          np.array_equal(c1.ex, c2.ex)
          and np.array_equal(c1.last_states, c2.last_states))

    # QQ plotting positions.
    check("qq plotting positions (i - 0.5)/n",
          qq_data([0.75, 0.25]) == [(0.25, 0.25), (0.75, 0.75)])

    out(f"{'all checks passed' if failures == 0 else f'{failures} check(s) failed'}")
    return failures
