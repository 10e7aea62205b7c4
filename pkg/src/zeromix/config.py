"""Run configuration files.

A run is described by an INI file with up to five sections:

``[model]``
    ``name`` is ``cortisol`` or ``linear_gaussian``.  The cortisol model
    accepts an optional ``doses`` list; the linear model takes ``q``.

``[pattern]``
    ``pairs`` lists the prescribed zeros as 1-based index pairs, e.g.
    ``(1,4), (3,4)``.  Omitting the section or leaving ``pairs`` empty
    means an unconstrained covariance.

``[init]``
    Starting point for the fit: ``m`` (comma-separated), either
    ``sigma_diag`` (diagonal entries) or ``sigma`` (semicolon-separated
    rows), and ``theta``.

``[mcem]``
    Optional sampler and stopping controls mirroring
    :class:`zeromix.mcem.FitConfig`; unset keys keep their defaults.

``[study]``
    Optional simulation-study block: ``replicates``, ``individuals``,
    ``master_seed``, and the generating truth (``truth_m``,
    ``truth_sigma`` as rows, ``truth_theta``).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .covariance import SpdMatrix, ZeroPattern
from .exceptions import ConfigError
from .mcem import FitConfig, FitState, GammaSchedule
from .models import CortisolModel, LinearGaussianModel, NlmeModel


@dataclass(frozen=True)
class StudySettings:
    """Truth and sizes for a simulation study read from ``[study]``."""

    replicates: int
    individuals: int
    master_seed: int
    truth_m: np.ndarray
    truth_sigma: np.ndarray
    truth_theta: float


@dataclass(frozen=True)
class RunConfig:
    """Everything an INI file specifies about a run."""

    model: NlmeModel
    pattern: ZeroPattern
    init: FitState
    fit: FitConfig
    study: StudySettings | None


def _parse_floats(text, key):
    try:
        values = [float(tok) for tok in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a list of numbers, got {text!r}") from exc
    if not values:
        raise ConfigError(f"{key}: empty value")
    return np.asarray(values, dtype=float)


def _parse_matrix(text, key):
    rows = [row.strip() for row in text.split(";") if row.strip()]
    if not rows:
        raise ConfigError(f"{key}: empty value")
    parsed = [_parse_floats(row, key) for row in rows]
    width = len(parsed[0])
    if any(len(row) != width for row in parsed) or width != len(parsed):
        raise ConfigError(f"{key}: rows do not form a square matrix")
    return np.asarray(parsed, dtype=float)


def _parse_pairs(text, key):
    cleaned = text.replace("(", " ").replace(")", " ").replace(",", " ")
    tokens = cleaned.split()
    if len(tokens) % 2 != 0:
        raise ConfigError(f"{key}: expected index pairs, got {text!r}")
    try:
        flat = [int(tok) for tok in tokens]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integer indices, got {text!r}") from exc
    return [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]


def _get(section, key, default=None):
    if key in section:
        return section[key].strip()
    return default


def _get_typed(section, key, cast, default):
    raw = _get(section, key)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: invalid value {raw!r}") from exc


def _build_model(section):
    name = _get(section, "name")
    if name is None:
        raise ConfigError("[model] section needs a 'name' key")
    if name == "cortisol":
        doses_raw = _get(section, "doses")
        if doses_raw is None:
            return CortisolModel()
        return CortisolModel(doses=tuple(_parse_floats(doses_raw, "doses")))
    if name == "linear_gaussian":
        q = _get_typed(section, "q", int, None)
        if q is None:
            raise ConfigError("linear_gaussian model needs a 'q' key")
        return LinearGaussianModel(q)
    raise ConfigError(f"unknown model name {name!r}")


def _build_init(section, q, pattern):
    m_raw = _get(section, "m")
    theta_raw = _get(section, "theta")
    if m_raw is None or theta_raw is None:
        raise ConfigError("[init] section needs 'm' and 'theta' keys")
    m = _parse_floats(m_raw, "m")
    if len(m) != q:
        raise ConfigError(f"m: expected {q} entries, got {len(m)}")
    theta = _get_typed(section, "theta", float, None)
    diag_raw = _get(section, "sigma_diag")
    full_raw = _get(section, "sigma")
    if (diag_raw is None) == (full_raw is None):
        raise ConfigError("[init] needs exactly one of 'sigma_diag' or 'sigma'")
    if diag_raw is not None:
        diag = _parse_floats(diag_raw, "sigma_diag")
        if len(diag) != q:
            raise ConfigError(f"sigma_diag: expected {q} entries, got {len(diag)}")
        entries = np.diag(diag)
    else:
        entries = _parse_matrix(full_raw, "sigma")
        if entries.shape != (q, q):
            raise ConfigError(f"sigma: expected a {q}x{q} matrix")
    sigma = SpdMatrix(entries, pattern=pattern if not pattern.is_empty() else None)
    return FitState(m=m, sigma=sigma, theta=theta)


def _build_fit(section):
    defaults = FitConfig()
    sched = GammaSchedule(
        a=_get_typed(section, "gamma_a", float, defaults.schedule.a),
        b=_get_typed(section, "gamma_b", float, defaults.schedule.b),
        k0=_get_typed(section, "warmup", int, defaults.schedule.k0),
    )
    return FitConfig(
        chain_length=_get_typed(section, "chain_length", int, defaults.chain_length),
        burn_in=_get_typed(section, "burn_in", int, defaults.burn_in),
        schedule=sched,
        outer_tol=_get_typed(section, "outer_tol", float, defaults.outer_tol),
        max_outer=_get_typed(section, "max_outer", int, defaults.max_outer),
        window=_get_typed(section, "window", int, defaults.window),
        icf_tol=_get_typed(section, "icf_tol", float, defaults.icf_tol),
        icf_max_sweeps=_get_typed(section, "icf_max_sweeps", int, defaults.icf_max_sweeps),
        seed=_get_typed(section, "seed", int, defaults.seed),
    )


def _build_study(section, q):
    for key in ("truth_m", "truth_sigma", "truth_theta"):
        if _get(section, key) is None:
            raise ConfigError(f"[study] section needs a {key!r} key")
    truth_m = _parse_floats(_get(section, "truth_m"), "truth_m")
    truth_sigma = _parse_matrix(_get(section, "truth_sigma"), "truth_sigma")
    if len(truth_m) != q or truth_sigma.shape != (q, q):
        raise ConfigError("study truth does not match the model dimension")
    return StudySettings(
        replicates=_get_typed(section, "replicates", int, 20),
        individuals=_get_typed(section, "individuals", int, 30),
        master_seed=_get_typed(section, "master_seed", int, 0),
        truth_m=truth_m,
        truth_sigma=truth_sigma,
        truth_theta=_get_typed(section, "truth_theta", float, None),
    )


def load_config(path):
    """Parse an INI run configuration into a :class:`RunConfig`."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc

    if "model" not in parser:
        raise ConfigError("config file needs a [model] section")
    model = _build_model(parser["model"])

    pairs = []
    if "pattern" in parser:
        pairs_raw = _get(parser["pattern"], "pairs", "")
        if pairs_raw:
            pairs = _parse_pairs(pairs_raw, "pairs")
    pattern = ZeroPattern(pairs, dim=model.q)

    if "init" not in parser:
        raise ConfigError("config file needs an [init] section")
    init = _build_init(parser["init"], model.q, pattern)

    fit = _build_fit(parser["mcem"]) if "mcem" in parser else FitConfig()
    study = _build_study(parser["study"], model.q) if "study" in parser else None
    return RunConfig(model=model, pattern=pattern, init=init, fit=fit, study=study)


def _format_matrix(values):
    return "; ".join(" ".join(repr(float(v)) for v in row) for row in np.asarray(values))


def save_config(cfg, path):
    """Write a :class:`RunConfig` back out as an INI file."""
    parser = configparser.ConfigParser()
    model = cfg.model
    if isinstance(model, CortisolModel):
        parser["model"] = {
            "name": "cortisol",
            "doses": ", ".join(repr(float(d)) for d in model.doses),
        }
    elif isinstance(model, LinearGaussianModel):
        parser["model"] = {"name": "linear_gaussian", "q": str(model.q)}
    else:
        raise ConfigError(f"cannot serialize model of type {type(model).__name__}")
    parser["pattern"] = {
        "pairs": ", ".join(f"({i},{j})" for i, j in cfg.pattern.pairs),
    }
    parser["init"] = {
        "m": ", ".join(repr(float(v)) for v in cfg.init.m),
        "sigma": _format_matrix(cfg.init.sigma.values),
        "theta": repr(float(cfg.init.theta)),
    }
    fit = cfg.fit
    parser["mcem"] = {
        "chain_length": str(fit.chain_length),
        "burn_in": str(fit.burn_in),
        "gamma_a": repr(fit.schedule.a),
        "gamma_b": repr(fit.schedule.b),
        "warmup": str(fit.schedule.k0),
        "outer_tol": repr(fit.outer_tol),
        "max_outer": str(fit.max_outer),
        "window": str(fit.window),
        "icf_tol": repr(fit.icf_tol),
        "icf_max_sweeps": str(fit.icf_max_sweeps),
        "seed": str(fit.seed),
    }
    if cfg.study is not None:
        st = cfg.study
        parser["study"] = {
            "replicates": str(st.replicates),
            "individuals": str(st.individuals),
            "master_seed": str(st.master_seed),
            "truth_m": ", ".join(repr(float(v)) for v in st.truth_m),
            "truth_sigma": _format_matrix(st.truth_sigma),
            "truth_theta": repr(float(st.truth_theta)),
        }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
