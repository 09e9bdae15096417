"""Command-line experiments: level tables, full MLMC runs, crossing densities
and grid comparisons.

Configuration is a flat JSON object; command-line flags override its fields.
Exit codes: 0 success, 2 configuration error, 3 MLMC not converged,
4 non-finite samples encountered.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import estimators
from .estimators import MethodSpec, SplitRule
from .mlmc import OUTPUTS, collect_level, fit_rate, fit_weak_rate, run_mlmc
from .sde import MarketParams, gamma_for_barrier, level_grids

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "main"]

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_NONFINITE = 0, 2, 3, 4
MODES = ("levels", "mlmc", "density", "compare")
LEVELS_SCHEMA = "# schema: mlmc-greeks/levels v1"
DENSITY_SCHEMA = "# schema: mlmc-greeks/density v1"
MAX_LEVEL_CAP = 12

CONFIG_KEYS = {
    "mode": str,
    "S0": float,
    "K": float,
    "r": float,
    "sigma": float,
    "T": float,
    "B": float,
    "method": str,
    "payoff": str,
    "d": str,
    "d_c": float,
    "hstar": float,
    "grid": str,
    "gamma": float,
    "levels": str,
    "fit": str,
    "samples": int,
    "eps": float,
    "seed": int,
    "out": str,
    "workers": int,
    "max_level": int,
    "pilot": int,
    "bins": int,
    "backend": str,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    market: MarketParams
    method_spec: MethodSpec
    mode: str = "levels"
    level_range: tuple = (0, 8)
    samples_per_level: int = 100_000
    epsilon: float = 0.02
    seed: int = 0
    output_path: Optional[str] = None
    fit_range: Optional[tuple] = None
    workers: int = 1
    max_level: int = MAX_LEVEL_CAP
    pilot: int = 10_000
    bins: int = 50
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        lo, hi = self.level_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad level range {lo}:{hi}")
        if self.mode != "mlmc" and hi > self.max_level:
            raise ConfigError(f"level {hi} exceeds the cap {self.max_level}")
        if self.mode == "levels" and self.samples_per_level < 100:
            raise ConfigError("levels mode needs at least 100 samples per level")
        if self.samples_per_level < 2:
            raise ConfigError("need at least 2 samples per level")
        if not self.epsilon > 0:
            raise ConfigError("eps must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.bins < 1:
            raise ConfigError("bins must be at least 1")


def _parse_range(text, what):
    if isinstance(text, (list, tuple)) and len(text) == 2:
        return int(text[0]), int(text[1])
    try:
        parts = str(text).split(":")
        if len(parts) == 1:
            v = int(parts[0])
            return v, v
        lo, hi = parts
        return int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"{what} must look like MIN:MAX, got {text!r}") from None


def _coerce(key, value):
    kind = CONFIG_KEYS[key]
    if value is None:
        return None
    if key in ("levels", "fit") and isinstance(value, (list, tuple)):
        return value
    try:
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config field {key!r} has a bad value {value!r}") from None


def load_config(path: Optional[str], overrides: dict) -> ExperimentConfig:
    """Merge a JSON config file with flag overrides into a validated config."""
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    merged = {k: _coerce(k, v) for k, v in raw.items()}
    merged.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})

    try:
        market = MarketParams(
            S0=merged.get("S0", 100.0),
            K=merged.get("K", 100.0),
            r=merged.get("r", 0.05),
            sigma=merged.get("sigma", 0.2),
            T=merged.get("T", 1.0),
            B=merged.get("B"),
        )
        d = str(merged.get("d", "10"))
        rule = SplitRule.adaptive(merged.get("d_c", 1.0)) if d == "auto" else SplitRule(d=int(d))
        spec = MethodSpec(
            method=merged.get("method", "pathwise"),
            payoff_kind=merged.get("payoff", "call"),
            split_rule=rule,
            h_star=merged.get("hstar"),
            grid=merged.get("grid", "uniform"),
            gamma=merged.get("gamma"),
        )
        if spec.uses_barrier and market.B is None:
            raise ConfigError(f"payoff {spec.payoff_kind} needs a barrier B")
        mode = merged.get("mode", "levels")
        cfg = ExperimentConfig(
            market=market,
            method_spec=spec,
            mode=mode,
            level_range=_parse_range(merged.get("levels", "0:8"), "levels"),
            samples_per_level=merged.get("samples", 100_000),
            epsilon=merged.get("eps", 0.02),
            seed=merged.get("seed", 0),
            output_path=merged.get("out"),
            fit_range=None if merged.get("fit") is None else _parse_range(merged["fit"], "fit"),
            workers=merged.get("workers", 1),
            max_level=merged.get("max_level", MAX_LEVEL_CAP),
            pilot=merged.get("pilot", 10_000),
            bins=merged.get("bins", 50),
            extra={"backend": merged.get("backend", "auto")},
        )
    except ConfigError:
        raise
    except (ValueError, ImportError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.mode in ("density", "compare") and market.B is None:
        raise ConfigError(f"{cfg.mode} mode needs a barrier B")
    return cfg


def _atomic_write(path: Optional[str], text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x) -> str:
    return repr(float(x))


def _json(obj) -> str:
    def clean(o):
        if isinstance(o, float):
            return o if math.isfinite(o) else None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _summary_path(out: Optional[str]) -> Optional[str]:
    if out is None or out == "-":
        return None
    return os.path.splitext(out)[0] + ".json"


def _fits(stats, fit_range):
    corr = [s for s in stats if s.level >= 1]
    if fit_range is not None:
        corr = [s for s in corr if fit_range[0] <= s.level <= fit_range[1]]
    out = {"fit_range": None, "beta_hat": None, "alpha_hat": None, "alpha_reliable": None}
    if len(corr) < 3:
        return out
    out["fit_range"] = [corr[0].level, corr[-1].level]
    betas, alphas, reliable = {}, {}, {}
    for k, name in enumerate(OUTPUTS):
        try:
            betas[name] = fit_rate(corr, k)[0]
        except ValueError:
            betas[name] = None
        try:
            w = fit_weak_rate(corr, k)
            alphas[name], reliable[name] = w.alpha, w.reliable
        except ValueError:
            alphas[name], reliable[name] = None, False
    out.update(beta_hat=betas, alpha_hat=alphas, alpha_reliable=reliable)
    return out


def _config_echo(cfg: ExperimentConfig) -> dict:
    m, s = cfg.market, cfg.method_spec
    return {
        "market": {"S0": m.S0, "K": m.K, "r": m.r, "sigma": m.sigma, "T": m.T, "B": m.B},
        "method": s.method,
        "payoff": s.payoff_kind,
        "d": s.split_rule.d if s.split_rule.d is not None else "auto",
        "d_c": s.split_rule.c,
        "hstar": s.h_star,
        "grid": s.grid,
        "gamma": s.resolved_gamma(m) if s.grid == "power" else None,
        "seed": cfg.seed,
        "backend": estimators.backend(),
    }


def _level_table(cfg, spec):
    lo, hi = cfg.level_range
    return [
        collect_level(spec, cfg.market, lvl, cfg.samples_per_level, cfg.seed, cfg.workers)
        for lvl in range(lo, hi + 1)
    ]


def cmd_levels(cfg: ExperimentConfig) -> int:
    """Per-level CSV of correction means and variances, plus a JSON rate summary."""
    stats = _level_table(cfg, cfg.method_spec)
    header = "level,h,n,mean_value,var_value,mean_delta,var_delta,mean_vega,var_vega,cost"
    rows = [LEVELS_SCHEMA, header]
    for s in stats:
        cells = [str(s.level), _num(s.h), str(s.n_samples)]
        for k in range(3):
            cells += [_num(s.mean[k]), _num(s.variance[k])]
        cells.append(_num(s.cost))
        rows.append(",".join(cells))
    _atomic_write(cfg.output_path, "\n".join(rows) + "\n")
    summary = {"config": _config_echo(cfg), "levels": [s.level for s in stats]}
    summary.update(_fits(stats, cfg.fit_range))
    summary["nonfinite"] = sum(s.nonfinite for s in stats)
    summary["rejected"] = sum(s.rejected for s in stats)
    summary["rejection_flag"] = any(s.rejection_flag for s in stats)
    text = _json(summary)
    path = _summary_path(cfg.output_path)
    if path is not None:
        _atomic_write(path, text)
    else:
        sys.stderr.write(text)
    return EXIT_NONFINITE if summary["nonfinite"] else EXIT_OK


def cmd_mlmc(cfg: ExperimentConfig) -> int:
    """Full adaptive run; the report goes to ``--out`` (or stdout) as JSON."""
    report = run_mlmc(
        cfg.method_spec,
        cfg.market,
        cfg.epsilon,
        cfg.seed,
        max_level=cfg.max_level,
        pilot=cfg.pilot,
        workers=cfg.workers,
    )
    body = {"config": _config_echo(cfg)}
    body.update(report.to_dict())
    _atomic_write(cfg.output_path, _json(body))
    if report.nonfinite:
        return EXIT_NONFINITE
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def crossing_times(cfg: ExperimentConfig, level: int) -> np.ndarray:
    """First-crossing times (midpoint of the firing step) or NaN for survivors."""
    m, spec = cfg.market, cfg.method_spec
    fine, _ = level_grids(level, m.T, spec.resolved_gamma(m))
    hf = fine.widths
    mid = 0.5 * (fine.boundaries[:-1] + fine.boundaries[1:])
    out = np.empty(cfg.samples_per_level)
    step = 1 << 14
    for lo in range(0, cfg.samples_per_level, step):
        n = min(step, cfg.samples_per_level - lo)
        j = estimators._kernels.first_crossings(m.S0, m.r, m.sigma, m.B, hf, cfg.seed, level, lo, n)
        j = np.asarray(j)
        out[lo : lo + n] = np.where(j >= 0, mid[np.maximum(j, 0)], np.nan)
    return out


def cmd_density(cfg: ExperimentConfig) -> int:
    """Histogram of first barrier-crossing times on the fine grid of the top level.

    A step crosses when an independent uniform falls below its bridge crossing
    probability; the time recorded is the midpoint of the first such step.
    """
    m = cfg.market
    level = cfg.level_range[1]
    t = crossing_times(cfg, level)
    crossed = t[np.isfinite(t)]
    counts, edges = np.histogram(crossed, bins=cfg.bins, range=(0.0, m.T))
    width = edges[1] - edges[0]
    dens = counts / (crossed.size * width) if crossed.size else np.zeros(cfg.bins)
    rows = [DENSITY_SCHEMA, "t_lo,t_hi,count,density"]
    rows += [f"{_num(a)},{_num(b)},{c},{_num(d)}" for a, b, c, d in zip(edges[:-1], edges[1:], counts, dens)]
    _atomic_write(cfg.output_path, "\n".join(rows) + "\n")

    tau = (math.log(m.S0 / m.B) / m.sigma) ** 2
    summary = {
        "config": _config_echo(cfg),
        "level": level,
        "paths": int(t.size),
        "crossed": int(crossed.size),
        "tau": tau,
        "fraction_before_2tau": float(np.mean(crossed < 2 * tau)) if crossed.size else None,
        "median_crossing_time": float(np.median(crossed)) if crossed.size else None,
        "median_over_tau": float(np.median(crossed) / tau) if crossed.size else None,
        "note": None if crossed.size else "no path crossed the barrier; histogram is empty",
    }
    text = _json(summary)
    path = _summary_path(cfg.output_path)
    if path is not None:
        _atomic_write(path, text)
    else:
        sys.stderr.write(text)
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig) -> int:
    """Level variances on a uniform grid and on a power grid, side by side.

    Both grids have a single step at level 0, so the coarse-level comparison
    uses the coarsest level on which the grids differ.
    """
    base = cfg.method_spec
    gamma = base.gamma if base.gamma is not None else max(1.0, gamma_for_barrier(cfg.market.S0, cfg.market.B, cfg.market.sigma))
    uni = replace(base, grid="uniform", gamma=None)
    pw = replace(base, grid="power", gamma=gamma)
    su, sp = _level_table(cfg, uni), _level_table(cfg, pw)
    table = []
    for a, b in zip(su, sp):
        table.append(
            {
                "level": a.level,
                "uniform": dict(zip(OUTPUTS, map(float, a.variance))),
                "power": dict(zip(OUTPUTS, map(float, b.variance))),
            }
        )
    levels = [s.level for s in su]
    distinct = [lv for lv in levels if lv >= 1] if gamma != 1.0 else []
    verdict = {}
    for k, name in enumerate(OUTPUTS):
        top = [i for i, lv in enumerate(levels)][-2:]
        lower_fine = len(levels) >= 2 and all(sp[i].variance[k] < su[i].variance[k] for i in top)
        higher_coarse = None
        if distinct:
            i = levels.index(distinct[0])
            higher_coarse = bool(sp[i].variance[k] > su[i].variance[k])
        verdict[name] = {"power_lower_at_finest_two": bool(lower_fine), "power_higher_at_coarsest": higher_coarse}
    body = {
        "config": _config_echo(cfg),
        "gamma": gamma,
        "coarsest_compared_level": distinct[0] if distinct else None,
        "table": table,
        "verdict": verdict,
    }
    _atomic_write(cfg.output_path, _json(body))
    bad = sum(s.nonfinite for s in su + sp)
    return EXIT_NONFINITE if bad else EXIT_OK


COMMANDS = {"levels": cmd_levels, "mlmc": cmd_mlmc, "density": cmd_density, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlmc-greeks", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="mode", required=True)
    for name in MODES:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__.split("\n")[0])
        p.add_argument("--config", help="flat JSON config file; flags override its fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file (stdout when omitted)")
        p.add_argument("--levels", help="MIN:MAX level range")
        p.add_argument("--fit", help="MIN:MAX levels used for rate fits")
        p.add_argument("--samples", type=int, help="samples per level")
        p.add_argument("--eps", type=float, help="target RMS accuracy (mlmc)")
        p.add_argument("--method", choices=estimators.METHODS)
        p.add_argument("--payoff", choices=estimators.PAYOFFS)
        p.add_argument("--d", help="final-step splittings: an integer or 'auto'")
        p.add_argument("--d-c", dest="d_c", type=float, help="constant c for --d auto")
        p.add_argument("--hstar", type=float, help="smoothing width for barrier_smooth")
        p.add_argument("--grid", choices=("uniform", "power"))
        p.add_argument("--gamma", type=float, help="power-grid exponent")
        for key in ("S0", "K", "r", "sigma", "T", "B"):
            p.add_argument(f"--{key}", type=float)
        p.add_argument("--workers", type=int)
        p.add_argument("--max-level", dest="max_level", type=int)
        p.add_argument("--pilot", type=int)
        p.add_argument("--bins", type=int)
        p.add_argument("--backend", choices=("auto", "cython", "python"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    overrides = {k: v for k, v in vars(args).items() if k in CONFIG_KEYS}
    try:
        cfg = load_config(args.config, overrides)
        estimators.set_backend(cfg.extra.get("backend", "auto"))
    except (ConfigError, ImportError) as exc:
        print(f"mlmc-greeks: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[cfg.mode](cfg)
