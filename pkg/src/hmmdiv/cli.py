"""Command-line entry point.

Settings come from built-in defaults, then an optional JSON run config, then
flags. Every CSV is written to a temporary file in the target directory and
renamed into place, so a failed run never leaves a half-written file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import benchmark, filter as wonham, hjb, montecarlo
from .model import ModelParams, ParameterError, paper_params

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4
EXIT_NUMERICAL = 5

PAPER_K = (0.2, 0.3, 0.67, 1.8)
LARGE_K = (2.0, 5.0, 10.0, 20.0)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    params: ModelParams = field(default_factory=paper_params)
    H: float = hjb.DEFAULT_H
    n_x: int = hjb.DEFAULT_NX
    n_u: int | None = hjb.DEFAULT_NU
    eps: float = hjb.DEFAULT_EPS
    zeta: float | None = None
    refine_factor: float = hjb.DEFAULT_REFINE
    max_iter: int = 50
    tol: int = 0
    n_paths: int = 10_000
    dt: float = 1e-3
    horizon: float | None = None  # None: the subcommand's own default
    seed: int = field(default_factory=lambda: int(os.environ.get("RDS_SEED") or 0))
    out_dir: Path = Path(".")
    threads: int = 1

    def check(self) -> "RunConfig":
        positive = {"H": self.H, "n_x": self.n_x, "eps": self.eps, "refine_factor": self.refine_factor,
                    "max_iter": self.max_iter, "n_paths": self.n_paths, "dt": self.dt, "threads": self.threads}
        for name, value in positive.items():
            if not (value > 0):
                raise ConfigError(f"{name} must be positive, got {value}")
        for name in ("n_u", "zeta", "horizon"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.tol < 0:
            raise ConfigError("tol must be nonnegative")
        return self

    def solver_kw(self) -> dict:
        return dict(H=self.H, n_x=self.n_x, n_u=self.n_u, eps=self.eps, zeta=self.zeta,
                    refine_factor=self.refine_factor, max_iter=self.max_iter, tol=self.tol)


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_CASTS = {"n_x": int, "n_u": int, "max_iter": int, "tol": int, "n_paths": int, "seed": int, "threads": int}


def _load_params(value, base: Path) -> ModelParams:
    if isinstance(value, dict):
        return ModelParams.from_dict(value)
    path = Path(value)
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        raise ConfigError(f"parameter file not found: {path}")
    return ModelParams.from_json(path)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (``None`` values skipped).

    The file may hold ``params`` either inline or as a path relative to the
    file. A bare parameter document (keys ``mu``, ``sigma``, ...) is also
    accepted.
    """
    doc: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base = path.parent
        if "mu" in doc:
            doc = {"params": doc}
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(doc) - _FIELDS - {"K"}
    if unknown:
        raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
    try:
        cfg = RunConfig()
    except ValueError as exc:
        raise ConfigError(f"RDS_SEED must be an integer ({exc})") from exc
    if "params" in doc:
        cfg.params = doc.pop("params") if isinstance(doc["params"], ModelParams) else _load_params(doc.pop("params"), base)
    if "K" in doc:
        cfg.params = cfg.params.with_(K=float(doc.pop("K")))
    for key, value in doc.items():
        if key == "out_dir":
            value = Path(value)
        elif key in _CASTS:
            value = _CASTS[key](value)
        elif isinstance(value, (int, float)):
            value = float(value)
        setattr(cfg, key, value)
    return cfg.check()


# ------------------------------------------------------------------ output


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return "%.12g" % value


def write_csv(path: str | Path, header, rows) -> Path:
    """Atomic CSV write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_threshold_csv(path: str | Path) -> hjb.ThresholdCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"upsilon", "b"} <= set(rows[0]):
        raise ConfigError(f"{path}: expected columns upsilon,b")
    ups = np.array([float(r["upsilon"]) for r in rows])
    b = np.array([float(r["b"]) for r in rows])
    order = np.argsort(ups)
    return hjb.ThresholdCurve(ups[order], b[order], np.ones(ups.size, dtype=bool))


def value_rows(sol: hjb.HJBSolution):
    xs, us = sol.mesh.xs, sol.mesh.us
    V, u = sol.value.values, sol.policy.rates
    return [(us[j], xs[i], V[i, j], u[i, j]) for j in range(us.size) for i in range(xs.size)]


def threshold_rows(curve: hjb.ThresholdCurve):
    return list(zip(curve.upsilon, curve.b))


def iteration_rows(sol: hjb.HJBSolution):
    return [(r["k"], r["policy_changes"], r["value_delta"]) for r in sol.log]


def write_solution(sol: hjb.HJBSolution, out: Path, suffix: str = "") -> list[Path]:
    return [
        write_csv(out / f"value{suffix}.csv", ["upsilon", "x", "V", "u"], value_rows(sol)),
        write_csv(out / f"threshold{suffix}.csv", ["upsilon", "b"], threshold_rows(sol.threshold)),
        write_csv(out / f"iterations{suffix}.csv", ["k", "policy_changes", "value_delta"], iteration_rows(sol)),
    ]


def _k_label(K: float) -> str:
    return "%g" % K


# ------------------------------------------------------------- subcommands


def cmd_simulate_filter(cfg: RunConfig, args) -> int:
    horizon = cfg.horizon or 50.0
    chain, path = wonham.simulate_filter_path(cfg.params, horizon, cfg.dt, cfg.seed)
    header, rows = wonham.filter_path_rows(cfg.params, chain, path)
    out = write_csv(cfg.out_dir / args.output, header, rows)
    print(out)
    return EXIT_OK


def cmd_solve(cfg: RunConfig, args) -> int:
    sol = hjb.solve_hjb(cfg.params, **cfg.solver_kw())
    for p in write_solution(sol, cfg.out_dir):
        print(p)
    print(f"iterations={sol.iterations} threshold_type={int(sol.threshold.is_threshold)}", file=sys.stderr)
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig, args) -> int:
    did = False
    if args.single_regime is not None:
        mu, sigma, delta, K = args.single_regime
        sol = benchmark.single_regime_threshold(mu, sigma, delta, K, upper=cfg.H)
        print(f"threshold,{_fmt(sol.threshold)}")
        print("x,V")
        for x in np.linspace(0.0, cfg.H, 11):
            print(f"{_fmt(x)},{_fmt(sol.value(x))}")
        did = True
    if args.bayes:
        sol = benchmark.bayesian_case(cfg.params, **cfg.solver_kw())
        print(write_csv(cfg.out_dir / "threshold_bayes.csv", ["upsilon", "b"], threshold_rows(sol.threshold)))
        did = True
    if args.k_sweep:
        K_list = [float(k) for k in args.k_sweep.split(",") if k.strip()]
        sols = benchmark.k_sweep(cfg.params, None, K_list, threads=cfg.threads, **cfg.solver_kw())
        for K, sol in zip(K_list, sols):
            print(write_csv(cfg.out_dir / f"threshold_K{_k_label(K)}.csv", ["upsilon", "b"], threshold_rows(sol.threshold)))
        did = True
    if not did:
        raise ConfigError("benchmark needs --single-regime, --bayes or --k-sweep")
    return EXIT_OK


def _parse_p0(text, params):
    if text is None:
        return None
    coords = [float(v) for v in str(text).split(",")]
    if len(coords) not in (params.M - 1, params.M):
        raise ConfigError(f"--p0 needs {params.M - 1} comma-separated probabilities")
    return coords


def cmd_evaluate(cfg: RunConfig, args) -> int:
    curve = read_threshold_csv(args.threshold)
    res = montecarlo.evaluate_strategy(
        cfg.params, curve, args.x0, _parse_p0(args.p0, cfg.params), n_paths=cfg.n_paths, dt=cfg.dt,
        horizon=cfg.horizon, seed=cfg.seed, keep_paths=args.paths_out is not None, threads=cfg.threads,
    )
    print("estimate,std_error,ruin_fraction,n_paths,horizon")
    print(",".join(_fmt(v) for v in (res.estimate, res.std_error, res.ruin_fraction, res.n_paths, res.horizon)))
    if args.paths_out is not None:
        rows = zip(range(res.n_paths), res.payouts, res.ruin_times)
        write_csv(args.paths_out, ["path", "payout", "ruin_time"], rows)
    return EXIT_OK


def reproduce_figures(cfg: RunConfig, out: Path) -> list[Path]:
    """Data behind the five figures: filter path, threshold and value comparisons, large-K sweep."""
    params = cfg.params
    kw = cfg.solver_kw()
    written = []

    chain, path = wonham.simulate_filter_path(params, cfg.horizon or 50.0, cfg.dt, cfg.seed)
    written.append(write_csv(out / "fig1_filter_path.csv", *wonham.filter_path_rows(params, chain, path)))

    mesh_kw = {k: kw.pop(k) for k in ("H", "n_x", "n_u", "refine_factor")}
    mesh = benchmark.sweep_mesh(params, PAPER_K, **mesh_kw)
    switching = benchmark.k_sweep(params, mesh, PAPER_K, threads=cfg.threads, **kw)
    bayes = benchmark.k_sweep(params.with_(Q=np.zeros_like(params.Q)), mesh, PAPER_K, threads=cfg.threads, **kw)
    rows = []
    for K, s, b in zip(PAPER_K, switching, bayes):
        rows += [(K, u, bs, bb) for u, bs, bb in zip(s.threshold.upsilon, s.threshold.b, b.threshold.b)]
    written.append(write_csv(out / "fig2_thresholds.csv", ["K", "upsilon", "b", "b_bayes"], rows))

    s18, b18 = switching[-1], bayes[-1]
    written.append(write_csv(out / "fig3_value_K1.8.csv", ["upsilon", "x", "V", "u"], value_rows(s18)))
    xs, us = s18.mesh.xs, s18.mesh.us
    rows = [(us[j], xs[i], s18.value.values[i, j], b18.value(xs[i], us[j]))
            for j in range(us.size) for i in range(xs.size)]
    written.append(write_csv(out / "fig4_value_vs_bayes_K1.8.csv", ["upsilon", "x", "V", "V_bayes"], rows))

    large = benchmark.k_sweep(params, None, LARGE_K, threads=cfg.threads, **kw, **mesh_kw)
    rows = [(K, u, b) for K, s in zip(LARGE_K, large) for u, b in zip(s.threshold.upsilon, s.threshold.b)]
    written.append(write_csv(out / "fig5_thresholds_large_K.csv", ["K", "upsilon", "b"], rows))
    return written


def cmd_repro_figures(cfg: RunConfig, args) -> int:
    for p in reproduce_figures(cfg, cfg.out_dir):
        print(p)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--params", help="JSON parameter file (overrides the config's params)")
    common.add_argument("--K", type=float, help="dividend cap override")
    common.add_argument("--H", type=float)
    common.add_argument("--nx", dest="n_x", type=int)
    common.add_argument("--nu", dest="n_u", type=int)
    common.add_argument("--eps", type=float)
    common.add_argument("--zeta", type=float)
    common.add_argument("--refine", dest="refine_factor", type=float)
    common.add_argument("--max-iter", dest="max_iter", type=int)
    common.add_argument("--tol", type=int)
    common.add_argument("--n-paths", dest="n_paths", type=int)
    common.add_argument("--dt", type=float)
    common.add_argument("--horizon", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="out_dir")
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hmmdiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("simulate-filter", parents=[common], help="simulate chain, observations and filter")
    p.add_argument("--output", default="filter_path.csv")
    p.set_defaults(func=cmd_simulate_filter)

    p = sub.add_parser("solve", parents=[common], help="policy iteration for the HJB equation")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("benchmark", parents=[common], help="reference and comparison runs")
    p.add_argument("--single-regime", nargs=4, type=float, metavar=("MU", "SIGMA", "DELTA", "K"))
    p.add_argument("--bayes", action="store_true", help="solve with Q = 0")
    p.add_argument("--k-sweep", metavar="K1,K2,...")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("evaluate", parents=[common], help="Monte-Carlo value of a threshold strategy")
    p.add_argument("--threshold", required=True, help="CSV with columns upsilon,b")
    p.add_argument("--x0", type=float, required=True)
    p.add_argument("--p0", help="first M-1 prior probabilities, comma separated")
    p.add_argument("--paths-out", help="CSV of per-path payouts")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("repro-figures", parents=[common], help="write the data behind the figures")
    p.set_defaults(func=cmd_repro_figures)
    return parser


def _error(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": str(message)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {name: getattr(args, name) for name in
                 ("K", "H", "n_x", "n_u", "eps", "zeta", "refine_factor", "max_iter", "tol",
                  "n_paths", "dt", "horizon", "seed", "out_dir", "threads")}
    overrides["params"] = args.params
    try:
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except (ConfigError, ParameterError) as exc:
        return _error("config", EXIT_CONFIG, exc)
    except hjb.ConvergenceError as exc:
        return _error("not_converged", EXIT_NOT_CONVERGED, f"{exc}; {len(exc.nodes)} oscillating nodes")
    except (hjb.PositivityError, hjb.LinearSolveError, benchmark.BracketError) as exc:
        return _error("numerical", EXIT_NUMERICAL, exc)
    except OSError as exc:
        return _error("io", EXIT_IO, exc)
    except ValueError as exc:
        return _error("config", EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
