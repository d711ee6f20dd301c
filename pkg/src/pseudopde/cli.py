"""Batch command-line runner: ``pseudopde <command> --config FILE [options]``.

Commands
    simulate     forward paths from the configured start point
    solve-bsde   Picard BSDE solve at the start point
    solve-mild   the pair (u, v) on the verification grid
    verify       kernel-identity residuals at the test points (exit 1 on failure)
    benchmark    BSDE, fixed-point and finite-difference u side by side

Outputs are written atomically into ``--out`` (default: the config's output
directory).  Their content depends only on the config and seed; the run time
goes into a separate ``manifest.json``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import expressions, io
from .bsde_solver import solve_markovian
from .decoupled_mild import (MildSolutionPair, build_u_from_bsde, evaluate_mild_residuals,
                             solve_mild_fixed_point)
from .errors import ConfigurationError, PseudoPdeError
from .forward_models import DistributionalDriftModel, simulate
from .operators import PsiSystem
from .pde_reference import solve_semilinear_fd

log = logging.getLogger("pseudopde")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


def bundled_configs():
    root = resources.files("pseudopde") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_config_path(name):
    """A filesystem path, or the name of a bundled config such as ``heat``."""
    path = Path(name)
    if path.is_file():
        return path
    bundled = resources.files("pseudopde") / "configs" / f"{name}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigurationError(
        f"config {name!r} not found (bundled configs: {', '.join(bundled_configs())})")


class Run:
    """Validated config plus the objects built from it."""

    def __init__(self, cfg, out_dir, workers):
        self.cfg = cfg
        self.out = Path(out_dir if out_dir is not None else cfg.output.directory)
        self.workers = workers
        self.model = cfgmod.build_model(cfg)
        self.driver = cfgmod.build_driver(cfg)
        self.terminal = cfgmod.build_terminal(cfg)
        self.psi = PsiSystem.default(self.model)
        self.written = []

    def wants(self, fmt):
        return fmt in self.cfg.output.formats

    def write(self, name, data):
        self.written.append(io.atomic_write(self.out / name, data))

    def finish(self, command):
        io.write_manifest(self.out, self.written, command,
                          {"seed": self.cfg.seed, "workers": self.workers})

    @property
    def mc(self):
        return cfgmod.build_mc(self.cfg, self.workers)

    def start(self):
        s = self.cfg.start
        x = np.asarray(s.x, dtype=float)
        if x.size != self.model.dim:
            raise ConfigurationError(f"start.x needs {self.model.dim} coordinate(s)")
        return float(s.s), x


def cmd_simulate(run):
    """Simulate forward paths from the start point."""
    s, x = run.start()
    ens = simulate(run.model, s, x, cfgmod.build_time_grid(run.cfg), run.cfg.solver.n_paths,
                   run.cfg.seed)
    run.write("ensemble.ppde", io.ensemble_to_bytes(ens))
    if run.wants("csv"):
        d = ens.dim
        header = ["t"] + [f"mean_x_{i + 1}" for i in range(d)] + [f"std_x_{i + 1}" for i in range(d)]
        rows = [[float(t)] + list(ens.paths[:, k].mean(axis=0)) + list(ens.paths[:, k].std(axis=0))
                for k, t in enumerate(ens.grid.times)]
        run.write("ensemble_summary.csv", io.csv_text(header, rows))
    return EXIT_OK


def cmd_solve_bsde(run):
    """Solve the BSDE at the start point."""
    s, x = run.start()
    sol = solve_markovian(run.model, run.psi, run.driver, run.terminal, s, x,
                          cfgmod.build_time_grid(run.cfg), run.cfg.solver.n_paths, run.cfg.seed,
                          cfgmod.build_picard(run.cfg))
    if run.wants("csv"):
        run.write("bsde_slices.csv",
                  io.csv_text(["t", "mean_Y", "se_Y", "mean_abs_Z"], sol.slice_summary()))
    if run.wants("json"):
        report = dict(sol.diagnostics(), u=sol.u, u_se=sol.u_se, v=sol.v, v_se=sol.v_se,
                      s=s, x=x)
        run.write("bsde_diagnostics.json", io.json_text(report))
    if run.wants("binary"):
        run.write("bsde_solution.ppde", io.bsde_to_bytes(sol))
    log.info("u(%g, %s) = %.6g +- %.2g after %d iterations", s, list(x), sol.u, sol.u_se,
             sol.iterations)
    return EXIT_OK


def build_pair(run, source=None):
    cfg = run.cfg
    v = cfg.verification
    source = source or v.pair_source
    st = cfgmod.build_space_time_grid(cfg)
    mc = run.mc
    if source == "bsde":
        pair = build_u_from_bsde(run.model, run.psi, run.driver, run.terminal, st, mc)
    elif source == "fixed_point":
        pair = solve_mild_fixed_point(run.model, run.psi, run.driver, run.terminal, st, mc,
                                      v.mild.max_sweeps, v.mild.tol)
    elif source == "fd":
        pair = MildSolutionPair.from_fd(
            solve_semilinear_fd(run.model, run.driver, run.terminal, cfgmod.build_fd(cfg)),
            method=v.interpolation)
    else:
        d = run.model.dim
        u = expressions.state_function(v.u, d)
        vs = [expressions.state_function(e, d) for e in v.v]
        if len(vs) != run.psi.dim:
            raise ConfigurationError(f"verification.v needs {run.psi.dim} expression(s)")
        pair = MildSolutionPair.from_functions(
            u, lambda t, x: np.stack([f(t, x) for f in vs], axis=1), st, "from_expression",
            v.interpolation)
    if v.perturb_u:
        pair = pair.shifted(v.perturb_u)
    return pair


def _write_pair(run, pair, stem):
    if run.wants("csv"):
        run.write(f"{stem}.csv", io.pair_csv(pair))
    if run.wants("binary"):
        run.write(f"{stem}_u.ppde", io.grid_function_to_bytes(pair.u))
        for i, v in enumerate(pair.v):
            run.write(f"{stem}_v{i + 1}.ppde", io.grid_function_to_bytes(v))


def cmd_solve_mild(run):
    """Build (u, v) on the verification grid."""
    pair = build_pair(run)
    _write_pair(run, pair, "pair")
    if run.wants("json"):
        info = {"provenance": pair.provenance, "converged": pair.converged,
                "sweeps": pair.sweeps, "terminal_exact": pair.terminal_matches(run.terminal),
                "flagged_nodes": int(pair.flagged.sum()) if pair.flagged is not None else 0}
        run.write("pair_info.json", io.json_text(info))
    return EXIT_OK


def cmd_verify(run):
    """Check the kernel identities at the test points."""
    pair = build_pair(run)
    report = evaluate_mild_residuals(pair, run.model, run.psi, run.driver, run.terminal,
                                     cfgmod.build_test_points(run.cfg), run.mc,
                                     run.cfg.verification.threshold)
    run.write("residuals.json", io.json_text(report.as_dict()))
    run.write("residuals_plot.csv", io.residual_plot_csv(report))
    log.info("verification %s at %d point(s)", "passed" if report.passed else "FAILED",
             len(report.records))
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_benchmark(run):
    """Tabulate BSDE, fixed-point and finite-difference u on shared nodes."""
    st = cfgmod.build_space_time_grid(run.cfg)
    bsde = build_pair(run, "bsde")
    fixed = build_pair(run, "fixed_point")
    fd = None
    if run.model.dim == 1 and not isinstance(run.model, DistributionalDriftModel):
        fd = build_pair(run, "fd")
    header = ["s"] + (["x"] if st.dim == 1 else [f"x_{i + 1}" for i in range(st.dim)]) + [
        "u_bsde", "se_bsde", "u_fixed_point", "se_fixed_point", "u_fd", "diff_bsde_fixed_point",
        "combined_se"]
    nodes = st.space_nodes()
    rows = []
    for a, s in enumerate(st.times):
        ub = bsde.u.values[a].reshape(-1)
        uf = fixed.u.values[a].reshape(-1)
        sb = bsde.u_se[a].reshape(-1)
        sf = fixed.u_se[a].reshape(-1)
        ud = fd.u(float(s), nodes, outside="clamp") if fd is not None else np.full(len(nodes), np.nan)
        for b, x in enumerate(nodes):
            rows.append([float(s)] + [float(c) for c in x] + [
                ub[b], sb[b], uf[b], sf[b], "" if np.isnan(ud[b]) else float(ud[b]),
                ub[b] - uf[b], float(np.hypot(sb[b], sf[b]))])
    run.write("benchmark.csv", io.csv_text(header, rows))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "solve-bsde": cmd_solve_bsde,
    "solve-mild": cmd_solve_mild,
    "verify": cmd_verify,
    "benchmark": cmd_benchmark,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="pseudopde", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__ or name)
        p.add_argument("--config", required=True,
                       help="YAML config file, or the name of a bundled config (e.g. heat)")
        p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
        p.add_argument("--workers", type=int, default=1, help="parallel node jobs")
        p.add_argument("--out", help="output directory (default: output.directory)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. verification.perturb_u=0.1")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        cfg = cfgmod.load_config(resolve_config_path(args.config), args.set, args.seed)
        run = Run(cfg, args.out, args.workers)
        code = COMMANDS[args.command](run)
        run.finish(args.command)
        return code
    except ConfigurationError as exc:
        print(f"pseudopde {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PseudoPdeError as exc:
        print(f"pseudopde {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
