"""Command-line driver: ``nsamp <subcommand> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 invalid configuration, 2 non-convergence,
3 failed verification.
"""
from __future__ import annotations

import csv
import io
import json
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .amp import amp_run
from .dice import dice_run
from .loss import ProxError
from .model import (PROBLEMS, STREAM_INIT, STREAM_OMEGA0, dump_instance, make_instance,
                    sample_ground_truth)
from .numerics import SeededRng
from .risk import SolverError, solve_ridge_softmax
from .state_evolution import (FixedPoint, FixedPointError, McConfig, deviation_sequence, rho_at,
                              se_trajectory, solve_fixed_point)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_VERIFY = 0, 1, 2, 3
SE_SCHEDULE_MC = 50_000


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _emit(cfg: ExperimentConfig, text: str) -> None:
    if cfg.output_path:
        Path(cfg.output_path).write_bytes(text.encode())
    else:
        sys.stdout.write(text)


def _with_meta(cfg: ExperimentConfig, doc: dict) -> str:
    doc = dict(doc)
    doc["_meta"] = {"version": __version__, "config_sha256": cfg.digest()}
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _csv(cfg: ExperimentConfig, header, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {cfg.header()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _mc(cfg: ExperimentConfig) -> McConfig:
    return McConfig(cfg.mc_samples, cfg.seed, cfg.mc_blocks, cfg.prox_tol)


def _fixed_point(cfg: ExperimentConfig, lambda0: float | None = None) -> FixedPoint:
    lam = cfg.lambda0 if lambda0 is None else lambda0
    return solve_fixed_point(lam, cfg.alpha, np.eye(cfg.K), _mc(cfg), damping=cfg.damping,
                             tol=cfg.tol, max_iter=cfg.max_iter, problem=cfg.problem)


class _Abort(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config_options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="JSON config file; flags override its values."),
        click.option("--K", "K", type=int, default=None),
        click.option("--alpha", type=float, default=None),
        click.option("--d", "d", type=int, default=None),
        click.option("--lambda0", type=float, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--mc-samples", type=int, default=None),
        click.option("--t-max", type=int, default=None),
        click.option("--damping", type=float, default=None),
        click.option("--tol", type=float, default=None),
        click.option("--problem", type=str, default=None),
        click.option("--engine", type=str, default=None),
        click.option("--lambda0-grid", type=str, default=None, help="Comma-separated values."),
        click.option("--output", "output_path", type=click.Path(dir_okay=False), default=None),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _resolve(kw: dict) -> ExperimentConfig:
    path = kw.pop("config_path", None)
    grid = kw.pop("lambda0_grid", None)
    if grid is not None:
        try:
            kw["lambda0_grid"] = tuple(float(x) for x in grid.split(",") if x.strip())
        except ValueError as exc:
            raise ConfigError(f"lambda0_grid: {exc}") from exc
    return load_config(path, kw)


def _run(fn, kw):
    """Shared error handling: map library failures to exit codes."""
    try:
        cfg = _resolve(kw)
    except ConfigError as exc:
        click.echo(f"error: invalid config: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        with threadpool_limits(limits=1):
            code = fn(cfg) or EXIT_OK
    except _Abort as exc:
        click.echo(f"error: {exc}", err=True)
        code = exc.code
    sys.exit(code)


def _fp_or_abort(cfg: ExperimentConfig, lambda0: float | None = None) -> FixedPoint:
    try:
        return _fixed_point(cfg, lambda0)
    except (FixedPointError, ProxError) as exc:
        raise _Abort(EXIT_NONCONVERGED, f"fixed point: {exc}") from exc


class _Group(click.Group):
    """Maps click usage errors to the configuration exit code (click uses 2)."""

    def main(self, args=None, prog_name=None, **extra):
        try:
            rv = super().main(args, prog_name, standalone_mode=False, **extra)
        except click.UsageError as exc:
            exc.show()
            sys.exit(EXIT_CONFIG)
        except click.ClickException as exc:
            exc.show()
            sys.exit(exc.exit_code)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(1)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


@click.group(cls=_Group)
@click.version_option(__version__, prog_name="nsamp")
def main():
    """AMP, state evolution and stability analysis for ridge-regularized softmax regression."""


@main.command("fixed-point")
@_config_options
def cmd_fixed_point(**kw):
    """Solve for (B*, C*, V*) and write the FixedPoint JSON."""

    def run(cfg):
        try:
            fp = _fixed_point(cfg)
        except FixedPointError as exc:
            if exc.partial is not None:
                _emit(cfg, _with_meta(cfg, exc.partial.to_dict()))
            raise _Abort(EXIT_NONCONVERGED, str(exc)) from exc
        _emit(cfg, _with_meta(cfg, fp.to_dict()))

    _run(run, kw)


@main.command("rho-at")
@_config_options
@click.option("--fixed-point", "fp_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Read a FixedPoint JSON instead of solving.")
def cmd_rho_at(fp_path, **kw):
    """Stability radius at the fixed point."""

    def run(cfg):
        if fp_path:
            doc = json.loads(Path(fp_path).read_text())
            doc.pop("_meta", None)
            fp = FixedPoint.from_dict(doc)
            value = rho_at(fp)
        else:
            fp = _fp_or_abort(cfg)
            value = fp.rho_at
        _emit(cfg, _with_meta(cfg, {"K": fp.K, "alpha": fp.alpha, "lambda0": fp.lambda0,
                                    "rho_at": value, "mc_samples": fp.mc_samples, "seed": fp.seed}))

    _run(run, kw)


@main.command("se-rate")
@_config_options
def cmd_se_rate(**kw):
    """Deviation sequence of the contraction map and its step ratios."""

    def run(cfg):
        fp = _fp_or_abort(cfg)
        ds = deviation_sequence(fp, T_steps=cfg.t_max)
        norms = [np.linalg.norm(D) for D in ds.deltas]
        rows = []
        for t, nrm in enumerate(norms, start=1):
            ratio = ds.ratios[t - 1] if t - 1 < len(ds.ratios) else float("nan")
            rows.append([t, _fmt(nrm), _fmt(ratio), _fmt(fp.rho_at)])
        _emit(cfg, _csv(cfg, ["t", "delta_norm", "ratio", "rho_at_ref"], rows))

    _run(run, kw)


def _q_schedule(cfg, fp):
    if cfg.q_schedule == "fixed":
        return None
    se = se_trajectory(fp.Bstar, fp.Cstar, cfg.t_max + 1, fp, McConfig(SE_SCHEDULE_MC, cfg.seed),
                       pivot_tol=cfg.pd_pivot_tol)
    return se.Q


@main.command("amp")
@_config_options
def cmd_amp(**kw):
    """Direct AMP on a generated instance; writes the trajectory CSV."""

    def run(cfg):
        fp = _fp_or_abort(cfg)
        rng = SeededRng(cfg.seed)
        gt, data = make_instance(cfg.d, cfg.K, cfg.alpha, rng, PROBLEMS[cfg.problem], cfg.exact_overlap)
        try:
            tr = amp_run(gt, data, fp, cfg.t_max, rng.child(STREAM_INIT),
                         Q_schedule=_q_schedule(cfg, fp), loss=PROBLEMS[cfg.problem].loss)
        except ProxError as exc:
            raise _Abort(EXIT_NONCONVERGED, f"prox: {exc}") from exc
        _emit(cfg, tr.to_csv(comment=cfg.header()))

    _run(run, kw)


@main.command("dice")
@_config_options
def cmd_dice(**kw):
    """Matrix-free AMP; writes the trajectory CSV and a summary JSON next to it."""

    def run(cfg):
        fp = _fp_or_abort(cfg)
        rng = SeededRng(cfg.seed)
        gt = sample_ground_truth(cfg.d, cfg.K, rng.child(STREAM_OMEGA0), exact_overlap=cfg.exact_overlap)
        try:
            tr = dice_run(gt, fp, cfg.t_max, rng.child(STREAM_INIT), loss=PROBLEMS[cfg.problem].loss,
                          problem=PROBLEMS[cfg.problem])
        except ProxError as exc:
            raise _Abort(EXIT_NONCONVERGED, f"prox: {exc}") from exc
        _emit(cfg, tr.to_csv(comment=cfg.header()))
        text = _with_meta(cfg, tr.summary)
        if cfg.output_path:
            Path(cfg.output_path + ".summary.json").write_bytes(text.encode())
        else:
            sys.stderr.write(text)

    _run(run, kw)


@main.command("solve")
@_config_options
@click.option("--dump", "dump_path", type=click.Path(dir_okay=False), default=None,
              help="Write the minimizer in the binary instance format.")
def cmd_solve(dump_path, **kw):
    """Reference ridge solver on a generated instance; writes the SolveReport JSON."""

    def run(cfg):
        if not cfg.lambda0 > 0:
            raise _Abort(EXIT_NONCONVERGED, "solver requires lambda0 > 0")
        rng = SeededRng(cfg.seed)
        gt, data = make_instance(cfg.d, cfg.K, cfg.alpha, rng, PROBLEMS[cfg.problem], cfg.exact_overlap)
        try:
            rep = solve_ridge_softmax(data.X, data.y, cfg.lambda0, tol=cfg.solver_tol,
                                      loss=PROBLEMS[cfg.problem].loss)
        except SolverError as exc:
            raise _Abort(EXIT_NONCONVERGED, str(exc)) from exc
        doc = rep.to_dict()
        doc["risk_per_d"] = float(np.sum((rep.omega_star - gt.omega0) ** 2) / cfg.d)
        _emit(cfg, _with_meta(cfg, doc))
        if dump_path:
            dump_instance(dump_path, rep.omega_star, None, None)

    _run(run, kw)


@main.command("fig1")
@_config_options
def cmd_fig1(**kw):
    """Step-distance ratios per lambda0 for the chosen engine."""

    def run(cfg):
        rows = []
        for lam in cfg.lambda0_grid:
            fp = _fp_or_abort(cfg, lam)
            rng = SeededRng(cfg.seed)
            if cfg.engine == "direct":
                gt, data = make_instance(cfg.d, cfg.K, cfg.alpha, rng)
                tr = amp_run(gt, data, fp, cfg.t_max, rng.child(STREAM_INIT), track_grad=False)
                del data
            else:
                gt = sample_ground_truth(cfg.d, cfg.K, rng.child(STREAM_OMEGA0))
                tr = dice_run(gt, fp, cfg.t_max, rng.child(STREAM_INIT), measure_memory=False)
            for t, (dist, ratio) in enumerate(zip(tr.omega_step, tr.ratio), start=1):
                rows.append([_fmt(lam), t, _fmt(dist), _fmt(ratio), _fmt(fp.rho_at)])
        _emit(cfg, _csv(cfg, ["lambda0", "t", "step_dist", "ratio", "rho_at_ref"], rows))

    _run(run, kw)


@main.command("verify")
@click.option("--list", "list_only", is_flag=True, help="Print check names and exit.")
@click.option("--only", multiple=True, help="Run only the named checks (repeatable).")
@click.option("--tol-scale", type=float, default=1.0, show_default=True,
              help="Multiply every tolerance; 0 forces failures.")
def cmd_verify(list_only, only, tol_scale):
    """Run the acceptance suite and print a pass/fail table."""
    from .acceptance import CHECKS, run_checks

    if list_only:
        for name in CHECKS:
            click.echo(name)
        sys.exit(EXIT_OK)
    unknown = [n for n in only if n not in CHECKS]
    if unknown:
        click.echo(f"error: invalid config: unknown check(s) {', '.join(unknown)}", err=True)
        sys.exit(EXIT_CONFIG)
    if tol_scale < 0:
        click.echo("error: invalid config: tol_scale must be >= 0", err=True)
        sys.exit(EXIT_CONFIG)
    with threadpool_limits(limits=1):
        results = run_checks(list(only) or None, tol_scale, echo=click.echo)
    failed = [r.name for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
    sys.exit(EXIT_VERIFY if failed else EXIT_OK)


if __name__ == "__main__":  # pragma: no cover
    main()
