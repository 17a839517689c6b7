import argparse
import asyncio
import sys
from pathlib import Path

from heatctrl.assembly import assemble, l2_error_exact
from heatctrl.config import Config, ConfigError, HeatCtrlError, RunConfig, logger
from heatctrl.control import ControlBounds, ControlNotConverged, InvalidControlData, OptimalityResult, solve_control
from heatctrl.harness import (
    AXES,
    StudySpec,
    control_problem,
    manufactured_state_problem,
    run_control_convergence,
    run_state_convergence,
)
from heatctrl.io import version, write_field_csv, write_json, write_rows_csv
from heatctrl.mesh2d import unit_square_mesh
from heatctrl.parabolic import solve_state
from heatctrl.sparsela import Breakdown, MaxIterations
from heatctrl.timegrid import uniform_grid

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heatctrl", description="Équation de la chaleur et contrôle frontière de Dirichlet")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("solve-state", "Résoudre l'équation d'état d'un problème manufacturé"),
                            ("solve-control", "Résoudre le problème de contrôle optimal"),
                            ("study", "Étude de convergence par raffinements emboîtés")]:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="Fichier de configuration TOML")
        cmd.add_argument("--output", default=None, help="Répertoire de sortie (remplace output.dir)")
        if name == "study":
            cmd.add_argument("--axis", choices=AXES, default=None, help="Axe raffiné (remplace study.axis)")
    return parser


def _final_time(cfg: RunConfig) -> float:
    if cfg.has("time.T"):
        return cfg.get("time.T", float)
    return cfg.get("domain.T", float, Config.DEFAULT_T)


def _bounds(cfg: RunConfig) -> ControlBounds:
    lower, upper = cfg.get_list("control.bounds", float, length=2, default=list(Config.DEFAULT_BOUNDS))
    try:
        return ControlBounds(lower, upper)
    except InvalidControlData as e:
        raise ConfigError("control.bounds", str(e)) from e


def _output_dir(cfg: RunConfig, override) -> Path:
    out = Path(override or cfg.get("output.dir", str, "results"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_solve_state(cfg: RunConfig, out: Path) -> dict:
    problem = manufactured_state_problem(cfg.get("problem.id", str))
    n, M, T = cfg.get("domain.n", int), cfg.get("time.M", int), _final_time(cfg)
    mesh, grid = unit_square_mesh(n), uniform_grid(M, T)
    ops = assemble(mesh)
    logger.info(f"🔄 Équation d'état {problem.id}: n={n}, M={M}, T={T}")
    y = solve_state(problem.data, mesh, grid, ops)
    error = l2_error_exact(problem.exact, y.coeffs, ops, grid)
    write_field_csv(out / "state.csv", y)
    summary = {"command": "solve-state", "problem": problem.id, "n": n, "M": M, "T": T,
               "h": mesh.h, "k": grid.k_max, "error_state": error}
    logger.info(f"✅ Erreur L²(I;L²(Ω)) = {error:.6e}")
    return summary


def _write_control(out: Path, result: OptimalityResult) -> None:
    write_field_csv(out / "control.csv", result.u)
    write_field_csv(out / "state.csv", result.y)
    write_field_csv(out / "adjoint.csv", result.z)
    write_field_csv(out / "normal_derivative.csv", result.normal_derivative)


def run_solve_control(cfg: RunConfig, out: Path) -> dict:
    problem_id = cfg.get("problem.id", str)
    alpha = cfg.get("control.alpha", float)
    bounds = _bounds(cfg)
    n, M, T = cfg.get("domain.n", int), cfg.get("time.M", int), _final_time(cfg)
    tol = cfg.get("control.tol", float, None)
    max_iters = cfg.get("control.max_iters", int, Config.CONTROL_MAX_ITERS)

    mesh, grid = unit_square_mesh(n), uniform_grid(M, T)
    ops = assemble(mesh)
    prob = control_problem(problem_id, mesh, grid, ops, alpha, bounds)
    summary = {"command": "solve-control", "problem": problem_id, "n": n, "M": M, "T": T, "alpha": alpha,
               "bounds": [bounds.lower, bounds.upper]}
    try:
        result = solve_control(prob, tol=tol, max_iters=max_iters)
    except ControlNotConverged as e:
        _write_control(out, e.result)
        summary.update(e.result.summary())
        summary["error"] = str(e)
        _write_summary(out, cfg, summary)
        raise
    _write_control(out, result)
    summary.update(result.summary())
    return summary


def _default_levels(problem_id: str, axis: str):
    if problem_id == "control-active":
        return ((Config.CONTROL_TIME_LEVELS, Config.CONTROL_TIME_REFERENCE) if axis == "time"
                else (Config.CONTROL_SPACE_LEVELS, Config.CONTROL_SPACE_REFERENCE))
    return ((Config.TIME_LEVELS, Config.TIME_REFERENCE) if axis == "time"
            else (Config.SPACE_LEVELS, Config.SPACE_REFERENCE))


def _default_fixed(problem_id: str, which: str) -> int:
    if problem_id == "control-active":
        return Config.CONTROL_TIME_FIXED_N if which == "n" else Config.CONTROL_SPACE_FIXED_M
    return Config.TIME_FIXED_N if which == "n" else Config.SPACE_FIXED_M


async def run_study(cfg: RunConfig, out: Path, axis=None) -> dict:
    problem_id = cfg.get("problem.id", str)
    axis = axis or cfg.get("study.axis", str)
    if axis not in AXES:
        raise ConfigError("study.axis", f"axe inconnu {axis!r} (attendu: {', '.join(AXES)})")
    default_levels, default_reference = _default_levels(problem_id, axis)
    levels = cfg.get_list("study.levels", int, default=None)
    if levels is None:
        levels, reference = default_levels, cfg.get("study.reference", int, default_reference)
    else:
        reference = cfg.get("study.reference", int, None)

    spec_kwargs = dict(problem_id=problem_id, axis=axis, levels=levels, reference=reference,
                       fixed_n=cfg.get("domain.n", int, _default_fixed(problem_id, "n")),
                       fixed_M=cfg.get("time.M", int, _default_fixed(problem_id, "M")), T=_final_time(cfg),
                       output=str(out))
    if problem_id == "control-active":
        spec_kwargs.update(alpha=cfg.get("control.alpha", float), bounds=_bounds(cfg),
                           tol=cfg.get("control.tol", float, None),
                           max_iters=cfg.get("control.max_iters", int, Config.CONTROL_MAX_ITERS))
        report = await run_control_convergence(StudySpec(**spec_kwargs))
    else:
        report = await run_state_convergence(StudySpec(**spec_kwargs))

    write_rows_csv(out / "study.csv", report.csv_rows())
    summary = {"command": "study"}
    summary.update(report.summary())
    return summary


def _write_summary(out: Path, cfg: RunConfig, summary: dict) -> None:
    summary = dict(summary, config=cfg.raw, version=version())
    write_json(out / "summary.json", summary)
    logger.info(f"📊 Résumé écrit dans {out / 'summary.json'}")


def main(argv=None) -> int:
    """Point d'entrée: 0 succès, 2 configuration ou données invalides, 3 échec du solveur"""
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config)
        out = _output_dir(cfg, args.output)
        if args.command == "solve-state":
            summary = run_solve_state(cfg, out)
        elif args.command == "solve-control":
            summary = run_solve_control(cfg, out)
        else:
            summary = asyncio.run(run_study(cfg, out, args.axis))
        _write_summary(out, cfg, summary)
        return EXIT_OK
    except (ControlNotConverged, Breakdown, MaxIterations) as e:
        logger.error(f"❌ Échec du solveur: {e}")
        print(f"échec: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (HeatCtrlError, OSError) as e:
        logger.error(f"❌ Entrée invalide: {e}")
        print(f"erreur: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
