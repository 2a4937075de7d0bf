"""Command-line surface: synth, generate, ablate, render, eval.

Configuration merges, in decreasing precedence: command-line flags, environment
variables (prefix ``ADVERSIM_<SECTION>_<KEY>``), an INI config file
(``section.key = value``), and built-in defaults. Unknown keys are rejected.
Every run writes its resolved configuration next to its outputs, and all output
files are written atomically (temp file + rename).

Exit codes: 0 success, 1 partial per-scenario failures, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from adversim import kinematics, metrics, planners, priors, simulate
from adversim.intention import IntentionConfig
from adversim.kinematics import KinematicLimits
from adversim.priors import EmpiricalSamples, fit_prior
from adversim.scenario import (
    Scenario,
    ScenarioError,
    TEMPLATES,
    load_scenario,
    save_scenario,
    synth_scenario,
)
from adversim.simulate import RolloutFailure, RolloutLog, SimConfig, batch_run, load_log, save_log

ENV_PREFIX = "ADVERSIM"


class ConfigError(ValueError):
    pass


# (section, key) -> (type, default); None default means "unset"
CONFIG_SCHEMA: dict[tuple[str, str], tuple] = {
    ("run", "seed"): (int, 0),
    ("run", "jobs"): (int, 1),
    ("sim", "replan_hz"): (float, 2.0),
    ("sim", "mode"): (str, simulate.MODE_OPEN),
    ("sim", "intention_mode"): (str, simulate.INTENTION_OPTIMIZATION),
    ("sim", "planner"): (str, simulate.PLANNER_PLAYBACK),
    ("sim", "ov_planner"): (str, simulate.OV_PLANNER_QUINTIC),
    ("sim", "weights_file"): (str, ""),
    ("limits", "v_max"): (float, 30.0),
    ("limits", "a_max"): (float, 8.0),
    ("limits", "dtheta_max"): (float, 0.3),
    ("limits", "d_thres"): (float, 2.0),
    ("prior", "lambda"): (float, 1.0),
    ("intention", "k_av_candidates"): (int, 3),
    ("intention", "max_corridors"): (int, 4),
    ("intention", "t_min_seconds"): (float, 0.5),
    ("intention", "good_enough_objective"): (float, None),
    ("intention", "tol"): (float, 1e-5),
    ("intention", "max_iter"): (int, 5000),
    ("intention", "search_tol"): (float, 1e-3),
    ("intention", "search_max_iter"): (int, 1200),
    ("intention", "reach_margin"): (float, 0.25),
    ("intention", "min_lens_depth"): (float, 0.3),
    ("intention", "exec_margin"): (float, 0.01),
}

_FLAG_OVERRIDES = {
    ("run", "seed"): "seed",
    ("run", "jobs"): "jobs",
    ("sim", "replan_hz"): "replan_hz",
    ("sim", "mode"): "mode",
    ("sim", "intention_mode"): "intention_mode",
    ("sim", "planner"): "planner",
    ("sim", "ov_planner"): "ov_planner",
    ("sim", "weights_file"): "weights",
    ("limits", "d_thres"): "d_thres",
    ("prior", "lambda"): "lam",
}


def load_config(config_file: str | None, args: argparse.Namespace) -> dict[tuple[str, str], object]:
    values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}

    if config_file:
        parser = configparser.ConfigParser()
        read = parser.read(config_file)
        if not read:
            raise ConfigError(f"config file not found: {config_file}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                schema_key = (section, key)
                if schema_key not in CONFIG_SCHEMA:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                kind = CONFIG_SCHEMA[schema_key][0]
                try:
                    values[schema_key] = kind(raw)
                except ValueError as err:
                    raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from err

    for (section, key), (kind, _) in CONFIG_SCHEMA.items():
        env_name = f"{ENV_PREFIX}_{section.upper()}_{key.upper()}"
        if env_name in os.environ:
            try:
                values[(section, key)] = kind(os.environ[env_name])
            except ValueError as err:
                raise ConfigError(f"bad value for {env_name}: {os.environ[env_name]!r}") from err
    known_env = {f"{ENV_PREFIX}_{s.upper()}_{k.upper()}" for s, k in CONFIG_SCHEMA}
    for name in os.environ:
        if name.startswith(ENV_PREFIX + "_") and name not in known_env \
                and name != ENV_PREFIX + "_PURE_PYTHON":
            raise ConfigError(f"unknown environment override {name}")

    for schema_key, attr in _FLAG_OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[schema_key] = CONFIG_SCHEMA[schema_key][0](value)
    return values


def sim_config_from(values: dict) -> SimConfig:
    limits = KinematicLimits(
        v_max=values[("limits", "v_max")],
        a_max=values[("limits", "a_max")],
        dtheta_max=values[("limits", "dtheta_max")],
        d_thres=values[("limits", "d_thres")],
    )
    intention = IntentionConfig(
        k_av_candidates=values[("intention", "k_av_candidates")],
        max_corridors=values[("intention", "max_corridors")],
        t_min_seconds=values[("intention", "t_min_seconds")],
        good_enough_objective=values[("intention", "good_enough_objective")],
        tol=values[("intention", "tol")],
        max_iter=values[("intention", "max_iter")],
        search_tol=values[("intention", "search_tol")],
        search_max_iter=values[("intention", "search_max_iter")],
        reach_margin=values[("intention", "reach_margin")],
        min_lens_depth=values[("intention", "min_lens_depth")],
        exec_margin=values[("intention", "exec_margin")],
    )
    weights = None
    if values[("sim", "ov_planner")] == simulate.OV_PLANNER_LEARNED:
        path = values[("sim", "weights_file")]
        if not path:
            raise ConfigError("ov_planner 'learned' requires sim.weights_file / --weights")
        weights = planners.load_weights(Path(path).read_bytes())
    return SimConfig(
        replan_hz=values[("sim", "replan_hz")],
        mode=values[("sim", "mode")],
        intention_mode=values[("sim", "intention_mode")],
        planner=values[("sim", "planner")],
        ov_planner=values[("sim", "ov_planner")],
        seed=values[("run", "seed")],
        limits=limits,
        intention=intention,
        learned_weights=weights,
    )


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_resolved_config(values: dict, path: Path) -> None:
    parser = configparser.ConfigParser()
    for (section, key), value in sorted(values.items()):
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, "" if value is None else repr(value) if isinstance(value, float) else str(value))
    import io

    buf = io.StringIO()
    parser.write(buf)
    write_atomic(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def load_scenario_dir(path: Path) -> tuple[list[str], list[Scenario]]:
    files = sorted(p for p in path.glob("*.json") if p.name != "manifest.json")
    if not files:
        raise ConfigError(f"no scenario files in {path}")
    names, scenarios = [], []
    for f in files:
        scenarios.append(load_scenario(f.read_bytes()))
        names.append(f.stem)
    return names, scenarios


def build_prior(scenarios: list[Scenario], lam: float) -> priors.KinematicPrior:
    profiles = []
    for sc in scenarios:
        for agent in sc.agents:
            profiles.append(kinematics.profile_from_positions(agent.trajectory.positions, sc.dt))
    return fit_prior(profiles, lam)


def reference_samples(scenarios: list[Scenario]) -> tuple[EmpiricalSamples, EmpiricalSamples]:
    accels, jerks = [], []
    for sc in scenarios:
        ov = sc.ov
        if ov is None:
            continue
        a, j = metrics.kinematic_samples(ov.trajectory.positions[sc.history_steps:], sc.dt)
        accels.append(a)
        jerks.append(j)
    if not accels:
        raise ConfigError("no opponent vehicles found in the scenario set")
    return EmpiricalSamples(np.concatenate(accels)), EmpiricalSamples(np.concatenate(jerks))


def route_for_log(scenario: Scenario, log: RolloutLog) -> np.ndarray:
    pts = np.vstack([scenario.map.lanes[i].points[:, :2] for i in log.route])
    return metrics.trim_route(pts, log.states[log.av_id][0, :2])


def run_suite(
    names: list[str],
    scenarios: list[Scenario],
    config: SimConfig,
    prior,
    jobs: int,
    out_dir: Path,
    write_logs: bool = True,
) -> tuple[list[RolloutLog], list[str], metrics.MetricsReport | None, list[Scenario]]:
    results = batch_run(scenarios, config, prior, jobs=jobs)
    failures = [f"{name}: {res.error}" for name, res in zip(names, results) if isinstance(res, RolloutFailure)]
    kept = [(name, sc, res) for name, sc, res in zip(names, scenarios, results)
            if isinstance(res, RolloutLog)]
    if write_logs:
        for name, _, log in kept:
            write_atomic(out_dir / "logs" / f"{name}.jsonl", save_log(log))
    if not kept:
        return [], failures, None, []
    logs = [log for _, _, log in kept]
    kept_scenarios = [sc for _, sc, _ in kept]
    reference = reference_samples(kept_scenarios)
    maps = [sc.map for sc in kept_scenarios]
    routes = [route_for_log(sc, log) for sc, log in zip(kept_scenarios, logs)]
    rep = metrics.report(logs, maps, reference, routes)
    return logs, failures, rep, kept_scenarios


def write_report(rep: metrics.MetricsReport, out_dir: Path, name: str = "Run") -> None:
    write_atomic(out_dir / "report.json", metrics.report_to_json(rep, include_timing=False))
    timing = {"mean_generation_time": rep.mean_generation_time}
    write_atomic(out_dir / "timing.json", json.dumps(timing, indent=2).encode("utf-8"))
    write_atomic(out_dir / "report.txt", metrics.format_table([(name, rep)]).encode("utf-8"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, values) -> int:
    out_dir = Path(args.out)
    n = args.n
    seed0 = values[("run", "seed")]
    if args.template == "all":
        per = (n + len(TEMPLATES) - 1) // len(TEMPLATES)
        plan = [(tpl, seed0 + i) for tpl in TEMPLATES for i in range(per)][:n]
    else:
        plan = [(args.template, seed0 + i) for i in range(n)]
    entries = []
    for template, seed in plan:
        scenario = synth_scenario(seed, template)
        fname = f"{template}_{seed:04d}.json"
        write_atomic(out_dir / fname, save_scenario(scenario))
        entries.append({"file": fname, "seed": seed, "template": template})
    write_atomic(out_dir / "manifest.json",
                 json.dumps({"entries": entries}, indent=2).encode("utf-8"))
    print(f"wrote {len(entries)} scenarios to {out_dir}")
    return 0


def cmd_generate(args, values) -> int:
    out_dir = Path(args.out)
    names, scenarios = load_scenario_dir(Path(args.scenarios))
    config = sim_config_from(values)
    prior = build_prior(scenarios, values[("prior", "lambda")])
    write_atomic(out_dir / "prior.json", priors.save_prior(prior))
    dump_resolved_config(values, out_dir / "resolved_config.ini")
    logs, failures, rep, _ = run_suite(
        names, scenarios, config, prior, values[("run", "jobs")], out_dir)
    for line in failures:
        print(f"scenario failed: {line}", file=sys.stderr)
    if rep is None:
        print("all scenarios failed", file=sys.stderr)
        return 1
    write_report(rep, out_dir, name=config.intention_mode)
    print(metrics.format_table([(config.intention_mode, rep)]), end="")
    return 1 if failures else 0


ABLATION_VARIANTS = {
    "none": dict(intention_mode=simulate.INTENTION_NONE, ov_planner=simulate.OV_PLANNER_QUINTIC,
                 raw_intention=False),
    "opt": dict(intention_mode=simulate.INTENTION_OPTIMIZATION, ov_planner=simulate.OV_PLANNER_SEED,
                raw_intention=True),
    "interp": dict(intention_mode=simulate.INTENTION_HEURISTIC, ov_planner=simulate.OV_PLANNER_QUINTIC,
                   raw_intention=False),
    "full": dict(intention_mode=simulate.INTENTION_OPTIMIZATION, ov_planner=simulate.OV_PLANNER_QUINTIC,
                 raw_intention=False),
}


def cmd_ablate(args, values) -> int:
    out_dir = Path(args.out)
    names, scenarios = load_scenario_dir(Path(args.scenarios))
    base_config = sim_config_from(values)
    prior = build_prior(scenarios, values[("prior", "lambda")])
    write_atomic(out_dir / "prior.json", priors.save_prior(prior))
    dump_resolved_config(values, out_dir / "resolved_config.ini")
    rows = []
    any_failures = False
    all_failed = True
    for variant, overrides in ABLATION_VARIANTS.items():
        config = replace(base_config, **overrides)
        vdir = out_dir / variant
        logs, failures, rep, _ = run_suite(names, scenarios, config, prior,
                                           values[("run", "jobs")], vdir)
        for line in failures:
            print(f"[{variant}] scenario failed: {line}", file=sys.stderr)
        any_failures = any_failures or bool(failures)
        if rep is None:
            continue
        all_failed = False
        write_report(rep, vdir, name=variant)
        rows.append((variant, rep))
    if all_failed:
        return 1
    table = metrics.format_table(rows)
    write_atomic(out_dir / "ablation.txt", table.encode("utf-8"))
    write_atomic(out_dir / "ablation.json", json.dumps(
        {name: rep.to_dict(include_timing=False) for name, rep in rows},
        indent=2, sort_keys=True).encode("utf-8"))
    print(table, end="")
    return 1 if any_failures else 0


def cmd_eval(args, values) -> int:
    out_dir = Path(args.out)
    names, scenarios = load_scenario_dir(Path(args.scenarios))
    by_name = dict(zip(names, scenarios))
    log_files = sorted(Path(args.logs).glob("*.jsonl"))
    if not log_files:
        print(f"no logs in {args.logs}", file=sys.stderr)
        return 2
    logs, kept_scenarios = [], []
    for f in log_files:
        if f.stem not in by_name:
            print(f"log {f.name} has no matching scenario", file=sys.stderr)
            return 2
        logs.append(load_log(f.read_bytes()))
        kept_scenarios.append(by_name[f.stem])
    reference = reference_samples(kept_scenarios)
    maps = [sc.map for sc in kept_scenarios]
    routes = [route_for_log(sc, log) for sc, log in zip(kept_scenarios, logs)]
    rep = metrics.report(logs, maps, reference, routes)
    write_report(rep, out_dir, name="eval")
    print(metrics.format_table([("eval", rep)]), end="")
    return 0


def _svg_polyline(points: np.ndarray, stroke: str, width: float, opacity: float = 1.0) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return (f'<polyline points="{pts}" fill="none" stroke="{stroke}" '
            f'stroke-width="{width:.2f}" stroke-opacity="{opacity:.2f}"/>')


def cmd_render(args, values) -> int:
    scenario = load_scenario(Path(args.scenario).read_bytes())
    log = load_log(Path(args.log).read_bytes())
    for aid in log.states:
        try:
            scenario.agent(aid)
        except KeyError:
            print(f"log agent {aid!r} not present in the scenario", file=sys.stderr)
            return 2

    colors = {"av": "#2ca02c", "ov": "#d62728", "bv": "#1f77b4"}
    parts = []
    all_pts = [lane.points[:, :2] for lane in scenario.map.lanes]
    for aid, states in log.states.items():
        all_pts.append(states[:, :2])
    bounds = np.vstack(all_pts)
    lo = bounds.min(axis=0) - 8.0
    hi = bounds.max(axis=0) + 8.0
    for lane in scenario.map.lanes:
        parts.append(_svg_polyline(lane.points[:, :2], "#cccccc", lane.width, 0.8))
        parts.append(_svg_polyline(lane.points[:, :2], "#888888", 0.15))
    for aid in sorted(log.states):
        rec = scenario.agent(aid)
        color = colors[rec.role]
        states = log.states[aid]
        parts.append(_svg_polyline(states[:, :2], color, 0.3))
        for i in range(0, states.shape[0], 5):
            x, y, heading = states[i]
            corners = kinematics.obb_corners(
                type("S", (), {"x": x, "y": y, "heading": heading})(), rec.length, rec.width)
            pts = " ".join(f"{cx:.2f},{cy:.2f}" for cx, cy in corners)
            opacity = 0.15 + 0.55 * (i / max(states.shape[0] - 1, 1))
            parts.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="{opacity:.2f}" '
                         f'stroke="{color}" stroke-width="0.05"/>')
    if log.collision_step is not None:
        cx, cy = log.states[log.av_id][log.collision_step, :2]
        parts.append(f'<g stroke="#000000" stroke-width="0.4">'
                     f'<line x1="{cx - 2:.2f}" y1="{cy - 2:.2f}" x2="{cx + 2:.2f}" y2="{cy + 2:.2f}"/>'
                     f'<line x1="{cx - 2:.2f}" y1="{cy + 2:.2f}" x2="{cx + 2:.2f}" y2="{cy - 2:.2f}"/></g>')

    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="{lo[0]:.2f} {lo[1]:.2f} {hi[0] - lo[0]:.2f} {hi[1] - lo[1]:.2f}">'
        f'<g transform="translate(0,{(lo[1] + hi[1]):.2f}) scale(1,-1)">'
        + "".join(parts) + "</g></svg>\n"
    )
    write_atomic(Path(args.out), svg.encode("utf-8"))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (section.key = value)")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--jobs", type=int, help="parallel scenario workers")

    parser = argparse.ArgumentParser(prog="adversim",
                                     description="Adversarial traffic scenario generation and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenarios", parents=[common])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--template", choices=TEMPLATES + ("all",), required=True)
    p.add_argument("--out", required=True)

    for name in ("generate", "ablate"):
        p = sub.add_parser(name, help=f"{name} over a scenario directory", parents=[common])
        p.add_argument("--scenarios", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--replan-hz", dest="replan_hz", type=float)
        p.add_argument("--mode", choices=(simulate.MODE_OPEN, simulate.MODE_CLOSED))
        p.add_argument("--intention-mode", dest="intention_mode",
                       choices=(simulate.INTENTION_OPTIMIZATION, simulate.INTENTION_HEURISTIC,
                                simulate.INTENTION_NONE))
        p.add_argument("--planner", choices=(simulate.PLANNER_PLAYBACK, simulate.PLANNER_RULE))
        p.add_argument("--ov-planner", dest="ov_planner",
                       choices=(simulate.OV_PLANNER_QUINTIC, simulate.OV_PLANNER_LEARNED,
                                simulate.OV_PLANNER_SEED))
        p.add_argument("--weights", help="learned planner weight file")
        p.add_argument("--d-thres", dest="d_thres", type=float)
        p.add_argument("--lambda", dest="lam", type=float)

    p = sub.add_parser("eval", help="metrics over existing logs", parents=[common])
    p.add_argument("--scenarios", required=True)
    p.add_argument("--logs", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render a rollout to SVG", parents=[common])
    p.add_argument("--scenario", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values = load_config(args.config, args)
        handler = {
            "synth": cmd_synth,
            "generate": cmd_generate,
            "ablate": cmd_ablate,
            "eval": cmd_eval,
            "render": cmd_render,
        }[args.command]
        return handler(args, values)
    except (ConfigError, ScenarioError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
