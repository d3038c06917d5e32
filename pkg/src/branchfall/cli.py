"""Command line entry points: run, validate, report.

Every run writes into its own fresh directory under the configured output
root: CSV payloads and JSON reports first, then a manifest with digests,
renamed into place atomically.  Payload bytes depend only on config + seed;
timestamps live in the manifest and the directory name alone.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .branching import BranchTree, ExplicitModel, branch_step, evolve_explicit, sample_trajectory
from .config import ConfigError, load_config, make_grid, make_potential, make_povm
from .dynamics import evolve, unitary_step
from .ehrenfest import WidthSeries, classicality_horizon, ehrenfest_residual
from .errors import BranchfallError, EscapeSampled
from .mechanisms import BohmEnsemble, GRWParams, bohm_evolve, grw_evolve
from .pointer import predictability_sieve
from .qstate import PhasePoint, coherent_state
from .reduction import ReductionSpec, verify_reduction

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_REDUCE_FAIL = 4


def _cell(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    f = float(value)
    if not math.isfinite(f):
        raise ValueError("non-finite value bound for CSV output")
    return "%.17g" % f


def _write_csv(path: str, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        f = float(value)
        return f if math.isfinite(f) else ("inf" if f > 0 else "-inf")
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    return value


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False))
        fh.write("\n")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _reject_constant(token):
    raise ValueError(f"non-finite number {token} in JSON output")


def _assert_finite_outputs(run_dir: str, names) -> None:
    """Defect scan: every number in every emitted file must be finite."""
    for name in names:
        path = os.path.join(run_dir, name)
        if name.endswith(".json"):
            with open(path, "r", encoding="utf-8") as fh:
                json.load(fh, parse_constant=_reject_constant)
        elif name.endswith(".csv"):
            with open(path, "r", encoding="utf-8") as fh:
                next(fh, None)
                for line in fh:
                    for cell in line.rstrip("\n").split(","):
                        try:
                            value = float(cell)
                        except ValueError:
                            continue
                        if not math.isfinite(value):
                            raise ValueError(f"non-finite value in {name}: {cell}")


def _new_run_dir(root: str, kind: str) -> str:
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = f"{stamp}-{kind}"
    for suffix in range(1000):
        name = base if suffix == 0 else f"{base}-{suffix}"
        path = os.path.join(root, name)
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            continue
    raise RuntimeError("could not allocate a fresh run directory")


def _write_manifest(run_dir: str, cfg: dict, started: str, results: dict) -> None:
    files = sorted(
        name for name in os.listdir(run_dir)
        if os.path.isfile(os.path.join(run_dir, name)) and name != "manifest.json"
    )
    manifest = {
        "artifact": "branchfall",
        "version": __version__,
        "kind": cfg["kind"],
        "seed": cfg["seed"],
        "config": _jsonable(cfg),
        "started_at": started,
        "finished_at": _utc_now(),
        "files": [
            {
                "name": name,
                "bytes": os.path.getsize(os.path.join(run_dir, name)),
                "sha256": _sha256(os.path.join(run_dir, name)),
            }
            for name in files
        ],
        "results": _jsonable(results),
    }
    tmp = os.path.join(run_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False))
        fh.write("\n")
    os.replace(tmp, os.path.join(run_dir, "manifest.json"))


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _packet(cfg, grid):
    return coherent_state(grid, cfg["q0"], cfg["p0"], cfg["sigma_x"])


def _run_evolve(cfg, run_dir):
    grid = make_grid(cfg)
    rec = evolve(
        _packet(cfg, grid).to_density(), make_potential(cfg), cfg["lambda"],
        cfg["dt"], cfg["n_steps"], cfg["record_every"],
    )
    cols = rec.as_columns()
    _write_csv(
        os.path.join(run_dir, "evolve.csv"), list(cols),
        zip(*cols.values()),
    )
    return {"rows": len(rec.times), "final_purity": float(rec.purity[-1])}, EXIT_OK


def _run_sieve(cfg, run_dir):
    grid = make_grid(cfg)
    result = predictability_sieve(
        grid, make_potential(cfg), cfg["lambda"], cfg["sigma_list"],
        PhasePoint(cfg["q0"], cfg["p0"]), cfg["horizon"], cfg["dt"],
    )
    _write_csv(
        os.path.join(run_dir, "sieve.csv"), ["sigma", "t", "s_lin"],
        result.csv_rows(),
    )
    return {"argmin_width": float(result.argmin_width)}, EXIT_OK


def _default_dt_int(cfg):
    dt_int = cfg["dt_int"]
    if dt_int is None:
        dt_int = cfg["dt"] / max(1, round(cfg["dt"] / 0.01))
    return dt_int


def _run_branch(cfg, run_dir):
    grid = make_grid(cfg)
    potential = make_potential(cfg)
    povm = make_povm(cfg, grid)
    tree = BranchTree.from_state(
        _packet(cfg, grid).to_density(), povm, cfg["dt"], cfg["prune_epsilon"]
    )
    for _ in range(cfg["n_steps"]):
        tree = branch_step(
            tree, potential, cfg["lambda"], _default_dt_int(cfg),
            cfg["escape_tol"], cfg["leaf_cap"],
        )
    rows = [
        ("/".join(str(a) for a in leaf["history"]), leaf["weight"],
         leaf["z"][0], leaf["z"][1])
        for leaf in tree.snapshot()
    ]
    _write_csv(
        os.path.join(run_dir, "branches.csv"),
        ["history", "weight", "z_q", "z_p"], rows,
    )
    summary = {
        "n_leaves": len(tree.leaves),
        "closure": tree.weight_closure(),
        "dropped_weight": tree.dropped_weight,
        "escape_weight": tree.escape_weight,
        "n_steps": tree.n_steps,
    }
    _write_json(os.path.join(run_dir, "branch.json"), summary)
    return summary, EXIT_OK


def _run_sample(cfg, run_dir):
    grid = make_grid(cfg)
    potential = make_potential(cfg)
    povm = make_povm(cfg, grid)
    rho0 = _packet(cfg, grid).to_density()
    rows = []
    escapes = []
    for tid in range(cfg["n_traj"]):
        seed = np.random.SeedSequence(entropy=cfg["seed"], spawn_key=(tid,))
        try:
            records, _ = sample_trajectory(
                rho0, potential, cfg["lambda"], povm, cfg["dt"], cfg["n_steps"],
                seed, dt_int=cfg["dt_int"],
            )
        except EscapeSampled as err:
            records = err.records
            escapes.append({"traj_id": tid, "t": float(err.time)})
        for t, alpha, z in records:
            rows.append((tid, t, -1 if alpha is None else alpha, z.q, z.p))
    _write_csv(
        os.path.join(run_dir, "trajectories.csv"),
        ["traj_id", "t", "alpha", "x", "p"], rows,
    )
    summary = {"n_traj": cfg["n_traj"], "n_escaped": len(escapes), "escapes": escapes}
    _write_json(os.path.join(run_dir, "sample.json"), summary)
    return {"n_traj": cfg["n_traj"], "n_escaped": len(escapes)}, EXIT_OK


def _run_explicit(cfg, run_dir):
    grid = make_grid(cfg)
    model = ExplicitModel.from_wavefunction(
        _packet(cfg, grid), cfg["couplings"], cfg["env_energies"]
    )
    model, report = evolve_explicit(
        model, make_potential(cfg), cfg["dt"], cfg["n_steps"], cfg["bins"]
    )
    reduced = model.reduced_density()
    _write_csv(
        os.path.join(run_dir, "explicit.csv"), ["x", "density"],
        zip(grid.x, reduced.position_density()),
    )
    payload = {
        "k": model.k,
        "bin_bounds": report.bin_bounds,
        "bin_mass": report.bin_mass,
        "bin_centroids": report.bin_centroids,
        "env_overlaps": report.env_overlaps,
        "consistency_ratios": report.consistency_ratios,
        "purity": float(np.real(np.trace(reduced.elements @ reduced.elements)) * grid.dx**2),
    }
    _write_json(os.path.join(run_dir, "explicit.json"), payload)
    return {"k": model.k}, EXIT_OK


def _run_grw(cfg, run_dir):
    grid = make_grid(cfg)
    run = grw_evolve(
        _packet(cfg, grid), make_potential(cfg),
        GRWParams(cfg["hit_rate"], cfg["r_c"]), cfg["total_time"],
        cfg["seed"], cfg["dt_int"],
    )
    _write_csv(os.path.join(run_dir, "hits.csv"), ["t", "x0"], run.hit_rows())
    summary = {"n_hits": len(run.hits), "total_time": run.total_time}
    _write_json(os.path.join(run_dir, "grw.json"), summary)
    return summary, EXIT_OK


def _run_bohm(cfg, run_dir):
    grid = make_grid(cfg)
    potential = make_potential(cfg)
    n_snap = max(1, int(round(cfg["total_time"] / cfg["dt"])))
    psi = _packet(cfg, grid)
    snapshots = [psi]
    for _ in range(n_snap):
        psi = unitary_step(psi, potential, cfg["dt"])
        snapshots.append(psi)
    times = np.arange(n_snap + 1) * cfg["dt"]
    ensemble = BohmEnsemble.from_state(snapshots[0], cfg["n_traj"], cfg["seed"])
    run = bohm_evolve(ensemble, snapshots, times, cfg["ode_dt"], cfg["checkpoints"])
    _write_csv(
        os.path.join(run_dir, "bohm.csv"), ["traj_id", "t", "x"],
        run.trajectory_rows(),
    )
    summary = {
        "n_traj": cfg["n_traj"],
        "n_flagged": int(np.sum(run.node_flags)),
        "ks_distances": {"%.6g" % t: v for t, v in run.ks_distances.items()},
    }
    _write_json(os.path.join(run_dir, "bohm.json"), summary)
    return {"worst_ks": max(run.ks_distances.values())}, EXIT_OK


def _run_ehrenfest(cfg, run_dir):
    grid = make_grid(cfg)
    potential = make_potential(cfg)
    rec = evolve(
        _packet(cfg, grid).to_density(), potential, cfg["lambda"],
        cfg["dt"], cfg["n_steps"], cfg["record_every"],
    )
    cols = rec.as_columns()
    _write_csv(os.path.join(run_dir, "evolve.csv"), list(cols), zip(*cols.values()))
    res = ehrenfest_residual(rec, potential).as_columns()
    _write_csv(os.path.join(run_dir, "residual.csv"), list(res), zip(*res.values()))
    widths = WidthSeries.from_record(rec)
    wcols = widths.as_columns()
    _write_csv(os.path.join(run_dir, "widths.csv"), list(wcols), zip(*wcols.values()))
    horizon = classicality_horizon(widths, (cfg["delta_x"], cfg["delta_p"]), cfg["l_v"])
    _write_json(os.path.join(run_dir, "horizon.json"), horizon.as_json())
    return {"horizon": horizon.as_json()}, EXIT_OK


def _run_reduce(cfg, run_dir):
    grid = make_grid(cfg)
    spec = ReductionSpec(
        delta_z=(cfg["delta_x"], cfg["delta_p"]),
        tau_c=cfg["tau_c"],
        d_c=tuple(PhasePoint(q, p) for q, p in cfg["d_c"]),
        epsilon=cfg["epsilon"],
        n_traj=cfg["n_traj"],
        dt=cfg["dt"],
        dt_int=cfg["dt_int"],
        potential=make_potential(cfg),
        lambda_rate=cfg["lambda"],
        povm=make_povm(cfg, grid),
        sigma_x=cfg["sigma_x"],
        l_v=cfg["l_v"],
    )
    report = verify_reduction(spec, cfg["seed"])
    with open(os.path.join(run_dir, "reduction.json"), "wb") as fh:
        fh.write(report.to_json_bytes())
        fh.write(b"\n")
    results = {"verdict": report.verdict, "horizon_T": report.as_json()["horizon_T"]}
    return results, EXIT_OK if report.verdict == "PASS" else EXIT_REDUCE_FAIL


_RUNNERS = {
    "evolve": _run_evolve,
    "sieve": _run_sieve,
    "branch": _run_branch,
    "sample": _run_sample,
    "explicit": _run_explicit,
    "grw": _run_grw,
    "bohm": _run_bohm,
    "ehrenfest": _run_ehrenfest,
    "reduce": _run_reduce,
}


def cmd_run(config_path: str) -> int:
    try:
        cfg = load_config(config_path)
    except OSError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    started = _utc_now()
    run_dir = _new_run_dir(cfg["out"], cfg["kind"])
    try:
        results, code = _RUNNERS[cfg["kind"]](cfg, run_dir)
        names = [n for n in os.listdir(run_dir) if n != "manifest.json"]
        _assert_finite_outputs(run_dir, names)
    except BranchfallError as err:
        print(f"numerical abort: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    results["exit_code"] = code
    _write_manifest(run_dir, cfg, started, results)
    print(run_dir)
    return code


def cmd_validate(config_path: str) -> int:
    try:
        cfg = load_config(config_path)
    except OSError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: kind={cfg['kind']} seed={cfg['seed']}")
    return EXIT_OK


def cmd_report(run_dir: str) -> int:
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.isfile(path):
        print(f"no manifest found in {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    print(f"kind:      {manifest['kind']}")
    print(f"seed:      {manifest['seed']}")
    print(f"version:   {manifest['version']}")
    print(f"started:   {manifest['started_at']}")
    print(f"finished:  {manifest['finished_at']}")
    print("files:")
    for entry in manifest["files"]:
        print(f"  {entry['name']:20s} {entry['bytes']:>10d}  {entry['sha256'][:16]}")
    results = manifest.get("results", {})
    if results:
        print("results:")
        for key, value in sorted(results.items()):
            print(f"  {key} = {value}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="branchfall",
        description="Open-system branching experiments: run, validate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to a key = value config file")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config", help="path to a key = value config file")
    p_rep = sub.add_parser("report", help="pretty-print a run directory manifest")
    p_rep.add_argument("run_dir", help="runs/<id> directory")
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "validate":
        return cmd_validate(args.config)
    return cmd_report(args.run_dir)


if __name__ == "__main__":
    sys.exit(main())
