"""Batch front end: config parsing, run modes, artifact output.

Configuration is an INI file (sections below) or a manifest.json written by
a previous run; every run writes a manifest.json from which it can be
reproduced exactly.

    [case]          id, resolution, t, U0, geometry overrides
    [fluid]         rho, eta, alpha_s, alpha_f, q, tangential_penalty,
                    lambda_direction_sign
    [filters]       r_f, r_m, A_d, xi
    [optimization]  s0, v0, omega, n_max, beta_init, beta_double_every,
                    beta_cap, stall_tol, volume_tol, move
    [run]           mode (optimize | gradcheck | forward_only), output_dir,
                    threads, seed, gradcheck_directions, gradcheck_step

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys

import numpy as np

from . import __version__, fields, flow, mesh as mesh_mod, optimizer, problem

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

_CASE_FLOAT_PARAMS = ("channel_width", "stub_length", "inlet_center",
                      "outlet_center", "length", "height", "width")

DEFAULT_CONFIG = {
    "case": {"id": "bending_channel", "resolution": 24, "t": 0.0, "U0": 1.0},
    "fluid": {"rho": 1.0, "eta": 1.0, "alpha_s": None, "alpha_f": 0.0,
              "q": 1.0, "tangential_penalty": 0.0,
              "lambda_direction_sign": -1},
    "filters": {"r_f": 1.0 / 50.0, "r_m": 2.0 / 25.0, "A_d": 0.0,
                "xi": 0.5},
    "optimization": {"s0": 0.3, "v0": 0.0, "omega": 0.9, "n_max": 240,
                     "beta_init": 1.0, "beta_double_every": 30,
                     "beta_cap": 128.0, "stall_tol": 1.0e-3,
                     "volume_tol": 1.0e-3, "move": 0.2},
    "run": {"mode": "optimize", "output_dir": "out", "threads": 1,
            "seed": 0, "gradcheck_directions": 5, "gradcheck_step": 1.0e-5},
}


class ConfigError(ValueError):
    pass


def _coerce(value):
    if isinstance(value, str):
        low = value.strip()
        try:
            return int(low)
        except ValueError:
            pass
        try:
            return float(low)
        except ValueError:
            pass
        if "," in low:
            return [_coerce(part) for part in low.split(",")]
        return low
    return value


def load_config(path):
    """Read an INI config or a manifest.json; returns the resolved dict."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    resolved = json.loads(json.dumps(DEFAULT_CONFIG))
    if path.endswith(".json"):
        with open(path) as fh:
            data = json.load(fh)
        data = data.get("config", data)
        for section, values in data.items():
            if section not in resolved:
                resolved[section] = {}
            resolved[section].update(values)
        return resolved
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in resolved:
            resolved[section] = {}
        for key, raw in parser.items(section):
            resolved[section][key] = _coerce(raw)
    return resolved


def build_problem(config):
    """Instantiate mesh + pipeline from a resolved config dict."""
    case_cfg = dict(config["case"])
    case_id = case_cfg.pop("id")
    resolution = int(case_cfg.pop("resolution"))
    t = float(case_cfg.pop("t", 0.0))
    U0 = float(case_cfg.pop("U0", 1.0))
    params = {}
    for key, val in case_cfg.items():
        if key == "solid_band":
            params[key] = tuple(val) if isinstance(val, list) else val
        elif key == "port_centers":
            params[key] = tuple(val) if isinstance(val, list) else (val,)
        elif key in _CASE_FLOAT_PARAMS:
            params[key] = float(val)
        else:
            params[key] = val
    spec = mesh_mod.CaseSpec(case_id=case_id, resolution=resolution, U0=U0,
                             t=t, params=params)
    try:
        msh = mesh_mod.build_case(spec)
    except mesh_mod.MeshError as exc:
        raise ConfigError(str(exc)) from exc

    fl = config["fluid"]
    fluid = flow.FluidParams(
        rho=float(fl["rho"]), eta=float(fl["eta"]), U0=U0,
        alpha_s=(None if fl.get("alpha_s") in (None, "", "none")
                 else float(fl["alpha_s"])),
        alpha_f=float(fl.get("alpha_f", 0.0)), q=float(fl.get("q", 1.0)),
        tangential_penalty=float(fl.get("tangential_penalty", 0.0)),
        lambda_direction_sign=int(fl.get("lambda_direction_sign", -1)))
    ft = config["filters"]
    filters = fields.FilterParams(
        r_f=float(ft["r_f"]), r_m=float(ft["r_m"]), A_d=float(ft["A_d"]),
        beta=float(config["optimization"].get("beta_init", 1.0)),
        xi=float(ft.get("xi", 0.5)))
    omega = float(config["optimization"].get("omega", 0.9))
    return problem.SurfaceFlowProblem(msh, fluid, filters, omega=omega)


def optimization_config(config):
    oc = config["optimization"]
    return optimizer.OptimizationConfig(
        s0=float(oc["s0"]), v0=float(oc["v0"]), n_max=int(oc["n_max"]),
        beta_init=float(oc.get("beta_init", 1.0)),
        beta_double_every=int(oc.get("beta_double_every", 30)),
        beta_cap=float(oc.get("beta_cap", 128.0)),
        stall_tol=float(oc.get("stall_tol", 1.0e-3)),
        volume_tol=float(oc.get("volume_tol", 1.0e-3)),
        move=float(oc.get("move", 0.2)))


# ---------------------------------------------------------------------------
# VTK export
# ---------------------------------------------------------------------------

def _q1_to_q2_nodal(msh, values_q1):
    """Interpolate a Q1 nodal field to all Q2 nodes (bilinear per element)."""
    from . import fem
    ref = fem.Q2_NODES
    n1, _ = fem.q1_shape(ref[:, 0], ref[:, 1])
    out = np.zeros(msh.n_q2)
    vals = np.einsum("na,ea->en", n1, values_q1[msh.quads_q1])
    out[msh.quads_q2.ravel()] = vals.ravel()
    return out


def export_fields(path, msh, design, state, beta=1.0, xi=0.5,
                  displaced=False):
    """Legacy ASCII VTK unstructured grid with nodal point data.

    With displaced=True the points move to the offset surface
    x + d_f * n_sigma.
    """
    pts = msh.nodes_q2.copy()
    if displaced:
        pts = pts + design.d_f[:, None] * msh.node_normal
    cells = msh.vtk_cells()
    gamma_q2 = _q1_to_q2_nodal(msh, design.gamma)
    gamma_f_q2 = _q1_to_q2_nodal(msh, design.gamma_f)
    gamma_p_q2 = fields.project(gamma_f_q2, beta, xi)
    fluid_nodes = np.unique(
        msh.quads_q2[msh.elem_domain == mesh_mod.DOMAIN_FLUID])
    gamma_p_q2[fluid_nodes] = 1.0
    p_q2 = _q1_to_q2_nodal(msh, state.p)
    lam_q2 = _q1_to_q2_nodal(msh, state.lam)
    scalars = [("gamma", gamma_q2), ("gamma_f", gamma_f_q2),
               ("gamma_p", gamma_p_q2), ("d_m", design.d_m),
               ("d_f", design.d_f), ("p", p_q2), ("lambda", lam_q2)]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("manifold-topopt fields\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(pts)} double\n")
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        fh.write(f"CELLS {len(cells)} {5 * len(cells)}\n")
        for quad in cells:
            fh.write("4 " + " ".join(str(int(i)) for i in quad) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write("\n".join(["9"] * len(cells)) + "\n")
        fh.write(f"POINT_DATA {len(pts)}\n")
        for name, arr in scalars:
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for val in arr:
                fh.write(f"{float(val)!r}\n")
        fh.write("VECTORS u double\n")
        for x, y, z in state.u:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
    return path


# ---------------------------------------------------------------------------
# run modes
# ---------------------------------------------------------------------------

def _write_manifest(outdir, config, extra=None):
    import scipy
    manifest = {
        "tool": "manifold-topopt",
        "version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "config": config,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _history_writer(outdir):
    fh = open(os.path.join(outdir, "history.csv"), "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["iter", "J", "Jn", "s", "v", "beta", "newton_iters"])

    def write(rec, fw):
        writer.writerow([rec.iteration, repr(float(rec.J)),
                         repr(float(rec.J_normalized)), repr(float(rec.s)),
                         repr(float(rec.v)), repr(float(rec.beta)),
                         rec.newton_iters])
        fh.flush()

    return fh, write


def run_optimize(prob, config, outdir):
    ocfg = optimization_config(config)
    fh, write_rec = _history_writer(outdir)

    def checkpoint(iteration, beta, gamma, d_m):
        np.savez(os.path.join(outdir, f"checkpoint_{iteration:04d}.npz"),
                 iteration=iteration, beta=beta, gamma=gamma, d_m=d_m)

    try:
        gamma, d_m, fw, history, reason = optimizer.run_loop(
            prob, ocfg, on_iteration=write_rec, on_checkpoint=checkpoint)
    finally:
        fh.close()
    export_fields(os.path.join(outdir, f"fields_{len(history):04d}.vtk"),
                  prob.mesh, fw.design, fw.state,
                  beta=prob.filters.beta, xi=prob.filters.xi)
    export_fields(
        os.path.join(outdir, f"fields_{len(history):04d}_offset.vtk"),
        prob.mesh, fw.design, fw.state, beta=prob.filters.beta,
        xi=prob.filters.xi, displaced=True)
    print(f"optimize: {reason} after {len(history)} iterations, "
          f"J/J0 = {history[-1].J_normalized:.6g}, s = {history[-1].s:.4f}, "
          f"v = {history[-1].v:.6f}")
    return EXIT_OK


def run_forward_only(prob, config, outdir):
    ocfg = optimization_config(config)
    gamma, d_m = prob.initial_design(ocfg.s0, ocfg.v0)
    fw = prob.forward(gamma, d_m)
    export_fields(os.path.join(outdir, "fields_0000.vtk"), prob.mesh,
                  fw.design, fw.state, beta=prob.filters.beta,
                  xi=prob.filters.xi)
    export_fields(os.path.join(outdir, "fields_0000_offset.vtk"), prob.mesh,
                  fw.design, fw.state, beta=prob.filters.beta,
                  xi=prob.filters.xi, displaced=True)
    fh, write_rec = _history_writer(outdir)
    rec = optimizer.IterationRecord(
        iteration=1, J=fw.J, J_normalized=1.0, s=fw.s, v=fw.v,
        beta=prob.filters.beta, area_residual=fw.s - ocfg.s0,
        volume_residual=fw.v - ocfg.v0,
        newton_iters=fw.state.newton_iters)
    write_rec(rec, fw)
    fh.close()
    print(f"forward_only: J = {fw.J:.6e} (dissipation {fw.J_dissipation:.6e},"
          f" pressure drop {fw.J_pressure_drop:.6e}), s = {fw.s:.4f}, "
          f"v = {fw.v:.6f}")
    return EXIT_OK


def run_gradcheck(prob, config, outdir):
    run_cfg = config["run"]
    ocfg = optimization_config(config)
    seed = int(run_cfg.get("seed", 0))
    n_dir = int(run_cfg.get("gradcheck_directions", 5))
    step = float(run_cfg.get("gradcheck_step", 1.0e-5))
    gamma, d_m = _gradcheck_design(prob, ocfg, seed)
    _export_sensitivities(prob, gamma, d_m, outdir)
    rows = problem.gradient_check(prob, gamma, d_m, n_directions=n_dir,
                                  h=step, seed=seed)
    path = os.path.join(outdir, "gradcheck.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["response", "variable", "direction", "analytic",
                         "fd", "rel_err"])
        for row in rows:
            writer.writerow([row["response"], row["variable"],
                             row["direction"], repr(float(row["analytic"])),
                             repr(float(row["fd"])),
                             repr(float(row["rel_err"]))])
    worst = max(row["rel_err"] for row in rows)
    print(f"gradcheck: {len(rows)} rows, worst rel_err = {worst:.3e}")
    return EXIT_OK if worst <= 1.0e-3 else EXIT_SOLVER


def _export_sensitivities(prob, gamma, d_m, outdir):
    """Dump the nodal sensitivity fields for visual inspection."""
    fw = prob.forward(gamma, d_m)
    sens = prob.sensitivities(fw)
    msh = prob.mesh
    arrays = []
    for resp in ("J", "s", "v"):
        arrays.append((f"d{resp}_dgamma",
                       _q1_to_q2_nodal(msh, sens[resp].wrt_gamma)))
        arrays.append((f"d{resp}_ddm", sens[resp].wrt_dm))
    path = os.path.join(outdir, "sensitivities.vtk")
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("manifold-topopt sensitivities\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        pts = msh.nodes_q2
        cells = msh.vtk_cells()
        fh.write(f"POINTS {len(pts)} double\n")
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        fh.write(f"CELLS {len(cells)} {5 * len(cells)}\n")
        for quad in cells:
            fh.write("4 " + " ".join(str(int(i)) for i in quad) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write("\n".join(["9"] * len(cells)) + "\n")
        fh.write(f"POINT_DATA {len(pts)}\n")
        for name, arr in arrays:
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for val in arr:
                fh.write(f"{float(val)!r}\n")
    return path


def _gradcheck_design(prob, ocfg, seed):
    """Deterministic non-trivial design point for derivative verification."""
    msh = prob.mesh
    gamma, d_m = prob.initial_design(ocfg.s0, ocfg.v0)
    xy1 = msh.nodes_q1
    xy2 = msh.nodes_q2
    gamma = gamma.copy()
    gamma[prob.design_mask] = np.clip(
        ocfg.s0 + 0.25 * np.sin(3.0 * xy1[prob.design_mask, 0] + seed)
        * np.cos(2.0 * xy1[prob.design_mask, 1]), 0.05, 0.95)
    d_m = np.clip(0.5 + 0.3 * np.sin(2.0 * xy2[:, 0] + 1.0 + seed)
                  * np.sin(2.0 * xy2[:, 1]), 0.05, 0.95)
    return gamma, d_m


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="manifold-topopt",
        description="Topology optimization of surface flows on offset "
                    "2-manifolds")
    ap.add_argument("--config", required=True, help="INI config or manifest.json")
    ap.add_argument("--mode", choices=("optimize", "gradcheck",
                                       "forward_only"))
    ap.add_argument("--output-dir")
    ap.add_argument("--case", help="override case id")
    ap.add_argument("--max-iters", type=int)
    ap.add_argument("--threads", type=int)
    args = ap.parse_args(argv)

    try:
        config = load_config(args.config)
        if args.mode:
            config["run"]["mode"] = args.mode
        if args.output_dir:
            config["run"]["output_dir"] = args.output_dir
        if args.case:
            config["case"]["id"] = args.case
        if args.max_iters is not None:
            config["optimization"]["n_max"] = args.max_iters
        if args.threads is not None:
            config["run"]["threads"] = args.threads
        elif "MANIFOLD_TOPOPT_THREADS" in os.environ:
            config["run"]["threads"] = int(
                os.environ["MANIFOLD_TOPOPT_THREADS"])
        _limit_threads(int(config["run"].get("threads", 1)))
        mode = config["run"]["mode"]
        if mode not in ("optimize", "gradcheck", "forward_only"):
            raise ConfigError(f"unknown mode {mode!r}")
        outdir = config["run"]["output_dir"]
        os.makedirs(outdir, exist_ok=True)
        prob = build_problem(config)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    _write_manifest(outdir, config)
    try:
        if mode == "optimize":
            return run_optimize(prob, config, outdir)
        if mode == "forward_only":
            return run_forward_only(prob, config, outdir)
        return run_gradcheck(prob, config, outdir)
    except flow.SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _limit_threads(n):
    """Best-effort cap on BLAS threading (assembly itself is sequential)."""
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=max(1, n))
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(max(1, n)))


if __name__ == "__main__":
    sys.exit(main())
