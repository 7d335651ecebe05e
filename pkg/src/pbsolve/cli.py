"""Command line interface: configuration, Born-ion meshes, runs and reports.

Usage: ``pbsolve <mode> --config <file>`` with modes solve, study, bench and
gen-born.  The configuration is a flat key=value text file; a handful of
flags override single keys.  All outputs are plain text; runs are fully
determined by the configuration (wall-clock times only appear in the
sidecar log unless timing is switched on).
"""

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapt import AmrOptions, MarkingConfig, amr_run
from .fespace import FESpace, lift_boundary
from .mesh import SOLUTE, SOLVENT, SimplicialMesh, read_mesh, write_mesh
from .mlsolve import (PreconditionerConfig, SolverError, build_level_stack,
                      complexity_report, make_preconditioner, pcg)
from .problem import (KBT_KCAL_PER_MOL_298K, NewtonError, PBEParameters,
                      assemble_lrpbe, boundary_potential, parse_pqr)

__all__ = ["RunConfig", "ConfigError", "generate_born_mesh", "run", "main"]

log = logging.getLogger("pbsolve")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def generate_born_mesh(half_width, radius, divisions):
    """Structured mesh of the cube [-L, L]^3 with a spherical solute label.

    Each of the n^3 subcubes is split into six tetrahedra sharing the cube
    diagonal (conforming across subcubes); an element is labeled SOLUTE iff
    its centroid lies within the given radius of the origin, so the labeled
    interface is a staircase approximation of the sphere that sharpens as
    ``divisions`` grows.
    """
    L, a, n = float(half_width), float(radius), int(divisions)
    if not 0 < a < L:
        raise ValueError(f"need 0 < radius < half_width, got {a}, {L}")
    if n < 2:
        raise ValueError("divisions must be at least 2")

    coords = np.linspace(-L, L, n + 1)
    X, Y, Z = np.meshgrid(coords, coords, coords, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    # six tetrahedra around the main diagonal c000 -> c111 of each subcube
    paths = [
        (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
    ]
    tets = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                base = np.array([i, j, k])
                for p in paths:
                    corners = [base.copy()]
                    for axis in p:
                        nxt = corners[-1].copy()
                        nxt[axis] += 1
                        corners.append(nxt)
                    tets.append([vid(*c) for c in corners])
    tets = np.asarray(tets, dtype=np.int64)

    p = vertices[tets]
    vols = np.linalg.det(p[:, 1:] - p[:, :1])
    flip = vols < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]

    centroids = vertices[tets].mean(axis=1)
    labels = np.where(np.linalg.norm(centroids, axis=1) <= a, SOLUTE, SOLVENT)
    mesh = SimplicialMesh(vertices, tets, labels.astype(np.int8))
    mesh.validate()
    return mesh


# configuration keys with defaults; None marks required-if-used paths
_DEFAULTS = {
    "mesh_file": "",
    "born_half_width": 12.0,
    "born_radius": 3.0,
    "born_divisions": 8,
    "pqr_file": "",
    "out": "out",
    "eps_m": 2.0,
    "eps_s": 80.0,
    "kappa_s": 0.0,
    "coulomb_constant": 0.0,       # 0 selects the built-in default
    "temperature": 298.15,
    "bc": "screened",
    "model": "nonlinear",
    "indicator": "energy",
    "marking": "global",
    "gamma": 0.5,
    "preconditioner": "mg",
    "pre_smooth": 2,
    "post_smooth": 2,
    "pcg_tol": 1e-8,
    "pcg_max_iter": 1000,
    "newton_tol": 1e-8,
    "newton_max_iter": 20,
    "max_levels": 5,
    "max_dof": 200000,
    "estimate_tol": 0.0,
    "sigma": 0.0,
    "erm_flux": "average",
    "bench_variants": "mg,hb,bek",
    "vtk": False,
    "timing": False,
}


@dataclass
class RunConfig:
    mode: str = "solve"
    values: dict = field(default_factory=lambda: dict(_DEFAULTS))

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def set(self, key, raw):
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        default = _DEFAULTS[key]
        try:
            if isinstance(default, bool):
                if str(raw).lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                self.values[key] = str(raw).lower() in ("true", "1")
            elif isinstance(default, int):
                self.values[key] = int(raw)
            elif isinstance(default, float):
                self.values[key] = float(raw)
            else:
                self.values[key] = str(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(path):
    """Read a flat key=value configuration file ('#' starts a comment)."""
    cfg = RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        cfg.set(key.strip(), raw.strip())
    return cfg


def born_label_rule(radius):
    """Centroid-in-sphere labeling rule of the Born-ion generator."""
    def rule(centroids):
        return np.where(np.linalg.norm(centroids, axis=1) <= radius,
                        SOLUTE, SOLVENT)
    return rule


def _load_problem(cfg):
    relabel = None
    if cfg.mesh_file:
        mesh = read_mesh(cfg.mesh_file)
    else:
        mesh = generate_born_mesh(cfg.born_half_width, cfg.born_radius,
                                  cfg.born_divisions)
        relabel = born_label_rule(cfg.born_radius)
    if not cfg.pqr_file:
        raise ConfigError("pqr_file is required for this mode")
    try:
        system = parse_pqr(Path(cfg.pqr_file).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read PQR file: {exc}") from None
    kwargs = dict(eps_m=cfg.eps_m, eps_s=cfg.eps_s, kappa_s=cfg.kappa_s,
                  temperature=cfg.temperature)
    if cfg.coulomb_constant > 0.0:
        kwargs["coulomb_constant"] = cfg.coulomb_constant
    params = PBEParameters(**kwargs)
    _check_margin(mesh, system)
    return mesh, system, params, relabel


def _check_margin(mesh, system):
    # the domain should contain the molecule with a margin of at least
    # twice its radius
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = system.positions.mean(axis=0)
    mol_r = (np.linalg.norm(system.positions - center, axis=1) + system.radii).max()
    margin = min((system.positions - lo).min(), (hi - system.positions).max(initial=0),
                 (hi - system.positions).min())
    if margin < 2.0 * mol_r:
        log.warning("domain margin %.2f A is below twice the molecular radius %.2f A",
                    margin, mol_r)


def _marking(cfg):
    return MarkingConfig(strategy=cfg.marking, gamma=cfg.gamma,
                         indicator=cfg.indicator)


def _precond(cfg):
    return PreconditionerConfig(variant=cfg.preconditioner,
                                pre_smooth=cfg.pre_smooth,
                                post_smooth=cfg.post_smooth)


def _options(cfg, relabel=None):
    return AmrOptions(max_levels=cfg.max_levels, max_dof=cfg.max_dof,
                      estimate_tol=cfg.estimate_tol, bc_kind=cfg.bc,
                      linear=(cfg.model.lower() == "linear"),
                      pcg_tol=cfg.pcg_tol, pcg_max_iter=cfg.pcg_max_iter,
                      newton_tol=cfg.newton_tol, newton_max_iter=cfg.newton_max_iter,
                      sigma=cfg.sigma, erm_flux=cfg.erm_flux, timing=cfg.timing,
                      relabel=relabel)


def _fmt(x):
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_study_csv(report, path):
    header = "level,N,dof,marked_m,marked_s,S_kBT,estimate,cg_iters,newton_iters,seconds"
    lines = [header]
    for r in report.rows:
        lines.append(",".join(_fmt(v) for v in (
            r.level, r.n_nodes, r.n_dofs, r.marked_solute, r.marked_solvent,
            r.energy_kbt, r.estimate, r.cg_iters, r.newton_iters, r.seconds)))
    Path(path).write_text("\n".join(lines) + "\n")


def write_bench_csv(rows, path):
    lines = ["level,variant,N,X,ratio,cg_iters"]
    for level, variant, n, x, ratio, iters in rows:
        lines.append(",".join(_fmt(v) for v in (level, variant, n, x, ratio, iters)))
    Path(path).write_text("\n".join(lines) + "\n")


def write_vtk(mesh, point_values, name, path):
    """Legacy ASCII VTK unstructured grid with one point-data scalar."""
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write("pbsolve field export\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_vertices} double\n")
        for x, y, z in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        f.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
        for t in mesh.tets:
            f.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        f.write(f"CELL_TYPES {mesh.n_tets}\n")
        f.write("\n".join(["10"] * mesh.n_tets) + "\n")
        f.write(f"POINT_DATA {mesh.n_vertices}\n")
        f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        for v in point_values:
            f.write(f"{v:.17g}\n")


def run_gen_born(cfg, outdir):
    mesh = generate_born_mesh(cfg.born_half_width, cfg.born_radius, cfg.born_divisions)
    path = outdir / "born.pbmesh"
    write_mesh(mesh, path)
    log.info("wrote %s (%d vertices, %d tets)", path, mesh.n_vertices, mesh.n_tets)
    return 0


def run_solve(cfg, outdir):
    mesh, system, params, relabel = _load_problem(cfg)
    result = amr_run(mesh, system, params, _marking(cfg), _precond(cfg),
                     _options(cfg, relabel))
    u = result.solution
    row = result.report.rows[-1]
    summary = [
        f"levels {len(result.report.rows)}",
        f"dofs {row.n_dofs}",
        f"S_kBT {_fmt(row.energy_kbt)}",
        f"S_kcal_mol {_fmt(row.energy_kbt * KBT_KCAL_PER_MOL_298K)}",
        f"estimate {_fmt(row.estimate)}",
        f"u_min {_fmt(float(u.values.min()))}",
        f"u_max {_fmt(float(u.values.max()))}",
    ]
    (outdir / "summary.txt").write_text("\n".join(summary) + "\n")
    write_study_csv(result.report, outdir / "study.csv")
    if cfg.vtk:
        mesh_f = result.hierarchy.finest
        write_vtk(mesh_f, u.values[:mesh_f.n_vertices], "reaction_potential",
                  outdir / "solution.vtk")
    return 0


def run_study(cfg, outdir):
    mesh, system, params, relabel = _load_problem(cfg)
    result = amr_run(mesh, system, params, _marking(cfg), _precond(cfg),
                     _options(cfg, relabel))
    write_study_csv(result.report, outdir / "study.csv")
    return 0


def run_bench(cfg, outdir):
    """Re-solve every level of the adaptive hierarchy under each requested
    preconditioner variant and record iteration counts and smoothing ratios."""
    mesh, system, params, relabel = _load_problem(cfg)
    options = _options(cfg, relabel)
    result = amr_run(mesh, system, params, _marking(cfg), _precond(cfg), options)
    hierarchy = result.hierarchy
    variants = [v.strip().upper() for v in cfg.bench_variants.split(",") if v.strip()]

    rows = []
    for variant in variants:
        pconf = PreconditionerConfig(variant=variant, pre_smooth=cfg.pre_smooth,
                                     post_smooth=cfg.post_smooth)
        stack = build_level_stack(hierarchy, params, pconf)
        ratios, _ = complexity_report(stack)
        for level in range(hierarchy.n_levels):
            sub = _truncate_stack(stack, level)
            space = FESpace(hierarchy.meshes[level], 1)
            A, b = assemble_lrpbe(space, system, params, bc_kind=options.bc_kind)
            x0 = lift_boundary(space, boundary_potential(system, params, options.bc_kind))
            M = make_preconditioner(sub)
            _, iters, _ = pcg(A, b, preconditioner=M, tol=options.pcg_tol,
                              max_iter=options.pcg_max_iter, x0=x0)
            _, n_j, x_j, ratio, _ = ratios[level]
            rows.append((level, variant, n_j, x_j, ratio, iters))
    write_bench_csv(rows, outdir / "bench.csv")
    return 0


def _truncate_stack(stack, level):
    from .mlsolve import LevelStack

    return LevelStack(stack.matrices[:level + 1], stack.prolongations[:level + 1],
                      stack.smooth_sets[:level + 1], stack.boundary_dofs[:level + 1],
                      stack.config, stack.fine_nodes[:level + 1])


def run(cfg, out_override=None):
    """Execute one run; returns the process exit status (0 ok, 1 numeric
    failure with partial artifacts, 2 configuration error)."""
    outdir = Path(out_override or cfg.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(outdir / "pbsolve.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        t0 = time.perf_counter()
        try:
            if cfg.mode == "gen-born":
                return run_gen_born(cfg, outdir)
            if cfg.mode == "solve":
                return run_solve(cfg, outdir)
            if cfg.mode == "study":
                return run_study(cfg, outdir)
            if cfg.mode == "bench":
                return run_bench(cfg, outdir)
            raise ConfigError(f"unknown mode {cfg.mode!r}")
        finally:
            log.info("total wall time %.2f s", time.perf_counter() - t0)
            log.removeHandler(handler)
            handler.close()
    except (ConfigError, FileNotFoundError) as exc:
        print(f"pbsolve: configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, NewtonError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"pbsolve: numerical failure: {exc}", file=sys.stderr)
        return 1


_OVERRIDES = {
    "gamma": "gamma",
    "indicator": "indicator",
    "marking": "marking",
    "preconditioner": "preconditioner",
    "max_levels": "max_levels",
    "max_dof": "max_dof",
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="pbsolve", description=__doc__)
    parser.add_argument("mode", choices=["solve", "study", "bench", "gen-born"])
    parser.add_argument("--config", required=True, help="key=value configuration file")
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--indicator")
    parser.add_argument("--marking")
    parser.add_argument("--preconditioner")
    parser.add_argument("--max-levels", type=int, dest="max_levels")
    parser.add_argument("--max-dof", type=int, dest="max_dof")
    parser.add_argument("--out")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"pbsolve: configuration error: {exc}", file=sys.stderr)
        return 2
    cfg.mode = args.mode
    for attr, key in _OVERRIDES.items():
        val = getattr(args, attr)
        if val is not None:
            cfg.set(key, str(val))
    return run(cfg, out_override=args.out)


if __name__ == "__main__":
    sys.exit(main())
