"""Three-step pipeline over a run directory.

Layout of a run directory::

    manifest.json      parameters and per-subdomain status
    mesh.txt           the global mesh
    partition.txt      one zero-based label per node
    in/submesh_NNNN.npz
    out/basis_NNNN.npz     written by workers
    out/error_NNNN.json    diagnostic record of a failed worker
    report.txt, solution.txt, reduced_matrix.coo, reduced_rhs.txt

The master is the only writer of the manifest.  Workers are separate
processes that read one submesh file and write one basis file.  Completion
is detected from the files themselves, so a killed run resumes where it
stopped.
"""
from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import files
from .assembly import assemble_load, assemble_stiffness, resolve_coefficient, resolve_load, solve_full
from .decomposition import build_overlap, decompose, extract_submesh, interface_dofs, read_partition, write_partition
from .local import DEFAULT_EXPLICIT_CAP, LocalProblem, reduce_subdomain
from .mesh import Mesh, export_mesh, generate_unit_cube_mesh, import_mesh
from .projection import assemble_interface, assemble_reduced
from .reduced import SolveReport, condition_estimate, energy_error, pcg_jacobi, reconstruct, reduction_error

log = logging.getLogger(__name__)

PENDING, DONE, FAILED = "pending", "done", "failed"


class PipelineError(RuntimeError):
    pass


def load_mesh(source: str) -> Mesh:
    """A mesh file path, or ``cube:<N>`` / ``square:<N>`` for a generated lattice."""
    for prefix, dim in (("cube:", 3), ("square:", 2)):
        if source.startswith(prefix):
            try:
                n = int(source[len(prefix):])
            except ValueError:
                raise PipelineError(f"bad mesh source {source!r}; expected {prefix}<divisions>") from None
            return generate_unit_cube_mesh(n, dimension=dim)
    if not Path(source).is_file():
        raise PipelineError(f"mesh file {source!r} not found")
    return import_mesh(source)


def subdomain_seed(master_seed: int, i: int) -> list:
    return [int(master_seed), int(i)]


# -- step 1 -----------------------------------------------------------------


def cmd_partition(mesh_source: str, n: int, r_hops: int, out_dir, seed: int = 0, epsilon: float = 1e-2,
                  method: str = "randomized", sketch_divisor: int = 8, coefficient: Optional[str] = None,
                  load: Optional[str] = "unit_energy", explicit_cap: int = DEFAULT_EXPLICIT_CAP) -> dict:
    if n < 1:
        raise PipelineError("n must be >= 1")
    if method not in ("explicit", "randomized"):
        raise PipelineError(f"unknown method {method!r}")
    if epsilon <= 0:
        raise PipelineError("epsilon must be positive")
    resolve_coefficient(coefficient)
    resolve_load(load)
    out = Path(out_dir)
    try:
        (out / "in").mkdir(parents=True, exist_ok=True)
        (out / "out").mkdir(exist_ok=True)
    except OSError as exc:
        raise PipelineError(f"cannot create run directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PipelineError(f"run directory {out} is not writable")
    mesh = load_mesh(mesh_source)
    if n > mesh.n_free:
        raise PipelineError(f"n={n} exceeds the {mesh.n_free} free nodes of the mesh")
    dec = decompose(mesh, n, r_hops, seed=seed)
    export_mesh(mesh, out / "mesh.txt")
    write_partition(out / "partition.txt", dec.labels)
    iface = interface_dofs(mesh, dec)
    subs = []
    for i in range(n):
        rel = f"in/submesh_{i:04d}.npz"
        files.write_submesh(out / rel, extract_submesh(mesh, dec, i, iface))
        subs.append({"id": i, "status": PENDING, "submesh": rel, "basis": None})
    manifest = {
        "run_id": uuid.uuid5(uuid.NAMESPACE_URL, f"{mesh_source}|{n}|{r_hops}|{seed}").hex,
        "mesh": "mesh.txt",
        "mesh_source": mesh_source,
        "n": n,
        "r_hops": r_hops,
        "epsilon": epsilon,
        "method": method,
        "sketch_divisor": sketch_divisor,
        "seed": seed,
        "coefficient": coefficient or "one",
        "load": load or "unit_energy",
        "explicit_cap": explicit_cap,
        "n_dofs": int(mesh.n_free),
        "subdomains": subs,
    }
    files.write_json(out / "manifest.json", manifest)
    return manifest


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise PipelineError(f"{run_dir} is not a run directory (no manifest.json)")
    return files.read_json(path)


# -- step 2 -----------------------------------------------------------------


def basis_path(i: int) -> str:
    return f"out/basis_{i:04d}.npz"


def error_path(i: int) -> str:
    return f"out/error_{i:04d}.json"


def run_worker(submesh_path, basis_out, epsilon, method, seed, coefficient=None, load=None, sketch_divisor=8,
               explicit_cap=DEFAULT_EXPLICIT_CAP) -> int:
    """Reduce one subdomain; on failure write a diagnostic record next to the basis path."""
    basis_out = Path(basis_out)
    sub = None
    try:
        sub = files.read_submesh(submesh_path)
        basis = reduce_subdomain(
            sub, epsilon, method=method, coefficient=resolve_coefficient(coefficient), load=resolve_load(load),
            sketch_divisor=sketch_divisor, seed=seed, max_boundary=explicit_cap,
        )
        files.write_basis(basis_out, basis)
        return 0
    except Exception as exc:  # noqa: BLE001  the record is the error channel
        rec = {"subdomain": None if sub is None else sub.subdomain, "error": type(exc).__name__,
               "message": str(exc), "submesh": str(submesh_path)}
        err = basis_out.with_name(basis_out.name.replace("basis_", "error_").replace(".npz", ".json"))
        files.write_json(err, rec)
        log.error("worker for %s failed: %s", submesh_path, exc)
        return 1


def _worker_command(run_dir: Path, man: dict, i: int) -> list:
    return [
        sys.executable, "-m", "ddrom.cli", "worker",
        "--submesh", str(run_dir / man["subdomains"][i]["submesh"]),
        "--basis", str(run_dir / basis_path(i)),
        "--epsilon", repr(man["epsilon"]),
        "--method", man["method"],
        "--seed", str(man["seed"]),
        "--subdomain", str(i),
        "--sketch-divisor", str(man["sketch_divisor"]),
        "--coefficient", man["coefficient"],
        "--load", man["load"],
        "--explicit-cap", str(man["explicit_cap"]),
    ]


def _reconcile(run_dir: Path, man: dict) -> None:
    """Adopt basis files finished by workers of an interrupted run and drop their temporaries."""
    for tmp in (run_dir / "out").glob(".basis_*.tmp"):
        tmp.unlink(missing_ok=True)
    for rec in man["subdomains"]:
        if rec["status"] != DONE and (run_dir / basis_path(rec["id"])).is_file():
            rec["status"], rec["basis"] = DONE, basis_path(rec["id"])


def cmd_reduce(run_dir, workers: int = 1, subdomains: Optional[Sequence[int]] = None, retry_failed: bool = False,
               in_process: bool = False, max_launch: Optional[int] = None) -> dict:
    """Reduce every pending subdomain (or those in ``subdomains``) with ``workers`` processes.

    ``max_launch`` stops after that many workers were started, which is how
    tests simulate an interrupted run.
    """
    run_dir = Path(run_dir)
    man = read_manifest(run_dir)
    if workers < 1:
        raise PipelineError("workers must be >= 1")
    _reconcile(run_dir, man)
    wanted = set(range(man["n"])) if subdomains is None else set(int(i) for i in subdomains)
    bad = sorted(i for i in wanted if not 0 <= i < man["n"])
    if bad:
        raise PipelineError(f"subdomain ids {bad} out of range 0..{man['n'] - 1}")
    todo = [r["id"] for r in man["subdomains"]
            if r["id"] in wanted and (r["status"] == PENDING or (retry_failed and r["status"] == FAILED))]
    if max_launch is not None:
        todo = todo[:max_launch]
    files.write_json(run_dir / "manifest.json", man)

    def finish(i: int, code: int) -> None:
        rec = man["subdomains"][i]
        if code == 0 and (run_dir / basis_path(i)).is_file():
            rec["status"], rec["basis"] = DONE, basis_path(i)
            (run_dir / error_path(i)).unlink(missing_ok=True)
        else:
            rec["status"] = FAILED
            rec["error"] = error_path(i) if (run_dir / error_path(i)).is_file() else f"exit code {code}"
        files.write_json(run_dir / "manifest.json", man)

    if in_process:
        for i in todo:
            finish(i, run_worker(
                run_dir / man["subdomains"][i]["submesh"], run_dir / basis_path(i), man["epsilon"], man["method"],
                subdomain_seed(man["seed"], i), man["coefficient"], man["load"], man["sketch_divisor"],
                man["explicit_cap"],
            ))
        return man

    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    queue = list(todo)
    running = {}
    while queue or running:
        while queue and len(running) < workers:
            i = queue.pop(0)
            running[i] = subprocess.Popen(_worker_command(run_dir, man, i), env=env,
                                          stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
        for i, proc in list(running.items()):
            if proc.poll() is not None:
                err = proc.stderr.read().decode(errors="replace") if proc.stderr else ""
                proc.stderr.close()
                if proc.returncode != 0:
                    log.error("subdomain %d failed (exit %d): %s", i, proc.returncode, err.strip()[-500:])
                finish(i, proc.returncode)
                del running[i]
        if running:
            time.sleep(0.02)
    return man


# -- step 3 -----------------------------------------------------------------


@dataclass
class RunState:
    mesh: Mesh
    decomposition: object
    bases: list
    manifest: dict


def load_run(run_dir) -> RunState:
    run_dir = Path(run_dir)
    man = read_manifest(run_dir)
    _reconcile(run_dir, man)
    missing = [r["id"] for r in man["subdomains"] if r["status"] != DONE]
    if missing:
        raise PipelineError(f"reduction incomplete; missing subdomains {missing}")
    mesh = import_mesh(run_dir / man["mesh"])
    dec = build_overlap(mesh, read_partition(run_dir / "partition.txt"))
    bases = [files.read_basis(run_dir / r["basis"]) for r in man["subdomains"]]
    return RunState(mesh, dec, bases, man)


def full_problem(mesh: Mesh, coefficient=None, load=None):
    free = mesh.free_nodes
    A = assemble_stiffness(mesh, free, coefficient=coefficient)
    b = assemble_load(mesh, load, free)
    return free, A, b


def solve_reduced(mesh, dec, bases, coefficient=None, load_name="unit_energy", tol=1e-10, reference=None,
                  kappa: bool = False, workers: int = 1) -> tuple:
    """Project and solve; ``reference`` is an optional (free, A, u) full solution."""
    A0 = assemble_interface(mesh, dec.interface_elements, coefficient=coefficient)
    red = assemble_reduced(bases, A0, dec.neighbor_pairs, workers=workers)
    x, it, res = pcg_jacobi(red.matrix, red.rhs, tol=tol)
    u_tilde = reconstruct(x, bases, red.offsets, mesh.n_vertices)
    rep = SolveReport(x=x, iterations=it, residual=res, dim_full=int(mesh.n_free), dim_reduced=red.dim,
                      nnz_reduced=int(red.matrix.nnz))
    if load_name == "unit_energy" and coefficient is None:
        rep.energy_error = energy_error(x, red.matrix)
    if reference is not None:
        free, A, u = reference
        rep.reduction_error = reduction_error(u, u_tilde[free], A)
        if load_name == "unit_energy" and coefficient is None:
            rep.fe_error = energy_error(u, A)
        if kappa:
            rep.kappa_full = condition_estimate(A).kappa
    if kappa:
        rep.kappa_reduced = condition_estimate(red.matrix).kappa
    return rep, red, u_tilde


def cmd_full_solve(run_dir, tol: float = 1e-10) -> dict:
    run_dir = Path(run_dir)
    man = read_manifest(run_dir)
    mesh = import_mesh(run_dir / man["mesh"])
    coef = resolve_coefficient(man["coefficient"])
    free, A, b = full_problem(mesh, coef, resolve_load(man["load"]))
    u = solve_full(A, b, tol=tol)
    full = np.zeros(mesh.n_vertices)
    full[free] = u
    files.write_vector(run_dir / "full_solution.txt", full)
    rec = {"dim_full": int(free.size), "nnz_full": int(A.nnz)}
    if man["load"] == "unit_energy" and coef is None:
        rec["fe_error"] = energy_error(u, A)
    files.write_report(run_dir / "full_report.txt", rec)
    return rec


def cmd_solve(run_dir, tol: float = 1e-10, reference: bool = False, kappa: bool = False) -> SolveReport:
    run_dir = Path(run_dir)
    st = load_run(run_dir)
    man = st.manifest
    coef = resolve_coefficient(man["coefficient"])
    ref = None
    if reference or kappa:
        free, A, b = full_problem(st.mesh, coef, resolve_load(man["load"]))
        sol_file = run_dir / "full_solution.txt"
        if sol_file.is_file():
            u = files.read_vector(sol_file)[free]
        else:
            u = solve_full(A, b, tol=tol)
        ref = (free, A, u)
    rep, red, u_tilde = solve_reduced(st.mesh, st.decomposition, st.bases, coef, man["load"], tol=tol,
                                      reference=ref, kappa=kappa)
    files.write_triplets(run_dir / "reduced_matrix.coo", red.matrix)
    files.write_vector(run_dir / "reduced_rhs.txt", red.rhs)
    files.write_vector(run_dir / "solution.txt", u_tilde)
    files.write_report(run_dir / "report.txt", rep.as_record())
    return rep


# -- reports ----------------------------------------------------------------


def cmd_spectra(run_dir, subdomains: Optional[Sequence[int]] = None, max_count: Optional[int] = None) -> dict:
    """Weighted singular values of each lifting operator, one value per line."""
    run_dir = Path(run_dir)
    man = read_manifest(run_dir)
    ids = range(man["n"]) if subdomains is None else subdomains
    coef = resolve_coefficient(man["coefficient"])
    out = {}
    for i in ids:
        if not 0 <= i < man["n"]:
            raise PipelineError(f"subdomain {i} out of range")
        sub = files.read_submesh(run_dir / man["subdomains"][i]["submesh"])
        s = LocalProblem(sub, coefficient=coef).spectrum(max_count)
        files.write_vector(run_dir / f"out/spectrum_{i:04d}.txt", s)
        out[i] = s
    return out


@dataclass
class InProcessRun:
    mesh: Mesh
    decomposition: object
    bases: list
    report: SolveReport
    reduced: object
    u_tilde: np.ndarray
    reference: Optional[tuple]


def run_in_process(mesh: Mesh, n: int, r_hops: int, epsilon: float = 1e-2, method: str = "randomized",
                   seed: int = 0, coefficient=None, load_name: str = "unit_energy", sketch_divisor: int = 8,
                   reference: bool = True, kappa: bool = False, decomposition=None, tol: float = 1e-10,
                   explicit_cap: int = DEFAULT_EXPLICIT_CAP) -> InProcessRun:
    """All three steps in one process, without files; used by the convergence study.

    ``reference`` is a flag, or an already solved (free, A, u) tuple to reuse.
    """
    dec = decomposition if decomposition is not None else decompose(mesh, n, r_hops, seed=seed)
    load = resolve_load(load_name)
    iface = interface_dofs(mesh, dec)
    bases = [
        reduce_subdomain(extract_submesh(mesh, dec, i, iface), epsilon, method=method, coefficient=coefficient,
                         load=load, sketch_divisor=sketch_divisor, seed=subdomain_seed(seed, i),
                         max_boundary=explicit_cap)
        for i in range(dec.n_subdomains)
    ]
    ref = reference if isinstance(reference, tuple) else None
    if reference is True:
        free, A, b = full_problem(mesh, coefficient, load)
        ref = (free, A, solve_full(A, b, tol=tol))
    rep, red, u_tilde = solve_reduced(mesh, dec, bases, coefficient, load_name, tol=tol, reference=ref, kappa=kappa)
    return InProcessRun(mesh, dec, bases, rep, red, u_tilde, ref)


def subdomain_count(n_dofs: int, dofs_per_subdomain: int = 1000) -> int:
    return max(1, int(round(n_dofs / dofs_per_subdomain)))


def convergence_study(sizes: Sequence[int], epsilon: float = 1e-2, r_hops=4, n_subdomains=None,
                      dofs_per_subdomain: int = 1000, method: str = "randomized", seed: int = 0) -> dict:
    """Energy and reduction errors over unit-cube meshes; slope of log(error) against log(h).

    ``r_hops`` and ``n_subdomains`` may be given per size.
    """
    rows = []
    hops = list(r_hops) if isinstance(r_hops, (list, tuple)) else [r_hops] * len(sizes)
    if len(hops) != len(sizes) or (n_subdomains is not None and len(n_subdomains) != len(sizes)):
        raise PipelineError("need one hop count and subdomain count per mesh size")
    for j, N in enumerate(sizes):
        mesh = generate_unit_cube_mesh(int(N))
        n = n_subdomains[j] if n_subdomains is not None else subdomain_count(mesh.n_free, dofs_per_subdomain)
        t0 = time.perf_counter()
        run = run_in_process(mesh, n, hops[j], epsilon=epsilon, method=method, seed=seed)
        rows.append({
            "divisions": int(N), "h": float(np.sqrt(3.0) / N), "dofs": int(mesh.n_free), "n": int(n),
            "r_hops": int(hops[j]),
            "dim_reduced": run.report.dim_reduced, "energy_error": run.report.energy_error,
            "fe_error": run.report.fe_error, "reduction_error": run.report.reduction_error,
            "seconds": time.perf_counter() - t0,
        })
        log.info("convergence row %s", rows[-1])
    h = np.log([r["h"] for r in rows])
    e = np.log([r["energy_error"] for r in rows])
    slope = float(np.polyfit(h, e, 1)[0]) if len(rows) >= 2 else float("nan")
    return {"rows": rows, "slope": slope}


def write_convergence_table(path, study: dict) -> None:
    cols = ["divisions", "h", "dofs", "n", "dim_reduced", "energy_error", "fe_error", "reduction_error"]
    lines = ["# " + " ".join(cols)]
    for r in study["rows"]:
        lines.append(" ".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    lines.append(f"# slope {study['slope']!r}")
    files.atomic_write_text(path, "\n".join(lines) + "\n")


def manifest_summary(man: dict) -> str:
    counts = {s: sum(r["status"] == s for r in man["subdomains"]) for s in (PENDING, DONE, FAILED)}
    return json.dumps(counts)
