"""On-disk formats of a run directory.

Array bundles are zip archives of ``.npy`` members written with a fixed
timestamp, so the same arrays always give byte-identical files.  Every write
goes to a temporary file in the target directory followed by a rename, so a
reader never sees a partial file.
"""
from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
from scipy import sparse

from .decomposition import Submesh
from .local import LocalBasis

SUBMESH_VERSION = 1
BASIS_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class FileFormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_bundle(path, arrays: dict) -> None:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, member.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def read_bundle(path, kind: str, version: int) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise FileFormatError(f"{path}: not a readable {kind} file ({exc})") from exc
    if str(data.get("kind", "")) != kind:
        raise FileFormatError(f"{path}: expected a {kind} file")
    if int(data.get("version", -1)) != version:
        raise FileFormatError(f"{path}: unsupported {kind} version {data.get('version')}")
    return data


_SUBMESH_FIELDS = ("global_nodes", "vertices", "elements", "in_omega", "owned", "interior", "boundary",
                   "dirichlet", "interface_rows", "neighbors")


def write_submesh(path, sub: Submesh) -> None:
    arrays = {f: getattr(sub, f) for f in _SUBMESH_FIELDS}
    arrays.update(kind=np.str_("submesh"), version=SUBMESH_VERSION, subdomain=sub.subdomain)
    write_bundle(path, arrays)


def read_submesh(path) -> Submesh:
    d = read_bundle(path, "submesh", SUBMESH_VERSION)
    try:
        return Submesh(subdomain=int(d["subdomain"]), **{f: d[f] for f in _SUBMESH_FIELDS})
    except KeyError as exc:
        raise FileFormatError(f"{path}: missing field {exc}") from None


_BASIS_ARRAYS = ("owned_nodes", "Q", "block_diagonal", "rhs", "interface_rows", "singular_values")
_BASIS_SCALARS = ("n_kept", "has_particular", "n_interior", "n_boundary", "sketch_size")


def write_basis(path, basis: LocalBasis) -> None:
    arrays = {f: getattr(basis, f) for f in _BASIS_ARRAYS}
    arrays.update({f: getattr(basis, f) for f in _BASIS_SCALARS})
    arrays.update(
        kind=np.str_("basis"),
        version=BASIS_VERSION,
        subdomain=basis.subdomain,
        method=np.str_(basis.method),
        m=basis.size,
        Q_interface=basis.Q_interface,
    )
    if basis.block is not None:
        arrays["block"] = basis.block
    write_bundle(path, arrays)


def read_basis(path) -> LocalBasis:
    d = read_bundle(path, "basis", BASIS_VERSION)
    try:
        basis = LocalBasis(
            subdomain=int(d["subdomain"]),
            method=str(d["method"]),
            **{f: d[f] for f in _BASIS_ARRAYS},
            n_kept=int(d["n_kept"]),
            has_particular=bool(d["has_particular"]),
            n_interior=int(d["n_interior"]),
            n_boundary=int(d["n_boundary"]),
            sketch_size=int(d["sketch_size"]),
            block=d.get("block"),
        )
    except KeyError as exc:
        raise FileFormatError(f"{path}: missing field {exc}") from None
    if basis.Q.shape != (basis.owned_nodes.size, int(d["m"])):
        raise FileFormatError(f"{path}: basis shape {basis.Q.shape} disagrees with its header")
    return basis


def write_triplets(path, matrix) -> None:
    coo = sparse.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    lines = [f"coo {coo.shape[0]} {coo.nnz}"]
    lines += [f"{r} {c} {v!r}" for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order].tolist())]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_triplets(path) -> sparse.csr_matrix:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise FileFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "coo":
        raise FileFormatError(f"{path}:1: expected 'coo <n> <nnz>'")
    n, nnz = int(head[1]), int(head[2])
    if len(lines) - 1 != nnz:
        raise FileFormatError(f"{path}: header announces {nnz} entries, found {len(lines) - 1}")
    if nnz == 0:
        return sparse.csr_matrix((n, n))
    rows, cols, vals = [], [], []
    for no, ln in enumerate(lines[1:], start=2):
        rec = ln.split()
        if len(rec) != 3:
            raise FileFormatError(f"{path}:{no}: expected 'row col value'")
        rows.append(int(rec[0]))
        cols.append(int(rec[1]))
        vals.append(float(rec[2]))
    rows, cols = np.array(rows), np.array(cols)
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n:
        raise FileFormatError(f"{path}: index out of range for a {n}x{n} matrix")
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def write_vector(path, values) -> None:
    atomic_write_text(path, "".join(f"{float(v)!r}\n" for v in values))


def read_vector(path) -> np.ndarray:
    return np.array([float(x) for x in Path(path).read_text().split()])


def write_report(path, record: dict) -> None:
    atomic_write_text(path, "".join(f"{k}={_fmt(v)}\n" for k, v in record.items()))


def read_report(path) -> dict:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if "=" in ln:
            k, v = ln.split("=", 1)
            out[k] = v
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
