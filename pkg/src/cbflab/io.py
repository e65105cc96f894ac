"""Binary checkpoints, run manifests and trajectory tables.

Checkpoint layout (little endian)::

    4s   magic  b"CBF1"
    i    d
    d    L
    i    N
    i    ncomp
    d    r, mu, alpha, beta, sigma, t
    then ncomp * N**d complex128 Fourier coefficients in C order
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .grid import Grid, SpectralField
from .operators import PhysParams

MAGIC = b"CBF1"
HEADER = struct.Struct("<4sidiidddddd")
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


class OutputExistsError(FileExistsError):
    """Refusing to overwrite existing outputs without ``force``."""


def write_checkpoint(path, u: SpectralField, params: PhysParams, t: float) -> None:
    g = u.grid
    head = HEADER.pack(
        MAGIC, g.d, float(g.L), g.N, g.d, float(params.r), params.mu, params.alpha, params.beta, params.sigma, float(t)
    )
    body = np.ascontiguousarray(u.coeffs, dtype="<c16").tobytes()
    Path(path).write_bytes(head + body)


def read_checkpoint(path) -> tuple[SpectralField, PhysParams, float]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise CheckpointError(f"{path}: file shorter than header")
    magic, d, L, N, ncomp, r, mu, alpha, beta, sigma, t = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if d not in (2, 3) or ncomp != d or N < 4:
        raise CheckpointError(f"{path}: inconsistent header d={d} N={N} ncomp={ncomp}")
    count = ncomp * N**d
    body = raw[HEADER.size :]
    if len(body) != 16 * count:
        raise CheckpointError(f"{path}: expected {16 * count} payload bytes, found {len(body)}")
    c = np.frombuffer(body, dtype="<c16").astype(np.complex128).reshape((ncomp,) + (N,) * d)
    g = Grid(d, L, N)
    return SpectralField(g, c.copy()), PhysParams(mu=mu, alpha=alpha, beta=beta, r=r, sigma=sigma), t


def build_id() -> str:
    """Content hash of the package sources (stable across machines)."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def dump_json(path, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def emit_manifest(path, config_text: str, derived: dict, results: dict | None = None, extra: dict | None = None) -> dict:
    """Write the run manifest; no timestamps so reruns are byte-identical."""
    from . import __version__

    manifest = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "build_id": build_id(),
        "config": config_text,
        "derived": derived,
        "results": results or {},
    }
    if extra:
        manifest.update(extra)
    dump_json(path, manifest)
    return manifest


def prepare_output_dir(path, force: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExistsError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_trajectory_csv(path, times, ids, positions, comment: str | None = None) -> None:
    """Rows ``t, id, x1..xd`` from ``positions[time, particle, coord]``."""
    positions = np.asarray(positions)
    d = positions.shape[-1]
    with open(path, "w", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        fh.write(",".join(["t", "id"] + [f"x{i + 1}" for i in range(d)]) + "\n")
        for j, t in enumerate(times):
            for p, pid in enumerate(ids):
                vals = [repr(float(t)), str(int(pid))] + [repr(float(v)) for v in positions[j, p]]
                fh.write(",".join(vals) + "\n")
