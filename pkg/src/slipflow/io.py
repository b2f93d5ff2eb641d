"""Deterministic artifact serialization: binary field dumps and JSON sidecars.

Binary layout: little-endian 64-bit floats, row-major with y1 fastest, one
contiguous block per component in declared order.  Every JSON artifact
carries the expanded-config hash and the toolkit version, so identical
configs and seeds reproduce outputs byte for byte.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from . import __version__


def config_hash(obj):
    """Stable hash of a fully expanded configuration dictionary."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def dump_fields(path_base, blocks, sidecar):
    """Write component blocks to ``<base>.bin`` and metadata to ``<base>.json``."""
    with open(str(path_base) + ".bin", "wb") as fh:
        for name, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = dict(sidecar)
    meta["blocks"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in blocks
    ]
    meta["dtype"] = "<f8"
    meta["order"] = "C (y1 fastest)"
    write_json(str(path_base) + ".json", meta)


def load_fields(path_base):
    """Round-trip reader for dumped fields; returns (blocks dict, sidecar)."""
    with open(str(path_base) + ".json") as fh:
        meta = json.load(fh)
    raw = np.fromfile(str(path_base) + ".bin", dtype="<f8")
    blocks = {}
    offset = 0
    for entry in meta["blocks"]:
        size = int(np.prod(entry["shape"]))
        blocks[entry["name"]] = raw[offset:offset + size].reshape(entry["shape"])
        offset += size
    return blocks, meta


def corrector_dump(sol, path_base, cfg_hash=""):
    """Corrector dump: v1, v2, v3 on levels and q at mid-levels."""
    blocks = [(f"v{c + 1}", sol.v[c]) for c in range(3)] + [("q", sol.q)]
    sidecar = {
        "N": [sol.resolution[0], sol.resolution[1]],
        "Nz": sol.resolution[2],
        "gamma_hash": sol.boundary.content_hash,
        "j": sol.j,
        "alpha": [float(a) for a in sol.alpha],
        "diagnostics": {k: v for k, v in sol.diagnostics.items()
                        if np.isscalar(v)},
        "config_hash": cfg_hash,
        "version": __version__,
    }
    dump_fields(path_base, blocks, sidecar)


def channel_dump(sol, path_base, cfg_hash=""):
    """Channel dump in the corrector layout plus the driving metadata."""
    blocks = [(f"v{c + 1}", sol.u[c]) for c in range(3)] + [("q", sol.p)]
    sidecar = {
        "N": [sol.resolution[0], sol.resolution[1]],
        "Nz": sol.resolution[2],
        "gamma_hash": sol.boundary.content_hash,
        "epsilon": sol.epsilon,
        "nper": sol.nper,
        "U_top": list(sol.u_top),
        "nonlinear": sol.nonlinear,
        "diagnostics": {k: v for k, v in sol.residuals.items()
                        if np.isscalar(v)},
        "config_hash": cfg_hash,
        "version": __version__,
    }
    dump_fields(path_base, blocks, sidecar)


def write_trace_csv(path, heights, grid_nodes, velocity, pressure):
    """Field sampling output: ``y1,y2,y3,u1,u2,u3,p`` rows."""
    with open(path, "w") as fh:
        fh.write("y1,y2,y3,u1,u2,u3,p\n")
        for hi, h in enumerate(heights):
            for i2, y2 in enumerate(grid_nodes):
                for i1, y1 in enumerate(grid_nodes):
                    u = velocity[hi, i2, i1]
                    fh.write(f"{y1!r},{y2!r},{h!r},{u[0]!r},{u[1]!r},{u[2]!r},"
                             f"{pressure[hi, i2, i1]!r}\n")
