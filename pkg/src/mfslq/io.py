"""File formats: CSV tables with a commented manifest header, JSON reports,
and the binary path-bundle format.

Binary layout (all little-endian):

    8 bytes   magic b"MFSLQPB1"
    uint32    length L of the manifest JSON
    L bytes   manifest JSON (UTF-8)
    4 x uint64  n_paths, n_nodes, n, m
    float64[n_nodes]                  node times
    float64[n_paths, n_nodes, n]      states
    float64[n_paths, n_nodes, m]      controls
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MFSLQPB1"


def _fmt(x):
    return repr(float(x))


def manifest_lines(header) -> list[str]:
    if not header:
        return []
    return [f"# {k}: {json.dumps(v) if not isinstance(v, str) else v}" for k, v in header.items()]


def write_table(path, columns, data, header=None):
    data = np.asarray(data, dtype=float)
    with open(path, "w", newline="\n") as fh:
        for line in manifest_lines(header):
            fh.write(line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in data:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_table(path):
    """Returns (header dict, column names, data array)."""
    header, cols, rows = {}, None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(": ")
                header[key] = val
            elif cols is None:
                cols = line.split(",")
            elif line:
                rows.append([float(v) for v in line.split(",")])
    return header, cols, np.array(rows)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, manifest, body):
    doc = {"manifest": manifest}
    doc.update(body)
    with open(path, "w", newline="\n") as fh:
        json.dump(to_jsonable(doc), fh, indent=1)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_paths_csv(path, t, X, u, header=None):
    n_paths, n_nodes, n = X.shape
    m = u.shape[-1]
    cols = ["path_id", "t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
    with open(path, "w", newline="\n") as fh:
        for line in manifest_lines(header):
            fh.write(line + "\n")
        fh.write(",".join(cols) + "\n")
        for p in range(n_paths):
            for k in range(n_nodes):
                vals = [str(p), _fmt(t[k])] + [_fmt(v) for v in X[p, k]] + [_fmt(v) for v in u[p, k]]
                fh.write(",".join(vals) + "\n")


def write_paths_bin(path, t, X, u, header=None):
    n_paths, n_nodes, n = X.shape
    m = u.shape[-1]
    man = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(man)))
        fh.write(man)
        fh.write(struct.pack("<4Q", n_paths, n_nodes, n, m))
        fh.write(np.asarray(t, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(u, dtype="<f8").tobytes())


def read_paths_bin(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError("not a path-bundle file (bad magic)")
    (L,) = struct.unpack_from("<I", buf, 8)
    off = 12
    manifest = json.loads(buf[off:off + L].decode("utf-8"))
    off += L
    n_paths, n_nodes, n, m = struct.unpack_from("<4Q", buf, off)
    off += 32
    t = np.frombuffer(buf, "<f8", n_nodes, off)
    off += 8 * n_nodes
    X = np.frombuffer(buf, "<f8", n_paths * n_nodes * n, off).reshape(n_paths, n_nodes, n)
    off += 8 * X.size
    u = np.frombuffer(buf, "<f8", n_paths * n_nodes * m, off).reshape(n_paths, n_nodes, m)
    return manifest, t.copy(), X.copy(), u.copy()
