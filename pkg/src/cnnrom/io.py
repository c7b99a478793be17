"""On-disk formats: ROMT tensors, checkpoints, dataset manifests, PGM images and CSV reports.

ROMT layout (little endian)::

    b"ROMT" | u16 version=1 | u8 dtype | u8 ndim | u64 dims[ndim] | payload (row-major)

with dtype codes 0=f64, 1=f32, 2=u8, 3=u64.  A checkpoint is a sequence of
named ROMT blobs behind a ``b"ROMC"`` header; its ``__meta__`` entry holds
UTF-8 JSON.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import dataset as dsmod
from . import fem
from .errors import FormatError

log = logging.getLogger(__name__)

MAGIC = b"ROMT"
CKPT_MAGIC = b"ROMC"
VERSION = 1
MANIFEST_VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<u8")}
CODES = {np.dtype(v).str: k for k, v in DTYPES.items()}
_HEAD = struct.Struct("<4sHBB")


# tensors ---------------------------------------------------------------------------------


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        code = 0
    elif arr.dtype == np.float32:
        code = 1
    elif arr.dtype == np.uint8:
        code = 2
    elif arr.dtype.kind in "ui" and (arr.size == 0 or arr.min() >= 0):
        code = 3
    else:
        raise FormatError(f"unsupported dtype {arr.dtype} for ROMT")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + dims + payload


def tensor_from_bytes(buf: bytes, dtype=None) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise FormatError("truncated ROMT header")
    magic, version, code, ndim = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported ROMT version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = _HEAD.size
    if len(buf) < off + 8 * ndim:
        raise FormatError("truncated ROMT dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dt = DTYPES[code]
    n = math.prod(dims)
    if len(buf) != off + n * dt.itemsize:
        raise FormatError(f"payload has {len(buf) - off} bytes, expected {n * dt.itemsize}")
    if dtype is not None and np.dtype(dtype).newbyteorder("<") != dt.newbyteorder("<"):
        raise FormatError(f"stored dtype {dt} does not match requested {np.dtype(dtype)}")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims).copy()


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path, dtype=None) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), dtype)


# checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors (sorted by name) and JSON metadata; bit-reproducible."""
    entries = dict(tensors)
    if meta is not None:
        entries["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    parts = [CKPT_MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name in sorted(entries):
        blob = tensor_to_bytes(entries[name])
        key = name.encode()
        parts += [struct.pack("<H", len(key)), key, struct.pack("<Q", len(blob)), blob]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(tensors, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 10
    out = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + klen].decode()
            off += 2 + klen
            (blen,) = struct.unpack_from("<Q", buf, off)
            off += 8
            out[name] = tensor_from_bytes(buf[off : off + blen])
            off += blen
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    meta = out.pop("__meta__", None)
    return out, (json.loads(meta.tobytes().decode()) if meta is not None else {})


def net_tensors(net, prefix: str) -> dict:
    return {f"{prefix}/{k}": v for k, v in net.store.state_dict().items()}


def load_net_tensors(net, tensors: dict, prefix: str) -> None:
    p = prefix + "/"
    net.store.load_state_dict({k[len(p):]: v for k, v in tensors.items() if k.startswith(p)})


def save_basis(path, net, grid: fem.Grid2D, extra: dict | None = None) -> None:
    from .basisnet import config_dict
    meta = {"kind": "basis", "basis": config_dict(net.cfg), "grid": grid_meta(grid), **(extra or {})}
    save_checkpoint(path, net_tensors(net, "basis"), meta)


def load_basis(path):
    from .basisnet import BasisNet, BasisNetCfg
    tensors, meta = load_checkpoint(path)
    net = BasisNet(BasisNetCfg(**meta["basis"]))
    load_net_tensors(net, tensors, "basis")
    return net, grid_from_meta(meta["grid"]), meta


def save_surrogate(path, model, extra: dict | None = None) -> None:
    from .basisnet import config_dict
    tensors = {**net_tensors(model.basis, "basis"), **net_tensors(model.coef, "coef")}
    meta = {"kind": "surrogate", "basis": config_dict(model.basis.cfg),
            "coef": config_dict(model.coef.cfg), "grid": grid_meta(model.grid), **(extra or {})}
    save_checkpoint(path, tensors, meta)


def load_surrogate(path):
    from .basisnet import BasisNet, BasisNetCfg
    from .coefnet import CoefNet, CoefNetCfg, SurrogateModel
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "surrogate":
        raise FormatError(f"{path} is not a surrogate checkpoint")
    basis = BasisNet(BasisNetCfg(**meta["basis"]))
    coef = CoefNet(CoefNetCfg(**meta["coef"]))
    load_net_tensors(basis, tensors, "basis")
    load_net_tensors(coef, tensors, "coef")
    return SurrogateModel(basis, coef, grid_from_meta(meta["grid"])), meta


def grid_meta(grid: fem.Grid2D) -> dict:
    return {"nx": grid.nx, "ny": grid.ny, "kind": grid.kind, "lx": grid.lx, "ly": grid.ly}


def grid_from_meta(d: dict) -> fem.Grid2D:
    return fem.Grid2D(int(d["nx"]), int(d["ny"]), d.get("kind", fem.QUAD), float(d.get("lx", 1.0)),
                      float(d.get("ly", 1.0)))


# images and reports ------------------------------------------------------------------


def pgm_bytes(field) -> bytes:
    """Binary P5 PGM, min-max scaled to 0..255, constant fields at 128; y axis points up."""
    f = np.asarray(field, dtype=float)
    if f.ndim != 2 or not np.all(np.isfinite(f)):
        raise ValueError("PGM export needs a finite 2-D field")
    lo, hi = f.min(), f.max()
    if hi == lo:
        img = np.full(f.shape, 128, dtype=np.uint8)
    else:
        img = np.round((f - lo) / (hi - lo) * 255).astype(np.uint8)
    img = np.flipud(img)
    return f"P5\n{f.shape[1]} {f.shape[0]}\n255\n".encode() + img.tobytes()


def emit_pgm(field, path) -> None:
    Path(path).write_bytes(pgm_bytes(field))


def read_pgm(path) -> np.ndarray:
    """Pixels of a P5 file written by :func:`emit_pgm`, in field orientation."""
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    data = np.frombuffer(parts[4], dtype=np.uint8)
    if data.size != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, got {data.size}")
    return np.flipud(data.reshape(h, w)).copy()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def emit_report(rows, path, columns=None) -> None:
    """CSV with a header row; floats printed with 17 significant digits."""
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ValueError("columns are required for an empty report")
        columns = list(rows[0])
    for r in rows:
        if set(r) != set(columns):
            raise ValueError(f"row keys {sorted(r)} differ from columns {sorted(columns)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _parse(s: str):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# datasets ---------------------------------------------------------------------------------


def write_dataset(data: dsmod.RomDataset, directory, meta: dict, failures=()) -> Path:
    """Store every sample as ROMT files and write ``manifest.json``; returns its path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(len(data)):
        stem = f"s{i:05d}"
        A = sp.csr_matrix(data.A[i])
        files = {"K": f"{stem}_K.romt", "u": f"{stem}_u.romt", "F": f"{stem}_F.romt",
                 "A": {"offsets": f"{stem}_A_offsets.romt", "cols": f"{stem}_A_cols.romt",
                       "values": f"{stem}_A_values.romt"}}
        save_tensor(d / files["K"], data.K[i])
        save_tensor(d / files["u"], data.u[i])
        save_tensor(d / files["F"], data.F[i])
        save_tensor(d / files["A"]["offsets"], A.indptr.astype(np.uint64))
        save_tensor(d / files["A"]["cols"], A.indices.astype(np.uint64))
        save_tensor(d / files["A"]["values"], A.data.astype(np.float64))
        samples.append({"seed": int(data.seeds[i]) if data.seeds else i, **files})
    manifest = {"format_version": MANIFEST_VERSION, **meta, "grid": grid_meta(data.grid),
                "n_samples": len(data), "samples": samples, "failures": list(failures)}
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(manifest_path, label_noise: float = 0.0, noise_seed=0) -> dsmod.RomDataset:
    """Read and fully validate a manifest; optional ``N(0, label_noise^2)`` noise on ``u``."""
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    try:
        man = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {mpath}: {exc}") from exc
    if man.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {man.get('format_version')}")
    grid = grid_from_meta(man["grid"])
    d = mpath.parent
    Ks, us, As, Fs, seeds = [], [], [], [], []
    n = grid.n_free
    for s in man["samples"]:
        try:
            K = load_tensor(d / s["K"], np.float64)
            u = load_tensor(d / s["u"], np.float64)
            F = load_tensor(d / s["F"], np.float64)
            ptr = load_tensor(d / s["A"]["offsets"], np.uint64).astype(np.int64)
            cols = load_tensor(d / s["A"]["cols"], np.uint64).astype(np.int64)
            vals = load_tensor(d / s["A"]["values"], np.float64)
        except (OSError, KeyError) as exc:
            raise FormatError(f"sample {s.get('seed')}: {exc}") from exc
        if K.shape != (grid.ny, grid.nx) or u.shape != (n,) or F.shape != (n,) or ptr.shape != (n + 1,):
            raise FormatError(f"sample {s.get('seed')}: shapes inconsistent with the grid")
        if ptr[-1] != len(cols) or len(cols) != len(vals) or (len(cols) and cols.max() >= n):
            raise FormatError(f"sample {s.get('seed')}: malformed CSR triple")
        Ks.append(K)
        us.append(u)
        Fs.append(F)
        As.append(sp.csr_matrix((vals, cols, ptr), shape=(n, n)))
        seeds.append(s["seed"])
    if len(Ks) != man["n_samples"]:
        raise FormatError("sample count disagrees with the manifest")
    data = dsmod.RomDataset(grid, np.array(Ks).reshape(-1, grid.ny, grid.nx), np.array(us).reshape(-1, n),
                            As, np.array(Fs).reshape(-1, n), seeds)
    if label_noise > 0:
        data = data.with_label_noise(label_noise, noise_seed)
    return data


def worker_count() -> int:
    """Worker processes from ``ROM_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("ROM_THREADS", "1")))
    except ValueError:
        return 1


def _gen_chunk(args):
    grid_d, spec, equation, seeds, p = args
    return dsmod.generate(grid_from_meta(grid_d), spec, equation, seeds, p)


def generate_parallel(grid: fem.Grid2D, spec: dsmod.GeneratorSpec, equation: str, seeds, p: float = 3.0,
                      workers: int | None = None):
    """:func:`dataset.generate` split over worker processes; results keep seed order."""
    seeds = [int(s) for s in seeds]
    workers = workers or worker_count()
    if workers <= 1 or len(seeds) < 2 * workers:
        return dsmod.generate(grid, spec, equation, seeds, p)
    chunks = [c.tolist() for c in np.array_split(seeds, workers) if len(c)]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_gen_chunk, [(grid_meta(grid), spec, equation, c, p) for c in chunks]))
    failures = [f for _, fl in parts for f in fl]
    ok = [d for d, _ in parts if len(d)]
    if not ok:
        return dsmod.RomDataset(grid, np.empty((0, grid.ny, grid.nx)), np.empty((0, grid.n_free)), [],
                                np.empty((0, grid.n_free)), []), failures
    data = dsmod.RomDataset(grid, np.concatenate([d.K for d in ok]), np.concatenate([d.u for d in ok]),
                            [A for d in ok for A in d.A], np.concatenate([d.F for d in ok]),
                            [s for d in ok for s in d.seeds])
    return data, failures


def gen_data(directory, grid: fem.Grid2D, spec: dsmod.GeneratorSpec, equation: str, seeds,
             p: float = 3.0) -> Path:
    """Generate, self-check and store a dataset; returns the manifest path.

    Samples whose solver fails are logged and listed under ``failures``.
    """
    data, failures = generate_parallel(grid, spec, equation, seeds, p)
    if len(data):
        log.info("generated %d samples (%d failed), max relative residual %.2e", len(data),
                 len(failures), data.max_relative_residual())
    meta = {"equation": equation, "p": p, "generator": dict(spec.__dict__),
            "seeds": [int(s) for s in seeds]}
    return write_dataset(data, directory, meta, failures)
