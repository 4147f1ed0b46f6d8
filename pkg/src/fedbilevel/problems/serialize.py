"""Flat binary container for generated problems (exact replay).

Layout: magic ``FBLV1\\n``, then a u16-length-prefixed family name, a u32
array count, and per array: u16-length name, u8 dtype code (0 float64,
1 int64, 2 bool), u8 ndim, ndim little-endian u32 dims, raw C-order bytes.
All multi-byte integers are little-endian. Loading reconstructs the family
bit-for-bit (constants included, nothing re-measured), so a reloaded problem
replays a run exactly.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .base import ProblemConstants
from .data_cleaning import DataCleaningClient, DataCleaningFamily
from .hyper_rep import HyperRepClient, HyperRepFamily, TaskData
from .quadratic import QuadraticClient, QuadraticFamily

__all__ = ["save_family", "load_family"]

_MAGIC = b"FBLV1\n"
_DTYPES = {0: "<f8", 1: "<i8", 2: "|b1"}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1, np.dtype(bool): 2}


def _write_arrays(path: str, family_name: str, arrays: dict[str, np.ndarray]) -> None:
    chunks = [_MAGIC]
    name_b = family_name.encode()
    chunks.append(struct.pack("<H", len(name_b)) + name_b)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = _CODES[arr.dtype]
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    payload = b"".join(chunks)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_arrays(path: str) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not an FBLV1 container")
    off = len(_MAGIC)

    def take(fmt: str):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    (nlen,) = take("<H")
    family_name = data[off : off + nlen].decode()
    off += nlen
    (count,) = take("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = take("<H")
        key = data[off : off + klen].decode()
        off += klen
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        dt = np.dtype(_DTYPES[code])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        arr = np.frombuffer(data[off : off + n_bytes], dtype=dt).reshape(shape)
        off += n_bytes
        arr = arr.copy()
        arr.setflags(write=False)
        arrays[key] = arr
    return family_name, arrays


def _constants_to_array(c: ProblemConstants) -> np.ndarray:
    return np.array([c.mu, c.L, c.C_f, c.kappa, c.sigma, np.nan if c.L_upper is None else c.L_upper])


def _constants_from_array(a: np.ndarray) -> ProblemConstants:
    return ProblemConstants(
        mu=float(a[0]),
        L=float(a[1]),
        C_f=float(a[2]),
        kappa=float(a[3]),
        sigma=float(a[4]),
        L_upper=None if np.isnan(a[5]) else float(a[5]),
    )


def save_family(path: str, family) -> None:
    arrays: dict[str, np.ndarray] = {"constants": _constants_to_array(family.constants)}
    if family.name == "quadratic":
        arrays["meta"] = np.array([family.seed, family.zeta, family.M, family.constants.sigma])
        for m, c in enumerate(family.clients):
            for part in ("A", "B", "c", "H", "J", "b0"):
                arrays[f"client{m}.{part}"] = getattr(c, part)
    elif family.name == "data_cleaning":
        first = family.clients[0]
        arrays["meta"] = np.array([family.seed, family.rho, first.l2, first.classes, family.M])
        arrays["clean_mask"] = family.clean_mask
        for m, c in enumerate(family.clients):
            arrays[f"client{m}.Z"] = c.Z
            arrays[f"client{m}.labels"] = c.labels
            arrays[f"client{m}.Z_val"] = c.Z_val
            arrays[f"client{m}.labels_val"] = c.labels_val
    elif family.name == "hyper_rep":
        first = family.clients[0]
        arrays["meta"] = np.array(
            [family.seed, first.l2, first.n_way, first.embed_dim, first.feat_dim, family.M, first.T]
        )
        arrays["x0"] = family.x0
        arrays["planted"] = family.planted
        for m, c in enumerate(family.clients):
            for t, task in enumerate(c.tasks):
                for part in ("Z", "Y", "labels", "Z_val", "Y_val", "labels_val"):
                    arrays[f"client{m}.task{t}.{part}"] = getattr(task, part)
    else:
        raise ValueError(f"cannot serialize family {family.name!r}")
    _write_arrays(path, family.name, arrays)


def load_family(path: str):
    family_name, arrays = _read_arrays(path)
    constants = _constants_from_array(arrays["constants"])
    meta = arrays["meta"]
    if family_name == "quadratic":
        M = int(meta[2])
        sigma = float(meta[3])
        clients = [
            QuadraticClient(
                client_id=m,
                A=arrays[f"client{m}.A"],
                B=arrays[f"client{m}.B"],
                c=arrays[f"client{m}.c"],
                H=arrays[f"client{m}.H"],
                J=arrays[f"client{m}.J"],
                b0=arrays[f"client{m}.b0"],
                sigma=sigma,
            )
            for m in range(M)
        ]
        return QuadraticFamily(
            clients=clients, constants=constants, seed=int(meta[0]), zeta=float(meta[1])
        )
    if family_name == "data_cleaning":
        M = int(meta[4])
        sizes = [arrays[f"client{m}.Z"].shape[0] for m in range(M)]
        p = sum(sizes)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        clients = [
            DataCleaningClient(
                client_id=m,
                Z=arrays[f"client{m}.Z"],
                labels=arrays[f"client{m}.labels"],
                Z_val=arrays[f"client{m}.Z_val"],
                labels_val=arrays[f"client{m}.labels_val"],
                block_start=int(starts[m]),
                p=p,
                classes=int(meta[3]),
                l2=float(meta[2]),
            )
            for m in range(M)
        ]
        return DataCleaningFamily(
            clients=clients,
            constants=constants,
            seed=int(meta[0]),
            rho=float(meta[1]),
            clean_mask=arrays["clean_mask"],
        )
    if family_name == "hyper_rep":
        M, T = int(meta[5]), int(meta[6])
        clients = []
        for m in range(M):
            tasks = [
                TaskData(
                    Z=arrays[f"client{m}.task{t}.Z"],
                    Y=arrays[f"client{m}.task{t}.Y"],
                    labels=arrays[f"client{m}.task{t}.labels"],
                    Z_val=arrays[f"client{m}.task{t}.Z_val"],
                    Y_val=arrays[f"client{m}.task{t}.Y_val"],
                    labels_val=arrays[f"client{m}.task{t}.labels_val"],
                )
                for t in range(T)
            ]
            clients.append(
                HyperRepClient(
                    client_id=m,
                    tasks=tasks,
                    embed_dim=int(meta[3]),
                    feat_dim=int(meta[4]),
                    n_way=int(meta[2]),
                    l2=float(meta[1]),
                )
            )
        return HyperRepFamily(
            clients=clients,
            constants=constants,
            seed=int(meta[0]),
            x0=arrays["x0"],
            planted=arrays["planted"],
        )
    raise ValueError(f"unknown family {family_name!r} in {path}")
