"""Binary checkpoint format and metrics CSV export.

Checkpoint layout (all integers little-endian)::

    magic       8 bytes   b"AUCNCKPT"
    version     u32
    header_len  u64
    header      header_len bytes of UTF-8 JSON (metadata, states, history)
    count       u32       number of tensors
    per tensor: name_len u16, name (UTF-8), dtype u8 (4 = float32, 8 = float64),
                ndim u8, shape ndim x u64, raw little-endian data
    crc32       u32       over every preceding byte

Tensors are stored in the precision they were trained in, so a save/load
round trip is bit-exact.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from dataclasses import fields

import numpy as np

from .architectures import MechanismNetwork
from .losses import DualState, LagrangianState
from .training import Adam, HistoryRow, TrainState

__all__ = [
    "MAGIC", "VERSION", "CheckpointError", "dump_checkpoint", "parse_checkpoint",
    "save_checkpoint", "load_checkpoint", "state_to_bytes", "state_from_bytes",
    "METRICS_HEADER", "export_metrics", "read_metrics",
]

MAGIC = b"AUCNCKPT"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def dump_checkpoint(header: dict, tensors: dict) -> bytes:
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype.kind != "f" or arr.dtype.itemsize not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.itemsize]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> tuple[dict, dict]:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    if len(data) < len(MAGIC) + 16:
        raise CheckpointError("truncated checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    version, head_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    header = json.loads(r.take(head_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode("utf-8")
        size, ndim = r.unpack("<BB")
        if size not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {size}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(n * size), dtype=_DTYPES[size]).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return header, tensors


# ---------------------------------------------------------------------------
# training state <-> checkpoint
# ---------------------------------------------------------------------------

def _net_meta(net: MechanismNetwork) -> dict:
    return {"variant": net.variant, "n": net.n, "m": net.m, "hyper": net.hyper,
            "padded": net.padded, "use_pe": net.use_pe, "pe_mode": net.pe_mode}


def state_to_bytes(state: TrainState, *, config: dict | None = None, setting: dict | None = None) -> bytes:
    obj = state.objective_state
    tensors = {f"param/{k}": v for k, v in state.net.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.opt.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.opt.v.items()})
    if isinstance(obj, DualState):
        objective = {"kind": "budget", **{f.name: getattr(obj, f.name) for f in fields(obj)}}
    else:
        objective = {"kind": "lagrangian", "rho": obj.rho, "rho_lr": obj.rho_lr,
                     "update_period": obj.update_period}
        tensors["lagrange/lambdas"] = obj.lambdas
    if state.misreports is not None:
        tensors["state/misreports"] = state.misreports
    header = {
        "network": _net_meta(state.net),
        "adam": {"lr": state.opt.lr, "beta1": state.opt.beta1, "beta2": state.opt.beta2,
                 "eps": state.opt.eps, "t": state.opt.t},
        "objective": objective,
        "iteration": state.iteration,
        "data_state": state.data_state,
        "history": [list(r.as_tuple()) for r in state.history],
        "train_log": [list(r) for r in state.train_log],
        "config": config or {},
        "setting": setting or {},
    }
    return dump_checkpoint(header, tensors)


def state_from_bytes(data: bytes) -> tuple[TrainState, dict]:
    """Rebuild a ``TrainState``; also returns the raw header."""
    header, tensors = parse_checkpoint(data)
    meta = header["network"]
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    net = MechanismNetwork(meta["variant"], meta["n"], meta["m"], meta["hyper"], params,
                           padded=meta["padded"], use_pe=meta["use_pe"], pe_mode=meta["pe_mode"])
    a = header["adam"]
    opt = Adam(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"],
               m={k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
               v={k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")})
    o = dict(header["objective"])
    kind = o.pop("kind")
    if kind == "budget":
        obj = DualState(**o)
    else:
        obj = LagrangianState(lambdas=tensors["lagrange/lambdas"], **o)
    state = TrainState(net=net, opt=opt, objective_state=obj, iteration=header["iteration"],
                       data_state=header["data_state"],
                       history=[HistoryRow(*r) for r in header["history"]],
                       train_log=[tuple(r) for r in header["train_log"]],
                       misreports=tensors.get("state/misreports"))
    return state, header


def save_checkpoint(path, state: TrainState, **kw) -> None:
    data = state_to_bytes(state, **kw)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint {path}") from None
    return state_from_bytes(data)


# ---------------------------------------------------------------------------
# metrics CSV
# ---------------------------------------------------------------------------

METRICS_HEADER = HistoryRow.FIELDS


def _fmt(x) -> str:
    if isinstance(x, int):
        return str(x)
    return repr(float(x)) if math.isfinite(x) else "nan"


def export_metrics(history, path) -> None:
    """One row per validation event, fixed header, round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow(_fmt(v) for v in row.as_tuple())


def read_metrics(path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise ValueError(f"metrics header mismatch in {path}")
    out = []
    for k, r in enumerate(rows[1:], start=2):
        if len(r) != len(METRICS_HEADER):
            raise ValueError(f"{path}:{k}: expected {len(METRICS_HEADER)} fields, got {len(r)}")
        out.append(HistoryRow(int(r[0]), *(float(x) for x in r[1:])))
    return out
