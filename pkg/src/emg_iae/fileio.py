"""On-disk formats: recordings, model checkpoints, CSV tables and output locks.

Recording file layout::

    EMGREC\\n
    <one line of JSON header>\\n
    <uint64 little-endian payload byte count><float64 little-endian payload>

The payload is the voltage matrix in row-major (electrode-major) order.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from filelock import FileLock, Timeout

from .forward_model import ElectrodeArray, FibreParams, MotorUnit, SamplingGrid, VolumeConductorConfig
from .informed_ae.decoder import DecoderContext, PhysicalScalerBounds
from .informed_ae.encoder import EncoderConfig
from .synth import Recording

MAGIC = b"EMGREC\n"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
FIBRE_FIELDS = ("iz", "v", "length", "depth", "lateral_offset", "z_start")
UNITS = {"raw": "V", "preprocessed": "1"}


class RecordingFormatError(ValueError):
    pass


class MalformedHeaderError(RecordingFormatError):
    pass


class FormatVersionError(RecordingFormatError):
    pass


class DimensionError(RecordingFormatError):
    pass


class OutputLockedError(RuntimeError):
    pass


# --- recordings ---------------------------------------------------------------

def motor_unit_to_json(mu: MotorUnit) -> dict:
    cols = {f: [getattr(fb, f) for fb in mu.fibres] for f in FIBRE_FIELDS}
    n = len(mu)
    return {
        "summary": {
            "n_fibres": n,
            "iz_pr_m": math.fsum(cols["iz"]) / n,
            "v_pr_mps": math.fsum(cols["v"]) / n,
        },
        "fibres": cols,
    }


def motor_unit_from_json(obj: dict) -> MotorUnit:
    cols = obj["fibres"]
    n = len(cols["iz"])
    if any(len(cols[f]) != n for f in FIBRE_FIELDS):
        raise MalformedHeaderError("ground-truth fibre columns differ in length")
    return MotorUnit(tuple(FibreParams(**{f: cols[f][i] for f in FIBRE_FIELDS}) for i in range(n)))


def recording_header(rec: Recording) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": rec.kind,
        "n_electrodes": rec.array.count,
        "n_rows": int(rec.voltages.shape[0]),
        "n_samples": rec.grid.n_samples,
        "sample_rate": rec.grid.sample_rate,
        "electrode_positions": rec.array.positions.tolist(),
        "units": {"voltages": UNITS.get(rec.kind, "V"), "positions": "m", "sample_rate": "Hz"},
        "ground_truth": None if rec.ground_truth is None else motor_unit_to_json(rec.ground_truth),
        "meta": rec.meta,
    }


def write_recording(path: str | Path, rec: Recording) -> None:
    header = json.dumps(recording_header(rec), separators=(",", ":"), allow_nan=False)
    if "\n" in header:
        raise MalformedHeaderError("header must fit on one line")
    payload = np.ascontiguousarray(rec.voltages, dtype="<f8").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode())
        fh.write(b"\n")
        fh.write(_LEN.pack(len(payload)))
        fh.write(payload)


_REQUIRED = ("format_version", "kind", "n_electrodes", "n_rows", "n_samples", "sample_rate",
             "electrode_positions")


def _parse_header(blob: bytes, path) -> tuple[dict, int]:
    if not blob.startswith(MAGIC):
        raise MalformedHeaderError(f"{path}: not a recording file (bad magic)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise MalformedHeaderError(f"{path}: unterminated header")
    try:
        header = json.loads(blob[len(MAGIC):end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    if "format_version" not in header:
        raise MalformedHeaderError(f"{path}: header has no format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format version {header['format_version']!r}, this reader handles {FORMAT_VERSION}"
        )
    missing = [k for k in _REQUIRED if k not in header]
    if missing:
        raise MalformedHeaderError(f"{path}: header lacks {', '.join(missing)}")
    if header["kind"] not in UNITS:
        raise MalformedHeaderError(f"{path}: unknown recording kind {header['kind']!r}")
    return header, end + 1


def read_recording(path: str | Path) -> Recording:
    """Inverse of :func:`write_recording`; validates everything before building the result."""
    blob = Path(path).read_bytes()
    header, pos = _parse_header(blob, path)
    n_e, n_rows, k = header["n_electrodes"], header["n_rows"], header["n_samples"]
    expected_rows = n_e if header["kind"] == "raw" else n_e - 2
    if n_rows != expected_rows:
        raise DimensionError(f"{path}: {header['kind']} recording with {n_e} electrodes must have "
                             f"{expected_rows} rows, header says {n_rows}")
    if len(header["electrode_positions"]) != n_e:
        raise DimensionError(f"{path}: {len(header['electrode_positions'])} electrode positions for {n_e} electrodes")
    if len(blob) < pos + _LEN.size:
        raise DimensionError(f"{path}: payload length field missing")
    (nbytes,) = _LEN.unpack_from(blob, pos)
    pos += _LEN.size
    if len(blob) - pos != nbytes:
        raise DimensionError(f"{path}: payload has {len(blob) - pos} bytes, length field says {nbytes}")
    if nbytes != 8 * n_rows * k:
        raise DimensionError(f"{path}: payload holds {nbytes // 8} values, header implies "
                             f"{n_rows} x {k} = {n_rows * k}")
    volts = np.frombuffer(blob, dtype="<f8", count=n_rows * k, offset=pos).reshape(n_rows, k).astype(np.float64)
    gt = header.get("ground_truth")
    return Recording(
        volts,
        ElectrodeArray(np.asarray(header["electrode_positions"], dtype=float)),
        SamplingGrid(header["sample_rate"], k),
        ground_truth=None if gt is None else motor_unit_from_json(gt),
        kind=header["kind"],
        meta=header.get("meta") or {},
    )


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_NAME = "checkpoint.npz"
_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], enc_cfg: EncoderConfig,
                    ctx: DecoderContext, bounds: PhysicalScalerBounds, meta: dict | None = None) -> None:
    """Encoder weights plus everything needed to rebuild the decoder, in one ``.npz``."""
    info = {
        "encoder": enc_cfg.model_dump(mode="json"),
        "bounds": bounds.model_dump(mode="json"),
        "volume_conductor": ctx.vc.model_dump(mode="json"),
        "electrode_positions": ctx.array.positions.tolist(),
        "sample_rate": ctx.grid.sample_rate,
        "n_samples": ctx.grid.n_samples,
        "template": {f: getattr(ctx.template, f) for f in FIBRE_FIELDS},
        "meta": meta or {},
    }
    arrays = {k: np.asarray(v) for k, v in params.items()}
    arrays[_META_KEY] = np.array(json.dumps(info))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    """Returns ``(params, enc_cfg, ctx, bounds, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        info = json.loads(str(data[_META_KEY]))
        params = {k: data[k].copy() for k in data.files if k != _META_KEY}
    ctx = DecoderContext(
        ElectrodeArray(np.asarray(info["electrode_positions"], dtype=float)),
        SamplingGrid(info["sample_rate"], info["n_samples"]),
        FibreParams(**info["template"]),
        VolumeConductorConfig(**info["volume_conductor"]),
    )
    return (params, EncoderConfig(**info["encoder"]), ctx,
            PhysicalScalerBounds(**info["bounds"]), info["meta"])


# --- CSV ----------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest string that parses back to the same double
    return str(v)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]],
              provenance: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if provenance:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path: str | Path) -> tuple[dict, list[dict]]:
    """Provenance comment and rows; numeric-looking cells come back as numbers."""
    prov: dict = {}
    lines = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    prov[k] = v
            else:
                lines.append(line)
    reader = csv.DictReader(lines)
    return prov, [{k: _parse_cell(v) for k, v in r.items()} for r in reader]


def _parse_cell(v: str):
    if v == "":
        return None
    for kind in (int, float):
        try:
            return kind(v)
        except ValueError:
            pass
    return v


def write_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


# --- output locking -----------------------------------------------------------

LOCK_NAME = ".lock"


@contextmanager
def output_lock(directory: str | Path):
    """Exclusive hold on an output directory for the lifetime of the block."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / LOCK_NAME), timeout=0)
    try:
        lock.acquire()
    except Timeout as exc:
        raise OutputLockedError(f"{directory} is in use by another run") from exc
    try:
        yield directory
    finally:
        lock.release()
