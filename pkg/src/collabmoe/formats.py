"""Text file formats: routing traces, dense matrices, placements, reports, fit points.

Traces and reports are JSON Lines with a versioned header line. Matrices and
placements are whitespace-separated text behind a ``#`` shape header. Floats
are written with ``repr`` so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import MoEError
from .placement import Placement
from .routing import RoutingOutcome

TRACE_FORMAT = "moe-trace"
REPORT_FORMAT = "moe-report"
FORMAT_VERSION = 1


class FormatError(MoEError, ValueError):
    """Malformed input file; message carries the offending line number."""


def _lines(src) -> list[str]:
    if isinstance(src, (str, Path)):
        return Path(src).read_text().splitlines()
    return src.read().splitlines()


def _write(dst, text: str) -> None:
    if isinstance(dst, (str, Path)):
        Path(dst).write_text(text)
    else:
        dst.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False, separators=(", ", ": "))


# --- traces --------------------------------------------------------------------

def dump_trace(routing: RoutingOutcome, num_experts: int, model: str | None = None,
               meta: dict | None = None) -> str:
    header = {"format": TRACE_FORMAT, "version": FORMAT_VERSION, "num_experts": int(num_experts),
              "top_k": int(routing.k), "num_tokens": int(routing.num_tokens)}
    if model is not None:
        header["model"] = model
    if meta:
        header["meta"] = meta
    out = [_dumps(header)]
    for ids, w in zip(routing.ids.tolist(), routing.weights.tolist()):
        out.append(_dumps({"ids": ids, "weights": w}))
    return "\n".join(out) + "\n"


def write_trace(dst, routing: RoutingOutcome, num_experts: int, model: str | None = None,
                meta: dict | None = None) -> None:
    _write(dst, dump_trace(routing, num_experts, model, meta))


def read_trace(src) -> tuple[RoutingOutcome, dict]:
    lines = _lines(src)
    if not lines:
        raise FormatError("line 1: empty trace file (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"line 1: header is not valid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != TRACE_FORMAT:
        raise FormatError(f"line 1: not a {TRACE_FORMAT} header")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"line 1: unsupported trace version {header.get('version')!r}")
    try:
        n_e, k = int(header["num_experts"]), int(header["top_k"])
    except (KeyError, TypeError, ValueError):
        raise FormatError("line 1: header needs integer num_experts and top_k") from None
    ids, weights = [], []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            row, w = rec["ids"], rec["weights"]
            row = [int(e) for e in row]
            w = [float(v) for v in w]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise FormatError(f"line {no}: malformed record") from None
        if len(row) != k or len(w) != k:
            raise FormatError(f"line {no}: expected {k} ids and weights, got {len(row)}/{len(w)}")
        if len(set(row)) != k or min(row) < 0 or max(row) >= n_e:
            raise FormatError(f"line {no}: ids must be {k} distinct values in [0, {n_e})")
        if not all(np.isfinite(w)):
            raise FormatError(f"line {no}: non-finite weight")
        ids.append(row)
        weights.append(w)
    if "num_tokens" in header and int(header["num_tokens"]) != len(ids):
        raise FormatError(f"line 1: header declares {header['num_tokens']} tokens, file has {len(ids)}")
    routing = RoutingOutcome(np.array(ids, dtype=np.int64).reshape(len(ids), k),
                             np.array(weights, dtype=np.float64).reshape(len(ids), k))
    return routing, header


# --- matrices --------------------------------------------------------------------

def dump_matrix(m: np.ndarray) -> str:
    m = np.asarray(m)
    if m.ndim != 2:
        raise FormatError("only 2-D matrices can be written")
    is_int = np.issubdtype(m.dtype, np.integer)
    out = [f"# matrix v{FORMAT_VERSION} {m.shape[0]} {m.shape[1]} {'int' if is_int else 'float'}"]
    for row in m.tolist():
        out.append(" ".join(str(int(v)) if is_int else repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def write_matrix(dst, m: np.ndarray) -> None:
    _write(dst, dump_matrix(m))


def read_matrix(src) -> np.ndarray:
    lines = _lines(src)
    head = lines[0].split() if lines else []
    if len(head) != 6 or head[:2] != ["#", "matrix"] or head[5] not in ("int", "float"):
        raise FormatError("line 1: expected '# matrix v1 <rows> <cols> <int|float>'")
    if head[2] != f"v{FORMAT_VERSION}":
        raise FormatError(f"line 1: unsupported matrix version {head[2]}")
    try:
        rows, cols = int(head[3]), int(head[4])
    except ValueError:
        raise FormatError("line 1: bad matrix shape") from None
    conv = int if head[5] == "int" else float
    body = [ln for ln in enumerate(lines[1:], start=2) if ln[1].strip()]
    if len(body) != rows:
        raise FormatError(f"line 1: header declares {rows} rows, file has {len(body)}")
    data = []
    for no, line in body:
        try:
            vals = [conv(v) for v in line.split()]
        except ValueError:
            raise FormatError(f"line {no}: non-numeric entry") from None
        if len(vals) != cols:
            raise FormatError(f"line {no}: expected {cols} entries, got {len(vals)}")
        data.append(vals)
    return np.array(data, dtype=np.int64 if conv is int else np.float64).reshape(rows, cols)


# --- placements --------------------------------------------------------------------

def dump_placement(p: Placement) -> str:
    out = [f"# placement v{FORMAT_VERSION} {p.num_experts} {p.num_devices}"]
    out += [" ".join(str(e) for e in d) for d in p.devices]
    return "\n".join(out) + "\n"


def write_placement(dst, p: Placement) -> None:
    _write(dst, dump_placement(p))


def read_placement(src) -> Placement:
    lines = _lines(src)
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[:2] != ["#", "placement"] or head[2] != f"v{FORMAT_VERSION}":
        raise FormatError("line 1: expected '# placement v1 <num_experts> <num_devices>'")
    try:
        n_e, n_d = int(head[3]), int(head[4])
    except ValueError:
        raise FormatError("line 1: bad placement header") from None
    devices = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            devices.append(tuple(int(v) for v in line.split()))
        except ValueError:
            raise FormatError(f"line {no}: non-integer expert id") from None
    if len(devices) != n_d:
        raise FormatError(f"line 1: header declares {n_d} devices, file has {len(devices)}")
    p = Placement(tuple(devices))
    p.validate(n_e)
    return p


# --- reports --------------------------------------------------------------------

def dump_report(sections: dict[str, dict]) -> str:
    """One header line, then one JSON object per section in insertion order."""
    out = [_dumps({"format": REPORT_FORMAT, "version": FORMAT_VERSION, "sections": list(sections)})]
    for name, body in sections.items():
        out.append(_dumps({"section": name, **_plain(body)}))
    return "\n".join(out) + "\n"


def write_report(dst, sections: dict[str, dict]) -> None:
    _write(dst, dump_report(sections))


def read_report(src) -> dict[str, dict]:
    lines = [ln for ln in _lines(src) if ln.strip()]
    if not lines:
        raise FormatError("line 1: empty report")
    header = json.loads(lines[0])
    if header.get("format") != REPORT_FORMAT:
        raise FormatError(f"line 1: not a {REPORT_FORMAT} file")
    out = {}
    for line in lines[1:]:
        rec = json.loads(line)
        out[rec.pop("section")] = rec
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


# --- latency points ---------------------------------------------------------------

def read_points(src) -> list[tuple[float, float]]:
    """Two numbers per line (space or comma separated); ``#`` starts a comment."""
    pts = []
    for no, line in enumerate(_lines(src), start=1):
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"line {no}: expected 'ct seconds'")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise FormatError(f"line {no}: non-numeric value") from None
    return pts


def bundled_olmoe_points() -> list[tuple[float, float]]:
    from importlib.resources import files

    return read_points(files("collabmoe").joinpath("data/olmoe_latency.txt").open())
