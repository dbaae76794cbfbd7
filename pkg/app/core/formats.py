"""Text formats shared by the CLI, the API and the experiment runner.

All decimals are written with 17 significant digits so that a float64 survives
a write/read round trip bit for bit.
"""
import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, List, Sequence, TextIO, Tuple, Union

import numpy as np

from app.core.exceptions import InvalidInputError
from app.schemas.cloud import CloudMeta, PointCloud, ScalarField, Window

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
CLOUD_HEADER = "#cloud v1"


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def fmt_cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    if v is None:
        return ""
    return str(v)


# --- Clouds ---
def cloud_to_text(cloud: PointCloud) -> str:
    w = cloud.window
    seed = cloud.meta.seed if cloud.meta.seed is not None else 0
    gamma = cloud.meta.intensity if cloud.meta.intensity is not None else float("nan")
    header = (
        f"{CLOUD_HEADER} seed={seed} gamma={fmt_float(gamma)} "
        f"window={fmt_float(w.center[0])} {fmt_float(w.center[1])} {fmt_float(w.width)} {fmt_float(w.height)}"
    )
    if w.angle != 0.0:
        header += f" angle={fmt_float(w.angle)}"
    lines = [header]
    order = np.argsort(cloud.ids, kind="stable")
    for k in order:
        x, y = cloud.points[k]
        lines.append(f"{int(cloud.ids[k])} {fmt_float(x)} {fmt_float(y)}")
    return "\n".join(lines) + "\n"


def _parse_header(line: str) -> Tuple[int, float, Window]:
    if not line.startswith(CLOUD_HEADER):
        raise InvalidInputError(f"not a cloud file (header: {line[:40]!r})")
    tokens = line[len(CLOUD_HEADER):].split()
    seed, gamma, window_vals, angle = 0, float("nan"), None, 0.0
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        if tok.startswith("seed="):
            seed = int(tok[5:])
        elif tok.startswith("gamma="):
            gamma = float(tok[6:])
        elif tok.startswith("window="):
            window_vals = [float(tok[7:])] + [float(t) for t in tokens[k + 1:k + 4]]
            k += 3
        elif tok.startswith("angle="):
            angle = float(tok[6:])
        k += 1
    if window_vals is None or len(window_vals) != 4:
        raise InvalidInputError("cloud header is missing 'window=<cx> <cy> <w> <h>'")
    cx, cy, w, h = window_vals
    return seed, gamma, Window(center=(cx, cy), width=w, height=h, angle=angle)


def cloud_from_text(text: str) -> PointCloud:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidInputError("empty cloud file")
    seed, gamma, window = _parse_header(lines[0])
    rows = [ln.split() for ln in lines[1:]]
    ids = [int(r[0]) for r in rows]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise InvalidInputError("cloud file ids must be strictly ascending")
    pts = [(float(r[1]), float(r[2])) for r in rows]
    meta = CloudMeta(seed=seed, intensity=None if math.isnan(gamma) else gamma, source="file")
    return PointCloud(points=np.array(pts, dtype=float).reshape(-1, 2), ids=ids, window=window, meta=meta)


def write_cloud(cloud: PointCloud, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cloud_to_text(cloud), newline="\n")
    logger.info(f"💾 Wrote {len(cloud)} points to {path}")
    return path


def read_cloud(path: PathLike) -> PointCloud:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InvalidInputError(f"cannot read cloud: {e}")
    return cloud_from_text(text)


# --- Fields ---
def write_field(field: ScalarField, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    order = np.argsort(field.cloud.ids, kind="stable")
    body = "".join(f"{int(field.cloud.ids[k])} {fmt_float(field.values[k])}\n" for k in order)
    path.write_text(body, newline="\n")
    return path


def read_field(path: PathLike, cloud: PointCloud) -> ScalarField:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise InvalidInputError(f"cannot read field: {e}")
    mapping = {}
    for n, ln in enumerate(lines, start=1):
        if not ln.strip() or ln.startswith("#"):
            continue
        try:
            pid, val = ln.split()
            mapping[int(pid)] = float(val)
        except ValueError:
            raise InvalidInputError(f"field line {n}: expected 'id value', got {ln!r}")
    try:
        return ScalarField.from_mapping(cloud, mapping)
    except ValueError as e:
        raise InvalidInputError(str(e))


# --- CSV / JSON ---
def write_csv_stream(fh: TextIO, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    n = 0
    for row in rows:
        writer.writerow([fmt_cell(v) for v in row])
        n += 1
    return n


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        return write_csv_stream(fh, header, rows)


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", newline="\n")
    return path


def _json_default(o: Any):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def json_text(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
