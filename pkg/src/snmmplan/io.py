"""Plain-text artifacts: rasters with JSON sidecars, point CSVs, JSON files."""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


def write_raster(path, values, grid, fmt="%.10g", kind="density"):
    """Write one lattice row per line (lowest ``y`` first) plus ``<path>.json``.

    The sidecar records spacing, bounds and lattice size so the raster can be
    placed back on the workspace.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values)
    if values.shape != grid.shape:
        raise ValueError(f"raster shape {values.shape} does not match grid {grid.shape}")
    np.savetxt(path, values, fmt=fmt, delimiter=" ")
    header = {
        "kind": kind,
        "nx": grid.nx,
        "ny": grid.ny,
        "dx": grid.dx,
        "dy": grid.dy,
        "bounds": grid.workspace.to_dict(),
        "row_order": "increasing y",
        "cell_centers": True,
    }
    write_json(path.with_name(path.name + ".json"), header)
    return path


def read_raster(path):
    path = Path(path)
    values = np.loadtxt(path, ndmin=2)
    header = read_json(path.with_name(path.name + ".json"))
    return values, header


def write_occupancy_raster(path, grid):
    return write_raster(path, grid.q.astype(int), grid, fmt="%d", kind="occupancy")


def write_points_csv(path, points):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in np.asarray(points, dtype=float):
            w.writerow([repr(float(x)), repr(float(y))])
    return path


def read_points_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                continue  # header
    return np.asarray(rows, dtype=float).reshape(-1, 2)


def write_rows_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_rows_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return repr(float(v))  # np.float64 repr carries a type prefix
    return v


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=_default).encode()
    return hashlib.sha256(blob).hexdigest()
