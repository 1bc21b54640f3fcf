"""TSPLIB ingestion, dataset and result line formats, labelled data generation.

Dataset lines look like::

    n=4 coords=0.0,0.0;1.0,0.0;1.0,1.0;0.0,1.0 tour=0,1,2,3 len=4.0

Floats are written with ``repr`` so a read/write cycle is exact.
"""

from __future__ import annotations

import math
import os
import re
import tempfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from .errors import InputError, ParseError, SizeError, UnsupportedFormatError
from .tsp import (
    FLOAT_EUCLIDEAN,
    HELD_KARP_MAX_N,
    METRIC_MODES,
    TSPLIB_EUC2D,
    Tour,
    TspInstance,
    gap_percent,
    generate_uniform_instance,
    held_karp,
    tour_length,
)

# Known optimal tour lengths (EUC_2D, rounded metric) for TSPLIB instances.
TSPLIB_OPTIMA = {
    "berlin52": 7542,
    "bier127": 118282,
    "ch130": 6110,
    "ch150": 6528,
    "eil51": 426,
    "eil76": 538,
    "eil101": 629,
    "kroA100": 21282,
    "kroA150": 26524,
    "kroA200": 29368,
    "kroB100": 22141,
    "kroB150": 26130,
    "kroB200": 29437,
    "kroC100": 20749,
    "kroD100": 21294,
    "kroE100": 22068,
    "lin105": 14379,
    "pr76": 108159,
    "pr107": 44303,
    "pr124": 59030,
    "pr136": 96772,
    "pr144": 58537,
    "pr152": 73682,
    "rat99": 1211,
    "rat195": 2323,
    "st70": 675,
}

# Published TSP50 reference points (mean tour length / gap %), kept as constants
# for report annotation only; nothing here is recomputed.
PUBLISHED_TSP50 = {"concorde_len": 5.69, "two_opt_len": 6.02, "two_opt_gap": 5.89}

BUNDLED_TSPLIB = ("berlin52", "eil51")


@dataclass(frozen=True)
class DatasetRecord:
    instance: TspInstance
    optimal_tour: Tour
    optimal_length: float

    def __post_init__(self):
        actual = tour_length(self.instance, self.optimal_tour)
        if not math.isclose(actual, self.optimal_length, rel_tol=1e-9, abs_tol=1e-12):
            raise InputError(
                f"optimal_length {self.optimal_length!r} disagrees with tour length {actual!r}"
            )


@dataclass(frozen=True)
class ResultRecord:
    instance_id: str
    method: str
    iterations: int
    tour: Tour
    length: float
    gap: Optional[float]
    time: float = 0.0
    euclidean_length: Optional[float] = None
    metric_mode: str = FLOAT_EUCLIDEAN

    @staticmethod
    def gap_from(length: float, reference: Optional[float]) -> Optional[float]:
        if reference is None:
            return None
        return gap_percent(length, reference)


# ---------------------------------------------------------------- TSPLIB

_KEY_RE = re.compile(r"^\s*([A-Z_]+)\s*:\s*(.*?)\s*$")


def parse_tsplib(text: str) -> TspInstance:
    header = {}
    coords = {}
    lines = text.splitlines()
    in_coords = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        if in_coords:
            parts = line.split()
            if len(parts) != 3:
                if _KEY_RE.match(line) or line.endswith("_SECTION"):
                    in_coords = False
                else:
                    raise ParseError(f"expected 'index x y', got {line!r}", lineno)
            else:
                try:
                    idx = int(parts[0])
                    xy = (float(parts[1]), float(parts[2]))
                except ValueError:
                    raise ParseError(f"bad coordinate row {line!r}", lineno) from None
                if idx in coords:
                    raise ParseError(f"duplicate node index {idx}", lineno)
                coords[idx] = xy
                continue
        if line.startswith("NODE_COORD_SECTION"):
            in_coords = True
            continue
        if line.endswith("_SECTION"):
            raise UnsupportedFormatError(f"unsupported section {line}", lineno)
        m = _KEY_RE.match(line)
        if not m:
            raise ParseError(f"unrecognised line {line!r}", lineno)
        header[m.group(1)] = m.group(2)

    kind = header.get("TYPE", "").split()[0] if header.get("TYPE") else ""
    if kind != "TSP":
        raise UnsupportedFormatError(f"TYPE must be TSP, got {header.get('TYPE')!r}")
    ewt = header.get("EDGE_WEIGHT_TYPE")
    if ewt != "EUC_2D":
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE {ewt!r}")
    if "DIMENSION" not in header:
        raise ParseError("missing DIMENSION")
    try:
        dim = int(header["DIMENSION"])
    except ValueError:
        raise ParseError(f"bad DIMENSION {header['DIMENSION']!r}") from None
    if len(coords) != dim:
        raise ParseError(f"DIMENSION {dim} but {len(coords)} coordinate rows")
    ids = sorted(coords)
    if ids != list(range(1, dim + 1)):
        raise ParseError("node indices must be 1..DIMENSION")
    xy = np.array([coords[i] for i in ids], dtype=np.float64)
    return TspInstance(xy, TSPLIB_EUC2D, header.get("NAME"))


def load_tsplib(path) -> TspInstance:
    return parse_tsplib(Path(path).read_text(encoding="utf-8"))


def bundled_tsplib(name: str) -> TspInstance:
    if name not in BUNDLED_TSPLIB:
        raise InputError(f"no bundled TSPLIB instance {name!r}; have {BUNDLED_TSPLIB}")
    text = resources.files("deitsp").joinpath("data", f"{name}.tsp").read_text("utf-8")
    return parse_tsplib(text)


def tsplib_reference(instance: TspInstance) -> Optional[float]:
    if instance.name is None:
        return None
    opt = TSPLIB_OPTIMA.get(instance.name)
    return None if opt is None else float(opt)


# -------------------------------------------------------------- line codec


def _fmt(x: float) -> str:
    return repr(float(x))


def _split_fields(line: str, lineno: int, expected: Iterable[str]):
    # fixed field order; every token is key=value
    fields = {}
    keys = []
    for token in line.split(" "):
        if "=" not in token:
            raise ParseError(f"token {token!r} is not key=value", lineno)
        k, v = token.split("=", 1)
        fields[k] = v
        keys.append(k)
    expected = list(expected)
    if keys[: len(expected)] != expected:
        raise ParseError(f"expected fields {expected}, got {keys}", lineno)
    return fields


def format_dataset_record(rec: DatasetRecord) -> str:
    coords = ";".join(f"{_fmt(x)},{_fmt(y)}" for x, y in rec.instance.coords)
    tour = ",".join(str(i) for i in rec.optimal_tour.order)
    parts = [f"n={rec.instance.n}", f"coords={coords}", f"tour={tour}", f"len={_fmt(rec.optimal_length)}"]
    if rec.instance.metric_mode != FLOAT_EUCLIDEAN:
        parts.append(f"metric={rec.instance.metric_mode}")
    return " ".join(parts)


def parse_dataset_line(line: str, lineno: int = 1) -> DatasetRecord:
    f = _split_fields(line, lineno, ["n", "coords", "tour", "len"])
    try:
        n = int(f["n"])
        pts = [tuple(float(v) for v in p.split(",")) for p in f["coords"].split(";")]
        if any(len(p) != 2 for p in pts):
            raise ValueError("coordinate pair malformed")
        order = [int(v) for v in f["tour"].split(",")]
        length = float(f["len"])
        metric = f.get("metric", FLOAT_EUCLIDEAN)
        if metric not in METRIC_MODES:
            raise ValueError(f"unknown metric {metric!r}")
        if len(pts) != n or len(order) != n:
            raise ValueError(f"n={n} but {len(pts)} coordinates and {len(order)} tour entries")
        return DatasetRecord(TspInstance(np.array(pts), metric), Tour(order), length)
    except (ValueError, InputError, SizeError) as exc:
        raise ParseError(str(exc), lineno) from None


def atomic_write(path, content):
    """Write str or bytes via a temp file + rename, so readers never see a partial file."""
    path = Path(path)
    data = content.encode("utf-8") if isinstance(content, str) else content
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(records: Iterable[DatasetRecord], path):
    atomic_write(path, "".join(format_dataset_record(r) + "\n" for r in records))


def read_dataset(path) -> List[DatasetRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            out.append(parse_dataset_line(line, lineno))
    return out


def format_result_record(rec: ResultRecord, include_time: bool = True) -> str:
    parts = [
        f"id={rec.instance_id}",
        f"method={rec.method}",
        f"iters={rec.iterations}",
        "tour=" + ",".join(str(i) for i in rec.tour.order),
        f"len={_fmt(rec.length)}",
        "gap=" + ("NA" if rec.gap is None else _fmt(rec.gap)),
        "len_euclid=" + ("NA" if rec.euclidean_length is None else _fmt(rec.euclidean_length)),
        f"metric={rec.metric_mode}",
    ]
    if include_time:
        parts.append(f"time={_fmt(rec.time)}")
    return " ".join(parts)


def parse_result_line(line: str, lineno: int = 1) -> ResultRecord:
    f = _split_fields(line, lineno, ["id", "method", "iters", "tour", "len", "gap", "len_euclid", "metric"])
    try:
        return ResultRecord(
            instance_id=f["id"],
            method=f["method"],
            iterations=int(f["iters"]),
            tour=Tour([int(v) for v in f["tour"].split(",")]),
            length=float(f["len"]),
            gap=None if f["gap"] == "NA" else float(f["gap"]),
            euclidean_length=None if f["len_euclid"] == "NA" else float(f["len_euclid"]),
            metric_mode=f["metric"],
            time=float(f.get("time", 0.0)),
        )
    except (ValueError, InputError) as exc:
        raise ParseError(str(exc), lineno) from None


def write_results(records: Iterable[ResultRecord], path, include_time: bool = True):
    atomic_write(path, "".join(format_result_record(r, include_time) + "\n" for r in records))


def read_results(path) -> List[ResultRecord]:
    with open(path, encoding="utf-8") as fh:
        return [
            parse_result_line(line.rstrip("\n"), k)
            for k, line in enumerate(fh, start=1)
            if line.strip()
        ]


# ---------------------------------------------------------- generation


def generate_labeled_dataset(n: int, count: int, seed: int) -> List[DatasetRecord]:
    """`count` uniform instances labelled with exact optima; record k uses stream (seed, k)."""
    if not 3 <= n <= HELD_KARP_MAX_N:
        raise SizeError(f"labelled data needs 3 <= n <= {HELD_KARP_MAX_N}, got {n}")
    records = []
    for k in range(count):
        inst = generate_uniform_instance(n, [seed, k])
        tour = held_karp(inst)
        records.append(DatasetRecord(inst, tour, tour_length(inst, tour)))
    return records
