"""Output files stamped with the config hash and artifact version.

All writers sort keys and format floats with ``repr`` so that re-running an
experiment with the same config reproduces every file byte for byte. No
timestamps or host names are written.
"""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .config import ARTIFACT_VERSION, config_hash


def stamp(cfg) -> dict:
    return {"config_hash": config_hash(cfg), "artifact_version": ARTIFACT_VERSION}


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if hasattr(v, "value") and not isinstance(v, (str, int, float, bool)):
        return v.value
    return v


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, allow_nan=False)


def write_json(path, obj: dict, st: dict):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    body = dict(obj)
    body.update(st)
    with open(path, "w") as fh:
        fh.write(json.dumps(_plain(body), sort_keys=True, indent=2, allow_nan=False) + "\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


class JsonlWriter:
    """Append-only JSONL log; every row carries the stamp."""

    def __init__(self, path, st: dict):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.path, self.st = path, st
        self.fh = open(path, "w")

    def write(self, row: dict):
        body = dict(row)
        body.update(self.st)
        self.fh.write(dumps(body) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


def _cell(v):
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return v


def write_csv(path, rows, st: dict, columns=None):
    """Rows of dicts as CSV with the stamp appended as two trailing columns."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    rows = list(rows)
    cols = list(columns or [])
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    cols += [k for k in ("config_hash", "artifact_version") if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            body = dict(r)
            body.update(st)
            w.writerow({k: _cell(body.get(k)) for k in cols})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
