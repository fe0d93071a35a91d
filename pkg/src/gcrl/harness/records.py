"""Run records as line-delimited JSON.

The first line is a header (env, mode, seed, config hash and the metric
settings of the run); each following line is one checkpoint with its step,
mean greedy return and averaged training diagnostics.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from ..trainer import RunRecord

FORMAT = "gcrl-record/1"


def _clean(x):
    # json has no nan/inf; keep them readable and round-trippable
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def dumps(record: RunRecord, meta: dict | None = None) -> str:
    header = {"format": FORMAT, "env": record.env, "mode": record.mode, "seed": record.seed,
              "config_hash": record.config_hash, "meta": meta or {}}
    lines = [json.dumps(header, sort_keys=True)]
    for step, ret, diag in zip(record.eval_steps, record.eval_returns, record.diagnostics):
        row = {"step": int(step), "return": float(ret), "diagnostics": {k: _clean(float(v)) for k, v in diag.items()}}
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + "\n"


def write_record(path, record: RunRecord, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(record, meta))
    return path


def _num(x):
    return float(x) if isinstance(x, str) else x


def loads(text: str) -> tuple[RunRecord, dict]:
    """Parse a record; returns it with the header's ``meta`` mapping."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty record")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT:
        raise ValueError(f"not a {FORMAT} file")
    rec = RunRecord(header["env"], header["mode"], int(header["seed"]), header["config_hash"])
    for ln in lines[1:]:
        row = json.loads(ln)
        rec.eval_steps.append(int(row["step"]))
        rec.eval_returns.append(float(row["return"]))
        rec.diagnostics.append({k: _num(v) for k, v in row["diagnostics"].items()})
    return rec, header.get("meta", {})


def read_record(path) -> tuple[RunRecord, dict]:
    return loads(Path(path).read_text())


def record_name(env: str, mode: str, seed: int) -> str:
    return f"{env}__{mode}__seed{seed}.rec"
