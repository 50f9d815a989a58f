"""Robustness report rows and their CSV/JSON emitters.

CSV output carries no timestamps so reruns of one config are byte-identical;
the JSON copy adds a creation time.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidInputError

PHASES = ("O-Backdoor", "O-Robustness", "P-Robustness")


@dataclass(frozen=True)
class ReportRow:
    model_role: str
    phase: str
    c_acc: float  # fractions in [0, 1]; rendered as percentages
    asr: float

    def __post_init__(self):
        if self.phase not in PHASES:
            raise InvalidInputError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for v in (self.c_acc, self.asr):
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"rates must lie in [0, 1], got {v}")


@dataclass
class RobustnessReport:
    config_hash: str
    seed: int
    rows: list[ReportRow] = field(default_factory=list)

    def add(self, model_role: str, phase: str, c_acc: float, asr: float) -> ReportRow:
        row = ReportRow(model_role, phase, float(c_acc), float(asr))
        self.rows.append(row)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model_role,phase,c_acc,asr,seed,config_hash\n")
        for r in self.rows:
            buf.write(f"{r.model_role},{r.phase},{100 * r.c_acc:.2f},{100 * r.asr:.2f},"
                      f"{self.seed},{self.config_hash}\n")
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed,
                "rows": [{"model_role": r.model_role, "phase": r.phase,
                          "c_acc": round(100 * r.c_acc, 2), "asr": round(100 * r.asr, 2)}
                         for r in self.rows]}

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{stem}.csv"
        json_path = out / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        write_json(json_path, self.to_dict())
        return csv_path, json_path


def write_json(path: str | Path, payload: dict, stamp: bool = True):
    body = dict(payload)
    if stamp:
        body["created"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_table(path: str | Path, header: list[str], rows: list[list]):
    """Small CSV writer with fixed 6-decimal floats, for sweep tables."""
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def write_qra_rows(path: str | Path, rows):
    """``rows``: (generator trained on, evaluated on, unperturbed ASR, QraReport)."""
    buf = io.StringIO()
    buf.write("trained_on,evaluated_on,asr_unperturbed,c_asr,p_asr\n")
    for src, dst, base, rep in rows:
        buf.write(f"{src},{dst},{100 * base:.2f},{100 * rep.c_asr:.2f},{100 * rep.p_asr:.2f}\n")
    Path(path).write_text(buf.getvalue())
