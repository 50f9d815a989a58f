"""Error profiles along the straight line between two parameter vectors."""

from __future__ import annotations

import enum
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import InvalidInputError
from .nn import ArchSpec, Model, param_interpolate, predict

DEFAULT_GRID = 21
DROP_LEVEL = 0.8


class CurveKind(str, enum.Enum):
    BACKDOOR = "backdoor"
    CLEAN = "clean"


@dataclass(frozen=True)
class LmcCurve:
    ts: tuple[float, ...]
    errors: tuple[float, ...]
    kind: CurveKind
    endpoints: tuple[str, str] = ("w0", "w1")

    def __post_init__(self):
        object.__setattr__(self, "kind", CurveKind(self.kind))
        if len(self.ts) != len(self.errors) or len(self.ts) < 2:
            raise InvalidInputError("curve needs matching t/error columns with at least two points")
        if self.ts[0] != 0.0 or self.ts[-1] != 1.0:
            raise InvalidInputError("curve must cover t=0 and t=1")
        if any(b <= a for a, b in zip(self.ts, self.ts[1:])):
            raise InvalidInputError("t must be strictly increasing")

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.ts, self.errors))

    def at(self, t: float) -> float:
        return self.errors[self.ts.index(t)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,error\n")
        for t, e in self.points:
            buf.write(f"{t:.6f},{e:.6f}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class BarrierStat:
    max_error: float
    t_at_max: float
    auc: float
    t_drop: float

    def as_dict(self) -> dict:
        return {"max_error": self.max_error, "t_at_max": self.t_at_max,
                "auc": self.auc, "t_drop": self.t_drop}


def grid_points(grid: int) -> list[float]:
    # j / (grid - 1) rather than linspace so shared points of nested grids agree exactly
    if grid < 2:
        raise InvalidInputError(f"grid must be >= 2, got {grid}")
    return [j / (grid - 1) for j in range(grid)]


def curve_error(model: Model, dataset: LabeledDataset) -> float:
    """1 - accuracy against ``dataset.labels``; for a triggered set those are the target, so 1 - ASR."""
    hits = int(np.sum(predict(model, dataset.flat()) == dataset.labels))
    return 1.0 - hits / len(dataset)


def lmc_scan(w0: np.ndarray, w1: np.ndarray, arch: ArchSpec, dataset: LabeledDataset,
             grid: int = DEFAULT_GRID, kind: CurveKind | str = CurveKind.BACKDOOR,
             endpoints: tuple[str, str] = ("w0", "w1"), workers: int = 1) -> LmcCurve:
    """Error of ``(1-t) w0 + t w1`` at ``t = j/(grid-1)``.

    Pass the triggered test set for ``kind="backdoor"`` and the clean test
    set for ``kind="clean"``. The endpoints are evaluated on the original
    vectors, not on interpolants, so they match a standalone evaluation exactly.
    Grid points are independent; ``workers > 1`` evaluates them on a thread pool.
    """
    w0 = np.asarray(w0)
    w1 = np.asarray(w1)
    if w0.shape != w1.shape or w0.shape != (arch.n_params,):
        raise InvalidInputError(f"parameter vectors of length {w0.size} and {w1.size} "
                                f"do not match arch with {arch.n_params}")
    if dataset.input_dim != arch.input_dim:
        raise InvalidInputError("dataset does not match the architecture input")
    ts = grid_points(grid)

    def point(t: float) -> float:
        if t == 0.0:
            p = w0
        elif t == 1.0:
            p = w1
        else:
            p = param_interpolate(w0, w1, t)
        return curve_error(Model(arch, p), dataset)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            errs = list(pool.map(point, ts))
    else:
        errs = [point(t) for t in ts]
    return LmcCurve(tuple(ts), tuple(errs), CurveKind(kind), tuple(endpoints))


def lmc_between_purified(w_a: np.ndarray, w_b: np.ndarray, arch: ArchSpec, dataset: LabeledDataset,
                         grid: int = DEFAULT_GRID, kind: CurveKind | str = CurveKind.BACKDOOR,
                         endpoints: tuple[str, str] = ("a", "b"), workers: int = 1) -> LmcCurve:
    """Scan between two purified models, typically some tuner against EP."""
    return lmc_scan(w_a, w_b, arch, dataset, grid, kind, endpoints, workers)


def barrier_stats(curve: LmcCurve) -> BarrierStat:
    e = np.asarray(curve.errors, dtype=np.float64)
    t = np.asarray(curve.ts, dtype=np.float64)
    k = int(np.argmax(e))
    auc = float(np.sum((t[1:] - t[:-1]) * (e[1:] + e[:-1]) / 2))
    below = np.flatnonzero(e < DROP_LEVEL)
    t_drop = float(t[below[0]]) if below.size else 1.0
    return BarrierStat(float(e[k]), float(t[k]), auc, t_drop)
