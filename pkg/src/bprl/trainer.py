from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .data import LabeledDataset
from .errors import InvalidInputError, TrainingDivergedError
from .nn import (
    ArchSpec,
    Model,
    SgdConfig,
    init_params,
    loss_and_grad_params,
    make_rng,
    predict,
    sgd_step,
)

GradFn = Callable[[np.ndarray, np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]


@dataclass(frozen=True)
class EvalReport:
    c_acc: float
    asr: float
    n_clean: int
    n_triggered: int


def batch_stream(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[int, np.ndarray]]:
    """Endless (epoch, index batch) stream; each epoch is a fresh permutation."""
    epoch = 0
    while True:
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            yield epoch, perm[s:s + batch_size]
        epoch += 1


def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def run_sgd(arch: ArchSpec, params: np.ndarray, data: LabeledDataset, cfg: SgdConfig,
            iterations: int | None = None, grad_fn: GradFn | None = None,
            history: list | None = None, where: str = "training") -> np.ndarray:
    """Minibatch heavy-ball SGD over ``data``.

    ``grad_fn(params, x, y)`` replaces the plain loss gradient; the tuners that
    evaluate the gradient somewhere other than the current iterate plug in
    here. Runs ``cfg.epochs`` passes unless ``iterations`` is given.
    """
    if data.input_dim != arch.input_dim:
        raise InvalidInputError(f"dataset input dim {data.input_dim} != arch input {arch.input_dim}")
    if grad_fn is None:
        def grad_fn(p, x, y):
            return loss_and_grad_params(arch, p, x, y)
    x_all = data.flat()
    y_all = data.labels
    n = len(data)
    if iterations is None:
        iterations = cfg.epochs * batches_per_epoch(n, cfg.batch_size)
    rng = make_rng(cfg.seed)
    params = params.copy()
    velocity = np.zeros_like(params)
    epoch_loss, epoch_count, current = 0.0, 0, 0
    for it, (epoch, idx) in enumerate(batch_stream(n, cfg.batch_size, rng)):
        if it == iterations:
            break
        if epoch != current:
            if history is not None:
                history.append(epoch_loss / max(epoch_count, 1))
            epoch_loss, epoch_count, current = 0.0, 0, epoch
        with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are caught just below
            loss, grad = grad_fn(params, x_all[idx], y_all[idx])
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(epoch, where)
        params, velocity = sgd_step(params, grad, velocity, cfg)
        epoch_loss += loss
        epoch_count += 1
    if history is not None and epoch_count:
        history.append(epoch_loss / epoch_count)
    if not np.all(np.isfinite(params)):
        raise TrainingDivergedError(current, where)
    return params


def train(arch: ArchSpec, data: LabeledDataset, cfg: SgdConfig, history: list | None = None) -> Model:
    """Train from a seeded Glorot init; poisoned labels are used as given."""
    params = init_params(arch, cfg.seed)
    return Model(arch, run_sgd(arch, params, data, cfg, history=history))


def accuracy(model: Model, ds: LabeledDataset) -> float:
    return float(np.mean(predict(model, ds.flat()) == ds.labels))


def evaluate(model: Model, clean_test: LabeledDataset, backdoor_test: LabeledDataset) -> EvalReport:
    """C-Acc on the clean set and ASR on the triggered set (whose labels are the target)."""
    n_clean, n_trig = len(clean_test), len(backdoor_test)
    correct = int(np.sum(predict(model, clean_test.flat()) == clean_test.labels))
    hits = int(np.sum(predict(model, backdoor_test.flat()) == backdoor_test.labels))
    return EvalReport(correct / n_clean, hits / n_trig, n_clean, n_trig)
