"""Post-purification probes: the retuning attack and the query-based
reactivation attack (a learned, budget-bounded input perturbation)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, Provenance, TriggerSpec, apply_trigger_dataset, concat, shuffled
from .errors import InvalidInputError, TrainingDivergedError
from .nn import (
    DTYPE,
    ArchSpec,
    Model,
    SgdConfig,
    backward,
    ce_logit_grad,
    cross_entropy,
    forward,
    forward_cache,
    init_params,
    log_softmax,
    make_rng,
    predict,
    sgd_step,
    softmax,
)
from .purifier import derive_seed
from .trainer import batch_stream, batches_per_epoch, run_sgd

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 16 / 255


@dataclass(frozen=True)
class RaConfig:
    n_poison: int
    total: int = 1000
    epochs: int = 5
    lr: float = 0.01
    seed: int = 0
    batch_size: int = 64
    momentum: float = 0.9

    def __post_init__(self):
        if self.n_poison < 1:
            raise InvalidInputError("the retuning set needs at least one poisoned sample")
        if self.n_poison >= self.total:
            raise InvalidInputError("n_poison must be smaller than total")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.batch_size, self.epochs, self.seed)


def build_ra_dataset(train_pool: LabeledDataset, trig: TriggerSpec, target: int, cfg: RaConfig,
                     n_training_poison: int | None = None) -> LabeledDataset:
    """``n_poison`` triggered target-labelled samples plus benign fill-up to ``total``."""
    if n_training_poison is not None and cfg.n_poison >= 0.01 * n_training_poison:
        log.warning("RA uses %d poisoned samples, not below 1%% of the %d used in training",
                     cfg.n_poison, n_training_poison)
    clean = np.flatnonzero(train_pool.provenance == Provenance.CLEAN)
    non_target = clean[train_pool.original_labels[clean] != target]
    if non_target.size < cfg.n_poison or clean.size < cfg.total:
        raise InvalidInputError(f"pool of {clean.size} clean examples is too small for RA set of {cfg.total}")
    rng = make_rng(derive_seed(cfg.seed, 3))
    p_idx = rng.choice(non_target, size=cfg.n_poison, replace=False)
    rest = np.setdiff1d(clean, p_idx)
    b_idx = rng.choice(rest, size=cfg.total - cfg.n_poison, replace=False)
    poisoned = apply_trigger_dataset(train_pool.subset(p_idx), trig, "train")
    poisoned.labels[:] = target
    return shuffled(concat(poisoned, train_pool.subset(b_idx)), rng)


def retuning_attack(purified: Model, ra_set: LabeledDataset, cfg: RaConfig) -> Model:
    return purified.with_params(run_sgd(purified.arch, purified.params, ra_set, cfg.sgd(),
                                        where="retuning attack"))


# ---------------------------------------------------------------------------
# query-based reactivation


@dataclass(frozen=True, eq=False)
class QraGenerator:
    mlp: Model
    epsilon: float = DEFAULT_EPSILON
    alpha: float = 0.2

    def __post_init__(self):
        w = self.mlp.arch.layer_widths
        if w[0] != w[-1]:
            raise InvalidInputError("generator output width must equal its input width")
        if self.epsilon < 0:
            raise InvalidInputError("epsilon must be nonnegative")

    @property
    def dim(self) -> int:
        return self.mlp.arch.input_dim


def make_generator(d: int, hidden: int = 256, seed: int = 0, epsilon: float = DEFAULT_EPSILON,
                   alpha: float = 0.2) -> QraGenerator:
    arch = ArchSpec((d, hidden, hidden, d))
    return QraGenerator(Model(arch, init_params(arch, seed)), epsilon, alpha)


def perturb(gen: QraGenerator, x: np.ndarray) -> np.ndarray:
    """``clip(x + eps * tanh(phi(x)), 0, 1)`` on flat rows."""
    x = np.asarray(x, dtype=DTYPE)
    x64 = x.astype(np.float64)
    direction = np.tanh(forward(gen.mlp, x).astype(np.float64))
    out = np.clip(x64 + gen.epsilon * direction, 0.0, 1.0).astype(DTYPE)
    # float32 rounding can overshoot the budget by one ulp; step those back toward x
    over = np.abs(out.astype(np.float64) - x64) > gen.epsilon
    while np.any(over):
        out[over] = np.nextafter(out[over], x[over])
        over = np.abs(out.astype(np.float64) - x64) > gen.epsilon
    return out


def qra_apply(gen: QraGenerator, x):
    """Perturb one ImageExample (provenance kept)."""
    from dataclasses import replace

    flat = x.pixels.reshape(1, -1)
    if flat.shape[1] != gen.dim:
        raise InvalidInputError("image does not match generator width")
    return replace(x, pixels=perturb(gen, flat).reshape(x.pixels.shape))


def perturb_dataset(gen: QraGenerator, ds: LabeledDataset) -> LabeledDataset:
    if ds.input_dim != gen.dim:
        raise InvalidInputError("dataset does not match generator width")
    px = perturb(gen, ds.flat()).reshape(ds.pixels.shape)
    return LabeledDataset(px, ds.labels.copy(), ds.class_count, ds.provenance.copy(),
                          ds.original_labels.copy())


def kl_to_target(target_probs: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Row-wise KL(target || softmax(logits))."""
    with np.errstate(divide="ignore", invalid="ignore"):
        logt = np.where(target_probs > 0, np.log(target_probs), 0.0)
    return np.sum(target_probs * (logt - log_softmax(logits)), axis=1)


def qra_loss_and_grad(gen_params: np.ndarray, gen: QraGenerator, x: np.ndarray, y: np.ndarray,
                      target_probs: np.ndarray, w_p: Model, w_e: Model, alpha: float):
    arch = gen.mlp.arch
    z, gacts = forward_cache(arch, gen_params, x)
    direction = np.tanh(z)
    u = x + DTYPE(gen.epsilon) * direction
    xp = np.clip(u, 0.0, 1.0)
    n = x.shape[0]

    lp, pacts = forward_cache(w_p.arch, w_p.params, xp)
    loss = float(np.sum(kl_to_target(target_probs, lp), dtype=np.float64) / n)
    _, dx = backward(w_p.arch, w_p.params, pacts, (softmax(lp) - target_probs) / n, input_grad=True)
    if alpha:
        le, eacts = forward_cache(w_e.arch, w_e.params, xp)
        loss += alpha * cross_entropy(le, y)
        _, dxe = backward(w_e.arch, w_e.params, eacts, alpha * ce_logit_grad(le, y), input_grad=True)
        dx = dx + dxe
    du = dx * ((u > 0) & (u < 1))
    dz = du * DTYPE(gen.epsilon) * (1 - direction ** 2)
    grad, _ = backward(arch, gen_params, gacts, dz.astype(DTYPE))
    return loss, grad


def qra_train(gen: QraGenerator, w_p: Model, w_ra: Model, w_e: Model, d_c: LabeledDataset,
              epochs: int = 50, lr: float = 0.1, seed: int = 0, batch_size: int = 64,
              momentum: float = 0.9, history: list | None = None) -> QraGenerator:
    """Fit the generator so the purified model on perturbed inputs mimics the retuned
    model on clean inputs, with an alpha-weighted CE term keeping the EP surrogate
    on the true label. The three classifiers are only read."""
    archs = {w_p.arch, w_ra.arch, w_e.arch}
    if len(archs) != 1:
        raise InvalidInputError("purified, retuned and EP models must share an architecture")
    if w_p.arch.input_dim != gen.dim or d_c.input_dim != gen.dim:
        raise InvalidInputError("generator width does not match classifier input")
    x_all = d_c.flat()
    y_all = d_c.original_labels
    target_all = softmax(forward(w_ra, x_all))
    cfg = SgdConfig(lr, momentum, batch_size, epochs, seed)
    params = gen.mlp.params.copy()
    velocity = np.zeros_like(params)
    n = len(d_c)
    total = epochs * batches_per_epoch(n, batch_size)
    running, count, current = 0.0, 0, 0
    for it, (epoch, idx) in enumerate(batch_stream(n, batch_size, make_rng(seed))):
        if it == total:
            break
        if epoch != current and history is not None:
            history.append(running / count)
            running, count, current = 0.0, 0, epoch
        loss, grad = qra_loss_and_grad(params, gen, x_all[idx], y_all[idx], target_all[idx],
                                       w_p, w_e, gen.alpha)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, "QRA generator training")
        params, velocity = sgd_step(params, grad, velocity, cfg)
        running += loss
        count += 1
    if history is not None and count:
        history.append(running / count)
    return QraGenerator(gen.mlp.with_params(params), gen.epsilon, gen.alpha)


def build_qra_dataset(train_pool: LabeledDataset, trig: TriggerSpec, target: int, n_benign: int = 500,
                      n_poisoned: int = 500, seed: int = 0) -> LabeledDataset:
    """Benign samples plus triggered non-target samples; every label is the true class."""
    clean = np.flatnonzero(train_pool.provenance == Provenance.CLEAN)
    rng = make_rng(derive_seed(seed, 4))
    non_target = clean[train_pool.original_labels[clean] != target]
    if non_target.size < n_poisoned or clean.size < n_benign + n_poisoned:
        raise InvalidInputError("pool too small for the QRA training set")
    p_idx = rng.choice(non_target, size=n_poisoned, replace=False)
    b_idx = rng.choice(np.setdiff1d(clean, p_idx), size=n_benign, replace=False)
    poisoned = apply_trigger_dataset(train_pool.subset(p_idx), trig, "eval")
    return shuffled(concat(train_pool.subset(b_idx), poisoned), rng)


@dataclass(frozen=True)
class QraReport:
    c_asr: float
    p_asr: float


def qra_evaluate(gen: QraGenerator, model: Model, clean_test: LabeledDataset,
                 backdoor_test: LabeledDataset, target: int) -> QraReport:
    if model.arch.input_dim != gen.dim:
        raise InvalidInputError("generator width does not match model input")
    keep = clean_test.original_labels != target
    xc = perturb(gen, clean_test.flat()[keep])
    xb = perturb(gen, backdoor_test.flat())
    return QraReport(float(np.mean(predict(model, xc) == target)),
                     float(np.mean(predict(model, xb) == target)))


def qra_transfer(gen: QraGenerator, other_purified: Model, clean_test: LabeledDataset,
                 backdoor_test: LabeledDataset, target: int, trained_on: Model | None = None) -> QraReport:
    if trained_on is not None and trained_on.arch != other_purified.arch:
        raise InvalidInputError("transfer target has a different architecture")
    return qra_evaluate(gen, other_purified, clean_test, backdoor_test, target)
