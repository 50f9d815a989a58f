"""Purification tuners: plain fine-tuning, exact purification, SAM, PAM, and a
mask/pattern trigger inversion that supplies reversed samples for PAM."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import (
    LabeledDataset,
    Provenance,
    TriggerSpec,
    apply_trigger_dataset,
)
from .errors import InvalidInputError
from .nn import (
    DEGENERATE_NORM,
    DTYPE,
    ArchSpec,
    Model,
    SgdConfig,
    backward,
    ce_logit_grad,
    cross_entropy,
    forward_cache,
    loss_and_grad_params,
    make_rng,
    param_axpy_unit,
    predict,
)
from .trainer import batches_per_epoch, run_sgd

log = logging.getLogger(__name__)


def derive_seed(seed: int, tag: int) -> int:
    """Independent child seed, so selection draws never perturb the batch order."""
    return int(np.random.SeedSequence((int(seed), int(tag))).generate_state(1, np.uint64)[0])


def fraction_count(frac: float, n: int) -> int:
    return int(np.floor(frac * n + 1e-9))


def _require_clean(ds: LabeledDataset, what: str):
    if np.any(ds.provenance != Provenance.CLEAN):
        raise InvalidInputError(f"{what} must contain clean examples only")


@dataclass(frozen=True)
class SamConfig:
    rho_sam: float
    lr: float = 0.01
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if not self.rho_sam > 0:
            raise InvalidInputError("rho_sam must be > 0")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.batch_size, self.epochs, self.seed)


@dataclass(frozen=True)
class PamConfig:
    rho: float
    lr: float = 0.01
    iterations: int = 100
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.rho < 0:
            raise InvalidInputError("rho must be >= 0")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be positive")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.batch_size, 1, self.seed)

    @classmethod
    def for_epochs(cls, rho: float, n: int, epochs: int, **kw) -> "PamConfig":
        bs = kw.get("batch_size", 64)
        return cls(rho=rho, iterations=epochs * batches_per_epoch(n, bs), **kw)


@dataclass(frozen=True)
class InversionConfig:
    target: int
    lambda_mask: float = 1e-2
    steps: int = 300
    lr: float = 0.1
    seed: int = 0
    batch_size: int = 64
    momentum: float = 0.9
    mask_init: float = -3.0

    def __post_init__(self):
        if self.lambda_mask < 0:
            raise InvalidInputError("lambda_mask must be >= 0")


@dataclass(frozen=True, eq=False)
class ReversedTrigger:
    mask: np.ndarray
    pattern: np.ndarray

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        return ((1 - self.mask) * pixels + self.mask * self.pattern).astype(DTYPE)


def finetune_plain(model: Model, d_t: LabeledDataset, cfg: SgdConfig) -> Model:
    _require_clean(d_t, "fine-tuning set")
    return model.with_params(run_sgd(model.arch, model.params, d_t, cfg, where="fine-tuning"))


def ep_tuning_set(d_t: LabeledDataset, trig: TriggerSpec, frac: float, seed: int) -> LabeledDataset:
    """Trigger a seeded ``frac`` of the tuning set while keeping the true labels."""
    if not 0.0 < frac < 1.0:
        raise InvalidInputError("frac must lie in (0, 1)")
    k = fraction_count(frac, len(d_t))
    idx = np.sort(make_rng(derive_seed(seed, 1)).choice(len(d_t), size=k, replace=False))
    return apply_trigger_dataset(d_t, trig, "train", idx)


def finetune_ep(model: Model, d_t: LabeledDataset, trig: TriggerSpec, frac: float = 0.10,
                cfg: SgdConfig | None = None) -> Model:
    _require_clean(d_t, "tuning set")
    tuned = ep_tuning_set(d_t, trig, frac, cfg.seed)
    return model.with_params(run_sgd(model.arch, model.params, tuned, cfg, where="exact purification"))


def sam_offset(base_grad, rho_sam: float):
    """Wrap any ``(p, x, y) -> (loss, g)`` so the gradient is read at ``p + rho g/||g||``."""
    def grad_fn(p, x, y):
        loss, g = base_grad(p, x, y)
        norm = float(np.linalg.norm(np.asarray(g, dtype=np.float64)))
        if norm < DEGENERATE_NORM:
            return loss, g
        return base_grad(p + (g * (rho_sam / norm)).astype(p.dtype), x, y)
    return grad_fn


def sam_grad_fn(arch: ArchSpec, rho_sam: float):
    return sam_offset(lambda p, x, y: loss_and_grad_params(arch, p, x, y), rho_sam)


def finetune_sam(model: Model, d_t: LabeledDataset, cfg: SamConfig) -> Model:
    """Sharpness-aware fine-tuning: the step uses the gradient at ``W + rho g/||g||``."""
    _require_clean(d_t, "fine-tuning set")
    params = run_sgd(model.arch, model.params, d_t, cfg.sgd(),
                     grad_fn=sam_grad_fn(model.arch, cfg.rho_sam), where="SAM fine-tuning")
    return model.with_params(params)


def pam_offset(base_grad, w0: np.ndarray, rho: float, trace: list | None = None):
    """Wrap ``base_grad`` so it is read at the point shifted ``rho`` toward ``w0``."""
    def grad_fn(p, x, y):
        shifted = param_axpy_unit(p, w0 - p, rho)
        if trace is not None:
            trace.append(float(np.linalg.norm((shifted - p).astype(np.float64))))
        return base_grad(shifted, x, y)
    return grad_fn


def pam_grad_fn(arch: ArchSpec, w0: np.ndarray, rho: float, trace: list | None = None):
    return pam_offset(lambda p, x, y: loss_and_grad_params(arch, p, x, y), w0, rho, trace)


def pam(w0: np.ndarray, arch: ArchSpec, d_mix: LabeledDataset, cfg: PamConfig,
        trace: list | None = None) -> Model:
    """Path-aware minimisation starting from (and anchored at) the backdoored weights ``w0``.

    ``trace`` (optional) collects the length of each path-aware offset.
    """
    if not np.any(d_mix.provenance == Provenance.REVERSED):
        log.warning("PAM tuning set has no reversed examples")
    w0 = np.asarray(w0, dtype=DTYPE)
    params = run_sgd(arch, w0, d_mix, cfg.sgd(), iterations=cfg.iterations,
                     grad_fn=pam_grad_fn(arch, w0, cfg.rho, trace), where="PAM")
    return Model(arch, params)


# ---------------------------------------------------------------------------
# trigger inversion


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def inversion_loss_and_grad(model: Model, x: np.ndarray, target: int, mhat: np.ndarray,
                            phat: np.ndarray, lam: float):
    m = _sigmoid(mhat)
    p = _sigmoid(phat)
    xr = (1 - m) * x + m * p
    y = np.full(x.shape[0], target)
    logits, acts = forward_cache(model.arch, model.params, xr)
    loss = cross_entropy(logits, y) + lam * float(np.abs(m).sum())
    _, dx = backward(model.arch, model.params, acts, ce_logit_grad(logits, y), input_grad=True)
    dm = (dx * (p - x)).sum(axis=0) + lam
    dp = (dx * m).sum(axis=0)
    return loss, dm * m * (1 - m), dp * p * (1 - p)


def invert_trigger(backdoored: Model, d_t: LabeledDataset, cfg: InversionConfig) -> ReversedTrigger:
    """Optimise a sigmoid-squashed mask and pattern that push clean inputs to the target."""
    _require_clean(d_t, "inversion set")
    rng = make_rng(cfg.seed)
    x_all = d_t.flat().astype(DTYPE)
    d = x_all.shape[1]
    mhat = np.full(d, cfg.mask_init, dtype=DTYPE)
    phat = (rng.normal(0.0, 0.1, size=d)).astype(DTYPE)
    vm = np.zeros_like(mhat)
    vp = np.zeros_like(phat)
    lr, mom = DTYPE(cfg.lr), DTYPE(cfg.momentum)
    n = len(d_t)
    step = 0
    while step < cfg.steps:
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            if step == cfg.steps:
                break
            _, gm, gp = inversion_loss_and_grad(backdoored, x_all[perm[s:s + cfg.batch_size]],
                                                cfg.target, mhat, phat, cfg.lambda_mask)
            vm = mom * vm + gm.astype(DTYPE)
            vp = mom * vp + gp.astype(DTYPE)
            mhat = mhat - lr * vm
            phat = phat - lr * vp
            step += 1
    shape = d_t.dims
    return ReversedTrigger(_sigmoid(mhat).astype(DTYPE).reshape(shape),
                           _sigmoid(phat).astype(DTYPE).reshape(shape))


def reversed_asr(model: Model, ds: LabeledDataset, trig: ReversedTrigger, target: int) -> float:
    keep = ds.original_labels != target
    xr = trig.apply(ds.pixels[keep]).reshape(int(keep.sum()), -1)
    return float(np.mean(predict(model, xr) == target))


def invert_trigger_search(backdoored: Model, d_t: LabeledDataset, cfg: InversionConfig,
                          lambdas=(1e-3, 1e-2, 1e-1), min_asr: float = 0.8) -> tuple[ReversedTrigger, float]:
    """Try each sparsity weight; keep the smallest-mask trigger reaching ``min_asr``.

    Falls back to the highest-ASR trigger when none qualifies. Returns the
    trigger and the lambda that produced it.
    """
    results = []
    for lam in lambdas:
        trig = invert_trigger(backdoored, d_t, InversionConfig(**{**cfg.__dict__, "lambda_mask": lam}))
        results.append((lam, trig, reversed_asr(backdoored, d_t, trig, cfg.target)))
    ok = [r for r in results if r[2] >= min_asr]
    if ok:
        lam, trig, _ = min(ok, key=lambda r: float(r[1].mask.sum()))
    else:
        lam, trig, _ = max(results, key=lambda r: r[2])
    return trig, lam


def make_reversed_dataset(d_t: LabeledDataset, trig: ReversedTrigger, frac: float = 0.10,
                          seed: int = 0) -> LabeledDataset:
    """Replace a seeded ``frac`` of the tuning set with reversed samples (labels kept)."""
    if not 0.0 < frac <= 1.0:
        raise InvalidInputError("frac must lie in (0, 1]")
    k = fraction_count(frac, len(d_t))
    idx = np.sort(make_rng(derive_seed(seed, 2)).choice(len(d_t), size=k, replace=False))
    pixels = d_t.pixels.copy()
    prov = d_t.provenance.copy()
    pixels[idx] = np.clip(trig.apply(pixels[idx]), 0.0, 1.0)
    prov[idx] = Provenance.REVERSED
    return LabeledDataset(pixels, d_t.labels.copy(), d_t.class_count, prov, d_t.original_labels.copy())
