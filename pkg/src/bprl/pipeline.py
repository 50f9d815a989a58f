"""Config-driven assembly of the desk experiment: data, models, tuners, probes.

All randomness is derived from ``cfg.seed`` so that any stage can be rebuilt
from the config alone; the CLI regenerates data instead of storing it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import (
    ClassTemplates,
    LabeledDataset,
    PoisonPlan,
    Provenance,
    TriggerSpec,
    blended_trigger,
    make_backdoor_testset,
    make_dataset,
    make_templates,
    patch_trigger,
    poison_dataset,
)
from .errors import InvalidInputError
from .nn import ArchSpec, Model, SgdConfig
from .purifier import (
    InversionConfig,
    PamConfig,
    ReversedTrigger,
    SamConfig,
    finetune_ep,
    finetune_plain,
    finetune_sam,
    invert_trigger_search,
    make_reversed_dataset,
    pam,
)
from .redteam import (
    QraGenerator,
    QraReport,
    RaConfig,
    build_qra_dataset,
    build_ra_dataset,
    make_generator,
    qra_evaluate,
    qra_train,
    retuning_attack,
)
from .trainer import EvalReport, evaluate, train

log = logging.getLogger(__name__)

# offsets that separate the data streams drawn from one experiment seed
_TEMPLATES, _TRAIN, _TUNE, _TEST, _TRIGGER = 0, 100, 200, 300, 999


@dataclass(eq=False)
class Desk:
    arch: ArchSpec
    templates: ClassTemplates
    trigger: TriggerSpec
    train_clean: LabeledDataset
    train_poisoned: LabeledDataset
    tune: LabeledDataset
    test: LabeledDataset
    backdoor_test: LabeledDataset
    target: int

    def evaluate(self, model: Model) -> EvalReport:
        return evaluate(model, self.test, self.backdoor_test)

    @property
    def n_poisoned(self) -> int:
        return int(np.sum(self.train_poisoned.provenance == Provenance.POISONED))


def make_trigger(cfg: ExperimentConfig) -> TriggerSpec:
    t, d = cfg.trigger, cfg.dataset
    if t.kind == "patch":
        return patch_trigger(tuple(t.patch_anchor))
    return blended_trigger(d.h, d.w, d.c, cfg.seed + _TRIGGER, t.blend_ratio_train,
                           t.blend_ratio_eval, spread=t.blend_spread)


def classifier_arch(cfg: ExperimentConfig) -> ArchSpec:
    d = cfg.dataset
    return ArchSpec((d.h * d.w * d.c, *cfg.model.hidden, d.classes))


def build_desk(cfg: ExperimentConfig) -> Desk:
    d, s = cfg.dataset, cfg.seed
    templates = make_templates(d.h, d.w, d.c, d.classes, d.noise_sigma, s + _TEMPLATES, d.contrast)
    train_clean = make_dataset(templates, d.n_train_per_class, s + _TRAIN)
    tune = make_dataset(templates, d.n_tune_per_class, s + _TUNE)
    test = make_dataset(templates, d.n_test_per_class, s + _TEST)
    trig = make_trigger(cfg)
    target = cfg.poison.target
    poisoned = poison_dataset(train_clean, PoisonPlan(cfg.poison.rate, target, trig, s))
    return Desk(classifier_arch(cfg), templates, trig, train_clean, poisoned, tune, test,
                make_backdoor_testset(test, trig, target), target)


def train_sgd(cfg: ExperimentConfig) -> SgdConfig:
    t = cfg.train
    return SgdConfig(t.lr, t.momentum, t.batch, t.epochs, cfg.seed)


def train_clean(cfg: ExperimentConfig, desk: Desk) -> Model:
    return train(desk.arch, desk.train_clean, train_sgd(cfg))


def train_backdoored(cfg: ExperimentConfig, desk: Desk) -> Model:
    return train(desk.arch, desk.train_poisoned, train_sgd(cfg))


def _tuner_sgd(cfg: ExperimentConfig, section) -> SgdConfig:
    return SgdConfig(section.lr, cfg.purify.momentum, section.batch, section.epochs, cfg.seed)


def purify_plain(cfg: ExperimentConfig, desk: Desk, model: Model) -> Model:
    return finetune_plain(model, desk.tune, _tuner_sgd(cfg, cfg.purify.plain))


def purify_ep(cfg: ExperimentConfig, desk: Desk, model: Model) -> Model:
    ep = cfg.purify.ep
    return finetune_ep(model, desk.tune, desk.trigger, ep.frac, _tuner_sgd(cfg, ep))


def purify_sam(cfg: ExperimentConfig, desk: Desk, model: Model) -> Model:
    s = cfg.purify.sam
    return finetune_sam(model, desk.tune, SamConfig(s.rho_sam, s.lr, s.epochs, s.batch, cfg.seed,
                                                    cfg.purify.momentum))


def reversed_trigger(cfg: ExperimentConfig, desk: Desk, backdoored: Model) -> ReversedTrigger:
    inv = cfg.purify.pam.inversion
    icfg = InversionConfig(desk.target, steps=inv.steps, lr=inv.lr, seed=cfg.seed)
    trig, lam = invert_trigger_search(backdoored, desk.tune, icfg, tuple(inv.lambdas), inv.min_asr)
    log.info("trigger inversion picked lambda=%g, mask mass %.2f", lam, float(trig.mask.sum()))
    return trig


def pam_mix(cfg: ExperimentConfig, desk: Desk, backdoored: Model,
            trig: ReversedTrigger | None = None) -> LabeledDataset:
    trig = trig if trig is not None else reversed_trigger(cfg, desk, backdoored)
    return make_reversed_dataset(desk.tune, trig, cfg.purify.pam.reversed_frac, cfg.seed)


def pam_at(cfg: ExperimentConfig, desk: Desk, backdoored: Model, rho: float,
           mix: LabeledDataset) -> Model:
    p = cfg.purify.pam
    pcfg = PamConfig.for_epochs(rho, len(mix), p.epochs, lr=p.lr, batch_size=p.batch, seed=cfg.seed,
                                momentum=cfg.purify.momentum)
    return pam(backdoored.params, desk.arch, mix, pcfg)


@dataclass(eq=False)
class RhoSweep:
    rhos: list[float]
    models: list[Model]
    reports: list[EvalReport]
    chosen: float
    threshold: float


def select_rho(rhos, c_accs, threshold: float) -> float:
    """Largest rho whose clean accuracy stays at or above ``threshold``.

    Falls back to the smallest rho when none qualifies.
    """
    ok = [r for r, a in zip(rhos, c_accs) if a >= threshold]
    if not ok:
        log.warning("no rho keeps clean accuracy above %.4f; using the smallest", threshold)
        return min(rhos)
    return max(ok)


def pam_sweep(cfg: ExperimentConfig, desk: Desk, backdoored: Model, clean_c_acc: float,
              rhos=None, mix: LabeledDataset | None = None) -> RhoSweep:
    rhos = sorted(cfg.purify.pam.rho_grid if rhos is None else rhos)
    mix = mix if mix is not None else pam_mix(cfg, desk, backdoored)
    models = [pam_at(cfg, desk, backdoored, r, mix) for r in rhos]
    reports = [desk.evaluate(m) for m in models]
    threshold = clean_c_acc - cfg.purify.pam.acc_drop
    chosen = select_rho(rhos, [r.c_acc for r in reports], threshold)
    return RhoSweep(list(rhos), models, reports, chosen, threshold)


def purify_pam(cfg: ExperimentConfig, desk: Desk, backdoored: Model,
               clean: Model | None = None) -> tuple[Model, float]:
    """PAM at ``purify.pam.rho``, or at the threshold-selected rho when that is null."""
    mix = pam_mix(cfg, desk, backdoored)
    rho = cfg.purify.pam.rho
    if rho is not None:
        return pam_at(cfg, desk, backdoored, rho, mix), rho
    if clean is None:
        clean = train_clean(cfg, desk)
    sweep = pam_sweep(cfg, desk, backdoored, desk.evaluate(clean).c_acc, mix=mix)
    return sweep.models[sweep.rhos.index(sweep.chosen)], sweep.chosen


def purify(cfg: ExperimentConfig, desk: Desk, backdoored: Model, method: str,
           clean: Model | None = None) -> Model:
    if method == "plain":
        return purify_plain(cfg, desk, backdoored)
    if method == "ep":
        return purify_ep(cfg, desk, backdoored)
    if method == "sam":
        return purify_sam(cfg, desk, backdoored)
    if method == "pam":
        return purify_pam(cfg, desk, backdoored, clean)[0]
    raise InvalidInputError(f"unknown purification method {method!r}")


def ra_config(cfg: ExperimentConfig) -> RaConfig:
    r = cfg.ra
    return RaConfig(r.n_poison, r.total, r.epochs, r.lr, cfg.seed, r.batch, cfg.purify.momentum)


def ra_dataset(cfg: ExperimentConfig, desk: Desk) -> LabeledDataset:
    return build_ra_dataset(desk.train_poisoned, desk.trigger, desk.target, ra_config(cfg),
                            desk.n_poisoned or None)


def retune(cfg: ExperimentConfig, desk: Desk, model: Model, ra_set: LabeledDataset | None = None) -> Model:
    ra_set = ra_set if ra_set is not None else ra_dataset(cfg, desk)
    return retuning_attack(model, ra_set, ra_config(cfg))


def train_generator(cfg: ExperimentConfig, desk: Desk, purified: Model, ep_model: Model,
                    retuned: Model | None = None) -> QraGenerator:
    q = cfg.qra
    retuned = retuned if retuned is not None else retune(cfg, desk, purified)
    d_c = build_qra_dataset(desk.train_poisoned, desk.trigger, desk.target, q.n_benign, q.n_poisoned,
                            cfg.seed)
    gen = make_generator(desk.arch.input_dim, q.hidden, cfg.seed, q.epsilon, q.alpha)
    return qra_train(gen, purified, retuned, ep_model, d_c, q.epochs, q.lr, cfg.seed, q.batch,
                     cfg.purify.momentum)


def qra_report(desk: Desk, gen: QraGenerator, model: Model) -> QraReport:
    return qra_evaluate(gen, model, desk.test, desk.backdoor_test, desk.target)
