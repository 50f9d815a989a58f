"""Synthetic image classes, backdoor triggers and dirty-label poisoning.

Datasets are stored column-wise (one pixel tensor plus label/provenance
arrays) so the training loops can slice batches without per-example Python
objects. :class:`ImageExample` is the single-item view.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError
from .nn import DTYPE, make_rng


class Provenance(enum.IntEnum):
    CLEAN = 0
    POISONED = 1
    REVERSED = 2


@dataclass(frozen=True, eq=False)
class ImageExample:
    pixels: np.ndarray
    label: int
    provenance: Provenance = Provenance.CLEAN
    original_label: int | None = None

    def __post_init__(self):
        if self.original_label is None:
            object.__setattr__(self, "original_label", int(self.label))


@dataclass(eq=False)
class LabeledDataset:
    pixels: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray
    class_count: int
    provenance: np.ndarray = None
    original_labels: np.ndarray = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=DTYPE)
        if self.pixels.ndim != 4:
            raise InvalidInputError("pixels must have shape (N, H, W, C)")
        n = self.pixels.shape[0]
        if n == 0:
            raise InvalidInputError("dataset must be nonempty")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.provenance is None:
            self.provenance = np.zeros(n, dtype=np.int8)
        self.provenance = np.asarray(self.provenance, dtype=np.int8)
        if self.original_labels is None:
            self.original_labels = self.labels.copy()
        self.original_labels = np.asarray(self.original_labels, dtype=np.int64)
        if not (self.labels.shape == self.provenance.shape == self.original_labels.shape == (n,)):
            raise InvalidInputError("label/provenance arrays must match the number of images")
        for arr in (self.labels, self.original_labels):
            if arr.min() < 0 or arr.max() >= self.class_count:
                raise InvalidInputError(f"labels must lie in [0, {self.class_count})")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise InvalidInputError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, i: int) -> ImageExample:
        return ImageExample(self.pixels[i].copy(), int(self.labels[i]),
                            Provenance(int(self.provenance[i])), int(self.original_labels[i]))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def input_dim(self) -> int:
        h, w, c = self.dims
        return h * w * c

    @property
    def examples(self) -> list[ImageExample]:
        return [self[i] for i in range(len(self))]

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(len(self), -1)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.pixels[idx], self.labels[idx], self.class_count,
                              self.provenance[idx], self.original_labels[idx])

    def provenance_counts(self) -> dict[str, int]:
        return {p.name.lower(): int(np.sum(self.provenance == p)) for p in Provenance}

    @classmethod
    def from_examples(cls, examples: list[ImageExample], class_count: int) -> "LabeledDataset":
        return cls(np.stack([e.pixels for e in examples]),
                   np.array([e.label for e in examples]), class_count,
                   np.array([int(e.provenance) for e in examples]),
                   np.array([e.original_label for e in examples]))


def concat(*parts: LabeledDataset) -> LabeledDataset:
    k = parts[0].class_count
    if any(p.class_count != k or p.dims != parts[0].dims for p in parts):
        raise InvalidInputError("cannot concatenate datasets with different dims or class counts")
    return LabeledDataset(np.concatenate([p.pixels for p in parts]),
                          np.concatenate([p.labels for p in parts]), k,
                          np.concatenate([p.provenance for p in parts]),
                          np.concatenate([p.original_labels for p in parts]))


def shuffled(ds: LabeledDataset, rng: np.random.Generator) -> LabeledDataset:
    return ds.subset(rng.permutation(len(ds)))


# ---------------------------------------------------------------------------
# class templates and sampling


@dataclass(frozen=True, eq=False)
class ClassTemplates:
    templates: np.ndarray  # (K, H, W, C)
    noise_sigma: float

    @property
    def class_count(self) -> int:
        return self.templates.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.templates.shape[1:])


def make_templates(h: int, w: int, c: int, classes: int, noise_sigma: float, seed: int,
                   contrast: float = 1.0, max_tries: int = 1000) -> ClassTemplates:
    """One uniform-noise template per class, redrawn until all pairs are well separated.

    ``contrast`` shrinks templates toward mid-grey: pixel = 0.5 + contrast * (u - 0.5).
    """
    if not 0 < contrast <= 1:
        raise InvalidInputError("contrast must lie in (0, 1]")
    if noise_sigma < 0:
        raise InvalidInputError("noise_sigma must be nonnegative")
    rng = make_rng(seed)
    d = h * w * c
    min_dist = 0.5 * np.sqrt(d) * 0.1
    chosen: list[np.ndarray] = []
    tries = 0
    while len(chosen) < classes:
        tries += 1
        if tries > max_tries:
            raise InvalidInputError("could not draw separated class templates")
        cand = (0.5 + contrast * (rng.uniform(0.0, 1.0, size=(h, w, c)) - 0.5)).astype(DTYPE)
        if all(np.linalg.norm(cand - t) > min_dist for t in chosen):
            chosen.append(cand)
    return ClassTemplates(np.stack(chosen), float(noise_sigma))


def make_dataset(templates: ClassTemplates, n_per_class: int, seed: int) -> LabeledDataset:
    if n_per_class < 1:
        raise InvalidInputError("n_per_class must be >= 1")
    rng = make_rng(seed)
    k = templates.class_count
    labels = np.repeat(np.arange(k), n_per_class)
    base = templates.templates[labels]
    if templates.noise_sigma > 0:
        noise = rng.normal(0.0, templates.noise_sigma, size=base.shape).astype(DTYPE)
        pixels = np.clip(base + noise, 0.0, 1.0)
    else:
        pixels = base.copy()
    order = rng.permutation(len(labels))
    return LabeledDataset(pixels[order], labels[order], k)


def nearest_template_predict(templates: ClassTemplates, ds: LabeledDataset) -> np.ndarray:
    t = templates.templates.reshape(templates.class_count, -1).astype(np.float64)
    x = ds.flat().astype(np.float64)
    d2 = (x ** 2).sum(1)[:, None] - 2 * x @ t.T + (t ** 2).sum(1)[None, :]
    return np.argmin(d2, axis=1)


# ---------------------------------------------------------------------------
# triggers


class TriggerKind(str, enum.Enum):
    PATCH = "patch"
    BLENDED = "blended"


def checkerboard(size: int = 3) -> np.ndarray:
    i, j = np.indices((size, size))
    return ((i + j) % 2 == 0).astype(DTYPE)


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    kind: TriggerKind
    patch: np.ndarray = field(default_factory=checkerboard)
    anchor: tuple[int, int] = (0, 0)  # offsets of the patch from the bottom-right corner
    blend_pattern: np.ndarray | None = None
    blend_ratio_train: float = 0.1
    blend_ratio_eval: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kind", TriggerKind(self.kind))
        if self.kind is TriggerKind.BLENDED:
            if self.blend_pattern is None:
                raise InvalidInputError("blended trigger needs a blend_pattern")
            # r = 0 is admitted as an explicit no-op trigger
            for r in (self.blend_ratio_train, self.blend_ratio_eval):
                if not 0.0 <= r < 1.0:
                    raise InvalidInputError(f"blend ratio must lie in [0, 1), got {r}")

    def ratio(self, phase: str) -> float:
        if phase == "train":
            return self.blend_ratio_train
        if phase == "eval":
            return self.blend_ratio_eval
        raise InvalidInputError(f"phase must be 'train' or 'eval', got {phase!r}")

    def region(self, h: int, w: int) -> tuple[slice, slice]:
        ph, pw = self.patch.shape
        r0 = h - ph - self.anchor[0]
        c0 = w - pw - self.anchor[1]
        if r0 < 0 or c0 < 0 or self.anchor[0] < 0 or self.anchor[1] < 0:
            raise InvalidInputError(f"{ph}x{pw} patch at anchor {self.anchor} does not fit {h}x{w}")
        return slice(r0, r0 + ph), slice(c0, c0 + pw)


def patch_trigger(anchor: tuple[int, int] = (0, 0)) -> TriggerSpec:
    return TriggerSpec(TriggerKind.PATCH, anchor=tuple(anchor))


def blended_trigger(h: int, w: int, c: int, seed: int, ratio_train: float = 0.1,
                    ratio_eval: float = 0.2, spread: float = 0.5) -> TriggerSpec:
    """Blend toward a fixed clipped-Gaussian noise image with mean 0.5 and std ``spread``."""
    rng = make_rng(seed)
    pattern = np.clip(rng.normal(0.5, spread, size=(h, w, c)), 0.0, 1.0).astype(DTYPE)
    return TriggerSpec(TriggerKind.BLENDED, blend_pattern=pattern,
                       blend_ratio_train=ratio_train, blend_ratio_eval=ratio_eval)


def apply_trigger_pixels(pixels: np.ndarray, trig: TriggerSpec, phase: str) -> np.ndarray:
    """Vectorised trigger application on an (N, H, W, C) or (H, W, C) array."""
    x = np.array(pixels, dtype=DTYPE, copy=True)
    h, w = x.shape[-3], x.shape[-2]
    if trig.kind is TriggerKind.PATCH:
        trig.ratio(phase)  # validates phase
        rs, cs = trig.region(h, w)
        x[..., rs, cs, :] = trig.patch[:, :, None]
    else:
        r = DTYPE(trig.ratio(phase))
        if trig.blend_pattern.shape != x.shape[-3:]:
            raise InvalidInputError("blend pattern does not match image dims")
        x = (DTYPE(1) - r) * x + r * trig.blend_pattern
    return np.clip(x, 0.0, 1.0)


def apply_trigger(x: ImageExample, trig: TriggerSpec, phase: str) -> ImageExample:
    return replace(x, pixels=apply_trigger_pixels(x.pixels, trig, phase),
                   provenance=Provenance.POISONED)


def apply_trigger_dataset(ds: LabeledDataset, trig: TriggerSpec, phase: str,
                          idx=None) -> LabeledDataset:
    """Trigger the rows in ``idx`` (all rows by default); labels are left alone."""
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx, dtype=np.int64)
    pixels = ds.pixels.copy()
    prov = ds.provenance.copy()
    if idx.size:
        pixels[idx] = apply_trigger_pixels(pixels[idx], trig, phase)
        prov[idx] = Provenance.POISONED
    return LabeledDataset(pixels, ds.labels.copy(), ds.class_count, prov, ds.original_labels.copy())


# ---------------------------------------------------------------------------
# poisoning


@dataclass(frozen=True, eq=False)
class PoisonPlan:
    rate: float
    target: int
    trigger: TriggerSpec
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InvalidInputError(f"poison rate must lie in [0, 1), got {self.rate}")


def poison_dataset(train: LabeledDataset, plan: PoisonPlan) -> LabeledDataset:
    """Dirty-label poisoning of ``floor(rate * N)`` non-target examples.

    A zero rate returns the input untouched (same order), so a rate-0 run is
    the clean run.
    """
    if not 0 <= plan.target < train.class_count:
        raise InvalidInputError("target label out of range")
    if plan.rate == 0:
        return train.subset(np.arange(len(train)))
    n_poison = int(np.floor(plan.rate * len(train)))
    if n_poison < 1:
        raise InvalidInputError(f"rate {plan.rate} poisons no examples of {len(train)}")
    candidates = np.flatnonzero(train.original_labels != plan.target)
    if candidates.size < n_poison:
        raise InvalidInputError(
            f"need {n_poison} non-target examples to poison, only {candidates.size} available")
    rng = make_rng(plan.seed)
    chosen = np.sort(rng.choice(candidates, size=n_poison, replace=False))
    out = apply_trigger_dataset(train, plan.trigger, "train", chosen)
    out.labels[chosen] = plan.target
    return shuffled(out, rng)


def make_backdoor_testset(test: LabeledDataset, trig: TriggerSpec, target: int) -> LabeledDataset:
    keep = np.flatnonzero(test.original_labels != target)
    if keep.size == 0:
        raise InvalidInputError("every test example belongs to the target class")
    out = apply_trigger_dataset(test.subset(keep), trig, "eval")
    out.labels[:] = target
    return out
