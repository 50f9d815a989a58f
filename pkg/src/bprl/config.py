"""Experiment configuration: strict JSON schema, defaults, and hashing.

Every key is required and unknown keys are rejected, so a typo in a
hyperparameter fails loudly instead of silently falling back to a default.
``default_config()`` is the calibrated desk setup and a complete template to
copy from (``bprl default-config``).
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InvalidInputError

METHODS = ("plain", "ep", "sam", "pam")

PosInt = Annotated[int, Field(ge=1)]
PosFloat = Annotated[float, Field(gt=0)]
NonNeg = Annotated[float, Field(ge=0)]
Unit = Annotated[float, Field(ge=0, lt=1)]


class ConfigError(InvalidInputError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, strict=True)


class DatasetCfg(_Strict):
    h: PosInt
    w: PosInt
    c: PosInt
    classes: Annotated[int, Field(ge=2)]
    n_train_per_class: PosInt
    n_test_per_class: PosInt
    n_tune_per_class: PosInt
    noise_sigma: NonNeg
    contrast: Annotated[float, Field(gt=0, le=1)]


class TriggerCfg(_Strict):
    kind: Literal["patch", "blended"]
    blend_ratio_train: Unit
    blend_ratio_eval: Unit
    blend_spread: NonNeg
    patch_anchor: tuple[Annotated[int, Field(ge=0)], Annotated[int, Field(ge=0)]]


class PoisonCfg(_Strict):
    rate: Unit
    target: Annotated[int, Field(ge=0)]


class ModelCfg(_Strict):
    hidden: list[PosInt]


class _Sgd(_Strict):
    epochs: PosInt
    lr: PosFloat
    batch: PosInt


class TrainCfg(_Sgd):
    momentum: Unit


class PlainCfg(_Sgd):
    pass


class EpCfg(_Sgd):
    frac: Annotated[float, Field(gt=0, lt=1)]


class SamCfg(_Sgd):
    rho_sam: PosFloat


class InversionCfg(_Strict):
    lambdas: Annotated[list[NonNeg], Field(min_length=1)]
    steps: PosInt
    lr: PosFloat
    min_asr: Annotated[float, Field(ge=0, le=1)]


class PamCfg(_Sgd):
    rho: Optional[NonNeg]  # null: pick from rho_grid by the clean-accuracy threshold
    rho_grid: Annotated[list[NonNeg], Field(min_length=1)]
    acc_drop: Annotated[float, Field(ge=0, le=1)]
    reversed_frac: Annotated[float, Field(gt=0, le=1)]
    inversion: InversionCfg


class PurifyCfg(_Strict):
    method: Literal["plain", "ep", "sam", "pam"]
    momentum: Unit
    plain: PlainCfg
    ep: EpCfg
    sam: SamCfg
    pam: PamCfg


class RaCfg(_Sgd):
    n_poison: PosInt
    total: PosInt


class QraCfg(_Sgd):
    hidden: PosInt
    epsilon: NonNeg
    alpha: NonNeg
    n_benign: PosInt
    n_poisoned: PosInt


class LmcCfg(_Strict):
    grid: Annotated[int, Field(ge=2)]


class ExperimentConfig(_Strict):
    seed: Annotated[int, Field(ge=0, lt=2**64)]
    dataset: DatasetCfg
    model: ModelCfg
    trigger: TriggerCfg
    poison: PoisonCfg
    train: TrainCfg
    purify: PurifyCfg
    ra: RaCfg
    qra: QraCfg
    lmc: LmcCfg

    @model_validator(mode="after")
    def _cross_checks(self):
        d = self.dataset
        if self.poison.target >= d.classes:
            raise ValueError(f"poison.target must be below dataset.classes ({d.classes})")
        if self.trigger.kind == "patch":
            a = self.trigger.patch_anchor
            if a[0] + 3 > d.h or a[1] + 3 > d.w:
                raise ValueError("trigger.patch_anchor puts the 3x3 patch outside the image")
        if self.ra.n_poison >= self.ra.total:
            raise ValueError("ra.n_poison must be smaller than ra.total")
        return self

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        """Nested replace with dotted keys, e.g. ``cfg.replace(**{"poison.rate": 0.1})``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(key, "unknown key")
            node[leaf] = value
        return from_dict(d)


DEFAULTS = {
    "seed": 0,
    "dataset": {"h": 16, "w": 16, "c": 1, "classes": 4, "n_train_per_class": 500,
                "n_test_per_class": 250, "n_tune_per_class": 250, "noise_sigma": 0.25,
                "contrast": 0.55},
    "model": {"hidden": [64]},
    "trigger": {"kind": "blended", "blend_ratio_train": 0.1, "blend_ratio_eval": 0.2,
                "blend_spread": 0.375, "patch_anchor": [0, 0]},
    "poison": {"rate": 0.05, "target": 0},
    "train": {"epochs": 30, "lr": 0.05, "momentum": 0.9, "batch": 64},
    "purify": {
        "method": "pam",
        "momentum": 0.9,
        "plain": {"epochs": 20, "lr": 0.1, "batch": 32},
        "ep": {"epochs": 20, "lr": 0.1, "batch": 8, "frac": 0.1},
        "sam": {"epochs": 20, "lr": 0.1, "batch": 32, "rho_sam": 0.03},
        "pam": {"epochs": 20, "lr": 0.05, "batch": 64, "rho": None,
                "rho_grid": [0.1, 0.3, 0.5, 0.7, 0.9], "acc_drop": 0.03, "reversed_frac": 0.1,
                "inversion": {"lambdas": [1e-3, 1e-2, 1e-1], "steps": 300, "lr": 0.1,
                              "min_asr": 0.8}},
    },
    "ra": {"n_poison": 5, "total": 1000, "epochs": 5, "lr": 0.01, "batch": 64},
    "qra": {"hidden": 256, "epsilon": 16 / 255, "alpha": 0.2, "epochs": 50, "lr": 0.1, "batch": 64,
            "n_benign": 500, "n_poisoned": 500},
    "lmc": {"grid": 21},
}


def default_dict() -> dict:
    return copy.deepcopy(DEFAULTS)


def default_config() -> ExperimentConfig:
    return from_dict(default_dict())


def _first_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    path = ".".join(str(p) for p in err["loc"])
    msg = err["msg"]
    if err["type"] == "missing":
        msg = "missing required field"
    elif err["type"] == "extra_forbidden":
        msg = "unknown key"
    return ConfigError(path, msg)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    try:
        # JSON numbers like 1 are fine for float fields; strict mode still rejects strings and bools
        return ExperimentConfig.model_validate_json(json.dumps(data))
    except ValidationError as exc:
        raise _first_error(exc) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from exc
    return from_dict(data)
