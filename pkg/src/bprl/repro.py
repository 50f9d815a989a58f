"""Named end-to-end recipes, each writing a small bundle of CSV/JSON files."""

from __future__ import annotations

import logging
from pathlib import Path

from . import pipeline as pl
from .config import ExperimentConfig
from .landscape import CurveKind, barrier_stats, lmc_between_purified, lmc_scan
from .redteam import qra_transfer
from .errors import InvalidInputError
from .report import RobustnessReport, write_json, write_qra_rows, write_table

log = logging.getLogger(__name__)

RECIPES = {
    "fig1": "retuning and query-based reactivation against plain and SAM fine-tuning, with a clean control",
    "fig3": "backdoor-error curves from the backdoored model to each purified model",
    "fig4": "backdoor- and clean-error curves between each purified model and EP",
    "table1-row": "O-Backdoor, O-Robustness and P-Robustness for every purification method",
    "table8": "PAM rho sweep with clean accuracy, O-ASR and post-retuning ASR",
}


class _Models:
    """Lazily trains each model the recipes ask for, at most once."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = threads
        self.desk = pl.build_desk(cfg)
        self._cache: dict = {}
        self.pam_rho = None

    def get(self, role: str):
        if role not in self._cache:
            self._cache[role] = self._make(role)
        return self._cache[role]

    def _make(self, role: str):
        cfg, desk = self.cfg, self.desk
        if role == "clean":
            return pl.train_clean(cfg, desk)
        if role == "backdoored":
            return pl.train_backdoored(cfg, desk)
        if role == "ra_set":
            return pl.ra_dataset(cfg, desk)
        if role == "pam_sweep":
            clean_acc = desk.evaluate(self.get("clean")).c_acc
            return pl.pam_sweep(cfg, desk, self.get("backdoored"), clean_acc)
        if role == "pam":
            if cfg.purify.pam.rho is None:
                sweep = self.get("pam_sweep")
                self.pam_rho = sweep.chosen
                return sweep.models[sweep.rhos.index(sweep.chosen)]
            model, self.pam_rho = pl.purify_pam(cfg, desk, self.get("backdoored"))
            return model
        if role in ("plain", "ep", "sam"):
            return pl.purify(cfg, desk, self.get("backdoored"), role)
        if role.startswith("retuned-"):
            return pl.retune(cfg, desk, self.get(role[len("retuned-"):]), self.get("ra_set"))
        raise KeyError(role)


def _meta(cfg: ExperimentConfig, recipe: str, **extra) -> dict:
    return {"recipe": recipe, "description": RECIPES[recipe], "config_hash": cfg.hash(),
            "seed": cfg.seed, **extra}


def _robustness(m: _Models, roles: list[str], with_control: bool) -> RobustnessReport:
    rep = RobustnessReport(m.cfg.hash(), m.cfg.seed)
    for role in ("clean", "backdoored"):
        r = m.desk.evaluate(m.get(role))
        rep.add(role, "O-Backdoor", r.c_acc, r.asr)
    for role in roles:
        r = m.desk.evaluate(m.get(role))
        rep.add(f"purified-{role}", "O-Robustness", r.c_acc, r.asr)
        r = m.desk.evaluate(m.get(f"retuned-{role}"))
        rep.add(f"purified-{role}", "P-Robustness", r.c_acc, r.asr)
    if with_control:
        r = m.desk.evaluate(m.get("retuned-clean"))
        rep.add("clean", "P-Robustness", r.c_acc, r.asr)
    return rep


def recipe_fig1(m: _Models, out: Path):
    _robustness(m, ["plain", "sam"], with_control=True).write(out)
    desk = m.desk
    gen = pl.train_generator(m.cfg, desk, m.get("plain"), m.get("ep"), m.get("retuned-plain"))
    gen_clean = pl.train_generator(m.cfg, desk, m.get("clean"), m.get("ep"), m.get("retuned-clean"))
    rows = [("purified-plain", "purified-plain", desk.evaluate(m.get("plain")).asr,
             pl.qra_report(desk, gen, m.get("plain"))),
            ("purified-plain", "purified-sam", desk.evaluate(m.get("sam")).asr,
             qra_transfer(gen, m.get("sam"), desk.test, desk.backdoor_test, desk.target, m.get("plain"))),
            ("clean", "clean", desk.evaluate(m.get("clean")).asr,
             pl.qra_report(desk, gen_clean, m.get("clean")))]
    write_qra_rows(out / "qra.csv", rows)
    write_json(out / "meta.json", _meta(m.cfg, "fig1"))


def recipe_table1_row(m: _Models, out: Path):
    _robustness(m, ["plain", "ep", "sam", "pam"], with_control=True).write(out)
    m.get("pam")
    write_json(out / "meta.json", _meta(m.cfg, "table1-row", pam_rho=m.pam_rho))


def recipe_fig3(m: _Models, out: Path):
    desk, bd = m.desk, m.get("backdoored")
    stats = {}
    for role in ("plain", "sam", "ep", "pam"):
        curve = lmc_scan(bd.params, m.get(role).params, desk.arch, desk.backdoor_test, m.cfg.lmc.grid,
                         CurveKind.BACKDOOR, ("backdoored", f"purified-{role}"), workers=m.threads)
        (out / f"lmc-backdoored-{role}.csv").write_text(curve.to_csv())
        stats[role] = barrier_stats(curve).as_dict()
    write_json(out / "meta.json", _meta(m.cfg, "fig3", barrier=stats, pam_rho=m.pam_rho))


def recipe_fig4(m: _Models, out: Path):
    desk, ep = m.desk, m.get("ep")
    stats = {}
    for role in ("plain", "sam", "pam"):
        for kind, data in ((CurveKind.BACKDOOR, desk.backdoor_test), (CurveKind.CLEAN, desk.test)):
            curve = lmc_between_purified(m.get(role).params, ep.params, desk.arch, data, m.cfg.lmc.grid,
                                         kind, (f"purified-{role}", "purified-ep"), workers=m.threads)
            (out / f"lmc-{role}-ep-{kind.value}.csv").write_text(curve.to_csv())
            stats[f"{role}-{kind.value}"] = barrier_stats(curve).as_dict()
    write_json(out / "meta.json", _meta(m.cfg, "fig4", barrier=stats, pam_rho=m.pam_rho))


def recipe_table8(m: _Models, out: Path):
    cfg, desk = m.cfg, m.desk
    clean_acc = desk.evaluate(m.get("clean")).c_acc
    sweep = m.get("pam_sweep")
    rows = []
    for rho, model, rep in zip(sweep.rhos, sweep.models, sweep.reports):
        p = desk.evaluate(pl.retune(cfg, desk, model, m.get("ra_set")))
        rows.append([float(rho), rep.c_acc, rep.asr, p.asr])
    write_table(out / "table8.csv", ["rho", "c_acc", "o_asr", "p_asr"], rows)
    write_json(out / "meta.json", _meta(cfg, "table8", chosen_rho=sweep.chosen,
                                        acc_threshold=sweep.threshold, clean_c_acc=clean_acc))


_RUNNERS = {"fig1": recipe_fig1, "fig3": recipe_fig3, "fig4": recipe_fig4,
            "table1-row": recipe_table1_row, "table8": recipe_table8}


def run_recipe(name: str, cfg: ExperimentConfig, out_dir: str | Path, threads: int = 1) -> Path:
    if name not in _RUNNERS:
        raise InvalidInputError(f"unknown recipe {name!r}; valid recipes: {', '.join(sorted(RECIPES))}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("recipe %s: %s", name, RECIPES[name])
    _RUNNERS[name](_Models(cfg, threads), out)
    return out
