"""Experimental protocols: ablation grids, few-shot curves, two-frame robustness."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import format_value
from .model import FPS_VARIANTS, ModelConfig, OmniTraj
from .training import TrainPlan, clone_model, group_by_setup, train, zero_shot_eval

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)
FEW_SHOT_SIZES = (2, 8, 32, 128, 200)
MASK_RATIOS = (0.10, 0.25, 0.50, 0.75, 0.90)
FPS_ROWS = ("none", "film", "codebook", "mlp_token", "mlp_sum")

# (row name, use_hie, use_decoder, use_ca)
DECOUPLED_ROWS = (
    ("backbone", False, False, False),
    ("+hie", True, False, False),
    ("+hie+decoder", True, True, False),
    ("decoder+ca", False, True, True),
    ("all", True, True, True),
)

TABLE_COLUMNS = ("table", "row", "seed", "setup", "ade", "fde", "min_ade_k", "min_fde_k", "n")
SUMMARY_COLUMNS = ("table", "row", "metric", "median", "min", "max", "n_seeds")


@dataclass
class AblationTable:
    """Per (row, seed) metrics on one evaluation setup, plus seed aggregates."""

    name: str
    rows: list = field(default_factory=list)  # dicts keyed by TABLE_COLUMNS

    def add(self, row, seed, report, setup=None):
        setups = [setup] if setup else sorted(report.setups)
        for s in setups:
            m = report.setups[s]
            self.rows.append({"table": self.name, "row": row, "seed": seed, "setup": s,
                              "ade": m.ade, "fde": m.fde, "min_ade_k": m.min_ade_k,
                              "min_fde_k": m.min_fde_k, "n": m.n})

    def row_names(self):
        seen = []
        for r in self.rows:
            if r["row"] not in seen:
                seen.append(r["row"])
        return seen

    def values(self, row, metric="min_ade_k"):
        return [r[metric] for r in self.rows if r["row"] == row]

    def median(self, row, metric="min_ade_k"):
        return float(np.median(self.values(row, metric)))

    def summary(self, metrics=("min_ade_k", "min_fde_k")):
        out = []
        for row in self.row_names():
            for metric in metrics:
                v = self.values(row, metric)
                out.append({"table": self.name, "row": row, "metric": metric,
                            "median": float(np.median(v)), "min": float(np.min(v)),
                            "max": float(np.max(v)), "n_seeds": len(v)})
        return out

    def to_csv(self):
        return _csv(self.rows, TABLE_COLUMNS)

    def summary_csv(self):
        return _csv(self.summary(), SUMMARY_COLUMNS)


def _csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r[c]) for c in columns])
    return buf.getvalue()


def _mixture(samples):
    return [(group, 1.0) for group in group_by_setup(samples).values()]


def _train(cfg, plan, train_samples, seed):
    plan = replace(plan, seed=seed, mixture=_mixture(train_samples))
    return train(plan, replace(cfg, seed=seed)).model


def _train_eval(cfg, plan, train_samples, test_samples, seed):
    model = _train(cfg, plan, train_samples, seed)
    return model, zero_shot_eval(model, test_samples, seed=seed)


# -- FPS encoder ------------------------------------------------------------------

def run_ablation_fps(benchmark, cfg_base: ModelConfig, plan: TrainPlan, variants=FPS_ROWS,
                     seeds=SEEDS, setup="setup3"):
    """Train every conditioning variant on the benchmark's train split; evaluate zero-shot."""
    unknown = [v for v in variants if v not in FPS_VARIANTS]
    if unknown:
        raise ValueError(f"unknown fps variant {unknown[0]!r}")
    table = AblationTable("fps")
    for v in variants:
        for seed in seeds:
            cfg = replace(cfg_base, fps_variant=v)
            _, report = _train_eval(cfg, plan, benchmark.train, benchmark.test, seed)
            log.info("fps %s seed %d minADE %.4f", v, seed, report.setups[setup].min_ade_k)
            table.add(v, seed, report, setup)
    return table


# -- decoupled interaction modules -----------------------------------------------

def run_ablation_decoupled(train_samples, test_samples, cfg_base: ModelConfig, plan: TrainPlan,
                           rows=DECOUPLED_ROWS, seeds=SEEDS):
    """Each module combination trained from scratch under an identical budget."""
    table = AblationTable("decoupled")
    for name, hie, dec, ca in rows:
        cfg = replace(cfg_base, use_hie=hie, use_decoder=dec, use_ca=ca)
        cfg.validate()
        for seed in seeds:
            _, report = _train_eval(cfg, plan, train_samples, test_samples, seed)
            table.add(name, seed, report)
    return table


# -- temporal masking ratio -------------------------------------------------------

def run_ablation_mask_ratio(train_samples, test_samples, cfg_base: ModelConfig, plan: TrainPlan,
                            ratios=MASK_RATIOS, seeds=SEEDS):
    """One pretrain-phase run per temporal masking ratio."""
    table = AblationTable("mask_ratio")
    plan = replace(plan, phase="pretrain")
    for ratio in ratios:
        cfg = replace(cfg_base, mask_ratios={**cfg_base.mask_ratios, "temporal": float(ratio)})
        for seed in seeds:
            _, report = _train_eval(cfg, plan, train_samples, test_samples, seed)
            table.add(f"{ratio:g}", seed, report)
    return table


# -- two-frame robustness -------------------------------------------------------

def keep_last_frames(sample, keep=2):
    """Invalidate every observed frame except the last ``keep`` for all agents."""
    valid = sample.obs_valid.copy()
    valid[:, : max(sample.t_obs - keep, 0)] = False
    return replace(sample, obs_valid=valid)


@dataclass
class TwoFrameResult:
    full: object
    two_frame: object
    degradation_pct: dict  # metric -> percent, pooled over setups weighted by n


def _pooled(report, metric):
    n = sum(m.n for m in report.setups.values())
    return sum(getattr(m, metric) * m.n for m in report.setups.values()) / n


def two_frame_eval(model: OmniTraj, test_samples, seed=0):
    if any(s.t_obs < 2 for s in test_samples):
        raise ValueError("two-frame evaluation needs t_obs >= 2")
    full = zero_shot_eval(model, test_samples, protocol="two_frame_full", seed=seed)
    two = zero_shot_eval(model, [keep_last_frames(s) for s in test_samples],
                         protocol="two_frame", seed=seed)
    deg = {}
    for metric in ("ade", "fde", "min_ade_k", "min_fde_k"):
        a, b = _pooled(full, metric), _pooled(two, metric)
        deg[metric] = 100.0 * (b - a) / a if a > 0 else 0.0
    return TwoFrameResult(full, two, deg)


def run_two_frame_comparison(train_samples, test_samples, cfg_base: ModelConfig, plan: TrainPlan,
                             seeds=SEEDS):
    """Masking-pretrained vs identically budgeted no-temporal-masking training.

    Returns {arm: [TwoFrameResult per seed]}.
    """
    arms = {
        "masked": replace(cfg_base, mask_ratios={**cfg_base.mask_ratios, "temporal": 0.75}),
        "unmasked": replace(cfg_base, mask_ratios={**cfg_base.mask_ratios, "temporal": 0.0}),
    }
    plan = replace(plan, phase="pretrain")
    out = {}
    for arm, cfg in arms.items():
        out[arm] = []
        for seed in seeds:
            model = _train(cfg, plan, train_samples, seed)
            out[arm].append(two_frame_eval(model, test_samples, seed))
    return out


def two_frame_table(results, metric="min_ade_k"):
    rows = []
    for arm, per_seed in results.items():
        for seed, r in enumerate(per_seed):
            rows.append({"table": "two_frame", "row": arm, "seed": seed,
                         "full": _pooled(r.full, metric), "two_frame": _pooled(r.two_frame, metric),
                         "degradation_pct": r.degradation_pct[metric]})
    return rows


# -- few-shot fine-tuning -----------------------------------------------------------

@dataclass
class FewShotCurve:
    init: str
    seed: int
    points: list  # (n, min_ade_k, min_fde_k)


def few_shot_subset(samples, n, seed):
    if n > len(samples):
        raise ValueError(f"few-shot size {n} exceeds the target split ({len(samples)} samples)")
    idx = np.sort(np.random.default_rng([seed, n]).choice(len(samples), size=n, replace=False))
    return [samples[i] for i in idx]


def few_shot_finetune(model: OmniTraj, sizes, target_train, target_test, plan: TrainPlan,
                      init="pretrained"):
    """Fine-tune a copy of ``model`` on ``n`` target samples for every ``n`` in ``sizes``."""
    for n in sizes:
        if n > len(target_train):
            raise ValueError(f"few-shot size {n} exceeds the target split ({len(target_train)} samples)")
    points = []
    for n in sizes:
        subset = few_shot_subset(target_train, n, plan.seed)
        p = replace(plan, mixture=[(subset, 1.0)], batch_size=min(plan.batch_size, n))
        tuned = train(p, model.cfg, model=clone_model(model)).model
        report = zero_shot_eval(tuned, target_test, protocol="few_shot", seed=plan.seed)
        ade = _pooled(report, "min_ade_k")
        points.append((n, ade, _pooled(report, "min_fde_k")))
        log.info("few-shot %s n=%d minADE %.4f", init, n, ade)
    return FewShotCurve(init, plan.seed, points)


def run_few_shot(source_samples, target_train, target_test, cfg: ModelConfig, pretrain_plan: TrainPlan,
                 finetune_plan: TrainPlan, sizes=FEW_SHOT_SIZES, seeds=SEEDS):
    """Pretrained vs random initialisation, one curve per (init, seed)."""
    curves = []
    for seed in seeds:
        c = replace(cfg, seed=seed)
        pre = _train(cfg, pretrain_plan, source_samples, seed)
        ft = replace(finetune_plan, seed=seed, phase="finetune")
        curves.append(few_shot_finetune(pre, sizes, target_train, target_test, ft, "pretrained"))
        curves.append(few_shot_finetune(OmniTraj(c), sizes, target_train, target_test, ft, "scratch"))
    return curves


def few_shot_rows(curves):
    return [{"table": "few_shot", "init": c.init, "seed": c.seed, "n": n,
             "min_ade_k": a, "min_fde_k": f} for c in curves for n, a, f in c.points]
