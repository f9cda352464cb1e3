"""Mixed-setup training loop and evaluation."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .metrics import MetricsReport, summarize, wta_l2_loss
from .model import OmniTraj, collate
from .numerics import AdamState, GradTape, Tensor, adam_step
from .synthgen import CANONICAL_SETUPS

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainPlan:
    epochs: int = 30
    batch_size: int = 32
    mixture: list = field(default_factory=list)  # [(samples, weight)]
    phase: str = "pretrain"
    seed: int = 0
    lr: float = 1e-4
    eval_every: int = 1
    val: list = field(default_factory=list)

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError("phase must be 'pretrain' or 'finetune'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        for _, w in self.mixture:
            if not w > 0:
                raise ValueError("mixture weights must be positive")


@dataclass
class TrainResult:
    model: OmniTraj
    curve: list  # (epoch, split, loss) with epochs counted from 1

    def losses(self, split):
        return [loss for _, s, loss in self.curve if s == split]


def setup_name(sample):
    for s in CANONICAL_SETUPS:
        if (s.fps, s.t_obs, s.t_pred) == (sample.fps, sample.t_obs, sample.t_pred):
            return s.name
    return f"fps{sample.fps:g}_obs{sample.t_obs}_pred{sample.t_pred}"


def group_by_setup(samples):
    groups = defaultdict(list)
    for s in samples:
        groups[setup_name(s)].append(s)
    return dict(sorted(groups.items()))


def iter_batches(samples, batch_size):
    """Setup-homogeneous batches in a fixed order (evaluation)."""
    for _, group in group_by_setup(samples).items():
        for i in range(0, len(group), batch_size):
            yield group[i:i + batch_size]


def _epoch_batches(plan, rng):
    sources = [list(src) for src, _ in plan.mixture if len(src)]
    weights = np.array([w for src, w in plan.mixture if len(src)], dtype=np.float64)
    total = sum(len(s) for s in sources)
    n_batches = math.ceil(total / plan.batch_size)
    queues = [rng.permutation(len(s)).tolist() for s in sources]
    cursor = [0] * len(sources)
    picks = rng.choice(len(sources), size=n_batches, p=weights / weights.sum())
    out = []
    for j in picks:
        idx = []
        while len(idx) < plan.batch_size:
            if cursor[j] == len(queues[j]):
                queues[j] = rng.permutation(len(sources[j])).tolist()
                cursor[j] = 0
            take = min(plan.batch_size - len(idx), len(queues[j]) - cursor[j])
            idx.extend(queues[j][cursor[j]:cursor[j] + take])
            cursor[j] += take
            if len(sources[j]) < plan.batch_size and len(idx) >= len(sources[j]):
                break
        out.append([sources[j][i] for i in idx])
    return out


def evaluate_loss(model, samples, batch_size=64):
    """Mean WTA loss over ``samples`` in the eval phase."""
    total, n = 0.0, 0
    for chunk in iter_batches(samples, batch_size):
        batch = collate(chunk, model.cfg)
        loss = wta_l2_loss(model.forward_batch(batch), batch.future, batch.future_mask)
        total += float(loss.data) * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


def train(plan: TrainPlan, cfg, model: OmniTraj | None = None, state: AdamState | None = None,
          start_epoch=0, curve=None, on_epoch=None):
    """Train on ``plan.mixture``; returns the model and the per-epoch loss curve.

    Every epoch draws its batches from its own seeded stream, so a run resumed
    at ``start_epoch`` with the saved optimizer ``state`` and ``curve``
    continues exactly as the uninterrupted run would. ``on_epoch(epoch,
    model, state, curve)`` is called after each completed epoch.
    """
    if not any(len(src) for src, _ in plan.mixture):
        raise ValueError("training mixture is empty")
    model = OmniTraj(cfg) if model is None else model
    state = AdamState(base_lr=plan.lr, total_epochs=plan.epochs) if state is None else state
    curve = [] if curve is None else list(curve)
    for epoch in range(start_epoch, plan.epochs):
        rng = np.random.default_rng([plan.seed, epoch])
        losses = []
        for b, chunk in enumerate(_epoch_batches(plan, rng)):
            batch = collate(chunk, cfg)
            mask_rng = np.random.default_rng([plan.seed, epoch, b, 1])
            with GradTape() as tape:
                tape.watch(model.params)
                pred = model.forward_batch(batch, phase=plan.phase, rng=mask_rng)
                loss = wta_l2_loss(pred, batch.future, batch.future_mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            adam_step(state, model.params, tape.backward(loss), epoch)
            for p in model.params.values():
                p.requires_grad = False
            losses.append(value)
        curve.append((epoch + 1, "train", float(np.mean(losses))))
        if plan.val and (epoch + 1) % plan.eval_every == 0:
            curve.append((epoch + 1, "val", evaluate_loss(model, plan.val)))
        log.info("epoch %d/%d %s", epoch + 1, plan.epochs,
                 " ".join(f"{s}={v:.4f}" for e, s, v in curve if e == epoch + 1))
        if on_epoch is not None:
            on_epoch(epoch + 1, model, state, curve)
    return TrainResult(model, curve)


def predict_all(model, samples, batch_size=64, phase="eval", rng=None):
    """Per-sample predictions [K, t_pred, 2] aligned with ``samples``."""
    index = {id(s): i for i, s in enumerate(samples)}
    out = [None] * len(samples)
    for chunk in iter_batches(samples, batch_size):
        pred = model.forward(chunk, phase=phase, rng=rng).data
        for j, s in enumerate(chunk):
            out[index[id(s)]] = pred[j, :, : s.t_pred]
    return out


def zero_shot_eval(model, test_samples, protocol="zero_shot", variant="", seed=0, batch_size=64):
    """Metrics per setup; never touches the weights."""
    preds = predict_all(model, test_samples, batch_size)
    groups = defaultdict(lambda: ([], []))
    for s, p in zip(test_samples, preds):
        g = groups[setup_name(s)]
        g[0].append(p)
        g[1].append(s.future)
    report = MetricsReport(protocol=protocol, variant=variant or model.cfg.fps_variant, seed=seed,
                           config_digest=model.cfg.digest())
    for name, (ps, gs) in sorted(groups.items()):
        report.setups[name] = summarize(ps, gs)
    return report


def clone_model(model):
    """An independent model with the same weights (optimizer steps rebind arrays)."""
    params = {k: Tensor(v.data.copy()) for k, v in model.params.items()}
    return OmniTraj(model.cfg, params)


def curve_to_csv(curve):
    rows = "".join(f"{e},{s},{v!r}\n" for e, s, v in curve)
    return "epoch,split,loss\n" + rows
