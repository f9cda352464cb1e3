"""Displacement metrics and the winner-takes-all loss."""
import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import ContractError, Tensor
from .numerics.tensor import min_select, mul, reduce_sum, reshape


def _check(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape[-2:] != gt.shape:
        raise ValueError(f"horizon mismatch: prediction {pred.shape}, ground truth {gt.shape}")
    return pred, gt


def _dist(a, b):
    # one formula everywhere so per-mode and batched results agree bit for bit
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])


def ade(pred_mode, gt):
    pred_mode, gt = _check(pred_mode, gt)
    return float(_dist(pred_mode, gt).mean())


def fde(pred_mode, gt):
    pred_mode, gt = _check(pred_mode, gt)
    return float(_dist(pred_mode[-1], gt[-1]))


def per_mode_errors(pred, gt):
    """(ADE, FDE) arrays of length K for a [K, T, 2] prediction."""
    pred, gt = _check(pred, gt)
    dist = _dist(pred, gt[None])
    return dist.mean(axis=1), dist[:, -1]


def min_ade_k(pred, gt):
    return float(per_mode_errors(pred, gt)[0].min())


def min_fde_k(pred, gt):
    return float(per_mode_errors(pred, gt)[1].min())


def wta_l2_loss(pred, gt, horizon_mask):
    """Mean over the batch of min-over-modes mean squared error (square metres).

    ``pred``: Tensor [B, K, T, 2]; ``gt``: [B, T, 2]; ``horizon_mask``: bool [B, T].
    A single sample may be passed without the batch axis.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(horizon_mask, dtype=bool)
    if pred.ndim == 3:
        pred = reshape(pred, (1,) + pred.shape)
        gt, mask = gt[None], mask[None]
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("wta_l2_loss needs at least one valid horizon frame per sample")
    if pred.shape[2] != gt.shape[1]:
        raise ValueError(f"horizon mismatch: prediction {pred.shape}, ground truth {gt.shape}")
    diff = pred - gt[:, None]
    sq = reduce_sum(mul(diff, diff), axis=-1)                         # [B, K, T]
    w = (mask / counts[:, None])[:, None, :]
    per_mode = reduce_sum(mul(sq, w), axis=-1)                        # [B, K]
    best = min_select(per_mode, axis=1)                               # [B]
    return mul(reduce_sum(best), 1.0 / best.shape[0])


@dataclass
class SetupMetrics:
    ade: float
    fde: float
    min_ade_k: float
    min_fde_k: float
    n: int


def summarize(preds, gts):
    """Aggregate per-sample [K, T, 2] predictions.

    ``ade``/``fde`` average the per-mode errors over modes (so ``min_*`` never
    exceeds them); ``min_*`` take the best mode per sample.
    """
    a, f, ma, mf = [], [], [], []
    for pred, gt in zip(preds, gts):
        pa, pf = per_mode_errors(pred, gt)
        a.append(pa.mean())
        f.append(pf.mean())
        ma.append(pa.min())
        mf.append(pf.min())
    if not a:
        return SetupMetrics(float("nan"), float("nan"), float("nan"), float("nan"), 0)
    return SetupMetrics(float(np.mean(a)), float(np.mean(f)), float(np.mean(ma)), float(np.mean(mf)), len(a))


CSV_COLUMNS = ("protocol", "setup", "variant", "seed", "ade", "fde", "min_ade_k", "min_fde_k", "n")


@dataclass
class MetricsReport:
    setups: dict = field(default_factory=dict)  # setup name -> SetupMetrics
    protocol: str = "eval"
    variant: str = ""
    seed: int = 0
    config_digest: str = ""

    @property
    def n(self):
        return sum(m.n for m in self.setups.values())

    def rows(self):
        for name in sorted(self.setups):
            m = self.setups[name]
            yield {"protocol": self.protocol, "setup": name, "variant": self.variant,
                   "seed": self.seed, **asdict(m)}

    def to_json(self):
        return json.dumps({
            "protocol": self.protocol, "variant": self.variant, "seed": self.seed,
            "config_digest": self.config_digest, "units": "metres",
            "setups": {k: asdict(v) for k, v in sorted(self.setups.items())},
        }, indent=2, sort_keys=True)


def format_value(v):
    return repr(v) if isinstance(v, float) else str(v)


def rows_to_csv(rows, columns=CSV_COLUMNS):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()
