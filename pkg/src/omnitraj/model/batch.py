"""Padding a list of sample windows into dense batch arrays."""
from dataclasses import dataclass

import numpy as np

from ..numerics import ConfigError
from ..trajstore import CueKind


@dataclass
class Batch:
    traj: np.ndarray          # [B, N, T, 2], ego in slot 0, NaN-free
    traj_valid: np.ndarray    # [B, N, T]
    cues: dict                # kind -> [B, N, T, e, f]
    cue_valid: dict           # kind -> [B, N, T, e]
    is_ego: np.ndarray        # [B, N]
    agent_exists: np.ndarray  # [B, N]
    fps: np.ndarray           # [B]
    t_obs: np.ndarray         # [B]
    t_pred: np.ndarray        # [B]
    future: np.ndarray        # [B, Tp, 2]
    future_mask: np.ndarray   # [B, Tp]
    offsets: np.ndarray       # [B, 2]

    @property
    def size(self):
        return self.traj.shape[0]


def collate(samples, cfg):
    """Stack samples; the ego moves to agent slot 0, neighbours keep their order."""
    if not samples:
        raise ValueError("cannot collate an empty batch")
    b = len(samples)
    n = max(s.n_agents for s in samples)
    t = max(s.t_obs for s in samples)
    tp = max(s.t_pred for s in samples)
    enabled = set(cfg.cues_enabled)
    kinds = []
    for s in samples:
        for kind in s.obs:
            if kind.value not in enabled:
                raise ConfigError(f"cue {kind.value} present in sample but not enabled in config")
            if kind is not CueKind.T and kind not in kinds:
                kinds.append(kind)
    kinds.sort(key=lambda k: list(CueKind).index(k))

    traj = np.zeros((b, n, t, 2))
    traj_valid = np.zeros((b, n, t), bool)
    cues, cue_valid = {}, {}
    for kind in kinds:
        e = cfg.cue_elements[kind.value]
        f = next(s.obs[kind].shape[3] for s in samples if kind in s.obs)
        cues[kind] = np.zeros((b, n, t, e, f))
        cue_valid[kind] = np.zeros((b, n, t, e), bool)
    exists = np.zeros((b, n), bool)
    future = np.zeros((b, tp, 2))
    future_mask = np.zeros((b, tp), bool)
    for i, s in enumerate(samples):
        order = [s.ego_index] + [j for j in range(s.n_agents) if j != s.ego_index]
        na, to = s.n_agents, s.t_obs
        xy = s.obs[CueKind.T][order, :, 0, :].astype(np.float64)
        valid = s.obs_valid[order] & np.all(np.isfinite(xy), axis=-1)
        traj[i, :na, :to] = np.where(valid[..., None], xy, 0.0)
        traj_valid[i, :na, :to] = valid
        exists[i, :na] = True
        for kind in kinds:
            if kind not in s.obs:
                continue
            arr = s.obs[kind][order].astype(np.float64)
            e = arr.shape[2]
            if e != cues[kind].shape[3] or arr.shape[3] != cues[kind].shape[4]:
                raise ConfigError(f"cue {kind.value} has shape {arr.shape[2:]}, config expects "
                                  f"{cues[kind].shape[3:]}")
            ok = valid[..., None] & np.all(np.isfinite(arr), axis=-1)
            cues[kind][i, :na, :to] = np.where(ok[..., None], arr, 0.0)
            cue_valid[kind][i, :na, :to] = ok
        future[i, : s.t_pred] = s.future
        future_mask[i, : s.t_pred] = True
    is_ego = np.zeros((b, n), bool)
    is_ego[:, 0] = True
    return Batch(
        traj=traj, traj_valid=traj_valid, cues=cues, cue_valid=cue_valid,
        is_ego=is_ego, agent_exists=exists,
        fps=np.array([s.fps for s in samples], dtype=np.float64),
        t_obs=np.array([s.t_obs for s in samples]),
        t_pred=np.array([s.t_pred for s in samples]),
        future=future, future_mask=future_mask,
        offsets=np.array([s.normalization_offset for s in samples], dtype=np.float64),
    )
