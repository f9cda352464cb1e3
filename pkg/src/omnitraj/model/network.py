"""The OmniTraj forecaster.

Pipeline: cue embeddings -> frame-rate conditioning -> stochastic masking ->
cross-modality encoder (per agent) -> historical interaction encoder (all
agents) -> predictive interaction decoder with ego-centric cross-attention
-> K-mode displacement head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..numerics import ConfigError, ContractError, Tensor
from ..numerics import layers as L
from ..numerics.tensor import (
    broadcast_to,
    concat,
    cumsum,
    getitem,
    mul,
    reduce_sum,
    reshape,
)
from ..trajstore import CUE_SHAPES, CueKind
from .batch import Batch, collate
from .config import ModelConfig

PHASES = ("pretrain", "finetune", "eval")
_CUE_CODE = {kind: i for i, kind in enumerate(CueKind)}
FPS_TOKEN = -1


class HorizonError(ValueError):
    pass


def round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass
class TokenBatch:
    tokens: Tensor          # [B, N, L, D]
    key_mask: np.ndarray    # [B, N, L] True = may be attended
    cue: np.ndarray         # [L] cue code per position (FPS_TOKEN for the FPS token)
    time: np.ndarray        # [L] frame index, -1 for the FPS token
    keypoint: np.ndarray    # [L] element index within the cue
    t_obs: np.ndarray       # [B]
    n_traj: int             # trajectory tokens occupy positions [0, n_traj)
    dropped: np.ndarray     # [B, N, L] stochastically masked

    @property
    def n_tokens(self):
        return self.tokens.shape[1] * self.tokens.shape[2]


@dataclass
class FpsCond:
    variant: str
    vector: Tensor | None = None  # [B, D]
    gamma: Tensor | None = None
    beta: Tensor | None = None


@dataclass
class Prediction:
    modes: np.ndarray  # [K, t_pred, 2], normalised ego frame


def init_params(cfg):
    """All learnable parameters, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    p = {}
    for c in cfg.cues_enabled:
        kind = CueKind(c)
        f_in = CUE_SHAPES[kind][1]
        L.init_mlp(p, f"embed.{c}", rng, f_in, d, d)
        if kind is not CueKind.T:
            p[f"embed.{c}.keypoint"] = Tensor(rng.normal(0, 0.02, (cfg.cue_elements[c], d)))
    p["embed.identity"] = Tensor(rng.normal(0, 0.02, (2, d)))
    v = cfg.fps_variant
    if v in ("mlp_sum", "mlp_token"):
        L.init_mlp(p, "fps.mlp", rng, 1, d, d)
    elif v == "film":
        L.init_linear(p, "fps.film.hidden", rng, 1, d)
        L.init_linear(p, "fps.film.gamma", rng, d, d, zero=True)
        L.init_linear(p, "fps.film.beta", rng, d, d, zero=True)
    elif v == "codebook":
        p["fps.codebook"] = Tensor(rng.normal(0, 0.02, (len(cfg.codebook_keys), d)))
    L.init_encoder(p, "cme", rng, d, cfg.cme_layers)
    if cfg.use_hie:
        L.init_encoder(p, "hie", rng, d, cfg.hie_layers)
    if cfg.use_decoder:
        p["pid.q_ego"] = Tensor(rng.normal(0, 1.0, (cfg.n_modes, d)))
        if cfg.n_ctx_queries:
            p["pid.q_ctx"] = Tensor(rng.normal(0, 1.0, (cfg.n_ctx_queries, d)))
        L.init_decoder(p, "pid.dec", rng, d, cfg.pid_decoder_layers)
        if cfg.use_ca:
            L.init_layer_norm(p, "pid.ca.ln_q", d)
            L.init_layer_norm(p, "pid.ca.ln_kv", d)
            L.init_mha(p, "pid.ca", rng, d, zero_out=True)
    else:
        L.init_linear(p, "pool.heads", rng, d, cfg.n_modes * d)
    L.init_mlp(p, "head", rng, d, d, cfg.max_t_pred * 2)
    for name, t in p.items():
        t.name = name
    return p


class OmniTraj:
    def __init__(self, cfg: ModelConfig, params=None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        missing = set(init_params(cfg)) - set(self.params) if params is not None else set()
        if missing:
            raise ConfigError(f"weights missing parameters: {sorted(missing)[:3]}")
        self._pe = L.sinusoidal_encoding(cfg.max_t_obs, cfg.d_model)

    # -- embeddings -----------------------------------------------------------

    def embed_cues(self, batch: Batch) -> TokenBatch:
        cfg, p = self.cfg, self.params
        b, n, t, _ = batch.traj.shape
        if t > cfg.max_t_obs:
            raise HorizonError(f"t_obs {t} exceeds max_t_obs {cfg.max_t_obs}")
        d = cfg.d_model
        pe = self._pe[:t]
        ident = getitem(p["embed.identity"], np.where(batch.is_ego, 0, 1))  # [B, N, D]
        ident4 = reshape(ident, (b, n, 1, d))

        traj = L.apply_mlp(p, "embed.T", Tensor(batch.traj))            # [B, N, T, D]
        parts = [traj + pe + ident4]
        masks = [batch.traj_valid]
        cue = [np.full(t, _CUE_CODE[CueKind.T])]
        time = [np.arange(t)]
        kp = [np.zeros(t, int)]
        for kind, arr in batch.cues.items():
            e = arr.shape[3]
            h = L.apply_mlp(p, f"embed.{kind.value}", Tensor(arr))          # [B, N, T, e, D]
            h = h + pe[:, None, :] + p[f"embed.{kind.value}.keypoint"] + reshape(ident, (b, n, 1, 1, d))
            parts.append(reshape(h, (b, n, t * e, d)))
            masks.append(batch.cue_valid[kind].reshape(b, n, t * e))
            cue.append(np.full(t * e, _CUE_CODE[kind]))
            time.append(np.repeat(np.arange(t), e))
            kp.append(np.tile(np.arange(e), t))
        tokens = parts[0] if len(parts) == 1 else concat(parts, axis=2)
        key_mask = np.concatenate(masks, axis=2)
        return TokenBatch(
            tokens=tokens, key_mask=key_mask, cue=np.concatenate(cue),
            time=np.concatenate(time), keypoint=np.concatenate(kp),
            t_obs=batch.t_obs.copy(), n_traj=t, dropped=np.zeros_like(key_mask),
        )

    # -- frame-rate conditioning ------------------------------------------------

    def encode_fps(self, fps) -> FpsCond:
        cfg, p = self.cfg, self.params
        r = np.atleast_1d(np.asarray(fps, dtype=np.float64))
        if np.any(~(r > 0)):
            raise ValueError("frame rate must be positive")
        v = cfg.fps_variant
        x = Tensor((r / cfg.fps_reference)[:, None])
        if v in ("mlp_sum", "mlp_token"):
            return FpsCond(v, vector=L.apply_mlp(p, "fps.mlp", x))
        if v == "film":
            h = L.gelu(L.apply_linear(p, "fps.film.hidden", x))
            return FpsCond(v, gamma=L.apply_linear(p, "fps.film.gamma", h) + 1.0,
                           beta=L.apply_linear(p, "fps.film.beta", h))
        if v == "codebook":
            keys = np.asarray(cfg.codebook_keys)
            idx = np.argmin(np.abs(r[:, None] - keys[None, :]), axis=1)
            return FpsCond(v, vector=getitem(p["fps.codebook"], idx))
        return FpsCond("none")

    def apply_fps(self, tb: TokenBatch, cond: FpsCond) -> TokenBatch:
        if cond.variant != self.cfg.fps_variant:
            raise ContractError(f"conditioning variant {cond.variant!r} does not match "
                                f"model variant {self.cfg.fps_variant!r}")
        v = cond.variant
        if v == "none":
            return tb
        b, n, l, d = tb.tokens.shape
        if v in ("mlp_sum", "codebook"):
            return replace(tb, tokens=tb.tokens + reshape(cond.vector, (b, 1, 1, d)))
        if v == "film":
            return replace(tb, tokens=tb.tokens * reshape(cond.gamma, (b, 1, 1, d))
                           + reshape(cond.beta, (b, 1, 1, d)))
        extra = broadcast_to(reshape(cond.vector, (b, 1, 1, d)), (b, n, 1, d))
        return replace(
            tb,
            tokens=concat([tb.tokens, extra], axis=2),
            key_mask=np.concatenate([tb.key_mask, np.ones((b, n, 1), bool)], axis=2),
            cue=np.append(tb.cue, FPS_TOKEN),
            time=np.append(tb.time, -1),
            keypoint=np.append(tb.keypoint, 0),
            dropped=np.concatenate([tb.dropped, np.zeros((b, n, 1), bool)], axis=2),
        )

    # -- masking --------------------------------------------------------------

    def apply_masks(self, tb: TokenBatch, phase, rng) -> TokenBatch:
        """Modality, spatial and temporal dropping of tokens (pretrain phase only)."""
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if phase != "pretrain":
            return tb
        ratios = self.cfg.mask_ratios
        b, n, _ = tb.key_mask.shape
        t = tb.n_traj
        drop = np.zeros_like(tb.key_mask)
        frame_pos = tb.time >= 0

        # temporal: the last two observed frames are never candidates
        candidate = np.arange(t)[None, :] < (tb.t_obs - 2)[:, None]           # [B, T]
        counts = np.array([round_half_up(ratios["temporal"] * max(int(k) - 2, 0)) for k in tb.t_obs])
        keys = np.where(candidate[:, None, :], rng.random((b, n, t)), np.inf)
        ranks = np.argsort(np.argsort(keys, axis=-1, kind="stable"), axis=-1, kind="stable")
        frame_drop = ranks < counts[:, None, None]                               # [B, N, T]
        drop[:, :, frame_pos] |= frame_drop[:, :, tb.time[frame_pos]]

        aux = [k for k in CueKind if k is not CueKind.T and np.any(tb.cue == _CUE_CODE[k])]
        if aux:
            cue_drop = rng.random((b, n, len(aux))) < ratios["modality"]
            for j, kind in enumerate(aux):
                pos = tb.cue == _CUE_CODE[kind]
                drop[:, :, pos] |= cue_drop[:, :, j:j + 1]
        for kind in (CueKind.P3, CueKind.P2):
            pos = np.flatnonzero(tb.cue == _CUE_CODE[kind])
            if not pos.size:
                continue
            e = int(tb.keypoint[pos].max()) + 1
            k = round_half_up(ratios["spatial"] * e)
            ranks = np.argsort(np.argsort(rng.random((b, n, t, e)), axis=-1), axis=-1)
            kp_drop = (ranks < k).reshape(b, n, t * e)
            drop[:, :, pos] |= kp_drop
        drop &= tb.cue[None, None, :] != FPS_TOKEN
        return replace(tb, key_mask=tb.key_mask & ~drop, dropped=tb.dropped | drop)

    # -- encoders ---------------------------------------------------------------

    def cme_forward(self, tb: TokenBatch):
        """Per-agent encoder over all of an agent's tokens; returns (mH^T [B, N, T, D], valid [B, N, T])."""
        cfg = self.cfg
        b, n, l, d = tb.tokens.shape
        x = reshape(tb.tokens, (b * n, l, d))
        mask = tb.key_mask.reshape(b * n, l)
        h = L.encoder(self.params, "cme", x, cfg.cme_layers, cfg.n_heads, mask)
        t = tb.n_traj
        traj = reshape(h[:, :t], (b, n, t, d))
        return traj, tb.key_mask[:, :, :t]

    def hie_forward(self, mh, valid):
        """Cross-agent, cross-time encoder over trajectory tokens; returns (H [B, N*T, D], valid)."""
        b, n, t, d = mh.shape
        h = reshape(mh, (b, n * t, d))
        v = valid.reshape(b, n * t)
        if not self.cfg.use_hie:
            return h, v
        return L.encoder(self.params, "hie", h, self.cfg.hie_layers, self.cfg.n_heads, v), v

    def pid_forward(self, h, valid, n_traj):
        """Learned ego/context queries decoded against H, then ego-centric cross-attention.

        Returns Z*_ego [B, K, D].
        """
        cfg, p = self.cfg, self.params
        b, _, d = h.shape
        k = cfg.n_modes
        if not cfg.use_decoder:
            ego = h[:, :n_traj]                                   # ego is agent slot 0
            w = valid[:, :n_traj].astype(np.float64)
            pooled = mul(reduce_sum(mul(ego, w[..., None]), axis=1),
                         (1.0 / np.maximum(w.sum(axis=1), 1.0))[:, None])
            return reshape(L.apply_linear(p, "pool.heads", pooled), (b, k, d))
        queries = p["pid.q_ego"]
        if cfg.n_ctx_queries:
            queries = concat([queries, p["pid.q_ctx"]], axis=0)
        q = broadcast_to(reshape(queries, (1,) + queries.shape), (b,) + queries.shape)
        z = L.decoder(p, "pid.dec", q, h, cfg.pid_decoder_layers, cfg.n_heads, valid)
        z_ego = z[:, :k]
        if not cfg.use_ca or not cfg.n_ctx_queries:
            return z_ego
        z_ctx = z[:, k:]
        qn = L.apply_layer_norm(p, "pid.ca.ln_q", z_ego)
        kv = L.apply_layer_norm(p, "pid.ca.ln_kv", z_ctx)
        return z_ego + L.mha(p, "pid.ca", qn, kv, kv, cfg.n_heads)

    def predict(self, z, t_pred):
        """Per-mode displacement rollout; returns positions [B, K, t_pred, 2]."""
        cfg = self.cfg
        if t_pred > cfg.max_t_pred:
            raise HorizonError(f"t_pred {t_pred} exceeds max_t_pred {cfg.max_t_pred}")
        b, k, _ = z.shape
        disp = reshape(L.apply_mlp(self.params, "head", z), (b, k, cfg.max_t_pred, 2))
        return cumsum(disp, axis=2)[:, :, :t_pred]

    # -- full pass --------------------------------------------------------------

    def tokens(self, batch, phase="eval", rng=None):
        tb = self.embed_cues(batch)
        tb = self.apply_fps(tb, self.encode_fps(batch.fps))
        if phase == "pretrain":
            if rng is None:
                raise ValueError("pretrain phase needs an rng")
            tb = self.apply_masks(tb, phase, rng)
        return tb

    def forward_batch(self, batch: Batch, phase="eval", rng=None, return_tokens=False):
        tb = self.tokens(batch, phase, rng)
        mh, valid = self.cme_forward(tb)
        h, hv = self.hie_forward(mh, valid)
        z = self.pid_forward(h, hv, tb.n_traj)
        out = self.predict(z, int(batch.t_pred.max()))
        return (out, tb) if return_tokens else out

    def forward(self, samples, phase="eval", rng=None):
        """Predicted modes [B, K, max t_pred, 2] for a list of normalised windows."""
        return self.forward_batch(collate(list(samples), self.cfg), phase, rng)

    def predict_samples(self, samples, phase="eval", rng=None):
        out = self.forward(samples, phase, rng).data
        return [Prediction(out[i, :, : s.t_pred].copy()) for i, s in enumerate(samples)]

    def collate(self, samples):
        return collate(list(samples), self.cfg)
