"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Heavy training protocols are marked ``slow``; ``pytest -m "not slow"`` skips
them, a plain ``pytest`` runs everything.
"""
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from conftest import record_criterion, social_samples, tiny_config

from omnitraj.metrics import ade, fde, min_ade_k, min_fde_k, wta_l2_loss
from omnitraj.model import FPS_VARIANTS, OmniTraj, collate, init_params
from omnitraj.model.network import round_half_up
from omnitraj.numerics import Tensor, finite_diff_check
from omnitraj.protocols import (
    DECOUPLED_ROWS,
    run_ablation_decoupled,
    run_ablation_fps,
    run_two_frame_comparison,
)
from omnitraj.synthgen import (
    SETUP_1,
    SETUP_2,
    GenSpec,
    attach_synthetic_pose,
    build_cross_setup_benchmark,
    generate,
    windows_for_setup,
)
from omnitraj.training import TrainPlan, train, zero_shot_eval
from omnitraj.trajstore import (
    CueKind,
    SampleWindow,
    SceneRecord,
    cache_read,
    cache_write,
    extract_windows,
    make_track,
    resample,
)

SEEDS = (0, 1, 2)


def _median(values):
    return float(np.median(values))


# -- 1. gradient integrity --------------------------------------------------------

def _gradcheck_model(variant):
    cfg = tiny_config(fps_variant=variant, n_modes=2, max_t_obs=4, max_t_pred=3)
    model = OmniTraj(cfg)
    rng = np.random.default_rng(7)
    # zero-initialised projections would hide the paths behind them
    for p in model.params.values():
        if not np.any(p.data):
            p.data = 0.1 * rng.normal(size=p.data.shape)
    scenes = generate(GenSpec(kind="social", n_scenes=1, n_agents=2, seed=2, noise_std=0.05))
    sample = windows_for_setup(scenes, replace(SETUP_1, t_obs=4, t_pred=3))[0]
    batch = collate([sample], cfg)

    def loss(params):
        m = OmniTraj(cfg, params)
        return wta_l2_loss(m.forward_batch(batch)[0], batch.future[0], batch.future_mask[0])

    return finite_diff_check(loss, model.params, eps=1e-5, per_param=12)


def test_c01_gradient_integrity():
    start = time.perf_counter()
    errors = {v: _gradcheck_model(v) for v in FPS_VARIANTS}
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 120
    record_criterion(1, "gradient integrity", ok,
                     f"max_rel_err={worst:.2e} runtime={elapsed:.1f}s "
                     + " ".join(f"{k}={v:.1e}" for k, v in errors.items()))
    assert ok


# -- 2. metric oracle -------------------------------------------------------------

def test_c02_metric_oracle():
    rng = np.random.default_rng(2)
    exact = True
    for _ in range(500):
        pred, gt = rng.normal(size=(20, 12, 2)), rng.normal(size=(12, 2))
        ades = [ade(m, gt) for m in pred]
        fdes = [fde(m, gt) for m in pred]
        exact &= min_ade_k(pred, gt) == min(ades) and min_fde_k(pred, gt) == min(fdes)
    worst = 0.0
    for _ in range(500):
        pred, gt = rng.normal(size=(12, 2)), rng.normal(size=(12, 2))
        s = rng.uniform(0.01, 100.0)
        shift = rng.uniform(-50, 50, size=2)
        base_a, base_f = ade(pred, gt), fde(pred, gt)
        worst = max(worst,
                    abs(ade(s * pred, s * gt) - s * base_a) / (s * base_a),
                    abs(fde(s * pred, s * gt) - s * base_f) / (s * base_f),
                    abs(ade(pred + shift, gt + shift) - base_a) / base_a,
                    abs(fde(pred + shift, gt + shift) - base_f) / base_f)
    ok = exact and worst <= 1e-12
    record_criterion(2, "metric oracle", ok, f"min-over-modes exact={exact} invariance_rel_err={worst:.1e}")
    assert ok


# -- 3. mask soundness ---------------------------------------------------------------

def _pose_windows():
    scenes = generate(GenSpec(kind="social", n_scenes=30, n_agents=3, seed=8, noise_std=0.02))
    scenes = [attach_synthetic_pose(s, seed=3) for s in scenes]
    wins = windows_for_setup(scenes, SETUP_1, stride=10) + windows_for_setup(scenes, SETUP_2, stride=6)
    idx = np.random.default_rng(0).choice(len(wins), size=100, replace=False)
    return [wins[i] for i in idx]


def _perturb(sample, tb, rng):
    """Add noise to the raw input behind every dropped token of batch item 0."""
    order = [sample.ego_index] + [j for j in range(sample.n_agents) if j != sample.ego_index]
    obs = {k: v.copy() for k, v in sample.obs.items()}
    t = sample.t_obs
    for slot, pos in zip(*np.nonzero(tb.dropped[0])):
        if slot >= sample.n_agents:
            continue
        agent, frame, kp = order[slot], tb.time[pos], tb.keypoint[pos]
        kind = list(CueKind)[tb.cue[pos]]
        obs[kind][agent, frame, kp] += rng.normal(size=obs[kind].shape[-1]) * 5.0
    assert all(v.shape[1] == t for v in obs.values())
    return replace(sample, obs=obs)


def test_c03_mask_soundness():
    cfg = tiny_config(cues_enabled=("T", "P3"))
    model = OmniTraj(cfg)
    rng = np.random.default_rng(1)
    inert = ego_kept = counts_ok = True
    n_dropped = 0
    for i, sample in enumerate(_pose_windows()):
        batch = collate([sample], cfg)
        out, tb = model.forward_batch(batch, "pretrain", np.random.default_rng([i]), return_tokens=True)
        n_dropped += int(tb.dropped.sum())
        traj_drop = tb.dropped[0, :, : tb.n_traj]
        ego_kept &= not traj_drop[0, -2:].any()
        expect = round_half_up(0.75 * (sample.t_obs - 2))
        counts_ok &= bool(np.all(traj_drop[: sample.n_agents].sum(axis=1) == expect))
        again = model.forward_batch(collate([_perturb(sample, tb, rng)], cfg), "pretrain",
                                    np.random.default_rng([i]))
        inert &= np.array_equal(out.data, again.data)
    ok = inert and ego_kept and counts_ok
    record_criterion(3, "mask soundness", ok,
                     f"dropped tokens inert={inert} ego last two kept={ego_kept} "
                     f"temporal count={counts_ok} ({n_dropped} dropped tokens)")
    assert ok


# -- 4. FPS identity at init ---------------------------------------------------------

def test_c04_fps_identity_at_init():
    samples = social_samples(3) + social_samples(2, setup=SETUP_2, seed=4)
    base = OmniTraj(tiny_config(fps_variant="none"))
    same = {}
    for variant in ("mlp_sum", "film"):
        params = init_params(tiny_config(fps_variant=variant))
        params.update({k: v for k, v in base.params.items() if k in params})
        if variant == "mlp_sum":
            for k in [k for k in params if k.startswith("fps.mlp")]:
                params[k] = Tensor(np.zeros_like(params[k].data))
        m = OmniTraj(tiny_config(fps_variant=variant), params)
        same[variant] = all(np.array_equal(m.forward(chunk).data, base.forward(chunk).data)
                            for chunk in (samples[:3], samples[3:]))
    ok = all(same.values())
    record_criterion(4, "fps identity at init", ok, " ".join(f"{k} bit-identical={v}" for k, v in same.items()))
    assert ok


# -- 5. synthetic cross-setup benchmark ---------------------------------------------

C5_SPEC = GenSpec(kind="const_velocity", n_scenes=3500, n_agents=1, noise_std=0.02, seed=11,
                  turn_rate_range=(-0.6, 0.6))
C5_MODEL = tiny_config(d_model=64, n_heads=4, n_modes=6, n_ctx_queries=4, fps_reference=1.0)
C5_PLAN = TrainPlan(epochs=15, batch_size=32, phase="finetune", lr=1e-3)


@pytest.mark.slow
def test_c05_cross_setup_benchmark():
    bench = build_cross_setup_benchmark(C5_SPEC, n_test_scenes=500)
    assert len(bench.train_scene_ids) >= 3000 and len(bench.test_scene_ids) == 500
    start = time.perf_counter()
    table = run_ablation_fps(bench, C5_MODEL, C5_PLAN, variants=("none", "mlp_sum"), seeds=SEEDS)
    per_run = (time.perf_counter() - start) / 6
    none, mlp = table.median("none"), table.median("mlp_sum")
    ok = mlp <= 0.8 * none and per_run < 1800
    record_criterion(5, "cross-setup benchmark", ok,
                     f"setup3 median minADE none={none:.4f} mlp_sum={mlp:.4f} ratio={mlp / none:.3f} "
                     f"per-run={per_run:.0f}s")
    assert ok



# -- 6. decoupled-module ablation --------------------------------------------------

@pytest.mark.slow
def test_c06_decoupled_ablation():
    spec = GenSpec(kind="social", n_scenes=300, n_agents=3, noise_std=0.02, seed=6,
                   repulsion_strength=4.0, area=3.0)
    scenes = generate(spec)
    train_set, test_set = windows_for_setup(scenes[:-50], SETUP_1), windows_for_setup(scenes[-50:], SETUP_1)
    cfg = tiny_config(d_model=32, n_heads=4, n_modes=6, n_ctx_queries=4)
    plan = TrainPlan(epochs=15, batch_size=16, phase="finetune", lr=1e-3)
    table = run_ablation_decoupled(train_set, test_set, cfg, plan, seeds=SEEDS)
    assert table.row_names() == [r[0] for r in DECOUPLED_ROWS]
    full, backbone = table.median("all"), table.median("backbone")
    rows = " ".join(f"{r}={table.median(r):.3f}" for r in table.row_names())
    ok = full <= backbone
    record_criterion(6, "decoupled ablation", ok, f"median minADE {rows}")
    assert ok


# -- 7. two-frame robustness --------------------------------------------------------

@pytest.mark.slow
def test_c07_two_frame_robustness():
    scenes = generate(GenSpec(kind="turning", n_scenes=600, n_agents=1, noise_std=0.02, seed=7,
                              turn_rate_range=(-0.6, 0.6)))
    train_set, test_set = windows_for_setup(scenes[:-100], SETUP_1), windows_for_setup(scenes[-100:], SETUP_1)
    cfg = tiny_config(d_model=32, n_heads=4, n_modes=6, n_ctx_queries=4)
    plan = TrainPlan(epochs=15, batch_size=16, lr=1e-3)
    results = run_two_frame_comparison(train_set, test_set, cfg, plan, seeds=SEEDS)
    deg = {arm: _median([r.degradation_pct["min_ade_k"] for r in per_seed]) for arm, per_seed in results.items()}
    plain = {arm: _median([r.degradation_pct["ade"] for r in per_seed]) for arm, per_seed in results.items()}
    ok = deg["masked"] < deg["unmasked"]
    record_criterion(7, "two-frame robustness", ok,
                     f"median minADE degradation masked={deg['masked']:.1f}% unmasked={deg['unmasked']:.1f}% "
                     f"(mean-over-modes ADE: {plain['masked']:.1f}% vs {plain['unmasked']:.1f}%)")
    assert ok

# -- 8. learnability ---------------------------------------------------------------

def test_c08_learnability():
    def cv_windows(n, seed):
        spec = GenSpec(kind="const_velocity", n_scenes=n, n_agents=1, noise_std=0.0, seed=seed)
        return windows_for_setup(generate(spec), SETUP_1)

    train_set, val_set = cv_windows(1000, 21), cv_windows(200, 22)
    assert len(train_set) == 1000
    cfg = tiny_config(d_model=32, n_heads=4, n_modes=1, seed=0)
    plan = TrainPlan(epochs=20, batch_size=8, mixture=[(train_set, 1.0)], phase="finetune", lr=2e-3, seed=0)
    start = time.perf_counter()
    result = train(plan, cfg)
    elapsed = time.perf_counter() - start
    val_ade = zero_shot_eval(result.model, val_set).setups["setup1"].ade
    losses = result.losses("train")
    drop = 1.0 - losses[-1] / losses[0]
    ok = val_ade < 0.05 and elapsed < 300 and drop >= 0.5
    record_criterion(8, "learnability", ok,
                     f"val ADE={val_ade:.4f} m loss epoch1={losses[0]:.4f} epoch20={losses[-1]:.4f} "
                     f"drop={100 * drop:.1f}% runtime={elapsed:.0f}s")
    assert ok


# -- 9. data layer ------------------------------------------------------------------

def _random_scene(rng):
    fps = float(rng.choice([5.0, 10.0, 25.0]))
    agents = []
    for j in range(int(rng.integers(1, 4))):
        first = int(rng.integers(0, 6))
        n = int(rng.integers(1, 30))
        frames = first + np.arange(n)
        present = rng.random(n) > 0.15
        xy = np.where(present[:, None], rng.normal(size=(n, 2)), np.nan)
        agents.append(make_track(f"a{j}", frames, xy, present))
    return SceneRecord(f"r{rng.integers(10**6)}", fps, tuple(agents))


def _brute_resample(scene, k):
    return {a.agent_id: [(int(f) // k, p) for f, p in zip(a.frames, a.present) if f % k == 0]
            for a in scene.agents}


def _brute_windows(scene, t_obs, t_pred, stride):
    lo = min(int(a.frames.min()) for a in scene.agents)
    hi = max(int(a.frames.max()) for a in scene.agents)
    present = {a.agent_id: {int(f) for f, p in zip(a.frames, a.present) if p} for a in scene.agents}
    count = 0
    for s in range(lo, hi + 1):
        if (s - lo) % stride or s + t_obs + t_pred - 1 > hi:
            continue
        for a in scene.agents:
            frames = present[a.agent_id]
            if s + t_obs - 1 in frames and all(f in frames for f in range(s + t_obs, s + t_obs + t_pred)):
                count += 1
    return count


def test_c09_data_layer(tmp_path):
    rng = np.random.default_rng(9)
    resample_ok = windows_ok = True
    for _ in range(200):
        scene = _random_scene(rng)
        k = int(rng.choice([1, 5]))
        low = resample(scene, scene.base_fps / k)
        expect = _brute_resample(scene, k)
        got = {a.agent_id: list(zip(a.frames.tolist(), a.present.tolist())) for a in low.agents}
        resample_ok &= got == {key: [(f, bool(p)) for f, p in v] for key, v in expect.items()}
        t_obs, t_pred, stride = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        windows_ok &= len(extract_windows(scene, t_obs, t_pred, stride)) == _brute_windows(scene, t_obs, t_pred, stride)

    scenes = generate(GenSpec(kind="social", n_scenes=80, n_agents=4, noise_std=0.05, seed=5))
    scenes = [attach_synthetic_pose(s, seed=2) for s in scenes[:40]] + scenes[40:]
    samples = (windows_for_setup(scenes, SETUP_1, stride=3) + windows_for_setup(scenes, SETUP_2, stride=2))[:1000]
    assert len(samples) == 1000 and all(isinstance(s, SampleWindow) for s in samples)
    cache_write(samples, tmp_path / "windows.bin")
    back = cache_read(tmp_path / "windows.bin")
    cache_ok = len(back) == 1000 and all(a.bitwise_equal(b) for a, b in zip(samples, back))
    ok = resample_ok and windows_ok and cache_ok
    record_criterion(9, "data layer", ok, f"resample counts={resample_ok} window counts={windows_ok} "
                     f"cache bit-exact={cache_ok} (1000 samples)")
    assert ok


# -- 10. determinism ------------------------------------------------------------------

def _cli(*args):
    return subprocess.run([sys.executable, "-m", "omnitraj.cli", *args], capture_output=True, text=True)


def test_c10_determinism(tmp_path):
    import json

    outputs = []
    for run in ("a", "b"):
        cfg = {
            "data": {"kind": "social", "n_scenes": 24, "n_agents": 3, "noise_std": 0.02, "seed": 3},
            "model": {"d_model": 16, "n_heads": 2, "cme_layers": 1, "hie_layers": 1, "pid_decoder_layers": 1,
                      "n_modes": 3, "n_ctx_queries": 2, "max_t_obs": 10, "max_t_pred": 20},
            "train": {"epochs": 2, "batch_size": 8, "lr": 1e-3},
            "output_dir": str(tmp_path / run),
            "seed": 5,
        }
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps(cfg))
        for cmd in ("train", "eval"):
            proc = _cli(cmd, "--config", str(path))
            assert proc.returncode == 0, proc.stderr
        outputs.append((tmp_path / run / "metrics.csv").read_bytes())
    ok = outputs[0] == outputs[1]
    record_criterion(10, "determinism", ok, f"metrics.csv byte-identical={ok} ({len(outputs[0])} bytes)")
    assert ok
