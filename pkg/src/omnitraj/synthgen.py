"""Deterministic synthetic scenes and the cross-setup zero-shot benchmark."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import kernels
from .trajstore import CueKind, SceneRecord, AgentTrack, extract_windows, normalize, resample

KINDS = ("const_velocity", "turning", "social")


@dataclass(frozen=True)
class GenSpec:
    kind: str = "const_velocity"
    n_scenes: int = 10
    n_agents: int = 1
    base_fps: float = 25.0
    duration_s: float = 6.0
    speed_range: tuple = (0.5, 2.0)
    turn_rate_range: tuple = (-0.5, 0.5)
    noise_std: float = 0.0
    seed: int = 0
    heading_range: tuple = (-math.pi, math.pi)
    area: float = 5.0
    repulsion_strength: float = 1.0
    repulsion_cap: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_scenes < 1 or self.n_agents < 1:
            raise ValueError("n_scenes and n_agents must be >= 1")
        if not self.base_fps > 0 or not self.duration_s > 0:
            raise ValueError("base_fps and duration_s must be positive")
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))
        object.__setattr__(self, "turn_rate_range", tuple(float(v) for v in self.turn_rate_range))
        object.__setattr__(self, "heading_range", tuple(float(v) for v in self.heading_range))
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ValueError("speed_range must satisfy 0 <= v_min <= v_max")
        if self.turn_rate_range[1] < self.turn_rate_range[0]:
            raise ValueError("turn_rate_range must be ordered")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def to_dict(self):
        return asdict(self)

    @property
    def n_frames(self):
        return int(round(self.duration_s * self.base_fps)) + 1


@dataclass(frozen=True)
class AgentParams:
    start: np.ndarray
    heading: float
    speed: float
    turn_rate: float


@dataclass(frozen=True)
class BenchmarkSetup:
    name: str
    fps: float
    t_obs: int
    t_pred: int


SETUP_1 = BenchmarkSetup("setup1", 5.0, 10, 20)
SETUP_2 = BenchmarkSetup("setup2", 2.5, 4, 8)
SETUP_3 = BenchmarkSetup("setup3", 1.0, 3, 3)
CANONICAL_SETUPS = (SETUP_1, SETUP_2, SETUP_3)


def setup_by_name(name):
    for s in CANONICAL_SETUPS:
        if s.name == name:
            return s
    raise ValueError(f"unknown setup {name!r}; expected one of {[s.name for s in CANONICAL_SETUPS]}")


def scene_rng(spec, index):
    return np.random.default_rng(spec.seed ^ index)


def sample_parameters(spec, index):
    """Per-agent motion parameters for scene ``index``; independent of the frame rate."""
    rng = scene_rng(spec, index)
    params = []
    for _ in range(spec.n_agents):
        start = rng.uniform(-spec.area, spec.area, size=2)
        heading = rng.uniform(*spec.heading_range)
        speed = rng.uniform(*spec.speed_range)
        turn = rng.uniform(*spec.turn_rate_range) if spec.kind == "turning" else 0.0
        params.append(AgentParams(start, heading, speed, turn))
    return params, rng


def closed_form_positions(p, times):
    """Positions of a constant-speed, constant-turn-rate agent at ``times`` (seconds)."""
    if p.turn_rate == 0.0:
        d = np.array([math.cos(p.heading), math.sin(p.heading)])
        return p.start + p.speed * times[:, None] * d
    r = p.speed / p.turn_rate
    theta = p.heading + p.turn_rate * times
    x = p.start[0] + r * (np.sin(theta) - math.sin(p.heading))
    y = p.start[1] - r * (np.cos(theta) - math.cos(p.heading))
    return np.stack([x, y], axis=1)


def evaluate_scene(spec, index, fps):
    """Noise-free positions [n_frames, n_agents, 2] for analytic kinds on an ``fps`` grid."""
    if spec.kind == "social":
        raise ValueError("social scenes have no closed form")
    params, _ = sample_parameters(spec, index)
    n = int(round(spec.duration_s * fps)) + 1
    times = np.arange(n) / fps
    return np.stack([closed_form_positions(p, times) for p in params], axis=1)


def simulate_social(start, velocity, fps, n_steps, strength=1.0, cap=2.0):
    """Integrate agents under capped inverse-square repulsion; returns [n_steps+1, n, 2]."""
    return np.asarray(kernels.social_integrate(
        np.ascontiguousarray(start, dtype=np.float64),
        np.ascontiguousarray(velocity, dtype=np.float64),
        int(n_steps), 1.0 / fps, float(strength), float(cap),
    ))


def _scene(spec, index):
    params, rng = sample_parameters(spec, index)
    n = spec.n_frames
    if spec.kind == "social":
        start = np.array([p.start for p in params])
        vel = np.array([[p.speed * math.cos(p.heading), p.speed * math.sin(p.heading)] for p in params])
        pos = simulate_social(start, vel, spec.base_fps, n - 1, spec.repulsion_strength, spec.repulsion_cap)
    else:
        times = np.arange(n) / spec.base_fps
        pos = np.stack([closed_form_positions(p, times) for p in params], axis=1)
    if spec.noise_std > 0:
        pos = pos + rng.normal(0.0, spec.noise_std, size=pos.shape)
    frames = np.arange(n)
    agents = tuple(
        AgentTrack(f"a{j}", frames, {CueKind.T: pos[:, j, None, :]}, np.ones(n, bool))
        for j in range(spec.n_agents)
    )
    return SceneRecord(f"{spec.kind}-{spec.seed}-{index:06d}", spec.base_fps, agents, f"synth:{spec.kind}")


def generate(spec):
    return [_scene(spec, i) for i in range(spec.n_scenes)]


# -- synthetic pose -----------------------------------------------------------

def pose_template(e_keypoints):
    """A fixed upright skeleton-like point set with zero centroid, shape [e, 3]."""
    k = np.arange(e_keypoints)
    angle = 2.0 * math.pi * k / max(e_keypoints, 1)
    radius = 0.15 + 0.05 * (k % 3)
    pts = np.stack([radius * np.cos(angle), radius * np.sin(angle),
                    np.linspace(0.1, 1.7, e_keypoints)], axis=1)
    return pts - pts.mean(axis=0)


def attach_synthetic_pose(scene, e_keypoints=17, seed=0, stride_length=1.4, gait_amplitude=0.1):
    """Add a P3 cue: heading-aligned template plus a speed-locked gait swing."""
    rng = np.random.default_rng(seed)
    template = pose_template(e_keypoints)
    # alternating swing keeps the centroid on the trajectory point
    swing = np.where(np.arange(e_keypoints) % 2 == 0, 1.0, -1.0)
    if e_keypoints % 2:
        swing[-1] = 0.0
    agents = []
    for a in scene.agents:
        xy = a.xy
        n = xy.shape[0]
        step = np.zeros((n, 2))
        if n > 1:
            d = np.diff(xy, axis=0)
            step[1:] = d
            step[0] = d[0]
        step = np.nan_to_num(step)
        speed = np.hypot(step[:, 0], step[:, 1]) * scene.base_fps
        heading = np.where(speed > 1e-9, np.arctan2(step[:, 1], step[:, 0]), 0.0)
        phase = rng.uniform(0, 2 * math.pi) + 2 * math.pi * np.cumsum(speed / scene.base_fps) / stride_length
        amp = gait_amplitude * np.minimum(speed, 2.0) / 2.0
        pose = np.repeat(template[None], n, axis=0)
        pose[:, :, 0] += (amp * np.sin(phase))[:, None] * swing[None, :]
        c, s = np.cos(heading)[:, None], np.sin(heading)[:, None]
        x, y = pose[:, :, 0].copy(), pose[:, :, 1].copy()
        pose[:, :, 0] = c * x - s * y
        pose[:, :, 1] = s * x + c * y
        moving = speed > 1e-9
        pose[~moving] = template
        pose[~a.present] = np.nan
        cues = dict(a.cues)
        cues[CueKind.P3] = pose
        agents.append(AgentTrack(a.agent_id, a.frames, cues, a.present))
    return SceneRecord(scene.scene_id, scene.base_fps, tuple(agents), scene.source_tag)


# -- benchmark ----------------------------------------------------------------

def windows_for_setup(scenes, setup, stride=None, normalized=True):
    out = []
    for scene in scenes:
        low = resample(scene, setup.fps)
        wins = extract_windows(low, setup.t_obs, setup.t_pred, stride or (setup.t_obs + setup.t_pred))
        out.extend(normalize(w) if normalized else w for w in wins)
    return out


@dataclass
class CrossSetupBenchmark:
    train: list
    test: list
    train_scene_ids: set = field(default_factory=set)
    test_scene_ids: set = field(default_factory=set)
    val: list = field(default_factory=list)


def build_cross_setup_benchmark(spec, n_test_scenes=None, train_setups=(SETUP_1, SETUP_2),
                                test_setup=SETUP_3, stride=None, val_fraction=0.0):
    """Train on windows at Setups 1 and 2 from one half of the scenes each; test on Setup 3.

    The last ``n_test_scenes`` scenes (default: one sixth) form the test split.
    ``val_fraction`` holds out that share of the training scenes, windowed like
    the training setups.
    """
    return benchmark_from_scenes(generate(spec), n_test_scenes, train_setups, test_setup, stride,
                                 val_fraction)


def benchmark_from_scenes(scenes, n_test_scenes=None, train_setups=(SETUP_1, SETUP_2),
                          test_setup=SETUP_3, stride=None, val_fraction=0.0):
    """Same split as :func:`build_cross_setup_benchmark` over an existing scene list."""
    scenes = list(scenes)
    n_test = n_test_scenes if n_test_scenes is not None else max(1, len(scenes) // 6)
    if not 0 < n_test < len(scenes):
        raise ValueError("need at least one training and one test scene")
    train_scenes, test_scenes = scenes[:-n_test], scenes[-n_test:]
    n_val = int(round(val_fraction * len(train_scenes)))
    val_scenes = train_scenes[len(train_scenes) - n_val:] if n_val else []
    fit_scenes = train_scenes[: len(train_scenes) - n_val]

    def split_over(setups, pool):
        groups = [pool[i::len(setups)] for i in range(len(setups))]
        out = []
        for setup, group in zip(setups, groups):
            out.extend(windows_for_setup(group, setup, stride))
        return out

    return CrossSetupBenchmark(
        train=split_over(train_setups, fit_scenes),
        test=windows_for_setup(test_scenes, test_setup, stride),
        train_scene_ids={s.scene_id for s in fit_scenes},
        test_scene_ids={s.scene_id for s in test_scenes},
        val=split_over(train_setups, val_scenes),
    )
