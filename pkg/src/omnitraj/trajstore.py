"""Frame-rate- and horizon-agnostic scene storage.

Scenes are ingested from NDJSON, decimated to a target frame rate, cut into
fixed-horizon sample windows, normalised to the ego frame and cached in a
compact binary format.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class SchemaError(ValueError):
    pass


class IngestError(ValueError):
    pass


class ResampleError(ValueError):
    pass


class CacheError(IOError):
    pass


class CueKind(str, Enum):
    T = "T"
    P3 = "P3"
    P2 = "P2"
    B3 = "B3"
    B2 = "B2"


# default (elements, features) per cue; P3 holds keypoint offsets from the
# agent's trajectory point, B3 holds (cx, cy, cz, l, w, h) in world metres
CUE_SHAPES = {
    CueKind.T: (1, 2),
    CueKind.P3: (17, 3),
    CueKind.P2: (17, 2),
    CueKind.B3: (1, 6),
    CueKind.B2: (1, 4),
}

# features living in the world frame, shifted by normalize()
POSITIONAL_FEATURES = {CueKind.T: slice(0, 2), CueKind.B3: slice(0, 2)}

NDJSON_KEYS = {
    CueKind.T: "xy",
    CueKind.P3: "pose3d",
    CueKind.P2: "pose2d",
    CueKind.B3: "box3d",
    CueKind.B2: "box2d",
}
_CUE_CODES = {kind: i for i, kind in enumerate(CueKind)}


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AgentTrack:
    agent_id: str
    frames: np.ndarray
    cues: dict
    present: np.ndarray

    def __post_init__(self):
        frames = _frozen(self.frames, np.int64).reshape(-1)
        if frames.size and np.any(np.diff(frames) <= 0):
            raise SchemaError(f"agent {self.agent_id}: frames must be strictly increasing")
        cues = {}
        for kind, arr in self.cues.items():
            kind = CueKind(kind)
            arr = _frozen(arr, np.float64)
            if arr.ndim != 3 or arr.shape[0] != frames.size:
                raise SchemaError(
                    f"agent {self.agent_id}: cue {kind.value} must be [n_frames, e, f], got {arr.shape}")
            cues[kind] = arr
        if CueKind.T not in cues:
            raise SchemaError(f"agent {self.agent_id}: trajectory cue is required")
        if cues[CueKind.T].shape[1:] != (1, 2):
            raise SchemaError(f"agent {self.agent_id}: trajectory cue must be [n, 1, 2]")
        present = _frozen(self.present, bool).reshape(-1)
        if present.size != frames.size:
            raise SchemaError(f"agent {self.agent_id}: present mask length mismatch")
        if np.any(~np.isfinite(cues[CueKind.T][present])):
            raise SchemaError(f"agent {self.agent_id}: trajectory missing where present")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "cues", cues)
        object.__setattr__(self, "present", present)

    @property
    def xy(self):
        return self.cues[CueKind.T][:, 0, :]


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    base_fps: float
    agents: tuple
    source_tag: str = ""

    def __post_init__(self):
        if not (self.base_fps > 0 and math.isfinite(self.base_fps)):
            raise SchemaError("base_fps must be positive")
        if not self.agents:
            raise SchemaError(f"scene {self.scene_id}: at least one agent required")
        object.__setattr__(self, "agents", tuple(self.agents))

    def frame_range(self):
        frames = [a.frames for a in self.agents if a.frames.size]
        if not frames:
            return 0, -1
        return int(min(f[0] for f in frames)), int(max(f[-1] for f in frames))


def make_track(agent_id, frames, xy, present=None, **cues):
    """Convenience constructor: ``xy`` is [n, 2]; extra cues by name (``P3=...``)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 1, 2)
    all_cues = {CueKind.T: xy}
    for name, arr in cues.items():
        all_cues[CueKind(name)] = arr
    if present is None:
        present = np.all(np.isfinite(xy.reshape(-1, 2)), axis=1)
    return AgentTrack(str(agent_id), frames, all_cues, present)


# -- NDJSON -----------------------------------------------------------------

def _require(obj, key, where):
    if key not in obj:
        raise SchemaError(f"{where}: missing required field '{key}'")
    return obj[key]


def _to_array(values, e, f, where):
    rows = []
    for v in values:
        if v is None:
            rows.append(np.full((e, f), np.nan))
            continue
        arr = np.asarray(v, dtype=np.float64)
        if arr.size != e * f:
            raise SchemaError(f"{where}: expected {e}x{f} values per frame, got shape {arr.shape}")
        rows.append(arr.reshape(e, f))
    return np.array(rows).reshape(len(rows), e, f)


def scene_from_json(obj, where="scene"):
    scene_id = str(_require(obj, "scene_id", where))
    fps = _require(obj, "fps", where)
    if not isinstance(fps, (int, float)) or not fps > 0:
        raise SchemaError("base_fps must be positive")
    agents = []
    for j, a in enumerate(_require(obj, "agents", where)):
        aw = f"{where}: agent {j}"
        frames = _require(a, "frames", aw)
        xy = _require(a, "xy", aw)
        if len(xy) != len(frames):
            raise SchemaError(f"{aw}: 'xy' length {len(xy)} != frames length {len(frames)}")
        present = [p is not None for p in xy]
        cues = {CueKind.T: _to_array(xy, 1, 2, aw)}
        for kind, key in NDJSON_KEYS.items():
            if kind is CueKind.T or key not in a:
                continue
            vals = a[key]
            if len(vals) != len(frames):
                raise SchemaError(f"{aw}: '{key}' length {len(vals)} != frames length {len(frames)}")
            first = next((v for v in vals if v is not None), None)
            if first is None:
                e, f = CUE_SHAPES[kind]
            else:
                shape = np.shape(first)
                e, f = (1, shape[0]) if len(shape) == 1 else shape
            cues[kind] = _to_array(vals, e, f, aw)
        agents.append(AgentTrack(str(_require(a, "id", aw)), frames, cues, present))
    return SceneRecord(scene_id, float(fps), tuple(agents), str(obj.get("source", "")))


def ingest_ndjson(path):
    """Yield one :class:`SceneRecord` per non-blank line of ``path``."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise IngestError(f"line {lineno}: expected a JSON object")
            try:
                yield scene_from_json(obj, where=f"line {lineno}")
            except SchemaError as exc:
                msg = str(exc)
                raise SchemaError(msg if msg.startswith("line") else f"line {lineno}: {msg}") from None


def _cue_to_json(arr, present):
    out = []
    for row, ok in zip(arr, present):
        if not ok:
            out.append(None)
        elif row.shape[0] == 1:
            out.append(row[0].tolist())
        else:
            out.append(row.tolist())
    return out


def scene_to_json(scene):
    agents = []
    for a in scene.agents:
        entry = {"id": a.agent_id, "frames": a.frames.tolist()}
        for kind, arr in a.cues.items():
            entry[NDJSON_KEYS[kind]] = _cue_to_json(arr, a.present)
        agents.append(entry)
    obj = {"scene_id": scene.scene_id, "fps": scene.base_fps, "agents": agents}
    if scene.source_tag:
        obj["source"] = scene.source_tag
    return obj


def write_ndjson(scenes, path):
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_json(scene), separators=(",", ":")) + "\n")
            n += 1
    return n


# -- resampling ---------------------------------------------------------------

def decimation_factor(base_fps, target_fps):
    if not target_fps > 0:
        raise ResampleError("target_fps must be positive")
    ratio = base_fps / target_fps
    k = round(ratio)
    if k < 1 or abs(ratio - k) > 1e-9 * ratio:
        raise ResampleError(
            f"resample requires integer decimation (base {base_fps} / target {target_fps} = {ratio:g})")
    return k


def resample(scene, target_fps):
    """Keep every k-th frame (frame indices divisible by k) and renumber by k."""
    k = decimation_factor(scene.base_fps, target_fps)
    if k == 1:
        return replace(scene, base_fps=float(target_fps))
    agents = []
    for a in scene.agents:
        keep = a.frames % k == 0
        agents.append(AgentTrack(
            a.agent_id,
            a.frames[keep] // k,
            {kind: arr[keep] for kind, arr in a.cues.items()},
            a.present[keep],
        ))
    return SceneRecord(scene.scene_id, float(target_fps), tuple(agents), scene.source_tag)


# -- windows ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampleWindow:
    fps: float
    t_obs: int
    t_pred: int
    ego_index: int
    obs: dict
    obs_valid: np.ndarray
    future: np.ndarray
    normalization_offset: np.ndarray = field(default_factory=lambda: np.zeros(2, np.float32))
    scene_id: str = ""
    start_frame: int = 0

    def __post_init__(self):
        if self.t_obs < 2 or self.t_pred < 1:
            raise SchemaError("window needs t_obs >= 2 and t_pred >= 1")
        object.__setattr__(self, "fps", float(np.float32(self.fps)))
        obs = {CueKind(k): _frozen(v, np.float32) for k, v in self.obs.items()}
        if CueKind.T not in obs:
            raise SchemaError("window needs a trajectory cue")
        n = obs[CueKind.T].shape[0]
        for kind, arr in obs.items():
            if arr.ndim != 4 or arr.shape[:2] != (n, self.t_obs):
                raise SchemaError(f"cue {kind.value} has shape {arr.shape}, expected [{n}, {self.t_obs}, e, f]")
        valid = _frozen(self.obs_valid, bool)
        if valid.shape != (n, self.t_obs):
            raise SchemaError(f"obs_valid shape {valid.shape} != ({n}, {self.t_obs})")
        if not 0 <= self.ego_index < n or not valid[self.ego_index, -1]:
            raise SchemaError("ego's last observed frame must be valid")
        future = _frozen(self.future, np.float32)
        if future.shape != (self.t_pred, 2) or not np.all(np.isfinite(future)):
            raise SchemaError("future must be a complete [t_pred, 2] array")
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "obs_valid", valid)
        object.__setattr__(self, "future", future)
        object.__setattr__(self, "normalization_offset",
                           _frozen(self.normalization_offset, np.float32).reshape(2))

    @property
    def n_agents(self):
        return self.obs_valid.shape[0]

    @property
    def ego_last_xy(self):
        return self.obs[CueKind.T][self.ego_index, -1, 0]

    def bitwise_equal(self, other):
        def same(a, b):
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            np.float32(self.fps).tobytes() == np.float32(other.fps).tobytes()
            and (self.t_obs, self.t_pred, self.ego_index, self.scene_id, self.start_frame)
            == (other.t_obs, other.t_pred, other.ego_index, other.scene_id, other.start_frame)
            and self.obs.keys() == other.obs.keys()
            and all(same(self.obs[k], other.obs[k]) for k in self.obs)
            and same(self.obs_valid, other.obs_valid)
            and same(self.future, other.future)
            and same(self.normalization_offset, other.normalization_offset)
        )


def _dense(scene):
    """Scene on its dense frame grid: (first_frame, present [A, F], cues {kind: [A, F, e, f]})."""
    lo, hi = scene.frame_range()
    n = hi - lo + 1
    kinds = {}
    for a in scene.agents:
        for kind, arr in a.cues.items():
            kinds.setdefault(kind, arr.shape[1:])
    present = np.zeros((len(scene.agents), max(n, 0)), dtype=bool)
    cues = {k: np.full((len(scene.agents), max(n, 0)) + shape, np.nan) for k, shape in kinds.items()}
    for i, a in enumerate(scene.agents):
        idx = a.frames - lo
        present[i, idx] = a.present
        for kind, arr in a.cues.items():
            if arr.shape[1:] == kinds[kind]:
                cues[kind][i, idx] = arr
    for kind in cues:
        cues[kind][~present] = np.nan
    return lo, present, cues


def window_starts(n_frames, t_obs, t_pred, stride):
    last = n_frames - t_obs - t_pred
    return range(0, last + 1, stride) if last >= 0 else range(0)


def extract_windows(scene, t_obs, t_pred, stride=1):
    """Cut every (ego, start) window with a valid last observation and a complete future."""
    if t_obs < 2 or t_pred < 1 or stride < 1:
        raise ValueError("need t_obs >= 2, t_pred >= 1, stride >= 1")
    lo, present, cues = _dense(scene)
    out = []
    for s in window_starts(present.shape[1], t_obs, t_pred, stride):
        obs_sl = slice(s, s + t_obs)
        fut_sl = slice(s + t_obs, s + t_obs + t_pred)
        seen = present[:, obs_sl].any(axis=1)
        for ego in range(len(scene.agents)):
            if not present[ego, s + t_obs - 1] or not present[ego, fut_sl].all():
                continue
            keep = np.flatnonzero(seen)
            obs = {k: arr[keep, obs_sl].astype(np.float32) for k, arr in cues.items()}
            out.append(SampleWindow(
                fps=scene.base_fps,
                t_obs=t_obs,
                t_pred=t_pred,
                ego_index=int(np.searchsorted(keep, ego)),
                obs=obs,
                obs_valid=present[keep, obs_sl],
                future=cues[CueKind.T][ego, fut_sl, 0].astype(np.float32),
                scene_id=scene.scene_id,
                start_frame=lo + s,
            ))
    return out


def normalize(sample):
    """Translate so the ego's last observed position is the origin."""
    shift = sample.ego_last_xy.astype(np.float32)
    obs = {}
    for kind, arr in sample.obs.items():
        sl = POSITIONAL_FEATURES.get(kind)
        if sl is None:
            obs[kind] = arr
            continue
        moved = arr.copy()
        moved[..., sl] = moved[..., sl] - shift
        obs[kind] = moved
    return replace(
        sample,
        obs=obs,
        future=sample.future - shift,
        normalization_offset=sample.normalization_offset + shift,
    )


def denormalize(sample, positions):
    return np.asarray(positions) + sample.normalization_offset


# -- binary cache -------------------------------------------------------------

CACHE_MAGIC = b"UHM2"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_FIXED = struct.Struct("<fIIIIq2f")


def _encode(sample):
    sid = sample.scene_id.encode()
    parts = [
        _FIXED.pack(sample.fps, sample.t_obs, sample.t_pred, sample.ego_index,
                    sample.n_agents, sample.start_frame, *sample.normalization_offset.tolist()),
        struct.pack("<H", len(sid)), sid,
        struct.pack("<B", len(sample.obs)),
    ]
    for kind, arr in sample.obs.items():
        parts.append(struct.pack("<BII", _CUE_CODES[kind], arr.shape[2], arr.shape[3]))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(np.packbits(sample.obs_valid.reshape(-1)).tobytes())
    parts.append(np.ascontiguousarray(sample.future, dtype="<f4").tobytes())
    return b"".join(parts)


def _decode(buf):
    kinds = list(CueKind)
    fps, t_obs, t_pred, ego, n, start, ox, oy = _FIXED.unpack_from(buf, 0)
    off = _FIXED.size
    (slen,) = struct.unpack_from("<H", buf, off)
    off += 2
    sid = buf[off:off + slen].decode()
    off += slen
    (ncue,) = struct.unpack_from("<B", buf, off)
    off += 1
    obs = {}
    for _ in range(ncue):
        code, e, f = struct.unpack_from("<BII", buf, off)
        off += 9
        count = n * t_obs * e * f
        obs[kinds[code]] = np.frombuffer(buf, "<f4", count, off).reshape(n, t_obs, e, f)
        off += 4 * count
    nbytes = (n * t_obs + 7) // 8
    valid = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off))[: n * t_obs]
    off += nbytes
    future = np.frombuffer(buf, "<f4", t_pred * 2, off).reshape(t_pred, 2)
    off += 8 * t_pred
    if off != len(buf):
        raise CacheError("cache record length mismatch")
    return SampleWindow(
        fps=fps, t_obs=t_obs, t_pred=t_pred, ego_index=ego, obs=obs,
        obs_valid=valid.reshape(n, t_obs).astype(bool), future=future,
        normalization_offset=np.array([ox, oy], np.float32), scene_id=sid, start_frame=start,
    )


def cache_write(samples, path):
    samples = list(samples)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(samples), 0))
        for s in samples:
            rec = _encode(s)
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)


def cache_read(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise CacheError(f"{path}: truncated cache header")
    magic, version, count, _ = _HEADER.unpack_from(buf, 0)
    if magic != CACHE_MAGIC:
        raise CacheError(f"{path}: not a sample cache (magic {magic!r})")
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: incompatible cache version {version} (reader supports {CACHE_VERSION})")
    off = _HEADER.size
    out = []
    for i in range(count):
        if off + 4 > len(buf):
            raise CacheError(f"{path}: truncated before record {i}")
        (length,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + length > len(buf):
            raise CacheError(f"{path}: truncated inside record {i}")
        try:
            out.append(_decode(buf[off:off + length]))
        except (struct.error, ValueError) as exc:
            raise CacheError(f"{path}: corrupt record {i} ({exc})") from None
        off += length
    if off != len(buf):
        raise CacheError(f"{path}: trailing bytes after {count} records")
    return out
