"""Command-line front end: gen | ingest | train | eval | ablate."""
import os

if os.environ.get("OMNITRAJ_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["OMNITRAJ_THREADS"])

import argparse  # noqa: E402
import copy  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import fields, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import charts, protocols  # noqa: E402
from .metrics import rows_to_csv  # noqa: E402
from .model import ModelConfig, OmniTraj  # noqa: E402
from .numerics import AdamState, ConfigError, Tensor, config_digest, load_checkpoint, save_checkpoint  # noqa: E402
from .synthgen import (  # noqa: E402
    CrossSetupBenchmark,
    GenSpec,
    attach_synthetic_pose,
    benchmark_from_scenes,
    generate,
    setup_by_name,
)
from .training import TrainPlan, curve_to_csv, group_by_setup, setup_name, train, zero_shot_eval  # noqa: E402
from .trajstore import cache_read, cache_write, ingest_ndjson, write_ndjson  # noqa: E402

log = logging.getLogger("omnitraj")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2

DATA_DEFAULTS = {
    "source": "synthetic",       # synthetic | ndjson | cache
    "paths": [],                 # NDJSON inputs or a single cache file
    "train_setups": ["setup1", "setup2"],
    "test_setup": "setup3",
    "n_test_scenes": None,
    "stride": None,
    "val_fraction": 0.1,
    "attach_pose": False,
}
TRAIN_DEFAULTS = {"epochs": 30, "batch_size": 32, "phase": "pretrain", "lr": 1e-4, "eval_every": 1,
                  "resume": True}
EVAL_DEFAULTS = {"batch_size": 64, "split": "test", "checkpoint": None}
ABLATE_DEFAULTS = {
    "seeds": list(protocols.SEEDS),
    "variants": list(protocols.FPS_ROWS),
    "ratios": list(protocols.MASK_RATIOS),
    "sizes": list(protocols.FEW_SHOT_SIZES),
    "fewshot_epochs": 10,
}
SECTIONS = ("data", "model", "train", "eval", "ablate", "output_dir", "seed")

STATE_FILE = "train_state.npz"
CHECKPOINT_FILE = "checkpoint.otck"


class CliError(RuntimeError):
    pass


# -- config -------------------------------------------------------------------

def _genspec_defaults():
    return {f.name: copy.deepcopy(f.default) for f in fields(GenSpec)}


def _merge(section, given, defaults):
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"section {section} must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key: {section}.{unknown[0]}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def resolve_config(raw, seed=None, out=None):
    """Fill defaults and validate; returns the resolved config dict."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    rc = {
        "data": _merge("data", raw.get("data"), {**_genspec_defaults(), **DATA_DEFAULTS}),
        "model": _merge("model", raw.get("model"), ModelConfig().to_dict()),
        "train": _merge("train", raw.get("train"), TRAIN_DEFAULTS),
        "eval": _merge("eval", raw.get("eval"), EVAL_DEFAULTS),
        "ablate": _merge("ablate", raw.get("ablate"), ABLATE_DEFAULTS),
        "output_dir": raw.get("output_dir", "runs/default"),
        "seed": int(raw.get("seed", 0)),
    }
    if seed is not None:
        rc["seed"] = int(seed)
    if out is not None:
        rc["output_dir"] = str(out)
    rc["model"]["seed"] = rc["seed"]
    # tuples come back as lists from JSON; normalise so the dump is stable
    for key in ("speed_range", "turn_rate_range", "heading_range"):
        rc["data"][key] = list(rc["data"][key])
    try:
        genspec(rc)
        model_config(rc)
        TrainPlan(**{k: rc["train"][k] for k in ("epochs", "batch_size", "phase", "lr", "eval_every")})
        for name in rc["data"]["train_setups"] + [rc["data"]["test_setup"]]:
            setup_by_name(name)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if rc["data"]["source"] not in ("synthetic", "ndjson", "cache"):
        raise ConfigError("data.source must be synthetic, ndjson or cache")
    if rc["eval"]["split"] not in ("train", "val", "test"):
        raise ConfigError("eval.split must be train, val or test")
    return rc


def genspec(rc):
    d = rc["data"]
    return GenSpec(**{f.name: d[f.name] for f in fields(GenSpec)})


def model_config(rc):
    return ModelConfig.from_dict(rc["model"])


def train_plan(rc, mixture, val):
    t = rc["train"]
    return TrainPlan(epochs=t["epochs"], batch_size=t["batch_size"], mixture=mixture, phase=t["phase"],
                     seed=rc["seed"], lr=t["lr"], eval_every=t["eval_every"], val=val)


def run_digest(rc):
    """Digest of everything that affects training (the output location does not)."""
    return config_digest({k: rc[k] for k in ("data", "model", "train", "seed")})


def _out_dir(rc):
    path = Path(rc["output_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_resolved(rc):
    path = _out_dir(rc) / "config.json"
    path.write_text(json.dumps(rc, indent=2, sort_keys=True) + "\n")
    return path


# -- data -----------------------------------------------------------------------

def load_scenes(rc):
    d = rc["data"]
    if d["source"] == "synthetic":
        scenes = generate(genspec(rc))
    else:
        if not d["paths"]:
            raise CliError("data.paths is empty")
        scenes = [s for p in d["paths"] for s in ingest_ndjson(p)]
    if d["attach_pose"]:
        scenes = [attach_synthetic_pose(s, seed=d["seed"]) for s in scenes]
    return scenes


def load_splits(rc):
    """{train, val, test} sample lists for the configured source."""
    d = rc["data"]
    train_setups = tuple(setup_by_name(n) for n in d["train_setups"])
    test_setup = setup_by_name(d["test_setup"])
    if d["source"] == "cache":
        samples = [s for p in d["paths"] for s in cache_read(p)]
        names = {s.name for s in train_setups}
        return {"train": [s for s in samples if setup_name(s) in names], "val": [],
                "test": [s for s in samples if setup_name(s) == test_setup.name]}
    bench = benchmark_from_scenes(load_scenes(rc), d["n_test_scenes"], train_setups, test_setup,
                                  d["stride"], d["val_fraction"])
    return {"train": bench.train, "val": bench.val, "test": bench.test}


def _mixture(samples):
    return [(g, 1.0) for g in group_by_setup(samples).values()]


# -- commands -----------------------------------------------------------------

def cmd_gen(rc):
    out = _out_dir(rc) / "scenes.ndjson"
    n = write_ndjson(load_scenes(rc), out)
    print(f"scenes {n} {out}")
    return 0


def cmd_ingest(rc, paths, cache_out):
    rc = copy.deepcopy(rc)
    rc["data"]["source"], rc["data"]["paths"] = "ndjson", list(paths)
    rc["data"]["val_fraction"] = 0.0  # the cache has no val split; keep every scene
    splits = load_splits(rc)
    samples = splits["train"] + splits["val"] + splits["test"]
    cache_write(samples, cache_out)
    print(f"samples {len(samples)} {cache_out}")
    return 0


def _save_state(path, model, state, curve, epoch, digest):
    arrays = {f"p:{k}": v.data for k, v in model.params.items()}
    arrays.update({f"m:{k}": v for k, v in state.m.items()})
    arrays.update({f"v:{k}": v for k, v in state.v.items()})
    meta = {"epoch": epoch, "step": state.step, "curve": curve, "digest": digest}
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, __meta__=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def _load_state(path, cfg, plan):
    with np.load(path) as z:
        meta = json.loads(str(z["__meta__"]))
        params = {k[2:]: Tensor(z[k]) for k in z.files if k.startswith("p:")}
        state = AdamState(base_lr=plan.lr, total_epochs=plan.epochs, step=meta["step"],
                          m={k[2:]: z[k] for k in z.files if k.startswith("m:")},
                          v={k[2:]: z[k] for k in z.files if k.startswith("v:")})
    curve = [tuple(c) for c in meta["curve"]]
    return OmniTraj(cfg, params), state, curve, meta


def cmd_train(rc):
    out = _out_dir(rc)
    write_resolved(rc)
    cfg = model_config(rc)
    splits = load_splits(rc)
    plan = train_plan(rc, _mixture(splits["train"]), splits["val"])
    digest = run_digest(rc)
    state_path = out / STATE_FILE
    model = state = None
    start, curve = 0, []
    if rc["train"]["resume"] and state_path.exists():
        model, state, curve, meta = _load_state(state_path, cfg, plan)
        if meta["digest"] != digest:
            raise CliError(f"training state digest {meta['digest']} does not match config digest {digest}")
        start = meta["epoch"]
        print(f"resume epoch {start}")

    def on_epoch(epoch, m, st, cv):
        _save_state(state_path, m, st, cv, epoch, digest)

    result = train(plan, cfg, model=model, state=state, start_epoch=start, curve=curve, on_epoch=on_epoch)
    save_checkpoint(out / CHECKPOINT_FILE, result.model.params, cfg.digest())
    (out / "loss.csv").write_text(curve_to_csv(result.curve))
    last = result.curve[-1] if result.curve else (0, "train", float("nan"))
    print(f"trained epochs {plan.epochs} samples {len(splits['train'])} final_{last[1]}_loss {last[2]!r}")
    return 0


def load_model(rc, path=None):
    cfg = model_config(rc)
    path = Path(path or rc["eval"]["checkpoint"] or Path(rc["output_dir"]) / CHECKPOINT_FILE)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    params, digest = load_checkpoint(path)
    if digest != cfg.digest():
        raise CliError(f"checkpoint digest mismatch: checkpoint {digest} config {cfg.digest()}")
    return OmniTraj(cfg, params)


def cmd_eval(rc, checkpoint=None):
    out = _out_dir(rc)
    model = load_model(rc, checkpoint)
    samples = load_splits(rc)[rc["eval"]["split"]]
    if not samples:
        raise CliError(f"split {rc['eval']['split']} is empty")
    report = zero_shot_eval(model, samples, protocol=f"eval_{rc['eval']['split']}", seed=rc["seed"],
                            batch_size=rc["eval"]["batch_size"])
    (out / "metrics.csv").write_text(rows_to_csv(report.rows()))
    (out / "metrics.json").write_text(report.to_json() + "\n")
    for row in report.rows():
        print(f"{row['setup']} minADE {row['min_ade_k']:.4f} minFDE {row['min_fde_k']:.4f} n {row['n']}")
    return 0


def _plan_for(rc, phase=None):
    plan = train_plan(rc, [], [])
    return replace(plan, phase=phase) if phase else plan


def cmd_ablate(rc, which):
    out = _out_dir(rc)
    write_resolved(rc)
    cfg, a = model_config(rc), rc["ablate"]
    splits = load_splits(rc)
    seeds = tuple(a["seeds"])
    if which == "fps":
        bench = CrossSetupBenchmark(splits["train"], splits["test"])
        table = protocols.run_ablation_fps(bench, cfg, _plan_for(rc), tuple(a["variants"]), seeds,
                                           rc["data"]["test_setup"])
    elif which == "decoupled":
        table = protocols.run_ablation_decoupled(splits["train"], splits["test"], cfg, _plan_for(rc),
                                                 seeds=seeds)
    elif which == "mask":
        table = protocols.run_ablation_mask_ratio(splits["train"], splits["test"], cfg, _plan_for(rc),
                                                  tuple(a["ratios"]), seeds)
    elif which == "twoframe":
        res = protocols.run_two_frame_comparison(splits["train"], splits["test"], cfg, _plan_for(rc), seeds)
        rows = protocols.two_frame_table(res)
        cols = ("table", "row", "seed", "full", "two_frame", "degradation_pct")
        (out / "ablate_twoframe.csv").write_text(rows_to_csv(rows, cols))
        med = {arm: float(np.median([r["degradation_pct"] for r in rows if r["row"] == arm])) for arm in res}
        lo = {arm: min(r["degradation_pct"] for r in rows if r["row"] == arm) for arm in res}
        hi = {arm: max(r["degradation_pct"] for r in rows if r["row"] == arm) for arm in res}
        charts.bar_chart(out / "ablate_twoframe.svg", list(res), [med[k] for k in res], [lo[k] for k in res],
                         [hi[k] for k in res], ylabel="minADE degradation (%)", title="two-frame")
        for arm in res:
            print(f"{arm} degradation_pct {med[arm]:.2f}")
        return 0
    elif which == "fewshot":
        test = splits["test"]
        half = len(test) // 2
        ft_plan = replace(_plan_for(rc, "finetune"), epochs=a["fewshot_epochs"])
        curves = protocols.run_few_shot(splits["train"], test[:half], test[half:], cfg, _plan_for(rc),
                                        ft_plan, tuple(a["sizes"]), seeds)
        rows = protocols.few_shot_rows(curves)
        cols = ("table", "init", "seed", "n", "min_ade_k", "min_fde_k")
        (out / "ablate_fewshot.csv").write_text(rows_to_csv(rows, cols))
        series = {}
        for init in ("pretrained", "scratch"):
            pts = [(n, float(np.median([r["min_ade_k"] for r in rows if r["init"] == init and r["n"] == n])))
                   for n in a["sizes"]]
            series[init] = pts
        charts.line_chart(out / "ablate_fewshot.svg", series, title="few-shot")
        for init, pts in series.items():
            print(init, " ".join(f"n={n}:{v:.4f}" for n, v in pts))
        return 0
    else:
        raise ConfigError(f"unknown ablation {which!r}")
    (out / f"ablate_{which}.csv").write_text(table.to_csv())
    (out / f"ablate_{which}_summary.csv").write_text(table.summary_csv())
    charts.table_chart(out / f"ablate_{which}.svg", table)
    for r in table.summary(("min_ade_k",)):
        print(f"{r['row']} median {r['median']:.4f} min {r['min']:.4f} max {r['max']:.4f}")
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="omnitraj", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (overrides output_dir)")

    common(sub.add_parser("gen", help="generate synthetic scenes as NDJSON"))
    ing = sub.add_parser("ingest", help="window NDJSON scenes into a binary cache")
    ing.add_argument("paths", nargs="+")
    ing.add_argument("--cache", required=True, help="cache file to write")
    common(ing, config_required=False)
    common(sub.add_parser("train", help="train and write a checkpoint"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint")
    ab = sub.add_parser("ablate", help="run an ablation table")
    common(ab)
    ab.add_argument("which", choices=("fps", "decoupled", "mask", "twoframe", "fewshot"))
    return p


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        raw = {}
        if args.config:
            with open(args.config) as fh:
                raw = json.load(fh)
        rc = resolve_config(raw, args.seed, args.out)
    except (ConfigError, json.JSONDecodeError) as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except OSError as exc:
        return _fail("config", f"cannot read config: {exc}", EXIT_CONFIG)
    try:
        if args.command == "gen":
            return cmd_gen(rc)
        if args.command == "ingest":
            return cmd_ingest(rc, args.paths, args.cache)
        if args.command == "train":
            return cmd_train(rc)
        if args.command == "eval":
            return cmd_eval(rc, args.checkpoint)
        return cmd_ablate(rc, args.which)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
