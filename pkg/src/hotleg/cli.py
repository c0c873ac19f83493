"""``hotleg`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numeric failure. Errors are also written to stderr as one JSON object.
Environment overrides: ``HOTLEG_OUT`` (default output root) and
``HOTLEG_THREADS`` (BLAS thread count).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import SplitSpec, load_dataset, save_dataset, split_dataset
from .deeponet import checkpoint_load, checkpoint_save
from .errors import ConfigError, HotlegError, UsageError
from .flowgen import (
    FluidConfig,
    GeometryConfig,
    SurrogateCoeffs,
    V_RANGE,
    calibrate_coefficients,
    generate_dataset,
)
from .serve import ServeConfig, VirtualSensorServer, prediction_payload
from .training import PRESETS, SearchSpace, TrainConfig

log = logging.getLogger("hotleg")


# --- run configuration -----------------------------------------------------


@dataclass
class DatasetSection:
    scenarios: int = 500
    seed: int = 0
    v_min: float = V_RANGE[0]
    v_max: float = V_RANGE[1]
    train_fraction: float = 0.8
    split_seed: int = 0


@dataclass
class ModelSection:
    with_heads: bool = True


@dataclass
class SearchSection:
    trials: int = 50
    seed: int = 0
    neurons: tuple = (128, 256, 512)
    dropout: tuple = (0.0, 0.3)
    learning_rate: tuple = (1e-5, 1e-3)
    batch_size: tuple = (16, 32, 64)
    weight_decay: tuple = (1e-8, 1e-6)
    folds: int = 5

    def space(self):
        return SearchSpace(tuple(self.neurons), tuple(self.dropout), tuple(self.learning_rate),
                           tuple(self.batch_size), tuple(self.weight_decay))


@dataclass
class EvalSection:
    space: str = "scaled"
    repetitions: int = 10
    warmup: int = 3
    threads: int = 1
    fvm_seconds: float = 200.0
    export: bool = True


@dataclass
class ServeSection:
    host: str = "127.0.0.1"
    port: int = 8080
    max_concurrent: int = 4
    space: str = "physical"


SECTIONS = {
    "geometry": GeometryConfig,
    "fluid": FluidConfig,
    "surrogate": SurrogateCoeffs,
    "dataset": DatasetSection,
    "model": ModelSection,
    "train": TrainConfig,
    "search": SearchSection,
    "eval": EvalSection,
    "serve": ServeSection,
}

DATA_PRESETS = {
    "desk": {"dataset": {"scenarios": 500}, "geometry": {"n_s": 63, "n_r": 20}},
    "paper": {"dataset": {"scenarios": 5000}, "geometry": {"n_s": 189, "n_r": 60}},
}


def _build(cls, values, section):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def load_run_config(path=None, overrides=None):
    """Strictly parsed config file merged over defaults, then ``overrides``."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    merged = {}
    for name, cls in SECTIONS.items():
        values = dict(raw.get(name, {}) or {})
        if not isinstance(values, dict):
            raise ConfigError(f"section [{name}] must be an object")
        values.update((overrides or {}).get(name, {}))
        merged[name] = _build(cls, values, name)
    return merged


def effective_config(cfg):
    def plain(obj):
        d = asdict(obj)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    return {name: plain(obj) for name, obj in cfg.items()}


# --- run directories ---------------------------------------------------------


def versions():
    import numba
    import threadpoolctl

    return {"hotleg": __version__, "numpy": np.__version__, "numba": numba.__version__,
            "threadpoolctl": threadpoolctl.__version__, "python": platform.python_version(),
            "platform": platform.platform()}


def out_dir(args, command):
    base = args.out or os.path.join(os.environ.get("HOTLEG_OUT", "runs"), command)
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def record_run(path, args, cfg, **extra):
    write_json(path / "config.json", effective_config(cfg))
    doc = {"command": args.command, "argv": sys.argv[1:], "versions": versions(), **extra}
    write_json(path / "run.json", doc)


# --- subcommands ----------------------------------------------------------------


def _cfg(args, extra=None):
    over = {}
    preset = getattr(args, "data_preset", None)
    if preset:
        for k, v in DATA_PRESETS[preset].items():
            over.setdefault(k, {}).update(v)
    for k, v in (extra or {}).items():
        over.setdefault(k, {}).update({a: b for a, b in v.items() if b is not None})
    return load_run_config(args.config, over)


def _train_cfg(args, cfg):
    """Preset (if named) with config-file and flag overrides on top."""
    base = PRESETS[args.preset] if getattr(args, "preset", None) else cfg["train"]
    file_train = json.loads(Path(args.config).read_text()).get("train", {}) if args.config else {}
    flags = {k: v for k, v in {"epochs": getattr(args, "epochs", None),
                               "seed": getattr(args, "seed", None)}.items() if v is not None}
    return replace(base, **{**file_train, **flags})


def _split(ds, cfg):
    d = cfg["dataset"]
    return split_dataset(ds.n_scenarios, SplitSpec(d.train_fraction, d.split_seed))


def cmd_gen_data(args):
    cfg = _cfg(args, {"dataset": {"scenarios": args.scenarios, "seed": args.seed}})
    d = cfg["dataset"]
    coeffs = cfg["surrogate"]
    if args.calibrate:
        res = calibrate_coefficients(geom=cfg["geometry"], fluid=cfg["fluid"], coeffs=coeffs,
                                     v_range=(d.v_min, d.v_max))
        coeffs = cfg["surrogate"] = res.coeffs
        log.info("calibrated ranges %s", res.achieved)
    if d.scenarios * cfg["geometry"].n_points > 10_000_000:
        log.warning("large dataset: %d scenarios x %d nodes", d.scenarios, cfg["geometry"].n_points)
    ds = generate_dataset(d.scenarios, cfg["geometry"], cfg["fluid"], coeffs, d.seed, (d.v_min, d.v_max))
    path = out_dir(args, "gen-data")
    save_dataset(ds, path)
    record_run(path, args, cfg, dataset_sha256=ds.fingerprint(), seeds={"dataset": d.seed})
    print(json.dumps({"out": str(path), "scenarios": ds.n_scenarios, "points": ds.n_points,
                      "dataset_sha256": ds.fingerprint()}))


def _fit(args, cfg, ds, train_cfg, path):
    from .training import fit_model

    tr, te = _split(ds, cfg)
    val = None
    if train_cfg.patience > 0:      # hold out part of the training split for early stopping
        inner_tr, inner_va = split_dataset(tr.size, SplitSpec(0.8, cfg["dataset"].split_seed))
        tr, val = tr[inner_tr], tr[inner_va]
    t0 = time.perf_counter()
    model, hist = fit_model(ds, tr, train_cfg, cfg["model"].with_heads, val)
    wall = time.perf_counter() - t0
    model.provenance["split"] = {"train_fraction": cfg["dataset"].train_fraction,
                                 "seed": cfg["dataset"].split_seed, "test_indices": te.tolist()}
    checkpoint_save(model, path / "checkpoint")
    write_json(path / "history.json", hist.to_dict())
    return model, hist, wall


def cmd_train(args):
    cfg = _cfg(args, {"model": {"with_heads": False if args.no_heads else None}})
    train_cfg = cfg["train"] = _train_cfg(args, cfg)
    if args.preset == "paper":
        log.warning("paper preset: the heads alone need ~1.5 GB per parameter copy at N=11,340")
    ds = load_dataset(args.data)
    path = out_dir(args, "train")
    model, hist, wall = _fit(args, cfg, ds, train_cfg, path)
    record_run(path, args, cfg, dataset_sha256=ds.fingerprint(), wall_time=wall,
               seeds={"model": train_cfg.seed, "split": cfg["dataset"].split_seed})
    print(json.dumps({"out": str(path), "epochs_run": hist.epochs_run,
                      "final_train_loss": hist.train_loss[-1], "wall_time": wall}))


def cmd_tune(args):
    from .training import hyperparameter_search

    cfg = _cfg(args, {"search": {"trials": args.trials, "seed": args.seed}})
    s = cfg["search"]
    ds = load_dataset(args.data)
    tr, _ = _split(ds, cfg)
    path = out_dir(args, "tune")
    log_path = path / "trials.jsonl"
    log_path.unlink(missing_ok=True)
    base = replace(PRESETS["hpo"], epochs=args.epochs or PRESETS["hpo"].epochs)
    res = hyperparameter_search(ds, tr, s.trials, s.seed, s.space(), base,
                                cfg["model"].with_heads, log_path)
    write_json(path / "best.json", asdict(res.best))
    record_run(path, args, cfg, dataset_sha256=ds.fingerprint(), seeds={"search": s.seed})
    print(json.dumps({"out": str(path), "best": res.best.sample, "val_loss": res.best.val_loss}))


def cmd_cv(args):
    from .training import cross_validate

    cfg = _cfg(args, {"search": {"folds": args.folds}})
    train_cfg = cfg["train"] = _train_cfg(args, cfg)
    ds = load_dataset(args.data)
    tr, _ = _split(ds, cfg)
    path = out_dir(args, "cv")
    rep = cross_validate(train_cfg, ds, tr, cfg["search"].folds, cfg["search"].seed,
                         cfg["model"].with_heads)
    write_json(path / "cv.json", rep.to_dict())
    record_run(path, args, cfg, dataset_sha256=ds.fingerprint())
    print(json.dumps(rep.to_dict()))


def test_partition(model, ds):
    """The recorded held-out split when ``ds`` is the training dataset, else all of ``ds``."""
    prov = model.provenance
    if ds.fingerprint() == prov.get("data_sha256") and "split" in prov:
        return ds.take(np.asarray(prov["split"]["test_indices"], dtype=int), role="test")
    return ds.take(np.arange(ds.n_scenarios), role="test")


def cmd_eval(args):
    from .evalbench import evaluate_model, export_artifacts

    cfg = _cfg(args, {"eval": {"space": args.space}})
    model = checkpoint_load(args.checkpoint)
    ds = load_dataset(args.data)
    test = test_partition(model, ds)
    ev = evaluate_model(model, test, cfg["eval"].space)
    path = out_dir(args, "eval")
    write_json(path / "metrics.json", ev.report.to_dict())
    (path / "metrics.csv").write_text(ev.report.table() + "\n")
    if cfg["eval"].export and not args.no_export:
        grid = ds.meta.get("grid")
        export_artifacts(ev, test.coords, path / "artifacts",
                         (grid["n_s"], grid["n_r"]) if grid else None, scaler=model.scaler)
    record_run(path, args, cfg, dataset_sha256=ds.fingerprint(),
               model_sha256=model.provenance.get("blob_sha256"))
    print(json.dumps(ev.report.to_dict()))


def paper_scale_model(dtype=np.float32, seed=0):
    """Untrained paper-size network with a scaler from the generator; for timing."""
    from .dataset import fit_scaler
    from .deeponet import DeepOnetConfig, build_deeponet

    geom = GeometryConfig.paper()
    model = build_deeponet(DeepOnetConfig.paper(seed=seed), dtype=dtype)
    ds = generate_dataset(2, geom, seed=seed)
    model.scaler = fit_scaler(ds)
    model.coords = ds.coords
    return model


def cmd_bench(args):
    from .evalbench import time_inference

    cfg = _cfg(args, {"eval": {"repetitions": args.repetitions, "warmup": args.warmup,
                               "threads": args.threads}})
    e = cfg["eval"]
    if args.paper_scale:
        model = paper_scale_model()
    elif args.checkpoint:
        model = checkpoint_load(args.checkpoint)
    else:
        raise UsageError("bench needs --checkpoint or --paper-scale")
    rep = time_inference(model, args.v_in, e.repetitions, e.warmup, e.threads, e.fvm_seconds)
    path = out_dir(args, "bench")
    write_json(path / "timing.json", rep.to_dict())
    record_run(path, args, cfg)
    print(json.dumps({k: v for k, v in rep.to_dict().items() if k != "times"}))


def cmd_infer(args):
    model = checkpoint_load(args.checkpoint)
    doc = prediction_payload(model, args.v_in, args.space)
    text = json.dumps(doc)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def cmd_serve(args):
    cfg = _cfg(args, {"serve": {"host": args.host, "port": args.port,
                                "max_concurrent": args.max_concurrent, "space": args.space}})
    s = cfg["serve"]
    server = VirtualSensorServer(ServeConfig(args.checkpoint, s.host, s.port, s.max_concurrent, s.space))
    log.info("serving on %s", server.address)
    print(json.dumps({"address": server.address}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()


def cmd_ablate(args):
    from .studies import ablation

    cfg = _cfg(args)
    train_cfg = cfg["train"] = _train_cfg(args, cfg)
    ds = load_dataset(args.data)
    rep = ablation(ds, train_cfg, cfg["dataset"].train_fraction, cfg["dataset"].split_seed)
    path = out_dir(args, "ablate")
    write_json(path / "ablation.json", rep.to_dict())
    (path / "ablation.csv").write_text(rep.table() + "\n")
    record_run(path, args, cfg, dataset_sha256=ds.fingerprint())
    print(rep.table())


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_robustness(args):
    from .studies import robustness

    cfg = _cfg(args)
    train_cfg = cfg["train"] = _train_cfg(args, cfg)
    ds = load_dataset(args.data)
    splits = _floats(args.splits)
    steps = tuple(int(s) for s in _floats(args.node_steps))
    rep = robustness(ds, train_cfg, splits, steps, cfg["dataset"].train_fraction,
                     cfg["dataset"].split_seed)
    path = out_dir(args, "robustness")
    write_json(path / "robustness.json", rep.to_dict())
    for m in ("mse", "mae", "rel_l2"):
        (path / f"robustness_{m}.csv").write_text(rep.table(m) + "\n")
    record_run(path, args, cfg, dataset_sha256=ds.fingerprint())
    print(rep.table("mse"))


# --- argument parsing -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="hotleg", description="DeepONet virtual sensor for hot-leg elbow flow.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, func, help, data=False, out=True, checkpoint=False):
        s = sub.add_parser(name, help=help, description=help)
        s.set_defaults(func=func)
        s.add_argument("--config", help="JSON run configuration")
        if data:
            s.add_argument("--data", required=True, help="dataset directory")
        if checkpoint:
            s.add_argument("--checkpoint", required=checkpoint == "required", help="checkpoint directory")
        if out:
            s.add_argument("--out", help="output directory (default $HOTLEG_OUT/<command>)")
        return s

    def training_flags(s, default=None):
        s.add_argument("--preset", choices=sorted(PRESETS), default=default)
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)

    s = cmd("gen-data", cmd_gen_data, "generate a synthetic scenario dataset")
    s.add_argument("--scenarios", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--preset", dest="data_preset", choices=sorted(DATA_PRESETS))
    s.add_argument("--calibrate", action="store_true", help="fit coefficients to the target ranges first")

    s = cmd("train", cmd_train, "train a model on the training split", data=True)
    training_flags(s)
    s.add_argument("--no-heads", action="store_true", help="vanilla network without linear heads")

    s = cmd("tune", cmd_tune, "random hyperparameter search", data=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int, help="epoch cap per trial")

    s = cmd("cv", cmd_cv, "k-fold cross-validation on the training split", data=True)
    training_flags(s)
    s.add_argument("--folds", type=int)

    s = cmd("eval", cmd_eval, "metrics on the held-out split", data=True, checkpoint="required")
    s.add_argument("--space", choices=["scaled", "physical"])
    s.add_argument("--no-export", action="store_true")

    s = cmd("bench", cmd_bench, "single-scenario inference timing", checkpoint=True)
    s.add_argument("--paper-scale", action="store_true", help="time an untrained N=11,340 network (~1.6 GB)")
    s.add_argument("--repetitions", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--v-in", type=float, default=0.73)

    s = cmd("infer", cmd_infer, "predict fields for one inlet velocity", out=False, checkpoint="required")
    s.add_argument("--v-in", type=float, required=True)
    s.add_argument("--space", choices=["scaled", "physical"], default="physical")
    s.add_argument("--out", help="write the JSON document here instead of stdout")

    s = cmd("serve", cmd_serve, "HTTP virtual-sensor service", out=False, checkpoint="required")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--max-concurrent", type=int)
    s.add_argument("--space", choices=["scaled", "physical"])

    s = cmd("ablate", cmd_ablate, "heads vs vanilla at a matched parameter budget", data=True)
    training_flags(s, default="desk")

    s = cmd("robustness", cmd_robustness, "split and node-count sweeps", data=True)
    training_flags(s, default="desk")
    s.add_argument("--splits", default="0.7,0.8,0.9")
    s.add_argument("--node-steps", default="1,4", help="node subsampling steps; 4 keeps N/4")
    return p


def _emit_error(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _emit_error(exc.kind, str(exc), exc.exit_code)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    threads = os.environ.get("HOTLEG_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=int(threads)):
                args.func(args)
        else:
            args.func(args)
    except HotlegError as exc:
        return _emit_error(exc.kind, str(exc), exc.exit_code)
    except OSError as exc:
        return _emit_error("io", str(exc), 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
