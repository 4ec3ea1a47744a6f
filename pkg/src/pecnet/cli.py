"""Command-line entry point: ``pecnet <command> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 config or I/O error, 2 numerical divergence.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import DataFormatError, group_into_batches, load_trajectory_file, mask_components, window_samples
from .social import neighbour_edges
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainingDivergence,
    evaluate_best_of_k,
    load_model,
    predict,
    prepare_samples,
    run_waypoint_ablation,
    train,
)
from .vae import SamplingConfig

log = logging.getLogger("pecnet")

METRICS_HEADER = "run_id,dataset,K,sigma_t,truncate,ADE,FDE,waypoint_err,trials"
THREADS_ENV = "PECNET_THREADS"

# keys outside TrainConfig: name -> (type, default)
EXTRA_KEYS: dict[str, tuple[type, Any]] = {
    "k": (int, 20),
    "sigma_t": (float, None),
    "truncation_c": (float, 1.2),
    "truncate": (bool, None),
    "trials": (int, 100),
    "out": (str, "runs"),
    "run_id": (str, "run"),
    "k_list": (str, "1,2,5,10,20"),
    "truncate_settings": (str, "both"),
    "w_range": (str, "1,2,3,4,5,6,7,8,9,10,11,12"),
    "plot": (bool, True),
}


def _field_types() -> dict[str, tuple[type, Any]]:
    types = {}
    hints = {"int": int, "float": float, "bool": bool, "str": str, "str | None": str, "float | None": float}
    for f in dataclasses.fields(TrainConfig):
        types[f.name] = (hints[f.type], f.default)
    types.update(EXTRA_KEYS)
    return types


def _convert(key: str, raw: str, typ: type):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for key {key!r}: {raw!r}") from exc


def read_config(path) -> dict[str, Any]:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    types = _field_types()
    values: dict[str, Any] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, val, types[key][0])
    return values


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pecnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, help_ in [
        ("train", "train a model and evaluate it on the held-out set"),
        ("eval", "best-of-K evaluation of a checkpoint"),
        ("predict", "write K sampled futures per agent as CSV"),
        ("ablate-waypoint", "train/evaluate per conditioning way-point"),
        ("sweep-k", "ADE/FDE against number of samples, with and without truncation"),
        ("gen-synth", "write a synthetic scene file in ethucy_txt format"),
        ("inspect-mask", "social-mask component report for a dataset"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value run config")
        for key, (typ, _) in _field_types().items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None)
            else:
                p.add_argument(flag, dest=key, type=str, default=None)
        if name == "inspect-mask":
            p.add_argument("--file", help="single trajectory file (otherwise the configured dataset)")
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """File values overridden by explicit flags; returns every known key."""
    types = _field_types()
    values = {k: d for k, (_, d) in types.items()}
    if args.config:
        values.update(read_config(args.config))
    for key, (typ, _) in types.items():
        raw = getattr(args, key, None)
        if raw is None:
            continue
        values[key] = raw if typ is bool else _convert(key, raw, typ)
    return values


def _train_config(values: dict[str, Any]) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in values.items() if k in names})


def _sampling(values: dict[str, Any], k: int | None = None, truncate: bool | None = None) -> SamplingConfig:
    k = values["k"] if k is None else k
    truncate = values["truncate"] if truncate is None else truncate
    base = SamplingConfig.default_for(k, values["truncation_c"])
    if truncate is not None and truncate != base.truncate:
        base = SamplingConfig(k=k, sigma_t=1.0 if truncate else 1.3, truncation_c=values["truncation_c"], truncate=truncate)
    if values["sigma_t"] is not None and not base.truncate:
        base = dataclasses.replace(base, sigma_t=values["sigma_t"])
    return base


def _int_list(text: str, key: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list for {key!r}: {text!r}") from exc


def _fmt(x: float) -> str:
    return repr(float(x))


class MetricsWriter:
    """Metrics CSV whose first line records the command and every resolved key.

    Output locations are left out so identical runs give identical bytes.
    """

    def __init__(self, path: Path, command: str, values: dict[str, Any]):
        self.path = path
        settings = " ".join(f"{k}={values[k]}" for k in sorted(values) if k not in ("out", "checkpoint"))
        self.lines = [f"# pecnet {command} {settings}", METRICS_HEADER]

    def row(self, run_id, dataset, sampling: SamplingConfig, ade, fde, wp, trials):
        self.lines.append(
            ",".join([str(run_id), str(dataset), str(sampling.k), _fmt(sampling.sigma_t), str(sampling.truncate).lower(), _fmt(ade), _fmt(fde), _fmt(wp), str(trials)])
        )

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("\n".join(self.lines) + "\n", encoding="utf-8")


def _plot(path: Path, xs, series: dict[str, Sequence[float]], xlabel: str, title: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pecnet"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("error")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _checkpoint_path(values) -> Path:
    return Path(values["checkpoint"] or Path(values["out"]) / "model.pecn")


def _test_batches(values, cfg: TrainConfig, t_dist: float, scale: float):
    _, test, dataset = prepare_samples(cfg)
    if not test:
        raise ConfigError("evaluation set is empty")
    return group_into_batches(test, t_dist, cfg.batch, scale), dataset


def _load(values):
    path = _checkpoint_path(values)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    params, meta, _ = load_model(path)
    return params, meta


# --------------------------------------------------------------------------- commands


def cmd_train(values) -> int:
    cfg = _train_config(values)
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.replace(cfg, checkpoint=str(_checkpoint_path(values)))
    train_samples, test_samples, dataset = prepare_samples(cfg)
    batches = group_into_batches(train_samples, cfg.t_dist, cfg.batch, cfg.scale)
    log.info("training on %d samples in %d batches", len(train_samples), len(batches))
    res = train(cfg, batches)
    writer = MetricsWriter(out / "metrics.csv", "train", values)
    if test_samples:
        sampling = _sampling(values)
        test_batches = group_into_batches(test_samples, cfg.t_dist, cfg.batch, cfg.scale)
        ev = evaluate_best_of_k(
            test_batches, res.params, sampling, values["trials"], base_seed=cfg.seed,
            rounds=cfg.pool_rounds, waypoint=cfg.conditioning_index, oracle=cfg.oracle,
        )
        writer.row(values["run_id"], dataset, sampling, ev.ade, ev.fde, ev.waypoint_err, ev.trials)
    writer.write()
    print(f"checkpoint: {cfg.checkpoint}\nmetrics: {writer.path}")
    return 0


def cmd_eval(values) -> int:
    params, meta = _load(values)
    cfg = _train_config(values)
    batches, dataset = _test_batches(values, cfg, meta.get("t_dist", cfg.t_dist), meta.get("scale", cfg.scale))
    sampling = _sampling(values)
    ev = evaluate_best_of_k(
        batches, params, sampling, values["trials"], base_seed=cfg.seed,
        rounds=int(meta["pool_rounds"]), waypoint=int(meta["waypoint"]), oracle=bool(meta["oracle"]),
    )
    writer = MetricsWriter(Path(values["out"]) / "eval_metrics.csv", "eval", values)
    writer.row(values["run_id"], dataset, sampling, ev.ade, ev.fde, ev.waypoint_err, ev.trials)
    writer.write()
    print(f"ADE={ev.ade:.4f} FDE={ev.fde:.4f} ({ev.trials} trials, K={sampling.k})")
    return 0


def cmd_predict(values) -> int:
    from .data import write_predictions

    params, meta = _load(values)
    cfg = _train_config(values)
    batches, _ = _test_batches(values, cfg, meta.get("t_dist", cfg.t_dist), meta.get("scale", cfg.scale))
    sampling = _sampling(values)
    rng = np.random.default_rng(cfg.seed)
    futures = [
        predict(b, params, sampling, rng, rounds=int(meta["pool_rounds"]), waypoint=int(meta["waypoint"]), oracle=bool(meta["oracle"])).futures
        for b in batches
    ]
    path = Path(values["out"]) / "predictions.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    n = write_predictions(path, batches, futures)
    print(f"wrote {n} rows to {path}")
    return 0


def cmd_sweep_k(values) -> int:
    params, meta = _load(values)
    cfg = _train_config(values)
    batches, dataset = _test_batches(values, cfg, meta.get("t_dist", cfg.t_dist), meta.get("scale", cfg.scale))
    settings = {"both": [True, False], "on": [True], "off": [False]}.get(values["truncate_settings"])
    if settings is None:
        raise ConfigError("truncate_settings must be one of both, on, off")
    ks = sorted(_int_list(values["k_list"], "k_list"))
    out = Path(values["out"])
    writer = MetricsWriter(out / "sweep_k.csv", "sweep-k", values)
    curves: dict[str, list[float]] = {}
    for k in ks:
        for trunc in settings:
            sampling = _sampling(values, k=k, truncate=trunc)
            ev = evaluate_best_of_k(
                batches, params, sampling, values["trials"], base_seed=cfg.seed,
                rounds=int(meta["pool_rounds"]), waypoint=int(meta["waypoint"]), oracle=bool(meta["oracle"]),
            )
            tag = "truncated" if trunc else "untruncated"
            writer.row(f"{values['run_id']}-{tag}", dataset, sampling, ev.ade, ev.fde, ev.waypoint_err, ev.trials)
            curves.setdefault(f"ADE {tag}", []).append(ev.ade)
            curves.setdefault(f"FDE {tag}", []).append(ev.fde)
    writer.write()
    if values["plot"]:
        _plot(out / "sweep_k.svg", ks, curves, "K (samples)", "best-of-K error vs K")
    print(f"metrics: {writer.path}")
    return 0


def cmd_ablate_waypoint(values) -> int:
    cfg = _train_config(values)
    train_samples, test_samples, dataset = prepare_samples(cfg)
    train_batches = group_into_batches(train_samples, cfg.t_dist, cfg.batch, cfg.scale)
    test_batches = group_into_batches(test_samples, cfg.t_dist, cfg.batch, cfg.scale)
    ws = _int_list(values["w_range"], "w_range")
    sampling = _sampling(values)
    out = Path(values["out"])
    writer = MetricsWriter(out / "waypoint_ablation.csv", "ablate-waypoint", values)
    curves: dict[str, list[float]] = {}
    # the model curve plus the oracle curve, or the oracle alone when oracle=true
    for oracle in ([True] if cfg.oracle else [False, True]):
        tag = "oracle" if oracle else "model"
        rows = run_waypoint_ablation(cfg, train_batches, test_batches, ws, oracle, sampling, values["trials"])
        for r in rows:
            writer.row(f"{values['run_id']}-{tag}-w{r['w']}", dataset, sampling, r["ADE"], r["FDE"], r["waypoint_err"], values["trials"])
        curves[f"ADE {tag}"] = [r["ADE"] for r in rows]
        curves[f"FDE {tag}"] = [r["FDE"] for r in rows]
    writer.write()
    if values["plot"]:
        _plot(out / "waypoint_ablation.svg", ws, curves, "conditioned future position", "way-point conditioning")
    print(f"metrics: {writer.path}")
    return 0


def cmd_gen_synth(values) -> int:
    from .data import gen_synthetic

    recs = gen_synthetic(values["n_scenes"], values["agents_per_scene"], values["data_seed"], values["jitter"], length=values["t_p"] + values["t_f"])
    out = Path(values["out"])
    path = out if out.suffix else out / "synthetic.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in sorted(recs, key=lambda r: (r.frame_id, r.agent_id)):
            fh.write(f"{r.frame_id}\t{r.agent_id}\t{r.x!r}\t{r.y!r}\n")
    print(f"wrote {len(recs)} records to {path}")
    return 0


def mask_report(samples, t_dist: float) -> str:
    comps = mask_components(samples, t_dist)
    edges = neighbour_edges([(s.past, s.past_frames) for s in samples], t_dist)
    hist = Counter(len(c) for c in comps)
    lines = [
        f"samples: {len(samples)}",
        f"edges: {len(edges)}",
        f"components: {len(comps)}",
        "component size histogram:",
        *(f"  size {size}: {count}" for size, count in sorted(hist.items())),
    ]
    if samples and not edges:
        lines.append("WARNING: every agent is isolated (no mask edges); check t_dist and frame alignment")
    return "\n".join(lines)


def cmd_inspect_mask(values, file: str | None = None) -> int:
    cfg = _train_config(values)
    if file:
        from .data import SUBSAMPLE_EVERY, subsample

        recs = subsample(load_trajectory_file(file, cfg.data_format), SUBSAMPLE_EVERY[cfg.data_format])
        samples = window_samples(recs, cfg.t_p, cfg.t_f, cfg.eval_stride, frame_step=SUBSAMPLE_EVERY[cfg.data_format])
        print(mask_report(samples, cfg.t_dist))
        return 0
    train_samples, test_samples, _ = prepare_samples(cfg)
    for label, samples in (("train", train_samples), ("test", test_samples)):
        print(f"[{label}]")
        print(mask_report(samples, cfg.t_dist))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate-waypoint": cmd_ablate_waypoint,
    "sweep-k": cmd_sweep_k,
    "gen-synth": cmd_gen_synth,
}


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 is reserved for divergence here
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    with _thread_limit():
        try:
            values = resolve(args)
            if args.command == "inspect-mask":
                return cmd_inspect_mask(values, args.file)
            return COMMANDS[args.command](values)
        except TrainingDivergence as exc:
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return 2
        except (ConfigError, DataFormatError, OSError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1


if __name__ == "__main__":
    sys.exit(main())
