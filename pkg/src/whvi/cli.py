"""Command-line workflows: train, eval, bench-fwht, approx-study, gp-train, plot.

Configs are strict JSON (unknown keys are errors); checkpoints are
versioned JSON with decimal-encoded parameters so that a save/load/save
round trip is byte-identical; training logs are JSON lines; benchmarks
and studies emit CSV; the plot command renders any of those artifacts to
a static image file.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import bnn
from . import data as data_mod
from . import gp_rff as gp
from . import layers as ly
from . import transform as tf

FORMAT_VERSION = 1
BENCH_DIMS = tuple(2**k for k in range(10, 17))
STUDY_DIMS = (8, 16, 32, 64)

__all__ = [
    "main",
    "build_parser",
    "save_checkpoint",
    "load_checkpoint",
    "CliError",
    "FORMAT_VERSION",
    "BENCH_DIMS",
    "STUDY_DIMS",
]


class CliError(Exception):
    """Usage-level failure: bad flags, config, or input files (exit code 2)."""


# ---------------------------------------------------------------------------
# config parsing (strict: unknown keys are errors, defaults are materialized)
# ---------------------------------------------------------------------------


def _check_keys(section, allowed, required, where):
    if not isinstance(section, dict):
        raise CliError(f"{where}: expected a JSON object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise CliError(f"{where}: unknown config keys {unknown}")
    missing = sorted(set(required) - set(section))
    if missing:
        raise CliError(f"{where}: missing required keys {missing}")


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def _norm_layer(entry, idx):
    where = f"network.layers[{idx}]"
    _check_keys(
        entry,
        ("kind", "in_dim", "out_dim", "activation", "structure", "n_flows", "full_cov"),
        ("kind", "in_dim", "out_dim"),
        where,
    )
    structure = entry.get("structure", {})
    _check_keys(structure, ("kind", "s_treatment"), (), f"{where}.structure")
    return {
        "kind": entry["kind"],
        "in_dim": int(entry["in_dim"]),
        "out_dim": int(entry["out_dim"]),
        "activation": entry.get("activation", "identity"),
        "structure": {
            "kind": structure.get("kind", "S1HGHS2"),
            "s_treatment": structure.get("s_treatment", "optimized"),
        },
        "n_flows": int(entry.get("n_flows", bnn.DEFAULT_FLOWS)),
        "full_cov": bool(entry.get("full_cov", False)),
    }


def _norm_network_config(raw, steps_override):
    """Validate a BNN training config and materialize every default."""
    _check_keys(raw, ("task", "split_seed", "network", "schedule"), ("task", "network"), "config")
    task = raw["task"]
    if task not in data_mod.TASKS:
        raise CliError(f"config: unknown task {task!r}; expected one of {data_mod.TASKS}")
    likelihood = "gaussian" if task == "regression" else "categorical"

    net = raw["network"]
    _check_keys(
        net,
        ("layers", "likelihood", "lam", "mc_train", "mc_test", "kl_scale", "noise_logvar_init"),
        ("layers",),
        "config.network",
    )
    if net.get("likelihood", likelihood) != likelihood:
        raise CliError(
            f"config.network: likelihood {net['likelihood']!r} does not match task {task!r}"
        )
    if not isinstance(net["layers"], list) or not net["layers"]:
        raise CliError("config.network.layers: expected a non-empty list")

    sched = raw.get("schedule", {})
    _check_keys(
        sched,
        ("lr0", "gamma", "p", "total_steps", "fixed_noise_steps", "batch_size", "eval_interval"),
        (),
        "config.schedule",
    )
    total_steps = int(sched.get("total_steps", 5000))
    fixed_noise = int(sched.get("fixed_noise_steps", 500))
    if steps_override is not None:
        total_steps = int(steps_override)
        fixed_noise = min(fixed_noise, total_steps)
    return {
        "task": task,
        "split_seed": int(raw.get("split_seed", 0)),
        "network": {
            "layers": [_norm_layer(e, i) for i, e in enumerate(net["layers"])],
            "likelihood": likelihood,
            "lam": float(net.get("lam", 1.0)),
            "mc_train": int(net.get("mc_train", 1)),
            "mc_test": int(net.get("mc_test", 64)),
            "kl_scale": float(net.get("kl_scale", 1.0)),
            "noise_logvar_init": float(net.get("noise_logvar_init", math.log(0.01))),
        },
        "schedule": {
            "lr0": float(sched.get("lr0", 0.001)),
            "gamma": float(sched.get("gamma", 0.0005)),
            "p": float(sched.get("p", 0.3)),
            "total_steps": total_steps,
            "fixed_noise_steps": fixed_noise,
            "batch_size": int(sched.get("batch_size", 64)),
            "eval_interval": int(sched.get("eval_interval", 100)),
        },
    }


def _build_network(cfg):
    """Instantiate the validated config; value errors surface as usage errors."""
    net = cfg["network"]
    try:
        layers = tuple(
            bnn.LayerSpec(
                kind=e["kind"],
                in_dim=e["in_dim"],
                out_dim=e["out_dim"],
                activation=e["activation"],
                structure=ly.StructureSpec(
                    kind=e["structure"]["kind"],
                    s_treatment=e["structure"]["s_treatment"],
                ),
                n_flows=e["n_flows"],
                full_cov=e["full_cov"],
            )
            for e in net["layers"]
        )
        config = bnn.NetworkConfig(
            layers=layers,
            likelihood=net["likelihood"],
            lam=net["lam"],
            mc_train=net["mc_train"],
            mc_test=net["mc_test"],
            kl_scale=net["kl_scale"],
            noise_logvar_init=net["noise_logvar_init"],
        )
        schedule = bnn.TrainSchedule(**cfg["schedule"])
    except ValueError as exc:
        raise CliError(f"config: {exc}") from None
    return config, schedule


def _norm_gp_config(raw, steps_override):
    """Validate a GP-RFF training config and materialize every default."""
    _check_keys(raw, ("task", "split_seed", "gp"), ("gp",), "config")
    task = raw.get("task", "regression")
    if task != "regression":
        raise CliError("config: gp-train supports task 'regression' only")
    section = raw["gp"]
    _check_keys(
        section,
        (
            "n_rf",
            "kind",
            "lam",
            "signal_var",
            "noise_std",
            "lengthscales",
            "total_steps",
            "lr",
            "batch_size",
            "mc_train",
            "eval_interval",
            "noise_frozen_steps",
        ),
        ("n_rf",),
        "config.gp",
    )
    kind = section.get("kind", "whvi")
    if kind not in ("whvi", "meanfield"):
        raise CliError(f"config.gp: unknown posterior kind {kind!r}")
    lengthscales = section.get("lengthscales")
    if lengthscales is not None:
        lengthscales = [float(v) for v in lengthscales]
    batch_size = section.get("batch_size")
    frozen = section.get("noise_frozen_steps")
    total_steps = int(section.get("total_steps", 2000))
    if steps_override is not None:
        total_steps = int(steps_override)
        if frozen is not None:
            frozen = min(int(frozen), total_steps)
    return {
        "task": task,
        "split_seed": int(raw.get("split_seed", 0)),
        "gp": {
            "n_rf": int(section["n_rf"]),
            "kind": kind,
            "lam": float(section.get("lam", 1.0)),
            "signal_var": float(section.get("signal_var", 1.0)),
            "noise_std": float(section.get("noise_std", gp.DEFAULT_NOISE_STD)),
            "lengthscales": lengthscales,
            "total_steps": total_steps,
            "lr": float(section.get("lr", gp.DEFAULT_GP_LR)),
            "batch_size": None if batch_size is None else int(batch_size),
            "mc_train": int(section.get("mc_train", 1)),
            "eval_interval": int(section.get("eval_interval", 100)),
            "noise_frozen_steps": None if frozen is None else int(frozen),
        },
    }


# ---------------------------------------------------------------------------
# checkpoints (versioned JSON; decimal-encoded arrays; byte-identical re-save)
# ---------------------------------------------------------------------------


def _encode_array(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": [int(s) for s in a.shape], "data": [float(v) for v in a.ravel()]}


def _decode_array(entry):
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_checkpoint(path, model_type, config, seed, step, params, fixed=None):
    """Write a versioned JSON checkpoint; re-saving a loaded one is byte-identical."""
    ckpt = {
        "format_version": FORMAT_VERSION,
        "model_type": model_type,
        "config": config,
        "seed": int(seed),
        "step": int(step),
        "params": {name: _encode_array(v) for name, v in params.items()},
        "fixed": {name: _encode_array(v) for name, v in (fixed or {}).items()},
    }
    Path(path).write_text(_dump_json(ckpt), encoding="utf-8")


def load_checkpoint(path):
    """Read a checkpoint into (model_type, config, seed, step, params, fixed)."""
    ckpt = _load_json(path)
    if not isinstance(ckpt, dict) or "format_version" not in ckpt:
        raise CliError(f"{path}: not a checkpoint file")
    if ckpt["format_version"] != FORMAT_VERSION:
        raise CliError(
            f"{path}: unsupported checkpoint format_version {ckpt['format_version']!r}"
        )
    params = {name: _decode_array(v) for name, v in ckpt["params"].items()}
    fixed = {name: _decode_array(v) for name, v in ckpt.get("fixed", {}).items()}
    return ckpt["model_type"], ckpt["config"], ckpt["seed"], ckpt["step"], params, fixed


def _write_log(path, records):
    lines = [json.dumps(rec, sort_keys=True) for rec in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _metrics_record(metrics):
    return {
        name: float(value)
        for name, value in (
            ("rmse", metrics.rmse),
            ("mnll", metrics.mnll),
            ("error_rate", metrics.error_rate),
            ("ece", metrics.ece),
        )
        if value is not None
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_train(args):
    cfg = _norm_network_config(_load_json(args.config), args.steps)
    config, schedule = _build_network(cfg)
    try:
        ds = data_mod.load_csv(args.data, cfg["task"], cfg["split_seed"])
    except FileNotFoundError:
        raise CliError(f"{args.data}: no such file") from None
    if ds.d_in != config.in_dim:
        raise CliError(
            f"config expects {config.in_dim} input features, data has {ds.d_in}"
        )
    if cfg["task"] == "classification" and config.out_dim != ds.n_classes:
        raise CliError(
            f"network outputs {config.out_dim} classes, data has {ds.n_classes}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, log = bnn.train(config, schedule, ds.train_arrays(), args.seed)
    ckpt_path = out_dir / "checkpoint.json"
    save_checkpoint(ckpt_path, "bnn", cfg, args.seed, schedule.total_steps, params)
    _write_log(out_dir / "train_log.jsonl", log)
    summary = {
        "checkpoint": str(ckpt_path),
        "log": str(out_dir / "train_log.jsonl"),
        "steps": schedule.total_steps,
    }
    if log:
        summary["final_neg_elbo"] = float(log[-1]["neg_elbo"])
    print(json.dumps(summary, sort_keys=True))
    return 0


def _rebuild_gp_model(cfg, fixed):
    section = cfg["gp"]
    rff = gp.RffConfig(
        omega=fixed["rff.omega"],
        lengthscales=fixed["rff.lengthscales"],
        signal_var=section["signal_var"],
        noise_std=section["noise_std"],
    )
    if section["kind"] == "whvi":
        shape = ly.reshape_vector_shape(rff.n_rf)
        return gp.GpRffModel(rff, "whvi", section["lam"], shape)
    return gp.GpRffModel(rff, "meanfield", section["lam"])


def _cmd_gp_train(args):
    cfg = _norm_gp_config(_load_json(args.config), args.steps)
    section = cfg["gp"]
    try:
        ds = data_mod.load_csv(args.data, "regression", cfg["split_seed"])
    except FileNotFoundError:
        raise CliError(f"{args.data}: no such file") from None
    rng = np.random.default_rng(args.seed)
    try:
        rff = gp.make_rff_config(
            ds.d_in,
            section["n_rf"],
            rng,
            signal_var=section["signal_var"],
            noise_std=section["noise_std"],
            lengthscales=section["lengthscales"],
        )
        model, init_params = gp.gp_rff_init(rff, section["kind"], section["lam"], rng)
    except ValueError as exc:
        raise CliError(f"config: {exc}") from None
    X_train, y_train = ds.train_arrays()
    params, log = gp.gp_rff_train(
        model,
        X_train,
        y_train,
        seed=args.seed,
        total_steps=section["total_steps"],
        lr=section["lr"],
        batch_size=section["batch_size"],
        mc_train=section["mc_train"],
        eval_interval=section["eval_interval"],
        rng_params=init_params,
        noise_frozen_steps=section["noise_frozen_steps"],
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.json"
    fixed = {"rff.omega": rff.omega, "rff.lengthscales": rff.lengthscales}
    save_checkpoint(
        ckpt_path, "gp_rff", cfg, args.seed, section["total_steps"], params, fixed
    )
    _write_log(out_dir / "train_log.jsonl", log)
    summary = {
        "checkpoint": str(ckpt_path),
        "log": str(out_dir / "train_log.jsonl"),
        "steps": section["total_steps"],
    }
    if log:
        summary["final_neg_elbo"] = float(log[-1]["neg_elbo"])
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_eval(args):
    model_type, cfg, _seed, _step, params, fixed = load_checkpoint(args.checkpoint)
    try:
        ds = data_mod.load_csv(args.data, cfg["task"], cfg["split_seed"])
    except FileNotFoundError:
        raise CliError(f"{args.data}: no such file") from None
    X_test, y_test = ds.test_arrays()
    if model_type == "bnn":
        config, _ = _build_network(cfg)
        mc_test = config.mc_test if args.mc_test is None else args.mc_test
        predictions = bnn.predict(config, params, X_test, mc_test, args.seed)
        metrics = bnn.compute_metrics(predictions, y_test)
    elif model_type == "gp_rff":
        model = _rebuild_gp_model(cfg, fixed)
        mc_test = 64 if args.mc_test is None else args.mc_test
        predictions = gp.gp_rff_predict(model, params, X_test, mc_test, args.seed)
        metrics = bnn.compute_metrics(predictions, y_test)
    else:
        raise CliError(f"{args.checkpoint}: unknown model_type {model_type!r}")
    record = _metrics_record(metrics)
    text = json.dumps(record, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _cmd_bench_fwht(args):
    if args.batch < 1 or args.reps < 1:
        raise CliError("--batch and --reps must be positive")
    if args.dims is None:
        dims = BENCH_DIMS
    else:
        try:
            dims = tuple(int(part) for part in args.dims.split(","))
        except ValueError:
            raise CliError(
                f"--dims: expected comma-separated integers, got {args.dims!r}"
            ) from None
        if any(not tf.is_power_of_two(D) for D in dims):
            raise CliError("--dims: every size must be a power of two")
    rng = np.random.default_rng(args.seed)
    rows = []
    for D in dims:
        x = rng.standard_normal((args.batch, D))
        tf.fwht_batch(x)  # warmup: page in buffers, stabilise caches
        times_ms = []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            tf.fwht_batch(x)
            times_ms.append((time.perf_counter() - t0) * 1e3)
        rows.append((D, args.batch, float(np.mean(times_ms)), float(np.std(times_ms))))
    lines = ["D,batch,mean_ms,std_ms"]
    lines += [f"{D},{batch},{mean:.6f},{std:.6f}" for D, batch, mean, std in rows]
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"wrote {args.out} ({len(rows)} sizes)")
    return 0


def _cmd_approx_study(args):
    try:
        dims = tuple(int(part) for part in args.dims.split(","))
    except ValueError:
        raise CliError(f"--dims: expected comma-separated integers, got {args.dims!r}") from None
    if args.trials < 1:
        raise CliError("--trials must be positive")
    iters = 1500 if args.steps is None else args.steps
    rng = np.random.default_rng(args.seed)
    try:
        results = ly.approximation_study(dims, args.trials, iters=iters, rng=rng)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    lines = ["D,trial,best_rmse"]
    for D in dims:
        for trial, rmse in enumerate(results[D]):
            lines.append(f"{D},{trial},{float(rmse):.10f}")
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"wrote {args.out} ({len(dims)} dims x {args.trials} trials)")
    return 0


def _read_csv_columns(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CliError(f"{path}: empty file")
    header = lines[0].split(",")
    values = [line.split(",") for line in lines[1:] if line]
    return header, values


def _cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    source = Path(args.data)
    if not source.exists():
        raise CliError(f"{args.data}: no such file")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if source.suffix == ".jsonl":
        records = [json.loads(line) for line in source.read_text().splitlines() if line]
        if not records:
            raise CliError(f"{args.data}: empty training log")
        steps = [r["step"] for r in records]
        ax.plot(steps, [r["neg_elbo"] for r in records], label="negative ELBO")
        ax.plot(steps, [r["nll"] for r in records], label="likelihood term")
        ax.plot(steps, [r["kl"] for r in records], label="KL term")
        ax.set_xlabel("step")
        ax.set_ylabel("objective")
        ax.legend()
        ax.set_title("training objective")
    else:
        header, values = _read_csv_columns(source)
        if header == ["D", "batch", "mean_ms", "std_ms"]:
            D = [int(v[0]) for v in values]
            mean = [float(v[2]) for v in values]
            std = [float(v[3]) for v in values]
            ax.errorbar(D, mean, yerr=std, marker="o")
            ax.set_xscale("log", base=2)
            ax.set_yscale("log")
            ax.set_xlabel("D")
            ax.set_ylabel("time per transform (ms)")
            ax.set_title(f"batched fast transform timing (batch {values[0][1]})")
        elif header == ["D", "trial", "best_rmse"]:
            dims = sorted({int(v[0]) for v in values})
            per_dim = {d: [float(v[2]) for v in values if int(v[0]) == d] for d in dims}
            for d in dims:
                ax.scatter([d] * len(per_dim[d]), per_dim[d], alpha=0.35, color="tab:blue")
            ax.plot(dims, [float(np.median(per_dim[d])) for d in dims],
                    color="tab:red", marker="s", label="median")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("D")
            ax.set_ylabel("best fit rmse")
            ax.legend()
            ax.set_title("structured approximation study")
        else:
            raise CliError(f"{args.data}: unrecognized CSV header {header!r}")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="whvi",
        description="Structured variational Bayesian networks: training and analysis tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a network, write checkpoint + log")
    train.add_argument("--config", required=True, help="JSON config file")
    train.add_argument("--data", required=True, help="CSV dataset")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--steps", type=int, default=None, help="override total_steps")
    train.set_defaults(func=_cmd_train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    evaluate.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    evaluate.add_argument("--data", required=True, help="CSV dataset")
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--mc-test", type=int, default=None, dest="mc_test")
    evaluate.add_argument("--out", default=None, help="also write metrics JSON here")
    evaluate.set_defaults(func=_cmd_eval)

    bench = sub.add_parser("bench-fwht", help="time the transform, write CSV")
    bench.add_argument("--out", required=True, help="CSV output path")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--batch", type=int, default=512)
    bench.add_argument("--reps", type=int, default=5)
    bench.add_argument("--dims", default=None,
                       help="comma-separated sizes (default 1024..65536 doubling)")
    bench.set_defaults(func=_cmd_bench_fwht)

    study = sub.add_parser("approx-study", help="structured-fit study, write CSV")
    study.add_argument("--out", required=True, help="CSV output path")
    study.add_argument("--seed", type=int, default=0)
    study.add_argument("--steps", type=int, default=None, help="override fit iterations")
    study.add_argument("--trials", type=int, default=20)
    study.add_argument("--dims", default="8,16,32,64", help="comma-separated D values")
    study.set_defaults(func=_cmd_approx_study)

    gp_train = sub.add_parser("gp-train", help="train a GP regressor, write checkpoint + log")
    gp_train.add_argument("--config", required=True, help="JSON config file")
    gp_train.add_argument("--data", required=True, help="CSV dataset")
    gp_train.add_argument("--out", required=True, help="output directory")
    gp_train.add_argument("--seed", type=int, default=0)
    gp_train.add_argument("--steps", type=int, default=None, help="override total_steps")
    gp_train.set_defaults(func=_cmd_gp_train)

    plot = sub.add_parser("plot", help="render a training log or CSV to an image file")
    plot.add_argument("--data", required=True, help="train_log.jsonl or CSV artifact")
    plot.add_argument("--out", required=True, help="image output path (png/svg/pdf)")
    plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
