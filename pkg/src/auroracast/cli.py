"""Batch command-line interface.

Commands: synth, features, train, eval, map. Every command is
deterministic given identical inputs and seeds; outputs are byte-stable
(no wall-clock content). Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import evaluate as E
from . import geomodel as G
from . import ingest as I
from . import losses as L
from . import models as M
from . import train as T
from .errors import ConfigError, DataError, TrainingDiverged

CONFIG_KEYS: dict[str, object] = {}
CONFIG_KEYS.update(G.WORLD_CONFIG_KEYS)
CONFIG_KEYS.update(I.FEATURES_CONFIG_KEYS)
CONFIG_KEYS.update(M.ARCH_CONFIG_KEYS)
CONFIG_KEYS.update(T.TRAIN_CONFIG_KEYS)
CONFIG_KEYS.update(T.HOLDOUT_CONFIG_KEYS)
CONFIG_KEYS.update(L.LOSS_CONFIG_KEYS)


def load_config(path) -> dict[str, str]:
    if path is None:
        return {}
    cfg = T.parse_config_file(path)
    unknown = sorted(set(cfg) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg: dict[str, str]) -> str:
    canonical = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_name: str | None
    config_sha256: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    seed: int | None
    data_time_range: list[float] | None

    def write(self, out_dir):
        payload = {
            "command": self.command,
            "config": self.config_name,
            "config_sha256": self.config_sha256,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "data_time_range": self.data_time_range,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _write_manifest(out_dir, command, config_path, cfg, inputs, output_names, seed, time_range):
    manifest = RunManifest(
        command=command,
        config_name=os.path.basename(config_path) if config_path else None,
        config_sha256=_config_hash(cfg),
        inputs={os.path.basename(p): _sha256_file(p) for p in inputs},
        outputs={
            name: _sha256_file(os.path.join(out_dir, name)) for name in sorted(output_names)
        },
        seed=seed,
        data_time_range=list(time_range) if time_range else None,
    )
    manifest.write(out_dir)


def _fmt(v: float) -> str:
    f = float(v)
    return str(int(f)) if f.is_integer() and abs(f) < 1e15 else repr(f)


# ── synth ─────────────────────────────────────────────────────────────

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if args.days <= 0:
        raise ConfigError(f"--days must be positive, got {args.days:g}")
    params = G.world_params_from_config(cfg, seed=args.seed)
    duration = args.days * 86400.0
    drivers = G.gen_drivers(params, duration)
    obs = G.sample_traces(params, drivers)

    os.makedirs(args.out_dir, exist_ok=True)
    drivers_path = os.path.join(args.out_dir, "drivers.csv")
    with open(drivers_path, "w", newline="") as fh:
        fh.write("t," + ",".join(G.DRIVER_NAMES) + "\n")
        times = drivers.times
        cols = [drivers.columns[name] for name in G.DRIVER_NAMES]
        for i in range(drivers.n):
            fh.write(_fmt(times[i]) + "," + ",".join(repr(float(c[i])) for c in cols) + "\n")

    obs_path = os.path.join(args.out_dir, "observations.csv")
    with open(obs_path, "w", newline="") as fh:
        fh.write("t,sat_id,mlat,mlt,eflux,region\n")
        for o in obs:
            fh.write(
                f"{_fmt(o.t)},{o.sat_id},{o.coord.mlat!r},{o.coord.mlt!r},"
                f"{o.eflux!r},{o.region.code}\n"
            )

    _write_manifest(
        args.out_dir,
        "synth",
        args.config,
        cfg,
        inputs=[args.config] if args.config else [],
        output_names=["drivers.csv", "observations.csv"],
        seed=args.seed,
        time_range=(drivers.t0, drivers.t_end),
    )
    return 0


# ── features ──────────────────────────────────────────────────────────

def cmd_features(args) -> int:
    cfg = load_config(args.config)
    drivers = I.read_drivers_csv(args.drivers)
    obs, n_nonpositive = I.read_observations_csv(args.obs)
    percentile = float(cfg.get("features.percentile", 99.995))
    fixed = float(cfg["features.threshold"]) if "features.threshold" in cfg else None
    obs, report = I.clean_targets(obs, percentile, fixed, n_nonpositive)
    schema = I.schema_from_config(cfg)
    table = I.build_features(drivers, obs, schema)
    I.write_table_cache(table, args.out)
    with open(f"{args.out}.cleaning.csv", "w", newline="") as fh:
        fh.write("n_in,n_dropped_outlier,n_dropped_nonpositive,threshold,n_dropped_history\n")
        fh.write(
            f"{report.n_in},{report.n_dropped_outlier},{report.n_dropped_nonpositive},"
            f"{report.threshold!r},{table.n_dropped_history}\n"
        )
    return 0


# ── train ─────────────────────────────────────────────────────────────

def _default_holdout(cfg, t_values: np.ndarray) -> tuple[int, float, float]:
    sat_id = int(cfg.get("holdout.sat_id", 0))
    if "holdout.t_start" in cfg or "holdout.t_end" in cfg:
        if not ("holdout.t_start" in cfg and "holdout.t_end" in cfg):
            raise ConfigError("holdout.t_start and holdout.t_end must be given together")
        return sat_id, float(cfg["holdout.t_start"]), float(cfg["holdout.t_end"])
    t_lo = float(t_values.min())
    t_hi = float(t_values.max())
    return sat_id, t_hi - 0.25 * (t_hi - t_lo), t_hi + 1.0


def _schema_meta(schema: I.FeatureSchema) -> dict:
    return {
        "variables": list(schema.variables),
        "lag_minutes": list(schema.lag_minutes),
        "avg_minutes": list(schema.avg_minutes),
    }


def _validate_combo(arch_kind: str, loss: L.LossSpec):
    required = loss.required_arch()
    if required is not None and required != arch_kind:
        raise ConfigError(f"loss {loss.variant!r} requires arch {required!r}, got {arch_kind!r}")
    if arch_kind == "conv" and loss.variant != "sparse_masked":
        raise ConfigError("the conv decoder trains only with loss=sparse_masked")
    if arch_kind == "multitask" and loss.variant != "multitask":
        raise ConfigError("the multitask architecture trains only with loss=multitask")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    config = T.train_config_from_config(cfg, seed_override=args.seed)
    arch_kind = cfg.get("arch", "baseline")
    _validate_combo(arch_kind, config.loss)
    os.makedirs(args.out_dir, exist_ok=True)

    if args.sparse is not None:
        if arch_kind != "conv":
            raise ConfigError("--sparse training requires arch=conv")
        model, history, inputs, time_range = _train_sparse(args, cfg, config)
    else:
        if args.features is None:
            raise ConfigError("one of --features or --sparse is required")
        if arch_kind == "conv":
            raise ConfigError("arch=conv trains from --sparse, not --features")
        model, history, inputs, time_range = _train_point(args, cfg, config, arch_kind)

    ckpt_path = os.path.join(args.out_dir, "checkpoint.aur")
    M.save_checkpoint(model, ckpt_path)
    T.write_history_csv(history, os.path.join(args.out_dir, "history.csv"))
    _write_manifest(
        args.out_dir,
        "train",
        args.config,
        cfg,
        inputs=inputs + ([args.config] if args.config else []),
        output_names=["checkpoint.aur", "history.csv"],
        seed=config.seed,
        time_range=time_range,
    )
    return 0


def _train_point(args, cfg, config: T.TrainConfig, arch_kind: str):
    table = I.read_table_cache(args.features)
    sat_id, t_start, t_end = _default_holdout(cfg, table.t)
    train_table, val_table = I.split_by_holdout(table, sat_id, (t_start, t_end))
    arch = M.arch_from_config(cfg, input_width=table.schema.width)
    model = M.build_model(arch, seed=config.seed)
    model, history = T.train_model(model, (train_table, val_table), config)
    model.meta = {
        "schema": _schema_meta(table.schema),
        "normalization": {
            "mean": [float(v) for v in train_table.norm_mean],
            "std": [float(v) for v in train_table.norm_std],
        },
        "holdout": {"sat_id": sat_id, "t_start": t_start, "t_end": t_end},
        "loss": config.loss.to_config(),
        "seed": config.seed,
        "grid": 128,
        "best_val_loss": history.best_val,
        "best_epoch": history.best_epoch,
    }
    return model, history, [args.features], (float(table.t.min()), float(table.t.max()))


def _train_sparse(args, cfg, config: T.TrainConfig):
    drivers_path = os.path.join(args.sparse, "drivers.csv")
    obs_path = os.path.join(args.sparse, "observations.csv")
    for p in (drivers_path, obs_path):
        if not os.path.exists(p):
            raise DataError(f"--sparse directory lacks {os.path.basename(p)}")
    drivers = I.read_drivers_csv(drivers_path)
    obs, n_nonpositive = I.read_observations_csv(obs_path)
    percentile = float(cfg.get("features.percentile", 99.995))
    obs, _ = I.clean_targets(obs, percentile, None, n_nonpositive)
    schema = I.schema_from_config(cfg)
    M.assert_global_only(schema.global_names)

    arch = M.arch_from_config(cfg, input_width=len(schema.global_names))
    spec = G.GridSpec(n_lat=arch.n_lat, n_mlt=arch.n_mlt)
    samples, _ = T.build_sparse_samples(drivers, obs, schema, spec)
    if not samples:
        raise DataError("no sparse samples could be composited")
    t_centers = np.array([s.t_center for s in samples])
    _, t_start, t_end = _default_holdout(cfg, t_centers)
    val = [s for s in samples if t_start <= s.t_center < t_end]
    train_samples = [s for s in samples if not (t_start <= s.t_center < t_end)]
    if not val or not train_samples:
        raise DataError("holdout time range leaves an empty train or validation split")

    mean, std = I.fit_normalization(np.stack([s.features for s in train_samples]))
    model = M.build_model(arch, seed=config.seed)
    model, history = T.train_model(model, (train_samples, val), config)
    model.meta = {
        "schema": _schema_meta(schema),
        "normalization": {"mean": [float(v) for v in mean], "std": [float(v) for v in std]},
        "holdout": {"sat_id": None, "t_start": t_start, "t_end": t_end},
        "loss": config.loss.to_config(),
        "seed": config.seed,
        "grid": arch.n_lat,
        "best_val_loss": history.best_val,
        "best_epoch": history.best_epoch,
    }
    return model, history, [drivers_path, obs_path], (float(t_centers.min()), float(t_centers.max()))


# ── eval ──────────────────────────────────────────────────────────────

def _val_rows(model: M.Model, table: I.FeatureTable):
    holdout = model.meta.get("holdout", {})
    sat_id = holdout.get("sat_id", 0)
    t_start = holdout.get("t_start", float(table.t.min()))
    t_end = holdout.get("t_end", float(table.t.max()) + 1.0)
    mask = (table.t >= t_start) & (table.t < t_end)
    if sat_id is not None:
        mask &= table.sat_id == sat_id
    if not mask.any():
        raise DataError("checkpoint holdout selects no rows from this feature table")
    mean, std = E._norm_from_meta(model.meta)
    rows = (table.rows[mask] - mean) / std
    return rows, table.target[mask], (None if table.region is None else table.region[mask])


def cmd_eval(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    if model.variant == "conv":
        raise ConfigError("cmd_eval evaluates point models; use cmd_map for the conv decoder")
    table = I.read_table_cache(args.features)
    rows, y_true, regions = _val_rows(model, table)
    y_pred = M.predict_point(model, rows)

    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []

    report = E.binned_errors(y_true, y_pred, n_bins=20)
    E.write_binned_errors_csv(report, os.path.join(args.out_dir, "binned_errors.csv"))
    outputs.append("binned_errors.csv")

    edges, tc, pc = E.histogram_compare(y_true, y_pred, n_bins=50)
    E.write_histogram_csv(edges, tc, pc, os.path.join(args.out_dir, "histograms.csv"))
    outputs.append("histograms.csv")

    summary_lines = [
        f"checkpoint: {os.path.basename(args.checkpoint)}",
        f"loss: {model.meta.get('loss', {}).get('loss', 'unknown')}",
        f"seed: {model.meta.get('seed')}",
        f"n_validation: {y_true.size}",
        f"val_mse_log10: {L.mse(y_true, y_pred)!r}",
    ]

    if regions is not None:
        table_mse = E.region_mse_table(y_true, y_pred, regions)
        E.write_region_mse_csv(table_mse, os.path.join(args.out_dir, "region_mse.csv"))
        outputs.append("region_mse.csv")

    if model.variant == "multitask" and regions is not None:
        probs, _, _ = M.forward_multitask(model.arch, model.params, rows)
        pred_regions = np.argmax(probs.data, axis=1)
        creport = E.classification_report(regions, pred_regions)
        E.write_classification_csv(creport, os.path.join(args.out_dir, "classification.csv"))
        outputs.append("classification.csv")
        summary_lines.append(f"region_accuracy: {creport.accuracy!r}")

    inputs = [args.checkpoint, args.features]
    if args.baseline_checkpoint:
        base_model = M.load_checkpoint(args.baseline_checkpoint)
        base_rows, base_y, _ = _val_rows(base_model, table)
        if base_y.size != y_true.size or not np.array_equal(base_y, y_true):
            raise DataError("baseline checkpoint holdout differs from candidate's")
        base_pred = M.predict_point(base_model, base_rows)
        treport = E.tail_reduction(y_true, base_pred, y_pred)
        E.write_tail_reduction_csv(treport, os.path.join(args.out_dir, "tail_reduction.csv"))
        outputs.append("tail_reduction.csv")
        summary_lines.append(
            "tail_reduction_pct_90_95_99: "
            + ",".join(repr(float(100.0 * r)) for r in treport.reduction)
        )
        inputs.append(args.baseline_checkpoint)

    cfg_hash_src = model.meta.get("loss", {})
    summary_lines.append(f"config_sha256: {_config_hash({k: str(v) for k, v in cfg_hash_src.items()})}")
    with open(os.path.join(args.out_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(summary_lines) + "\n")
    outputs.append("summary.txt")

    _write_manifest(
        args.out_dir,
        "eval",
        None,
        {},
        inputs=inputs,
        output_names=outputs,
        seed=model.meta.get("seed"),
        time_range=(float(table.t.min()), float(table.t.max())),
    )
    return 0


# ── map ───────────────────────────────────────────────────────────────

def cmd_map(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    drivers = I.read_drivers_csv(args.drivers)
    grid_n = int(model.meta.get("grid", 128))
    if isinstance(model.arch, M.ConvDecoderArch):
        spec = G.GridSpec(n_lat=model.arch.n_lat, n_mlt=model.arch.n_mlt)
    else:
        spec = G.GridSpec(n_lat=grid_n, n_mlt=grid_n)
    E.render_map(model, drivers, args.at, spec, args.out)
    return 0


# ── entry point ───────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="auroracast",
        description="Synthetic auroral-flux nowcasting: data synthesis, "
        "feature building, loss-engineered training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic drivers and observations")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--days", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="build the feature table cache")
    p.add_argument("--drivers", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--features", default=None, help="feature cache for point models")
    p.add_argument("--sparse", default=None, help="synth out-dir for the conv decoder")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the holdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--baseline-checkpoint", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render a full-hemisphere prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--drivers", required=True)
    p.add_argument("--at", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        for epoch, train_loss, val_loss in exc.history:
            print(f"  epoch {epoch}: train={train_loss:g} val={val_loss:g}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
