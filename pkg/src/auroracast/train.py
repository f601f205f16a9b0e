"""Mini-batch training: Adam, early stopping, and sparse-grid compositing.

The validation metric is always the plain MSE for point models and the
masked MSE for the conv decoder, regardless of the training loss, so runs
with different losses stay comparable. For the multitask model the point
metric is the MSE of the selected-region flux (the model's actual flux
prediction). Early stopping keeps the parameters of the best validation
epoch.

Run config files are ``key=value`` lines with ``#`` comments; unknown keys
are hard errors. History is emitted as ``epoch,train_loss,val_loss`` CSV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from . import models as M
from .autodiff import Tape, Tensor, zero_grads
from .errors import ConfigError, DataError, TrainingDiverged
from .geomodel import DriverSeries, GridMap, GridSpec, Observation, cells_of
from .ingest import FeatureSchema, FeatureTable, fit_normalization, history_feature_rows
from .losses import LossSpec

COMPOSITE_HALF_WIDTH_S = 150.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int | None = None  # resolved per model: 4096 point, 16 conv
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def resolved_batch_size(self, variant: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 16 if variant == "conv" else 4096


@dataclass
class SparseSample:
    """One conv-decoder training sample: global features + masked grid target."""

    t_center: float
    features: np.ndarray
    target: GridMap

    def __post_init__(self):
        if not self.target.mask.any():
            raise ValueError("sparse sample must have at least one observed cell")


# ── Adam ──────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> AdamState:
    """Standard bias-corrected Adam update, applied in place."""
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = config.beta1 * state.m[name] + (1 - config.beta1) * g
        state.v[name] = config.beta2 * state.v[name] + (1 - config.beta2) * g * g
        m_hat = state.m[name] / (1 - config.beta1**t)
        v_hat = state.v[name] / (1 - config.beta2**t)
        p.data = p.data - (config.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.data.dtype)
    return state


# ── Sparse compositing ────────────────────────────────────────────────

def _composite_from_arrays(
    mlat: np.ndarray, mlt: np.ndarray, logf: np.ndarray, spec: GridSpec
) -> GridMap:
    rows, cols = cells_of(mlat, mlt, spec)
    sums = np.zeros((spec.n_lat, spec.n_mlt))
    counts = np.zeros((spec.n_lat, spec.n_mlt))
    np.add.at(sums, (rows, cols), logf)
    np.add.at(counts, (rows, cols), 1.0)
    mask = counts > 0
    values = np.zeros_like(sums)
    values[mask] = sums[mask] / counts[mask]
    return GridMap(spec=spec, values=values, mask=mask)


def composite_window(
    obs: list[Observation],
    t_center: float,
    spec: GridSpec,
    half_width_s: float = COMPOSITE_HALF_WIDTH_S,
) -> GridMap:
    """Grid target from every observation within the closed window
    [t_center - half_width, t_center + half_width]; cells hit more than
    once take the mean log10 flux."""
    ts = np.array([o.t for o in obs])
    sel = np.abs(ts - t_center) <= half_width_s
    if not sel.any():
        raise DataError(f"no observations within the window at t={t_center:g}")
    chosen = [o for o, keep in zip(obs, sel) if keep]
    mlat = np.array([o.coord.mlat for o in chosen])
    mlt = np.array([o.coord.mlt for o in chosen])
    logf = np.log10(np.array([o.eflux for o in chosen]))
    return _composite_from_arrays(mlat, mlt, logf, spec)


def build_sparse_samples(
    drivers: DriverSeries,
    obs: list[Observation],
    schema: FeatureSchema,
    spec: GridSpec,
    half_width_s: float = COMPOSITE_HALF_WIDTH_S,
) -> tuple[list[SparseSample], int]:
    """One sample per driver time step that has full feature history and a
    non-empty window; returns (samples, n_skipped_empty)."""
    times = drivers.times
    feats, ok = history_feature_rows(drivers, times, schema)
    order = np.argsort([o.t for o in obs], kind="stable")
    t_all = np.array([obs[i].t for i in order])
    mlat_all = np.array([obs[i].coord.mlat for i in order])
    mlt_all = np.array([obs[i].coord.mlt for i in order])
    logf_all = np.log10(np.array([obs[i].eflux for i in order]))
    samples: list[SparseSample] = []
    n_empty = 0
    for i, t_center in enumerate(times):
        if not ok[i]:
            continue
        lo = np.searchsorted(t_all, t_center - half_width_s, side="left")
        hi = np.searchsorted(t_all, t_center + half_width_s, side="right")
        if hi <= lo:
            n_empty += 1
            continue
        target = _composite_from_arrays(
            mlat_all[lo:hi], mlt_all[lo:hi], logf_all[lo:hi], spec
        )
        samples.append(SparseSample(t_center=float(t_center), features=feats[i], target=target))
    return samples, n_empty


# ── Training loops ────────────────────────────────────────────────────

@dataclass
class History:
    epochs: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf

    def record(self, epoch: int, train_loss: float, val_loss: float) -> bool:
        self.epochs.append((epoch, train_loss, val_loss))
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_epoch = epoch
            return True
        return False


def _check_finite(value: float, epoch: int, batch: int, history: History):
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss {value} at epoch {epoch}, batch {batch}",
            epoch=epoch,
            batch=batch,
            history=history.epochs,
        )


def _point_loss_op(tape, pred, flux_tensor, probs_tensor, y, onehot, spec: LossSpec, dist_w):
    if spec.variant == "mse":
        return L.mse_op(tape, pred, y)
    if spec.variant == "tail":
        return L.tail_loss_op(tape, pred, y, spec.tail_terms)
    if spec.variant == "dist":
        return L.dist_loss_op(tape, pred, y, dist_w)
    if spec.variant == "multitask":
        return L.multitask_loss_op(tape, flux_tensor, probs_tensor, y, onehot, spec.lambda_cce)
    raise ConfigError(f"loss {spec.variant!r} is not a point-model loss")


def _onehot(region_codes: np.ndarray, k: int = 3) -> np.ndarray:
    out = np.zeros((region_codes.size, k))
    out[np.arange(region_codes.size), region_codes.astype(int)] = 1.0
    return out


def train_point_model(
    model: M.Model,
    train_table: FeatureTable,
    val_table: FeatureTable,
    config: TrainConfig,
) -> tuple[M.Model, History]:
    spec = config.loss
    required = spec.required_arch()
    if required is not None and required != model.variant:
        raise ConfigError(f"loss {spec.variant!r} requires the {required} architecture")
    if model.variant == "conv":
        raise ConfigError("train_point_model cannot train the conv decoder")
    if spec.variant == "multitask" and train_table.region is None:
        raise ConfigError("multitask loss requires region labels")
    if train_table.n == 0 or val_table.n == 0:
        raise DataError("empty train or validation set")

    x_train = train_table.normalized_rows()
    y_train = train_table.target
    x_val = val_table.normalized_rows()
    y_val = val_table.target
    onehot_train = _onehot(train_table.region) if train_table.region is not None else None
    dist_w = L.fit_dist_weights(y_train, spec.dist_bins) if spec.variant == "dist" else None

    ss = np.random.SeedSequence([config.seed, 3])
    shuffle_rng, dropout_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    state = AdamState()
    history = History()
    best_blob = model.clone_param_data()
    batch_size = config.resolved_batch_size(model.variant)
    is_multitask = model.variant == "multitask"
    stale = 0

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(train_table.n)
        batch_losses = []
        for b0 in range(0, train_table.n, batch_size):
            idx = order[b0 : b0 + batch_size]
            tape = Tape()
            if is_multitask:
                probs, flux, _ = M.forward_multitask(
                    model.arch, model.params, x_train[idx], tape, True, dropout_rng
                )
                loss = _point_loss_op(
                    tape, None, flux, probs, y_train[idx], onehot_train[idx], spec, dist_w
                )
            else:
                pred = M.forward_baseline(
                    model.arch, model.params, x_train[idx], tape, True, dropout_rng
                )
                loss = _point_loss_op(tape, pred, None, None, y_train[idx], None, spec, dist_w)
            _check_finite(float(loss.data), epoch, b0 // batch_size, history)
            tape.backward(loss)
            grads = {k: v.grad for k, v in model.params.items()}
            adam_step(model.params, grads, state, config)
            zero_grads(model.params.values())
            batch_losses.append(float(loss.data))

        val_pred = M.predict_point(model, x_val)
        val_loss = L.mse(y_val, val_pred)
        _check_finite(val_loss, epoch, -1, history)
        improved = history.record(epoch, float(np.mean(batch_losses)), val_loss)
        if improved:
            best_blob = model.clone_param_data()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_param_data(best_blob)
    return model, history


def _stack_targets(samples: list[SparseSample]) -> tuple[np.ndarray, np.ndarray]:
    values = np.stack([s.target.values for s in samples])
    masks = np.stack([s.target.mask for s in samples])
    return values, masks


def masked_mse(pred: np.ndarray, values: np.ndarray, masks: np.ndarray) -> float:
    return L.sparse_masked_loss(pred, values, masks, normalize=True)


def train_conv_model(
    model: M.Model,
    train_samples: list[SparseSample],
    val_samples: list[SparseSample],
    config: TrainConfig,
) -> tuple[M.Model, History]:
    spec = config.loss
    if model.variant != "conv":
        raise ConfigError("train_conv_model requires the conv decoder")
    if spec.variant != "sparse_masked":
        raise ConfigError(f"conv decoder trains with sparse_masked loss, not {spec.variant!r}")
    if not train_samples or not val_samples:
        raise DataError("empty train or validation sample list")

    norm_mean, norm_std = fit_normalization(np.stack([s.features for s in train_samples]))

    def norm_rows(samples):
        return (np.stack([s.features for s in samples]) - norm_mean) / norm_std

    x_train = norm_rows(train_samples)
    x_val = norm_rows(val_samples)
    v_train, m_train = _stack_targets(train_samples)
    v_val, m_val = _stack_targets(val_samples)

    ss = np.random.SeedSequence([config.seed, 3])
    shuffle_rng, dropout_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    state = AdamState()
    history = History()
    best_blob = model.clone_param_data()
    batch_size = config.resolved_batch_size("conv")
    stale = 0
    n = len(train_samples)

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for b0 in range(0, n, batch_size):
            idx = order[b0 : b0 + batch_size]
            tape = Tape()
            pred = M.forward_convdecoder(
                model.arch, model.params, x_train[idx], tape, True, dropout_rng
            )
            loss = L.sparse_masked_loss_op(
                tape, pred, v_train[idx], m_train[idx], spec.masked_normalize
            )
            _check_finite(float(loss.data), epoch, b0 // batch_size, history)
            tape.backward(loss)
            grads = {k: v.grad for k, v in model.params.items()}
            adam_step(model.params, grads, state, config)
            zero_grads(model.params.values())
            batch_losses.append(float(loss.data))

        val_pred = M.forward_convdecoder(model.arch, model.params, x_val).data
        val_loss = masked_mse(val_pred, v_val, m_val)
        _check_finite(val_loss, epoch, -1, history)
        improved = history.record(epoch, float(np.mean(batch_losses)), val_loss)
        if improved:
            best_blob = model.clone_param_data()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_param_data(best_blob)
    return model, history


def train_model(model: M.Model, data, config: TrainConfig) -> tuple[M.Model, History]:
    """Dispatch on model variant: point tables or sparse sample lists."""
    if model.variant == "conv":
        train_samples, val_samples = data
        return train_conv_model(model, train_samples, val_samples, config)
    train_table, val_table = data
    return train_point_model(model, train_table, val_table, config)


# ── Run config files ──────────────────────────────────────────────────

TRAIN_CONFIG_KEYS = {
    "train.lr": float,
    "train.beta1": float,
    "train.beta2": float,
    "train.eps": float,
    "train.batch_size": int,
    "train.max_epochs": int,
    "train.patience": int,
    "train.seed": int,
}

HOLDOUT_CONFIG_KEYS = {
    "holdout.sat_id": int,
    "holdout.t_start": float,
    "holdout.t_end": float,
}


def parse_config_text(text: str) -> dict[str, str]:
    """key=value lines; blank lines and ``#`` comments ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key}")
        out[key] = value.strip()
    return out


def parse_config_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_config_text(fh.read())


def train_config_from_config(cfg, seed_override: int | None = None) -> TrainConfig:
    kwargs: dict = {}
    for key, parse in TRAIN_CONFIG_KEYS.items():
        if key in cfg:
            name = key.split(".", 1)[1]
            try:
                kwargs[name] = parse(cfg[key])
            except ValueError:
                raise ConfigError(f"bad value for {key}: {cfg[key]!r}") from None
    kwargs["loss"] = LossSpec.from_config(cfg)
    try:
        config = TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if seed_override is not None:
        config = replace(config, seed=seed_override)
    return config


def write_history_csv(history: History, path):
    with open(path, "w", newline="") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, train_loss, val_loss in history.epochs:
            fh.write(f"{epoch},{train_loss!r},{val_loss!r}\n")
