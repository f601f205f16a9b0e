"""CSV ingestion, target cleaning, and feature engineering.

Input files are plain decimal CSV:

  drivers.csv       header ``t,AE,AL,AU,F107,SymH,Bx,By,Bz,Vsw,Psw,Vx,PC,NewellCF``
  observations.csv  header ``t,sat_id,mlat,mlt,eflux[,region]``, region in {SUB,AUR,POL}

Feature rows are a spatial block (sin MLT, cos MLT, scaled MLAT) followed
per driver variable by instantaneous lags at 0/-5/-10/-15 min (nearest
cadence sample) and trailing means over windows ending at the observation
time. Normalization is per-feature z-scoring; split_by_holdout refits the
statistics on the training rows only.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geomodel import (
    DRIVER_NAMES,
    MLAT_MAX,
    MLAT_MIN,
    DriverSeries,
    MagCoord,
    Observation,
    Region,
)
from .stats import percentile_linear

SPATIAL_NAMES = ("sin_mlt", "cos_mlt", "mlat_scaled")
DEFAULT_LAG_MINUTES = (0.0, 5.0, 10.0, 15.0)
DEFAULT_AVG_MINUTES = (30.0, 45.0, 60.0, 180.0, 300.0, 360.0)


@dataclass(frozen=True)
class CleaningReport:
    n_in: int
    n_dropped_outlier: int
    n_dropped_nonpositive: int
    threshold: float

    def __post_init__(self):
        if self.n_in < self.n_dropped_outlier + self.n_dropped_nonpositive:
            raise ValueError("dropped more rows than were supplied")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature layout: spatial block, then 10 history features per variable."""

    variables: tuple[str, ...] = DRIVER_NAMES
    lag_minutes: tuple[float, ...] = DEFAULT_LAG_MINUTES
    avg_minutes: tuple[float, ...] = DEFAULT_AVG_MINUTES

    def __post_init__(self):
        if len(set(self.variables)) != len(self.variables):
            raise ValueError("duplicate variable names")
        if not self.variables:
            raise ValueError("empty variable set")

    @property
    def names(self) -> tuple[str, ...]:
        out = list(SPATIAL_NAMES)
        for var in self.variables:
            out.extend(f"{var}_lag{_fmt_min(m)}" for m in self.lag_minutes)
            out.extend(f"{var}_avg{_fmt_min(m)}" for m in self.avg_minutes)
        return tuple(out)

    @property
    def global_names(self) -> tuple[str, ...]:
        return self.names[len(SPATIAL_NAMES):]

    @property
    def width(self) -> int:
        return len(SPATIAL_NAMES) + len(self.variables) * (
            len(self.lag_minutes) + len(self.avg_minutes)
        )

    @property
    def history_seconds(self) -> float:
        """How far back the driver series must reach before the first usable row."""
        return 60.0 * max(max(self.lag_minutes), max(self.avg_minutes))


def _fmt_min(minutes: float) -> str:
    return f"{minutes:g}m"


@dataclass
class FeatureTable:
    """Training-ready rows; ``rows`` is unnormalized, stats applied on demand."""

    schema: FeatureSchema
    rows: np.ndarray
    target: np.ndarray
    region: np.ndarray | None
    t: np.ndarray
    mlat: np.ndarray
    mlt: np.ndarray
    sat_id: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    n_dropped_history: int = 0

    def __post_init__(self):
        n, w = self.rows.shape
        if w != self.schema.width:
            raise ValueError("row width does not match schema")
        for name in ("target", "t", "mlat", "mlt", "sat_id"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if self.region is not None and len(self.region) != n:
            raise ValueError("region column has wrong length")
        if np.isnan(self.rows).any() or not np.all(np.isfinite(self.target)):
            raise ValueError("non-finite feature or target")
        if not np.all(self.norm_std > 0):
            raise ValueError("normalization std must be positive")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def normalized_rows(self) -> np.ndarray:
        return (self.rows - self.norm_mean) / self.norm_std


# ── CSV readers ───────────────────────────────────────────────────────

def read_drivers_csv(path) -> DriverSeries:
    """Parse a driver CSV; small gaps (one missing row) are midpoint-filled.

    The cadence is the smallest time step in the file; steps of twice the
    cadence are treated as one missing row, anything larger is an error.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "t":
            raise DataError(f"{path}: first column must be 't'")
        for name in DRIVER_NAMES:
            if name not in header:
                raise DataError(f"{path}: missing required column {name}")
        cols_idx = {name: header.index(name) for name in DRIVER_NAMES}
        t_list: list[float] = []
        data: dict[str, list[float]] = {name: [] for name in DRIVER_NAMES}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                t_list.append(float(row[0]))
                for name, i in cols_idx.items():
                    data[name].append(float(row[i]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None

    t = np.asarray(t_list, dtype=np.float64)
    if t.size < 2:
        raise DataError(f"{path}: need at least two rows")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise DataError(f"{path}: non-monotonic time")
    cadence = float(dt.min())
    cols = {name: np.asarray(v, dtype=np.float64) for name, v in data.items()}

    # Fill single-row gaps by linear interpolation; larger gaps are errors.
    if np.any(dt > cadence * 1.5):
        filled_t = [t[0]]
        filled = {name: [cols[name][0]] for name in DRIVER_NAMES}
        for i in range(1, t.size):
            step = t[i] - t[i - 1]
            ratio = step / cadence
            if abs(ratio - 1.0) < 1e-6:
                pass
            elif abs(ratio - 2.0) < 1e-6:
                filled_t.append(t[i - 1] + cadence)
                for name in DRIVER_NAMES:
                    filled[name].append(0.5 * (cols[name][i - 1] + cols[name][i]))
            else:
                raise DataError(
                    f"{path}: gap of {step:g}s exceeds one missing row at t={t[i - 1]:g}"
                )
            filled_t.append(t[i])
            for name in DRIVER_NAMES:
                filled[name].append(cols[name][i])
        t = np.asarray(filled_t)
        cols = {name: np.asarray(v) for name, v in filled.items()}
    else:
        ratio = dt / cadence
        if np.any(np.abs(ratio - np.rint(ratio)) > 1e-6):
            raise DataError(f"{path}: irregular cadence")

    return DriverSeries(t0=float(t[0]), cadence=cadence, columns=cols)


def read_observations_csv(path) -> tuple[list[Observation], int]:
    """Parse observations; returns (rows, count of dropped non-positive eflux)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        required = ["t", "sat_id", "mlat", "mlt", "eflux"]
        for name in required:
            if name not in header:
                raise DataError(f"{path}: missing required column {name}")
        idx = {name: header.index(name) for name in required}
        region_idx = header.index("region") if "region" in header else None

        out: list[Observation] = []
        n_nonpositive = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                t = float(row[idx["t"]])
                sat = int(float(row[idx["sat_id"]]))
                mlat = float(row[idx["mlat"]])
                mlt = float(row[idx["mlt"]])
                eflux = float(row[idx["eflux"]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not MLAT_MIN <= mlat <= MLAT_MAX:
                raise DataError(f"{path}:{lineno}: mlat {mlat:g} outside [45, 90]")
            if eflux <= 0:
                n_nonpositive += 1
                continue
            region = None
            if region_idx is not None and row[region_idx].strip():
                try:
                    region = Region.from_code(row[region_idx])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
            out.append(
                Observation(t=t, sat_id=sat, coord=MagCoord(mlat, mlt), eflux=eflux, region=region)
            )
    return out, n_nonpositive


# ── Cleaning and transforms ───────────────────────────────────────────

def clean_targets(
    obs: list[Observation],
    percentile: float = 99.995,
    fixed_threshold: float | None = None,
    n_dropped_nonpositive: int = 0,
) -> tuple[list[Observation], CleaningReport]:
    """Drop rows whose eflux exceeds the percentile cut (or a fixed threshold)."""
    if not obs:
        raise DataError("clean_targets: empty observation list")
    eflux = np.array([o.eflux for o in obs])
    if fixed_threshold is not None:
        threshold = float(fixed_threshold)
    else:
        threshold = percentile_linear(eflux, percentile)
    kept = [o for o, v in zip(obs, eflux) if v <= threshold]
    report = CleaningReport(
        n_in=len(obs) + n_dropped_nonpositive,
        n_dropped_outlier=len(obs) - len(kept),
        n_dropped_nonpositive=n_dropped_nonpositive,
        threshold=threshold,
    )
    return kept, report


def log_transform(eflux):
    """Base-10 log of a positive flux (scalar or array)."""
    v = np.asarray(eflux, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("log_transform requires positive flux")
    out = np.log10(v)
    return float(out) if out.ndim == 0 else out


# ── Feature construction ──────────────────────────────────────────────

def history_feature_rows(
    drivers: DriverSeries, times: np.ndarray, schema: FeatureSchema
) -> tuple[np.ndarray, np.ndarray]:
    """Lag/average features for arbitrary times; rows lacking history are flagged.

    Returns (rows [m, 10*n_vars], ok mask). Instantaneous lags take the
    nearest cadence sample; averages are the mean over driver samples in
    the half-open window (t - tau, t].
    """
    times = np.asarray(times, dtype=np.float64)
    cad = drivers.cadence
    ok = (times - schema.history_seconds >= drivers.t0 - 1e-9) & (
        times <= drivers.t_end + 1e-9
    )
    n_feat = len(schema.lag_minutes) + len(schema.avg_minutes)
    rows = np.zeros((times.size, len(schema.variables) * n_feat))

    tt = times[ok]
    if tt.size:
        lag_idx = []
        for lag_min in schema.lag_minutes:
            idx = np.rint((tt - 60.0 * lag_min - drivers.t0) / cad)
            lag_idx.append(np.clip(idx, 0, drivers.n - 1).astype(np.int64))
        win_bounds = []
        for avg_min in schema.avg_minutes:
            tau = 60.0 * avg_min
            i_end = np.floor((tt - drivers.t0) / cad + 1e-9).astype(np.int64)
            i_start = np.floor((tt - tau - drivers.t0) / cad + 1e-9).astype(np.int64) + 1
            i_start = np.clip(i_start, 0, drivers.n - 1)
            i_end = np.clip(i_end, i_start, drivers.n - 1)
            win_bounds.append((i_start, i_end))

        col = 0
        block = np.empty((tt.size, n_feat))
        for var in schema.variables:
            series = drivers.columns[var]
            padded = np.concatenate([series, [0.0]])
            j = 0
            for idx in lag_idx:
                block[:, j] = series[idx]
                j += 1
            for i_start, i_end in win_bounds:
                starts = np.empty(2 * tt.size, dtype=np.int64)
                starts[0::2] = i_start
                starts[1::2] = i_end + 1
                sums = np.add.reduceat(padded, starts)[0::2]
                block[:, j] = sums / (i_end - i_start + 1)
                j += 1
            rows[ok, col : col + n_feat] = block
            col += n_feat
    return rows, ok


def spatial_block(mlat: np.ndarray, mlt: np.ndarray) -> np.ndarray:
    ang = 2.0 * np.pi * np.asarray(mlt, dtype=np.float64) / 24.0
    scaled = (np.asarray(mlat, dtype=np.float64) - MLAT_MIN) / (MLAT_MAX - MLAT_MIN)
    return np.column_stack([np.sin(ang), np.cos(ang), scaled])


def fit_normalization(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean/std; zero-variance columns get std 1 so they map to 0."""
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def build_features(
    drivers: DriverSeries, obs: list[Observation], schema: FeatureSchema | None = None
) -> FeatureTable:
    """Assemble the feature table for a list of observations.

    Rows whose time lacks the full driver history are dropped and counted
    in ``n_dropped_history``. Region labels are kept only when every
    retained row carries one.
    """
    if schema is None:
        schema = FeatureSchema()
    if not obs:
        raise DataError("build_features: no observations")
    for var in schema.variables:
        if var not in drivers.columns:
            raise DataError(f"driver series lacks variable {var}")

    t = np.array([o.t for o in obs])
    mlat = np.array([o.coord.mlat for o in obs])
    mlt = np.array([o.coord.mlt for o in obs])
    sat = np.array([o.sat_id for o in obs], dtype=np.int64)
    target = log_transform(np.array([o.eflux for o in obs]))
    regions = [o.region for o in obs]

    hist, ok = history_feature_rows(drivers, t, schema)
    n_dropped = int((~ok).sum())
    if not ok.any():
        raise DataError("no observation has the full driver history")
    rows = np.hstack([spatial_block(mlat, mlt), hist])[ok]
    kept_regions = [r for r, keep in zip(regions, ok) if keep]
    region_arr = None
    if kept_regions and all(r is not None for r in kept_regions):
        region_arr = np.array([r.value for r in kept_regions], dtype=np.int8)

    mean, std = fit_normalization(rows)
    return FeatureTable(
        schema=schema,
        rows=rows,
        target=target[ok],
        region=region_arr,
        t=t[ok],
        mlat=mlat[ok],
        mlt=mlt[ok],
        sat_id=sat[ok],
        norm_mean=mean,
        norm_std=std,
        n_dropped_history=n_dropped,
    )


def _subset(table: FeatureTable, mask: np.ndarray, mean, std) -> FeatureTable:
    return FeatureTable(
        schema=table.schema,
        rows=table.rows[mask],
        target=table.target[mask],
        region=None if table.region is None else table.region[mask],
        t=table.t[mask],
        mlat=table.mlat[mask],
        mlt=table.mlt[mask],
        sat_id=table.sat_id[mask],
        norm_mean=mean,
        norm_std=std,
        n_dropped_history=0,
    )


def split_by_holdout(
    table: FeatureTable, sat_id: int, time_range: tuple[float, float]
) -> tuple[FeatureTable, FeatureTable]:
    """Hold out rows matching (sat_id AND t in [t_start, t_end)) for validation.

    Normalization statistics are refit on the training complement and
    shared with the validation table.
    """
    t_start, t_end = time_range
    val_mask = (table.sat_id == sat_id) & (table.t >= t_start) & (table.t < t_end)
    if not val_mask.any():
        raise DataError("holdout selection matches no rows")
    if val_mask.all():
        raise DataError("holdout selection leaves no training rows")
    mean, std = fit_normalization(table.rows[~val_mask])
    return _subset(table, ~val_mask, mean, std), _subset(table, val_mask, mean, std)


def filter_by_region(table: FeatureTable, region: Region) -> FeatureTable:
    if table.region is None:
        raise DataError("table has no region labels")
    mask = table.region == region.value
    return _subset(table, mask, table.norm_mean, table.norm_std)


# ── Binary feature cache (magic AFT1) ─────────────────────────────────

_MAGIC = b"AFT1"


def _w_str(buf: bytearray, s: str):
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for cache format")
    buf += struct.pack("<H", len(raw)) + raw


def _r_str(view: memoryview, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", view, off)
    off += 2
    return bytes(view[off : off + n]).decode("utf-8"), off + n


def write_table_cache(table: FeatureTable, path):
    """Serialize a FeatureTable: header, schema, f32 rows, then the
    target/region/t/coord/sat_id/normalization blocks in field order."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<II", table.n, table.schema.width)
    names = table.schema.names
    buf += struct.pack("<H", len(names))
    for name in names:
        _w_str(buf, name)
    buf += struct.pack("<H", len(table.schema.variables))
    for var in table.schema.variables:
        _w_str(buf, var)
    buf += struct.pack("<B", len(table.schema.lag_minutes))
    buf += np.asarray(table.schema.lag_minutes, dtype="<f8").tobytes()
    buf += struct.pack("<B", len(table.schema.avg_minutes))
    buf += np.asarray(table.schema.avg_minutes, dtype="<f8").tobytes()

    buf += table.rows.astype("<f4").tobytes()
    buf += table.target.astype("<f8").tobytes()
    if table.region is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<B", 1)
        buf += table.region.astype("<i1").tobytes()
    buf += table.t.astype("<f8").tobytes()
    buf += table.mlat.astype("<f8").tobytes()
    buf += table.mlt.astype("<f8").tobytes()
    buf += table.sat_id.astype("<u2").tobytes()
    buf += table.norm_mean.astype("<f8").tobytes()
    buf += table.norm_std.astype("<f8").tobytes()
    buf += struct.pack("<I", table.n_dropped_history)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def read_table_cache(path) -> FeatureTable:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    try:
        if bytes(view[:4]) != _MAGIC:
            raise DataError(f"{path}: bad cache magic")
        off = 4
        n, width = struct.unpack_from("<II", view, off)
        off += 8
        (n_names,) = struct.unpack_from("<H", view, off)
        off += 2
        names = []
        for _ in range(n_names):
            s, off = _r_str(view, off)
            names.append(s)
        (n_vars,) = struct.unpack_from("<H", view, off)
        off += 2
        variables = []
        for _ in range(n_vars):
            s, off = _r_str(view, off)
            variables.append(s)
        (n_lags,) = struct.unpack_from("<B", view, off)
        off += 1
        lags = np.frombuffer(view, dtype="<f8", count=n_lags, offset=off)
        off += 8 * n_lags
        (n_wins,) = struct.unpack_from("<B", view, off)
        off += 1
        wins = np.frombuffer(view, dtype="<f8", count=n_wins, offset=off)
        off += 8 * n_wins
        schema = FeatureSchema(
            variables=tuple(variables),
            lag_minutes=tuple(float(x) for x in lags),
            avg_minutes=tuple(float(x) for x in wins),
        )
        if list(schema.names) != names or schema.width != width:
            raise DataError(f"{path}: schema does not match stored names")

        rows = np.frombuffer(view, dtype="<f4", count=n * width, offset=off)
        off += 4 * n * width
        rows = rows.reshape(n, width).astype(np.float64)
        target = np.frombuffer(view, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        (has_region,) = struct.unpack_from("<B", view, off)
        off += 1
        region = None
        if has_region:
            region = np.frombuffer(view, dtype="<i1", count=n, offset=off).copy()
            off += n
        t = np.frombuffer(view, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        mlat = np.frombuffer(view, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        mlt = np.frombuffer(view, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        sat = np.frombuffer(view, dtype="<u2", count=n, offset=off).astype(np.int64)
        off += 2 * n
        mean = np.frombuffer(view, dtype="<f8", count=width, offset=off).copy()
        off += 8 * width
        std = np.frombuffer(view, dtype="<f8", count=width, offset=off).copy()
        off += 8 * width
        (n_dropped,) = struct.unpack_from("<I", view, off)
        off += 4
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt cache ({exc})") from None
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in cache")
    return FeatureTable(
        schema=schema,
        rows=rows,
        target=target,
        region=region,
        t=t,
        mlat=mlat,
        mlt=mlt,
        sat_id=sat,
        norm_mean=mean,
        norm_std=std,
        n_dropped_history=int(n_dropped),
    )


FEATURES_CONFIG_KEYS = {
    "features.percentile": float,
    "features.threshold": float,
    "features.variables": str,
}


def schema_from_config(cfg) -> FeatureSchema:
    from .errors import ConfigError

    if "features.variables" in cfg:
        variables = tuple(v.strip() for v in cfg["features.variables"].split(",") if v.strip())
        unknown = [v for v in variables if v not in DRIVER_NAMES]
        if unknown:
            raise ConfigError(f"unknown driver variables: {', '.join(unknown)}")
        return FeatureSchema(variables=variables)
    return FeatureSchema()
