"""Station/radar ingestion, gridding, temporal resampling, windowing and the
synthetic scene generator used for desk-scale experiments."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
PWV_MAX_MM = 150.0
RADAR_CLIP = 128.0
PWV_SCALE = 80.0
PWV_CLIP = 1.5
DEFAULT_CADENCE = 600
MAX_GAP = 3600

UNITS = ("mm", "mm/h", "normalized")


class DataError(ValueError):
    pass


class FGridError(DataError):
    pass


# -- records and grids ---------------------------------------------------------

@dataclass(frozen=True)
class StationRecord:
    station_id: str
    lat: float
    lon: float
    epoch: int
    pwv: float


@dataclass
class StationSeries:
    station_id: str
    lat: float
    lon: float
    epochs: np.ndarray
    pwv: np.ndarray

    def records_at(self, epoch: int) -> list[StationRecord]:
        hit = np.nonzero(self.epochs == epoch)[0]
        return [StationRecord(self.station_id, self.lat, self.lon, int(epoch), float(self.pwv[i])) for i in hit]


@dataclass(frozen=True)
class GridSpec:
    lat_min: float = 32.0
    lat_max: float = 42.24
    lon_min: float = -93.49
    lon_max: float = -83.25
    n: int = 64

    def __post_init__(self):
        if not self.lat_max > self.lat_min or not self.lon_max > self.lon_min:
            raise DataError(f"degenerate grid bounds {self}")
        if self.n < 2:
            raise DataError("grid extent must be at least 2")

    @property
    def dlat(self) -> float:
        return (self.lat_max - self.lat_min) / self.n

    @property
    def dlon(self) -> float:
        return (self.lon_max - self.lon_min) / self.n

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Latitude (rows, north to south) and longitude (columns) of pixel centres."""
        lats = self.lat_max - (np.arange(self.n) + 0.5) * self.dlat
        lons = self.lon_min + (np.arange(self.n) + 0.5) * self.dlon
        return lats, lons

    def to_latlon(self, row: np.ndarray, col: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.lat_max - (np.asarray(row) + 0.5) * self.dlat, self.lon_min + (np.asarray(col) + 0.5) * self.dlon

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max


@dataclass
class FrameSequence:
    """Time-ordered stack of n x n grids.

    ``missing`` flags frames declared absent (their values are NaN).
    """

    frames: np.ndarray
    epochs: np.ndarray
    cadence: int = DEFAULT_CADENCE
    units: str = "mm/h"
    missing: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.epochs = np.asarray(self.epochs, dtype=np.int64)
        if self.frames.ndim != 3:
            raise DataError(f"frames must be (T, n, n), got {self.frames.shape}")
        if len(self.frames) != len(self.epochs):
            raise DataError(f"{len(self.frames)} frames but {len(self.epochs)} epochs")
        if len(self.epochs) > 1 and np.any(np.diff(self.epochs) <= 0):
            raise DataError("epochs must be strictly increasing")
        if self.units not in UNITS:
            raise DataError(f"unknown units {self.units!r}")
        if self.missing is None:
            self.missing = np.zeros(len(self.epochs), dtype=bool)

    def __len__(self) -> int:
        return len(self.epochs)

    def slice(self, start: int, stop: int) -> "FrameSequence":
        return FrameSequence(self.frames[start:stop], self.epochs[start:stop], self.cadence, self.units,
                             self.missing[start:stop])


# -- station CSV -------------------------------------------------------------------

CSV_HEADER = ["station_id", "lat", "lon", "epoch", "pwv_mm"]


def load_station_csv(path, grid: GridSpec | None = None) -> tuple[list[StationRecord], int]:
    """Parse a station table; returns the records and how many rows were dropped.

    Rows whose PWV is non-finite or outside [0, 150] mm, or whose location is
    outside ``grid`` when given, are dropped. Unparseable rows raise with the
    offending line number.
    """
    records, dropped = [], 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                sid = row[0].strip()
                lat, lon, pwv = float(row[1]), float(row[2]), float(row[4])
                epoch = int(row[3])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(pwv) or not 0.0 <= pwv <= PWV_MAX_MM:
                dropped += 1
                continue
            if grid is not None and not grid.contains(lat, lon):
                dropped += 1
                continue
            records.append(StationRecord(sid, lat, lon, epoch, pwv))
    if dropped:
        logger.info("%s: dropped %d rows", path, dropped)
    return records, dropped


def write_station_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.station_id, repr(float(r.lat)), repr(float(r.lon)), int(r.epoch), repr(float(r.pwv))])


# -- spatial interpolation -------------------------------------------------------------

def _unit_vectors(lat, lon) -> np.ndarray:
    la, lo = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)


def interpolate_pwv(records, spec: GridSpec, k: int = 4, power: float = 2.0) -> np.ndarray:
    """Inverse-distance-weighted gridding over the k nearest stations.

    Distances are great-circle. A pixel whose nearest station lies within half
    a cell (along a meridian) takes that station's value exactly.
    """
    if not records:
        raise DataError("interpolate_pwv needs at least one station")
    lat = np.array([r.lat for r in records])
    lon = np.array([r.lon for r in records])
    val = np.array([r.pwv for r in records], dtype=np.float64)
    k = min(k, len(records))
    tree = cKDTree(_unit_vectors(lat, lon))
    plat, plon = spec.pixel_centers()
    glat, glon = np.meshgrid(plat, plon, indexing="ij")
    chord, idx = tree.query(_unit_vectors(glat, glon).reshape(-1, 3), k=k)
    chord, idx = chord.reshape(-1, k), idx.reshape(-1, k)
    if k == 1:
        return val[idx[:, 0]].reshape(spec.n, spec.n)
    arc = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0)) * EARTH_RADIUS_KM
    half_cell = 0.5 * np.radians(spec.dlat) * EARTH_RADIUS_KM
    weights = 1.0 / np.maximum(arc, 1e-12) ** power
    out = (weights * val[idx]).sum(axis=1) / weights.sum(axis=1)
    exact = arc[:, 0] < half_cell
    out[exact] = val[idx[exact, 0]]
    return out.reshape(spec.n, spec.n)


def screen_stations(stations: list[StationSeries], epochs, min_availability: float = 0.9) -> list[StationSeries]:
    """Keep stations reporting a finite value at no less than ``min_availability`` of ``epochs``."""
    epochs = np.asarray(epochs)
    kept = []
    for s in stations:
        have = np.isin(epochs, s.epochs[np.isfinite(s.pwv)]).mean() if len(epochs) else 0.0
        if have >= min_availability:
            kept.append(s)
    return kept


def group_stations(records: list[StationRecord]) -> list[StationSeries]:
    by_id: dict[str, list[StationRecord]] = {}
    for r in records:
        by_id.setdefault(r.station_id, []).append(r)
    out = []
    for sid in sorted(by_id):
        rs = sorted(by_id[sid], key=lambda r: r.epoch)
        out.append(StationSeries(sid, rs[0].lat, rs[0].lon, np.array([r.epoch for r in rs], dtype=np.int64),
                                 np.array([r.pwv for r in rs])))
    return out


def grid_station_series(stations: list[StationSeries], epochs, spec: GridSpec, k: int = 4,
                        carry_forward: int = MAX_GAP) -> FrameSequence:
    """Interpolate station series onto the grid at each epoch.

    A station without a value at an epoch reuses its latest value from at most
    ``carry_forward`` seconds earlier. Epochs with no usable station become
    missing frames.
    """
    frames, missing = [], []
    for t in epochs:
        recs = []
        for s in stations:
            ok = (s.epochs <= t) & (s.epochs >= t - carry_forward) & np.isfinite(s.pwv)
            if ok.any():
                j = np.nonzero(ok)[0][-1]
                recs.append(StationRecord(s.station_id, s.lat, s.lon, int(t), float(s.pwv[j])))
        if recs:
            frames.append(interpolate_pwv(recs, spec, k=k))
            missing.append(False)
        else:
            frames.append(np.full((spec.n, spec.n), np.nan))
            missing.append(True)
    return FrameSequence(np.array(frames), np.asarray(epochs), units="mm", missing=np.array(missing))


# -- temporal ------------------------------------------------------------------

def resample_temporal(seq: FrameSequence, cadence: int = DEFAULT_CADENCE, max_gap: int = MAX_GAP) -> FrameSequence:
    """Nearest-frame resampling onto ``anchor + k * cadence``.

    Target epochs that fall inside a source gap longer than ``max_gap`` seconds
    are declared missing.
    """
    if len(seq) == 0:
        raise DataError("cannot resample an empty sequence")
    src = seq.epochs
    if len(src) > 1:
        step = int(np.min(np.diff(src)))
        if cadence % step and step % cadence:
            raise DataError(f"source cadence {step}s and target {cadence}s are not commensurate")
    anchor = int(src[0])
    n_out = (int(src[-1]) - anchor) // cadence + 1
    targets = anchor + cadence * np.arange(n_out, dtype=np.int64)
    nxt = np.clip(np.searchsorted(src, targets, side="left"), 0, len(src) - 1)
    prv = np.clip(np.searchsorted(src, targets, side="right") - 1, 0, len(src) - 1)
    pick = np.where(np.abs(src[nxt] - targets) < np.abs(targets - src[prv]), nxt, prv)
    exact = src[pick] == targets
    gap = (src[nxt] - src[prv]) > max_gap
    missing = (gap & ~exact) | seq.missing[pick]
    frames = seq.frames[pick].astype(np.float64, copy=True)
    frames[missing] = np.nan
    return FrameSequence(frames, targets, cadence, seq.units, missing)


# -- normalization ---------------------------------------------------------------

_LOG_CLIP = math.log1p(RADAR_CLIP)


def normalize_radar(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DataError("radar intensities must be non-negative")
    return np.log1p(np.minimum(x, RADAR_CLIP)) / _LOG_CLIP


def denormalize_radar(y):
    return np.expm1(np.asarray(y, dtype=np.float64) * _LOG_CLIP)


def normalize_pwv(x):
    return np.clip(np.asarray(x, dtype=np.float64) / PWV_SCALE, 0.0, PWV_CLIP)


# -- windows ---------------------------------------------------------------------

@dataclass
class SampleWindow:
    x_pwv: FrameSequence
    x_radar_hist: FrameSequence
    x_radar_prior: FrameSequence
    target: FrameSequence
    split: str | None = None

    @property
    def issue_epoch(self) -> int:
        return int(self.x_radar_hist.epochs[-1])


PriorSource = Callable[[FrameSequence, int], FrameSequence] | Mapping[int, FrameSequence]


def assign_split(epoch: int, splits: Mapping[str, tuple[int, int]] | None) -> str | None:
    if not splits:
        return None
    for name, (lo, hi) in splits.items():
        if lo <= epoch < hi:
            return name
    return None


def make_windows(radar: FrameSequence, pwv: FrameSequence | None, prior: PriorSource | None,
                 t_in: int, t_out: int, splits: Mapping[str, tuple[int, int]] | None = None,
                 stride: int = 1) -> list[SampleWindow]:
    """Cut aligned sequences into (history, prior, target) windows.

    ``prior`` is either a callable ``(hist, t_out) -> FrameSequence`` or a
    mapping from issue epoch to a stored prior sequence. Windows touching a
    missing frame are skipped, as are windows whose split (by issue epoch) is
    unassigned when ``splits`` is given.
    """
    if pwv is not None and not np.array_equal(radar.epochs, pwv.epochs):
        raise DataError("radar and PWV epochs are not aligned")
    bad = radar.missing.copy()
    if pwv is not None:
        bad |= pwv.missing
    windows = []
    for i in range(0, len(radar) - t_in - t_out + 1, stride):
        if bad[i:i + t_in + t_out].any():
            continue
        hist = radar.slice(i, i + t_in)
        target = radar.slice(i + t_in, i + t_in + t_out)
        split = assign_split(int(hist.epochs[-1]), splits)
        if splits and split is None:
            continue
        if prior is None:
            # zeros stand in for variants that never read the prior branch
            pri = FrameSequence(np.zeros_like(target.frames), target.epochs, target.cadence, target.units)
        elif callable(prior):
            pri = prior(hist, t_out)
        else:
            pri = prior.get(int(hist.epochs[-1]))
            if pri is None:
                continue
        if not np.array_equal(pri.epochs, target.epochs):
            raise DataError(f"prior epochs do not match target epochs at window {i}")
        x_pwv = pwv.slice(i, i + t_in) if pwv is not None else FrameSequence(
            np.zeros_like(hist.frames), hist.epochs, hist.cadence, "mm")
        windows.append(SampleWindow(x_pwv, hist, pri, target, split))
    return windows


# -- fgrid format ----------------------------------------------------------------

FGRID_MAGIC = b"FGRD"
FGRID_VERSION = 1
_FGRID_HEAD = struct.Struct("<4sIBIqB")
_UNIT_TAGS = {"mm": 0, "mm/h": 1, "normalized": 2}
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def save_grid(path, grid: np.ndarray, epoch: int = 0, units: str = "mm/h") -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise FGridError(f"fgrid holds square grids, got {grid.shape}")
    dt = grid.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        dt = np.dtype("<f8")
    head = _FGRID_HEAD.pack(FGRID_MAGIC, FGRID_VERSION, _DTYPE_TAGS[dt], grid.shape[0], int(epoch), _UNIT_TAGS[units])
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(grid, dtype=dt).tobytes())


def load_grid(path) -> tuple[np.ndarray, int, str]:
    """Returns (grid, epoch, units)."""
    raw = Path(path).read_bytes()
    if len(raw) < _FGRID_HEAD.size:
        raise FGridError(f"{path}: truncated header")
    magic, version, dtag, n, epoch, utag = _FGRID_HEAD.unpack_from(raw)
    if magic != FGRID_MAGIC:
        raise FGridError(f"{path}: bad magic {magic!r}")
    if version != FGRID_VERSION:
        raise FGridError(f"{path}: unsupported version {version}")
    dtypes = {v: k for k, v in _DTYPE_TAGS.items()}
    units = {v: k for k, v in _UNIT_TAGS.items()}
    if dtag not in dtypes or utag not in units:
        raise FGridError(f"{path}: bad dtype/unit tag")
    dt = dtypes[dtag]
    need = _FGRID_HEAD.size + n * n * dt.itemsize
    if len(raw) != need:
        raise FGridError(f"{path}: payload is {len(raw) - _FGRID_HEAD.size} bytes, expected {need - _FGRID_HEAD.size}")
    grid = np.frombuffer(raw, dtype=dt, offset=_FGRID_HEAD.size).reshape(n, n).copy()
    return grid, int(epoch), units[utag]


def save_sequence(directory, seq: FrameSequence) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for frame, epoch, miss in zip(seq.frames, seq.epochs, seq.missing):
        if miss:
            continue
        p = directory / f"{int(epoch)}.fgrid"
        save_grid(p, frame, int(epoch), seq.units)
        paths.append(p)
    return paths


def load_sequence(directory, cadence: int = DEFAULT_CADENCE) -> FrameSequence:
    """Load ``<epoch>.fgrid`` files; epochs absent on the regular cadence become missing frames."""
    files = sorted(Path(directory).glob("*.fgrid"), key=lambda p: int(p.stem))
    if not files:
        raise DataError(f"no fgrid files in {directory}")
    loaded = [load_grid(p) for p in files]
    epochs = np.array([e for _, e, _ in loaded], dtype=np.int64)
    units = loaded[0][2]
    n = loaded[0][0].shape[0]
    full = epochs[0] + cadence * np.arange((epochs[-1] - epochs[0]) // cadence + 1, dtype=np.int64)
    frames = np.full((len(full), n, n), np.nan)
    missing = np.ones(len(full), dtype=bool)
    pos = np.searchsorted(full, epochs)
    if np.any(full[np.clip(pos, 0, len(full) - 1)] != epochs):
        raise DataError(f"{directory}: epochs are off the {cadence}s cadence")
    for j, (g, _, _) in zip(pos, loaded):
        frames[j] = g
        missing[j] = False
    return FrameSequence(frames, full, cadence, units, missing)


# -- synthetic scenes -------------------------------------------------------------

@dataclass
class SynthParams:
    n: int = 32
    frames: int = 24
    n_cells: int = 6
    velocity: tuple[float, float] = (1.0, 0.5)
    random_direction: bool = True
    cell_sigma: float = 2.5
    amp_range: tuple[float, float] = (2.0, 8.0)
    growth: float = 0.25
    moisture_scale: float = 6.0
    moisture_drift: float = 0.25
    n_stations: int = 40
    station_noise: float = 1.0
    start_epoch: int = 1_677_628_800  # 2023-03-01 00:00 UTC
    cadence: int = DEFAULT_CADENCE

    def validate(self) -> None:
        if self.n < 4 or self.frames < 1 or self.n_cells < 1 or self.n_stations < 1:
            raise DataError(f"invalid synthetic scene parameters: {self}")
        if self.cell_sigma <= 0 or self.station_noise < 0:
            raise DataError("cell_sigma must be positive and station_noise non-negative")


@dataclass
class Scene:
    radar: FrameSequence
    stations: list[StationSeries]
    moisture: np.ndarray
    amplitudes: np.ndarray
    grid: GridSpec = field(default_factory=GridSpec)


def _smooth_field(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    """Zero-mean, unit-peak random field with correlation length ``scale`` pixels (periodic)."""
    noise = rng.normal(size=(n, n))
    k = np.fft.fftfreq(n)
    kk = k[:, None] ** 2 + k[None, :] ** 2
    spec = np.fft.fft2(noise) * np.exp(-0.5 * kk * (2 * np.pi * scale) ** 2)
    f = np.real(np.fft.ifft2(spec))
    f -= f.mean()
    return f / (np.abs(f).max() + 1e-12)


def _shift_periodic(f: np.ndarray, dx: float, dy: float) -> np.ndarray:
    n = f.shape[0]
    k = np.fft.fftfreq(n)
    phase = np.exp(-2j * np.pi * (k[None, :] * dx + k[:, None] * dy))
    return np.real(np.fft.ifft2(np.fft.fft2(f) * phase))


def synth_scene(seed: int, params: SynthParams | None = None, grid: GridSpec | None = None) -> Scene:
    """Generate rain cells whose growth is driven by a latent moisture field.

    Cells are Gaussian blobs moving with one constant velocity; each amplitude
    obeys ``dA/dt = growth * (m(centre) - 0.5) * A``. Stations sample the
    moisture field (as 20 + 50 m mm) with Gaussian noise. All randomness comes
    from ``seed``.
    """
    p = params or SynthParams()
    p.validate()
    rng = np.random.default_rng(seed)
    n, T = p.n, p.frames
    grid = grid or GridSpec(n=n)
    if grid.n != n:
        raise DataError("grid extent and scene extent differ")

    vx, vy = p.velocity
    if p.random_direction:
        speed = math.hypot(vx, vy)
        ang = rng.uniform(0, 2 * math.pi)
        vx, vy = speed * math.cos(ang), speed * math.sin(ang)
    base = rng.uniform(0.3, 0.7)
    pattern = _smooth_field(rng, n, p.moisture_scale)
    mdx, mdy = p.moisture_drift * vx, p.moisture_drift * vy
    moisture = np.empty((T, n, n))
    for t in range(T):
        moisture[t] = np.clip(base + 0.45 * _shift_periodic(pattern, mdx * t, mdy * t), 0.0, 1.0)

    # cells start spread over the domain extended upstream so some drift in
    span = max(abs(vx), abs(vy)) * T
    x0 = rng.uniform(-span * (vx > 0), n + span * (vx < 0), size=p.n_cells)
    y0 = rng.uniform(-span * (vy > 0), n + span * (vy < 0), size=p.n_cells)
    x0 = np.clip(x0, -span, n + span)
    y0 = np.clip(y0, -span, n + span)
    amp = rng.uniform(*p.amp_range, size=p.n_cells)
    sig = p.cell_sigma * rng.uniform(0.8, 1.25, size=p.n_cells)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    frames = np.empty((T, n, n))
    amps = np.empty((T, p.n_cells))
    for t in range(T):
        cx, cy = x0 + vx * t, y0 + vy * t
        amps[t] = amp
        field_ = np.zeros((n, n))
        for j in range(p.n_cells):
            field_ += amp[j] * np.exp(-((xx - cx[j]) ** 2 + (yy - cy[j]) ** 2) / (2 * sig[j] ** 2))
        frames[t] = np.minimum(field_, RADAR_CLIP)
        if p.growth:
            ix = np.clip(np.rint(cx).astype(int), 0, n - 1)
            iy = np.clip(np.rint(cy).astype(int), 0, n - 1)
            m_c = moisture[t, iy, ix]
            amp = amp * np.exp(p.growth * (m_c - 0.5))

    epochs = p.start_epoch + p.cadence * np.arange(T, dtype=np.int64)
    radar = FrameSequence(frames, epochs, p.cadence, "mm/h")

    srow = rng.uniform(0, n - 1, size=p.n_stations)
    scol = rng.uniform(0, n - 1, size=p.n_stations)
    slat, slon = grid.to_latlon(srow, scol)
    ir, ic = np.rint(srow).astype(int), np.rint(scol).astype(int)
    noise = rng.normal(0.0, p.station_noise, size=(p.n_stations, T)) if p.station_noise else np.zeros((p.n_stations, T))
    stations = []
    for s in range(p.n_stations):
        vals = np.clip(20.0 + 50.0 * moisture[:, ir[s], ic[s]] + noise[s], 0.0, PWV_MAX_MM)
        stations.append(StationSeries(f"S{s:04d}", float(slat[s]), float(slon[s]), epochs.copy(), vals))
    return Scene(radar, stations, moisture, amps, grid)


def scene_pwv(scene: Scene, k: int = 4) -> FrameSequence:
    return grid_station_series(scene.stations, scene.radar.epochs, scene.grid, k=k)
