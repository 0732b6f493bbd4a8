"""Measured-CSI simulation, phase calibration, features and fingerprint datasets.

Feature layouts
---------------
With ``S = N_R * N_T`` receive streams (stream index ``rx * N_T + tx``):

* MLP vector, length ``2 * N_sc * S``: window-averaged amplitudes in
  ``[subcarrier][stream]`` order, followed by window-averaged calibrated
  phases in the same order.
* CNN tensor, shape ``(2 * S, N_sc, N_win)``: amplitude channels then phase
  channels; rows are subcarriers, columns the symbols of the window in
  arrival order.

Raw features are stored; standardization statistics, fitted on the training
set, travel with the dataset and are applied on the way into a network.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ChecksumMismatchError,
    FileFormatError,
    InvalidConfigError,
    UncalibratedInputError,
    VersionMismatchError,
    WindowLengthError,
)
from .geometry import Area, Location, Scene, channel_response, path_params_from_geometry

# RNG stream tags keep train, test and augmentation draws independent.
STREAM_TRAIN = 0
STREAM_TEST = 1
STREAM_AUGMENT = 2


@dataclass(frozen=True)
class MeasurementModel:
    """Per-packet impairments: AWGN, receiver time lag and a random common phase.

    ``noise_psd`` is the complex noise power per CSI entry. Time lags are
    uniform over ``timing_offset_range`` (samples); phase offsets uniform
    over ``phase_offset_range`` (radians).
    """

    noise_psd: float = 0.01
    timing_offset_range: tuple = (-2.0, 2.0)
    phase_offset_range: tuple = (-math.pi, math.pi)
    rng_seed: int = 0
    stream_prefix: tuple = ()         # e.g. (ap_index,) for per-AP streams

    def __post_init__(self):
        if self.noise_psd < 0:
            raise InvalidConfigError("noise_psd must be >= 0")
        for rng in (self.timing_offset_range, self.phase_offset_range):
            if len(rng) != 2 or not all(math.isfinite(v) for v in rng) or rng[0] > rng[1]:
                raise InvalidConfigError(f"bad range {rng}")
        object.__setattr__(self, "timing_offset_range", tuple(map(float, self.timing_offset_range)))
        object.__setattr__(self, "phase_offset_range", tuple(map(float, self.phase_offset_range)))

    @classmethod
    def from_snr(cls, snr_db: float, **kwargs) -> "MeasurementModel":
        return cls(noise_psd=10.0 ** (-snr_db / 10.0), **kwargs)

    def rng(self, *stream) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.rng_seed, *self.stream_prefix, *stream]))


@dataclass
class CsiRecord:
    amplitudes: np.ndarray            # (N_sc, S)
    phases_raw: np.ndarray            # (N_sc, S), wrapped to (-pi, pi]
    symbol_index: int = 0
    true_location: Location | None = None
    phases_calibrated: np.ndarray | None = None
    delta_hat: float | None = None
    unwrap_warning: bool = False


@dataclass(frozen=True)
class RpGrid:
    rp_locations: tuple
    grid_spacing: float
    area: Area

    def __post_init__(self):
        locs = tuple(Location(*map(float, p)) for p in self.rp_locations)
        object.__setattr__(self, "rp_locations", locs)
        if not locs:
            raise InvalidConfigError("grid needs at least one RP")
        bad = [p for p in locs if not self.area.contains(p)]
        if bad:
            raise InvalidConfigError(f"RPs outside the area: {bad[:3]}")

    @classmethod
    def regular(cls, area: Area, spacing: float) -> "RpGrid":
        """Largest regular lattice with the given pitch, centered in ``area``."""
        if not spacing > 0:
            raise InvalidConfigError("grid spacing must be positive")
        w, h = area.x_max - area.x_min, area.y_max - area.y_min
        nx = int(math.floor(w / spacing + 1e-9)) + 1
        ny = int(math.floor(h / spacing + 1e-9)) + 1
        x0 = area.x_min + (w - (nx - 1) * spacing) / 2
        y0 = area.y_min + (h - (ny - 1) * spacing) / 2
        pts = [Location(x0 + ix * spacing, y0 + iy * spacing)
               for iy in range(ny) for ix in range(nx)]
        return cls(tuple(pts), float(spacing), area)

    @property
    def n_rp(self) -> int:
        return len(self.rp_locations)

    def as_array(self) -> np.ndarray:
        return np.array(self.rp_locations, dtype=float)


@dataclass
class FeatureSample:
    mlp_vector: np.ndarray
    label: Location
    cnn_tensor: np.ndarray | None = None
    rp_index: int | None = None
    generation_location: Location | None = None


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, axis=0) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=axis)
        std = x.std(axis=axis)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


@dataclass
class FingerprintDataset:
    samples: list
    grid: RpGrid
    provenance: str = "simulated"
    window_size: int = 30
    mlp_scaler: Standardizer | None = None
    cnn_scaler: Standardizer | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def has_cnn(self) -> bool:
        return bool(self.samples) and self.samples[0].cnn_tensor is not None

    def mlp_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0))
        return np.stack([s.mlp_vector for s in self.samples])

    def cnn_array(self) -> np.ndarray:
        return np.stack([s.cnn_tensor for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=float).reshape(-1, 2)

    def rp_indices(self) -> np.ndarray:
        return np.array([-1 if s.rp_index is None else s.rp_index for s in self.samples])

    def generation_locations(self) -> np.ndarray:
        return np.array([s.generation_location or s.label for s in self.samples],
                        dtype=float).reshape(-1, 2)

    def fit_scalers(self) -> "FingerprintDataset":
        """Fit per-feature standardization on this (training) set, in place."""
        if self.samples:
            self.mlp_scaler = Standardizer.fit(self.mlp_matrix())
            if self.has_cnn:
                self.cnn_scaler = Standardizer.fit(self.cnn_array(), axis=0)
        return self

    def inputs(self, kind: str = "mlp", scalers: "FingerprintDataset | None" = None) -> np.ndarray:
        """Standardized network inputs, using ``scalers``' statistics if given."""
        src = scalers if scalers is not None else self
        if kind == "mlp":
            x = self.mlp_matrix()
            return src.mlp_scaler.transform(x) if src.mlp_scaler is not None else x
        x = self.cnn_array()
        return src.cnn_scaler.transform(x) if src.cnn_scaler is not None else x


# -- simulation ---------------------------------------------------------------

def simulate_csi_arrays(scene: Scene, model: MeasurementModel, n_symbols: int,
                        rng: np.random.Generator | None = None, paths=None):
    """Vectorized measurement simulation.

    Returns ``(amplitudes, raw_phases, deltas, offsets)`` with the first two
    of shape ``(N, N_sc, S)``.
    """
    if n_symbols < 1:
        raise InvalidConfigError("n_symbols must be >= 1")
    if rng is None:
        rng = model.rng()
    if paths is None:
        paths = path_params_from_geometry(scene)
    resp = channel_response(scene, paths)
    nsc = resp.shape[0]
    h = np.broadcast_to(resp.reshape(nsc, -1), (n_symbols, nsc, resp.shape[1] * resp.shape[2]))
    noise = (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    meas = h + noise * math.sqrt(model.noise_psd / 2)
    deltas = rng.uniform(*model.timing_offset_range, size=n_symbols)
    offsets = rng.uniform(*model.phase_offset_range, size=n_symbols)
    i = np.arange(nsc)
    corrupt = (-2 * np.pi * i[None, :] * deltas[:, None] / scene.ofdm.fft_size
               + offsets[:, None])
    meas = meas * np.exp(1j * corrupt)[:, :, None]
    return np.abs(meas), np.angle(meas), deltas, offsets


def simulate_csi(scene: Scene, model: MeasurementModel, n_symbols: int,
                 rng: np.random.Generator | None = None) -> list[CsiRecord]:
    amps, phases, _, _ = simulate_csi_arrays(scene, model, n_symbols, rng)
    return [CsiRecord(amps[n], phases[n], n, scene.target) for n in range(n_symbols)]


# -- calibration --------------------------------------------------------------

UNWRAP_TOL = 0.1   # rad


def calibrate_phase_arrays(phases: np.ndarray, n_fft: int = 64):
    """Remove the best linear phase in subcarrier index from ``(..., N_sc, S)`` phases.

    Phases are unwrapped across streams at subcarrier 0 and then along the
    subcarrier axis, so a line common to all streams is fitted. Returns
    ``(calibrated, delta_hat, unwrap_ok)``.
    """
    p = np.array(phases, dtype=float, copy=True)
    if p.shape[-2] < 2:
        raise InvalidConfigError("calibration needs at least two subcarriers")
    p[..., 0, :] = np.unwrap(p[..., 0, :], axis=-1)
    p = np.unwrap(p, axis=-2)
    nsc = p.shape[-2]
    i = np.arange(nsc, dtype=float)
    ic = i - i.mean()
    per_sc = p.mean(axis=-1)                                  # (..., N_sc)
    slope = (per_sc @ ic) / (ic @ ic)
    intercept = per_sc.mean(axis=-1) - slope * i.mean()
    calibrated = p - (slope[..., None] * i + intercept[..., None])[..., None]
    delta_hat = -slope * n_fft / (2 * np.pi)
    # np.unwrap always leaves jumps <= pi; a jump near pi means the branch
    # choice was a coin toss and the fitted line is unreliable
    jumps = np.abs(np.diff(p, axis=-2))
    unwrap_ok = np.all(jumps <= np.pi - UNWRAP_TOL, axis=(-2, -1))
    return calibrated, delta_hat, unwrap_ok


def calibrate_phase(record: CsiRecord, n_fft: int = 64) -> CsiRecord:
    cal, delta_hat, ok = calibrate_phase_arrays(record.phases_raw, n_fft)
    return replace(record, phases_calibrated=cal, delta_hat=float(delta_hat),
                   unwrap_warning=not bool(ok))


# -- features -----------------------------------------------------------------

def _window_arrays(records: Sequence[CsiRecord]):
    if len(records) == 0:
        raise InvalidConfigError("empty window")
    if any(r.phases_calibrated is None for r in records):
        raise UncalibratedInputError("records must be phase-calibrated first")
    amps = np.stack([r.amplitudes for r in records])
    phases = np.stack([r.phases_calibrated for r in records])
    return amps, phases


def mlp_vector_from_arrays(amps: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """``(..., N_win, N_sc, S)`` window arrays -> ``(..., 2 N_sc S)`` features."""
    a = amps.mean(axis=-3)
    p = phases.mean(axis=-3)
    lead = a.shape[:-2]
    return np.concatenate([a.reshape(*lead, -1), p.reshape(*lead, -1)], axis=-1)


def cnn_tensor_from_arrays(amps: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """``(..., N_win, N_sc, S)`` window arrays -> ``(..., 2S, N_sc, N_win)``."""
    stacked = np.concatenate([amps, phases], axis=-1)         # (..., N_win, N_sc, 2S)
    return np.moveaxis(stacked, -1, -3).swapaxes(-1, -2)


def extract_features_mlp(records: Sequence[CsiRecord]) -> np.ndarray:
    amps, phases = _window_arrays(records)
    return mlp_vector_from_arrays(amps, phases)


def extract_features_cnn(records: Sequence[CsiRecord], window: int = 30) -> np.ndarray:
    if len(records) != window:
        raise WindowLengthError(f"expected {window} records, got {len(records)}")
    amps, phases = _window_arrays(records)
    return cnn_tensor_from_arrays(amps, phases)


def simulate_windows(scene: Scene, model: MeasurementModel, n_windows: int, window: int,
                     rng: np.random.Generator, with_cnn: bool = True):
    """Simulate, calibrate and featurize ``n_windows`` windows at ``scene.target``."""
    amps, phases, _, _ = simulate_csi_arrays(scene, model, n_windows * window, rng)
    cal, _, _ = calibrate_phase_arrays(phases, scene.ofdm.fft_size)
    nsc, s = amps.shape[1:]
    amps = amps.reshape(n_windows, window, nsc, s)
    cal = cal.reshape(n_windows, window, nsc, s)
    mlp = mlp_vector_from_arrays(amps, cal)
    cnn = cnn_tensor_from_arrays(amps, cal) if with_cnn else None
    return mlp, cnn


# -- dataset construction -----------------------------------------------------

def build_dataset(grid: RpGrid, scene_template: Scene, model: MeasurementModel,
                  samples_per_rp: int, window: int = 30, with_cnn: bool = True,
                  stream: int = STREAM_TRAIN) -> FingerprintDataset:
    """Fingerprints for every RP; the target of ``scene_template`` is replaced per RP."""
    if samples_per_rp < 1:
        raise InvalidConfigError("samples_per_rp must be >= 1")
    samples = []
    for idx, rp in enumerate(grid.rp_locations):
        rng = model.rng(stream, idx)
        mlp, cnn = simulate_windows(scene_template.with_target(rp), model,
                                    samples_per_rp, window, rng, with_cnn)
        for w in range(samples_per_rp):
            samples.append(FeatureSample(mlp[w], rp, None if cnn is None else cnn[w], idx, rp))
    ds = FingerprintDataset(samples, grid, "simulated", window)
    return ds.fit_scalers()


def build_test_set(points, grid: RpGrid, scene_template: Scene, model: MeasurementModel,
                   windows_per_point: int, window: int = 30, with_cnn: bool = True,
                   stream: int = STREAM_TEST) -> FingerprintDataset:
    """Unlabeled-by-RP samples at arbitrary points (e.g. off-grid test points)."""
    samples = []
    for idx, pt in enumerate(points):
        pt = Location(*pt)
        rng = model.rng(stream, idx)
        mlp, cnn = simulate_windows(scene_template.with_target(pt), model,
                                    windows_per_point, window, rng, with_cnn)
        for w in range(windows_per_point):
            samples.append(FeatureSample(mlp[w], pt, None if cnn is None else cnn[w], None, pt))
    return FingerprintDataset(samples, grid, "simulated", window)


def sample_uniform_disk(rng: np.random.Generator, radius: float) -> np.ndarray:
    r = radius * math.sqrt(rng.uniform())
    phi = rng.uniform(-math.pi, math.pi)
    return np.array([r * math.cos(phi), r * math.sin(phi)])


def augment_dataset(dataset: FingerprintDataset, scene_template: Scene, model: MeasurementModel,
                    sigma_p: float = 0.1, copies_per_sample: int = 1,
                    area: Area | None = None) -> FingerprintDataset:
    """Add ``copies_per_sample`` perturbed-location windows per sample, keeping labels.

    Each copy is simulated at ``label + dL`` with ``dL`` uniform in the disk
    of radius ``sigma_p``; points falling outside ``area`` are redrawn.
    """
    if not sigma_p > 0:
        raise InvalidConfigError("sigma_p must be positive")
    if copies_per_sample < 0:
        raise InvalidConfigError("copies_per_sample must be >= 0")
    if copies_per_sample == 0:
        return dataset
    area = area if area is not None else dataset.grid.area
    with_cnn = dataset.has_cnn
    extra = []
    for n, sample in enumerate(dataset.samples):
        rng = model.rng(STREAM_AUGMENT, n)
        label = np.asarray(sample.label, dtype=float)
        for _ in range(copies_per_sample):
            while True:
                gen = label + sample_uniform_disk(rng, sigma_p)
                if area.contains(gen, tol=0.0):
                    break
            gen_loc = Location(float(gen[0]), float(gen[1]))
            mlp, cnn = simulate_windows(scene_template.with_target(gen_loc), model, 1,
                                        dataset.window_size, rng, with_cnn)
            extra.append(FeatureSample(mlp[0], sample.label, None if cnn is None else cnn[0],
                                       sample.rp_index, gen_loc))
    out = FingerprintDataset(list(dataset.samples) + extra, dataset.grid, "augmented",
                             dataset.window_size)
    return out.fit_scalers()


# -- persistence --------------------------------------------------------------

DATASET_MAGIC = b"CSILOCDS"
DATASET_VERSION = 1


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dataset_to_bytes(ds: FingerprintDataset) -> bytes:
    """Serialize to the ``CSILOCDS`` container.

    Layout (little-endian): magic, u32 version, u32 sample count, u32 JSON
    header length, JSON header (grid, provenance, window size, feature
    dimensions), scaler doubles (MLP mean, MLP std, then CNN mean, CNN std
    when present), then per sample ``[label_x, label_y, rp_index (-1 if
    none), gen_x, gen_y, mlp..., cnn...]`` as doubles, then an 8-byte
    BLAKE2b checksum of everything before it.
    """
    mlp_len = len(ds.samples[0].mlp_vector) if ds.samples else 0
    cnn_shape = list(ds.samples[0].cnn_tensor.shape) if ds.has_cnn else None
    header = {
        "grid": {"rp_locations": [list(p) for p in ds.grid.rp_locations],
                 "grid_spacing": ds.grid.grid_spacing,
                 "area": [ds.grid.area.x_min, ds.grid.area.y_min,
                          ds.grid.area.x_max, ds.grid.area.y_max]},
        "provenance": ds.provenance,
        "window_size": ds.window_size,
        "mlp_len": mlp_len,
        "cnn_shape": cnn_shape,
        "has_mlp_scaler": ds.mlp_scaler is not None,
        "has_cnn_scaler": ds.cnn_scaler is not None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<III", DATASET_VERSION, len(ds.samples), len(hbytes)))
    buf.write(hbytes)
    for scaler in (ds.mlp_scaler, ds.cnn_scaler):
        if scaler is not None:
            buf.write(_f64(scaler.mean.ravel()))
            buf.write(_f64(scaler.std.ravel()))
    for s in ds.samples:
        gen = s.generation_location or s.label
        row = [s.label[0], s.label[1], -1.0 if s.rp_index is None else float(s.rp_index),
               gen[0], gen[1]]
        buf.write(_f64(row))
        buf.write(_f64(s.mlp_vector))
        if cnn_shape is not None:
            buf.write(_f64(s.cnn_tensor.ravel()))
    body = buf.getvalue()
    return body + _checksum(body)


def dataset_from_bytes(data: bytes) -> FingerprintDataset:
    if len(data) < 28 or data[:8] != DATASET_MAGIC:
        raise FileFormatError("not a CSILOCDS dataset file")
    version, count, hlen = struct.unpack_from("<III", data, 8)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {DATASET_VERSION}")
    body, check = data[:-8], data[-8:]
    if _checksum(body) != check:
        raise ChecksumMismatchError("dataset checksum mismatch (truncated or corrupted file)")
    pos = 20
    header = json.loads(body[pos:pos + hlen].decode())
    pos += hlen
    g = header["grid"]
    grid = RpGrid(tuple(Location(*p) for p in g["rp_locations"]), g["grid_spacing"], Area(*g["area"]))
    mlp_len = header["mlp_len"]
    cnn_shape = header["cnn_shape"]
    cnn_len = int(np.prod(cnn_shape)) if cnn_shape else 0

    def take(n):
        nonlocal pos
        out = np.frombuffer(body, dtype="<f8", count=n, offset=pos).astype(float)
        pos += 8 * n
        return out

    mlp_scaler = cnn_scaler = None
    if header["has_mlp_scaler"]:
        mlp_scaler = Standardizer(take(mlp_len), take(mlp_len))
    if header["has_cnn_scaler"]:
        cnn_scaler = Standardizer(take(cnn_len).reshape(cnn_shape), take(cnn_len).reshape(cnn_shape))
    samples = []
    for _ in range(count):
        lx, ly, rp, gx, gy = take(5)
        mlp = take(mlp_len)
        cnn = take(cnn_len).reshape(cnn_shape) if cnn_shape else None
        samples.append(FeatureSample(mlp, Location(lx, ly), cnn,
                                     None if rp < 0 else int(rp), Location(gx, gy)))
    if pos != len(body):
        raise FileFormatError("trailing bytes in dataset payload")
    return FingerprintDataset(samples, grid, header["provenance"], header["window_size"],
                              mlp_scaler, cnn_scaler)


def save_dataset(ds: FingerprintDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> FingerprintDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def export_csv(ds: FingerprintDataset, path) -> None:
    """One row per sample: flattened MLP features, then label columns ``x,y``."""
    x = ds.mlp_matrix()
    labels = ds.labels()
    with open(path, "w") as fh:
        cols = [f"f{j}" for j in range(x.shape[1] if x.size else 0)] + ["rp_index", "x", "y"]
        fh.write(",".join(cols) + "\n")
        for row, lab, rp in zip(x, labels, ds.rp_indices()):
            fh.write(",".join(repr(float(v)) for v in row)
                     + f",{int(rp)},{float(lab[0])!r},{float(lab[1])!r}\n")
