"""Experiment configuration: JSON file <-> validated dataclasses.

Unknown keys are rejected at every level. ``config_schema()`` returns a
JSON-schema description of the file format.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfigError

METHODS = ("knn", "classifier", "regressor", "cnn", "sic", "oracle")
NETWORK_FOR_METHOD = {"classifier": "mlp_classifier", "regressor": "mlp_regressor",
                      "cnn": "cnn_regressor"}


@dataclass
class ArraySection:
    n_tx: int = 1
    n_rx: int = 3
    spacing_d: float | None = None    # default: half the carrier wavelength


@dataclass
class OfdmSection:
    carrier_freq: float = 5.32e9
    n_subcarriers: int = 30
    fft_size: int = 64
    sample_period: float = 50e-9
    subcarrier_spacing: float = 312.5e3


@dataclass
class MeasurementSection:
    snr_db: float = 20.0
    timing_offset_range: list = field(default_factory=lambda: [-2.0, 2.0])
    phase_offset_range: list = field(default_factory=lambda: [-math.pi, math.pi])


@dataclass
class SceneSection:
    room: list = field(default_factory=lambda: [8.0, 6.0])
    # localization area A: RPs, test points and clamped estimates live here
    area: list = field(default_factory=lambda: [1.6, 1.8, 6.4, 4.2])
    grid_spacing: float = 1.2
    ap_positions: list = field(default_factory=lambda: [[0.3, 0.3], [7.7, 5.7]])
    n_aps: int = 1
    n_scatterers: int = 4
    nlos_gain_std: float = 0.3


@dataclass
class DatasetSection:
    samples_per_rp: int = 200
    mlp_window: int = 1
    cnn_window: int = 30
    n_test_points: int = 50
    windows_per_test_point: int = 10


@dataclass
class TrainSection:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    # the CNN diverges at the MLP rate and costs ~8 s per epoch at desk scale
    cnn_learning_rate: float = 0.001
    cnn_epochs: int = 20


@dataclass
class AugmentSection:
    enabled: bool = False
    sigma_p: float = 0.1
    copies_per_sample: int = 1
    # weight of the label-perturbation penalty; labels are kept, so the term
    # is parameter independent and does not change training
    alpha: float = 0.0


@dataclass
class OutlierSection:
    enabled: bool = False
    delta_th: float = 2.0


@dataclass
class CrlbSection:
    snr_db: list = field(default_factory=lambda: [0.0, 10.0, 20.0, 20.0 + 20 * math.log10(2), 30.0])
    sigma_p: list = field(default_factory=lambda: [1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4])
    n_symbols: int = 1


@dataclass
class SweepSection:
    methods: list = field(default_factory=lambda: ["classifier", "regressor"])
    grid_spacings: list = field(default_factory=lambda: [0.6, 1.2, 1.8])
    ap_counts: list = field(default_factory=lambda: [1, 2])
    augmentation: list = field(default_factory=lambda: [False, True])
    jobs: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 42
    methods: list = field(default_factory=lambda: ["knn", "classifier", "regressor"])
    knn_k: int = 5
    scene: SceneSection = field(default_factory=SceneSection)
    array: ArraySection = field(default_factory=ArraySection)
    ofdm: OfdmSection = field(default_factory=OfdmSection)
    measurement: MeasurementSection = field(default_factory=MeasurementSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    augmentation: AugmentSection = field(default_factory=AugmentSection)
    outliers: OutlierSection = field(default_factory=OutlierSection)
    crlb: CrlbSection = field(default_factory=CrlbSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self) -> "ExperimentConfig":
        validate(self)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"scene.grid_spacing": 0.6})``."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise InvalidConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return config_from_dict(data)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfigError(f"unknown key(s) in {path or 'config'}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data, ""))


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _need(cond, msg):
    if not cond:
        raise InvalidConfigError(msg)


def _inside(pt, rect):
    return rect[0] <= pt[0] <= rect[2] and rect[1] <= pt[1] <= rect[3]


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    s = cfg.scene
    _need(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed must be a non-negative integer")
    _need(len(s.room) == 2 and all(v > 0 for v in s.room), "scene.room must be [width, height] > 0")
    room_rect = [0.0, 0.0, float(s.room[0]), float(s.room[1])]
    _need(len(s.area) == 4 and s.area[2] > s.area[0] and s.area[3] > s.area[1],
          "scene.area must be [x_min, y_min, x_max, y_max] with positive extent")
    _need(_inside(s.area[:2], room_rect) and _inside(s.area[2:], room_rect),
          "scene.area must lie inside the room")
    _need(s.grid_spacing > 0, "scene.grid_spacing must be positive")
    _need(s.n_aps >= 1, "scene.n_aps must be >= 1")
    _need(len(s.ap_positions) >= max([s.n_aps] + list(cfg.sweep.ap_counts)),
          "scene.ap_positions has fewer entries than the AP count requested")
    for ap in s.ap_positions:
        _need(len(ap) == 2 and _inside(ap, room_rect), f"AP {ap} lies outside the room")
        _need(not _inside(ap, s.area), f"AP {ap} lies inside the localization area")
    _need(s.n_scatterers >= 0, "scene.n_scatterers must be >= 0")
    _need(s.nlos_gain_std >= 0, "scene.nlos_gain_std must be >= 0")
    _need(cfg.array.n_tx >= 1 and cfg.array.n_rx >= 1, "array needs n_tx, n_rx >= 1")
    _need(cfg.array.spacing_d is None or cfg.array.spacing_d > 0, "array.spacing_d must be positive")
    o = cfg.ofdm
    _need(all(v > 0 for v in (o.carrier_freq, o.n_subcarriers, o.fft_size, o.sample_period,
                              o.subcarrier_spacing)), "ofdm values must be positive")
    m = cfg.measurement
    _need(len(m.timing_offset_range) == 2 and m.timing_offset_range[0] <= m.timing_offset_range[1],
          "measurement.timing_offset_range must be [lo, hi]")
    _need(len(m.phase_offset_range) == 2 and m.phase_offset_range[0] <= m.phase_offset_range[1],
          "measurement.phase_offset_range must be [lo, hi]")
    d = cfg.dataset
    for name in ("samples_per_rp", "mlp_window", "cnn_window", "n_test_points",
                 "windows_per_test_point"):
        _need(getattr(d, name) >= 1, f"dataset.{name} must be >= 1")
    t = cfg.train
    _need(t.learning_rate >= 0 and t.cnn_learning_rate >= 0, "learning rates must be >= 0")
    _need(t.batch_size >= 1 and t.epochs >= 0 and t.cnn_epochs >= 0,
          "train.batch_size must be >= 1 and epoch counts >= 0")
    a = cfg.augmentation
    _need(a.sigma_p > 0 and a.copies_per_sample >= 0, "augmentation needs sigma_p > 0, copies >= 0")
    _need(-1.0 <= a.alpha <= 1.0, "augmentation.alpha must lie in [-1, 1]")
    _need(cfg.outliers.delta_th > 0, "outliers.delta_th must be positive")
    _need(cfg.outliers.delta_th >= 1 or not cfg.outliers.enabled,
          "outliers.delta_th below 1 can reject a whole group")
    _need(cfg.knn_k >= 1, "knn_k must be >= 1")
    for meth in list(cfg.methods) + list(cfg.sweep.methods):
        _need(meth in METHODS, f"unknown method {meth!r}; choose from {METHODS}")
    _need(all(v > 0 for v in cfg.crlb.sigma_p), "crlb.sigma_p values must be positive")
    _need(cfg.crlb.n_symbols >= 1, "crlb.n_symbols must be >= 1")
    _need(all(v > 0 for v in cfg.sweep.grid_spacings), "sweep.grid_spacings must be positive")
    _need(all(v >= 1 for v in cfg.sweep.ap_counts), "sweep.ap_counts must be >= 1")
    _need(cfg.sweep.jobs >= 1, "sweep.jobs must be >= 1")
    return cfg


def config_schema() -> dict:
    """JSON schema of the config file, derived from the dataclasses."""

    def describe(cls):
        props = {}
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            tp = hints[f.name]
            if dataclasses.is_dataclass(tp):
                props[f.name] = describe(tp)
                continue
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            kind = {bool: "boolean", int: "integer", float: "number", list: "array",
                    str: "string"}.get(type(default), "number")
            entry = {"type": kind, "default": default}
            if default is None:
                entry = {"type": ["number", "null"], "default": None}
            props[f.name] = entry
        return {"type": "object", "additionalProperties": False, "properties": props}

    schema = describe(ExperimentConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "csiloc experiment config"
    return schema
