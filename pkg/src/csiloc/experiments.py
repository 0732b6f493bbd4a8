"""Reference fixture and experiment pipeline shared by the CLI and the test suite.

A fixture is fully determined by an :class:`ExperimentConfig`: the scatterers
and the off-grid test points are drawn from ``default_rng(seed)`` (in that
order), measurement noise comes from per-AP seed streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import NETWORK_FOR_METHOD, ExperimentConfig
from .crlb import (
    PerturbationPrior,
    crlb_perturbed,
    scene_crlb,
)
from .dataset import (
    FingerprintDataset,
    MeasurementModel,
    RpGrid,
    augment_dataset,
    build_dataset,
    build_test_set,
)
from .errors import CsilocError, EmptyInputError, SingularFimError
from .geometry import (
    Area,
    ArrayConfig,
    Location,
    OfdmConfig,
    Scene,
    channel_response,
    path_params_from_geometry,
)
from .localization import (
    EvalReport,
    Prediction,
    PredictionGroup,
    evaluate,
    fuse_average,
    knn_localize,
    remove_outliers,
    sic_localize,
)
from .neural import Network, TrainConfig, build_table1, one_hot, train

NETWORK_METHODS = tuple(NETWORK_FOR_METHOD)


def feature_kind(method: str) -> str:
    return "cnn" if method == "cnn" else "mlp"


@dataclass
class Fixture:
    config: ExperimentConfig
    room: Area
    area: Area
    grid: RpGrid
    scatterers: tuple
    test_points: np.ndarray                 # (n_test_points, 2)
    templates: list                         # one Scene per AP
    models: list                            # one MeasurementModel per AP

    @property
    def n_aps(self) -> int:
        return len(self.templates)


def make_fixture(cfg: ExperimentConfig) -> Fixture:
    s = cfg.scene
    room = Area.room(*s.room)
    area = Area(*s.area)
    grid = RpGrid.regular(area, s.grid_spacing)
    rng = np.random.default_rng(cfg.seed)
    scat = tuple(Location(*p) for p in rng.uniform([0.0, 0.0], s.room, size=(s.n_scatterers, 2)))
    tps = rng.uniform([area.x_min, area.y_min], [area.x_max, area.y_max],
                      size=(cfg.dataset.n_test_points, 2))
    a = cfg.array
    array = ArrayConfig(a.n_tx, a.n_rx) if a.spacing_d is None else ArrayConfig(a.n_tx, a.n_rx,
                                                                                 a.spacing_d)
    o = cfg.ofdm
    ofdm = OfdmConfig(o.carrier_freq, o.n_subcarriers, o.fft_size, o.sample_period,
                      o.subcarrier_spacing)
    templates, models = [], []
    for k in range(s.n_aps):
        ap = s.ap_positions[k]
        # the template target is a placeholder, replaced per RP / test point
        templates.append(Scene(ap=ap, target=grid.rp_locations[0], scatterers=scat, array=array,
                               ofdm=ofdm, seed=cfg.seed, nlos_gain_std=s.nlos_gain_std))
        m = cfg.measurement
        models.append(MeasurementModel.from_snr(
            m.snr_db, timing_offset_range=tuple(m.timing_offset_range),
            phase_offset_range=tuple(m.phase_offset_range), rng_seed=cfg.seed,
            stream_prefix=() if k == 0 else (k,)))
    return Fixture(cfg, room, area, grid, scat, tps, templates, models)


# -- datasets -----------------------------------------------------------------

def window_for(cfg: ExperimentConfig, kind: str) -> int:
    return cfg.dataset.cnn_window if kind == "cnn" else cfg.dataset.mlp_window


def feature_kinds(methods) -> list[str]:
    kinds = []
    for m in methods:
        if m in ("knn", "classifier", "regressor", "cnn"):
            k = feature_kind(m)
            if k not in kinds:
                kinds.append(k)
    return sorted(kinds)


def simulate_ap(fx: Fixture, ap: int, kind: str):
    """``(train, test)`` datasets for one AP and feature kind."""
    cfg = fx.config
    window = window_for(cfg, kind)
    with_cnn = kind == "cnn"
    tr = build_dataset(fx.grid, fx.templates[ap], fx.models[ap], cfg.dataset.samples_per_rp,
                       window, with_cnn=with_cnn)
    te = build_test_set(fx.test_points, fx.grid, fx.templates[ap], fx.models[ap],
                        cfg.dataset.windows_per_test_point, window, with_cnn=with_cnn)
    return tr, te


def maybe_augment(fx: Fixture, ap: int, ds: FingerprintDataset) -> FingerprintDataset:
    a = fx.config.augmentation
    if not a.enabled or a.copies_per_sample == 0:
        return ds
    return augment_dataset(ds, fx.templates[ap], fx.models[ap], a.sigma_p,
                           a.copies_per_sample, area=fx.area)


# -- training -----------------------------------------------------------------

def train_method(method: str, train_ds: FingerprintDataset, cfg: ExperimentConfig):
    """Build and train the network for ``method``; returns ``(net, history)``."""
    kind = NETWORK_FOR_METHOD[method]
    n_rp = train_ds.grid.n_rp
    t = cfg.train
    if kind == "cnn_regressor":
        x = train_ds.inputs("cnn")
        net = build_table1(kind, n_classes=n_rp, cnn_input=x.shape[1:], seed=cfg.seed)
    else:
        x = train_ds.inputs("mlp")
        net = build_table1(kind, n_classes=n_rp, n_inputs=x.shape[1], seed=cfg.seed)
    if kind == "mlp_classifier":
        y, loss = one_hot(train_ds.rp_indices(), n_rp), "cross_entropy"
    else:
        y, loss = train_ds.labels(), "squared_l2"
    if kind == "cnn_regressor":
        tc = TrainConfig(t.cnn_learning_rate, t.batch_size, t.cnn_epochs, cfg.seed, loss)
    else:
        tc = TrainConfig(t.learning_rate, t.batch_size, t.epochs, cfg.seed, loss)
    return train(net, x, y, tc)


# -- estimation ---------------------------------------------------------------

def window_estimates(method: str, fx: Fixture, train_ds: FingerprintDataset | None,
                     test_ds: FingerprintDataset | None, net: Network | None = None,
                     ap: int = 0) -> np.ndarray:
    """Per-window location estimates, shape ``(n_test_points, n_windows, 2)``."""
    n_tp = len(fx.test_points)
    if method == "oracle":
        return fx.test_points[:, None, :].copy()
    if method == "sic":
        return sic_estimates(fx, ap)[:, None, :]
    kind = feature_kind(method)
    x = test_ds.inputs(kind, train_ds)
    if method == "knn":
        est = knn_localize(train_ds.inputs("mlp"), train_ds.labels(), x,
                           fx.config.knn_k).window_estimates
    elif method == "classifier":
        est = net.predict(x) @ fx.grid.as_array()
    else:
        est = fx.area.clamp(net.predict(x))
    return est.reshape(n_tp, -1, 2)


def sic_estimates(fx: Fixture, ap: int = 0) -> np.ndarray:
    """Model-based baseline on one synchronized noisy snapshot per test point."""
    tmpl = fx.templates[ap]
    model = fx.models[ap]
    rng = model.rng(3)
    out = np.empty((len(fx.test_points), 2))
    for n, tp in enumerate(fx.test_points):
        scene = tmpl.with_target(tp)
        y = channel_response(scene, path_params_from_geometry(scene)).sum(axis=2)  # unit pilots
        y = y + math.sqrt(model.noise_psd / 2) * (rng.standard_normal(y.shape)
                                                  + 1j * rng.standard_normal(y.shape))
        try:
            res = sic_localize(y, tmpl.ap, tmpl.array, tmpl.ofdm, tau_step=2e-9,
                               noise_floor=model.noise_psd, area=fx.area)
            loc = fx.area.clamp(np.array(res.prediction.location))
        except CsilocError:
            loc = np.array([(fx.area.x_min + fx.area.x_max) / 2,
                            (fx.area.y_min + fx.area.y_max) / 2])
        out[n] = loc
    return out


def fuse_windows(est: np.ndarray, outliers_enabled: bool = False,
                 delta_th: float = 2.0) -> np.ndarray:
    """Fuse ``(n_tp, W, 2)`` window estimates into ``(n_tp, 2)`` locations."""
    fused = np.empty((est.shape[0], 2))
    for n, windows in enumerate(est):
        preds = [Prediction(Location(*w), "window") for w in windows]
        if outliers_enabled and len(preds) >= 2:
            _, loc = remove_outliers(PredictionGroup(preds), delta_th)
        else:
            loc = fuse_average(preds)
        fused[n] = loc
    return fused


def average_aps(per_ap: list[np.ndarray]) -> np.ndarray:
    """Two-AP mode: per-AP fused estimates are simply averaged."""
    if not per_ap:
        raise EmptyInputError("no per-AP estimates")
    return np.mean(np.stack(per_ap), axis=0)


@dataclass
class ExperimentResult:
    reports: dict                           # method -> EvalReport
    estimates: dict                         # method -> (n_tp, 2)
    histories: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, methods=None) -> ExperimentResult:
    """In-memory simulate -> train -> evaluate for every requested method."""
    methods = list(methods if methods is not None else cfg.methods)
    fx = make_fixture(cfg)
    per_method = {m: [] for m in methods}
    histories = {}
    for ap in range(fx.n_aps):
        data = {k: simulate_ap(fx, ap, k) for k in feature_kinds(methods)}
        trained = {}
        for m in methods:
            tr, te = data.get(feature_kind(m), (None, None))
            net = None
            if m in NETWORK_METHODS:
                if feature_kind(m) not in trained:
                    trained[feature_kind(m)] = maybe_augment(fx, ap, tr)
                net, hist = train_method(m, trained[feature_kind(m)], cfg)
                histories[(m, ap)] = hist
                tr = trained[feature_kind(m)]
            est = window_estimates(m, fx, tr, te, net, ap)
            per_method[m].append(fuse_windows(est, cfg.outliers.enabled, cfg.outliers.delta_th))
    estimates = {m: average_aps(v) for m, v in per_method.items()}
    reports = {m: evaluate(e, fx.test_points) for m, e in estimates.items()}
    return ExperimentResult(reports, estimates, histories)


# -- bounds -------------------------------------------------------------------

def crlb_rows(cfg: ExperimentConfig) -> list[dict]:
    """Bounds at every RP of the fixture for each (SNR, sigma_p) pair.

    Rows whose FIM is singular carry NaN bounds and ``flagged = 1``.
    """
    fx = make_fixture(cfg)
    rows = []
    for sid, rp in enumerate(fx.grid.rp_locations):
        scene = fx.templates[0].with_target(rp)
        for snr in cfg.crlb.snr_db:
            try:
                base = scene_crlb(scene, snr, cfg.crlb.n_symbols)
            except SingularFimError:
                base = None
            for sp in cfg.crlb.sigma_p:
                if base is None:
                    rows.append({"scene_id": sid, "snr_db": snr, "sigma_p": sp,
                                 "epsilon": math.nan, "epsilon_p": math.nan, "flagged": 1})
                    continue
                pert = crlb_perturbed(base, PerturbationPrior(sp))
                rows.append({"scene_id": sid, "snr_db": snr, "sigma_p": sp,
                             "epsilon": base.epsilon, "epsilon_p": pert.epsilon, "flagged": 0})
    return rows
