"""Location estimators, fusion, outlier rejection and error metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.optimize

from .errors import (
    ConfigMismatchError,
    EmptyInputError,
    InvalidConfigError,
    LengthMismatchError,
    NoPathFoundError,
    ShapeMismatchError,
)
from .geometry import (
    Area,
    ArrayConfig,
    Location,
    OfdmConfig,
    PathParams,
    SPEED_OF_LIGHT,
    location_from_los,
    steering_matrix,
    wrap_angle,
)

SOURCES = ("knn", "classifier", "regressor", "sic", "oracle")


@dataclass
class Prediction:
    location: Location
    source: str
    likelihoods: np.ndarray | None = None       # (n_windows, N_RP), rows sum to 1
    window_estimates: np.ndarray | None = None  # (n_windows, 2)


@dataclass
class PredictionGroup:
    members: list

    def __post_init__(self):
        if not self.members:
            raise EmptyInputError("a prediction group needs at least one member")

    @property
    def group_size(self) -> int:
        return len(self.members)

    def points(self) -> np.ndarray:
        return np.array([m.location for m in self.members], dtype=float)


@dataclass
class EvalReport:
    mean_distance_error: float
    median_distance_error: float
    cdf: list
    errors: np.ndarray = field(repr=False)

    @property
    def max_error(self) -> float:
        return float(self.errors.max())

    def summary(self) -> dict:
        return {"n": int(len(self.errors)),
                "mean_distance_error": self.mean_distance_error,
                "median_distance_error": self.median_distance_error,
                "max_error": self.max_error,
                "cdf": [[e, f] for e, f in self.cdf]}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("index,error\n")
            for n, e in enumerate(self.errors):
                fh.write(f"{n},{float(e)!r}\n")

    def cdf_to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("error,cumulative_fraction\n")
            for e, f in self.cdf:
                fh.write(f"{e!r},{f!r}\n")


# -- fusion and fingerprint estimators ----------------------------------------

def fuse_average(predictions) -> Location:
    """Coordinatewise mean of locations (or of Prediction objects)."""
    pts = [p.location if isinstance(p, Prediction) else p for p in predictions]
    if len(pts) == 0:
        raise EmptyInputError("nothing to fuse")
    arr = np.asarray(pts, dtype=float).reshape(-1, 2)
    # sorted summation makes the mean exactly permutation invariant
    xs = math.fsum(sorted(arr[:, 0])) / len(arr)
    ys = math.fsum(sorted(arr[:, 1])) / len(arr)
    return Location(xs, ys)


def knn_localize(train_features: np.ndarray, train_labels: np.ndarray, query_features,
                 k: int = 5) -> Prediction:
    """Centroid of the labels of the ``k`` nearest training samples (Euclidean).

    Ties are resolved in favour of the lower sample index. Several query
    windows are fused by averaging their per-window estimates.
    """
    x = np.asarray(train_features, dtype=float)
    if len(x) == 0:
        raise EmptyInputError("empty training set")
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    labels = np.asarray(train_labels, dtype=float).reshape(-1, 2)
    q = np.atleast_2d(np.asarray(query_features, dtype=float))
    k = min(k, len(x))
    d2 = ((q ** 2).sum(1)[:, None] - 2 * q @ x.T + (x ** 2).sum(1)[None, :])
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    est = labels[order].mean(axis=1)
    return Prediction(fuse_average(est), "knn", window_estimates=est)


def classify_localize(net, windows, grid) -> Prediction:
    """Likelihood-weighted RP average per window, fused by averaging."""
    rp = grid.as_array() if hasattr(grid, "as_array") else np.asarray(grid, dtype=float)
    if net.head != "softmax":
        raise ConfigMismatchError("classify_localize needs a softmax head")
    if net.output_shape[0] != len(rp):
        raise ConfigMismatchError(f"network has {net.output_shape[0]} classes, grid {len(rp)} RPs")
    p = net.predict(np.asarray(windows, dtype=float))
    return localize_from_likelihoods(p, rp)


def localize_from_likelihoods(p, rp_locations) -> Prediction:
    p = np.atleast_2d(np.asarray(p, dtype=float))
    est = p @ np.asarray(rp_locations, dtype=float)
    return Prediction(fuse_average(est), "classifier", likelihoods=p, window_estimates=est)


def regress_localize(net, windows, area: Area | None = None) -> Prediction:
    """Direct coordinate regression per window (clamped to ``area``), fused by averaging."""
    if net.output_shape != (2,):
        raise ShapeMismatchError(f"regressor must output 2 values, not {net.output_shape}")
    est = net.predict(np.asarray(windows, dtype=float))
    if area is not None:
        est = area.clamp(est)
    return Prediction(fuse_average(est), "regressor", window_estimates=est)


def remove_outliers(group: PredictionGroup, delta_th: float = 2.0):
    """Drop members deviating by more than ``delta_th`` standard deviations on both axes.

    Mean and (population) standard deviation use the full group. A zero
    standard deviation never flags that axis. Returns ``(kept_group, fused)``.
    """
    if group.group_size < 2:
        raise InvalidConfigError("outlier removal needs a group of at least two")
    if not delta_th > 0:
        raise InvalidConfigError("delta_th must be positive")
    pts = group.points()
    mean = pts.mean(axis=0)
    std = pts.std(axis=0)
    dev = np.abs(pts - mean)
    flags = np.where(std > 0, dev > delta_th * std, False)
    outlier = flags[:, 0] & flags[:, 1]
    kept = [m for m, o in zip(group.members, outlier) if not o]
    if not kept:
        raise EmptyInputError("every member was rejected; lower delta_th is below 1")
    kept_group = PredictionGroup(kept)
    return kept_group, fuse_average(kept_group.members)


def group_predictions(predictions: Sequence[Prediction], group_size: int):
    """Consecutive groups of ``group_size`` predictions (a short tail group is kept)."""
    return [PredictionGroup(list(predictions[s:s + group_size]))
            for s in range(0, len(predictions), group_size)]


# -- evaluation ---------------------------------------------------------------

def evaluate(predictions, ground_truths) -> EvalReport:
    pred = np.asarray([p.location if isinstance(p, Prediction) else p for p in predictions],
                      dtype=float).reshape(-1, 2)
    truth = np.asarray(ground_truths, dtype=float).reshape(-1, 2)
    if len(pred) != len(truth):
        raise LengthMismatchError(f"{len(pred)} predictions vs {len(truth)} truths")
    if len(pred) == 0:
        raise EmptyInputError("nothing to evaluate")
    errors = np.hypot(*(pred - truth).T)
    srt = np.sort(errors)
    n = len(srt)
    median = float(srt[(n - 1) // 2])
    cdf = [(float(e), (j + 1) / n) for j, e in enumerate(srt)]
    return EvalReport(float(errors.mean()), median, cdf, errors)


# -- model-based estimator (successive interference cancellation) -------------

def fold_angle(theta):
    """Representative of ``theta`` modulo the ULA front/back ambiguity, in [-pi/2, pi/2]."""
    return np.arcsin(np.clip(np.sin(theta), -1.0, 1.0))


class _PathModel:
    """Per-path template ``sqrt(N_T N_R) e^{-j2pi i tau/P} a_R(theta_r) a_T(theta_t)^H x_i``."""

    def __init__(self, array: ArrayConfig, ofdm: OfdmConfig, pilots):
        self.array, self.ofdm = array, ofdm
        self.lam = ofdm.wavelengths()
        self.i = np.arange(ofdm.n_subcarriers)
        self.x = np.asarray(pilots, dtype=complex)                  # (N_sc, N_T)
        self.scale = math.sqrt(array.n_tx * array.n_rx)

    def tx_gain(self, theta_t):
        a_t = steering_matrix(self.array.n_tx, self.array.spacing_d, self.lam, np.atleast_1d(theta_t))
        return np.einsum("itk,it->ik", a_t.conj(), self.x)         # (N_sc, P)

    def templates(self, tau, theta_r, theta_t):
        tau, theta_r, theta_t = map(np.atleast_1d, (tau, theta_r, theta_t))
        phase = np.exp(-2j * np.pi * self.i[:, None] * tau[None, :] / self.ofdm.delay_period)
        a_r = steering_matrix(self.array.n_rx, self.array.spacing_d, self.lam, theta_r)
        t = self.scale * a_r * (phase * self.tx_gain(theta_t))[:, None, :]
        return t.reshape(-1, len(tau))                              # (N_sc*N_R, P)

    def correlation_map(self, y, taus, thetas_r, theta_t):
        """``|t^H y|^2 / ||t||^2`` over a (tau, theta_r) grid for one theta_t."""
        a_r = steering_matrix(self.array.n_rx, self.array.spacing_d, self.lam, thetas_r)
        y = np.asarray(y).reshape(len(self.i), self.array.n_rx)
        z = np.einsum("irk,ir->ik", a_r.conj(), y)                 # (N_sc, n_theta)
        b = self.tx_gain(theta_t)[:, 0]                             # (N_sc,)
        z = z * b.conj()[:, None]
        e = np.exp(2j * np.pi * np.outer(taus, self.i) / self.ofdm.delay_period)
        c = self.scale * (e @ z)
        energy = self.scale ** 2 * np.sum(np.abs(b) ** 2)
        return np.abs(c) ** 2 / energy if energy > 0 else np.zeros(c.shape)


def _grid_search(model, y, tau_grid, theta_r_grid, theta_t_grid):
    best = (-1.0, 0.0, 0.0, 0.0)
    for tt in theta_t_grid:
        m = model.correlation_map(y, tau_grid, theta_r_grid, tt)
        j = np.unravel_index(np.argmax(m), m.shape)
        if m[j] > best[0]:
            best = (float(m[j]), float(tau_grid[j[0]]), float(theta_r_grid[j[1]]), float(tt))
    return best


def _fit_gains(t, y):
    h, *_ = np.linalg.lstsq(t, y, rcond=None)
    return h


def _refine_joint(model, y, params, tau_scale):
    """Variable-projection least squares over all extracted paths' delays and angles."""
    n = len(params)
    use_tt = model.array.n_tx > 1
    per = 3 if use_tt else 2

    def unpack(v):
        v = v.reshape(n, per)
        tau = v[:, 0] * tau_scale
        tr = v[:, 1]
        tt = v[:, 2] if use_tt else np.zeros(n)
        return tau, tr, tt

    def residual(v):
        t = model.templates(*unpack(v))
        r = y - t @ _fit_gains(t, y)
        return np.concatenate([r.real, r.imag])

    v0 = np.array([[p[0] / tau_scale, p[1]] + ([p[2]] if use_tt else []) for p in params]).ravel()
    sol = scipy.optimize.least_squares(residual, v0, method="lm", xtol=1e-15, ftol=1e-15,
                                       gtol=1e-15, max_nfev=200 * len(v0))
    tau, tr, tt = unpack(sol.x)
    return [(float(a), float(b), float(c)) for a, b, c in zip(tau, tr, tt)]


@dataclass
class SicResult:
    prediction: Prediction
    paths: list
    residual_powers: list
    input_power: float


def sic_localize(received, ap, array: ArrayConfig, ofdm: OfdmConfig, pilots=None,
                 tau_step: float = 1e-9, theta_step: float = math.radians(1.0),
                 refine_factor: int = 10, tau_max: float = 200e-9,
                 noise_floor: float | None = None, max_paths: int = 6,
                 area: Area | None = None, joint_refine: bool = True) -> SicResult:
    """Successive path extraction from one noisy CSI snapshot.

    ``received`` is ``y_i`` for every subcarrier, shape ``(N_sc, N_R)``.
    Each round grid-searches the strongest remaining path (coarse grid, then
    a ``refine_factor`` finer grid around the peak), re-fits all paths found
    so far jointly, recomputes least-squares gains and subtracts the
    reconstruction. Rounds stop once the mean residual power per entry
    drops to ``noise_floor``. The earliest recovered path is taken as line
    of sight.

    A ULA only resolves ``sin(theta)``, so angles are searched on
    ``[-pi/2, pi/2]``; of the two mirror-image locations the one inside
    ``area`` (or nearest to it) is returned.
    """
    y_mat = np.asarray(received, dtype=complex)
    if y_mat.shape != (ofdm.n_subcarriers, array.n_rx):
        raise ShapeMismatchError(f"received must be ({ofdm.n_subcarriers}, {array.n_rx})")
    if not (tau_step > 0 and theta_step > 0):
        raise InvalidConfigError("grid steps must be positive")
    if pilots is None:
        pilots = np.ones((ofdm.n_subcarriers, array.n_tx), dtype=complex)
    model = _PathModel(array, ofdm, pilots)
    y = y_mat.reshape(-1)
    n_entries = y.size
    input_power = float(np.mean(np.abs(y) ** 2))
    if noise_floor is None:
        noise_floor = 1e-12 * input_power

    tau_grid = np.arange(0.0, tau_max + tau_step / 2, tau_step)
    theta_grid = np.arange(-math.pi / 2, math.pi / 2 + theta_step / 2, theta_step)
    tt_grid = theta_grid if array.n_tx > 1 else np.array([0.0])

    params = []
    residual = y.copy()
    powers = [input_power]
    while len(params) < max_paths and powers[-1] > noise_floor:
        peak, tau, tr, tt = _grid_search(model, residual, tau_grid, theta_grid, tt_grid)
        if peak / n_entries <= noise_floor:
            if not params:
                raise NoPathFoundError("no correlation peak above the noise floor")
            break
        fine_tau = tau + np.linspace(-tau_step, tau_step, 2 * refine_factor + 1)
        fine_tau = fine_tau[fine_tau >= 0]
        fine_tr = tr + np.linspace(-theta_step, theta_step, 2 * refine_factor + 1)
        fine_tt = (tt + np.linspace(-theta_step, theta_step, 2 * refine_factor + 1)
                   if array.n_tx > 1 else tt_grid)
        _, tau, tr, tt = _grid_search(model, residual, fine_tau, fine_tr, fine_tt)
        params.append((tau, tr, tt))
        if joint_refine:
            params = _refine_joint(model, y, params, ofdm.delay_period)
        t = model.templates(*map(np.array, zip(*params)))
        gains = _fit_gains(t, y)
        residual = y - t @ gains
        powers.append(float(np.mean(np.abs(residual) ** 2)))

    if not params:
        raise NoPathFoundError("received power is already at the noise floor")
    t = model.templates(*map(np.array, zip(*params)))
    gains = _fit_gains(t, y)
    paths = [PathParams(tau, wrap_angle(tt), wrap_angle(tr), g.real, g.imag)
             for (tau, tr, tt), g in zip(params, gains)]
    los = min(paths, key=lambda p: p.tau)
    location = _los_location(ap, los, area)
    return SicResult(Prediction(location, "sic"), paths, powers, input_power)


def _los_location(ap, los: PathParams, area: Area | None) -> Location:
    # theta_r points from the receiver back to the AP; the mirror pi - theta_r
    # produces the same array response.
    candidates = [location_from_los(ap, los.tau, wrap_angle(th + math.pi))
                  for th in (los.theta_r, math.pi - los.theta_r)]
    if area is None:
        return candidates[0]

    def outside(p):
        c = area.clamp(np.array(p))
        return math.hypot(p[0] - c[0], p[1] - c[1])

    return min(candidates, key=outside)


def los_range(tau0: float) -> float:
    return SPEED_OF_LIGHT * tau0
