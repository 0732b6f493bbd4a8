"""Scene geometry and the multipath MIMO-OFDM channel model.

A scene is an access point (the transmitter), a target (the receiver) and a
set of point scatterers. Each scatterer contributes one single-bounce path;
path 0 is the line of sight. Both ends carry a uniform linear array laid
along the y axis, so the steering phase of element ``m`` is proportional to
``d * sin(theta)`` with ``theta`` measured counter-clockwise from the +x
axis.

Angle conventions (atan2 based, full plane):

* ``theta_t`` of path k is the direction leaving the AP, towards the target
  for the LOS path and towards scatterer k otherwise.
* ``theta_r`` of path k is the direction *from the receiver back along the
  incoming ray*, i.e. towards the AP (LOS) or towards scatterer k. For the
  LOS path ``theta_r = theta_t + pi`` (wrapped).

On the upper half plane these agree with the arccos relations usually
quoted for this model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InvalidConfigError

SPEED_OF_LIGHT = 299_792_458.0

SCENE_FILE_VERSION = 1


class Location(NamedTuple):
    x: float
    y: float

    def distance_to(self, other: "Location") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class Area:
    """Axis-aligned rectangle ``[x_min, x_max] x [y_min, y_max]``."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise InvalidConfigError(f"empty area {self}")

    @classmethod
    def room(cls, width: float, height: float) -> "Area":
        return cls(0.0, 0.0, float(width), float(height))

    def contains(self, loc, tol: float = 1e-12) -> bool:
        x, y = loc
        return (self.x_min - tol <= x <= self.x_max + tol
                and self.y_min - tol <= y <= self.y_max + tol)

    def clamp(self, points):
        """Clamp an ``(..., 2)`` array of points into the rectangle."""
        pts = np.array(points, dtype=float, copy=True)
        pts[..., 0] = np.clip(pts[..., 0], self.x_min, self.x_max)
        pts[..., 1] = np.clip(pts[..., 1], self.y_min, self.y_max)
        return pts


@dataclass(frozen=True)
class ArrayConfig:
    n_tx: int = 1
    n_rx: int = 3
    spacing_d: float = SPEED_OF_LIGHT / 5.32e9 / 2

    def __post_init__(self):
        if self.n_tx < 1 or self.n_rx < 1:
            raise InvalidConfigError("array needs at least one TX and one RX element")
        if not self.spacing_d > 0:
            raise InvalidConfigError("antenna spacing must be positive")


@dataclass(frozen=True)
class OfdmConfig:
    """802.11n-like numerology: 30 reported subcarriers, 64-point FFT, 50 ns sampling."""

    carrier_freq: float = 5.32e9
    n_subcarriers: int = 30
    fft_size: int = 64
    sample_period: float = 50e-9
    subcarrier_spacing: float = 312.5e3

    def __post_init__(self):
        for name in ("carrier_freq", "n_subcarriers", "fft_size",
                     "sample_period", "subcarrier_spacing"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive")
        lam = self.wavelengths()
        if not (np.all(np.isfinite(lam)) and np.all(lam > 0)):
            raise InvalidConfigError("subcarrier band reaches non-positive frequency")

    @property
    def delay_period(self) -> float:
        """``N_sc * T_s``: the delay at which the per-subcarrier phase wraps."""
        return self.n_subcarriers * self.sample_period

    def subcarrier_frequencies(self) -> np.ndarray:
        offsets = np.arange(self.n_subcarriers) - (self.n_subcarriers - 1) / 2
        return self.carrier_freq + offsets * self.subcarrier_spacing

    def wavelengths(self) -> np.ndarray:
        return SPEED_OF_LIGHT / self.subcarrier_frequencies()


@dataclass(frozen=True)
class PathParams:
    tau: float
    theta_t: float
    theta_r: float
    h_re: float = 1.0
    h_im: float = 0.0

    @property
    def h(self) -> complex:
        return complex(self.h_re, self.h_im)


@dataclass(frozen=True)
class Scene:
    """Ground-truth geometry.

    ``coefficients`` optionally pins the complex gain of every path (length
    K+1, LOS first). When omitted, the LOS gain is 1 and the NLOS gains are
    circular complex Gaussian with total standard deviation
    ``nlos_gain_std``, drawn from ``seed``.
    """

    ap: Location
    target: Location
    scatterers: tuple = ()
    array: ArrayConfig = field(default_factory=ArrayConfig)
    ofdm: OfdmConfig = field(default_factory=OfdmConfig)
    coefficients: tuple | None = None
    seed: int = 0
    nlos_gain_std: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "ap", Location(*map(float, self.ap)))
        object.__setattr__(self, "target", Location(*map(float, self.target)))
        object.__setattr__(self, "scatterers",
                           tuple(Location(*map(float, s)) for s in self.scatterers))
        if self.coefficients is not None:
            coeffs = tuple(complex(c) for c in self.coefficients)
            if len(coeffs) != self.n_paths:
                raise InvalidConfigError(
                    f"{len(coeffs)} coefficients for {self.n_paths} paths")
            object.__setattr__(self, "coefficients", coeffs)
        if self.ap.distance_to(self.target) == 0.0:
            raise DegenerateGeometryError("target coincides with the AP")

    @property
    def n_paths(self) -> int:
        return len(self.scatterers) + 1

    def path_coefficients(self) -> np.ndarray:
        if self.coefficients is not None:
            return np.array(self.coefficients, dtype=complex)
        return default_coefficients(len(self.scatterers), self.seed, self.nlos_gain_std)

    def with_target(self, target) -> "Scene":
        from dataclasses import replace
        return replace(self, target=Location(*target))

    def with_ap(self, ap) -> "Scene":
        from dataclasses import replace
        return replace(self, ap=Location(*ap))


def default_coefficients(n_scatterers: int, seed: int = 0, nlos_std: float = 0.3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    nlos = (rng.standard_normal(n_scatterers) + 1j * rng.standard_normal(n_scatterers))
    return np.concatenate([[1.0 + 0.0j], nlos * (nlos_std / math.sqrt(2))])


def wrap_angle(theta):
    """Map angles into ``(-pi, pi]``."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2 * np.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def _element_offsets(n_elems: int) -> np.ndarray:
    return np.arange(n_elems) - (n_elems - 1) / 2


def steering_vector(n_elems: int, spacing_d: float, wavelength: float, theta: float) -> np.ndarray:
    """ULA response ``(1/sqrt(N)) exp(j (m - (N-1)/2) (2 pi / lambda) d sin(theta))``."""
    if n_elems < 1:
        raise InvalidConfigError("steering vector needs at least one element")
    if not wavelength > 0:
        raise InvalidConfigError("wavelength must be positive")
    phase = _element_offsets(n_elems) * (2 * np.pi / wavelength) * spacing_d * np.sin(theta)
    return np.exp(1j * phase) / np.sqrt(n_elems)


def steering_matrix(n_elems: int, spacing_d: float, wavelengths, thetas) -> np.ndarray:
    """Steering vectors for every (subcarrier, path): shape ``(N_sc, n_elems, P)``."""
    lam = np.asarray(wavelengths, dtype=float)[:, None, None]
    th = np.asarray(thetas, dtype=float)[None, None, :]
    m = _element_offsets(n_elems)[None, :, None]
    return np.exp(1j * m * (2 * np.pi / lam) * spacing_d * np.sin(th)) / np.sqrt(n_elems)


def _direction(frm: Location, to: Location) -> tuple[float, float]:
    dx, dy = to.x - frm.x, to.y - frm.y
    return math.hypot(dx, dy), wrap_angle(math.atan2(dy, dx))


def path_params_from_geometry(scene: Scene, coefficients=None) -> list[PathParams]:
    """Delays and departure/arrival angles for the LOS path and every scatterer."""
    h = scene.path_coefficients() if coefficients is None else np.asarray(coefficients, complex)
    if len(h) != scene.n_paths:
        raise InvalidConfigError(f"{len(h)} coefficients for {scene.n_paths} paths")
    c = SPEED_OF_LIGHT
    d0, theta_t0 = _direction(scene.ap, scene.target)
    paths = [PathParams(d0 / c, theta_t0, wrap_angle(theta_t0 + np.pi), h[0].real, h[0].imag)]
    for k, s in enumerate(scene.scatterers, start=1):
        d1, theta_t = _direction(scene.ap, s)
        d2, theta_r = _direction(scene.target, s)
        if d1 == 0.0 or d2 == 0.0:
            raise DegenerateGeometryError(f"scatterer {k} coincides with an endpoint")
        paths.append(PathParams((d1 + d2) / c, theta_t, theta_r, h[k].real, h[k].imag))
    return paths


def paths_to_arrays(paths: Sequence[PathParams]):
    """Unpack path parameters into ``(tau, theta_t, theta_r, h)`` arrays."""
    tau = np.array([p.tau for p in paths], dtype=float)
    tt = np.array([p.theta_t for p in paths], dtype=float)
    tr = np.array([p.theta_r for p in paths], dtype=float)
    h = np.array([p.h for p in paths], dtype=complex)
    return tau, tt, tr, h


def gamma_matrix(paths: Sequence[PathParams], subcarrier_index: int,
                 ofdm: OfdmConfig, array: ArrayConfig) -> np.ndarray:
    """Diagonal path-gain matrix ``sqrt(N_T N_R) h_k exp(-j 2 pi i tau_k / (N_sc T_s))``."""
    if len(paths) == 0:
        raise InvalidConfigError("at least one path is required")
    tau, _, _, h = paths_to_arrays(paths)
    diag = (math.sqrt(array.n_tx * array.n_rx) * h
            * np.exp(-2j * np.pi * subcarrier_index * tau / ofdm.delay_period))
    return np.diag(diag)


def channel_matrix(scene: Scene, paths: Sequence[PathParams], subcarrier_index: int) -> np.ndarray:
    """``H_i = A_R Gamma_i A_T^H`` for one subcarrier, shape ``(N_R, N_T)``."""
    arr, ofdm = scene.array, scene.ofdm
    _, tt, tr, _ = paths_to_arrays(paths)
    lam = ofdm.wavelengths()[subcarrier_index]
    a_r = np.stack([steering_vector(arr.n_rx, arr.spacing_d, lam, t) for t in tr], axis=1)
    a_t = np.stack([steering_vector(arr.n_tx, arr.spacing_d, lam, t) for t in tt], axis=1)
    return a_r @ gamma_matrix(paths, subcarrier_index, ofdm, arr) @ a_t.conj().T


def channel_response(scene: Scene, paths: Sequence[PathParams]) -> np.ndarray:
    """All subcarriers at once, shape ``(N_sc, N_R, N_T)``."""
    arr, ofdm = scene.array, scene.ofdm
    tau, tt, tr, h = paths_to_arrays(paths)
    lam = ofdm.wavelengths()
    i = np.arange(ofdm.n_subcarriers)[:, None]
    gains = (math.sqrt(arr.n_tx * arr.n_rx) * h[None, :]
             * np.exp(-2j * np.pi * i * tau[None, :] / ofdm.delay_period))
    a_r = steering_matrix(arr.n_rx, arr.spacing_d, lam, tr)
    a_t = steering_matrix(arr.n_tx, arr.spacing_d, lam, tt)
    return np.einsum("irk,ik,itk->irt", a_r, gains, a_t.conj())


def channel_tensor(scene: Scene, paths: Sequence[PathParams] | None = None,
                   n_symbols: int = 1) -> np.ndarray:
    """Block-fading tensor indexed ``[symbol, subcarrier, rx, tx]``.

    Every symbol slice is the same array; per-symbol impairments are applied
    by the measurement simulator.
    """
    if n_symbols < 1:
        raise InvalidConfigError("n_symbols must be >= 1")
    if paths is None:
        paths = path_params_from_geometry(scene)
    resp = channel_response(scene, paths)
    return np.repeat(resp[None], n_symbols, axis=0)


def location_from_los(ap, tau0: float, theta: float) -> Location:
    """Place the target at distance ``c * tau0`` from the AP along ``theta``."""
    d0 = SPEED_OF_LIGHT * tau0
    return Location(ap[0] + d0 * math.cos(theta), ap[1] + d0 * math.sin(theta))


# -- scene file ---------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    out = {
        "version": SCENE_FILE_VERSION,
        "ap": list(scene.ap),
        "target": list(scene.target),
        "scatterers": [list(s) for s in scene.scatterers],
        "array": asdict(scene.array),
        "ofdm": asdict(scene.ofdm),
        "seed": scene.seed,
        "nlos_gain_std": scene.nlos_gain_std,
    }
    if scene.coefficients is not None:
        out["coefficients"] = [[c.real, c.imag] for c in scene.coefficients]
    return out


def scene_from_dict(data: dict) -> Scene:
    data = dict(data)
    version = data.pop("version", SCENE_FILE_VERSION)
    if version != SCENE_FILE_VERSION:
        raise InvalidConfigError(f"unsupported scene file version {version}")
    known = {"ap", "target", "scatterers", "array", "ofdm", "seed",
             "nlos_gain_std", "coefficients"}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfigError(f"unknown scene keys: {sorted(unknown)}")
    coeffs = data.get("coefficients")
    return Scene(
        ap=Location(*data["ap"]),
        target=Location(*data["target"]),
        scatterers=tuple(Location(*s) for s in data.get("scatterers", [])),
        array=ArrayConfig(**data.get("array", {})),
        ofdm=OfdmConfig(**data.get("ofdm", {})),
        coefficients=None if coeffs is None else tuple(complex(re, im) for re, im in coeffs),
        seed=int(data.get("seed", 0)),
        nlos_gain_std=float(data.get("nlos_gain_std", 0.3)),
    )


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n")


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
