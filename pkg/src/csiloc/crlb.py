"""Fisher information and Cramér-Rao bounds on 2-D position error.

The observation model is ``y_i = H_i x_i + n_i`` with circular complex
Gaussian noise of power ``N_0`` per entry. With the real channel parameters
``eta = [tau_k, theta_t_k, theta_r_k, Re h_k, Im h_k]_{k=0..K}`` the FIM is

    J = (2 / N_0) * sum_{i, n} Re{ (d mu_{i,n} / d eta)^H (d mu_{i,n} / d eta) }

which is transformed to ``eta~ = [L, h_0, s_1, h_1, ..., s_K, h_K]`` by the
Jacobian of the geometry map, ``J~ = T J T^T``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DegenerateGeometryError, SingularFimError, SingularModelError
from .geometry import (
    SPEED_OF_LIGHT,
    Location,
    PathParams,
    Scene,
    path_params_from_geometry,
    paths_to_arrays,
    steering_matrix,
    wrap_angle,
)

PARAM_TAGS = ("tau", "theta_t", "theta_r", "h_re", "h_im")
POSITION_TAGS = ("x", "y", "h_re", "h_im")

# Condition numbers are measured after symmetric diagonal equilibration so
# the threshold does not depend on the units of the parameters.
SINGULAR_CONDITION = 1e12


@dataclass(frozen=True)
class PilotConfig:
    """Known transmit symbols ``x_i`` and the noise level.

    ``tx_symbols`` is either ``(N_sc, N_T)`` (same pilots on every symbol,
    repeated ``n_symbols`` times) or ``(N, N_sc, N_T)``.
    """

    tx_symbols: np.ndarray
    noise_psd: float
    n_symbols: int = 1

    def __post_init__(self):
        x = np.asarray(self.tx_symbols, dtype=complex)
        if x.ndim not in (2, 3):
            raise ValueError("tx_symbols must be (N_sc, N_T) or (N, N_sc, N_T)")
        if x.ndim == 3:
            object.__setattr__(self, "n_symbols", x.shape[0])
        object.__setattr__(self, "tx_symbols", x)
        if not self.noise_psd > 0:
            raise ValueError("noise_psd must be positive")

    @classmethod
    def default(cls, scene: Scene, snr_db: float = 20.0, n_symbols: int = 1) -> "PilotConfig":
        """All-ones pilots; ``N_0 = 10^(-snr/10)`` relative to unit pilot power."""
        x = np.ones((scene.ofdm.n_subcarriers, scene.array.n_tx), dtype=complex)
        return cls(x, 10.0 ** (-snr_db / 10.0), n_symbols)

    def with_snr(self, snr_db: float) -> "PilotConfig":
        return replace(self, noise_psd=10.0 ** (-snr_db / 10.0))

    def _symbols(self):
        """Pilot array with a leading symbol axis, plus the weight of each row."""
        x = self.tx_symbols
        if x.ndim == 2:
            return x[None], float(self.n_symbols)
        return x, 1.0


@dataclass(frozen=True)
class ParamOrdering:
    entries: tuple

    @classmethod
    def channel(cls, n_paths: int) -> "ParamOrdering":
        return cls(tuple((k, tag) for k in range(n_paths) for tag in PARAM_TAGS))

    @classmethod
    def position(cls, n_paths: int) -> "ParamOrdering":
        entries = [(0, "x"), (0, "y"), (0, "h_re"), (0, "h_im")]
        for k in range(1, n_paths):
            entries += [(k, "sx"), (k, "sy"), (k, "h_re"), (k, "h_im")]
        return cls(tuple(entries))

    def __len__(self):
        return len(self.entries)

    def index(self, k: int, tag: str) -> int:
        return self.entries.index((k, tag))


@dataclass(frozen=True)
class Fim:
    """``matrix = factor * gram``; ``gram`` is the unit-noise information when known.

    Keeping the noise factor apart lets the bound apply it after the
    inversion, so the N_0 scaling law holds to rounding even for badly
    conditioned scenes.
    """

    matrix: np.ndarray
    ordering: ParamOrdering
    gram: np.ndarray | None = field(default=None, repr=False)
    factor: float = 1.0

    def is_symmetric(self, rtol: float = 1e-9) -> bool:
        m = self.matrix
        scale = np.abs(m).max()
        return bool(np.abs(m - m.T).max() <= rtol * scale) if scale > 0 else True

    def is_psd(self, rtol: float = 1e-9) -> bool:
        ev = np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))
        return bool(ev.min() >= -rtol * max(ev.max(), 0.0))


@dataclass(frozen=True)
class TransformMatrix:
    """``T[a, b] = d eta_b / d eta~_a``, shape ``(4(K+1), 5(K+1))``."""

    matrix: np.ndarray
    row_ordering: ParamOrdering
    col_ordering: ParamOrdering


@dataclass(frozen=True)
class CrlbResult:
    epsilon: float
    covariance_2x2: np.ndarray
    fim_position: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PerturbationPrior:
    """Isotropic Gaussian prior of std ``sigma_p`` metres on the target position."""

    sigma_p: float = math.inf

    def __post_init__(self):
        if not self.sigma_p > 0:
            raise ValueError("sigma_p must be positive (use inf for no prior)")

    @property
    def information(self) -> float:
        return 0.0 if math.isinf(self.sigma_p) else self.sigma_p ** -2


# -- observation model --------------------------------------------------------

def _model_terms(scene: Scene, paths: Sequence[PathParams]):
    arr, ofdm = scene.array, scene.ofdm
    tau, tt, tr, h = paths_to_arrays(paths)
    lam = ofdm.wavelengths()
    i = np.arange(ofdm.n_subcarriers)[:, None]
    phase = np.exp(-2j * np.pi * i * tau[None, :] / ofdm.delay_period)   # (Nsc, P)
    scale = math.sqrt(arr.n_tx * arr.n_rx)
    a_r = steering_matrix(arr.n_rx, arr.spacing_d, lam, tr)              # (Nsc, NR, P)
    a_t = steering_matrix(arr.n_tx, arr.spacing_d, lam, tt)              # (Nsc, NT, P)
    return tau, tt, tr, h, lam, i, phase, scale, a_r, a_t


def signal_mean(scene: Scene, paths: Sequence[PathParams], pilots: PilotConfig) -> np.ndarray:
    """Noise-free received signal ``mu_i = H_i x_i``.

    Returns ``(N_sc, N_R)`` for shared pilots, ``(N, N_sc, N_R)`` otherwise.
    """
    *_, h, _, _, phase, scale, a_r, a_t = _model_terms(scene, paths)
    x, _ = pilots._symbols()
    b = np.einsum("itk,nit->nik", a_t.conj(), x)                          # a_T^H x
    mu = np.einsum("irk,ik,nik->nir", a_r, scale * h[None, :] * phase, b)
    return mu[0] if pilots.tx_symbols.ndim == 2 else mu


def mean_jacobian(scene: Scene, paths: Sequence[PathParams], pilots: PilotConfig) -> np.ndarray:
    """Analytic ``d mu / d eta``, shape ``(S, N_sc, N_R, 5P)`` (S pilot rows)."""
    arr = scene.array
    _, tt, tr, h, lam, i, phase, scale, a_r, a_t = _model_terms(scene, paths)
    x, _ = pilots._symbols()
    kappa = (2 * np.pi / lam)[:, None, None] * arr.spacing_d               # (Nsc,1,1)
    m_r = (np.arange(arr.n_rx) - (arr.n_rx - 1) / 2)[None, :, None]
    m_t = (np.arange(arr.n_tx) - (arr.n_tx - 1) / 2)[None, :, None]
    da_r = a_r * (1j * m_r * kappa * np.cos(tr)[None, None, :])
    da_t = a_t * (1j * m_t * kappa * np.cos(tt)[None, None, :])

    b = np.einsum("itk,nit->nik", a_t.conj(), x)                          # (S,Nsc,P)
    db = np.einsum("itk,nit->nik", da_t.conj(), x)
    unit_gain = scale * phase                                              # d g / d h
    g = unit_gain * h[None, :]

    base = np.einsum("irk,ik,nik->nirk", a_r, unit_gain, b)                # d mu / d h_re
    d_h_re = base
    d_h_im = 1j * base
    d_tau = base * h * (-2j * np.pi * i / scene.ofdm.delay_period)[None, :, None, :]
    d_tr = np.einsum("irk,ik,nik->nirk", da_r, g, b)
    d_tt = np.einsum("irk,ik,nik->nirk", a_r, g, db)

    stacked = np.stack([d_tau, d_tt, d_tr, d_h_re, d_h_im], axis=-1)       # (S,Nsc,NR,P,5)
    s, nsc, nr, p, _ = stacked.shape
    return stacked.reshape(s, nsc, nr, 5 * p)


def _gram(jac: np.ndarray) -> np.ndarray:
    d = jac.reshape(-1, jac.shape[-1])
    g = np.real(d.conj().T @ d)
    return 0.5 * (g + g.T)


def fim_eta(scene: Scene, paths: Sequence[PathParams], pilots: PilotConfig) -> Fim:
    """Analytic FIM over the channel parameters."""
    x, weight = pilots._symbols()
    if not np.any(x):
        raise SingularModelError("all pilots are zero; the observation carries no information")
    jac = mean_jacobian(scene, paths, pilots)
    gram = _gram(jac)
    factor = (2.0 / pilots.noise_psd) * weight
    return Fim(factor * gram, ParamOrdering.channel(len(paths)), gram, factor)


def _perturbed(paths: Sequence[PathParams], k: int, tag: str, delta: float) -> list[PathParams]:
    out = list(paths)
    out[k] = replace(out[k], **{tag: getattr(out[k], tag) + delta})
    return out


def fim_eta_numeric(scene: Scene, paths: Sequence[PathParams], pilots: PilotConfig,
                    step: float = 1e-5) -> Fim:
    """Finite-difference oracle for :func:`fim_eta`.

    ``step`` is dimensionless: delays move by ``step * N_sc * T_s``, angles by
    ``step`` radians and gain components by ``step``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x, weight = pilots._symbols()
    scales = {"tau": scene.ofdm.delay_period, "theta_t": 1.0, "theta_r": 1.0,
              "h_re": 1.0, "h_im": 1.0}
    central, half = [], []
    for k in range(len(paths)):
        for tag in PARAM_TAGS:
            for h, out in ((step, central), (step / 2, half)):
                dh = h * scales[tag]
                plus = signal_mean(scene, _perturbed(paths, k, tag, dh), pilots)
                minus = signal_mean(scene, _perturbed(paths, k, tag, -dh), pilots)
                out.append((plus - minus) / (2 * dh))

    def flat(cols):
        jac = np.stack(cols, axis=-1)
        return jac.reshape(-1, jac.shape[-1])

    d = flat(central)
    raw = (2.0 / pilots.noise_psd) * weight * np.real(d.conj().T @ d)
    # the cross product of two step sizes is symmetric only while the
    # truncation error of the central differences is negligible
    cross = np.real(d.conj().T @ flat(half))
    asym = np.abs(cross - cross.T).max()
    if asym > 1e-6 * max(np.abs(cross).max(), 1e-300):
        warnings.warn(f"finite-difference FIM asymmetric by {asym:.3g}; step may be too large")
    return Fim(0.5 * (raw + raw.T), ParamOrdering.channel(len(paths)))


# -- geometry transform -------------------------------------------------------

def transform_matrix(scene: Scene, paths: Sequence[PathParams] | None = None) -> TransformMatrix:
    """Analytic Jacobian of the channel parameters w.r.t. position parameters.

    Rows follow ``[x, y, h0re, h0im, s1x, s1y, h1re, h1im, ...]`` and columns
    ``[tau, theta_t, theta_r, h_re, h_im]`` per path.
    """
    if paths is None:
        paths = path_params_from_geometry(scene)
    p = len(paths)
    c = SPEED_OF_LIGHT
    t = np.zeros((4 * p, 5 * p))
    d0 = scene.ap.distance_to(scene.target)
    if d0 == 0:
        raise DegenerateGeometryError("target coincides with the AP")
    th0 = paths[0].theta_t
    u0 = np.array([math.cos(th0), math.sin(th0)])
    n0 = np.array([-math.sin(th0), math.cos(th0)])
    t[0:2, 0] = u0 / c
    t[0:2, 1] = n0 / d0
    t[0:2, 2] = n0 / d0
    for k in range(p):
        t[4 * k + 2, 5 * k + 3] = 1.0
        t[4 * k + 3, 5 * k + 4] = 1.0
    for k in range(1, p):
        s = scene.scatterers[k - 1]
        d1 = scene.ap.distance_to(s)
        d2 = scene.target.distance_to(s)
        if d1 == 0 or d2 == 0:
            raise DegenerateGeometryError(f"scatterer {k} coincides with an endpoint")
        tt, tr = paths[k].theta_t, paths[k].theta_r
        ut = np.array([math.cos(tt), math.sin(tt)])
        ur = np.array([math.cos(tr), math.sin(tr)])
        nt = np.array([-math.sin(tt), math.cos(tt)])
        nr = np.array([-math.sin(tr), math.cos(tr)])
        col = 5 * k
        # target position rows
        t[0:2, col] = -ur / c
        t[0:2, col + 2] = -nr / d2
        # scatterer rows
        rows = slice(4 * k, 4 * k + 2)
        t[rows, col] = (ut + ur) / c
        t[rows, col + 1] = nt / d1
        t[rows, col + 2] = nr / d2
    return TransformMatrix(t, ParamOrdering.position(p), ParamOrdering.channel(p))


def _eta_vector(scene: Scene, coefficients) -> np.ndarray:
    paths = path_params_from_geometry(scene, coefficients)
    return np.array([[q.tau, q.theta_t, q.theta_r, q.h_re, q.h_im] for q in paths]).ravel()


def transform_matrix_numeric(scene: Scene, paths: Sequence[PathParams] | None = None,
                             step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of the geometry map (oracle for :func:`transform_matrix`)."""
    if paths is None:
        paths = path_params_from_geometry(scene)
    h = np.array([q.h for q in paths])
    p = len(paths)
    base = np.concatenate([[scene.target.x, scene.target.y, h[0].real, h[0].imag]]
                          + [[s.x, s.y, hk.real, hk.imag]
                             for s, hk in zip(scene.scatterers, h[1:])])

    def eta_of(v):
        target = Location(v[0], v[1])
        coeffs = v[2::4] + 1j * v[3::4]
        scat = tuple(Location(v[4 * k], v[4 * k + 1]) for k in range(1, p))
        sc = replace(scene, target=target, scatterers=scat, coefficients=tuple(coeffs))
        return _eta_vector(sc, coeffs)

    angle_cols = np.zeros(5 * p, dtype=bool)
    angle_cols[1::5] = True
    angle_cols[2::5] = True
    jac = np.zeros((4 * p, 5 * p))
    for a in range(4 * p):
        dv = np.zeros_like(base)
        dv[a] = step
        diff = eta_of(base + dv) - eta_of(base - dv)
        diff[angle_cols] = wrap_angle(diff[angle_cols])
        jac[a] = diff / (2 * step)
    return jac


# -- bounds -------------------------------------------------------------------

def equilibrated_condition(matrix: np.ndarray) -> float:
    diag = np.diag(matrix)
    if np.any(diag <= 0):
        return math.inf
    s = 1.0 / np.sqrt(diag)
    return float(np.linalg.cond(matrix * s[:, None] * s[None, :]))


def _position_block_inverse(j_tilde: np.ndarray) -> np.ndarray:
    cond = equilibrated_condition(j_tilde)
    if not cond <= SINGULAR_CONDITION:
        raise SingularFimError(
            f"position-space FIM is singular (condition number {cond:.3g})", cond)
    # solve in the equilibrated basis, then undo the scaling
    s = 1.0 / np.sqrt(np.diag(j_tilde))
    scaled = j_tilde * s[:, None] * s[None, :]
    try:
        factor = scipy.linalg.cho_factor(scaled, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularFimError("position-space FIM is not positive definite", cond) from exc
    rhs = np.zeros((len(s), 2))
    rhs[0, 0] = rhs[1, 1] = 1.0
    cols = scipy.linalg.cho_solve(factor, rhs)[:2]
    block = cols * s[:2, None] * s[None, :2]
    return 0.5 * (block + block.T)


def crlb_location(fim: Fim, t: TransformMatrix) -> CrlbResult:
    """Position error bound ``sqrt(tr [(T J T^T)^-1]_{2x2})``."""
    if fim.gram is None:
        return crlb_from_position_fim(t.matrix @ fim.matrix @ t.matrix.T)
    g_tilde = t.matrix @ fim.gram @ t.matrix.T
    g_tilde = 0.5 * (g_tilde + g_tilde.T)
    unit_cov = _position_block_inverse(g_tilde)
    eps = math.sqrt(max(np.trace(unit_cov), 0.0)) / math.sqrt(fim.factor)
    return CrlbResult(eps, unit_cov / fim.factor, fim.factor * g_tilde)


def crlb_from_position_fim(j_tilde: np.ndarray) -> CrlbResult:
    j_tilde = np.asarray(j_tilde, dtype=float)
    j_tilde = 0.5 * (j_tilde + j_tilde.T)
    cov = _position_block_inverse(j_tilde)
    return CrlbResult(float(math.sqrt(max(np.trace(cov), 0.0))), cov, j_tilde)


def crlb_perturbed(fim_tilde, prior: PerturbationPrior) -> CrlbResult:
    """Bound with a Gaussian position prior added to the position block.

    ``fim_tilde`` is a position-space FIM (array) or a :class:`CrlbResult`.

    With ``C`` the unperturbed 2x2 position covariance, the prior turns it
    into ``(C^-1 + I/sigma_p^2)^-1``, evaluated in the eigenbasis of ``C``
    and capped at ``epsilon`` so the ordering survives rounding. A singular
    unperturbed FIM falls back to adding the prior directly.
    """
    if isinstance(fim_tilde, CrlbResult):
        base = fim_tilde
    else:
        j = np.array(fim_tilde, dtype=float, copy=True)
        try:
            base = crlb_from_position_fim(j)
        except SingularFimError:
            j[0, 0] += prior.information
            j[1, 1] += prior.information
            return crlb_from_position_fim(j)
    info = prior.information
    lam, vec = np.linalg.eigh(base.covariance_2x2)
    lam = np.maximum(lam, 0.0)
    shrunk = lam / (1.0 + lam * info)
    new_cov = (vec * shrunk) @ vec.T
    eps2 = min(float(np.sum(shrunk)), base.epsilon ** 2)
    j = np.array(base.fim_position, dtype=float, copy=True)
    j[0, 0] += info
    j[1, 1] += info
    return CrlbResult(math.sqrt(max(eps2, 0.0)), 0.5 * (new_cov + new_cov.T), j)


def scene_crlb(scene: Scene, snr_db: float = 20.0, n_symbols: int = 1,
               paths: Sequence[PathParams] | None = None) -> CrlbResult:
    """Convenience pipeline: geometry -> FIM -> transform -> bound."""
    if paths is None:
        paths = path_params_from_geometry(scene)
    pilots = PilotConfig.default(scene, snr_db, n_symbols)
    return crlb_location(fim_eta(scene, paths, pilots), transform_matrix(scene, paths))
