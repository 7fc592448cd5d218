"""Wavefunction recovery and spectrum extraction.

For a pure product initial state, the ensemble's reference-vector sums
give the unnormalized vector

    phi_tilde(t) = M[ rho_1(t)|i_1> (x) ... (x) rho_N(t)|i_N> ] ,

whose normalization phi(t) equals the true wavefunction up to a global
phase.  The phase is the time integral of

    [ <psi0| H |phi(t)> - i d/dt <psi0|phi(t)> ] / <psi0|phi(t)> ,

(analytically real; the real part is integrated) and the corrected
psi(t) = phi(t) exp(-i Theta(t)) feeds the autocorrelation spectrum

    I(E) = (1/pi) Re  integral_0^T <psi(0)|psi(t)> exp(i E t) dt .

Everything here is post-processing over completed accumulator data and
never materializes the full N-body density: recovery works entirely with
per-trajectory tensor-product vectors accumulated during the run.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateReferenceError,
    GridError,
    MissingDataError,
    PhaseSingularityError,
    ShapeError,
)
from .ensemble import EnsembleAccumulator
from .linalg import herm_eig
from .oracle import initial_pure_vector
from .system import SystemSpec, assemble_full_hamiltonian

#: Below this overlap the phase quotient is statistically meaningless.
EPS_OVERLAP = 1e-3

#: Below this norm the reference is effectively orthogonal to the state.
EPS_REF = 1e-8


@dataclass
class RecoveryRecord:
    """Recovered-state time series and derived quantities."""

    t_grid: np.ndarray      # (T,)
    phi_tilde: np.ndarray   # (T, D) unnormalized recovered vectors
    phi: np.ndarray         # (T, D) normalized
    theta: np.ndarray       # (T,) phase integral, theta[0] = 0
    psi: np.ndarray         # (T, D) phase-corrected wavefunction
    autocorr: np.ndarray    # (T,) <psi(0)|psi(t)>


def default_reference_vectors(spec: SystemSpec) -> tuple:
    """Dominant natural orbital of each initial one-body density.

    Maximizes the initial overlap with the reference product vector,
    which postpones phase-singularity failures.
    """
    refs = []
    for rho in spec.initial:
        _, v = herm_eig(rho)
        refs.append(np.ascontiguousarray(v[:, -1]))
    return tuple(refs)


def recover_raw_vector(acc: EnsembleAccumulator,
                       eps_ref: float = EPS_REF) -> np.ndarray:
    """Ensemble mean of the reference-vector contractions: (T, D).

    Requires reference vectors to have been registered before the run.
    A mean vector with norm below ``eps_ref`` means the reference is
    nearly orthogonal to the evolved state and recovery is hopeless.
    """
    if acc.vec_sum is None:
        raise MissingDataError(
            "no reference vectors were registered before the run")
    m = acc.active_counts.astype(float)
    if (m == 0).any():
        raise MissingDataError("no active trajectories at some recorded time")
    phi_tilde = acc.sum_vec / m[:, None]
    norms = np.linalg.norm(phi_tilde, axis=1)
    if (norms < eps_ref).any():
        t_bad = float(acc.times[int(np.argmax(norms < eps_ref))])
        raise DegenerateReferenceError(
            f"recovered vector norm below {eps_ref:g} at t={t_bad:.6g}")
    return phi_tilde


def normalize_series(phi_tilde: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(phi_tilde, axis=1)
    if (norms == 0).any():
        raise DegenerateReferenceError("zero recovered vector")
    return phi_tilde / norms[:, None]


def _series_derivative_fd(values: np.ndarray, dt: float) -> np.ndarray:
    """Second-order finite differences: central inside, one-sided at the ends."""
    out = np.empty_like(values)
    if len(values) < 3:
        raise GridError("phase derivative needs at least 3 grid points")
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * dt)
    out[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dt)
    out[-1] = (3.0 * values[-1] - 4.0 * values[-2] + values[-3]) / (2.0 * dt)
    return out


def _series_derivative_fft(values: np.ndarray, dt: float) -> np.ndarray:
    """Spectral derivative (periodic extension; rings on non-periodic data)."""
    n = len(values)
    freqs = np.fft.fftfreq(n, d=dt)
    return np.fft.ifft(2j * np.pi * freqs * np.fft.fft(values))


def _check_uniform(t_grid: np.ndarray) -> float:
    t_grid = np.asarray(t_grid, dtype=float)
    if len(t_grid) < 2:
        raise GridError("need at least two grid times")
    steps = np.diff(t_grid)
    dt = steps[0]
    if dt <= 0 or not np.allclose(steps, dt, rtol=1e-9, atol=0.0):
        raise GridError("time grid must be uniform")
    return float(dt)


def phase_integrand(t_grid, phi, hamiltonian, psi0,
                    derivative: str = "fd") -> np.ndarray:
    """Complex integrand of the phase formula (its exact value is real).

    ``hamiltonian`` must be Hermitian (it is the assembled full-space
    operator in practice).
    """
    dt = _check_uniform(t_grid)
    overlap = phi @ np.conj(psi0)                    # <psi0|phi(t)>
    h_overlap = phi @ np.conj(hamiltonian @ psi0)    # <psi0|H|phi(t)>
    if derivative == "fd":
        d_overlap = _series_derivative_fd(overlap, dt)
    elif derivative == "fft":
        d_overlap = _series_derivative_fft(overlap, dt)
    else:
        raise GridError(f"unknown derivative mode {derivative!r}")
    return (h_overlap - 1j * d_overlap) / overlap


def compute_phase(t_grid, phi, hamiltonian, psi0, *,
                  eps_overlap: float = EPS_OVERLAP,
                  derivative: str = "fd") -> np.ndarray:
    """Phase series Theta(t) by cumulative trapezoid of the (real) integrand.

    Raises PhaseSingularityError at the first grid time where the overlap
    with psi0 drops below ``eps_overlap``.
    """
    overlap = np.abs(phi @ np.conj(psi0))
    small = overlap < eps_overlap
    if small.any():
        i = int(np.argmax(small))
        raise PhaseSingularityError(t=float(np.asarray(t_grid)[i]),
                                    overlap=float(overlap[i]))
    integrand = phase_integrand(t_grid, phi, hamiltonian, psi0,
                                derivative=derivative).real
    dt = _check_uniform(t_grid)
    theta = np.zeros(len(integrand))
    theta[1:] = np.cumsum(0.5 * (integrand[1:] + integrand[:-1])) * dt
    return theta


def recover_wavefunction(phi: np.ndarray, theta: np.ndarray,
                         psi0: np.ndarray = None) -> np.ndarray:
    """psi(t) = phi(t) exp(-i Theta(t)), optionally phase-aligned at t = 0.

    One constant global phase is left free by the construction; when
    ``psi0`` is given, the whole series is rotated so <psi0|psi(0)> is
    real and positive.
    """
    psi = phi * np.exp(-1j * theta)[:, None]
    if psi0 is not None:
        o = np.vdot(psi0, psi[0])
        if abs(o) > 0:
            psi = psi * (np.conj(o) / abs(o))
    return psi


def recover(acc: EnsembleAccumulator, spec: SystemSpec, psi0=None, *,
            eps_overlap: float = EPS_OVERLAP, eps_ref: float = EPS_REF,
            derivative: str = "fd") -> RecoveryRecord:
    """Full recovery pipeline from a finished accumulator.

    ``psi0`` defaults to the (pure product) initial state of the spec.
    """
    if psi0 is None:
        psi0 = initial_pure_vector(spec)
    phi_tilde = recover_raw_vector(acc, eps_ref=eps_ref)
    phi = normalize_series(phi_tilde)
    h = assemble_full_hamiltonian(spec)
    theta = compute_phase(acc.times, phi, h, psi0,
                          eps_overlap=eps_overlap, derivative=derivative)
    psi = recover_wavefunction(phi, theta, psi0)
    autocorr = psi @ np.conj(psi[0])
    return RecoveryRecord(t_grid=acc.times.copy(), phi_tilde=phi_tilde,
                          phi=phi, theta=theta, psi=psi, autocorr=autocorr)


def jackknife_recovery(acc: EnsembleAccumulator, spec: SystemSpec, fn,
                       psi0=None, *, eps_overlap: float = EPS_OVERLAP,
                       eps_ref: float = EPS_REF, derivative: str = "fd"):
    """Delete-one-block jackknife of a per-time functional of the recovery.

    ``fn(record) -> (T,) array`` is evaluated on the full recovery and on
    every leave-one-block-out recovery (the whole pipeline, phase
    included, is recomputed per replicate).  Returns (values, standard
    errors).
    """
    if acc.vec_sum is None:
        raise MissingDataError(
            "no reference vectors were registered before the run")
    if psi0 is None:
        psi0 = initial_pure_vector(spec)
    h = assemble_full_hamiltonian(spec)

    def pipeline(vec_total, m):
        phi_tilde = vec_total / m[:, None]
        norms = np.linalg.norm(phi_tilde, axis=1)
        if (norms < eps_ref).any():
            raise DegenerateReferenceError("degenerate jackknife replicate")
        phi = phi_tilde / norms[:, None]
        theta = compute_phase(acc.times, phi, h, psi0,
                              eps_overlap=eps_overlap, derivative=derivative)
        psi = recover_wavefunction(phi, theta, psi0)
        return RecoveryRecord(t_grid=acc.times, phi_tilde=phi_tilde, phi=phi,
                              theta=theta, psi=psi,
                              autocorr=psi @ np.conj(psi[0]))

    total = acc.vec_sum.sum(axis=0)
    m = acc.counts.sum(axis=0).astype(float)
    values = np.asarray(fn(pipeline(total, m)), dtype=float)
    used = np.nonzero(acc.launched > 0)[0]
    if len(used) < 2:
        return values, np.zeros_like(values)
    reps = np.empty((len(used), len(values)))
    for i, b in enumerate(used):
        reps[i] = fn(pipeline(total - acc.vec_sum[b],
                              m - acc.counts[b].astype(float)))
    g = len(used)
    se = np.sqrt((g - 1) / g * ((reps - reps.mean(axis=0)) ** 2).sum(axis=0))
    return values, se


def autocorrelation_spectrum(psi_series, t_grid, *, window: bool = False,
                             e_grid=None, oversample: int = 8,
                             e_max: float = None):
    """Spectral intensity I(E) from the recovered-state autocorrelation.

    Trapezoidal quadrature of (1/pi) Re integral_0^T c(t) exp(iEt) dt with
    c(t) = <psi(0)|psi(t)> over the uniform grid.  The default energy grid
    spans the Nyquist range of the grid spacing with spacing
    2 pi / (T * oversample); pass ``e_grid`` or ``e_max`` to narrow it.
    The optional Hann window suppresses truncation ringing; it preserves
    peak positions and broadens widths.
    """
    psi_series = np.asarray(psi_series)
    dt = _check_uniform(t_grid)
    t_grid = np.asarray(t_grid, dtype=float)
    t_span = t_grid[-1] - t_grid[0]
    if t_span <= 0:
        raise GridError("time grid must span a positive interval")
    autocorr = psi_series @ np.conj(psi_series[0])
    if window:
        autocorr = autocorr * 0.5 * (1.0 + np.cos(np.pi * (t_grid - t_grid[0])
                                                  / t_span))
    if e_grid is None:
        if e_max is None:
            e_max = np.pi / dt
        step = 2.0 * np.pi / (t_span * oversample)
        e_grid = np.arange(-e_max, e_max + 0.5 * step, step)
    else:
        e_grid = np.asarray(e_grid, dtype=float)

    weights = np.full(len(t_grid), dt)
    weights[0] = weights[-1] = 0.5 * dt
    intensity = np.empty(len(e_grid))
    chunk = 1024
    rel_t = t_grid - t_grid[0]
    for i in range(0, len(e_grid), chunk):
        phases = np.exp(1j * np.outer(e_grid[i:i + chunk], rel_t))
        intensity[i:i + chunk] = (phases @ (weights * autocorr)).real / np.pi
    return e_grid, intensity


def spectrum_peaks(e_grid, intensity, min_height_frac: float = 0.1) -> np.ndarray:
    """Energies of local maxima above ``min_height_frac`` of the global max."""
    e_grid = np.asarray(e_grid)
    intensity = np.asarray(intensity)
    if len(e_grid) != len(intensity):
        raise ShapeError("energy grid and intensity lengths differ")
    if len(intensity) < 3:
        return np.array([])
    inner = intensity[1:-1]
    is_peak = (inner > intensity[:-2]) & (inner >= intensity[2:])
    threshold = min_height_frac * intensity.max()
    idx = np.nonzero(is_peak & (inner >= threshold))[0] + 1
    return e_grid[idx]
