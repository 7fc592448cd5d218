"""Exact desk-scale reference dynamics.

Propagates the full N-body density (or pure state) under
d rho / dt = -i [H, rho] by eigendecomposition of the assembled
Hamiltonian, which at the supported dimensions is exact to roundoff and
keeps time-stepping error out of every comparison against the stochastic
engine.  Also provides the (anti)symmetrizers for identical-particle
groups and exact observable series.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, NullProjectionError, ShapeError
from .linalg import herm_eig
from .system import SystemSpec, assemble_full_hamiltonian, product_density

#: Permutation groups are enumerated explicitly; 6! = 720 is the cap.
MAX_GROUP_SIZE = 6


@dataclass
class FullState:
    """Exact N-body state at one time (density and/or pure vector)."""

    t: float
    rhoN: np.ndarray = None
    psiN: np.ndarray = None


def initial_pure_vector(spec: SystemSpec, tol=1e-10) -> np.ndarray:
    """Tensor product of the pure vectors underlying the initial densities.

    Each one-body initial density must be (numerically) a rank-1
    projector; the dominant natural orbital is taken as the vector.
    """
    vecs = []
    for k, rho in enumerate(spec.initial):
        w, v = herm_eig(rho)
        if abs(w[-1] - 1.0) > tol or (len(w) > 1 and abs(w[-2]) > tol):
            raise ContractViolationError(
                f"initial density {k} is not pure (occupations {w})")
        vecs.append(v[:, -1])
    out = vecs[0]
    for v in vecs[1:]:
        out = np.kron(out, v)
    return out


def propagate_exact(spec: SystemSpec, t_grid, pure: bool = False) -> list:
    """Exact states on ``t_grid`` via U(t) = V exp(-i w t) V^dag.

    With ``pure=True`` the initial state must be a product of pure
    one-body densities and the pure vector is propagated alongside the
    density.
    """
    h = assemble_full_hamiltonian(spec)
    w, v = herm_eig(h)
    rho0 = product_density(spec)
    rho0_eig = v.conj().T @ rho0 @ v
    psi0_eig = None
    if pure:
        psi0_eig = v.conj().T @ initial_pure_vector(spec)
    states = []
    for t in np.asarray(t_grid, dtype=float):
        phase = np.exp(-1j * w * t)
        rho = v @ (phase[:, None] * rho0_eig * phase.conj()[None, :]) @ v.conj().T
        rho = 0.5 * (rho + rho.conj().T)
        psi = v @ (phase * psi0_eig) if pure else None
        states.append(FullState(t=float(t), rhoN=rho, psiN=psi))
    return states


def _permutation_sign(perm) -> int:
    sign = 1
    seen = [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        length = 0
        j = i
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def symmetrize_vector(v, spec: SystemSpec, norm_tol=1e-12) -> np.ndarray:
    """Project onto the (anti)symmetric subspace of each identical group.

    Applies (1/|G|) sum_pi (+-1)^pi P_pi over the permutations of every
    boson (plus sign) or fermion (permutation sign) group declared in the
    spec, then normalizes.  Groups act on disjoint particles, so the
    projectors commute and are applied in sequence.
    """
    v = np.ascontiguousarray(v, dtype=complex)
    dims = spec.dims
    if v.shape != (spec.full_dim,):
        raise ShapeError(
            f"vector has shape {v.shape}, expected ({spec.full_dim},)")
    original_norm = np.linalg.norm(v)
    if original_norm == 0.0:
        raise NullProjectionError("cannot symmetrize the zero vector")
    tensor = v.reshape(dims)
    for indices, sign in spec.statistics_groups():
        if len(indices) > MAX_GROUP_SIZE:
            raise ShapeError(
                f"identical-particle group of size {len(indices)} exceeds "
                f"the supported maximum {MAX_GROUP_SIZE}")
        acc = np.zeros_like(tensor)
        for perm in itertools.permutations(range(len(indices))):
            axes = list(range(len(dims)))
            for slot, src in zip(indices, perm):
                axes[slot] = indices[src]
            factor = _permutation_sign(perm) if sign < 0 else 1
            acc += factor * np.transpose(tensor, axes)
        tensor = acc / math.factorial(len(indices))
    out = tensor.reshape(-1)
    norm = np.linalg.norm(out)
    if norm < norm_tol * original_norm:
        raise NullProjectionError(
            "projection annihilated the state (wrong exchange symmetry)")
    return out / norm


def exact_observable(states, obs, dims) -> np.ndarray:
    """Tr{(x)_k A_k rho(t)} on every state; the result is real."""
    a = obs.full_matrix(dims)
    out = np.empty(len(states))
    for i, st in enumerate(states):
        if st.rhoN is None:
            raise ShapeError("exact_observable needs density-mode states")
        if st.rhoN.shape != a.shape:
            raise ShapeError(
                f"observable dim {a.shape[0]} != state dim {st.rhoN.shape[0]}")
        val = complex(np.trace(a @ st.rhoN))
        if abs(val.imag) > 1e-10:
            raise ContractViolationError(
                f"observable develops imaginary part {val.imag:.3e}")
        out[i] = val.real
    return out
