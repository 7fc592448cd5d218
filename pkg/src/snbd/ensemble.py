"""Monte Carlo ensemble engine.

Runs M independent trajectories and accumulates everything needed
downstream: per-trajectory products for observables, tensor products of
the one-body densities (optional, desk-scale validation only), and the
reference-vector contractions used for wavefunction recovery.

Trajectories are grouped into fixed blocks.  A block is simultaneously
the unit of work handed to a worker, the unit of vectorized propagation,
and the resampling unit for jackknife error bars; block boundaries depend
only on (M, n_blocks), so results are bitwise independent of the worker
count and of how a run is split and merged.
"""

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    DimensionLimitError,
    IncompatibleAccumulatorError,
    MissingDataError,
    ShapeError,
)
from .linalg import frozen_cmatrix, require_hermitian
from .propagator import (
    NOISE_CHUNK_STEPS,
    _validate_grid,
    positivity_tolerance,
    propagate_block,
)
from .system import SystemSpec

#: Default cap on the memory of the optional full-density accumulation.
DEFAULT_MEMORY_LIMIT = 512 * 1024 * 1024

#: Default number of trajectory blocks (jackknife / work / batch units).
DEFAULT_N_BLOCKS = 50


@dataclass(frozen=True)
class ObservableSpec:
    """A product observable: one Hermitian factor per particle (None = identity)."""

    name: str
    factors: tuple

    def __post_init__(self):
        if not self.name:
            raise ConfigError("observable needs a nonempty name")
        factors = tuple(
            None if f is None else frozen_cmatrix(
                require_hermitian(f, f"observable {self.name!r}, factor {k}"))
            for k, f in enumerate(self.factors)
        )
        object.__setattr__(self, "factors", factors)

    def materialize(self, dims) -> list:
        """Concrete per-particle factor matrices, identities filled in."""
        if len(self.factors) != len(dims):
            raise ShapeError(
                f"observable {self.name!r}: {len(self.factors)} factors for "
                f"{len(dims)} particles")
        out = []
        for k, (f, d) in enumerate(zip(self.factors, dims)):
            if f is None:
                out.append(np.eye(d, dtype=complex))
            else:
                if f.shape[0] != d:
                    raise ShapeError(
                        f"observable {self.name!r}, factor {k}: dim "
                        f"{f.shape[0]} != particle dim {d}")
                out.append(f)
        return out

    def full_matrix(self, dims) -> np.ndarray:
        mats = self.materialize(dims)
        out = mats[0]
        for m in mats[1:]:
            out = np.kron(out, m)
        return out


@dataclass(frozen=True)
class EnsembleOptions:
    """Execution knobs that do not change the physics of a run."""

    n_blocks: int = DEFAULT_N_BLOCKS
    worker_count: int = 1
    full_density: bool = False
    recovery_refs: tuple = None     # per-particle reference vectors, or None
    blowup_policy: str = "abort"    # "abort" | "skip"
    positivity_tol: float = None    # default: positivity_tolerance(dt, spec)
    noise_chunk_steps: int = NOISE_CHUNK_STEPS
    memory_limit_bytes: int = DEFAULT_MEMORY_LIMIT


def block_edges(m: int, n_blocks: int) -> np.ndarray:
    """Trajectory-index boundaries of the fixed blocks (n_blocks + 1 edges)."""
    if m < 1:
        raise ConfigError(f"M must be >= 1, got {m}")
    n_blocks = min(n_blocks, m)
    base, extra = divmod(m, n_blocks)
    sizes = [base + (1 if b < extra else 0) for b in range(n_blocks)]
    return np.concatenate([[0], np.cumsum(sizes)])


def run_fingerprint(spec: SystemSpec, m, t_final, dt, record_stride,
                    master_seed, n_blocks, observables, full_density,
                    recovery_refs, blowup_policy) -> str:
    """Digest of everything that determines a run's results.

    Execution-layout knobs (worker count, noise chunking, memory limits)
    are deliberately excluded: they do not change any output byte.
    """
    def mat(a):
        return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()

    payload = {
        "particles": [
            {"dim": p.dim, "h": mat(p.h), "statistics": p.statistics}
            for p in spec.particles
        ],
        "terms": [
            {"omega": repr(t.omega), "ops": [mat(o) for o in t.ops]}
            for t in spec.terms
        ],
        "initial": [mat(r) for r in spec.initial],
        "M": int(m),
        "t_final": repr(float(t_final)),
        "dt": repr(float(dt)),
        "record_stride": int(record_stride),
        "master_seed": int(master_seed),
        "n_blocks": int(min(n_blocks, m)),
        "observables": [
            {"name": o.name,
             "factors": [None if f is None else mat(f) for f in o.factors]}
            for o in observables
        ],
        "full_density": bool(full_density),
        "recovery_refs": (None if recovery_refs is None
                          else [mat(np.asarray(r, complex)) for r in recovery_refs]),
        "blowup_policy": blowup_policy,
    }
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class EnsembleAccumulator:
    """Block-resolved running sums of a (possibly partial) ensemble run.

    All per-block arrays are zero (or +inf for minima) on blocks this
    accumulator does not cover, so merging partial accumulators is plain
    elementwise addition; summing blocks in ascending index order makes
    every estimate bitwise reproducible.
    """

    fingerprint: str
    dims: tuple
    times: np.ndarray                # (T,)
    edges: np.ndarray                # (n_blocks + 1,)
    launched: np.ndarray             # (n_blocks,) trajectories run per block
    counts: np.ndarray               # (n_blocks, T) active trajectories
    obs_names: tuple
    obs_sum: np.ndarray              # (n_obs, n_blocks, T) complex
    obs_sq: np.ndarray               # (n_obs, n_blocks, T) real, sum |prod|^2
    rho_sum: np.ndarray = None       # (n_blocks, T, D, D) complex
    vec_sum: np.ndarray = None       # (n_blocks, T, D) complex
    recovery_refs: tuple = None
    min_eig: np.ndarray = None       # (n_blocks, T, N)
    max_trace_dev: float = 0.0
    max_herm_dev: float = 0.0
    blowups: tuple = ()
    positivity_skips: tuple = ()

    @property
    def n_blocks(self) -> int:
        return len(self.edges) - 1

    @property
    def count(self) -> int:
        """Trajectories launched into this accumulator."""
        return int(self.launched.sum())

    @property
    def active_counts(self) -> np.ndarray:
        """(T,) trajectories contributing at each recorded time."""
        return self.counts.sum(axis=0)

    @property
    def sum_rhoN(self) -> np.ndarray:
        if self.rho_sum is None:
            raise MissingDataError("full-density mode was not enabled")
        return self.rho_sum.sum(axis=0)

    @property
    def sum_vec(self) -> np.ndarray:
        if self.vec_sum is None:
            raise MissingDataError(
                "no reference vectors were registered before the run")
        return self.vec_sum.sum(axis=0)

    def sum_obs(self, name) -> np.ndarray:
        return self.obs_sum[self._obs_index(name)].sum(axis=0)

    def _obs_index(self, name) -> int:
        try:
            return self.obs_names.index(name)
        except ValueError:
            raise MissingDataError(
                f"unknown observable {name!r}; registered: {list(self.obs_names)}"
            ) from None


def _batched_kron(rhos_by_particle) -> np.ndarray:
    """Per-trajectory tensor product of the one-body densities: (B, D, D)."""
    out = rhos_by_particle[0]
    for nxt in rhos_by_particle[1:]:
        b, da, _ = out.shape
        db = nxt.shape[1]
        out = np.einsum("bij,bkl->bikjl", out, nxt).reshape(b, da * db, da * db)
    return out


def _batched_refvec(rhos_by_particle, refs) -> np.ndarray:
    """Per-trajectory tensor product of rho_k |i_k>: (B, D)."""
    out = rhos_by_particle[0] @ refs[0]
    for rho, ref in zip(rhos_by_particle[1:], refs[1:]):
        nxt = rho @ ref
        b, da = out.shape
        out = np.einsum("bi,bj->bij", out, nxt).reshape(b, da * nxt.shape[1])
    return out


def _block_task(spec, master_seed, block, start, count, t_final, dt,
                record_stride, n_times, obs_stacks, refs, full_density,
                policy, positivity_tol, noise_chunk_steps):
    """Propagate one block and return its partial sums (worker-safe)."""
    n = spec.n_particles
    dims = spec.dims
    full_dim = int(np.prod(dims))
    n_obs = obs_stacks[0].shape[0] if obs_stacks else 0

    counts = np.zeros(n_times, dtype=np.int64)
    obs_sum = np.zeros((n_obs, n_times), dtype=complex)
    obs_sq = np.zeros((n_obs, n_times))
    rho_sum = (np.zeros((n_times, full_dim, full_dim), dtype=complex)
               if full_density else None)
    vec_sum = (np.zeros((n_times, full_dim), dtype=complex)
               if refs is not None else None)
    min_eig = np.full((n_times, n), np.inf)

    def on_record(r, t, rhos, active, mins):
        counts[r] = int(active.sum())
        if not active.any():
            return
        # inactive (diverged) trajectories still sit in the batch; their
        # entries may overflow but are masked out of every sum
        with np.errstate(over="ignore", invalid="ignore"):
            if n_obs:
                vals = np.ones((count, n_obs), dtype=complex)
                for k in range(n):
                    vals *= np.einsum("aij,bji->ba", obs_stacks[k], rhos[k])
                kept = vals[active]
                obs_sum[:, r] = kept.sum(axis=0)
                obs_sq[:, r] = (kept.real ** 2 + kept.imag ** 2).sum(axis=0)
            if full_density:
                rho_sum[r] = _batched_kron(rhos)[active].sum(axis=0)
            if refs is not None:
                vec_sum[r] = _batched_refvec(rhos, refs)[active].sum(axis=0)
        min_eig[r] = mins[active].min(axis=0)

    stats = propagate_block(
        spec, master_seed, start, count, t_final, dt, record_stride,
        on_record, positivity_tol=positivity_tol, policy=policy,
        noise_chunk_steps=noise_chunk_steps)
    return block, counts, obs_sum, obs_sq, rho_sum, vec_sum, min_eig, stats


def run_ensemble(spec: SystemSpec, m: int, t_final: float, dt: float,
                 record_stride: int = 1, observables=(), master_seed: int = 0,
                 options: EnsembleOptions = EnsembleOptions()) -> EnsembleAccumulator:
    """Run M trajectories and return the filled accumulator.

    Trajectory j always uses the Philox stream keyed by (master_seed, j);
    block boundaries depend only on (M, n_blocks).  The result is
    therefore identical for any worker count.
    """
    n_steps = _validate_grid(t_final, dt, record_stride)
    n_times = n_steps // record_stride + 1
    observables = tuple(observables)
    names = tuple(o.name for o in observables)
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate observable names in {names}")

    full_dim = spec.full_dim
    if options.full_density:
        per_matrix = full_dim * full_dim * 16
        n_blocks = min(options.n_blocks, m)
        total = per_matrix * n_times * (n_blocks + 1)
        if total > options.memory_limit_bytes:
            raise DimensionLimitError(
                f"full-density accumulation needs ~{total // (1 << 20)} MiB, "
                f"over the {options.memory_limit_bytes // (1 << 20)} MiB limit")

    refs = None
    if options.recovery_refs is not None:
        refs = tuple(
            np.ascontiguousarray(r, dtype=complex)
            for r in options.recovery_refs)
        if len(refs) != spec.n_particles:
            raise ConfigError(
                f"{len(refs)} reference vectors for {spec.n_particles} particles")
        for k, (r, d) in enumerate(zip(refs, spec.dims)):
            if r.shape != (d,):
                raise ConfigError(
                    f"reference vector {k} has shape {r.shape}, expected ({d},)")

    obs_stacks = []
    if observables:
        per_particle = [o.materialize(spec.dims) for o in observables]
        obs_stacks = [
            np.stack([per_particle[a][k] for a in range(len(observables))])
            for k in range(spec.n_particles)
        ]

    positivity_tol = options.positivity_tol
    if positivity_tol is None:
        positivity_tol = positivity_tolerance(dt, spec, t_final)

    edges = block_edges(m, options.n_blocks)
    n_blocks = len(edges) - 1
    times = np.arange(n_times) * (record_stride * dt)
    fingerprint = run_fingerprint(
        spec, m, t_final, dt, record_stride, master_seed, options.n_blocks,
        observables, options.full_density, refs, options.blowup_policy)

    acc = EnsembleAccumulator(
        fingerprint=fingerprint,
        dims=spec.dims,
        times=times,
        edges=edges,
        launched=np.zeros(n_blocks, dtype=np.int64),
        counts=np.zeros((n_blocks, n_times), dtype=np.int64),
        obs_names=names,
        obs_sum=np.zeros((len(names), n_blocks, n_times), dtype=complex),
        obs_sq=np.zeros((len(names), n_blocks, n_times)),
        rho_sum=(np.zeros((n_blocks, n_times, full_dim, full_dim), dtype=complex)
                 if options.full_density else None),
        vec_sum=(np.zeros((n_blocks, n_times, full_dim), dtype=complex)
                 if refs is not None else None),
        recovery_refs=refs,
        min_eig=np.full((n_blocks, n_times, spec.n_particles), np.inf),
    )

    tasks = [
        (spec, master_seed, b, int(edges[b]), int(edges[b + 1] - edges[b]),
         t_final, dt, record_stride, n_times, obs_stacks, refs,
         options.full_density, options.blowup_policy, positivity_tol,
         options.noise_chunk_steps)
        for b in range(n_blocks)
    ]
    if options.worker_count > 1:
        with ProcessPoolExecutor(max_workers=options.worker_count) as pool:
            results = list(pool.map(_block_task_star, tasks))
    else:
        results = [_block_task(*t) for t in tasks]

    for block, counts, obs_sum, obs_sq, rho_sum, vec_sum, min_eig, stats in results:
        acc.launched[block] = edges[block + 1] - edges[block]
        acc.counts[block] = counts
        if len(names):
            acc.obs_sum[:, block] = obs_sum
            acc.obs_sq[:, block] = obs_sq
        if rho_sum is not None:
            acc.rho_sum[block] = rho_sum
        if vec_sum is not None:
            acc.vec_sum[block] = vec_sum
        acc.min_eig[block] = min_eig
        acc.max_trace_dev = max(acc.max_trace_dev, stats.max_trace_dev)
        acc.max_herm_dev = max(acc.max_herm_dev, stats.max_herm_dev)
        acc.blowups = tuple(sorted(acc.blowups + stats.blowups))
        acc.positivity_skips = tuple(
            sorted(acc.positivity_skips + stats.positivity_skips))
    return acc


def _block_task_star(args):
    return _block_task(*args)


def merge_accumulators(a: EnsembleAccumulator,
                       b: EnsembleAccumulator) -> EnsembleAccumulator:
    """Combine two partial accumulators of the same run configuration."""
    if a.fingerprint != b.fingerprint:
        raise IncompatibleAccumulatorError(
            "accumulators come from different run configurations")
    if ((a.launched > 0) & (b.launched > 0)).any():
        raise IncompatibleAccumulatorError(
            "accumulators overlap in trajectory blocks")
    merged = replace(
        a,
        launched=a.launched + b.launched,
        counts=a.counts + b.counts,
        obs_sum=a.obs_sum + b.obs_sum,
        obs_sq=a.obs_sq + b.obs_sq,
        rho_sum=None if a.rho_sum is None else a.rho_sum + b.rho_sum,
        vec_sum=None if a.vec_sum is None else a.vec_sum + b.vec_sum,
        min_eig=np.minimum(a.min_eig, b.min_eig),
        max_trace_dev=max(a.max_trace_dev, b.max_trace_dev),
        max_herm_dev=max(a.max_herm_dev, b.max_herm_dev),
        blowups=tuple(sorted(a.blowups + b.blowups)),
        positivity_skips=tuple(sorted(a.positivity_skips + b.positivity_skips)),
    )
    return merged


def empty_like_run(acc: EnsembleAccumulator) -> EnsembleAccumulator:
    """Identity element for merge_accumulators with acc's configuration."""
    return replace(
        acc,
        launched=np.zeros_like(acc.launched),
        counts=np.zeros_like(acc.counts),
        obs_sum=np.zeros_like(acc.obs_sum),
        obs_sq=np.zeros_like(acc.obs_sq),
        rho_sum=None if acc.rho_sum is None else np.zeros_like(acc.rho_sum),
        vec_sum=None if acc.vec_sum is None else np.zeros_like(acc.vec_sum),
        min_eig=np.full_like(acc.min_eig, np.inf),
        max_trace_dev=0.0,
        max_herm_dev=0.0,
        blowups=(),
        positivity_skips=(),
    )


def restrict_to_blocks(acc: EnsembleAccumulator, blocks) -> EnsembleAccumulator:
    """Partial accumulator covering only the given block indices."""
    keep = np.zeros(acc.n_blocks, dtype=bool)
    keep[list(blocks)] = True
    out = empty_like_run(acc)
    out.launched[keep] = acc.launched[keep]
    out.counts[keep] = acc.counts[keep]
    out.obs_sum[:, keep] = acc.obs_sum[:, keep]
    out.obs_sq[:, keep] = acc.obs_sq[:, keep]
    if acc.rho_sum is not None:
        out.rho_sum[keep] = acc.rho_sum[keep]
    if acc.vec_sum is not None:
        out.vec_sum[keep] = acc.vec_sum[keep]
    out.min_eig[keep] = acc.min_eig[keep]
    out.max_trace_dev = acc.max_trace_dev
    out.max_herm_dev = acc.max_herm_dev
    return out


def estimate_density(acc: EnsembleAccumulator) -> np.ndarray:
    """Monte Carlo estimate of the full density at every recorded time."""
    total = acc.sum_rhoN
    m = acc.active_counts
    if (m == 0).any():
        raise MissingDataError("no active trajectories at some recorded time")
    return total / m[:, None, None]


@dataclass
class ObservableEstimate:
    """Ensemble mean of a product observable with its standard error."""

    times: np.ndarray
    mean: np.ndarray        # real part; the exact value is real
    stderr: np.ndarray
    mean_imag: np.ndarray   # statistical residue, |mean_imag| <~ 5 stderr

    def __iter__(self):
        return iter((self.mean, self.stderr))


def estimate_product_observable(acc: EnsembleAccumulator,
                                name: str) -> ObservableEstimate:
    """Mean and standard error of one registered product observable.

    Per trajectory the observable is the product over particles of
    Tr{A_k rho_k}; the standard error comes from the sample variance of
    those per-trajectory products (scatter measured over the complex
    plane, which also calibrates the imaginary residue of the mean).
    """
    a = acc._obs_index(name)
    tot = acc.obs_sum[a].sum(axis=0)
    ssq = acc.obs_sq[a].sum(axis=0)
    m = acc.active_counts.astype(float)
    if (m == 0).any():
        raise MissingDataError("no active trajectories at some recorded time")
    mean_c = tot / m
    var = np.zeros_like(ssq)
    many = m > 1
    resid = ssq[many] - (tot[many].real ** 2 + tot[many].imag ** 2) / m[many]
    var[many] = np.maximum(resid, 0.0) / (m[many] - 1.0)
    stderr = np.sqrt(var / m)
    return ObservableEstimate(times=acc.times, mean=mean_c.real,
                              stderr=stderr, mean_imag=mean_c.imag)


def jackknife_density_scalar(acc: EnsembleAccumulator, fn):
    """Delete-one-block jackknife of a scalar functional of the mean density.

    ``fn(rho, t_index) -> float`` is applied to the full estimate and to
    every leave-one-block-out estimate; returns (values, standard errors)
    over recorded times.  Nonlinear statistics (trace distance, fidelity)
    need this rather than a plain variance.
    """
    if acc.rho_sum is None:
        raise MissingDataError("full-density mode was not enabled")
    total = acc.rho_sum.sum(axis=0)
    m = acc.counts.sum(axis=0).astype(float)
    if (m == 0).any():
        raise MissingDataError("no active trajectories at some recorded time")
    n_times = len(acc.times)
    values = np.array([
        fn(total[t] / m[t], t) for t in range(n_times)])
    used = np.nonzero(acc.launched > 0)[0]
    if len(used) < 2:
        return values, np.zeros(n_times)
    reps = np.empty((len(used), n_times))
    for i, b in enumerate(used):
        rest = total - acc.rho_sum[b]
        m_rest = m - acc.counts[b]
        for t in range(n_times):
            reps[i, t] = fn(rest[t] / m_rest[t], t)
    g = len(used)
    se = np.sqrt((g - 1) / g * ((reps - reps.mean(axis=0)) ** 2).sum(axis=0))
    return values, se
