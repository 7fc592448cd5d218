import numpy as np
import pytest

from snbd.ensemble import (
    EnsembleOptions,
    ObservableSpec,
    block_edges,
    empty_like_run,
    estimate_density,
    estimate_product_observable,
    jackknife_density_scalar,
    merge_accumulators,
    restrict_to_blocks,
    run_ensemble,
)
from snbd.errors import (
    ConfigError,
    DimensionLimitError,
    IncompatibleAccumulatorError,
    MissingDataError,
    PositivityViolationError,
)
from snbd.linalg import trace_distance
from snbd.oracle import propagate_exact
from snbd.propagator import propagate_trajectory

from conftest import DOWN, SZ, UP, free_two_spin_system, two_spin_system

LOOSE = EnsembleOptions(positivity_tol=1e9)


def loose(**kw):
    base = dict(positivity_tol=1e9)
    base.update(kw)
    return EnsembleOptions(**base)


class TestBlockLayout:
    def test_edges_partition(self):
        edges = block_edges(10, 3)
        assert list(edges) == [0, 4, 7, 10]
        assert list(block_edges(4, 8)) == [0, 1, 2, 3, 4]

    def test_invalid_m(self):
        with pytest.raises(ConfigError):
            block_edges(0, 4)


class TestRunEnsemble:
    def test_single_deterministic_trajectory(self):
        spec = free_two_spin_system()
        acc = run_ensemble(spec, 1, 0.5, 1e-3, 100,
                           options=loose(full_density=True))
        snaps = propagate_trajectory(spec, 0.5, 1e-3, 100, rng_seed=(0, 0))
        est = estimate_density(acc)
        for i, snap in enumerate(snaps):
            expected = np.kron(snap.rhos[0], snap.rhos[1])
            assert np.abs(est[i] - expected).max() <= 1e-14

    def test_initial_time_exact_product(self, benchmark_system):
        acc = run_ensemble(benchmark_system, 32, 0.01, 1e-3, 10,
                           options=loose(full_density=True, n_blocks=4))
        est = estimate_density(acc)
        assert np.abs(est[0] - np.kron(UP, DOWN)).max() <= 1e-15

    def test_noise_free_limit_matches_oracle(self):
        spec = free_two_spin_system()
        acc = run_ensemble(spec, 3, 1.0, 1e-4, 2000,
                           options=loose(full_density=True))
        states = propagate_exact(spec, acc.times)
        for i in range(len(acc.times)):
            assert trace_distance(estimate_density(acc)[i],
                                  states[i].rhoN) <= 5e-4  # O(dt) integrator

    def test_estimate_is_hermitian_unit_trace(self, benchmark_system):
        acc = run_ensemble(benchmark_system, 64, 0.2, 1e-3, 50,
                           options=loose(full_density=True, n_blocks=8))
        est = estimate_density(acc)
        for rho in est:
            assert np.linalg.norm(rho - rho.conj().T) <= 1e-12
            assert abs(np.trace(rho) - 1.0) <= 1e-10

    def test_monitors(self, benchmark_system):
        acc = run_ensemble(benchmark_system, 16, 0.2, 1e-3, 50,
                           options=loose(n_blocks=4))
        assert acc.max_trace_dev <= 1e-12
        assert acc.max_herm_dev == 0.0
        assert acc.count == 16
        assert acc.active_counts[-1] == 16

    def test_positivity_abort_default(self, benchmark_system):
        with pytest.raises(PositivityViolationError):
            run_ensemble(benchmark_system, 8, 2.0, 1e-3, 100,
                         master_seed=5, options=EnsembleOptions(n_blocks=2))

    def test_full_density_memory_gate(self, benchmark_system):
        with pytest.raises(DimensionLimitError):
            run_ensemble(benchmark_system, 8, 0.1, 1e-3, 1,
                         options=loose(full_density=True,
                                       memory_limit_bytes=1000))

    def test_duplicate_observables_rejected(self, benchmark_system):
        obs = (ObservableSpec("a", (SZ, None)), ObservableSpec("a", (None, SZ)))
        with pytest.raises(ConfigError):
            run_ensemble(benchmark_system, 4, 0.01, 1e-3, 10, observables=obs,
                         options=LOOSE)


class TestObservables:
    def test_identity_observable(self, benchmark_system):
        obs = (ObservableSpec("one", (None, None)),)
        acc = run_ensemble(benchmark_system, 100, 0.2, 1e-3, 100,
                           observables=obs, options=loose(n_blocks=10))
        est = estimate_product_observable(acc, "one")
        assert np.abs(est.mean - 1.0).max() <= 1e-12
        # stderr picks up roundoff-level trace scatter through the variance
        # formula's cancellation; zero at any physical scale
        assert np.abs(est.stderr).max() <= 1e-8
        assert np.abs(est.mean_imag).max() <= 1e-13

    def test_product_of_traces_identity(self):
        # per-trajectory identity: prod_k Tr(A_k rho_k) = Tr(kron(A) kron(rho))
        rng = np.random.default_rng(3)
        from conftest import random_density, random_hermitian
        a1, a2 = random_hermitian(rng, 2), random_hermitian(rng, 3)
        r1, r2 = random_density(rng, 2), random_density(rng, 3)
        lhs = np.trace(a1 @ r1) * np.trace(a2 @ r2)
        rhs = np.trace(np.kron(a1, a2) @ np.kron(r1, r2))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))

    def test_estimator_identity_against_full_density(self, benchmark_system):
        obs = (ObservableSpec("sz0", (SZ, None)),
               ObservableSpec("szsz", (SZ, SZ)))
        acc = run_ensemble(benchmark_system, 200, 0.3, 1e-3, 100,
                           observables=obs, master_seed=9,
                           options=loose(full_density=True, n_blocks=20))
        est = estimate_density(acc)
        for o in obs:
            full = o.full_matrix(benchmark_system.dims)
            contracted = np.array([np.trace(full @ est[i]).real
                                   for i in range(len(acc.times))])
            product = estimate_product_observable(acc, o.name).mean
            assert np.abs(contracted - product).max() <= 1e-10

    def test_unknown_observable(self, benchmark_system):
        acc = run_ensemble(benchmark_system, 4, 0.01, 1e-3, 10, options=LOOSE)
        with pytest.raises(MissingDataError):
            estimate_product_observable(acc, "nope")

    def test_factor_validation(self):
        with pytest.raises(Exception):
            ObservableSpec("bad", (np.array([[0, 1], [0, 0]], complex),))


class TestMergeAndDeterminism:
    def _run(self, m, workers=1, seed=3):
        spec = two_spin_system()
        obs = (ObservableSpec("sz0", (SZ, None)),)
        return run_ensemble(
            spec, m, 0.2, 1e-3, 50, observables=obs, master_seed=seed,
            options=loose(full_density=True, n_blocks=8,
                          worker_count=workers,
                          recovery_refs=(np.array([1, 0], complex),
                                         np.array([0, 1], complex))))

    def test_merge_identity_element(self):
        acc = self._run(32)
        merged = merge_accumulators(acc, empty_like_run(acc))
        assert merged.count == acc.count
        assert np.array_equal(merged.obs_sum, acc.obs_sum)
        assert np.array_equal(merged.rho_sum, acc.rho_sum)

    def test_merge_counts_add(self):
        acc = self._run(32)
        a = restrict_to_blocks(acc, range(0, 3))
        b = restrict_to_blocks(acc, range(3, 8))
        merged = merge_accumulators(a, b)
        assert merged.count == acc.count
        assert np.array_equal(merged.counts, acc.counts)

    def test_split_merge_bitwise(self):
        acc = self._run(32)
        parts = [restrict_to_blocks(acc, [b]) for b in range(8)]
        merged = parts[0]
        for p in parts[1:]:
            merged = merge_accumulators(merged, p)
        assert np.array_equal(merged.rho_sum, acc.rho_sum)
        assert np.array_equal(merged.obs_sum, acc.obs_sum)
        assert np.array_equal(merged.vec_sum, acc.vec_sum)
        assert np.array_equal(merged.min_eig, acc.min_eig)

    def test_fingerprint_mismatch(self):
        a = self._run(32, seed=3)
        b = self._run(32, seed=4)
        with pytest.raises(IncompatibleAccumulatorError):
            merge_accumulators(a, b)

    def test_overlapping_blocks_rejected(self):
        acc = self._run(32)
        with pytest.raises(IncompatibleAccumulatorError):
            merge_accumulators(acc, acc)

    def test_worker_count_invariance(self):
        serial = self._run(32, workers=1)
        parallel = self._run(32, workers=4)
        assert serial.fingerprint == parallel.fingerprint
        assert np.array_equal(serial.rho_sum, parallel.rho_sum)
        assert np.array_equal(serial.obs_sum, parallel.obs_sum)
        assert np.array_equal(serial.vec_sum, parallel.vec_sum)
        assert np.array_equal(serial.counts, parallel.counts)


class TestJackknife:
    def test_constant_statistic_has_zero_error(self, benchmark_system):
        acc = run_ensemble(benchmark_system, 40, 0.1, 1e-3, 25,
                           options=loose(full_density=True, n_blocks=8))
        values, se = jackknife_density_scalar(acc, lambda rho, t: 1.0)
        assert np.all(values == 1.0)
        assert np.abs(se).max() == 0.0

    def test_oracle_distance_within_bands(self, benchmark_system):
        acc = run_ensemble(benchmark_system, 400, 0.4, 1e-3, 100,
                           master_seed=17,
                           options=loose(full_density=True, n_blocks=20))
        states = propagate_exact(benchmark_system, acc.times)
        td, se = jackknife_density_scalar(
            acc, lambda rho, t: trace_distance(rho, states[t].rhoN))
        assert td[0] <= 1e-12
        # short horizon: statistics are benign, agreement within 5 sigma
        assert np.all(td[1:] <= 5 * se[1:] + 1e-13)

    def test_requires_full_density(self, benchmark_system):
        acc = run_ensemble(benchmark_system, 8, 0.01, 1e-3, 10, options=LOOSE)
        with pytest.raises(MissingDataError):
            jackknife_density_scalar(acc, lambda rho, t: 0.0)
        with pytest.raises(MissingDataError):
            estimate_density(acc)
