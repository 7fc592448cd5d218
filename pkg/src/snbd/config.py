"""Run configuration: parsing, validation and canonical serialization.

Configs are JSON.  Complex numbers are written as ``[re, im]`` pairs
(plain numbers are accepted and read as real); matrices are nested
row-major arrays of entries; vectors are flat arrays of entries.  Initial
states are given per particle, so only product initial states are
expressible.  Parse errors carry the offending field path.
"""

import json
import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ContractViolationError,
    ShapeError,
    SnbdError,
    UnsupportedInteractionError,
)
from .ensemble import DEFAULT_N_BLOCKS, ObservableSpec
from .propagator import _validate_grid
from .system import (
    DISTINGUISHABLE,
    InteractionTerm,
    ParticleSpec,
    SystemSpec,
    decompose_pair_interaction,
    shared_interaction_terms,
)

FORMATS = ("csv", "bin")
SPECTRUM_SOURCES = ("recovery", "oracle")
BLOWUP_POLICIES = ("abort", "skip")


@dataclass(frozen=True)
class TimeGrid:
    t_final: float
    dt: float
    record_stride: int = 1


@dataclass(frozen=True)
class EnsembleParams:
    m: int = 1
    master_seed: int = 0
    worker_count: int = 1
    n_blocks: int = DEFAULT_N_BLOCKS
    full_density: bool = False
    blowup_policy: str = "abort"
    positivity_tol: float = None    # None = 100 dt max|omega| default


@dataclass(frozen=True)
class RecoveryParams:
    enabled: bool = False
    reference_vectors: tuple = None
    window: bool = True
    spectrum_source: str = "recovery"


@dataclass(frozen=True)
class OutputParams:
    directory: str = "out"
    formats: tuple = FORMATS


@dataclass(frozen=True)
class RunConfig:
    system: SystemSpec
    time: TimeGrid
    ensemble: EnsembleParams = EnsembleParams()
    observables: tuple = ()
    recovery: RecoveryParams = RecoveryParams()
    output: OutputParams = OutputParams()


# ---------------------------------------------------------------------------
# low-level readers (all raise ConfigError with a field path)
# ---------------------------------------------------------------------------

def _fail(path, message):
    raise ConfigError(message, path=path)


def _expect(data, path, kind, what):
    if not isinstance(data, kind):
        _fail(path, f"expected {what}, got {type(data).__name__}")
    return data


def _read_number(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(path, f"expected a number, got {type(v).__name__}")
    return float(v)


def _read_int(v, path, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(path, f"expected an integer, got {type(v).__name__}")
    if minimum is not None and v < minimum:
        _fail(path, f"must be >= {minimum}, got {v}")
    return v


def _read_bool(v, path):
    if not isinstance(v, bool):
        _fail(path, f"expected true/false, got {type(v).__name__}")
    return v


def _read_entry(v, path):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return complex(v)
    if isinstance(v, list) and len(v) == 2:
        return complex(_read_number(v[0], f"{path}[0]"),
                       _read_number(v[1], f"{path}[1]"))
    _fail(path, "expected a number or an [re, im] pair")


def _read_matrix(v, path):
    rows = _expect(v, path, list, "a matrix (list of rows)")
    if not rows:
        _fail(path, "matrix must not be empty")
    n = len(rows)
    out = np.empty((n, n), dtype=complex)
    for i, row in enumerate(rows):
        row = _expect(row, f"{path}[{i}]", list, "a row (list of entries)")
        if len(row) != n:
            _fail(f"{path}[{i}]", f"row length {len(row)} != dimension {n}")
        for j, entry in enumerate(row):
            out[i, j] = _read_entry(entry, f"{path}[{i}][{j}]")
    return out


def _read_vector(v, path):
    entries = _expect(v, path, list, "a vector (list of entries)")
    if not entries:
        _fail(path, "vector must not be empty")
    return np.array([_read_entry(e, f"{path}[{i}]")
                     for i, e in enumerate(entries)], dtype=complex)


def _check_keys(data, path, allowed, required=()):
    _expect(data, path, dict, "an object")
    unknown = set(data) - set(allowed)
    if unknown:
        _fail(path, f"unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    for key in required:
        if key not in data:
            _fail(path, f"missing required key {key!r}")
    return data


# ---------------------------------------------------------------------------
# section parsers
# ---------------------------------------------------------------------------

def _parse_system(data) -> SystemSpec:
    _check_keys(data, "system", ("particles", "interaction", "initial"),
                required=("particles", "initial"))
    raw_particles = _expect(data["particles"], "system.particles", list,
                            "a list of particles")
    if not raw_particles:
        _fail("system.particles", "at least one particle is required")
    particles = []
    for k, p in enumerate(raw_particles):
        path = f"system.particles[{k}]"
        _check_keys(p, path, ("dim", "h", "statistics"), required=("dim", "h"))
        dim = _read_int(p["dim"], f"{path}.dim", minimum=1)
        h = _read_matrix(p["h"], f"{path}.h")
        statistics = p.get("statistics", DISTINGUISHABLE)
        if not isinstance(statistics, str):
            _fail(f"{path}.statistics", "expected a string")
        try:
            particles.append(ParticleSpec(dim=dim, h=h, statistics=statistics))
        except SnbdError as exc:
            _fail(path, str(exc))

    raw_initial = _expect(data["initial"], "system.initial", list,
                          "a list of one-body densities")
    if len(raw_initial) != len(particles):
        _fail("system.initial",
              f"{len(raw_initial)} densities for {len(particles)} particles")
    initial = []
    for k, m in enumerate(raw_initial):
        path = f"system.initial[{k}]"
        rho = _read_matrix(m, path)
        if rho.shape[0] != particles[k].dim:
            _fail(path, f"dim {rho.shape[0]} != particle dim {particles[k].dim}")
        tr = complex(np.trace(rho))
        if abs(tr - 1.0) > 1e-12:
            _fail(path, f"particle {k} initial density has trace "
                        f"{tr.real:.15g}, expected 1 within 1e-12")
        initial.append(rho)

    terms = _parse_interaction(data.get("interaction"), particles)
    try:
        return SystemSpec(particles=tuple(particles), terms=terms,
                          initial=tuple(initial))
    except (ContractViolationError, ShapeError) as exc:
        _fail("system", str(exc))


def _parse_interaction(data, particles) -> tuple:
    if data is None:
        return ()
    _check_keys(data, "system.interaction", ("pair_matrix", "terms"))
    if ("pair_matrix" in data) == ("terms" in data):
        _fail("system.interaction",
              "give exactly one of 'pair_matrix' or 'terms'")
    n = len(particles)
    if "pair_matrix" in data:
        dims = {p.dim for p in particles}
        if len(dims) != 1:
            _fail("system.interaction.pair_matrix",
                  "a shared pair matrix requires identical particle dimensions")
        if n < 2:
            _fail("system.interaction.pair_matrix",
                  "pair interactions need at least two particles")
        m = dims.pop()
        v = _read_matrix(data["pair_matrix"], "system.interaction.pair_matrix")
        try:
            pairs = decompose_pair_interaction(v, m)
        except UnsupportedInteractionError:
            raise
        except SnbdError as exc:
            _fail("system.interaction.pair_matrix", str(exc))
        return shared_interaction_terms(pairs, particles)
    raw_terms = _expect(data["terms"], "system.interaction.terms", list,
                        "a list of terms")
    terms = []
    for t, term in enumerate(raw_terms):
        path = f"system.interaction.terms[{t}]"
        _check_keys(term, path, ("omega", "op", "ops"), required=("omega",))
        if ("op" in term) == ("ops" in term):
            _fail(path, "give exactly one of 'op' (shared) or 'ops' (per particle)")
        omega = _read_number(term["omega"], f"{path}.omega")
        if "op" in term:
            op = _read_matrix(term["op"], f"{path}.op")
            ops = (op,) * n
        else:
            raw_ops = _expect(term["ops"], f"{path}.ops", list,
                              "a list of matrices")
            if len(raw_ops) != n:
                _fail(f"{path}.ops",
                      f"{len(raw_ops)} operators for {n} particles")
            ops = tuple(_read_matrix(o, f"{path}.ops[{k}]")
                        for k, o in enumerate(raw_ops))
        try:
            terms.append(InteractionTerm(omega=omega, ops=ops))
        except SnbdError as exc:
            _fail(path, str(exc))
    return tuple(terms)


def _parse_time(data) -> TimeGrid:
    _check_keys(data, "time", ("t_final", "dt", "record_stride"),
                required=("t_final", "dt"))
    grid = TimeGrid(
        t_final=_read_number(data["t_final"], "time.t_final"),
        dt=_read_number(data["dt"], "time.dt"),
        record_stride=_read_int(data.get("record_stride", 1),
                                "time.record_stride", minimum=1),
    )
    try:
        _validate_grid(grid.t_final, grid.dt, grid.record_stride)
    except ConfigError as exc:
        _fail("time", str(exc))
    return grid


def _parse_ensemble(data) -> EnsembleParams:
    if data is None:
        return EnsembleParams()
    _check_keys(data, "ensemble",
                ("M", "master_seed", "worker_count", "n_blocks",
                 "full_density", "blowup_policy", "positivity_tol"))
    policy = data.get("blowup_policy", "abort")
    if policy not in BLOWUP_POLICIES:
        _fail("ensemble.blowup_policy",
              f"expected one of {BLOWUP_POLICIES}, got {policy!r}")
    seed = _read_int(data.get("master_seed", 0), "ensemble.master_seed",
                     minimum=0)
    if seed >= 2 ** 64:
        _fail("ensemble.master_seed", "must fit in 64 bits")
    tol = data.get("positivity_tol")
    if tol is not None:
        tol = _read_number(tol, "ensemble.positivity_tol")
        if tol <= 0:
            _fail("ensemble.positivity_tol", f"must be positive, got {tol}")
    return EnsembleParams(
        m=_read_int(data.get("M", 1), "ensemble.M", minimum=1),
        master_seed=seed,
        worker_count=_read_int(data.get("worker_count", 1),
                               "ensemble.worker_count", minimum=1),
        n_blocks=_read_int(data.get("n_blocks", DEFAULT_N_BLOCKS),
                           "ensemble.n_blocks", minimum=1),
        full_density=_read_bool(data.get("full_density", False),
                                "ensemble.full_density"),
        blowup_policy=policy,
        positivity_tol=tol,
    )


def _parse_observables(data, n_particles) -> tuple:
    if data is None:
        return ()
    raw = _expect(data, "observables", list, "a list of observables")
    out = []
    names = set()
    for i, o in enumerate(raw):
        path = f"observables[{i}]"
        _check_keys(o, path, ("name", "factors"), required=("name", "factors"))
        name = o["name"]
        if not isinstance(name, str) or not name:
            _fail(f"{path}.name", "expected a nonempty string")
        if name in names:
            _fail(f"{path}.name", f"duplicate observable name {name!r}")
        names.add(name)
        raw_factors = _expect(o["factors"], f"{path}.factors", list,
                              "a list of matrices (null = identity)")
        if len(raw_factors) != n_particles:
            _fail(f"{path}.factors",
                  f"{len(raw_factors)} factors for {n_particles} particles")
        factors = tuple(
            None if f is None else _read_matrix(f, f"{path}.factors[{k}]")
            for k, f in enumerate(raw_factors))
        try:
            out.append(ObservableSpec(name=name, factors=factors))
        except SnbdError as exc:
            _fail(path, str(exc))
    return tuple(out)


def _parse_recovery(data, n_particles) -> RecoveryParams:
    if data is None:
        return RecoveryParams()
    _check_keys(data, "recovery",
                ("enabled", "reference_vectors", "window", "spectrum_source"))
    refs = data.get("reference_vectors")
    if refs is not None:
        raw = _expect(refs, "recovery.reference_vectors", list,
                      "a list of vectors")
        if len(raw) != n_particles:
            _fail("recovery.reference_vectors",
                  f"{len(raw)} vectors for {n_particles} particles")
        refs = tuple(_read_vector(v, f"recovery.reference_vectors[{k}]")
                     for k, v in enumerate(raw))
    source = data.get("spectrum_source", "recovery")
    if source not in SPECTRUM_SOURCES:
        _fail("recovery.spectrum_source",
              f"expected one of {SPECTRUM_SOURCES}, got {source!r}")
    return RecoveryParams(
        enabled=_read_bool(data.get("enabled", False), "recovery.enabled"),
        reference_vectors=refs,
        window=_read_bool(data.get("window", True), "recovery.window"),
        spectrum_source=source,
    )


def _parse_output(data) -> OutputParams:
    if data is None:
        return OutputParams()
    _check_keys(data, "output", ("directory", "formats"))
    directory = data.get("directory", "out")
    if not isinstance(directory, str) or not directory:
        _fail("output.directory", "expected a nonempty string")
    formats = data.get("formats", list(FORMATS))
    raw = _expect(formats, "output.formats", list, "a list of format names")
    for f in raw:
        if f not in FORMATS:
            _fail("output.formats", f"unknown format {f!r}; allowed: {FORMATS}")
    if not raw:
        _fail("output.formats", "at least one format is required")
    return OutputParams(directory=directory, formats=tuple(raw))


def parse_config_dict(data, source="<config>") -> RunConfig:
    """Validate a configuration dictionary into a RunConfig."""
    _check_keys(data, source,
                ("system", "time", "ensemble", "observables", "recovery",
                 "output"),
                required=("system", "time"))
    system = _parse_system(data["system"])
    cfg = RunConfig(
        system=system,
        time=_parse_time(data["time"]),
        ensemble=_parse_ensemble(data.get("ensemble")),
        observables=_parse_observables(data.get("observables"),
                                       system.n_particles),
        recovery=_parse_recovery(data.get("recovery"), system.n_particles),
        output=_parse_output(data.get("output")),
    )
    for k, refs in enumerate(cfg.recovery.reference_vectors or ()):
        if refs.shape != (system.particles[k].dim,):
            _fail(f"recovery.reference_vectors[{k}]",
                  f"length {refs.shape[0]} != particle dim "
                  f"{system.particles[k].dim}")
    return cfg


def parse_config(path) -> RunConfig:
    """Load and validate a JSON configuration file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", path=str(path)) from exc
    return parse_config_dict(data, source=str(path))


# ---------------------------------------------------------------------------
# canonical serialization
# ---------------------------------------------------------------------------

def _entry_out(z) -> list:
    z = complex(z)
    return [z.real, z.imag]


def _matrix_out(m) -> list:
    m = np.asarray(m)
    return [[_entry_out(m[i, j]) for j in range(m.shape[1])]
            for i in range(m.shape[0])]


def _vector_out(v) -> list:
    return [_entry_out(x) for x in np.asarray(v)]


def serialize_config(cfg: RunConfig) -> dict:
    """Canonical plain-data form; parse_config_dict inverts it exactly."""
    system = {
        "particles": [
            {"dim": p.dim, "h": _matrix_out(p.h), "statistics": p.statistics}
            for p in cfg.system.particles
        ],
        "initial": [_matrix_out(r) for r in cfg.system.initial],
    }
    if cfg.system.terms:
        terms = []
        for t in cfg.system.terms:
            shared = all(np.array_equal(o, t.ops[0]) for o in t.ops[1:])
            if shared:
                terms.append({"omega": t.omega, "op": _matrix_out(t.ops[0])})
            else:
                terms.append({"omega": t.omega,
                              "ops": [_matrix_out(o) for o in t.ops]})
        system["interaction"] = {"terms": terms}
    data = {
        "system": system,
        "time": {
            "t_final": cfg.time.t_final,
            "dt": cfg.time.dt,
            "record_stride": cfg.time.record_stride,
        },
        "ensemble": {
            "M": cfg.ensemble.m,
            "master_seed": cfg.ensemble.master_seed,
            "worker_count": cfg.ensemble.worker_count,
            "n_blocks": cfg.ensemble.n_blocks,
            "full_density": cfg.ensemble.full_density,
            "blowup_policy": cfg.ensemble.blowup_policy,
            "positivity_tol": cfg.ensemble.positivity_tol,
        },
        "observables": [
            {"name": o.name,
             "factors": [None if f is None else _matrix_out(f)
                         for f in o.factors]}
            for o in cfg.observables
        ],
        "recovery": {
            "enabled": cfg.recovery.enabled,
            "reference_vectors": (
                None if cfg.recovery.reference_vectors is None
                else [_vector_out(v) for v in cfg.recovery.reference_vectors]),
            "window": cfg.recovery.window,
            "spectrum_source": cfg.recovery.spectrum_source,
        },
        "output": {
            "directory": cfg.output.directory,
            "formats": list(cfg.output.formats),
        },
    }
    return data


def config_digest(cfg: RunConfig) -> str:
    """Hash of the physics content of a config.

    Excludes execution-layout fields (worker count, output section), so
    runs that must produce identical data also share the digest.
    """
    data = serialize_config(cfg)
    del data["output"]
    del data["ensemble"]["worker_count"]
    return hashlib.sha256(
        json.dumps(data, sort_keys=True).encode()).hexdigest()


def apply_override(data: dict, dotted: str, raw_value: str):
    """Apply a dotted-path override like ``ensemble.M=4000`` to a raw dict.

    The value is parsed as JSON when possible (numbers, booleans, arrays)
    and kept as a string otherwise.
    """
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"malformed override path {dotted!r}")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node = data
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(
                f"override path {dotted!r} descends into a non-object")
        node = nxt
    node[keys[-1]] = value
