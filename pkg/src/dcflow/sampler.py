"""Crystal generation by Euler integration of a velocity field.

Time marches from 0 to 1 in equal steps.  Lattice components update linearly
in the unconstrained space, coordinates step through the torus exponential
with an anti-annealing factor c(t) = 1 + slope * t applied to coordinate
fields only, and disorder weights step along the sphere with an explicit
tangent projection and renormalization, so every intermediate state squares
back onto the simplex.  In CSP mode the conditioning weights are never
touched and coordinate channels without occupancy stay pinned at zero.

The integrator consumes any `velocity_fn(states, t) -> list[VelocityBundle]`,
which keeps it reusable for network fields, frozen test fields, and the
true conditional field used by the geometry oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .crystal import DisorderedCrystal, make_crystal, make_lattice, make_site
from .geometry import (ANGLE_HI, ANGLE_LO, FlowState, LengthPrior,
                       angles_from_unconstrained, sample_priors,
                       sphere_exp, sphere_tangent_project)
from .velocity_net import VelocityBundle, VelocityNet

TASK_CSP = "csp"
TASK_DNG = "dng"


@dataclass
class SamplerConfig:
    steps: int = 1000
    slope: float = 20.0
    task: str = TASK_DNG
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.slope < 0:
            raise ValueError("anti-annealing slope must be >= 0")
        if self.task not in (TASK_CSP, TASK_DNG):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class Condition:
    """Fixed occupancies for CSP sampling."""

    species: np.ndarray      # (N, D)
    pos_weights: np.ndarray  # (N, l_max)

    @classmethod
    def from_crystal(cls, crystal: DisorderedCrystal) -> "Condition":
        return cls(species=crystal.species_matrix(),
                   pos_weights=crystal.weights_matrix())


def model_velocity_fn(net: VelocityNet):
    def fn(states: list[FlowState], t: float) -> list[VelocityBundle]:
        return net.predict_many(states, [t] * len(states))
    return fn


def _check_finite(state: FlowState, step: int) -> None:
    for name in ("lattice_u", "positions", "species", "pos_weights"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise RuntimeError(f"non-finite {name} at integration step {step}")


def _sphere_step(simplex_points: np.ndarray, tangent: np.ndarray,
                 dt: float) -> np.ndarray:
    x = np.sqrt(np.clip(simplex_points, 0.0, None))
    v = sphere_tangent_project(tangent, x)
    x = sphere_exp(x, dt * v)
    x = x / np.linalg.norm(x, axis=-1, keepdims=True)
    return x * x


def integrate(states: list[FlowState], velocity_fn, config: SamplerConfig,
              conditions: list[Condition] | None = None) -> list[FlowState]:
    """Advance all chains in lockstep; chains are otherwise independent."""
    if config.task == TASK_CSP:
        if conditions is None:
            raise ValueError("CSP sampling requires conditions")
        for state, cond in zip(states, conditions, strict=True):
            state.species = cond.species.copy()
            state.pos_weights = cond.pos_weights.copy()
            # Channels without occupancy hold the zero-padding convention.
            state.positions[cond.pos_weights == 0.0] = 0.0

    dt = 1.0 / config.steps
    for k in range(config.steps):
        t = k * dt
        bundles = velocity_fn(states, t)
        anneal = 1.0 + config.slope * t
        for i, (state, vb) in enumerate(zip(states, bundles, strict=True)):
            state.lattice_u = state.lattice_u + dt * vb.lattice
            delta = anneal * dt * vb.coords
            if config.task == TASK_CSP:
                delta = np.where((conditions[i].pos_weights > 0.0)[..., None],
                                 delta, 0.0)
            state.positions = (state.positions + delta) % 1.0
            if config.task == TASK_DNG:
                state.species = _sphere_step(state.species, vb.species, dt)
                state.pos_weights = _sphere_step(state.pos_weights,
                                                 vb.pos_weights, dt)
            _check_finite(state, k)
    return states


def _vocab_for(d_elements: int, element_vocab) -> tuple[int, ...]:
    if element_vocab is not None:
        return tuple(element_vocab)
    return tuple(range(1, d_elements + 1))


def finalize(state: FlowState, config: SamplerConfig,
             extra_meta: dict | None = None,
             element_vocab=None) -> tuple[DisorderedCrystal, dict]:
    """Decode a final state into a crystal; angles are clamped into the Niggli
    range and any clamping beyond rounding is reported in the metadata."""
    lengths = state.lattice_u[:3]
    if np.any(~np.isfinite(lengths)) or np.any(lengths <= 0):
        raise RuntimeError(f"integration produced invalid cell lengths {lengths}")
    angles = angles_from_unconstrained(state.lattice_u[3:])
    clamped = np.clip(angles, ANGLE_LO, ANGLE_HI)
    n_clamped = int(np.sum(np.abs(clamped - angles) > 1e-9))
    lattice = make_lattice(*lengths, *clamped)
    sites = [make_site(state.species[i], state.positions[i], state.pos_weights[i])
             for i in range(state.n_sites)]
    meta = {"steps": config.steps, "slope": config.slope, "task": config.task,
            "angles_clamped": n_clamped}
    if extra_meta:
        meta.update(extra_meta)
    vocab = _vocab_for(state.d_elements, element_vocab)
    return make_crystal(lattice, sites, element_vocab=vocab), meta


def sample(velocity_fn, n_sites: int, config: SamplerConfig,
           d_elements: int = 100, l_max: int = 2,
           length_prior: LengthPrior | None = None,
           condition: Condition | None = None,
           rng: np.random.Generator | None = None,
           extra_meta: dict | None = None,
           element_vocab=None) -> tuple[DisorderedCrystal, dict]:
    """Draw a prior state and integrate one chain."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    state = sample_priors(n_sites, d_elements, l_max, rng, length_prior)
    conditions = [condition] if condition is not None else None
    integrate([state], velocity_fn, config, conditions)
    return finalize(state, config, extra_meta, element_vocab)


@dataclass
class EmpiricalSizeSampler:
    """Draws atom counts from the empirical training histogram."""

    counts: dict[int, int]
    _sizes: np.ndarray = field(init=False)
    _probs: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.counts:
            raise ValueError("empty size histogram")
        self._sizes = np.array(sorted(self.counts))
        totals = np.array([self.counts[int(s)] for s in self._sizes], dtype=float)
        self._probs = totals / totals.sum()

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self._sizes, p=self._probs))


def sample_batch(net: VelocityNet, size_sampler: EmpiricalSizeSampler,
                 config: SamplerConfig, n_samples: int,
                 length_prior: LengthPrior | None = None,
                 extra_meta: dict | None = None,
                 element_vocab=None) -> list[tuple[DisorderedCrystal, dict]]:
    """Independent DNG chains, integrated in lockstep for throughput;
    reproducible for a fixed seed."""
    rng = np.random.default_rng(config.seed)
    cfg = net.cfg
    states = [sample_priors(size_sampler.draw(rng), cfg.d_elements, cfg.l_max,
                            rng, length_prior) for _ in range(n_samples)]
    integrate(states, model_velocity_fn(net), config)
    return [finalize(s, config, extra_meta, element_vocab) for s in states]


def sample_csp_batch(net: VelocityNet, condition_crystals: list[DisorderedCrystal],
                     config: SamplerConfig,
                     length_prior: LengthPrior | None = None,
                     extra_meta: dict | None = None) -> list[tuple[DisorderedCrystal, dict]]:
    """One structure per input composition, conditioning on its (s, w)."""
    rng = np.random.default_rng(config.seed)
    cfg = net.cfg
    conditions = [Condition.from_crystal(c) for c in condition_crystals]
    states = [sample_priors(c.n_sites, cfg.d_elements, cfg.l_max, rng, length_prior)
              for c in condition_crystals]
    integrate(states, model_velocity_fn(net), config, conditions)
    return [finalize(s, config, extra_meta, condition_crystals[i].element_vocab)
            for i, s in enumerate(states)]
