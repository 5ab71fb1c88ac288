"""Closed-form manifold kernels for the three factor spaces of a disordered crystal.

Fractional coordinates live on the flat torus [0,1)^3, disorder weights live on
probability simplices handled through the square-root map onto the positive
orthant of the unit sphere, and lattice parameters live in an unconstrained
Euclidean space obtained by passing the cell angles through a logit transform.
All kernels are pure functions of their arguments; samplers take an explicit
numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ANGLE_LO = 60.0
ANGLE_HI = 120.0

# Numerical guards.
_SINC_TAYLOR_CUTOFF = 1e-4
_ANTIPODAL_TOL = 1e-12


# ---------------------------------------------------------------------------
# Flat torus
# ---------------------------------------------------------------------------

def wrap(z: np.ndarray | float) -> np.ndarray:
    """Shortest periodic representative: (z + 0.5 mod 1) - 0.5, in [-0.5, 0.5)."""
    return (np.asarray(z, dtype=float) + 0.5) % 1.0 - 0.5


def torus_log(f0, f1) -> np.ndarray:
    """Tangent of the shortest torus path from f0 to f1, componentwise."""
    return wrap(np.asarray(f1, dtype=float) - np.asarray(f0, dtype=float))


def torus_exp(f0, v) -> np.ndarray:
    """Follow tangent v from f0 and re-wrap into [0, 1)."""
    return (np.asarray(f0, dtype=float) + np.asarray(v, dtype=float)) % 1.0


def remove_mean(displacements: np.ndarray, axis: int = 0) -> np.ndarray:
    """Subtract the per-component mean displacement over atoms.

    The result is a raw Euclidean regression target; components may leave
    [-0.5, 0.5) and are deliberately not re-wrapped.
    """
    d = np.asarray(displacements, dtype=float)
    return d - d.mean(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Simplex / sphere
# ---------------------------------------------------------------------------

def simplex_to_sphere(mu: np.ndarray) -> np.ndarray:
    """Elementwise square root, mapping the simplex to the positive unit-sphere orthant."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < -1e-12):
        raise ValueError(f"negative simplex entry: min={mu.min()}")
    return np.sqrt(np.clip(mu, 0.0, None))


def sphere_to_simplex(x: np.ndarray) -> np.ndarray:
    """Elementwise square; lands on the simplex for any unit vector, sign included."""
    x = np.asarray(x, dtype=float)
    return x * x


def fisher_rao_distance(mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Geodesic distance between categorical distributions: 2*arccos of the
    Bhattacharyya coefficient.  Supports batched leading axes."""
    bc = np.sum(simplex_to_sphere(mu) * simplex_to_sphere(nu), axis=-1)
    return 2.0 * np.arccos(np.clip(bc, -1.0, 1.0))


def _sinc(x: np.ndarray) -> np.ndarray:
    """sin(x)/x in the radian convention with sinc(0) = 1."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SINC_TAYLOR_CUTOFF
    x_safe = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(small, 1.0 - x2 / 6.0 + x2 * x2 / 120.0, np.sin(x_safe) / x_safe)


def _inv_sinc(x: np.ndarray) -> np.ndarray:
    """x/sin(x) with a Taylor branch near 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SINC_TAYLOR_CUTOFF
    x_safe = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(small, 1.0 + x2 / 6.0 + 7.0 * x2 * x2 / 360.0, x_safe / np.sin(x_safe))


def sphere_exp(x0: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Geodesic step on the unit sphere: cos|v| x0 + sinc|v| v."""
    x0 = np.asarray(x0, dtype=float)
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.cos(theta) * x0 + _sinc(theta) * v


def sphere_log(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Tangent at x0 pointing along the geodesic to x1; |log| equals the angle."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    c = np.sum(x0 * x1, axis=-1, keepdims=True)
    if np.any(c <= -1.0 + _ANTIPODAL_TOL):
        raise ValueError("sphere_log undefined for antipodal points")
    c = np.clip(c, -1.0, 1.0)
    theta = np.arccos(c)
    return _inv_sinc(theta) * (x1 - c * x0)


def sphere_tangent_project(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Project v onto the tangent plane of the unit sphere at x."""
    return v - np.sum(v * x, axis=-1, keepdims=True) * x


def simplex_interpolate(mu0: np.ndarray, mu1: np.ndarray, t: float) -> np.ndarray:
    """Geodesic interpolation between simplex points through the sphere chart.

    Endpoints are returned exactly; intermediate points are guaranteed to sum
    to one up to rounding because the chart inverse is an elementwise square.
    """
    mu0 = np.asarray(mu0, dtype=float)
    mu1 = np.asarray(mu1, dtype=float)
    if t == 0.0:
        return mu0.copy()
    if t == 1.0:
        return mu1.copy()
    x0 = simplex_to_sphere(mu0)
    x1 = simplex_to_sphere(mu1)
    xt = sphere_exp(x0, t * sphere_log(x0, x1))
    return sphere_to_simplex(xt)


def uniform_simplex(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform (flat Dirichlet) samples via normalized standard exponentials.

    `shape` includes the simplex dimension as its last axis.
    """
    e = rng.standard_exponential(shape)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Lattice parameterization
# ---------------------------------------------------------------------------

def angles_to_unconstrained(angles_deg: np.ndarray) -> np.ndarray:
    """logit((angle - 60) / 120); defined for angles strictly inside (60, 120)."""
    a = np.asarray(angles_deg, dtype=float)
    if np.any(a <= ANGLE_LO) or np.any(a >= ANGLE_HI):
        raise ValueError(f"angle outside ({ANGLE_LO}, {ANGLE_HI}): {a}")
    x = (a - ANGLE_LO) / 120.0
    return np.log(x) - np.log1p(-x)


def angles_from_unconstrained(eta: np.ndarray) -> np.ndarray:
    """Inverse transform 120*sigmoid(eta) + 60, with range (60, 180)."""
    eta = np.asarray(eta, dtype=float)
    return 120.0 / (1.0 + np.exp(-eta)) + ANGLE_LO


def lattice_to_unconstrained(lat) -> np.ndarray:
    """(a, b, c, logit-angles) as a flat 6-vector."""
    lengths = np.array([lat.a, lat.b, lat.c], dtype=float)
    if np.any(lengths <= 0):
        raise ValueError(f"non-positive cell length: {lengths}")
    angles = np.array([lat.alpha, lat.beta, lat.gamma], dtype=float)
    return np.concatenate([lengths, angles_to_unconstrained(angles)])


def unconstrained_to_lattice(ltilde: np.ndarray):
    """Invert lattice_to_unconstrained.  Raises if the decoded lengths are not positive."""
    from .crystal import LatticeParams

    ltilde = np.asarray(ltilde, dtype=float)
    lengths = ltilde[:3]
    if not np.all(np.isfinite(ltilde)):
        raise ValueError("non-finite unconstrained lattice vector")
    if np.any(lengths <= 0):
        raise ValueError(f"decoded cell lengths must be positive: {lengths}")
    angles = angles_from_unconstrained(ltilde[3:])
    return LatticeParams(*lengths, *angles)


def lattice_matrix(lat) -> np.ndarray:
    """Column-vector cell matrix: a along x, b in the xy-plane, c general."""
    a, b, c = lat.a, lat.b, lat.c
    al, be, ga = np.radians([lat.alpha, lat.beta, lat.gamma])
    cos_al, cos_be, cos_ga = np.cos([al, be, ga])
    sin_ga = np.sin(ga)
    cx = c * cos_be
    cy = c * (cos_al - cos_be * cos_ga) / sin_ga
    cz_sq = c * c - cx * cx - cy * cy
    if cz_sq <= 0:
        raise ValueError("degenerate cell: inconsistent angles")
    L = np.array([
        [a, b * cos_ga, cx],
        [0.0, b * sin_ga, cy],
        [0.0, 0.0, np.sqrt(cz_sq)],
    ])
    if np.linalg.det(L) <= 1e-10:
        raise ValueError("degenerate cell: vanishing volume")
    return L


def lattice_metric(lat) -> np.ndarray:
    """Gram matrix L^T L; rotation-invariant by construction."""
    L = lattice_matrix(lat)
    return L.T @ L


def cell_volume(lat) -> float:
    return float(np.linalg.det(lattice_matrix(lat)))


# ---------------------------------------------------------------------------
# Prior sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LengthPrior:
    """Per-axis log-normal parameters for prior cell lengths."""

    loc: np.ndarray
    scale: np.ndarray

    @classmethod
    def default(cls) -> "LengthPrior":
        return cls(loc=np.full(3, 1.0), scale=np.full(3, 0.5))

    @classmethod
    def fit(cls, lattices) -> "LengthPrior":
        """Fit log-mean/log-std per axis from training cells; falls back to the
        default when no data is supplied."""
        lattices = list(lattices)
        if not lattices:
            return cls.default()
        lengths = np.log([[lat.a, lat.b, lat.c] for lat in lattices])
        scale = lengths.std(axis=0)
        return cls(loc=lengths.mean(axis=0), scale=np.maximum(scale, 1e-3))

    def to_dict(self) -> dict:
        return {"loc": self.loc.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LengthPrior":
        return cls(loc=np.asarray(d["loc"], dtype=float),
                   scale=np.asarray(d["scale"], dtype=float))


@dataclass
class FlowState:
    """A crystal-shaped point on the product manifold at some flow time.

    lattice_u : (6,) unconstrained lattice vector
    positions : (N, l_max, 3) fractional coordinates in [0, 1)
    species   : (N, D) simplex points
    pos_weights : (N, l_max) simplex points
    """

    lattice_u: np.ndarray
    positions: np.ndarray
    species: np.ndarray
    pos_weights: np.ndarray

    @property
    def n_sites(self) -> int:
        return self.positions.shape[0]

    @property
    def l_max(self) -> int:
        return self.positions.shape[1]

    @property
    def d_elements(self) -> int:
        return self.species.shape[1]

    def copy(self) -> "FlowState":
        return FlowState(self.lattice_u.copy(), self.positions.copy(),
                         self.species.copy(), self.pos_weights.copy())


def sample_priors(n_sites: int, d_elements: int, l_max: int,
                  rng: np.random.Generator,
                  length_prior: LengthPrior | None = None) -> FlowState:
    """Draw a t=0 state: log-normal lengths, uniform angles in (60, 120),
    uniform torus coordinates, and uniform simplex weights."""
    lp = length_prior if length_prior is not None else LengthPrior.default()
    lengths = np.exp(rng.normal(lp.loc, lp.scale))
    # Nudge off the boundary so the logit transform stays finite.
    angles = np.clip(rng.uniform(ANGLE_LO, ANGLE_HI, size=3),
                     ANGLE_LO + 1e-9, ANGLE_HI - 1e-9)
    lattice_u = np.concatenate([lengths, angles_to_unconstrained(angles)])
    positions = rng.random((n_sites, l_max, 3))
    species = uniform_simplex(rng, (n_sites, d_elements))
    pos_weights = uniform_simplex(rng, (n_sites, l_max))
    return FlowState(lattice_u, positions, species, pos_weights)
