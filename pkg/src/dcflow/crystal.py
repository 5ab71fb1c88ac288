"""Unified data model for ordered, substitutionally and positionally disordered crystals.

Each site carries a substitutional probability vector over the element
vocabulary, an l_max x 3 block of fractional coordinates, and a positional
probability vector over those coordinate channels.  An ordered site is the
special case of a one-hot substitutional vector with all positional weight on
channel 0.  Instances are frozen after construction and safe to share across
threads; use the make_* factories for canonicalized, checked construction and
`validate` for diagnostics on hand-built objects.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import ANGLE_HI, ANGLE_LO

D_ELEMENTS = 100          # vocabulary index k <-> atomic number k + 1
N_MAX_DEFAULT = 160
SIMPLEX_TOL = 1e-8        # validation tolerance on probability sums
RENORM_TOL = 1e-6         # construction-time renormalization window

DEFAULT_VOCAB: tuple[int, ...] = tuple(range(1, D_ELEMENTS + 1))


@dataclass(frozen=True)
class LatticeParams:
    """Cell lengths in Angstrom and angles in degrees."""

    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float

    def lengths(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def angles(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])


@dataclass(frozen=True)
class Site:
    """One crystallographic site: substitutional vector, coordinate channels,
    and positional weights."""

    s: np.ndarray            # (D,)
    positions: np.ndarray    # (l_max, 3)
    pos_weights: np.ndarray  # (l_max,)

    @property
    def l_max(self) -> int:
        return self.positions.shape[0]

    @property
    def is_pd(self) -> bool:
        """Positionally disordered: at least two channels carry weight."""
        return int(np.count_nonzero(self.pos_weights)) >= 2


@dataclass(frozen=True)
class DisorderedCrystal:
    lattice: LatticeParams
    sites: tuple[Site, ...]
    element_vocab: tuple[int, ...] = DEFAULT_VOCAB

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def d_elements(self) -> int:
        return self.sites[0].s.shape[0]

    @property
    def l_max(self) -> int:
        return self.sites[0].l_max

    def species_matrix(self) -> np.ndarray:
        return np.stack([site.s for site in self.sites])

    def positions_tensor(self) -> np.ndarray:
        return np.stack([site.positions for site in self.sites])

    def weights_matrix(self) -> np.ndarray:
        return np.stack([site.pos_weights for site in self.sites])

    def atomic_numbers(self) -> np.ndarray:
        return np.asarray(self.element_vocab)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


def _renormalized(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < -1e-12):
        raise ValueError(f"{what} has negative entries")
    p = np.clip(p, 0.0, None)
    total = p.sum()
    if abs(total - 1.0) > RENORM_TOL:
        raise ValueError(f"{what} sums to {total:.8f}, outside 1 +/- {RENORM_TOL}")
    return p / total


def make_lattice(a: float, b: float, c: float,
                 alpha: float, beta: float, gamma: float) -> LatticeParams:
    lengths = np.array([a, b, c], dtype=float)
    angles = np.array([alpha, beta, gamma], dtype=float)
    if not np.all(np.isfinite(lengths)) or np.any(lengths <= 0):
        raise ValueError(f"cell lengths must be positive: {lengths}")
    if np.any(angles < ANGLE_LO) or np.any(angles > ANGLE_HI):
        raise ValueError(f"cell angles must lie in [{ANGLE_LO}, {ANGLE_HI}]: {angles}")
    return LatticeParams(*lengths, *angles)


def make_site(s, positions, pos_weights) -> Site:
    """Canonical construction: renormalize probability vectors, wrap
    coordinates into [0, 1), and zero-pad channels with zero weight."""
    s = _renormalized(s, "substitutional vector")
    w = _renormalized(pos_weights, "positional weights")
    f = np.asarray(positions, dtype=float) % 1.0
    if f.ndim != 2 or f.shape != (w.shape[0], 3):
        raise ValueError(f"positions shape {f.shape} does not match {w.shape[0]} channels")
    f[w == 0.0] = 0.0
    return Site(s=_freeze(s), positions=_freeze(f), pos_weights=_freeze(w))


def make_crystal(lattice: LatticeParams, sites, element_vocab=DEFAULT_VOCAB,
                 n_max: int = N_MAX_DEFAULT) -> DisorderedCrystal:
    sites = tuple(sites)
    if not 1 <= len(sites) <= n_max:
        raise ValueError(f"site count {len(sites)} outside [1, {n_max}]")
    d = sites[0].s.shape[0]
    lm = sites[0].l_max
    for i, site in enumerate(sites):
        if site.s.shape[0] != d or site.l_max != lm:
            raise ValueError(f"site {i} disagrees on D or l_max")
    if d != len(element_vocab):
        raise ValueError(f"D={d} does not match vocabulary size {len(element_vocab)}")
    return DisorderedCrystal(lattice=lattice, sites=sites,
                             element_vocab=tuple(element_vocab))


def validate(crystal: DisorderedCrystal, n_max: int = N_MAX_DEFAULT) -> list[str]:
    """Diagnostic invariant check; returns one message per violation."""
    out: list[str] = []
    lat = crystal.lattice
    if not np.all(np.isfinite(lat.lengths())) or np.any(lat.lengths() <= 0):
        out.append("lattice: non-positive length")
    if np.any(lat.angles() < ANGLE_LO) or np.any(lat.angles() > ANGLE_HI):
        out.append("lattice: angle range")
    if not 1 <= crystal.n_sites <= n_max:
        out.append(f"crystal: site count {crystal.n_sites} outside [1, {n_max}]")
    d, lm = crystal.d_elements, crystal.l_max
    for i, site in enumerate(crystal.sites):
        if site.s.shape[0] != d or site.l_max != lm:
            out.append(f"site {i}: inconsistent dimensions")
            continue
        if abs(site.s.sum() - 1.0) > SIMPLEX_TOL:
            out.append(f"site {i}: simplex sum of s is {site.s.sum():.10f}")
        if np.any(site.s < 0):
            out.append(f"site {i}: negative entry in s")
        if abs(site.pos_weights.sum() - 1.0) > SIMPLEX_TOL:
            out.append(f"site {i}: simplex sum of pos_weights is {site.pos_weights.sum():.10f}")
        if np.any(site.pos_weights < 0):
            out.append(f"site {i}: negative entry in pos_weights")
        if np.any(site.positions < 0) or np.any(site.positions >= 1.0):
            out.append(f"site {i}: coordinate range [0,1) violated")
        zero_rows = site.pos_weights == 0.0
        if np.any(site.positions[zero_rows] != 0.0):
            out.append(f"site {i}: zero-weight channel not zero-padded")
    return out


def from_ordered(elements, coords, lattice: LatticeParams,
                 element_vocab=DEFAULT_VOCAB, l_max: int = 2) -> DisorderedCrystal:
    """Build an ordered crystal: one-hot species, all positional weight on channel 0."""
    coords = np.asarray(coords, dtype=float)
    index_of = {z: k for k, z in enumerate(element_vocab)}
    sites = []
    for z, f in zip(elements, coords, strict=True):
        if z not in index_of:
            raise ValueError(f"element Z={z} not in vocabulary")
        s = np.zeros(len(element_vocab))
        s[index_of[z]] = 1.0
        positions = np.zeros((l_max, 3))
        positions[0] = f
        w = np.zeros(l_max)
        w[0] = 1.0
        sites.append(make_site(s, positions, w))
    return make_crystal(lattice, sites, element_vocab=element_vocab)


def pad_to_order(crystal: DisorderedCrystal, l_max_new: int) -> DisorderedCrystal:
    """Extend (or safely shrink) the positional channels of every site.

    Zero-weight channels contribute nothing downstream, so padding never
    changes physics.  Shrinking is refused when a truncated channel carries
    weight.
    """
    lm = crystal.l_max
    if l_max_new == lm:
        return crystal
    sites = []
    for i, site in enumerate(crystal.sites):
        if l_max_new < lm:
            if np.any(site.pos_weights[l_max_new:] != 0.0):
                raise ValueError(f"site {i}: cannot shrink past nonzero weight")
            positions = site.positions[:l_max_new].copy()
            w = site.pos_weights[:l_max_new].copy()
        else:
            positions = np.zeros((l_max_new, 3))
            positions[:lm] = site.positions
            w = np.zeros(l_max_new)
            w[:lm] = site.pos_weights
        sites.append(Site(s=site.s, positions=_freeze(positions), pos_weights=_freeze(w)))
    return replace(crystal, sites=tuple(sites))


def sample_realization(crystal: DisorderedCrystal,
                       rng: np.random.Generator) -> DisorderedCrystal:
    """Draw one ordered snapshot: an element from each s and a position from
    each pos_weights.  Degenerate (ordered) sites are reproduced exactly."""
    d = crystal.d_elements
    sites = []
    for site in crystal.sites:
        k = int(rng.choice(d, p=site.s / site.s.sum()))
        ch = int(rng.choice(site.l_max, p=site.pos_weights / site.pos_weights.sum()))
        s = np.zeros(d)
        s[k] = 1.0
        positions = np.zeros((site.l_max, 3))
        positions[0] = site.positions[ch]
        w = np.zeros(site.l_max)
        w[0] = 1.0
        sites.append(Site(s=_freeze(s), positions=_freeze(positions), pos_weights=_freeze(w)))
    return replace(crystal, sites=tuple(sites))


def expected_composition(crystal: DisorderedCrystal) -> dict[int, float]:
    """Occupancy-weighted expected amount per atomic number.

    Each site contributes its total positional occupancy times its
    substitutional probabilities; for valid crystals the occupancy is one, but
    the linear rule also covers partially occupied inputs.
    """
    vocab = crystal.atomic_numbers()
    amounts = np.zeros(crystal.d_elements)
    for site in crystal.sites:
        amounts += site.pos_weights.sum() * site.s
    return {int(z): float(amt) for z, amt in zip(vocab, amounts) if amt > 0.0}
