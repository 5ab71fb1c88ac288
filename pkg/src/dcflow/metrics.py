"""Evaluation suite for generated disordered crystals.

CSP metrics: a periodic structure matcher with composition, lattice, and
site-assignment gates, reporting a normalized RMS displacement for matches.
DNG metrics: clash-based structural validity, fractional-count charge
neutrality, density and element-count statistics with one-dimensional
Wasserstein distances, and coverage recall/precision over stochastic
fingerprints of sampled ordered realizations.

The matcher is a deliberate desk-scale replacement for heavyweight tooling:
structures are compared at their given cells (no primitive-cell reduction or
supercell search), with candidate translations anchored on site 0.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import linear_sum_assignment

from .crystal import DisorderedCrystal, expected_composition, sample_realization
from .elements import mass_of, oxidation_states, symbol_of
from .geometry import cell_volume, lattice_matrix, wrap

AMU_PER_CUBIC_ANGSTROM = 1.66053906660  # u/A^3 -> g/cm^3


@dataclass(frozen=True)
class MatchTolerances:
    ltol: float = 0.3       # relative length tolerance
    stol: float = 0.5       # site tolerance in units of (V/N)^(1/3)
    angle_tol: float = 10.0  # degrees

    def __post_init__(self):
        if min(self.ltol, self.stol, self.angle_tol) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class EvalReport:
    match_rate: float | None = None
    rmse: float | None = None
    structural_validity: float | None = None
    compositional_validity: float | None = None
    coverage_recall: float | None = None
    coverage_precision: float | None = None
    wdist_density: float | None = None
    wdist_n_el: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Structure matching
# ---------------------------------------------------------------------------

def _representative_positions(crystal: DisorderedCrystal) -> np.ndarray:
    """One position per site: the highest-weight channel, lowest index on ties."""
    w = crystal.weights_matrix()
    f = crystal.positions_tensor()
    ch = np.argmax(w, axis=1)
    return f[np.arange(len(ch)), ch]


def _dominant_elements(crystal: DisorderedCrystal) -> np.ndarray:
    return np.argmax(crystal.species_matrix(), axis=1)


def _composition_fractions(crystal: DisorderedCrystal) -> np.ndarray:
    amounts = np.zeros(crystal.d_elements)
    for z, amt in expected_composition(crystal).items():
        amounts[list(crystal.element_vocab).index(z)] = amt
    return amounts / amounts.sum()


def _min_image_cartesian(df: np.ndarray, lat_matrix: np.ndarray) -> np.ndarray:
    """Distance of fractional offsets under the 27 neighboring images."""
    shifts = np.array(np.meshgrid(*[[-1, 0, 1]] * 3)).T.reshape(-1, 3)
    cand = wrap(df)[..., None, :] + shifts            # (..., 27, 3)
    cart = cand @ lat_matrix.T
    return np.linalg.norm(cart, axis=-1).min(axis=-1)


def structure_match(pred: DisorderedCrystal, truth: DisorderedCrystal,
                    tol: MatchTolerances = MatchTolerances()) -> float | None:
    """Match decision plus normalized RMSE, or None when the gates fail.

    Gates: expected element fractions within 0.05, sorted lengths within the
    relative tolerance and sorted angles within the absolute tolerance, and a
    site bijection between dominant-element-compatible sites whose periodic
    displacements all stay below stol * (V/N)^(1/3).  Candidate global
    translations map site 0 of the prediction onto each compatible truth site.
    """
    if pred.n_sites != truth.n_sites:
        return None
    if pred.element_vocab != truth.element_vocab:
        return None
    cf_pred = _composition_fractions(pred)
    cf_truth = _composition_fractions(truth)
    if np.max(np.abs(cf_pred - cf_truth)) > 0.05:
        return None

    lp, lt = np.sort(pred.lattice.lengths()), np.sort(truth.lattice.lengths())
    if np.any(np.abs(lp / lt - 1.0) > tol.ltol):
        return None
    ap, at = np.sort(pred.lattice.angles()), np.sort(truth.lattice.angles())
    if np.any(np.abs(ap - at) > tol.angle_tol):
        return None

    n = truth.n_sites
    lat_m = lattice_matrix(truth.lattice)
    scale = (cell_volume(truth.lattice) / n) ** (1.0 / 3.0)
    cutoff = tol.stol * scale
    fp = _representative_positions(pred)
    ft = _representative_positions(truth)
    ep = _dominant_elements(pred)
    et = _dominant_elements(truth)

    best = None
    for anchor in np.flatnonzero(et == ep[0]):
        shifted = fp + (ft[anchor] - fp[0])
        dists = _min_image_cartesian(shifted[:, None, :] - ft[None, :, :], lat_m)
        cost = np.where(ep[:, None] == et[None, :], dists ** 2, np.inf)
        if not np.all(np.isfinite(cost.min(axis=1))):
            continue
        rows, cols = linear_sum_assignment(np.where(np.isfinite(cost), cost, 1e12))
        assigned = dists[rows, cols]
        if np.any(ep[rows] != et[cols]) or np.any(assigned >= cutoff):
            continue
        rmse = float(np.sqrt(np.mean(assigned ** 2)) / scale)
        best = rmse if best is None else min(best, rmse)
    return best


def match_rate(preds: list[DisorderedCrystal], truths: list[DisorderedCrystal],
               tol: MatchTolerances = MatchTolerances()) -> tuple[float, float | None]:
    """Fraction of aligned pairs that match; RMSE averaged over matches only."""
    if len(preds) != len(truths):
        raise ValueError(f"aligned lists required: {len(preds)} vs {len(truths)}")
    rmses = [r for r in (structure_match(p, t, tol)
                         for p, t in zip(preds, truths)) if r is not None]
    rate = len(rmses) / len(preds)
    return rate, (float(np.mean(rmses)) if rmses else None)


# ---------------------------------------------------------------------------
# DNG validity
# ---------------------------------------------------------------------------

def structural_validity(crystal: DisorderedCrystal, d_min: float = 0.5) -> bool:
    """True when every pair of occupied positions keeps a periodic Cartesian
    distance of at least d_min.

    Alternative channels of one site are mutually exclusive occupations and
    are exempt from the check; a position is still checked against its own
    periodic images.
    """
    lat_m = lattice_matrix(crystal.lattice)
    entries = [(i, site.positions[ch])
               for i, site in enumerate(crystal.sites)
               for ch in np.flatnonzero(site.pos_weights > 0.0)]
    shifts = np.array(np.meshgrid(*[[-1, 0, 1]] * 3)).T.reshape(-1, 3)
    nonzero = ~np.all(shifts == 0, axis=1)
    for a in range(len(entries)):
        site_a, fa = entries[a]
        for b in range(a, len(entries)):
            site_b, fb = entries[b]
            if site_a == site_b and a != b:
                continue  # same-site alternatives never co-occupy a cell
            df = wrap(fb - fa) + (shifts[nonzero] if a == b else shifts)
            if np.linalg.norm(df @ lat_m.T, axis=-1).min() < d_min:
                return False
    return True


def compositional_validity(crystal: DisorderedCrystal,
                           table: dict[int, tuple[int, ...]] | None = None,
                           tol: float = 1e-6) -> tuple[bool, str]:
    """Charge neutrality over the occupancy-weighted expected composition.

    Valid when some assignment of one tabulated oxidation state per element
    zeroes the total charge.  Returns (verdict, reason).
    """
    table = table if table is not None else oxidation_states()
    comp = expected_composition(crystal)
    if not comp:
        return False, "empty composition"
    items = []
    for z, amount in sorted(comp.items()):
        states = table.get(z)
        if states is None:
            return False, f"element Z={z} missing from oxidation table"
        if not states:
            return False, f"no oxidation states for {symbol_of(z)}"
        items.append((amount, np.array(states, dtype=float)))

    lo = sum(amt * st.min() for amt, st in items)
    hi = sum(amt * st.max() for amt, st in items)

    def search(i: int, charge: float, lo_rest: float, hi_rest: float) -> bool:
        if i == len(items):
            return abs(charge) <= tol
        if charge + lo_rest > tol or charge + hi_rest < -tol:
            return False
        amount, states = items[i]
        lo_next = lo_rest - amount * states.min()
        hi_next = hi_rest - amount * states.max()
        return any(search(i + 1, charge + amount * st, lo_next, hi_next)
                   for st in states)

    if search(0, 0.0, lo, hi):
        return True, "neutral assignment found"
    return False, "no neutral oxidation-state assignment"


def density(crystal: DisorderedCrystal) -> float:
    """Occupancy-weighted expected mass over cell volume, in g/cm^3."""
    mass = sum(site.pos_weights.sum() *
               float(site.s @ np.array([mass_of(z) for z in crystal.element_vocab]))
               for site in crystal.sites)
    return mass * AMU_PER_CUBIC_ANGSTROM / cell_volume(crystal.lattice)


def n_el(crystal: DisorderedCrystal) -> int:
    """Number of distinct element species with any positive occupancy."""
    present = np.zeros(crystal.d_elements, dtype=bool)
    for site in crystal.sites:
        present |= site.s > 0.0
    return int(present.sum())


# ---------------------------------------------------------------------------
# Distribution distances and fingerprints
# ---------------------------------------------------------------------------

def wasserstein_1d(xs, ys) -> float:
    """Order-1 Wasserstein distance between empirical distributions via the
    merged-quantile formulation; exact for arbitrary sample sizes."""
    xs = np.sort(np.asarray(xs, dtype=float))
    ys = np.sort(np.asarray(ys, dtype=float))
    if xs.size == 0 or ys.size == 0:
        raise ValueError("empty sample")
    grid = np.concatenate([xs, ys])
    grid.sort(kind="mergesort")
    deltas = np.diff(grid)
    cdf_x = np.searchsorted(xs, grid[:-1], side="right") / xs.size
    cdf_y = np.searchsorted(ys, grid[:-1], side="right") / ys.size
    return float(np.sum(np.abs(cdf_x - cdf_y) * deltas))


def _image_shifts(lat_m: np.ndarray, r_max: float) -> np.ndarray:
    """Lattice image shifts covering a sphere of radius r_max."""
    heights = np.abs(np.linalg.det(lat_m)) / np.linalg.norm(
        np.cross(np.roll(lat_m.T, -1, axis=0), np.roll(lat_m.T, -2, axis=0)), axis=1)
    reach = np.ceil(r_max / heights).astype(int)
    axes = [np.arange(-m, m + 1) for m in reach]
    return np.array(np.meshgrid(*axes)).T.reshape(-1, 3)


def fingerprint(crystal: DisorderedCrystal, rng: np.random.Generator,
                n_realizations: int = 10, r_max: float = 6.0, n_bins: int = 32,
                sigma: float = 0.2) -> np.ndarray:
    """Average descriptor over sampled ordered realizations.

    Descriptor: Gaussian-smeared histogram of interatomic distances within
    r_max (per-atom normalized) concatenated with the element-fraction vector.
    """
    if n_realizations < 1:
        raise ValueError("n_realizations must be >= 1")
    lat_m = lattice_matrix(crystal.lattice)
    shifts = _image_shifts(lat_m, r_max)
    centers = (np.arange(n_bins) + 0.5) * (r_max / n_bins)
    acc = np.zeros(n_bins + crystal.d_elements)
    for _ in range(n_realizations):
        real = sample_realization(crystal, rng)
        f = real.positions_tensor()[:, 0, :]
        n = f.shape[0]
        df = f[:, None, :] - f[None, :, :]
        cart = (df[:, :, None, :] + shifts) @ lat_m.T
        dist = np.linalg.norm(cart, axis=-1).reshape(-1)
        dist = dist[(dist > 1e-9) & (dist <= r_max)]
        hist = np.exp(-0.5 * ((centers[:, None] - dist) ** 2) / sigma ** 2).sum(axis=1)
        frac = real.species_matrix().sum(axis=0) / n
        acc += np.concatenate([hist / n, frac])
    return acc / n_realizations


def fingerprint_set(crystals: list[DisorderedCrystal], seed: int = 0,
                    **kwargs) -> np.ndarray:
    """Fingerprints with a per-structure RNG stream for reproducibility."""
    return np.stack([fingerprint(c, np.random.default_rng((seed, i)), **kwargs)
                     for i, c in enumerate(crystals)])


def calibrate_coverage_thresholds(reference_fps: np.ndarray, n_bins: int = 32,
                                  percentile: float = 95.0) -> tuple[float, float]:
    """Coverage cutoffs: the given percentile of intra-reference
    nearest-neighbor distances, per fingerprint block."""
    if reference_fps.shape[0] < 2:
        raise ValueError("threshold calibration needs at least two references")
    struct, comp = reference_fps[:, :n_bins], reference_fps[:, n_bins:]

    def nn_percentile(block: np.ndarray) -> float:
        d = np.linalg.norm(block[:, None, :] - block[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        return float(np.percentile(d.min(axis=1), percentile))

    return nn_percentile(struct), nn_percentile(comp)


def coverage(generated_fps: np.ndarray, reference_fps: np.ndarray,
             delta_struct: float, delta_comp: float,
             n_bins: int = 32) -> tuple[float, float]:
    """Recall: fraction of reference items with a generated neighbor within
    both block thresholds; precision swaps the roles."""
    if generated_fps.size == 0 or reference_fps.size == 0:
        raise ValueError("empty fingerprint set")

    def hit_fraction(queries: np.ndarray, pool: np.ndarray) -> float:
        dq_s = np.linalg.norm(queries[:, None, :n_bins] - pool[None, :, :n_bins], axis=-1)
        dq_c = np.linalg.norm(queries[:, None, n_bins:] - pool[None, :, n_bins:], axis=-1)
        return float(np.mean(np.any((dq_s <= delta_struct) & (dq_c <= delta_comp), axis=1)))

    recall = hit_fraction(reference_fps, generated_fps)
    precision = hit_fraction(generated_fps, reference_fps)
    return recall, precision
