"""Two-stage conversion of continuous disorder weights into multi-hot assignments.

Stage I flags effectively ordered sites by the ratio of the two largest
probabilities.  Stage II builds five candidate selections (top-k, absolute
threshold, percentile floor, adaptive threshold, entropy-gated adaptive) and
keeps the indices whose vote count reaches the voting threshold.  The same
procedure applies to substitutional vectors and positional weights; only the
entropy normalization dimension differs.

Percentile rule: a probability is kept when it sits within the top
tau_percentile percent of the vector's positive entries, i.e. at or above the
lower-interpolated (100 - tau_percentile)-th percentile of those entries.
Zero entries never qualify.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .crystal import DisorderedCrystal, make_site


@dataclass(frozen=True)
class DiscretizeConfig:
    tau_ratio: float = 3.0
    top_k: int = 2
    tau_abs: float = 0.2
    tau_percentile: float = 95.0
    alpha_adapt: float = 0.2
    tau_entropy: float = 0.9
    tau_vote: int = 4

    def __post_init__(self):
        if self.tau_ratio <= 1.0:
            raise ValueError("tau_ratio must exceed 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.tau_percentile <= 100.0:
            raise ValueError("tau_percentile must lie in (0, 100]")
        if not 0.0 <= self.tau_entropy <= 1.0:
            raise ValueError("tau_entropy must lie in [0, 1]")
        if not 1 <= self.tau_vote <= 5:
            raise ValueError("tau_vote must lie in [1, 5]")


@dataclass(frozen=True)
class MultiHotAssignment:
    """Selected indices with occupancies renormalized over the selection."""

    indices: np.ndarray
    occupancies: np.ndarray


def stage1_ordered(s: np.ndarray, config: DiscretizeConfig) -> int | None:
    """Argmax index when the top-two probability ratio exceeds tau_ratio.

    A vanishing runner-up counts as an infinite ratio; argmax ties resolve to
    the lowest index for determinism.
    """
    s = np.asarray(s, dtype=float)
    top = int(np.argmax(s))
    p1 = s[top]
    rest = np.delete(s, top)
    p2 = float(rest.max()) if rest.size else 0.0
    if p2 == 0.0 or p1 / p2 > config.tau_ratio:
        return top
    return None


def _percentile_floor(s: np.ndarray, tau_percentile: float) -> float:
    """Lower-interpolated (100 - tau)-th percentile of the positive entries."""
    positive = np.sort(s[s > 0.0])
    idx = int(np.floor((100.0 - tau_percentile) / 100.0 * (positive.size - 1)))
    return float(positive[idx])


def _adaptive_rule(s: np.ndarray, alpha: float) -> np.ndarray:
    return s > alpha * s.max()


def normalized_entropy(s: np.ndarray) -> float:
    """Shannon entropy over the vector, normalized by log of its length."""
    s = np.asarray(s, dtype=float)
    nz = s[s > 0.0]
    return float(-(nz * np.log(nz)).sum() / np.log(s.size))


def heuristics(s: np.ndarray, config: DiscretizeConfig) -> list[np.ndarray]:
    """The five candidate selections as boolean masks."""
    s = np.asarray(s, dtype=float)
    d = s.size
    order = np.argsort(-s, kind="stable")
    v1 = np.zeros(d, dtype=bool)
    v1[order[:min(config.top_k, d)]] = True
    v2 = s > config.tau_abs
    v3 = s >= _percentile_floor(s, config.tau_percentile)
    v4 = _adaptive_rule(s, config.alpha_adapt)
    if normalized_entropy(s) > config.tau_entropy:
        v5 = np.zeros(d, dtype=bool)
        v5[int(np.argmax(s))] = True
    else:
        v5 = _adaptive_rule(s, config.alpha_adapt)
    return [v1, v2, v3, v4, v5]


def ensemble_vote(s: np.ndarray, config: DiscretizeConfig) -> MultiHotAssignment:
    """Stage I short-circuit, otherwise majority voting over the heuristics.

    An empty final selection (possible at tau_vote = 5) falls back to the
    argmax singleton so the assignment is never empty.
    """
    s = np.asarray(s, dtype=float)
    ordered = stage1_ordered(s, config)
    if ordered is not None:
        return MultiHotAssignment(indices=np.array([ordered]),
                                  occupancies=np.array([1.0]))
    votes = np.sum(heuristics(s, config), axis=0)
    selected = np.flatnonzero(votes >= config.tau_vote)
    if selected.size == 0:
        selected = np.array([int(np.argmax(s))])
    occ = s[selected]
    return MultiHotAssignment(indices=selected, occupancies=occ / occ.sum())


def discretize_vector(s: np.ndarray, config: DiscretizeConfig) -> np.ndarray:
    """Dense multi-hot vector: zeros everywhere except the renormalized selection."""
    assignment = ensemble_vote(s, config)
    out = np.zeros(np.asarray(s).size)
    out[assignment.indices] = assignment.occupancies
    return out


def discretize_crystal(crystal: DisorderedCrystal,
                       config: DiscretizeConfig = DiscretizeConfig()) -> DisorderedCrystal:
    """Apply the two-stage procedure to every site's s and w.

    Positional weights use the channel count as the entropy dimension, and
    positions of deselected channels are zeroed per the padding convention.
    """
    sites = []
    for site in crystal.sites:
        s_new = discretize_vector(site.s, config)
        w_new = discretize_vector(site.pos_weights, config)
        sites.append(make_site(s_new, site.positions, w_new))
    return replace(crystal, sites=tuple(sites))
