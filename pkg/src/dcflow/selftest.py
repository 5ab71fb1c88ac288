"""Built-in property suites runnable from the CLI.

Covers the manifold-kernel identities, an analytic-vs-finite-difference
gradient check on a small model, and agreement of the discretizer with the
straight-line reference below.  The reference deliberately re-derives every
rule step by step instead of calling into `discretize`, so the two
implementations only share their configuration values.
"""

from __future__ import annotations

import math
import time

import numpy as np
import torch

from . import discretize, geometry
from .crystal import make_lattice, make_site, make_crystal
from .discretize import DiscretizeConfig
from .training import TrainingConfig, collate_pairs, compute_loss, make_training_pair
from .velocity_net import VelocityNet


def reference_discretize(s, config: DiscretizeConfig) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Straight-line re-derivation of the two-stage assignment for one vector."""
    s = [float(v) for v in s]
    d = len(s)
    # Stage I: ratio of the two largest probabilities.
    j1 = min(range(d), key=lambda j: (-s[j], j))
    p1 = s[j1]
    p2 = max((s[j] for j in range(d) if j != j1), default=0.0)
    if p2 == 0.0 or p1 / p2 > config.tau_ratio:
        return (j1,), (1.0,)
    # Stage II candidates.
    ranked = sorted(range(d), key=lambda j: (-s[j], j))
    v1 = set(ranked[:config.top_k])
    v2 = {j for j in range(d) if s[j] > config.tau_abs}
    positive = sorted(v for v in s if v > 0.0)
    floor_idx = math.floor((100.0 - config.tau_percentile) / 100.0 * (len(positive) - 1))
    v3 = {j for j in range(d) if s[j] >= positive[floor_idx]}
    v4 = {j for j in range(d) if s[j] > config.alpha_adapt * p1}
    entropy = -sum(v * math.log(v) for v in s if v > 0.0) / math.log(d)
    v5 = {j1} if entropy > config.tau_entropy else set(v4)
    votes = {j: sum(j in v for v in (v1, v2, v3, v4, v5)) for j in range(d)}
    chosen = sorted(j for j in range(d) if votes[j] >= config.tau_vote)
    if not chosen:
        chosen = [j1]
    total = sum(s[j] for j in chosen)
    return tuple(chosen), tuple(s[j] / total for j in chosen)


def _random_simplex(rng: np.random.Generator, d: int) -> np.ndarray:
    mode = rng.integers(3)
    if mode == 0:
        return geometry.uniform_simplex(rng, (d,))
    if mode == 1:  # sparse, CIF-like
        k = int(rng.integers(1, min(d, 4) + 1))
        out = np.zeros(d)
        out[rng.choice(d, size=k, replace=False)] = geometry.uniform_simplex(rng, (k,))
        return out
    out = geometry.uniform_simplex(rng, (d,)) ** 3  # peaked
    return out / out.sum()


def run_geometry_suite(n_pairs: int = 1000, seed: int = 0) -> list[str]:
    """Simplex/sphere/torus identities; returns a list of failure messages."""
    rng = np.random.default_rng(seed)
    failures = []
    for d in (2, 5, 100):
        mu = geometry.uniform_simplex(rng, (n_pairs, d))
        nu = geometry.uniform_simplex(rng, (n_pairs, d))
        x0, x1 = geometry.simplex_to_sphere(mu), geometry.simplex_to_sphere(nu)
        d_sphere = np.arccos(np.clip(np.sum(x0 * x1, axis=-1), -1, 1))
        gap = np.abs(d_sphere - 0.5 * geometry.fisher_rao_distance(mu, nu))
        if gap.max() >= 1e-10:
            failures.append(f"fisher-rao identity D={d}: max gap {gap.max():.3e}")
        v = geometry.sphere_log(x0, x1)
        rt = np.abs(geometry.sphere_exp(x0, v) - x1)
        if rt.max() >= 1e-9:
            failures.append(f"sphere round-trip D={d}: max err {rt.max():.3e}")
        norm_gap = np.abs(np.linalg.norm(v, axis=-1) - d_sphere)
        if norm_gap.max() >= 1e-10:
            failures.append(f"sphere log norm D={d}: max gap {norm_gap.max():.3e}")
        for t in (0.25, 0.5, 0.75):
            mu_t = np.stack([geometry.simplex_interpolate(a, b, t)
                             for a, b in zip(mu[:50], nu[:50])])
            if np.abs(mu_t.sum(-1) - 1).max() >= 1e-9 or mu_t.min() < -1e-12:
                failures.append(f"interpolation leaves simplex at t={t}, D={d}")
    f0 = rng.random((n_pairs, 3))
    f1 = rng.random((n_pairs, 3))
    rt = np.abs(geometry.wrap(geometry.torus_exp(f0, geometry.torus_log(f0, f1)) - f1))
    if rt.max() >= 1e-12:
        failures.append(f"torus round-trip: max err {rt.max():.3e}")
    shift = rng.random(3)
    equiv = np.abs(geometry.torus_log((f0 + shift) % 1, (f1 + shift) % 1)
                   - geometry.torus_log(f0, f1))
    if equiv.max() >= 1e-12:
        failures.append(f"torus translation equivariance: max err {equiv.max():.3e}")
    centered = geometry.remove_mean(rng.random((64, 3)))
    if np.abs(centered.sum(axis=0)).max() >= 1e-10:
        failures.append("remove_mean column sums exceed 1e-10")
    return failures


def run_discretize_suite(n_vectors: int = 2000, seed: int = 0) -> list[str]:
    cfg = DiscretizeConfig()
    rng = np.random.default_rng(seed)
    failures = []
    for d in (2, 5, 100):
        for i in range(n_vectors):
            s = _random_simplex(rng, d)
            got = discretize.ensemble_vote(s, cfg)
            want_idx, want_occ = reference_discretize(s, cfg)
            if tuple(got.indices) != want_idx or not np.allclose(
                    got.occupancies, want_occ, rtol=0, atol=1e-12):
                failures.append(f"discretize mismatch D={d} case {i}: {s[s > 0]}")
                break
    return failures


def tiny_disordered_crystal():
    """Four sites over a five-element vocabulary, one of them split-position."""
    vocab = (8, 22, 26, 38, 56)
    lattice = make_lattice(4.2, 3.9, 4.5, 85.0, 95.0, 90.0)
    sites = [
        make_site([0.5, 0.0, 0.0, 0.5, 0.0],
                  [(0.1, 0.2, 0.3), (0.0, 0.0, 0.0)], [1.0, 0.0]),
        make_site([0.0, 1.0, 0.0, 0.0, 0.0],
                  [(0.5, 0.5, 0.5), (0.0, 0.0, 0.0)], [1.0, 0.0]),
        make_site([1.0, 0.0, 0.0, 0.0, 0.0],
                  [(0.5, 0.5, 0.0), (0.45, 0.55, 0.1)], [0.7, 0.3]),
        make_site([0.0, 0.0, 0.3, 0.0, 0.7],
                  [(0.9, 0.1, 0.6), (0.0, 0.0, 0.0)], [1.0, 0.0]),
    ]
    return make_crystal(lattice, sites, element_vocab=vocab)


def run_gradient_suite(seed: int = 0, n_checks: int = 400) -> list[str]:
    """Finite-difference spot check of the loss gradient on a tiny model."""
    failures = []
    cfg = TrainingConfig(task="dng", epochs=0, hidden_dim=16, num_layers=2,
                         d_elements=5, l_max=2, n_freq=4, n_max=8, seed=seed)
    crystal = tiny_disordered_crystal()
    net = VelocityNet(cfg.net_config(), seed=seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.05 * torch.randn_like(p))
    rng = np.random.default_rng(seed)
    pair = make_training_pair(crystal, rng, cfg)
    batch = collate_pairs([pair], net.cfg)

    def loss_value() -> torch.Tensor:
        total, _ = compute_loss(net(batch.graph), batch, cfg)
        return total

    loss = loss_value()
    loss.backward()
    params = [p for p in net.parameters() if p.requires_grad]
    flat_grad = torch.cat([p.grad.reshape(-1) for p in params]).numpy()
    flat = torch.cat([p.detach().reshape(-1) for p in params])
    picks = np.random.default_rng(seed + 1).choice(flat.numel(),
                                                   size=min(n_checks, flat.numel()),
                                                   replace=False)
    h = 1e-5
    worst = 0.0
    offsets = np.cumsum([0] + [p.numel() for p in params])
    with torch.no_grad():
        for k in picks:
            owner = int(np.searchsorted(offsets, k, side="right") - 1)
            local = int(k - offsets[owner])
            view = params[owner].data.reshape(-1)
            orig = float(view[local])
            view[local] = orig + h
            up = float(loss_value())
            view[local] = orig - h
            down = float(loss_value())
            view[local] = orig
            fd = (up - down) / (2 * h)
            denom = max(abs(fd), abs(flat_grad[k]), 1e-8)
            worst = max(worst, abs(fd - flat_grad[k]) / denom)
    if worst >= 1e-4:
        failures.append(f"gradient check: max relative error {worst:.3e}")
    return failures


def run_all(verbose: bool = True) -> bool:
    suites = [("geometry", run_geometry_suite),
              ("discretization", run_discretize_suite),
              ("gradients", run_gradient_suite)]
    ok = True
    for name, fn in suites:
        start = time.perf_counter()
        failures = fn()
        took = time.perf_counter() - start
        status = "PASS" if not failures else "FAIL"
        ok = ok and not failures
        if verbose:
            print(f"[{status}] {name} suite ({took:.1f}s)")
            for msg in failures:
                print(f"    {msg}")
    return ok
