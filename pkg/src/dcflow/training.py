"""Conditional flow matching objectives and the optimization loop.

A training pair draws a flow time t, a prior state, and builds per-field
regression targets: the unconstrained lattice difference, mean-removed wrapped
coordinate displacements, and sphere logarithms for the disorder weights.
Secondary coordinate channels are supervised only on positionally disordered
sites.  In CSP mode the disorder weights are clamped to the data values and
their loss terms vanish.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .crystal import DisorderedCrystal
from .geometry import (FlowState, LengthPrior, lattice_to_unconstrained,
                       sample_priors, simplex_to_sphere, sphere_exp,
                       sphere_log, sphere_to_simplex, wrap)
from .velocity_net import GraphBatch, NetConfig, VelocityNet, build_graph_batch

TASK_CSP = "csp"
TASK_DNG = "dng"


@dataclass
class TrainingConfig:
    task: str = TASK_DNG
    # Relative loss weights; normalized to sum to one during training.
    lw_lattice: float = 1.0
    lw_coords: float = 400.0
    lw_coords_secondary: float = 40.0
    lw_species: float = 2000.0
    lw_weights: float = 40.0
    learning_rate: float = 6e-4
    epochs: int = 2000
    batch_size: int = 512
    seed: int = 0
    l_max: int = 2
    d_elements: int = 100
    hidden_dim: int = 512
    num_layers: int = 6
    n_freq: int = 128
    n_max: int = 160
    grad_clip: float = 10.0
    threads: int = 1

    def __post_init__(self):
        if self.task not in (TASK_CSP, TASK_DNG):
            raise ValueError(f"unknown task {self.task!r}")
        for f in ("lw_lattice", "lw_coords", "lw_coords_secondary",
                  "lw_species", "lw_weights"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be nonnegative")
        if self.task == TASK_CSP:
            # Occupancies are conditioning information, never regressed.
            self.lw_species = 0.0
            self.lw_weights = 0.0

    def net_config(self) -> NetConfig:
        return NetConfig(d_elements=self.d_elements, l_max=self.l_max,
                         hidden_dim=self.hidden_dim, num_layers=self.num_layers,
                         n_freq=self.n_freq, n_max=self.n_max)

    def normalized_weights(self) -> dict[str, float]:
        raw = {"lattice": self.lw_lattice, "coords": self.lw_coords,
               "coords_secondary": self.lw_coords_secondary,
               "species": self.lw_species, "weights": self.lw_weights}
        total = sum(raw.values())
        if total <= 0:
            raise ValueError("at least one loss weight must be positive")
        return {k: v / total for k, v in raw.items()}

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainingConfig":
        """Build from a flat key-value mapping (config files, CLI overrides)."""
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        for key, value in mapping.items():
            if key not in known:
                raise KeyError(f"unknown training config key: {key}")
            kind = known[key]
            if kind == "int" or kind is int:
                kwargs[key] = int(value)
            elif kind == "float" or kind is float:
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value)
        return cls(**kwargs)


@dataclass
class TrainingPair:
    """Interpolated state plus regression targets for one crystal."""

    t: float
    state: FlowState
    lattice_target: np.ndarray   # (6,)
    coord_target: np.ndarray     # (N, l_max, 3); zero on masked channels
    species_target: np.ndarray   # (N, D)
    weights_target: np.ndarray   # (N, l_max)
    coord_mask: np.ndarray       # (N, l_max) bool
    pd_mask: np.ndarray          # (N,) bool


def make_training_pair(crystal: DisorderedCrystal, rng: np.random.Generator,
                       cfg: TrainingConfig,
                       length_prior: LengthPrior | None = None,
                       t: float | None = None) -> TrainingPair:
    n, d, lm = crystal.n_sites, crystal.d_elements, crystal.l_max
    if t is None:
        t = float(rng.uniform())
    prior = sample_priors(n, d, lm, rng, length_prior)

    lat1 = lattice_to_unconstrained(crystal.lattice)
    lat_t = (1.0 - t) * prior.lattice_u + t * lat1
    lat_target = lat1 - prior.lattice_u

    f1 = crystal.positions_tensor()
    w1 = crystal.weights_matrix()
    s1 = crystal.species_matrix()

    pd_mask = (w1 > 0).sum(axis=1) >= 2
    coord_mask = np.zeros((n, lm), dtype=bool)
    coord_mask[:, 0] = True
    if lm > 1:
        coord_mask[:, 1:] = pd_mask[:, None] & (w1[:, 1:] > 0)

    # Mean displacement is removed per channel over the sites that flow on it;
    # masked (padding) channels keep the raw displacement so they land exactly
    # on their zero-padded data values at t=1.
    disp = wrap(f1 - prior.positions)
    shat = disp.copy()
    for ch in range(lm):
        active = coord_mask[:, ch]
        if active.any():
            shat[active, ch, :] -= disp[active, ch, :].mean(axis=0)
    f_t = (prior.positions + t * shat) % 1.0
    coord_target = np.where(coord_mask[..., None], shat, 0.0)

    if cfg.task == TASK_CSP:
        s_t, w_t = s1, w1
        s_target = np.zeros_like(s1)
        w_target = np.zeros_like(w1)
    else:
        xs0 = simplex_to_sphere(prior.species)
        s_target = sphere_log(xs0, simplex_to_sphere(s1))
        s_t = sphere_to_simplex(sphere_exp(xs0, t * s_target))
        xw0 = simplex_to_sphere(prior.pos_weights)
        w_target = sphere_log(xw0, simplex_to_sphere(w1))
        w_t = sphere_to_simplex(sphere_exp(xw0, t * w_target))

    state = FlowState(lat_t, f_t, s_t, w_t)
    return TrainingPair(t=t, state=state, lattice_target=lat_target,
                        coord_target=coord_target, species_target=s_target,
                        weights_target=w_target, coord_mask=coord_mask,
                        pd_mask=pd_mask)


@dataclass
class PairBatch:
    graph: GraphBatch
    lattice_target: torch.Tensor
    coord_target: torch.Tensor
    species_target: torch.Tensor
    weights_target: torch.Tensor
    coord_mask: torch.Tensor
    pd_mask: torch.Tensor


def collate_pairs(pairs: list[TrainingPair], net_cfg: NetConfig) -> PairBatch:
    graph = build_graph_batch([p.state for p in pairs], [p.t for p in pairs], net_cfg)

    def cat(attr, dtype=torch.float64):
        return torch.as_tensor(
            np.concatenate([getattr(p, attr) for p in pairs], axis=0), dtype=dtype)

    return PairBatch(
        graph=graph,
        lattice_target=torch.as_tensor(
            np.stack([p.lattice_target for p in pairs]), dtype=torch.float64),
        coord_target=cat("coord_target"),
        species_target=cat("species_target"),
        weights_target=cat("weights_target"),
        coord_mask=cat("coord_mask", dtype=torch.bool),
        pd_mask=cat("pd_mask", dtype=torch.bool),
    )


def _segment_sum(values: torch.Tensor, index: torch.Tensor, n_seg: int) -> torch.Tensor:
    out = torch.zeros(n_seg, dtype=values.dtype)
    return out.index_add(0, index, values)


def compute_loss(outputs: dict[str, torch.Tensor], batch: PairBatch,
                 cfg: TrainingConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted flow-matching loss, averaged over the batch.

    Per crystal: lattice MSE over 6 components, primary-coordinate MSE over 3N
    components, secondary-coordinate MSE averaged over PD sites only, and
    sphere-tangent MSEs over N*D and N*l_max components.
    """
    g = batch.graph
    b = g.lattice_u.shape[0]
    n_atoms = g.n_atoms.to(torch.float64)

    loss_lat = ((outputs["lattice"] - batch.lattice_target) ** 2).sum(dim=-1) / 6.0

    coord_err = (outputs["coords"] - batch.coord_target) ** 2
    primary = coord_err[:, 0, :].sum(dim=-1)
    loss_f = _segment_sum(primary, g.node_graph, b) / (3.0 * n_atoms)

    if batch.coord_mask.shape[1] > 1:
        sec_mask = batch.coord_mask[:, 1:].to(torch.float64)
        secondary = (coord_err[:, 1:, :].sum(dim=-1) * sec_mask).sum(dim=-1)
        n_pd = _segment_sum(batch.pd_mask.to(torch.float64), g.node_graph, b)
        loss_fp = _segment_sum(secondary, g.node_graph, b) / (3.0 * n_pd.clamp(min=1.0))
        loss_fp = torch.where(n_pd > 0, loss_fp, torch.zeros_like(loss_fp))
    else:
        loss_fp = torch.zeros_like(loss_f)

    d = batch.species_target.shape[1]
    lm = batch.weights_target.shape[1]
    s_err = ((outputs["species"] - batch.species_target) ** 2).sum(dim=-1)
    loss_s = _segment_sum(s_err, g.node_graph, b) / (n_atoms * d)
    w_err = ((outputs["weights"] - batch.weights_target) ** 2).sum(dim=-1)
    loss_w = _segment_sum(w_err, g.node_graph, b) / (n_atoms * lm)

    lam = cfg.normalized_weights()
    per_field = {"lattice": loss_lat, "coords": loss_f,
                 "coords_secondary": loss_fp, "species": loss_s,
                 "weights": loss_w}
    total = sum(lam[k] * v for k, v in per_field.items()).mean()
    parts = {k: float(v.detach().mean()) for k, v in per_field.items()}
    parts["total"] = float(total.detach())
    return total, parts


@dataclass
class TrainResult:
    net: VelocityNet
    history: list[dict[str, float]] = field(default_factory=list)
    length_prior: LengthPrior = None
    size_counts: dict[int, int] = field(default_factory=dict)


def train(crystals: list[DisorderedCrystal], cfg: TrainingConfig,
          log_every: int = 0) -> TrainResult:
    """Adam on the flow-matching objective; deterministic for a fixed seed in
    single-threaded mode.  Priors are redrawn for every crystal each epoch."""
    if not crystals:
        raise ValueError("empty training set")
    d, lm = crystals[0].d_elements, crystals[0].l_max
    for c in crystals:
        if c.d_elements != d or c.l_max != lm:
            raise ValueError("training crystals must share D and l_max")
    if cfg.d_elements != d or cfg.l_max != lm:
        raise ValueError("config D/l_max does not match the dataset")

    torch.set_num_threads(max(1, cfg.threads))
    length_prior = LengthPrior.fit([c.lattice for c in crystals])
    size_counts = dict(Counter(c.n_sites for c in crystals))
    net = VelocityNet(cfg.net_config(), seed=cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, foreach=True)
    rng = np.random.default_rng(cfg.seed)

    history: list[dict[str, float]] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(crystals))
        sums: dict[str, float] = {}
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pairs = [make_training_pair(crystals[i], rng, cfg, length_prior)
                     for i in idx]
            batch = collate_pairs(pairs, net.cfg)
            outputs = net(batch.graph)
            total, parts = compute_loss(outputs, batch, cfg)
            if not np.isfinite(parts["total"]):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            seen += len(idx)
        epoch_means = {k: v / seen for k, v in sums.items()}
        history.append(epoch_means)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{cfg.epochs}  loss {epoch_means['total']:.6f}")

    net.eval()
    return TrainResult(net=net, history=history, length_prior=length_prior,
                       size_counts=size_counts)
