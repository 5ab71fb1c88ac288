"""Graph velocity network over disordered-crystal states.

Node features are initialized from the substitutional vector and the flow
time; geometry enters only through occupancy-weighted edge features built from
wrapped coordinate differences and the Gram matrix of the cell, so the network
is invariant to global translations and rotations by construction.  Message
passing runs on the fully connected site graph.  Sphere-valued velocity heads
are projected onto the tangent plane at the current reparameterized point.

Everything runs in float64.  The network consumes a `GraphBatch` of
precomputed constant tensors, which keeps the differentiable path limited to
the learnable maps.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .crystal import D_ELEMENTS, N_MAX_DEFAULT, LatticeParams
from .geometry import (ANGLE_HI, ANGLE_LO, FlowState, angles_from_unconstrained,
                       lattice_metric, wrap)

CHECKPOINT_VERSION = 1
_ZERO_DIR_TOL = 1e-8


@dataclass(frozen=True)
class NetConfig:
    d_elements: int = D_ELEMENTS
    l_max: int = 2
    hidden_dim: int = 512
    num_layers: int = 6
    n_freq: int = 128
    n_max: int = N_MAX_DEFAULT
    zero_init_heads: bool = True

    @property
    def edge_mode(self) -> str:
        """Binary positional disorder keeps the four-block concatenation;
        higher orders switch to occupancy-weighted summation."""
        return "concat" if self.l_max == 2 else "sum"

    @property
    def dist_dim(self) -> int:
        base = 6 * self.n_freq
        return base * self.l_max * self.l_max if self.edge_mode == "concat" else base

    @property
    def dir_dim(self) -> int:
        return 3 * self.l_max * self.l_max if self.edge_mode == "concat" else 3


@dataclass
class VelocityBundle:
    """Per-field tangent velocities for one crystal-shaped state."""

    lattice: np.ndarray      # (6,)
    coords: np.ndarray       # (N, l_max, 3)
    species: np.ndarray      # (N, D), tangent at sqrt(s)
    pos_weights: np.ndarray  # (N, l_max), tangent at sqrt(w)


def sinusoidal_embedding(d: np.ndarray, n_freq: int) -> np.ndarray:
    """Torus-periodic features: sin/cos(2 pi k d) for k=1..n_freq per axis.

    The input is reduced mod 1 first, so shifting any component by an integer
    leaves the embedding unchanged.
    """
    d = np.asarray(d, dtype=float) % 1.0
    k = np.arange(1, n_freq + 1, dtype=float)
    ang = 2.0 * np.pi * d[..., None] * k              # (..., 3, n_freq)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(*d.shape[:-1], 6 * n_freq)


def time_features(t: float, dim: int) -> np.ndarray:
    """Standard sinusoidal timestep features on the scaled time 1000*t."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = 1000.0 * t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def edge_feature_matrices(positions: np.ndarray, weights: np.ndarray,
                          metric: np.ndarray, mode: str,
                          n_freq: int) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs distance and direction features, shape (..., N, N, dim).

    For each channel pair (l1, l2) the wrapped difference f[j,l2] - f[i,l1]
    yields a sinusoidal distance block and a metric-normalized direction,
    both scaled by the joint occupancy w[i,l1]*w[j,l2].  Blocks are
    concatenated in (l1-major, l2-minor) order for binary disorder or summed
    for higher orders.  Entries with vanishing metric displacement get a zero
    direction.

    Accepts a single crystal (N, l_max, 3) or a stacked batch with one
    leading axis; the metric then carries the same leading axis.
    """
    squeeze = positions.ndim == 3
    if squeeze:
        positions = positions[None]
        weights = weights[None]
        metric = metric[None]
    lm = positions.shape[2]
    blocks_dist = []
    blocks_dir = []
    for l1 in range(lm):
        for l2 in range(lm):
            diff = wrap(positions[:, None, :, l2, :] - positions[:, :, None, l1, :])
            wgt = weights[:, :, None, l1] * weights[:, None, :, l2]
            emb = sinusoidal_embedding(diff, n_freq)
            u = np.einsum("gijk,glk->gijl", diff, metric)
            norm = np.linalg.norm(u, axis=-1, keepdims=True)
            denom = np.where(norm < _ZERO_DIR_TOL, 1.0, norm)
            direction = np.where(norm < _ZERO_DIR_TOL, 0.0, u / denom)
            blocks_dist.append(wgt[..., None] * emb)
            blocks_dir.append(wgt[..., None] * direction)
    if mode == "concat":
        e_dist = np.concatenate(blocks_dist, axis=-1)
        e_dir = np.concatenate(blocks_dir, axis=-1)
    else:
        e_dist, e_dir = sum(blocks_dist), sum(blocks_dir)
    return (e_dist[0], e_dir[0]) if squeeze else (e_dist, e_dir)


def _feature_lattice(lattice_u: np.ndarray) -> LatticeParams:
    """Decode a cell for edge-feature geometry.

    Training interpolants always decode into the valid Niggli box, but a
    partially trained velocity field can push intermediate sampling states
    outside it, so lengths and angles are clipped to keep the metric defined.
    """
    lengths = np.clip(lattice_u[:3], 0.1, None)
    angles = np.clip(angles_from_unconstrained(lattice_u[3:]),
                     ANGLE_LO + 1e-6, ANGLE_HI - 1e-6)
    return LatticeParams(*lengths, *angles)


@dataclass
class GraphBatch:
    """Constant tensors for a batch of crystal-shaped states at given times."""

    species: torch.Tensor        # (Nt, D)
    sphere_s: torch.Tensor       # (Nt, D) sqrt of species
    sphere_w: torch.Tensor       # (Nt, l_max)
    time_feat: torch.Tensor      # (B, hidden)
    lattice_u: torch.Tensor      # (B, 6)
    e_dist: torch.Tensor         # (E, dist_dim)
    e_dir: torch.Tensor          # (E, dir_dim)
    edge_dst: torch.Tensor       # (E,) receiving node
    edge_src: torch.Tensor       # (E,) sending node
    node_graph: torch.Tensor     # (Nt,)
    edge_graph: torch.Tensor     # (E,)
    n_atoms: torch.Tensor        # (B,)
    sizes: list[int] = field(default_factory=list)


def build_graph_batch(states: list[FlowState], times: list[float],
                      cfg: NetConfig) -> GraphBatch:
    species, sphere_s, sphere_w, tfeat, lats = [], [], [], [], []
    dst, src, node_graph, edge_graph, counts = [], [], [], [], []
    offsets = []
    offset = 0
    for g, (state, t) in enumerate(zip(states, times, strict=True)):
        n = state.n_sites
        if n > cfg.n_max:
            raise ValueError(f"{n} sites exceeds the atom-count embedding range {cfg.n_max}")
        species.append(np.clip(state.species, 0.0, None))
        sphere_s.append(np.sqrt(np.clip(state.species, 0.0, None)))
        sphere_w.append(np.sqrt(np.clip(state.pos_weights, 0.0, None)))
        tfeat.append(time_features(t, cfg.hidden_dim))
        lats.append(state.lattice_u)
        ii, jj = np.where(~np.eye(n, dtype=bool))
        dst.append(ii + offset)
        src.append(jj + offset)
        node_graph.append(np.full(n, g))
        edge_graph.append(np.full(ii.shape[0], g))
        counts.append(n)
        offsets.append(offset)
        offset += n

    # Edge features are computed per group of equally sized crystals so the
    # channel-pair loop runs once per group instead of once per crystal.
    e_dist: list[np.ndarray | None] = [None] * len(states)
    e_dir: list[np.ndarray | None] = [None] * len(states)
    by_size: dict[int, list[int]] = {}
    for g, state in enumerate(states):
        by_size.setdefault(state.n_sites, []).append(g)
    for n, members in by_size.items():
        pos = np.stack([states[g].positions for g in members])
        wts = np.stack([states[g].pos_weights for g in members])
        metrics = np.stack([lattice_metric(_feature_lattice(states[g].lattice_u))
                            for g in members])
        dist_m, dir_m = edge_feature_matrices(pos, wts, metrics,
                                              cfg.edge_mode, cfg.n_freq)
        ii, jj = np.where(~np.eye(n, dtype=bool))
        for k, g in enumerate(members):
            e_dist[g] = dist_m[k, ii, jj]
            e_dir[g] = dir_m[k, ii, jj]

    def cat(parts, dtype=torch.float64):
        return torch.as_tensor(np.concatenate(parts, axis=0), dtype=dtype)

    return GraphBatch(
        species=cat(species),
        sphere_s=cat(sphere_s),
        sphere_w=cat(sphere_w),
        time_feat=torch.as_tensor(np.stack(tfeat), dtype=torch.float64),
        lattice_u=torch.as_tensor(np.stack(lats), dtype=torch.float64),
        e_dist=cat(e_dist),
        e_dir=cat(e_dir),
        edge_dst=cat(dst, dtype=torch.long),
        edge_src=cat(src, dtype=torch.long),
        node_graph=cat(node_graph, dtype=torch.long),
        edge_graph=cat(edge_graph, dtype=torch.long),
        n_atoms=torch.as_tensor(np.array(counts), dtype=torch.long),
        sizes=counts,
    )


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.SiLU(), nn.Linear(hidden, d_out))


class VelocityNet(nn.Module):
    """Message-passing velocity field over the fully connected site graph."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        h = cfg.hidden_dim
        self.phi_prob = _mlp(cfg.d_elements, h, h)
        self.phi_time = _mlp(h, h, h)
        self.phi_init = _mlp(2 * h, h, h)
        self.atom_count_emb = nn.Embedding(cfg.n_max, h)
        msg_in = 2 * h + 6 + cfg.dist_dim + h + cfg.dir_dim
        self.phi_m = nn.ModuleList(_mlp(msg_in, h, h) for _ in range(cfg.num_layers))
        self.phi_h = nn.ModuleList(_mlp(2 * h, h, h) for _ in range(cfg.num_layers))
        self.head_coord = _mlp(h, h, 3 * cfg.l_max)
        self.head_species = _mlp(h, h, cfg.d_elements)
        self.head_weights = _mlp(h, h, cfg.l_max)
        self.head_lattice = _mlp(h, h, 6)
        self.double()
        if cfg.zero_init_heads:
            for head in (self.head_coord, self.head_species,
                         self.head_weights, self.head_lattice):
                nn.init.zeros_(head[-1].weight)
                nn.init.zeros_(head[-1].bias)

    def forward(self, batch: GraphBatch) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        t_emb = self.phi_time(batch.time_feat)                     # (B, h)
        h = self.phi_init(torch.cat([self.phi_prob(batch.species),
                                     t_emb[batch.node_graph]], dim=-1))
        z = self.atom_count_emb(batch.n_atoms - 1)                 # (B, h)
        lat_e = batch.lattice_u[batch.edge_graph]
        z_e = z[batch.edge_graph]
        n_nodes = batch.species.shape[0]
        for phi_m, phi_h in zip(self.phi_m, self.phi_h):
            msg_in = torch.cat([h[batch.edge_dst], h[batch.edge_src], lat_e,
                                batch.e_dist, z_e, batch.e_dir], dim=-1)
            messages = phi_m(msg_in)
            agg = torch.zeros(n_nodes, cfg.hidden_dim, dtype=h.dtype)
            agg = agg.index_add(0, batch.edge_dst, messages)
            h = h + phi_h(torch.cat([h, agg], dim=-1))

        coords = self.head_coord(h).reshape(n_nodes, cfg.l_max, 3)
        s_dot = self.head_species(h)
        w_dot = self.head_weights(h)
        # Tangent projection at the current sphere points.
        s_dot = s_dot - (s_dot * batch.sphere_s).sum(-1, keepdim=True) * batch.sphere_s
        w_dot = w_dot - (w_dot * batch.sphere_w).sum(-1, keepdim=True) * batch.sphere_w

        b = batch.lattice_u.shape[0]
        pooled = torch.zeros(b, cfg.hidden_dim, dtype=h.dtype)
        pooled = pooled.index_add(0, batch.node_graph, h)
        pooled = pooled / batch.n_atoms.unsqueeze(-1).to(h.dtype)
        l_dot = self.head_lattice(pooled)
        return {"lattice": l_dot, "coords": coords, "species": s_dot,
                "weights": w_dot}

    @torch.no_grad()
    def predict(self, state: FlowState, t: float) -> VelocityBundle:
        """Single-state convenience wrapper returning numpy velocities."""
        return self.predict_many([state], [t])[0]

    @torch.no_grad()
    def predict_many(self, states: list[FlowState],
                     times: list[float]) -> list[VelocityBundle]:
        batch = build_graph_batch(states, times, self.cfg)
        out = self.forward(batch)
        bundles = []
        start = 0
        for g, n in enumerate(batch.sizes):
            sl = slice(start, start + n)
            bundles.append(VelocityBundle(
                lattice=out["lattice"][g].numpy(),
                coords=out["coords"][sl].numpy(),
                species=out["species"][sl].numpy(),
                pos_weights=out["weights"][sl].numpy(),
            ))
            start += n
        return bundles


def parameter_gradients(net: VelocityNet, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Raises on a non-finite loss or gradient, naming the offending tensor.
    """
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss value: {loss.item()}")
    names, params = zip(*net.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise RuntimeError(f"non-finite gradient in parameter {name}")
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# Checkpoint container: npz payload with named flat arrays plus a JSON header.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, net: VelocityNet, extra: dict | None = None) -> None:
    arrays = {name: p.detach().numpy() for name, p in net.named_parameters()}
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(net.cfg),
            "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str) -> tuple[VelocityNet, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if "version" not in meta:
            raise ValueError("checkpoint missing mandatory version field")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = NetConfig(**meta["config"])
        net = VelocityNet(cfg)
        state = {name: torch.as_tensor(data[name], dtype=torch.float64)
                 for name in data.files if name != "__meta__"}
    net.load_state_dict(state)
    net.eval()
    return net, meta["extra"]


def checkpoint_checksum(path: str) -> str:
    with open(path, "rb") as fh:
        return f"{zlib.crc32(fh.read()):08x}"
