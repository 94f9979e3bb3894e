"""Encode-process-decode graph network built on the tensornet primitives.

Message passing follows the interaction-network pattern: per layer, each
directed edge updates from [edge, sender, receiver] through an MLP with a
residual connection, then each node updates from [node, sum of incoming
updated edges] the same way. Parameters are not shared across layers. All
MLPs have the same number of hidden layers and ReLU activations; hidden
biases are uniform-initialized, output biases start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .tensornet import Tensor


@dataclass
class GNNConfig:
    node_in: int
    edge_in: int
    hidden: int
    node_out: int
    n_mp_layers: int = 7
    n_mlp_hidden_layers: int = 2
    layer_norm: bool = True


class MLP:
    def __init__(self, store: tn.ParamStore, prefix: str, in_dim: int, hidden: int,
                 out_dim: int, n_hidden: int, rng: np.random.Generator,
                 zero_output: bool = False):
        dims = [in_dim] + [hidden] * n_hidden + [out_dim]
        self.layers = []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last and zero_output:
                w = np.zeros((fi, fo))
            else:
                w = tn.kaiming_uniform(rng, fi, (fi, fo))
            if last:
                b = np.zeros(fo)
            else:
                bound = 1.0 / np.sqrt(max(1, fi))
                b = rng.uniform(-bound, bound, size=fo)
            self.layers.append((
                store.create(f"{prefix}/w{i}", w),
                store.create(f"{prefix}/b{i}", b),
            ))

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = tn.linear(x, w, b)
            if i < len(self.layers) - 1:
                x = tn.relu(x)
        return x


class LayerNorm:
    def __init__(self, store: tn.ParamStore, prefix: str, dim: int):
        self.gamma = store.create(f"{prefix}/gamma", np.ones((1, dim)))
        self.beta = store.create(f"{prefix}/beta", np.zeros((1, dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta)


@dataclass
class LatentGraph:
    nodes: Tensor
    edges: Tensor
    senders: np.ndarray
    receivers: np.ndarray


class GraphNet:
    """Stateless apart from its parameters, which live in the given store."""

    def __init__(self, store: tn.ParamStore, prefix: str, cfg: GNNConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        nh = cfg.n_mlp_hidden_layers
        h = cfg.hidden
        self.enc_node = MLP(store, f"{prefix}/enc_node", cfg.node_in, h, h, nh, rng)
        self.enc_edge = MLP(store, f"{prefix}/enc_edge", cfg.edge_in, h, h, nh, rng)
        self.edge_mlps = [MLP(store, f"{prefix}/mp{l}/edge", 3 * h, h, h, nh, rng)
                          for l in range(cfg.n_mp_layers)]
        self.node_mlps = [MLP(store, f"{prefix}/mp{l}/node", 2 * h, h, h, nh, rng)
                          for l in range(cfg.n_mp_layers)]
        self.dec_node = MLP(store, f"{prefix}/dec_node", h, h, cfg.node_out, nh, rng)
        self.norms = None
        if cfg.layer_norm:
            self.norms = {
                "enc_node": LayerNorm(store, f"{prefix}/ln_enc_node", h),
                "enc_edge": LayerNorm(store, f"{prefix}/ln_enc_edge", h),
            }
            for l in range(cfg.n_mp_layers):
                self.norms[f"edge{l}"] = LayerNorm(store, f"{prefix}/ln_mp{l}_edge", h)
                self.norms[f"node{l}"] = LayerNorm(store, f"{prefix}/ln_mp{l}_node", h)

    def _maybe_norm(self, key, x):
        if self.norms is None:
            return x
        return self.norms[key](x)

    def encode(self, node_feats, edge_feats, senders, receivers) -> LatentGraph:
        senders = np.asarray(senders, dtype=np.int64)
        receivers = np.asarray(receivers, dtype=np.int64)
        v = self._maybe_norm("enc_node", self.enc_node(tn.as_tensor(node_feats)))
        e = self._maybe_norm("enc_edge", self.enc_edge(tn.as_tensor(edge_feats)))
        return LatentGraph(nodes=v, edges=e, senders=senders, receivers=receivers)

    def process(self, g: LatentGraph) -> LatentGraph:
        v, e = g.nodes, g.edges
        n_nodes = v.shape[0]
        for l in range(self.cfg.n_mp_layers):
            vs = tn.gather_rows(v, g.senders)
            vr = tn.gather_rows(v, g.receivers)
            e_upd = self.edge_mlps[l](tn.concat([e, vs, vr], axis=1))
            e = tn.add(self._maybe_norm(f"edge{l}", e_upd), e)
            agg = tn.scatter_add_rows(e, g.receivers, n_nodes)
            v_upd = self.node_mlps[l](tn.concat([v, agg], axis=1))
            v = tn.add(self._maybe_norm(f"node{l}", v_upd), v)
        return LatentGraph(nodes=v, edges=e, senders=g.senders, receivers=g.receivers)

    def decode(self, g: LatentGraph) -> Tensor:
        return self.dec_node(g.nodes)

    def forward(self, node_feats, edge_feats, senders, receivers):
        """Returns (decoded node outputs, final node latents)."""
        g = self.process(self.encode(node_feats, edge_feats, senders, receivers))
        return self.decode(g), g.nodes


def both_directions(pairs: np.ndarray):
    """Directed (senders, receivers) covering each undirected pair both ways."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    senders = np.concatenate([pairs[:, 0], pairs[:, 1]])
    receivers = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return senders, receivers
