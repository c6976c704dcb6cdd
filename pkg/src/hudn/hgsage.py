"""Two-layer heterogeneous GraphSAGE with association and power heads.

Each layer updates every node from two mean aggregates: its first-order
neighbours (the other node type) and its second-order neighbours (same
type, two hops away), each through its own weight matrix, and L2
normalises the concatenation.  UE and BS nodes have separate weights.

The association head scores every UE/BS pair with a small shared MLP over
(UE embedding, BS embedding, link gain), standardises each UE's scores
over its detected BSs and applies a temperature softmax.  The power head
maps each BS embedding through a sigmoid scaled to that site's p_max.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradengine as ge
from .hetgraph import HeteroGraph
from .objective import harden as _harden

ModelParams = dict  # name -> float64 ndarray

POWER_FLOOR = 1e-6
DEFAULT_TEMPERATURE = 0.1


@dataclass
class ModelOutput:
    x_soft: np.ndarray
    p: np.ndarray
    z: np.ndarray


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(feature_dims, seed=0, hidden=128, head_hidden=64) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    ``feature_dims`` is (J, K_a): UE feature width and BS feature width.
    """
    J, K = (int(d) for d in feature_dims)
    if min(J, K, hidden, head_hidden) < 1 or hidden % 2:
        raise ValueError("dimensions must be positive and hidden even")
    rng = np.random.default_rng(seed)
    half = hidden // 2
    params: ModelParams = {}
    in_dims = {"ue": (J + K, 2 * J), "bs": (K + J, 2 * K)}
    for layer in (1, 2):
        for kind in ("ue", "bs"):
            d1, d2 = in_dims[kind] if layer == 1 else (2 * hidden, 2 * hidden)
            pre = f"layer{layer}.{kind}"
            params[f"{pre}.W1"] = _glorot(rng, d1, half)
            params[f"{pre}.b1"] = np.zeros(half)
            params[f"{pre}.W2"] = _glorot(rng, d2, half)
            params[f"{pre}.b2"] = np.zeros(half)
    params["ua.U_ue"] = _glorot(rng, hidden, head_hidden)
    params["ua.U_bs"] = _glorot(rng, hidden, head_hidden)
    params["ua.u_edge"] = _glorot(rng, 1, head_hidden)
    params["ua.c"] = np.zeros(head_hidden)
    params["ua.v"] = _glorot(rng, head_hidden, 1)
    params["pc.w"] = _glorot(rng, hidden, 1)
    params["pc.b"] = np.zeros(1)
    return params


def feature_dims(params: ModelParams) -> tuple[int, int]:
    W2u = params["layer1.ue.W2"].shape[0]
    W2b = params["layer1.bs.W2"].shape[0]
    return W2u // 2, W2b // 2


@dataclass
class GraphBatch:
    """Graphs of equal size stacked along a leading axis."""

    ue_features: np.ndarray
    bs_features: np.ndarray
    edge_features: np.ndarray
    mask: np.ndarray
    agg1_ue: np.ndarray
    agg2_ue: np.ndarray
    agg1_bs: np.ndarray
    agg2_bs: np.ndarray
    gains: np.ndarray
    p_max: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Sequence[HeteroGraph], p_max) -> "GraphBatch":
        shapes = {g.gains.shape for g in graphs}
        if len(shapes) != 1:
            raise ValueError("graphs in a batch must share (K_a, J)")
        aggs = [g.aggregators() for g in graphs]
        return cls(
            ue_features=np.stack([g.ue_features for g in graphs]),
            bs_features=np.stack([g.bs_features for g in graphs]),
            edge_features=np.stack([g.edge_features for g in graphs]),
            mask=np.stack([g.edges for g in graphs]),
            agg1_ue=np.stack([a[0] for a in aggs]),
            agg2_ue=np.stack([a[1] for a in aggs]),
            agg1_bs=np.stack([a[2] for a in aggs]),
            agg2_bs=np.stack([a[3] for a in aggs]),
            gains=np.stack([g.gains for g in graphs]),
            p_max=np.asarray(p_max, dtype=np.float64),
        )


def _sage(h_self, agg_nbr, W, b):
    return ge.relu(ge.add(ge.matmul(ge.concat([h_self, agg_nbr]), W), b))


def hgsage_layer(h_ue, h_bs, aggs, weights):
    """One layer for both node types.

    ``aggs`` = (ue<-bs, ue<-ue, bs<-ue, bs<-bs) mean matrices;
    ``weights`` maps "ue.W1", "ue.b1", ... to tensors.
    """
    a1u, a2u, a1b, a2b = aggs
    o_ue = _sage(h_ue, ge.matmul(a1u, h_bs), weights["ue.W1"], weights["ue.b1"])
    s_ue = _sage(h_ue, ge.matmul(a2u, h_ue), weights["ue.W2"], weights["ue.b2"])
    o_bs = _sage(h_bs, ge.matmul(a1b, h_ue), weights["bs.W1"], weights["bs.b1"])
    s_bs = _sage(h_bs, ge.matmul(a2b, h_bs), weights["bs.W2"], weights["bs.b2"])
    return ge.l2_normalize_rows(ge.concat([o_ue, s_ue])), ge.l2_normalize_rows(ge.concat([o_bs, s_bs]))


def leaves(params: ModelParams, requires_grad=True) -> dict[str, ge.Tensor]:
    return {k: ge.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def forward_batch(batch: GraphBatch, theta: dict[str, ge.Tensor], T=DEFAULT_TEMPERATURE):
    """Returns tensors (x_soft, p, z) with a leading batch axis."""
    if not T > 0:
        raise ValueError("temperature must be positive")
    aggs = (batch.agg1_ue, batch.agg2_ue, batch.agg1_bs, batch.agg2_bs)
    h_ue, h_bs = ge.Tensor(batch.ue_features), ge.Tensor(batch.bs_features)
    for layer in (1, 2):
        pre = f"layer{layer}."
        w = {k[len(pre):]: v for k, v in theta.items() if k.startswith(pre)}
        h_ue, h_bs = hgsage_layer(h_ue, h_bs, aggs, w)

    n, K, J = batch.gains.shape
    hh = theta["ua.c"].shape[0]
    a = ge.reshape(ge.matmul(h_ue, theta["ua.U_ue"]), (n, K, 1, hh))
    b = ge.reshape(ge.matmul(h_bs, theta["ua.U_bs"]), (n, 1, J, hh))
    e = ge.mul(batch.edge_features[..., None], theta["ua.u_edge"])
    pair = ge.relu(ge.add(ge.add(ge.add(a, b), e), theta["ua.c"]))
    z_raw = ge.reshape(ge.matmul(pair, theta["ua.v"]), (n, K, J))
    z = ge.standardize_rows(z_raw, batch.mask)
    x_soft = ge.softmax_T(z, T, batch.mask)

    q = ge.reshape(ge.sigmoid(ge.add(ge.matmul(h_bs, theta["pc.w"]), theta["pc.b"])), (n, J))
    # p_max * (1 - (1 - floor) * (1 - q)) stays <= p_max even when q rounds to 1
    p = ge.mul(ge.sub(1.0, ge.scale(ge.sub(1.0, q), 1.0 - POWER_FLOOR)), batch.p_max)
    return x_soft, p, z


def forward(graph: HeteroGraph | Sequence[HeteroGraph], params: ModelParams, T=DEFAULT_TEMPERATURE,
            p_max=None) -> ModelOutput:
    """Inference on one graph (or a same-size list, stacked)."""
    single = isinstance(graph, HeteroGraph)
    graphs = [graph] if single else list(graph)
    if p_max is None:
        p_max = graphs[0].p_max
    if p_max is None:
        raise ValueError("p_max missing: pass it or build the graph with p_max")
    batch = GraphBatch.from_graphs(graphs, p_max)
    x, p, z = forward_batch(batch, leaves(params, requires_grad=False), T)
    if single:
        return ModelOutput(x.value[0], p.value[0], z.value[0])
    return ModelOutput(x.value, p.value, z.value)


def harden(x_soft) -> np.ndarray:
    return _harden(x_soft)
