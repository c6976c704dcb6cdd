"""Bipartite UE/BS graph of one event, with first- and second-order neighbourhoods.

Node features are each node's gain profile (a UE's gains to every site, a
site's gains to every active UE) on a log10 scale, standardised with
statistics of the whole radio map.  Each profile is sorted strongest
first so node features do not depend on how the other side is labelled;
the per-link gain travels separately as an edge feature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .radiomap import RadioMap
from .scenario import Event

UE = "ue"
BS = "bs"


@dataclass(frozen=True)
class FeatureScaler:
    mean: float
    std: float

    @classmethod
    def fit(cls, radio_map: RadioMap) -> "FeatureScaler":
        logs = np.log10(radio_map.gains)
        if logs.size == 0:
            return cls(0.0, 1.0)
        std = float(logs.std())
        return cls(float(logs.mean()), std if std > 0 else 1.0)

    def transform(self, gains: np.ndarray) -> np.ndarray:
        return (np.log10(gains) - self.mean) / self.std


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


DEFAULT_DETECT_THRESHOLD = db_to_linear(-110.0)


@dataclass(frozen=True)
class HeteroGraph:
    ue_ids: tuple[int, ...]
    bs_ids: tuple[int, ...]
    gains: np.ndarray
    edges: np.ndarray
    ue_features: np.ndarray
    bs_features: np.ndarray
    edge_features: np.ndarray
    nbr1_ue: tuple[np.ndarray, ...] = field(repr=False)
    nbr2_ue: tuple[np.ndarray, ...] = field(repr=False)
    nbr1_bs: tuple[np.ndarray, ...] = field(repr=False)
    nbr2_bs: tuple[np.ndarray, ...] = field(repr=False)
    p_max: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_ue(self) -> int:
        return len(self.ue_ids)

    @property
    def n_bs(self) -> int:
        return len(self.bs_ids)

    def aggregators(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Row-normalised mean-aggregation matrices (ue<-bs, ue<-ue, bs<-ue, bs<-bs).

        Rows of nodes with an empty neighbourhood are all zero, so their
        aggregate is the zero vector.
        """
        K, J = self.n_ue, self.n_bs
        return (
            _mean_matrix(self.nbr1_ue, J),
            _mean_matrix(self.nbr2_ue, K),
            _mean_matrix(self.nbr1_bs, K),
            _mean_matrix(self.nbr2_bs, J),
        )


def _mean_matrix(lists, width) -> np.ndarray:
    out = np.zeros((len(lists), width))
    for r, idx in enumerate(lists):
        if len(idx):
            out[r, idx] = 1.0 / len(idx)
    return out


def _profile(logs: np.ndarray, detected: np.ndarray) -> np.ndarray:
    order = np.argsort(-logs, axis=1, kind="stable")
    feats = np.take_along_axis(logs, order, axis=1)
    keep = np.take_along_axis(detected, order, axis=1)
    return np.where(keep, feats, 0.0)


def _second_order(adj: np.ndarray) -> tuple[np.ndarray, ...]:
    shared = (adj.astype(np.int64) @ adj.T.astype(np.int64)) > 0
    np.fill_diagonal(shared, False)
    return tuple(np.flatnonzero(row) for row in shared)


def _cap(lists, cap, rng):
    if cap is None:
        return lists
    return tuple(np.sort(rng.choice(idx, size=cap, replace=False)) if len(idx) > cap else idx
                 for idx in lists)


def build_graph(
    radio_map: RadioMap,
    event: Event,
    detect_threshold: float = DEFAULT_DETECT_THRESHOLD,
    scaler: FeatureScaler | None = None,
    max_neighbors: int | None = None,
    seed=None,
    p_max=None,
) -> HeteroGraph:
    """Graph for the active UEs of ``event``.

    A UE-BS edge exists when the gain reaches ``detect_threshold``; a UE
    that detects nothing keeps a single edge to its strongest site.
    """
    if event.K_a == 0:
        raise ValueError("event has no active UEs")
    idx = event.indices
    if idx.min() < 0 or idx.max() >= radio_map.gains.shape[0]:
        raise IndexError("event indices outside the radio map")
    scaler = scaler or FeatureScaler.fit(radio_map)
    gains = radio_map.gains[idx]
    edges = gains >= detect_threshold
    lonely = ~edges.any(axis=1)
    if lonely.any():
        edges[lonely, np.argmax(gains[lonely], axis=1)] = True
    logs = scaler.transform(gains)
    nbr1_ue = tuple(np.flatnonzero(r) for r in edges)
    nbr1_bs = tuple(np.flatnonzero(c) for c in edges.T)
    nbr2_ue = _second_order(edges)
    nbr2_bs = _second_order(edges.T)
    if max_neighbors is not None:
        rng = np.random.default_rng(seed)
        nbr1_ue, nbr2_ue, nbr1_bs, nbr2_bs = (
            _cap(lst, max_neighbors, rng) for lst in (nbr1_ue, nbr2_ue, nbr1_bs, nbr2_bs)
        )
    return HeteroGraph(
        ue_ids=tuple(int(i) for i in idx),
        bs_ids=tuple(range(gains.shape[1])),
        gains=gains,
        edges=edges,
        ue_features=_profile(logs, edges),
        bs_features=_profile(logs.T, edges.T),
        edge_features=np.where(edges, logs, 0.0),
        nbr1_ue=nbr1_ue,
        nbr2_ue=nbr2_ue,
        nbr1_bs=nbr1_bs,
        nbr2_bs=nbr2_bs,
        p_max=None if p_max is None else np.asarray(p_max, dtype=np.float64),
    )


def neighbors(graph: HeteroGraph, node: tuple[str, int], order: int) -> list[int]:
    kind, i = node
    if kind == UE:
        lists = {1: graph.nbr1_ue, 2: graph.nbr2_ue}
        n = graph.n_ue
    elif kind == BS:
        lists = {1: graph.nbr1_bs, 2: graph.nbr2_bs}
        n = graph.n_bs
    else:
        raise KeyError(f"unknown node type {kind!r}")
    if order not in lists:
        raise ValueError("order must be 1 or 2")
    if not 0 <= i < n:
        raise KeyError(f"unknown node {node!r}")
    return [int(v) for v in lists[order][i]]


def permute(graph: HeteroGraph, ue_perm=None, bs_perm=None) -> HeteroGraph:
    """Relabel nodes: new UE ``k`` is old UE ``ue_perm[k]`` (same for BSs)."""
    K, J = graph.n_ue, graph.n_bs
    up = np.arange(K) if ue_perm is None else np.asarray(ue_perm)
    bp = np.arange(J) if bs_perm is None else np.asarray(bs_perm)
    u_inv = np.argsort(up)
    b_inv = np.argsort(bp)

    def remap(lists, order, inverse):
        return tuple(np.sort(inverse[lists[o]]) for o in order)

    return HeteroGraph(
        ue_ids=tuple(graph.ue_ids[k] for k in up),
        bs_ids=tuple(graph.bs_ids[k] for k in bp),
        gains=graph.gains[np.ix_(up, bp)],
        edges=graph.edges[np.ix_(up, bp)],
        ue_features=graph.ue_features[up],
        bs_features=graph.bs_features[bp],
        edge_features=graph.edge_features[np.ix_(up, bp)],
        nbr1_ue=remap(graph.nbr1_ue, up, b_inv),
        nbr2_ue=remap(graph.nbr2_ue, up, u_inv),
        nbr1_bs=remap(graph.nbr1_bs, bp, u_inv),
        nbr2_bs=remap(graph.nbr2_bs, bp, b_inv),
        p_max=None if graph.p_max is None else graph.p_max[bp],
    )


def dump_edges(graph: HeteroGraph, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["ue", "grid_index", "bs", "gain"])
        for i, j in zip(*np.nonzero(graph.edges)):
            out.writerow([int(i), graph.ue_ids[i], graph.bs_ids[j], f"{graph.gains[i, j]:.17g}"])
