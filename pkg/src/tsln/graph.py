"""Area adjacency graphs for spatial priors and neighbourhood lags.

The graph is stored as a sorted, deduplicated edge list plus CSR-style
neighbour offsets, so traversal is O(degree) and nothing dense of size
M x M is ever materialised.
"""
from __future__ import annotations

from collections.abc import Hashable, Iterable, Sequence
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .errors import (
    DisconnectedGraph,
    DuplicateAreaId,
    IsolatedNode,
    NumericalFailure,
    StillDisconnected,
    UnknownArea,
)

__all__ = [
    "AreaGraph",
    "build_graph",
    "repair_graph",
    "row_standardize",
    "icar_scaling_factor",
]


class AreaGraph:
    """Undirected, self-edge-free adjacency over ``M`` areas.

    Parameters
    ----------
    area_ids : sequence of hashable
        Area identifiers; position defines the area index.
    edges : array of shape (E, 2)
        Index pairs. Symmetric duplicates and self-edges are dropped.
    """

    def __init__(self, area_ids: Sequence[Hashable], edges) -> None:
        self.area_ids = tuple(area_ids)
        self.M = len(self.area_ids)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.M):
            raise UnknownArea("edge index out of range")
        e = np.sort(e, axis=1)
        e = e[e[:, 0] != e[:, 1]]
        e = np.unique(e, axis=0)
        self.edges = e
        self.edges.setflags(write=False)

        both = np.concatenate([e, e[:, ::-1]]) if len(e) else e
        order = np.lexsort((both[:, 1], both[:, 0])) if len(both) else np.array([], dtype=np.int64)
        both = both[order]
        self.degree = np.bincount(both[:, 0], minlength=self.M) if len(both) else np.zeros(self.M, dtype=np.int64)
        self.indptr = np.concatenate([[0], np.cumsum(self.degree)])
        self.indices = both[:, 1].copy() if len(both) else np.array([], dtype=np.int64)
        for arr in (self.degree, self.indptr, self.indices):
            arr.setflags(write=False)

    def __repr__(self) -> str:
        return f"AreaGraph(M={self.M}, edges={len(self.edges)}, components={self.n_components})"

    @cached_property
    def _index(self) -> dict:
        return {a: i for i, a in enumerate(self.area_ids)}

    def index_of(self, area_id) -> int:
        try:
            return self._index[area_id]
        except KeyError:
            raise UnknownArea(area_id) from None

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def adjacency(self) -> sp.csr_array:
        """Binary symmetric adjacency as a sparse matrix."""
        data = np.ones(len(self.indices))
        return sp.csr_array((data, self.indices, self.indptr), shape=(self.M, self.M))

    @cached_property
    def components(self) -> list[np.ndarray]:
        """Partition of area indices into connected components."""
        n, labels = csgraph.connected_components(self.adjacency(), directed=False)
        return [np.flatnonzero(labels == k) for k in range(n)]

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def is_connected(self) -> bool:
        return self.n_components == 1

    @cached_property
    def kappa(self) -> float:
        return icar_scaling_factor(self)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}


def _resolve_pairs(pairs: Iterable, index: dict) -> np.ndarray:
    out = []
    for a, b in pairs:
        try:
            out.append((index[a], index[b]))
        except KeyError as exc:
            raise UnknownArea(f"edge ({a!r}, {b!r}) references unknown area {exc.args[0]!r}") from None
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def build_graph(edge_list: Iterable[tuple], area_ids: Sequence[Hashable]) -> AreaGraph:
    """Build an :class:`AreaGraph` from id pairs.

    Raises
    ------
    DuplicateAreaId
        If ``area_ids`` repeats an identifier.
    UnknownArea
        If an edge endpoint is not in ``area_ids``.
    """
    ids = list(area_ids)
    index = {}
    for i, a in enumerate(ids):
        if a in index:
            raise DuplicateAreaId(a)
        index[a] = i
    return AreaGraph(ids, _resolve_pairs(edge_list, index))


def repair_graph(g: AreaGraph, bridge_edges: Iterable[tuple] = (), augment_singletons: bool = False) -> AreaGraph:
    """Add bridge edges and optionally densify degree-one areas.

    With ``augment_singletons`` every area left with exactly one neighbour
    after bridging is also linked to all neighbours of that neighbour.

    Raises
    ------
    StillDisconnected
        If the repaired graph has more than one component.
    """
    bridges = _resolve_pairs(bridge_edges, g._index)
    bridged = AreaGraph(g.area_ids, np.concatenate([g.edges, bridges]))
    extra = []
    if augment_singletons:
        for i in np.flatnonzero(bridged.degree == 1):
            hub = bridged.neighbors(i)[0]
            extra.extend((i, k) for k in bridged.neighbors(hub) if k != i)
    out = AreaGraph(g.area_ids, np.concatenate([bridged.edges, np.asarray(extra, dtype=np.int64).reshape(-1, 2)]))
    if not out.is_connected:
        sizes = sorted((len(c) for c in out.components), reverse=True)
        raise StillDisconnected(f"{out.n_components} components remain (sizes {sizes}); supply more bridges")
    return out


def row_standardize(g: AreaGraph) -> sp.csr_array:
    """Row-standardised neighbour weights: ``W*[i, k] = 1/deg(i)`` for k ~ i."""
    if np.any(g.degree == 0):
        bad = [g.area_ids[i] for i in np.flatnonzero(g.degree == 0)[:5]]
        raise IsolatedNode(f"areas without neighbours: {bad}")
    data = np.repeat(1.0 / g.degree, g.degree)
    return sp.csr_array((data, g.indices, g.indptr), shape=(g.M, g.M))


def icar_scaling_factor(g: AreaGraph, block: int = 256) -> float:
    """Geometric mean of the marginal variances of a unit ICAR field.

    The marginal variances are the diagonal of the Moore-Penrose inverse of
    the graph Laplacian ``Q``. For a connected graph, grounding one node
    gives a positive definite ``Q_red``; with ``A`` its inverse padded by a
    zero row/column, ``Q+ = P A P`` for the centring projector ``P``, so

        diag(Q+)_i = A_ii - 2 (A 1)_i / M + (1' A 1) / M^2.

    ``A`` is never formed: columns are solved in blocks against a sparse LU
    factorisation and only the diagonal and row sums are kept.
    """
    if not g.is_connected:
        raise DisconnectedGraph(f"ICAR scaling needs a connected graph; got {g.n_components} components")
    M = g.M
    if M == 1:
        raise NumericalFailure("ICAR field on a single area has no non-null directions")
    Q = sp.csc_matrix(sp.diags(g.degree.astype(float)) - g.adjacency())
    keep = np.arange(1, M)
    Qr = Q[keep][:, keep].tocsc()
    try:
        lu = splu(Qr)
    except RuntimeError as exc:
        raise NumericalFailure(f"grounded Laplacian factorisation failed: {exc}") from exc
    m = M - 1
    diag = np.empty(m)
    rowsum = np.empty(m)
    for start in range(0, m, block):
        stop = min(start + block, m)
        rhs = np.zeros((m, stop - start))
        rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
        cols = lu.solve(rhs)
        diag[start:stop] = cols[np.arange(start, stop), np.arange(stop - start)]
        rowsum[start:stop] = cols.sum(axis=0)  # A is symmetric: column sums are row sums
    A_diag = np.concatenate([[0.0], diag])
    A_row = np.concatenate([[0.0], rowsum])
    total = A_row.sum()
    marg = A_diag - 2.0 * A_row / M + total / M**2
    if not np.all(np.isfinite(marg)) or np.any(marg <= 0):
        raise NumericalFailure("generalised inverse has non-positive marginal variances")
    return float(np.exp(np.mean(np.log(marg))))
