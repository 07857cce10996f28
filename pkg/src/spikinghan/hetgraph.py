"""
Heterogeneous graph data model and meta-path adjacency composition.

A `HeteroGraph` holds typed nodes (0-based contiguous ids per type) and typed
edge lists. A `MetaPath` is a sequence of relation names starting and ending
at the target node type. `compose_metapath_adjacency` turns both into a binary,
self-looped `MetaPathAdjacency` over target nodes, with symmetric
normalisation coefficients ready for graph convolution.

Relations are usable in both directions when composing a meta-path.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator

from spikinghan.errors import MetaPathError, NodeIndexError, SchemaError

logger = logging.getLogger(__name__)


# region Schema
class Relation(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    src: str = Field(..., description="Source node type")
    name: str = Field(..., description="Relation name, unique within a schema")
    dst: str = Field(..., description="Destination node type")

    @property
    def file_stem(self) -> str:
        return f"{self.src}__{self.name}__{self.dst}"


class MetaPath(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    relations: Tuple[str, ...] = Field(..., min_length=1)

    @field_validator("relations", mode="before")
    @classmethod
    def _as_tuple(cls, value):
        return tuple(value) if isinstance(value, list) else value


class GraphSchema(BaseModel):
    """Node types and relations of a heterogeneous graph."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    node_types: Tuple[str, ...]
    relations: Tuple[Relation, ...]

    def relation(self, name: str) -> Relation:
        for relation in self.relations:
            if relation.name == name:
                return relation
        raise MetaPathError(f"Unknown relation '{name}'")

    @property
    def is_heterogeneous(self) -> bool:
        return len(self.node_types) + len(self.relations) > 2


# endregion


# region HeteroGraph
@dataclass(frozen=True)
class HeteroGraph:
    schema: GraphSchema
    node_count: Mapping[str, int]
    edges: Mapping[str, np.ndarray]

    @property
    def node_types(self) -> Tuple[str, ...]:
        return self.schema.node_types

    @property
    def relations(self) -> Tuple[Relation, ...]:
        return self.schema.relations

    @property
    def is_heterogeneous(self) -> bool:
        return self.schema.is_heterogeneous

    def incidence(self, relation_name: str) -> sp.csr_matrix:
        """Binary src x dst incidence matrix of one relation."""
        relation = self.schema.relation(relation_name)
        pairs = self.edges[relation_name]
        shape = (self.node_count[relation.src], self.node_count[relation.dst])
        data = np.ones(len(pairs), dtype=np.int64)
        return sp.csr_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=shape)


def build_graph(
    node_types: Sequence[str],
    relations: Sequence[Relation],
    counts: Mapping[str, int],
    edge_lists: Mapping[str, Iterable[Tuple[int, int]]],
    *,
    allow_toy: bool = False,
) -> HeteroGraph:
    """
    Validate and assemble a `HeteroGraph`.

    Duplicate edges within a relation are removed and edge lists are sorted.

    Raises:
        SchemaError: unknown or duplicate type/relation names, out-of-range
            node ids, or a non-heterogeneous schema without `allow_toy`.
    """
    if len(set(node_types)) != len(node_types):
        raise SchemaError(f"Duplicate node type in {list(node_types)}")

    relations = tuple(r if isinstance(r, Relation) else Relation(**r) for r in relations)
    names = [r.name for r in relations]
    if len(set(names)) != len(names):
        raise SchemaError(f"Duplicate relation name in {names}")

    for relation in relations:
        for end in (relation.src, relation.dst):
            if end not in node_types:
                raise SchemaError(f"Relation '{relation.name}' references unknown node type '{end}'")

    schema = GraphSchema(node_types=tuple(node_types), relations=relations)
    if not schema.is_heterogeneous and not allow_toy:
        raise SchemaError(
            f"Not a heterogeneous graph: {len(node_types)} node types + {len(relations)} relations <= 2"
        )

    node_count: Dict[str, int] = {}
    for node_type in node_types:
        if node_type not in counts:
            raise SchemaError(f"Missing node count for type '{node_type}'")
        count = int(counts[node_type])
        if count < 0:
            raise SchemaError(f"Negative node count for type '{node_type}': {count}")
        node_count[node_type] = count
    unknown = set(counts) - set(node_types)
    if unknown:
        raise SchemaError(f"Node counts given for unknown types: {sorted(unknown)}")

    unknown = set(edge_lists) - set(names)
    if unknown:
        raise SchemaError(f"Edges given for unknown relations: {sorted(unknown)}")

    edges: Dict[str, np.ndarray] = {}
    for relation in relations:
        raw = edge_lists.get(relation.name, ())
        if not isinstance(raw, np.ndarray):
            raw = list(raw)
        pairs = np.asarray(raw, dtype=np.int64).reshape(-1, 2)
        _check_edge_range(relation, pairs, node_count)
        if len(pairs):
            pairs = np.unique(pairs, axis=0)
        pairs.setflags(write=False)
        edges[relation.name] = pairs

    return HeteroGraph(schema=schema, node_count=node_count, edges=edges)


def _check_edge_range(relation: Relation, pairs: np.ndarray, node_count: Mapping[str, int]) -> None:
    if not len(pairs):
        return
    bad = (
        (pairs[:, 0] < 0)
        | (pairs[:, 0] >= node_count[relation.src])
        | (pairs[:, 1] < 0)
        | (pairs[:, 1] >= node_count[relation.dst])
    )
    if bad.any():
        src_id, dst_id = pairs[np.argmax(bad)]
        raise SchemaError(
            f"Relation '{relation.name}' ({relation.src} -> {relation.dst}): edge "
            f"({relation.src}:{src_id}, {relation.dst}:{dst_id}) out of range for counts "
            f"{relation.src}={node_count[relation.src]}, {relation.dst}={node_count[relation.dst]}"
        )


# endregion


# region MetaPath
def orient_metapath(schema: GraphSchema, metapath: MetaPath, target_type: str) -> List[Tuple[Relation, bool]]:
    """
    Walk a meta-path from the target type, deciding the direction of each relation.

    Returns (relation, forward) pairs, where forward means src -> dst.

    Raises:
        MetaPathError: unknown relations, broken chains, or endpoints other than the target type.
    """
    steps: List[Tuple[Relation, bool]] = []
    current = target_type
    for name in metapath.relations:
        relation = schema.relation(name)
        if relation.src == current:
            steps.append((relation, True))
            current = relation.dst
        elif relation.dst == current:
            steps.append((relation, False))
            current = relation.src
        else:
            raise MetaPathError(
                f"Meta-path '{metapath.name}': relation '{name}' ({relation.src}-{relation.dst}) "
                f"does not continue from node type '{current}'"
            )
    if current != target_type:
        raise MetaPathError(
            f"Meta-path '{metapath.name}' ends at '{current}', expected target type '{target_type}'"
        )
    return steps


def parse_metapath(
    spec: str,
    schema: GraphSchema,
    name: Optional[str] = None,
    *,
    target_type: Optional[str] = None,
) -> MetaPath:
    """
    Resolve a node-type string such as "PAP" (or "P-A-P") into a `MetaPath`.

    Each consecutive type pair must be joined by exactly one relation, in either direction.
    With `target_type`, the written path must also start and end at that type.
    """
    types = spec.split("-") if "-" in spec else list(spec)
    if len(types) < 2:
        raise MetaPathError(f"Meta-path '{spec}' needs at least two node types")
    for node_type in types:
        if node_type not in schema.node_types:
            raise MetaPathError(f"Meta-path '{spec}': unknown node type '{node_type}'")
    if target_type is not None and (types[0] != target_type or types[-1] != target_type):
        raise MetaPathError(
            f"Meta-path '{spec}' runs {types[0]} -> {types[-1]}, "
            f"expected it to start and end at target type '{target_type}'"
        )

    relations = []
    for a, b in zip(types, types[1:]):
        joining = [r for r in schema.relations if {r.src, r.dst} == {a, b}]
        if not joining:
            raise MetaPathError(f"Meta-path '{spec}': no relation joins '{a}' and '{b}'")
        if len(joining) > 1:
            raise MetaPathError(
                f"Meta-path '{spec}': ambiguous relations between '{a}' and '{b}': "
                f"{[r.name for r in joining]}"
            )
        relations.append(joining[0].name)
    return MetaPath(name=name or spec, relations=tuple(relations))


# endregion


# region MetaPathAdjacency
@dataclass(frozen=True)
class MetaPathAdjacency:
    """
    Binary target x target adjacency of one meta-path, self-loops included.

    Stored as CSR: row i's neighbours are `indices[indptr[i]:indptr[i+1]]`
    (sorted), `coeff` is aligned with `indices` and holds 1/sqrt(D_i * D_j).
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    degree: np.ndarray
    coeff: np.ndarray
    name: str = ""
    _matrix: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for array in (self.indptr, self.indices, self.degree, self.coeff):
            array.setflags(write=False)
        matrix = sp.csr_matrix((self.coeff, self.indices, self.indptr), shape=(self.n, self.n))
        object.__setattr__(self, "_matrix", matrix)

    @property
    def normalized(self) -> sp.csr_matrix:
        """D^-1/2 A D^-1/2 as a sparse matrix."""
        return self._matrix

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    @property
    def neighbor_lists(self) -> List[np.ndarray]:
        return [self.indices[self.indptr[i] : self.indptr[i + 1]] for i in range(self.n)]

    def coefficient(self, i: int, j: int) -> float:
        row = self.indices[self.indptr[i] : self.indptr[i + 1]]
        k = np.searchsorted(row, j)
        if k < len(row) and row[k] == j:
            return float(self.coeff[self.indptr[i] + k])
        return 0.0

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n), dtype=np.int64)
        for i, row in enumerate(self.neighbor_lists):
            dense[i, row] = 1
        return dense

    def is_symmetric(self) -> bool:
        binary = sp.csr_matrix(
            (np.ones(self.nnz, dtype=np.int64), self.indices, self.indptr), shape=(self.n, self.n)
        )
        return (binary != binary.T).nnz == 0

    @classmethod
    def from_binary(cls, matrix: sp.spmatrix, name: str = "") -> "MetaPathAdjacency":
        """Build from any square sparse matrix; nonzeros become edges and the diagonal is forced."""
        n = matrix.shape[0]
        binary = (sp.csr_matrix(matrix, dtype=np.int64) != 0).astype(np.int64)
        binary = (binary + sp.identity(n, dtype=np.int64, format="csr")).tocsr()
        binary.data[:] = 1
        binary.sort_indices()

        degree = np.diff(binary.indptr).astype(np.int64)
        rows = np.repeat(np.arange(n), degree)
        coeff = 1.0 / np.sqrt(degree[rows].astype(np.float64) * degree[binary.indices].astype(np.float64))
        return cls(
            n=n,
            indptr=binary.indptr.astype(np.int64),
            indices=binary.indices.astype(np.int64),
            degree=degree,
            coeff=coeff,
            name=name,
        )


def compose_metapath_adjacency(
    graph: HeteroGraph, metapath: MetaPath, target_type: str
) -> MetaPathAdjacency:
    """
    Compose the meta-path's relation incidence matrices into a target x target adjacency.

    Each product is binarised immediately, so multiplicity never accumulates and no
    dense intermediate is materialised.
    """
    if target_type not in graph.node_count:
        raise MetaPathError(f"Unknown target type '{target_type}'")

    steps = orient_metapath(graph.schema, metapath, target_type)
    n = graph.node_count[target_type]

    reach = sp.identity(n, dtype=np.int64, format="csr")
    for relation, forward in steps:
        incidence = graph.incidence(relation.name)
        if relation.src == relation.dst:
            # same-type relations are walked both ways
            step = (incidence + incidence.T).tocsr()
        else:
            step = incidence if forward else incidence.T.tocsr()
        reach = (reach @ step).tocsr()
        reach.eliminate_zeros()
        reach.data[:] = 1

    adjacency = MetaPathAdjacency.from_binary(reach, name=metapath.name)
    logger.debug(
        "Composed meta-path %s: %d target nodes, %d entries (self-loops included)",
        metapath.name,
        n,
        adjacency.nnz,
    )
    return adjacency


def metapath_neighbors(adjacency: MetaPathAdjacency, i: int) -> np.ndarray:
    """Sorted meta-path neighbours of node `i`, including `i` itself."""
    if not 0 <= i < adjacency.n:
        raise NodeIndexError(f"Node {i} out of range for {adjacency.n} target nodes")
    return adjacency.indices[adjacency.indptr[i] : adjacency.indptr[i + 1]].copy()


def permute_adjacency(adjacency: MetaPathAdjacency, perm: np.ndarray) -> MetaPathAdjacency:
    """Relabel node ids: new node k is old node perm[k]."""
    binary = sp.csr_matrix(
        (np.ones(adjacency.nnz, dtype=np.int64), adjacency.indices, adjacency.indptr),
        shape=(adjacency.n, adjacency.n),
    )
    return MetaPathAdjacency.from_binary(binary[perm][:, perm], name=adjacency.name)


# endregion
