"""
Dataset directory format, loaders, split generation and a synthetic generator.

    dataset/
      meta.json                        target_type, num_classes, node_types, relations, metapaths
      nodes.json                       {"counts": {type: int}}
      edges/<src>__<name>__<dst>.tsv   "src_id<TAB>dst_id" per line
      features/<target>.csv            n rows of comma-separated reals
      features/<target>.npy            optional binary copy of the CSV ...
      features/<target>.sha256         ... used only while both recorded sha256 sums match
      labels.tsv                       "node_id<TAB>class_id", -1 for unlabeled
      splits.json                      {"train": [...], "val": [...], "test": [...]} (optional)

Loaders reject malformed input and never repair it.
"""

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from spikinghan.config import check_split_ratios
from spikinghan.errors import (
    ConfigError,
    DatasetValidationError,
    DimensionError,
    MetaPathError,
    MissingFileError,
    StratificationError,
)
from spikinghan.hetgraph import (
    HeteroGraph,
    MetaPath,
    MetaPathAdjacency,
    Relation,
    build_graph,
    compose_metapath_adjacency,
    orient_metapath,
    parse_metapath,
)
from spikinghan.model import ModelInputs

logger = logging.getLogger(__name__)

UNLABELED = -1


# region Types
@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @classmethod
    def from_lists(cls, train: Sequence[int], val: Sequence[int], test: Sequence[int]) -> "Splits":
        return cls(*(np.asarray(ids, dtype=np.int64).reshape(-1) for ids in (train, val, test)))

    def as_dict(self) -> Dict[str, List[int]]:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def problems(self, labels: np.ndarray) -> List[str]:
        """Reasons these splits do not fit `labels`; empty when they do."""
        n = len(labels)
        found = []
        seen: Dict[int, str] = {}
        for name, ids in self.as_dict().items():
            for i in ids:
                if not 0 <= i < n:
                    found.append(f"{name} id {i} out of range for {n} target nodes")
                elif labels[i] == UNLABELED:
                    found.append(f"{name} id {i} is unlabeled")
                if i in seen:
                    found.append(f"id {i} appears in both {seen[i]} and {name}")
                seen[i] = name
        return found


@dataclass(frozen=True)
class DatasetBundle:
    graph: HeteroGraph
    target_type: str
    num_classes: int
    features: np.ndarray
    labels: np.ndarray
    metapaths: Tuple[MetaPath, ...]
    splits: Optional[Splits] = None

    def __post_init__(self):
        n = self.n
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DimensionError(
                f"Feature matrix has shape {self.features.shape}, expected {n} rows for '{self.target_type}'"
            )
        if self.labels.shape != (n,):
            raise DimensionError(f"Expected {n} labels, got {self.labels.shape[0]}")
        if len(self.labels) and (self.labels.min() < UNLABELED or self.labels.max() >= self.num_classes):
            raise DatasetValidationError(f"Class ids must lie in [-1, {self.num_classes})")
        if self.splits is not None:
            problems = self.splits.problems(self.labels)
            if problems:
                raise DatasetValidationError(f"Invalid splits: {problems[0]}")
        for metapath in self.metapaths:
            orient_metapath(self.graph.schema, metapath, self.target_type)

    @property
    def n(self) -> int:
        return self.graph.node_count[self.target_type]

    @property
    def d_in(self) -> int:
        return int(self.features.shape[1])

    @property
    def metapath_names(self) -> Tuple[str, ...]:
        return tuple(mp.name for mp in self.metapaths)

    @property
    def labeled_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)

    @cached_property
    def adjacencies(self) -> Tuple[MetaPathAdjacency, ...]:
        return tuple(compose_metapath_adjacency(self.graph, mp, self.target_type) for mp in self.metapaths)

    def model_inputs(self, dtype: type = np.float64) -> ModelInputs:
        return ModelInputs(
            features=self.features.astype(dtype),
            adjacencies=self.adjacencies,
            metapath_names=self.metapath_names,
        )

    def with_splits(self, splits: Splits) -> "DatasetBundle":
        return replace(self, splits=splits)

    def require_splits(self) -> Splits:
        if self.splits is None:
            raise ConfigError("Dataset has no splits; generate them with make_splits first")
        return self.splits


class SyntheticSpec(BaseModel):
    """Class-assortative hub graph: one auxiliary type per meta-path."""

    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    target_type: str = Field("P", min_length=1)
    aux_types: Tuple[str, ...] = Field(("A", "S"), min_length=1)
    num_target: int = Field(120, ge=1)
    num_classes: int = Field(3, ge=2)
    communities_per_class: int = Field(1, ge=1, description="Hub nodes per class in each auxiliary type")
    p_intra: float = Field(0.9, ge=0, le=1)
    p_inter: float = Field(0.05, ge=0, le=1)
    d_in: int = Field(16, ge=1)
    snr: float = Field(1.0, ge=0)
    seed: int = Field(0)
    split_ratios: Tuple[float, float, float] = Field((0.2, 0.1, 0.7))

    @field_validator("aux_types", mode="before")
    @classmethod
    def _as_tuple(cls, value):
        return tuple(value) if isinstance(value, list) else value

    @field_validator("split_ratios")
    @classmethod
    def _ratios_partition(cls, ratios):
        check_split_ratios(ratios)
        return ratios

    @model_validator(mode="after")
    def _consistent(self) -> "SyntheticSpec":
        types = (self.target_type,) + self.aux_types
        if len(set(types)) != len(types):
            raise ValueError(f"Node types must be distinct: {types}")
        if self.d_in < self.num_classes:
            raise ValueError(f"d_in ({self.d_in}) must be at least num_classes ({self.num_classes})")
        if self.num_target < 3 * self.num_classes:
            raise ValueError("Every class needs at least 3 target nodes to be split")
        return self

    @property
    def hubs_per_type(self) -> int:
        return self.num_classes * self.communities_per_class


# endregion


# region Splits
def _largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    quotas = [total * r for r in ratios]
    sizes = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - sizes[k]), k))
    for k in order[: total - sum(sizes)]:
        sizes[k] += 1
    # Every split gets a node, taken from the largest one
    for k in range(len(sizes)):
        if sizes[k] == 0:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[k] += 1
    return sizes


def make_splits(
    labels: np.ndarray,
    ratios: Tuple[float, float, float],
    seed: int,
    num_classes: Optional[int] = None,
) -> Splits:
    """
    Stratified train/val/test splits over the labeled nodes.

    Each class is shuffled with a generator seeded by `seed` and cut at the
    ratio boundaries with largest-remainder rounding.

    Raises:
        ConfigError: invalid ratios.
        StratificationError: a class with fewer than 3 labeled nodes.
    """
    check_split_ratios(tuple(ratios))
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels[labels != UNLABELED])
    classes = range(num_classes) if num_classes is not None else present.tolist()
    if len(present) == 0:
        raise StratificationError("No labeled nodes to split")

    rng = np.random.default_rng(seed)
    parts: List[List[np.ndarray]] = [[], [], []]
    for c in classes:
        ids = np.flatnonzero(labels == c)
        if len(ids) < 3:
            raise StratificationError(f"Class {c} has {len(ids)} labeled nodes; at least 3 are needed")
        ids = rng.permutation(ids)
        bounds = np.cumsum(_largest_remainder(len(ids), ratios))
        for k, chunk in enumerate(np.split(ids, bounds[:-1])):
            parts[k].append(chunk)

    return Splits(*(np.sort(np.concatenate(chunks)) for chunks in parts))


# endregion


# region Loading
def _read_json(path: Path) -> Any:
    if not path.is_file():
        raise MissingFileError(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetValidationError(f"Invalid JSON: {e.msg}", path, e.lineno) from e


def _rows(path: Path, delimiter: str) -> Iterator[Tuple[int, List[str]]]:
    """Yield (line number, fields) for every non-empty line."""
    if not path.is_file():
        raise MissingFileError(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        for fields in reader:
            if not fields:
                continue
            yield reader.line_num, fields


def _int_fields(path: Path, delimiter: str = "\t") -> Iterator[Tuple[int, int, int]]:
    for line, fields in _rows(path, delimiter):
        if len(fields) != 2:
            raise DatasetValidationError(f"Expected 2 fields, found {len(fields)}", path, line)
        try:
            yield line, int(fields[0]), int(fields[1])
        except ValueError:
            raise DatasetValidationError(f"Expected integers, found {fields}", path, line) from None


def _load_edges(path: Path, relation: Relation, counts: Dict[str, int]) -> np.ndarray:
    pairs = []
    for line, src, dst in _int_fields(path):
        if not (0 <= src < counts[relation.src] and 0 <= dst < counts[relation.dst]):
            raise DatasetValidationError(
                f"Edge ({src}, {dst}) out of range for {relation.src}={counts[relation.src]}, "
                f"{relation.dst}={counts[relation.dst]}",
                path,
                line,
            )
        pairs.append((src, dst))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _parse_feature_csv(path: Path) -> np.ndarray:
    rows: List[List[float]] = []
    width: Optional[int] = None
    for line, fields in _rows(path, ","):
        try:
            row = [float(x) for x in fields]
        except ValueError:
            raise DatasetValidationError(f"Non-numeric feature value in {fields}", path, line) from None
        if not all(math.isfinite(x) for x in row):
            raise DatasetValidationError("Non-finite feature value", path, line)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DatasetValidationError(f"Row has {len(row)} values, expected {width}", path, line)
        rows.append(row)
    if width is None:
        return np.zeros((0, 0))
    return np.asarray(rows, dtype=np.float64)


def _load_features(features_dir: Path, target_type: str) -> np.ndarray:
    csv_path = features_dir / f"{target_type}.csv"
    if not csv_path.is_file():
        raise MissingFileError(csv_path)

    npy_path = features_dir / f"{target_type}.npy"
    sum_path = features_dir / f"{target_type}.sha256"
    if npy_path.is_file() and sum_path.is_file():
        recorded = _read_checksums(sum_path)
        if all(recorded.get(p.name) == _sha256(p) for p in (csv_path, npy_path)):
            logger.debug("Using binary features from %s", npy_path)
            return np.load(npy_path, allow_pickle=False)
        logger.warning(
            "Checksums in %s do not cover the current %s and %s; reading the CSV instead",
            sum_path,
            csv_path.name,
            npy_path.name,
        )

    return _parse_feature_csv(csv_path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_checksums(path: Path) -> Dict[str, str]:
    """`sha256sum`-style lines: "<hex digest>  <file name>"."""
    recorded = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if len(parts) == 2:
            recorded[parts[1]] = parts[0]
    return recorded


def _load_labels(path: Path, n: int, num_classes: int) -> np.ndarray:
    labels = np.full(n, UNLABELED, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for line, node, label in _int_fields(path):
        if not 0 <= node < n:
            raise DatasetValidationError(f"Node id {node} out of range for {n} target nodes", path, line)
        if not UNLABELED <= label < num_classes:
            raise DatasetValidationError(f"Class id {label} outside [-1, {num_classes})", path, line)
        if seen[node]:
            raise DatasetValidationError(f"Node id {node} labeled twice", path, line)
        seen[node] = True
        labels[node] = label
    return labels


def _load_splits(path: Path, labels: np.ndarray) -> Splits:
    data = _read_json(path)
    if not isinstance(data, dict) or set(data) != {"train", "val", "test"}:
        raise DatasetValidationError("Expected exactly the keys train, val, test", path)
    for name, ids in data.items():
        if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
            raise DatasetValidationError(f"'{name}' must be a list of integer ids", path)
    splits = Splits.from_lists(data["train"], data["val"], data["test"])
    problems = splits.problems(labels)
    if problems:
        raise DatasetValidationError(problems[0], path)
    return splits


class _Meta(BaseModel):
    model_config = ConfigDict(extra="forbid")

    target_type: str
    num_classes: int = Field(..., ge=1)
    node_types: List[str]
    relations: List[Relation]
    metapaths: List[Any] = Field(..., min_length=1)


def _resolve_metapath(entry: Any, graph: HeteroGraph, target_type: str) -> MetaPath:
    if isinstance(entry, str):
        return parse_metapath(entry, graph.schema, target_type=target_type)
    try:
        return MetaPath(**entry)
    except (TypeError, ValidationError) as e:
        raise MetaPathError(f"Invalid meta-path entry {entry!r}: {e}") from e


def load_dataset(root: Path, *, allow_toy: bool = False) -> DatasetBundle:
    """
    Load and validate a dataset directory. Splits are attached when splits.json exists.

    Raises:
        MissingFileError, DatasetValidationError, SchemaError, MetaPathError, DimensionError
    """
    root = Path(root)
    meta_path = root / "meta.json"
    try:
        meta = _Meta(**_read_json(meta_path))
    except (TypeError, ValidationError) as e:
        raise DatasetValidationError(f"Invalid meta.json: {e}", meta_path) from e
    if meta.target_type not in meta.node_types:
        raise DatasetValidationError(f"Target type '{meta.target_type}' is not a node type", meta_path)

    nodes_path = root / "nodes.json"
    nodes = _read_json(nodes_path)
    if not isinstance(nodes, dict) or not isinstance(nodes.get("counts"), dict):
        raise DatasetValidationError("Expected {\"counts\": {type: int}}", nodes_path)
    counts = nodes["counts"]
    for node_type in meta.node_types:
        value = counts.get(node_type)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise DatasetValidationError(f"Missing or invalid count for node type '{node_type}'", nodes_path)

    edge_lists = {
        r.name: _load_edges(root / "edges" / f"{r.file_stem}.tsv", r, counts)
        for r in meta.relations
        if r.src in counts and r.dst in counts
    }
    graph = build_graph(meta.node_types, meta.relations, counts, edge_lists, allow_toy=allow_toy)
    metapaths = tuple(_resolve_metapath(entry, graph, meta.target_type) for entry in meta.metapaths)

    features = _load_features(root / "features", meta.target_type)
    n = graph.node_count[meta.target_type]
    if features.shape[0] != n:
        raise DimensionError(
            f"features/{meta.target_type}.csv has {features.shape[0]} rows, expected {n} '{meta.target_type}' nodes"
        )

    labels = _load_labels(root / "labels.tsv", n, meta.num_classes)
    splits_path = root / "splits.json"
    splits = _load_splits(splits_path, labels) if splits_path.exists() else None

    bundle = DatasetBundle(
        graph=graph,
        target_type=meta.target_type,
        num_classes=meta.num_classes,
        features=features,
        labels=labels,
        metapaths=metapaths,
        splits=splits,
    )
    logger.info(
        "Loaded %s: %d '%s' nodes, %d features, %d meta-paths",
        root,
        n,
        meta.target_type,
        bundle.d_in,
        len(metapaths),
    )
    return bundle


# endregion


# region Writing
def _dump_json(data: Any, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def write_dataset(bundle: DatasetBundle, root: Path, *, binary_sidecar: bool = False) -> None:
    """
    Write a bundle in the directory format. Output bytes depend only on the bundle.

    Floats are written with repr, which round-trips float64 exactly.
    """
    root = Path(root)
    (root / "edges").mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(parents=True, exist_ok=True)

    schema = bundle.graph.schema
    _dump_json(
        {
            "target_type": bundle.target_type,
            "num_classes": bundle.num_classes,
            "node_types": list(schema.node_types),
            "relations": [r.model_dump() for r in schema.relations],
            "metapaths": [{"name": mp.name, "relations": list(mp.relations)} for mp in bundle.metapaths],
        },
        root / "meta.json",
    )
    _dump_json({"counts": dict(bundle.graph.node_count)}, root / "nodes.json")

    for relation in schema.relations:
        lines = [f"{s}\t{d}\n" for s, d in bundle.graph.edges[relation.name].tolist()]
        (root / "edges" / f"{relation.file_stem}.tsv").write_text("".join(lines), encoding="utf-8")

    csv_path = root / "features" / f"{bundle.target_type}.csv"
    text = "".join(",".join(repr(float(x)) for x in row) + "\n" for row in bundle.features)
    csv_path.write_bytes(text.encode("utf-8"))
    if binary_sidecar:
        npy_path = root / "features" / f"{bundle.target_type}.npy"
        np.save(npy_path, bundle.features, allow_pickle=False)
        sums = "".join(f"{_sha256(p)}  {p.name}\n" for p in (csv_path, npy_path))
        (root / "features" / f"{bundle.target_type}.sha256").write_text(sums, encoding="utf-8")

    labels = "".join(f"{i}\t{c}\n" for i, c in enumerate(bundle.labels.tolist()))
    (root / "labels.tsv").write_text(labels, encoding="utf-8")

    if bundle.splits is not None:
        _dump_json(bundle.splits.as_dict(), root / "splits.json")
    logger.info("Wrote dataset to %s", root)


# endregion


# region Synthetic data
def _metapath_name(target: str, aux: str) -> str:
    if len(target) == 1 and len(aux) == 1:
        return f"{target}{aux}{target}"
    return f"{target}-{aux}-{target}"


def generate_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    """
    Build a bundle whose meta-path neighbourhoods follow the class labels.

    Every auxiliary type holds `communities_per_class` hub nodes per class.
    A target node links to each hub of its own class with probability
    p_intra and to each other hub with p_inter. Features are a one-hot class
    signal scaled by snr plus unit-variance noise.
    """
    rng = np.random.default_rng(spec.seed)
    n, c = spec.num_target, spec.num_classes
    labels = rng.permutation(np.arange(n, dtype=np.int64) % c)

    hub_class = np.arange(spec.hubs_per_type) % c
    link_prob = np.where(labels[:, None] == hub_class[None, :], spec.p_intra, spec.p_inter)

    relations = []
    edge_lists = {}
    metapaths = []
    for aux in spec.aux_types:
        relation = Relation(src=spec.target_type, name=f"{spec.target_type}-{aux}", dst=aux)
        relations.append(relation)
        edge_lists[relation.name] = np.argwhere(rng.random(link_prob.shape) < link_prob)
        metapaths.append(MetaPath(name=_metapath_name(spec.target_type, aux), relations=(relation.name,) * 2))

    counts = {spec.target_type: n, **{aux: spec.hubs_per_type for aux in spec.aux_types}}
    graph = build_graph((spec.target_type,) + spec.aux_types, relations, counts, edge_lists)

    features = rng.standard_normal((n, spec.d_in))
    features[np.arange(n), labels] += spec.snr

    splits = make_splits(labels, spec.split_ratios, spec.seed, num_classes=c)
    return DatasetBundle(
        graph=graph,
        target_type=spec.target_type,
        num_classes=c,
        features=features,
        labels=labels,
        metapaths=tuple(metapaths),
        splits=splits,
    )


def same_class_neighbor_fraction(adjacencies: Sequence[MetaPathAdjacency], labels: np.ndarray) -> float:
    """
    Share of meta-path neighbour pairs (i, j), i != j, with equal labels.

    Pairs are pooled over all adjacencies; unlabeled endpoints are skipped.
    Returns 0.0 when there are no such pairs.
    """
    labels = np.asarray(labels)
    same = total = 0
    for adjacency in adjacencies:
        rows = np.repeat(np.arange(adjacency.n), np.diff(adjacency.indptr))
        cols = adjacency.indices
        keep = (rows != cols) & (labels[rows] != UNLABELED) & (labels[cols] != UNLABELED)
        same += int(np.count_nonzero(labels[rows[keep]] == labels[cols[keep]]))
        total += int(np.count_nonzero(keep))
    return same / total if total else 0.0


# endregion
