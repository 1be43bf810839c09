"""Bipartite task/value graph model, validation, and JSON round trip.

Task nodes consume and produce value nodes. Values carry byte sizes (a fixed
part plus a per-sample part), tasks carry per-sample FLOP estimates. All
iteration orders are deterministic so downstream passes are reproducible.
"""

from __future__ import annotations

import heapq
import json
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping


class ParseError(ValueError):
    """Raised for malformed graph or cluster files."""


class ValidationError(ValueError):
    """Raised when a structurally valid file violates a graph invariant."""

    def __init__(self, violations: Iterable["Violation"]):
        self.violations = list(violations)
        msg = "; ".join(v.describe() for v in self.violations) or "invalid graph"
        super().__init__(msg)


class CycleError(RuntimeError):
    """Raised when a traversal requires an acyclic graph but finds a cycle."""


@dataclass(frozen=True)
class Violation:
    kind: str
    nodes: tuple[str, ...]
    detail: str

    def describe(self) -> str:
        return f"{self.kind} [{', '.join(self.nodes)}]: {self.detail}"


@dataclass(frozen=True)
class TaskInfo:
    op: str
    flops_per_sample: float = 0.0
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ValueInfo:
    fixed_bytes: int = 0
    bytes_per_sample: int = 0
    is_param: bool = False


@dataclass(frozen=True)
class Node:
    """One graph node. Exactly one of task/value is set."""

    id: str
    task: TaskInfo | None = None
    value: ValueInfo | None = None

    def __post_init__(self) -> None:
        if (self.task is None) == (self.value is None):
            raise ValueError(f"node {self.id!r} must be exactly one of task/value")

    @property
    def is_task(self) -> bool:
        return self.task is not None

    @property
    def is_value(self) -> bool:
        return self.value is not None


class TaskGraph:
    """Immutable directed bipartite graph of task and value nodes."""

    def __init__(
        self,
        nodes: Iterable[Node],
        edges: Iterable[tuple[str, str]],
        inputs: Iterable[str] = (),
        outputs: Iterable[str] = (),
    ):
        self.nodes: dict[str, Node] = {}
        for n in sorted(nodes, key=lambda n: n.id):
            if n.id in self.nodes:
                raise ValueError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n
        edge_list = [(str(a), str(b)) for a, b in edges]
        seen: set[tuple[str, str]] = set()
        for src, dst in edge_list:
            if src not in self.nodes or dst not in self.nodes:
                raise ValueError(f"edge ({src!r}, {dst!r}) references an unknown node")
            if (src, dst) in seen:
                raise ValueError(f"duplicate edge ({src!r}, {dst!r})")
            seen.add((src, dst))
        self.edges: tuple[tuple[str, str], ...] = tuple(edge_list)
        self.inputs = frozenset(inputs)
        self.outputs = frozenset(outputs)
        for vid in sorted(self.inputs | self.outputs):
            if vid not in self.nodes:
                raise ValueError(f"declared input/output {vid!r} is not a node")
            if not self.nodes[vid].is_value:
                raise ValueError(f"declared input/output {vid!r} is not a value node")
        succ: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        pred: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for src, dst in self.edges:
            succ[src].append(dst)
            pred[dst].append(src)
        self._succ = {nid: tuple(sorted(vs)) for nid, vs in succ.items()}
        self._pred = {nid: tuple(sorted(vs)) for nid, vs in pred.items()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and frozenset(self.edges) == frozenset(other.edges)
            and self.inputs == other.inputs
            and self.outputs == other.outputs
        )

    def __len__(self) -> int:
        return len(self.nodes)

    def succ(self, node_id: str) -> tuple[str, ...]:
        return self._succ[node_id]

    def pred(self, node_id: str) -> tuple[str, ...]:
        return self._pred[node_id]

    def task_ids(self) -> list[str]:
        return [nid for nid, n in self.nodes.items() if n.is_task]

    def value_ids(self) -> list[str]:
        return [nid for nid, n in self.nodes.items() if n.is_value]

    def producer(self, value_id: str) -> str | None:
        """Task producing the value, or None for sources (inputs, params)."""
        preds = self._pred[value_id]
        return preds[0] if preds else None

    def consumers(self, value_id: str) -> tuple[str, ...]:
        return self._succ[value_id]

    def value_size(self, value_id: str, microbatch: int) -> int:
        info = self.nodes[value_id].value
        if info is None:
            raise ValueError(f"{value_id!r} is not a value node")
        return info.fixed_bytes + microbatch * info.bytes_per_sample

    def topo_order(self) -> list[str]:
        """Topological order over all nodes, ties broken by ascending id."""
        indeg = {nid: len(self._pred[nid]) for nid in self.nodes}
        ready = [nid for nid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order: list[str] = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            for nxt in self._succ[nid]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    heapq.heappush(ready, nxt)
        if len(order) != len(self.nodes):
            stuck = sorted(nid for nid, d in indeg.items() if d > 0)
            raise CycleError(f"graph contains a cycle through {stuck[:8]}")
        return order


@dataclass(frozen=True)
class ClusterSpec:
    """Homogeneous cluster description used by cost and search phases."""

    num_nodes: int
    devices_per_node: int
    device_memory_bytes: int
    bw_intra: float
    bw_inter: float
    link_latency_sec: float = 0.0

    def __post_init__(self) -> None:
        if self.num_nodes < 1 or self.devices_per_node < 1:
            raise ValueError("cluster must have at least one node and one device")
        if self.device_memory_bytes <= 0:
            raise ValueError("device_memory_bytes must be positive")
        if not (self.bw_intra >= self.bw_inter > 0):
            raise ValueError("bandwidths must satisfy bw_intra >= bw_inter > 0")
        if self.link_latency_sec < 0:
            raise ValueError("link_latency_sec must be non-negative")

    @property
    def num_devices(self) -> int:
        return self.num_nodes * self.devices_per_node


def _check_keys(obj: Mapping[str, Any], allowed: set[str], required: set[str], ctx: str) -> None:
    if not isinstance(obj, Mapping):
        raise ParseError(f"{ctx}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"{ctx}: unknown fields {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ParseError(f"{ctx}: missing fields {sorted(missing)}")


def _node_from_json(raw: Mapping[str, Any]) -> Node:
    _check_keys(raw, {"id", "kind", "task", "value"}, {"id", "kind"}, "node")
    nid = raw["id"]
    if not isinstance(nid, str) or not nid:
        raise ParseError("node id must be a non-empty string")
    kind = raw["kind"]
    if kind == "task":
        if "value" in raw:
            raise ParseError(f"task node {nid!r} carries a value payload")
        payload = raw.get("task", {})
        _check_keys(payload, {"op", "flops_per_sample", "attrs"}, {"op"}, f"node {nid!r} task")
        attrs = payload.get("attrs", {})
        if not isinstance(attrs, Mapping):
            raise ParseError(f"node {nid!r}: attrs must be an object")
        return Node(nid, task=TaskInfo(
            op=str(payload["op"]),
            flops_per_sample=float(payload.get("flops_per_sample", 0.0)),
            attrs=dict(attrs),
        ))
    if kind == "value":
        if "task" in raw:
            raise ParseError(f"value node {nid!r} carries a task payload")
        payload = raw.get("value", {})
        _check_keys(payload, {"fixed_bytes", "bytes_per_sample", "is_param"}, set(), f"node {nid!r} value")
        return Node(nid, value=ValueInfo(
            fixed_bytes=int(payload.get("fixed_bytes", 0)),
            bytes_per_sample=int(payload.get("bytes_per_sample", 0)),
            is_param=bool(payload.get("is_param", False)),
        ))
    raise ParseError(f"node {nid!r}: kind must be 'task' or 'value', got {kind!r}")


def graph_from_json(doc: Mapping[str, Any]) -> TaskGraph:
    """Build and validate a TaskGraph from an already-parsed JSON document."""
    _check_keys(doc, {"nodes", "edges", "inputs", "outputs"}, {"nodes", "edges"}, "graph")
    raw_nodes = doc["nodes"]
    raw_edges = doc["edges"]
    if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
        raise ParseError("graph: nodes and edges must be arrays")
    nodes = [_node_from_json(n) for n in raw_nodes]
    edges = []
    for e in raw_edges:
        if not (isinstance(e, list) and len(e) == 2):
            raise ParseError(f"graph: edge {e!r} must be a [src, dst] pair")
        edges.append((e[0], e[1]))
    try:
        g = TaskGraph(nodes, edges, doc.get("inputs", ()), doc.get("outputs", ()))
    except ValidationError:
        raise
    except ValueError as exc:
        raise ParseError(str(exc)) from exc
    violations = validate_graph(g)
    if violations:
        raise ValidationError(violations)
    flagged = constant_only_outputs(g)
    if flagged:
        warnings.warn(f"model outputs reachable only from constants: {flagged}", stacklevel=2)
    return g


def load_graph(path: str) -> TaskGraph:
    """Load a graph JSON file, rejecting unknown fields and invalid graphs."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    return graph_from_json(doc)


def graph_to_json(g: TaskGraph) -> dict[str, Any]:
    nodes = []
    for nid, n in g.nodes.items():
        if n.is_task:
            assert n.task is not None
            nodes.append({
                "id": nid,
                "kind": "task",
                "task": {
                    "op": n.task.op,
                    "flops_per_sample": n.task.flops_per_sample,
                    "attrs": dict(n.task.attrs),
                },
            })
        else:
            assert n.value is not None
            nodes.append({
                "id": nid,
                "kind": "value",
                "value": {
                    "fixed_bytes": n.value.fixed_bytes,
                    "bytes_per_sample": n.value.bytes_per_sample,
                    "is_param": n.value.is_param,
                },
            })
    return {
        "nodes": nodes,
        "edges": [[a, b] for a, b in g.edges],
        "inputs": sorted(g.inputs),
        "outputs": sorted(g.outputs),
    }


def save_graph(g: TaskGraph, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_json(g), fh, indent=1)
        fh.write("\n")


def _forward_reach(g: TaskGraph, seeds: Iterable[str]) -> set[str]:
    reach = set()
    stack = [s for s in seeds if s in g.nodes]
    while stack:
        nid = stack.pop()
        if nid in reach:
            continue
        reach.add(nid)
        stack.extend(g.succ(nid))
    return reach


def validate_graph(g: TaskGraph) -> list[Violation]:
    """Return every violated graph invariant; empty list means valid."""
    out: list[Violation] = []
    for src, dst in g.edges:
        if g.nodes[src].is_task == g.nodes[dst].is_task:
            kinds = "tasks" if g.nodes[src].is_task else "values"
            out.append(Violation("non-bipartite-edge", (src, dst),
                                 f"edge connects two {kinds}"))
    for vid in g.value_ids():
        preds = g.pred(vid)
        if len(preds) > 1:
            out.append(Violation("multi-producer-value", (vid, *preds),
                                 f"value has {len(preds)} producers"))
        info = g.nodes[vid].value
        assert info is not None
        if info.is_param and info.bytes_per_sample != 0:
            out.append(Violation("param-batch-scaling", (vid,),
                                 "parameter values must not scale with batch size"))
    try:
        g.topo_order()
    except CycleError as exc:
        out.append(Violation("cycle", (), str(exc)))
        return out  # reachability is meaningless on a cyclic graph
    sources = {vid for vid in g.value_ids() if not g.pred(vid)}
    reach = _forward_reach(g, g.inputs | sources)
    for oid in sorted(g.outputs):
        if oid not in reach:
            out.append(Violation("unreachable-output", (oid,),
                                 "output is fed by no input, parameter, or constant"))
    return out


def constant_only_outputs(g: TaskGraph) -> list[str]:
    """Model outputs reachable from parameters/constants but from no input."""
    from_inputs = _forward_reach(g, g.inputs)
    return sorted(oid for oid in g.outputs if oid not in from_inputs)


def count_params(g: TaskGraph, bytes_per_element: int = 4) -> int:
    """Total parameter element count, assuming a uniform element width."""
    total = 0
    for vid in g.value_ids():
        info = g.nodes[vid].value
        assert info is not None
        if info.is_param:
            total += info.fixed_bytes // bytes_per_element
    return total


def cluster_from_json(doc: Mapping[str, Any]) -> ClusterSpec:
    _check_keys(
        doc,
        {"num_nodes", "devices_per_node", "device_memory_bytes",
         "bw_intra", "bw_inter", "link_latency_sec"},
        {"num_nodes", "devices_per_node", "device_memory_bytes", "bw_intra", "bw_inter"},
        "cluster",
    )
    try:
        return ClusterSpec(
            num_nodes=int(doc["num_nodes"]),
            devices_per_node=int(doc["devices_per_node"]),
            device_memory_bytes=int(doc["device_memory_bytes"]),
            bw_intra=float(doc["bw_intra"]),
            bw_inter=float(doc["bw_inter"]),
            link_latency_sec=float(doc.get("link_latency_sec", 0.0)),
        )
    except ValueError as exc:
        raise ValidationError([Violation("cluster", (), str(exc))]) from exc


def load_cluster(path: str) -> ClusterSpec:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    return cluster_from_json(doc)
