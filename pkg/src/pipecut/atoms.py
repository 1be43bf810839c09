"""Atomic decomposition of a task graph.

Tasks are first classified constant or non-constant by forward reachability
from the model inputs. Each non-constant task then anchors one atomic
subcomponent; constant tasks and values are private support for the atoms
that consume them, cloned per atom when shared, so every atom can run
self-contained given only its non-constant inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import Node, TaskGraph


class NoNonConstantTask(ValueError):
    """The graph computes nothing from its inputs."""


class DanglingOutput(ValueError):
    """A model output or constant subgraph is not anchored to any atom."""


@dataclass(frozen=True)
class Subcomponent:
    """A set of graph nodes with explicit value boundaries."""

    id: str
    node_ids: frozenset[str]
    input_values: tuple[str, ...]
    output_values: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.node_ids)


def mark_constant_tasks(g: TaskGraph) -> dict[str, bool]:
    """Map each task id to True when its result never depends on an input.

    A task is non-constant iff it consumes a model-input value or an output
    of a non-constant task; everything else (parameter transforms, frozen
    preprocessing) is constant and can be replicated freely.
    """
    constant: dict[str, bool] = {}
    for nid in g.topo_order():
        if not g.nodes[nid].is_task:
            continue
        depends = False
        for vid in g.pred(nid):
            if vid in g.inputs:
                depends = True
                break
            producer = g.producer(vid)
            if producer is not None and not constant[producer]:
                depends = True
                break
        constant[nid] = not depends
    return constant


def _constant_closure(g: TaskGraph, constant: dict[str, bool], task_id: str) -> set[str]:
    """Constant tasks and values backward-reachable from one task's inputs."""
    closure: set[str] = set()
    stack = list(g.pred(task_id))
    while stack:
        vid = stack.pop()
        if vid in closure or vid in g.inputs:
            continue
        producer = g.producer(vid)
        if producer is None:
            closure.add(vid)
            continue
        if not constant[producer]:
            continue
        closure.add(vid)
        if producer not in closure:
            closure.add(producer)
            stack.extend(g.pred(producer))
    return closure


@dataclass
class AtomicPartition:
    """Atoms over a (possibly clone-expanded) graph, in topological order."""

    graph: TaskGraph
    atoms: tuple[Subcomponent, ...]
    clone_origins: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._task_atom: dict[str, int] = {}
        self._value_owner: dict[str, int] = {}
        for idx, atom in enumerate(self.atoms):
            for nid in atom.node_ids:
                node = self.graph.nodes[nid]
                if node.is_task:
                    self._task_atom[nid] = idx
                else:
                    self._value_owner[nid] = idx
        self._consumer_atoms: dict[str, frozenset[int]] = {}
        for vid in self.graph.value_ids():
            self._consumer_atoms[vid] = frozenset(
                self._task_atom[t] for t in self.graph.consumers(vid))

    def atom_of_task(self, task_id: str) -> int:
        return self._task_atom[task_id]

    def owner_of_value(self, value_id: str) -> int:
        return self._value_owner[value_id]

    def consumer_atoms(self, value_id: str) -> frozenset[int]:
        return self._consumer_atoms[value_id]

    def dependencies(self) -> list[tuple[int, int]]:
        """Atom-level edges: producer atom -> consumer atom of a value."""
        deps: set[tuple[int, int]] = set()
        for vid in self.graph.value_ids():
            if self.graph.producer(vid) is None:
                continue  # model inputs and source constants carry no dependency
            owner = self._value_owner[vid]
            for consumer in self._consumer_atoms[vid]:
                if consumer != owner:
                    deps.add((owner, consumer))
        return sorted(deps)

    def merged(self, atom_indices, sub_id: str) -> Subcomponent:
        """Materialize the union of atoms as one subcomponent."""
        group = frozenset(atom_indices)
        node_ids: set[str] = set()
        inputs: set[str] = set()
        outputs: set[str] = set()
        for idx in group:
            atom = self.atoms[idx]
            node_ids.update(atom.node_ids)
            for vid in atom.input_values:
                if vid in self.graph.inputs or self._value_owner.get(vid) not in group:
                    inputs.add(vid)
            for vid in atom.output_values:
                if vid in self.graph.outputs or (self._consumer_atoms[vid] - group):
                    outputs.add(vid)
        return Subcomponent(sub_id, frozenset(node_ids), tuple(sorted(inputs)),
                            tuple(sorted(outputs)))

    def to_json(self) -> dict:
        return {
            "atoms": [
                {
                    "id": a.id,
                    "nodes": sorted(a.node_ids),
                    "inputs": list(a.input_values),
                    "outputs": list(a.output_values),
                }
                for a in self.atoms
            ],
            "clones": dict(sorted(self.clone_origins.items())),
        }


def count_atoms(p: AtomicPartition) -> int:
    return len(p.atoms)


def build_atomic_subcomponents(g: TaskGraph) -> AtomicPartition:
    """Split the graph into atoms with exactly one non-constant task each.

    Constant support shared by several atoms is deep-cloned so each atom owns
    a private copy; the clone map records clone id -> original id. Model
    inputs are assigned to their first consumer in topological order but are
    never cloned. Raises NoNonConstantTask or DanglingOutput on graphs that
    cannot be covered.
    """
    constant = mark_constant_tasks(g)
    topo = g.topo_order()
    topo_pos = {nid: i for i, nid in enumerate(topo)}

    anchors = [nid for nid in topo if g.nodes[nid].is_task and not constant[nid]]
    if not anchors:
        raise NoNonConstantTask("no task depends on a model input")

    for oid in sorted(g.outputs):
        producer = g.producer(oid)
        if producer is None:
            if oid not in g.inputs:
                raise DanglingOutput(f"output {oid!r} is not produced by any task")
        elif constant[producer]:
            raise DanglingOutput(f"output {oid!r} depends on no model input")

    closures = [_constant_closure(g, constant, t) for t in anchors]
    owners: dict[str, list[int]] = {}
    for idx, closure in enumerate(closures):
        for nid in closure:
            owners.setdefault(nid, []).append(idx)

    for tid, is_const in constant.items():
        if is_const and tid not in owners:
            raise DanglingOutput(f"constant task {tid!r} feeds no atom")
    for vid in g.value_ids():
        if g.producer(vid) is None and vid not in g.inputs and vid not in owners:
            raise DanglingOutput(f"constant value {vid!r} feeds no atom")

    # per-atom id of each constant support node; shared nodes become clones
    local_id: list[dict[str, str]] = [{} for _ in anchors]
    clone_origins: dict[str, str] = {}
    for nid in sorted(owners):
        atom_list = sorted(owners[nid])
        if len(atom_list) == 1:
            local_id[atom_list[0]][nid] = nid
        else:
            for rank, idx in enumerate(atom_list):
                clone = f"{nid}::c{rank}"
                if clone in g.nodes:
                    raise ValueError(f"clone id {clone!r} collides with a node")
                local_id[idx][nid] = clone
                clone_origins[clone] = nid

    if clone_origins:
        expanded = _rebuild_with_clones(g, owners, anchors, closures, local_id)
    else:
        expanded = g

    return _assemble(expanded, g, anchors, closures, local_id, clone_origins, topo_pos)


def _rebuild_with_clones(g, owners, anchors, closures, local_id) -> TaskGraph:
    nodes: list[Node] = []
    for nid, node in g.nodes.items():
        if nid not in owners:
            nodes.append(node)
    emitted: set[str] = set()
    for idx in range(len(anchors)):
        for orig, new_id in sorted(local_id[idx].items()):
            if new_id in emitted:
                continue
            emitted.add(new_id)
            old = g.nodes[orig]
            nodes.append(Node(new_id, task=old.task, value=old.value))

    edges: set[tuple[str, str]] = set()
    for src, dst in g.edges:
        if src not in owners and dst not in owners:
            edges.add((src, dst))
    for idx, anchor in enumerate(anchors):
        ids = local_id[idx]
        for nid in closures[idx]:
            node = g.nodes[nid]
            if node.is_task:
                for vid in g.pred(nid):
                    edges.add((ids[vid], ids[nid]))
                for vid in g.succ(nid):
                    if vid in closures[idx]:
                        edges.add((ids[nid], ids[vid]))
            else:
                if anchor in g.succ(nid):
                    edges.add((ids[nid], anchor))
    return TaskGraph(nodes, sorted(edges), g.inputs, g.outputs)


def _assemble(graph, orig, anchors, closures, local_id, clone_origins, topo_pos):
    n = len(anchors)
    members: list[set[str]] = [set() for _ in range(n)]
    task_atom: dict[str, int] = {}
    for idx, anchor in enumerate(anchors):
        members[idx].add(anchor)
        task_atom[anchor] = idx
        members[idx].update(graph.succ(anchor))
        for nid in closures[idx]:
            members[idx].add(local_id[idx][nid])

    # model inputs go to their first consumer in topo order; dead ones to atom 0
    for vid in sorted(orig.inputs):
        consumers = graph.consumers(vid)
        if consumers:
            first = min(consumers, key=lambda t: (topo_pos[t], t))
            members[task_atom[first]].add(vid)
        else:
            members[0].add(vid)

    value_owner: dict[str, int] = {}
    for idx in range(n):
        for nid in members[idx]:
            if graph.nodes[nid].is_value:
                value_owner[nid] = idx

    atoms = []
    width = max(5, len(str(n)))
    for idx, anchor in enumerate(anchors):
        inputs = set()
        for vid in graph.pred(anchor):
            if vid in graph.inputs or value_owner.get(vid) != idx:
                inputs.add(vid)
        outputs = set()
        for vid in members[idx]:
            if not graph.nodes[vid].is_value:
                continue
            if vid in graph.outputs:
                outputs.add(vid)
                continue
            for consumer in graph.consumers(vid):
                if task_atom.get(consumer, idx) != idx:
                    outputs.add(vid)
                    break
        atoms.append(Subcomponent(f"A{idx:0{width}d}", frozenset(members[idx]),
                                  tuple(sorted(inputs)), tuple(sorted(outputs))))
    return AtomicPartition(graph=graph, atoms=tuple(atoms), clone_origins=clone_origins)
