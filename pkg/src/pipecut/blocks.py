"""Block formation over atomic subcomponents.

Folds atoms into at most k convex blocks. Three phases: greedy pairwise
coarsening that always grows the cheapest groups first, a refinement sweep
that revisits every recorded merge and moves one side next door when that
strictly lowers cross-block traffic, and a final compaction that folds
leftover groups together whenever coarsening stalled short of the target.

Every group must fit device memory at microbatch 1 with checkpointing on;
that is the floor any later stage assignment has to clear as well.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .atoms import AtomicPartition, Subcomponent
from .costs import CostModel, CostRecord


class InfeasibleAtom(Exception):
    """One atom alone exceeds device memory at the cheapest setting."""

    def __init__(self, atom_id: str, mem_bytes: int, budget_bytes: int):
        super().__init__(
            f"atom {atom_id} needs {mem_bytes} bytes at microbatch 1 with "
            f"checkpointing; a device holds {budget_bytes}")
        self.atom_id = atom_id
        self.mem_bytes = mem_bytes
        self.budget_bytes = budget_bytes


class CompactionStuck(Exception):
    """Leftover groups cannot be folded to the target count within memory."""

    def __init__(self, n_groups: int, target: int):
        super().__init__(
            f"stuck at {n_groups} groups with target {target}; "
            f"no adjacent merge fits device memory")
        self.n_groups = n_groups
        self.target = target


def is_convex(group, succ) -> bool:
    """True if no dependency path leaves the group and re-enters it.

    Atom indices form a topological order, so a contiguous index range is
    convex outright and any violating path stays strictly inside the span.
    """
    members = set(group)
    lo, hi = min(members), max(members)
    if hi - lo + 1 == len(members):
        return True
    frontier: list[int] = []
    seen: set[int] = set()
    for a in members:
        for b in succ[a]:
            if b not in members and lo < b < hi and b not in seen:
                seen.add(b)
                frontier.append(b)
    while frontier:
        x = frontier.pop()
        for b in succ[x]:
            if b in members:
                return False
            if b < hi and b not in seen:
                seen.add(b)
                frontier.append(b)
    return True


class _Grouping:
    """Shared state for the three phases: adjacency, costs, feasibility."""

    def __init__(self, partition: AtomicPartition, model: CostModel):
        self.partition = partition
        self.model = model
        self.budget = model.cluster.device_memory_bytes
        n = len(partition.atoms)
        self.n_atoms = n
        self.succ: list[list[int]] = [[] for _ in range(n)]
        self.pred: list[list[int]] = [[] for _ in range(n)]
        for a, b in partition.dependencies():
            self.succ[a].append(b)
            self.pred[b].append(a)
        self.neighbors: list[list[int]] = [
            sorted(set(self.succ[i]) | set(self.pred[i])) for i in range(n)]
        self.atom_comp = []
        self._mem_cache: dict[tuple[int, ...], int] = {}
        for i, atom in enumerate(partition.atoms):
            rec = model.profile(atom, 1, checkpointing=True)
            self.atom_comp.append(rec.t_fwd_sec + rec.t_bwd_sec)
            self._mem_cache[(i,)] = rec.mem_bytes
        g = partition.graph
        self._value_traffic: list[tuple[int, int, tuple[int, ...]]] = []
        for vid in g.value_ids():
            consumers = partition.consumer_atoms(vid)
            owner = partition.owner_of_value(vid)
            foreign = tuple(sorted(consumers - {owner}))
            if foreign:
                self._value_traffic.append((g.value_size(vid, 1), owner, foreign))

    def comp(self, group) -> float:
        return sum(self.atom_comp[i] for i in group)

    def mem(self, group: tuple[int, ...]) -> int:
        cached = self._mem_cache.get(group)
        if cached is None:
            sub = self.partition.merged(group, "probe")
            cached = self.model.profile(sub, 1, checkpointing=True).mem_bytes
            self._mem_cache[group] = cached
        return cached

    def fits(self, group: tuple[int, ...]) -> bool:
        return self.mem(group) < self.budget

    def traffic(self, block_of: dict[int, int]) -> int:
        """Bytes per sample shipped between blocks, one copy per foreign block."""
        total = 0
        for size, owner, consumers in self._value_traffic:
            home = block_of[owner]
            total += size * len({block_of[c] for c in consumers} - {home})
        return total


def _coarsen_pass(groups: list[tuple[int, ...]], k: int, ctx: _Grouping):
    """One level of pairwise merges, cheapest groups first."""
    gmap = {a: gi for gi, grp in enumerate(groups) for a in grp}
    order = sorted(range(len(groups)),
                   key=lambda gi: (ctx.comp(groups[gi]), groups[gi][0]))
    used: set[int] = set()
    partner: dict[int, int] = {}
    count = len(groups)
    for gi in order:
        if count <= k:
            break
        if gi in used:
            continue
        v = groups[gi]
        cand_ids = {gmap[b] for a in v for b in ctx.neighbors[a]}
        cand_ids.discard(gi)
        cands = sorted((c for c in cand_ids if c not in used),
                       key=lambda c: (ctx.comp(groups[c]), groups[c][0]))
        for gj in cands:
            merged = tuple(sorted(v + groups[gj]))
            if is_convex(merged, ctx.succ) and ctx.fits(merged):
                partner[gi] = gj
                used.add(gi)
                used.add(gj)
                count -= 1
                break
    absorbed = set(partner.values())
    new_groups: list[tuple[int, ...]] = []
    merges: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    for gi, v in enumerate(groups):
        if gi in absorbed:
            continue
        gj = partner.get(gi)
        if gj is None:
            new_groups.append(v)
        else:
            new_groups.append(tuple(sorted(v + groups[gj])))
            merges.append((v, groups[gj]))
    new_groups.sort(key=lambda grp: grp[0])
    return new_groups, merges


def _member_map(level: list[tuple[int, ...]]) -> dict[int, int]:
    return {a: gi for gi, grp in enumerate(level) for a in grp}


def _uncoarsen(levels, transitions, ctx: _Grouping) -> None:
    """Walk merges back from coarsest to finest, moving one side of a pair
    into a neighboring group when that strictly cuts total traffic."""
    for li in range(len(transitions) - 1, -1, -1):
        for v, w in transitions[li]:
            maps = [None] * len(levels)
            for ell in range(li, len(levels)):
                maps[ell] = _member_map(levels[ell])
            top_map = maps[-1]
            base_traffic = None
            best = None  # (saving, mover, target group index at level li)
            for mover in (v, w):
                here = top_map[mover[0]]
                target_ids = {maps[li][b] for a in mover for b in ctx.neighbors[a]}
                for ti in sorted(target_ids):
                    target = levels[li][ti]
                    if top_map[target[0]] == here or set(target) & set(mover):
                        continue
                    if not _move_fits(mover, target, levels, li, maps, ctx):
                        continue
                    if base_traffic is None:
                        base_traffic = ctx.traffic(top_map)
                    moved = dict(top_map)
                    dest_block = top_map[target[0]]
                    for a in mover:
                        moved[a] = dest_block
                    saving = base_traffic - ctx.traffic(moved)
                    if saving > 0 and (best is None or saving > best[0]):
                        best = (saving, mover, ti)
            if best is not None:
                _apply_move(best[1], levels[li][best[2]], levels, li)


def _move_fits(mover, target, levels, li, maps, ctx: _Grouping) -> bool:
    """Both touched groups stay convex and inside memory at every coarser level."""
    mover_set = set(mover)
    for ell in range(li + 1, len(levels)):
        m = maps[ell]
        src = levels[ell][m[mover[0]]]
        dst = levels[ell][m[target[0]]]
        shrunk = tuple(a for a in src if a not in mover_set)
        grown = tuple(sorted(dst + mover))
        if not shrunk:
            return False
        if not (is_convex(grown, ctx.succ) and is_convex(shrunk, ctx.succ)):
            return False
        if not (ctx.fits(grown) and ctx.fits(shrunk)):
            return False
    return True


def _apply_move(mover, target, levels, li) -> None:
    mover_set = set(mover)
    for ell in range(li + 1, len(levels)):
        m = _member_map(levels[ell])
        si, di = m[mover[0]], m[target[0]]
        level = levels[ell]
        level[si] = tuple(a for a in level[si] if a not in mover_set)
        level[di] = tuple(sorted(level[di] + mover))
        level.sort(key=lambda grp: grp[0])


def _topo_groups(groups: list[tuple[int, ...]], ctx: _Grouping) -> list[tuple[int, ...]]:
    """Group list in dependency order, ties broken by smallest atom index."""
    gmap = _member_map(groups)
    indeg = [0] * len(groups)
    out: list[set[int]] = [set() for _ in range(len(groups))]
    for a, b in _group_edges(ctx, gmap):
        if b not in out[a]:
            out[a].add(b)
            indeg[b] += 1
    heap = [(groups[gi][0], gi) for gi in range(len(groups)) if indeg[gi] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, gi = heapq.heappop(heap)
        order.append(groups[gi])
        for nb in out[gi]:
            indeg[nb] -= 1
            if indeg[nb] == 0:
                heapq.heappush(heap, (groups[nb][0], nb))
    assert len(order) == len(groups), "group contraction must stay acyclic"
    return order


def _group_edges(ctx: _Grouping, gmap: dict[int, int]):
    for a in range(ctx.n_atoms):
        ga = gmap[a]
        for b in ctx.succ[a]:
            gb = gmap[b]
            if ga != gb:
                yield ga, gb


def _compact(glist: list[tuple[int, ...]], k: int, ctx: _Grouping) -> list[tuple[int, ...]]:
    """Fold list-adjacent groups, cheapest first, until at most k remain.

    Merging neighbors in a topological listing keeps every group convex, so
    only memory can refuse a merge here.
    """
    glist = list(glist)
    while len(glist) > k:
        order = sorted(range(len(glist)),
                       key=lambda gi: (ctx.comp(glist[gi]), glist[gi][0]))
        merged_at = None
        for pos in order:
            sides = [s for s in (pos - 1, pos + 1) if 0 <= s < len(glist)]
            sides.sort(key=lambda s: (ctx.comp(glist[s]), glist[s][0]))
            for side in sides:
                union = tuple(sorted(glist[pos] + glist[side]))
                if ctx.fits(union):
                    lo = min(pos, side)
                    glist[lo:lo + 2] = [union]
                    merged_at = lo
                    break
            if merged_at is not None:
                break
        if merged_at is None:
            raise CompactionStuck(len(glist), k)
    return glist


@dataclass
class BlockSet:
    """Final blocks in dependency order with their baseline profiles."""

    partition: AtomicPartition
    model: CostModel
    block_atoms: tuple[tuple[int, ...], ...]
    blocks: tuple[Subcomponent, ...]
    costs: tuple[CostRecord, ...]  # microbatch 1, checkpointing on
    _cut_fixed: list[int] = field(default_factory=list, repr=False)
    _cut_per_sample: list[float] = field(default_factory=list, repr=False)
    _span_cache: dict[tuple[int, int], Subcomponent] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        n = len(self.blocks)
        self._cut_fixed = [0] * (n + 1)
        self._cut_per_sample = [0.0] * (n + 1)
        block_of = {a: bi for bi, grp in enumerate(self.block_atoms) for a in grp}
        g = self.partition.graph
        for vid in g.value_ids():
            owner = block_of[self.partition.owner_of_value(vid)]
            consumers = self.partition.consumer_atoms(vid)
            last = max((block_of[c] for c in consumers), default=owner)
            info = g.nodes[vid].value
            for cut in range(owner + 1, last + 1):
                self._cut_fixed[cut] += info.fixed_bytes
                self._cut_per_sample[cut] += info.bytes_per_sample

    def __len__(self) -> int:
        return len(self.blocks)

    def boundary_bytes(self, cut: int, microbatch: int) -> int:
        """Bytes crossing between blocks [0, cut) and [cut, n) for one
        microbatch, each value counted once however many readers it has."""
        if not 0 <= cut <= len(self.blocks):
            raise ValueError(f"cut {cut} out of range")
        return int(self._cut_fixed[cut] + microbatch * self._cut_per_sample[cut])

    def span(self, lo: int, hi: int) -> Subcomponent:
        """Union of blocks [lo, hi) as one subcomponent."""
        if not 0 <= lo < hi <= len(self.blocks):
            raise ValueError(f"span [{lo}, {hi}) out of range")
        key = (lo, hi)
        sub = self._span_cache.get(key)
        if sub is None:
            atoms = [a for grp in self.block_atoms[lo:hi] for a in grp]
            sub = self.partition.merged(atoms, f"S{lo:03d}_{hi:03d}")
            self._span_cache[key] = sub
        return sub

    def to_json(self) -> dict:
        return {
            "num_blocks": len(self.blocks),
            "blocks": [
                {
                    "id": sub.id,
                    "atoms": [self.partition.atoms[i].id for i in grp],
                    "t_fwd_sec": rec.t_fwd_sec,
                    "t_bwd_sec": rec.t_bwd_sec,
                    "mem_bytes": rec.mem_bytes,
                }
                for sub, grp, rec in zip(self.blocks, self.block_atoms, self.costs)
            ],
        }


def partition_blocks(partition: AtomicPartition, model: CostModel, k: int = 32) -> BlockSet:
    """Group atoms into at most k convex, memory-feasible blocks."""
    if k < 1:
        raise ValueError("k must be at least 1")
    ctx = _Grouping(partition, model)
    for i, atom in enumerate(partition.atoms):
        mem = ctx.mem((i,))
        if mem >= ctx.budget:
            raise InfeasibleAtom(atom.id, mem, ctx.budget)

    levels: list[list[tuple[int, ...]]] = [[(i,) for i in range(ctx.n_atoms)]]
    transitions: list[list[tuple[tuple[int, ...], tuple[int, ...]]]] = []
    while len(levels[-1]) > k:
        new_groups, merges = _coarsen_pass(levels[-1], k, ctx)
        if not merges:
            break
        levels.append(new_groups)
        transitions.append(merges)
    if transitions:
        _uncoarsen(levels, transitions, ctx)

    glist = _topo_groups(levels[-1], ctx)
    if len(glist) > k:
        glist = _compact(glist, k, ctx)
        glist = _topo_groups(glist, ctx)

    width = max(3, len(str(len(glist))))
    blocks = tuple(
        partition.merged(grp, f"B{idx:0{width}d}") for idx, grp in enumerate(glist))
    costs = tuple(model.profile(sub, 1, checkpointing=True) for sub in blocks)
    return BlockSet(
        partition=partition,
        model=model,
        block_atoms=tuple(tuple(grp) for grp in glist),
        blocks=blocks,
        costs=costs,
    )
