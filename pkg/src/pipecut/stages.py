"""Stage assignment over a block list.

A stage is a contiguous block range run on some device count and replicated
for data parallelism. The planner minimizes the slowest forward plus the
slowest backward stage time, including the transfer of boundary values, via
a dynamic program over (stages so far, blocks covered, devices spent). A
doubling search on top picks the replica factor, stage count, and microbatch
count, ranking complete plans by simulated iteration time.

The brute-force enumerator exists to cross-check the dynamic program on
small instances; it applies the exact same candidate rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

from .blocks import BlockSet
from .costs import CostRecord
from .graph import ParseError, Violation


class InvalidArgs(ValueError):
    pass


class TooLarge(ValueError):
    pass


class SearchBudgetExceeded(RuntimeError):
    def __init__(self, visits: int, budget: int):
        super().__init__(f"candidate visits {visits} exceeded budget {budget}")
        self.visits = visits
        self.budget = budget


@dataclass(frozen=True)
class StagePlan:
    blocks: tuple[int, int]  # half-open block range [from, to)
    devices: int             # devices per pipeline replica
    replicas: int            # devices x replica factor
    t_fwd: float             # compute profile at the plan microbatch, no comm
    t_bwd: float
    mem: int


@dataclass(frozen=True)
class Plan:
    stages: tuple[StagePlan, ...]
    microbatches: int        # microbatch count per iteration
    replica_factor: int
    objective: float         # max stage forward + max stage backward, with comm
    batch_size: int
    devices_total: int       # devices per pipeline replica, summed over stages

    def to_json(self) -> dict:
        return {
            "stages": [
                {
                    "blocks": list(st.blocks),
                    "devices": st.devices,
                    "replicas": st.replicas,
                    "t_fwd": st.t_fwd,
                    "t_bwd": st.t_bwd,
                    "mem": st.mem,
                }
                for st in self.stages
            ],
            "microbatches": self.microbatches,
            "replica_factor": self.replica_factor,
            "objective": self.objective,
            "batch_size": self.batch_size,
            "devices_total": self.devices_total,
        }

    @staticmethod
    def from_json(doc: dict) -> "Plan":
        top = {"stages", "microbatches", "replica_factor", "objective",
               "batch_size", "devices_total"}
        if not isinstance(doc, dict) or set(doc) != top:
            raise ParseError(f"plan document must have exactly the keys {sorted(top)}")
        stage_keys = {"blocks", "devices", "replicas", "t_fwd", "t_bwd", "mem"}
        stages = []
        for st in doc["stages"]:
            if not isinstance(st, dict) or set(st) != stage_keys:
                raise ParseError(f"plan stage must have exactly the keys {sorted(stage_keys)}")
            if len(st["blocks"]) != 2:
                raise ParseError("stage blocks must be a [from, to) pair")
            stages.append(StagePlan(
                blocks=(int(st["blocks"][0]), int(st["blocks"][1])),
                devices=int(st["devices"]),
                replicas=int(st["replicas"]),
                t_fwd=float(st["t_fwd"]),
                t_bwd=float(st["t_bwd"]),
                mem=int(st["mem"]),
            ))
        return Plan(
            stages=tuple(stages),
            microbatches=int(doc["microbatches"]),
            replica_factor=int(doc["replica_factor"]),
            objective=float(doc["objective"]),
            batch_size=int(doc["batch_size"]),
            devices_total=int(doc["devices_total"]),
        )


@dataclass
class SearchStats:
    visits: int = 0    # candidate (prefix, device-split) pairs the DP scanned
    dp_calls: int = 0


@dataclass(frozen=True)
class SearchOptions:
    disable_pruning: bool = False
    visit_budget: int | None = None


@dataclass(frozen=True)
class SearchResult:
    plan: Plan | None   # None means no feasible assignment exists
    stats: SearchStats


class _Profiler:
    """Memoized span profiling and boundary transfer times for one BlockSet."""

    def __init__(self, blocks: BlockSet):
        self.blocks = blocks
        self.model = blocks.model
        self.cluster = blocks.model.cluster
        self.mem_budget = self.cluster.device_memory_bytes
        self._cache: dict[tuple[int, int, int, bool], CostRecord] = {}

    def record(self, lo: int, hi: int, microbatch: int, ckpt: bool) -> CostRecord:
        key = (lo, hi, microbatch, ckpt)
        rec = self._cache.get(key)
        if rec is None:
            rec = self.model.profile(self.blocks.span(lo, hi), microbatch,
                                     checkpointing=ckpt)
            self._cache[key] = rec
        return rec

    def cut_time(self, cut: int, microbatch: int, cum_devices: int) -> float:
        """Transfer time of the boundary at `cut` for one microbatch slice.

        The cut sits between cumulative device cum_devices and the next one;
        with contiguous placement it crosses nodes exactly when that count is
        a whole number of nodes.
        """
        nbytes = self.blocks.boundary_bytes(cut, microbatch)
        inter = (self.cluster.num_nodes > 1
                 and cum_devices % self.cluster.devices_per_node == 0)
        return self.model.comm_time(nbytes, inter_node=inter)


def _check_args(blocks: BlockSet, S: int, D: int, batch_size: int,
                replica_factor: int, microbatches: int) -> None:
    if S < 1 or D < 1 or batch_size < 1 or replica_factor < 1 or microbatches < 1:
        raise InvalidArgs("stage count, devices, batch size, replicas and "
                          "microbatches must all be at least 1")
    if S > D:
        raise InvalidArgs(f"cannot run {S} stages on {D} devices")
    if S > len(blocks):
        raise InvalidArgs(f"cannot cut {len(blocks)} blocks into {S} stages")


# frontier entry: (max fwd time so far, max bwd time so far,
#                  predecessor block cut, predecessor device count, entry index)
_Entry = tuple[float, float, int, int, int]


def _pareto(cands: list[_Entry]) -> list[_Entry]:
    """Non-dominated (tf, tb) pairs, tf ascending; first entry wins ties."""
    order = sorted(range(len(cands)), key=lambda i: (cands[i][0], cands[i][1], i))
    out: list[_Entry] = []
    best_tb = math.inf
    for i in order:
        if cands[i][1] < best_tb:
            out.append(cands[i])
            best_tb = cands[i][1]
    return out


def _run_dp(prof: _Profiler, S: int, D: int, batch_size: int, R: int, MB: int,
            opts: SearchOptions, stats: SearchStats) -> Plan | None:
    blocks = prof.blocks
    nb = len(blocks)
    cfg = prof.model.config
    ckpt = cfg.checkpointing and S > 1
    stats.dp_calls += 1
    denom = MB * R

    # Each cell keeps every non-dominated (running max tf, running max tb)
    # pair instead of a single value: a prefix with the larger forward
    # bottleneck can still win once a later stage raises it anyway, so
    # collapsing to one pair per cell loses exactness against enumeration.
    prev: dict[tuple[int, int], list[_Entry]] = {(0, 0): [(0.0, 0.0, -1, -1, -1)]}
    levels: list[dict[tuple[int, int], list[_Entry]]] = [prev]
    d_min = 1
    for s in range(1, S + 1):
        if s > 1:
            # the carried floor only speaks about single-stage prefixes;
            # a finer multi-stage split of the same prefix can fit where
            # the one-stage form did not, so later rows start fresh
            d_min = 1
        cur: dict[tuple[int, int], list[_Entry]] = {}
        prev_cells = sorted(prev.items())
        for b in range(s, nb - S + s + 1):
            for d in range(D - (S - s), max(d_min, s) - 1, -1):
                stats.visits += (b - s + 1) * (d - s + 1)
                if opts.visit_budget is not None and stats.visits > opts.visit_budget:
                    raise SearchBudgetExceeded(stats.visits, opts.visit_budget)
                cands: list[_Entry] = []
                saw_zero_share = False
                for (bp, dp), entries in prev_cells:
                    if bp >= b or dp >= d:
                        continue
                    dev = d - dp
                    m = batch_size // (denom * dev)
                    if m == 0:
                        # fewer devices would get a positive share back, so
                        # this failure does not persist toward smaller d
                        saw_zero_share = True
                        continue
                    rec = prof.record(bp, b, m, ckpt)
                    if rec.mem_bytes > prof.mem_budget:
                        continue
                    tf = rec.t_fwd_sec
                    if b < nb:
                        tf += prof.cut_time(b, m, d)
                    tb = rec.t_bwd_sec
                    if bp > 0:
                        tb += prof.cut_time(bp, m, dp)
                    for idx, (ptf, ptb, _, _, _) in enumerate(entries):
                        cands.append((max(ptf, tf), max(ptb, tb), bp, dp, idx))
                if cands:
                    cur[(b, d)] = _pareto(cands)
                elif not opts.disable_pruning and not saw_zero_share:
                    # every candidate failed for a reason that persists when
                    # d shrinks (memory over budget, or an infeasible
                    # predecessor), so the rest of this d range is dead; for
                    # single-stage prefixes the floor also holds as b grows
                    if s == 1:
                        d_min = d + 1
                    break
        levels.append(cur)
        prev = cur

    final = levels[S].get((nb, D))
    if final is None:
        return None
    best = final[0]
    for entry in final[1:]:
        if entry[0] + entry[1] < best[0] + best[1]:
            best = entry
    segs = []
    s, b, d, entry = S, nb, D, best
    while s > 0:
        bp, dp, pidx = entry[2], entry[3], entry[4]
        segs.append((bp, b, dp, d))
        if s > 1:
            entry = levels[s - 1][(bp, dp)][pidx]
        s, b, d = s - 1, bp, dp
    segs.reverse()
    stages = []
    for lo, hi, d0, d1 in segs:
        dev = d1 - d0
        m = batch_size // (denom * dev)
        rec = prof.record(lo, hi, m, ckpt)
        stages.append(StagePlan(blocks=(lo, hi), devices=dev, replicas=dev * R,
                                t_fwd=rec.t_fwd_sec, t_bwd=rec.t_bwd_sec,
                                mem=rec.mem_bytes))
    return Plan(stages=tuple(stages), microbatches=MB, replica_factor=R,
                objective=best[0] + best[1], batch_size=batch_size,
                devices_total=D)


def form_stage_dp(blocks: BlockSet, S: int, D: int, batch_size: int,
                  replica_factor: int, microbatches: int,
                  options: SearchOptions | None = None) -> SearchResult:
    """Optimal S-stage assignment of the block list onto D devices."""
    _check_args(blocks, S, D, batch_size, replica_factor, microbatches)
    prof = _Profiler(blocks)
    stats = SearchStats()
    plan = _run_dp(prof, S, D, batch_size, replica_factor, microbatches,
                   options or SearchOptions(), stats)
    return SearchResult(plan, stats)


def _compositions(total: int, parts: int):
    """All positive integer tuples of the given length summing to total."""
    if parts == 1:
        yield (total,)
        return
    for head in range(1, total - parts + 2):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


def brute_force_partition(blocks: BlockSet, S: int, D: int, batch_size: int,
                          replica_factor: int, microbatches: int,
                          options: SearchOptions | None = None) -> SearchResult:
    """Exhaustive reference search; same candidate rules as the DP."""
    _check_args(blocks, S, D, batch_size, replica_factor, microbatches)
    nb = len(blocks)
    if nb > 12 or D > 8:
        raise TooLarge(f"{nb} blocks on {D} devices is past the enumeration guard")
    prof = _Profiler(blocks)
    stats = SearchStats()
    cfg = prof.model.config
    ckpt = cfg.checkpointing and S > 1
    denom = microbatches * replica_factor

    best_key = None
    best_assignment = None
    for cuts in combinations(range(1, nb), S - 1):
        bounds = (0,) + cuts + (nb,)
        for devs in _compositions(D, S):
            stats.visits += 1
            tfs: list[float] = []
            tbs: list[float] = []
            cum = 0
            feasible = True
            for i in range(S):
                lo, hi = bounds[i], bounds[i + 1]
                prev_cum = cum
                cum += devs[i]
                m = batch_size // (denom * devs[i])
                if m == 0:
                    feasible = False
                    break
                rec = prof.record(lo, hi, m, ckpt)
                if rec.mem_bytes > prof.mem_budget:
                    feasible = False
                    break
                tf = rec.t_fwd_sec
                if hi < nb:
                    tf += prof.cut_time(hi, m, cum)
                tb = rec.t_bwd_sec
                if lo > 0:
                    tb += prof.cut_time(lo, m, prev_cum)
                tfs.append(tf)
                tbs.append(tb)
            if not feasible:
                continue
            key = (max(tfs) + max(tbs), bounds, devs)
            if best_key is None or key < best_key:
                best_key = key
                best_assignment = (bounds, devs)
    if best_assignment is None:
        return SearchResult(None, stats)
    bounds, devs = best_assignment
    stages = []
    for i in range(S):
        lo, hi = bounds[i], bounds[i + 1]
        m = batch_size // (denom * devs[i])
        rec = prof.record(lo, hi, m, ckpt)
        stages.append(StagePlan(blocks=(lo, hi), devices=devs[i],
                                replicas=devs[i] * replica_factor,
                                t_fwd=rec.t_fwd_sec, t_bwd=rec.t_bwd_sec,
                                mem=rec.mem_bytes))
    plan = Plan(stages=tuple(stages), microbatches=microbatches,
                replica_factor=replica_factor, objective=float(best_key[0]),
                batch_size=batch_size, devices_total=D)
    return SearchResult(plan, stats)


def form_stage(num_nodes: int, devices_per_node: int, batch_size: int,
               blocks: BlockSet,
               options: SearchOptions | None = None) -> SearchResult:
    """Search replica factor, stage count, and microbatch count together.

    Pipelines widen by node-count doubling: n nodes per pipeline leaves
    num_nodes/n data-parallel replicas. The first widening level with any
    feasible assignment wins; within it, candidates are ranked by simulated
    iteration time, then objective, then fewer microbatches.
    """
    if num_nodes < 1 or devices_per_node < 1 or batch_size < 1:
        raise InvalidArgs("node count, devices per node and batch size must be "
                          "at least 1")
    opts = options or SearchOptions()
    prof = _Profiler(blocks)
    stats = SearchStats()
    nb = len(blocks)
    n = 1
    while n <= num_nodes:
        if num_nodes % n == 0:
            D = devices_per_node * n
            R = num_nodes // n
            candidates: list[Plan] = []
            for S in range(devices_per_node * (n - 1) + 1, D + 1):
                if S > nb:
                    continue
                MB = 1
                while MB * R <= batch_size:
                    plan = _run_dp(prof, S, D, batch_size, R, MB, opts, stats)
                    if plan is not None:
                        candidates.append(plan)
                    MB *= 2
            if candidates:
                from .simulate import simulate

                def rank(p: Plan):
                    sched = simulate(p, blocks)
                    return (sched.iteration_time_sec, p.objective, p.microbatches)

                return SearchResult(min(candidates, key=rank), stats)
        n *= 2
    return SearchResult(None, stats)


def validate_plan(plan: Plan, blocks: BlockSet) -> list[Violation]:
    """Recheck a plan from scratch; empty list iff it is sound."""
    out: list[Violation] = []
    nb = len(blocks)
    S = len(plan.stages)
    if S == 0:
        return [Violation("empty-plan", (), "plan has no stages")]
    if plan.microbatches < 1 or plan.replica_factor < 1 or plan.batch_size < 1:
        out.append(Violation("counts", (), "microbatches, replica factor and "
                                           "batch size must be at least 1"))
        return out

    expected = 0
    for i, st in enumerate(plan.stages):
        lo, hi = st.blocks
        if lo != expected or hi <= lo:
            out.append(Violation("boundary", (f"stage {i}",),
                                 f"stage {i} covers [{lo}, {hi}) but the "
                                 f"previous stage ended at {expected}"))
        expected = hi
        if st.devices < 1:
            out.append(Violation("devices", (f"stage {i}",),
                                 f"stage {i} has {st.devices} devices"))
        if st.replicas != st.devices * plan.replica_factor:
            out.append(Violation("replicas", (f"stage {i}",),
                                 f"stage {i} replicas {st.replicas} != devices "
                                 f"x replica factor"))
    if expected != nb:
        out.append(Violation("boundary", ("stage last",),
                             f"stages end at block {expected}, not {nb}"))
    total_dev = sum(st.devices for st in plan.stages)
    if total_dev != plan.devices_total:
        out.append(Violation("devices", (), f"stage devices sum to {total_dev}, "
                                            f"plan says {plan.devices_total}"))
    if out:
        return out

    prof = _Profiler(blocks)
    cfg = prof.model.config
    ckpt = cfg.checkpointing and S > 1
    denom = plan.microbatches * plan.replica_factor
    tfs: list[float] = []
    tbs: list[float] = []
    cum = 0
    for i, st in enumerate(plan.stages):
        lo, hi = st.blocks
        prev_cum = cum
        cum += st.devices
        m = plan.batch_size // (denom * st.devices)
        if m == 0:
            out.append(Violation("microbatch", (f"stage {i}",),
                                 f"stage {i} gets zero samples per device"))
            continue
        rec = prof.record(lo, hi, m, ckpt)
        if rec.mem_bytes > prof.mem_budget:
            out.append(Violation("memory", (f"stage {i}",),
                                 f"stage {i} needs {rec.mem_bytes} bytes, "
                                 f"device holds {prof.mem_budget}"))
        if rec.mem_bytes != st.mem or not (
                math.isclose(rec.t_fwd_sec, st.t_fwd, rel_tol=1e-9, abs_tol=1e-15)
                and math.isclose(rec.t_bwd_sec, st.t_bwd, rel_tol=1e-9, abs_tol=1e-15)):
            out.append(Violation("profile", (f"stage {i}",),
                                 f"stage {i} stored profile does not match "
                                 f"a fresh one"))
        tf = rec.t_fwd_sec
        if hi < nb:
            tf += prof.cut_time(hi, m, cum)
        tb = rec.t_bwd_sec
        if lo > 0:
            tb += prof.cut_time(lo, m, prev_cum)
        tfs.append(tf)
        tbs.append(tb)
    if tfs and not out:
        v = max(tfs) + max(tbs)
        if not math.isclose(v, plan.objective, rel_tol=1e-9, abs_tol=1e-15):
            out.append(Violation("objective", (),
                                 f"recomputed objective {v} != stored "
                                 f"{plan.objective}"))
    return out
