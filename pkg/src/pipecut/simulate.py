"""Event-level replay of a plan under synchronous pipeline training.

One iteration runs every microbatch forward through the stages in order,
then backward in reverse microbatch order, then a gradient sync on every
stage whose parameters live on more than one device. Devices never overlap
their own work; sends occupy the sending device, so a stage's cadence
matches the planner's charged stage time. All pipeline replicas behave
identically, so one replica's device lanes are simulated and the replica
count only enters the gradient sync.
"""

from __future__ import annotations

from dataclasses import dataclass

from .blocks import BlockSet
from .stages import Plan, _Profiler, validate_plan

PHASES = ("fwd", "recompute", "bwd", "comm", "allreduce")


class InvalidPlan(ValueError):
    def __init__(self, violations):
        super().__init__("; ".join(v.detail for v in violations))
        self.violations = tuple(violations)


@dataclass(frozen=True)
class Event:
    device: int
    stage: int
    microbatch: int   # 0-based; -1 for the gradient sync
    phase: str
    start_sec: float
    end_sec: float


@dataclass(frozen=True)
class Schedule:
    events: tuple[Event, ...]
    iteration_time_sec: float
    bubble_fraction: float
    n_devices: int
    samples_per_sec: float

    def to_json(self) -> dict:
        return {
            "iteration_time_sec": self.iteration_time_sec,
            "bubble_fraction": self.bubble_fraction,
            "n_devices": self.n_devices,
            "samples_per_sec": self.samples_per_sec,
            "events": [
                {"device": e.device, "stage": e.stage,
                 "microbatch": e.microbatch, "phase": e.phase,
                 "start_sec": e.start_sec, "end_sec": e.end_sec}
                for e in self.events
            ],
        }


def throughput(schedule: Schedule, batch_size: int) -> float:
    """Samples finished per second when training with the given batch."""
    if schedule.iteration_time_sec <= 0:
        return 0.0
    return batch_size / schedule.iteration_time_sec


def _span_param_bytes(blocks: BlockSet, lo: int, hi: int) -> int:
    graph = blocks.model.graph
    sub = blocks.span(lo, hi)
    total = 0
    for nid in sub.node_ids:
        node = graph.nodes[nid]
        if node.is_value and node.value.is_param:
            total += node.value.fixed_bytes
    return total


def simulate(plan: Plan, blocks: BlockSet) -> Schedule:
    violations = validate_plan(plan, blocks)
    if violations:
        raise InvalidPlan(violations)

    model = blocks.model
    cluster = model.cluster
    nb = len(blocks)
    S = len(plan.stages)
    MB = plan.microbatches
    R = plan.replica_factor
    ckpt = model.config.checkpointing and S > 1
    denom = MB * R

    m = [plan.batch_size // (denom * st.devices) for st in plan.stages]
    tf = [st.t_fwd for st in plan.stages]
    tb = [st.t_bwd for st in plan.stages]
    cum = [0]
    for st in plan.stages:
        cum.append(cum[-1] + st.devices)

    def cut_time(cut: int, mb: int, cum_devices: int) -> float:
        inter = (cluster.num_nodes > 1
                 and cum_devices % cluster.devices_per_node == 0)
        return model.comm_time(blocks.boundary_bytes(cut, mb),
                               inter_node=inter)

    # send durations, paid by the sending stage at its own microbatch share
    c_fwd = [cut_time(plan.stages[s].blocks[1], m[s], cum[s + 1])
             if s < S - 1 else 0.0 for s in range(S)]
    c_bwd = [cut_time(plan.stages[s].blocks[0], m[s], cum[s])
             if s > 0 else 0.0 for s in range(S)]

    lane_free = [0.0] * S
    lane_events: list[list[tuple[int, str, float, float]]] = [[] for _ in range(S)]
    arrival = [[0.0] * S for _ in range(MB)]

    for mb in range(MB):
        for s in range(S):
            start = max(lane_free[s], arrival[mb][s])
            end = start + tf[s]
            lane_events[s].append((mb, "fwd", start, end))
            lane_free[s] = end
            if s < S - 1:
                send_end = end + c_fwd[s]
                if c_fwd[s] > 0.0:
                    lane_events[s].append((mb, "comm", end, send_end))
                lane_free[s] = send_end
                arrival[mb][s + 1] = send_end

    grad_arrival = [[0.0] * S for _ in range(MB)]
    for mb in range(MB - 1, -1, -1):
        for s in range(S - 1, -1, -1):
            if ckpt:
                start = lane_free[s]
                end = start + tf[s]
                lane_events[s].append((mb, "recompute", start, end))
                lane_free[s] = end
            start = max(lane_free[s], grad_arrival[mb][s])
            end = start + tb[s]
            lane_events[s].append((mb, "bwd", start, end))
            lane_free[s] = end
            if s > 0:
                send_end = end + c_bwd[s]
                if c_bwd[s] > 0.0:
                    lane_events[s].append((mb, "comm", end, send_end))
                lane_free[s] = send_end
                grad_arrival[mb][s - 1] = send_end

    for s in range(S):
        group = plan.stages[s].replicas
        if group <= 1:
            continue
        params = _span_param_bytes(blocks, *plan.stages[s].blocks)
        if params == 0:
            continue
        nbytes = 2 * params * (group - 1) // group
        first_node = cum[s] // cluster.devices_per_node
        last_node = (cum[s + 1] - 1) // cluster.devices_per_node
        spans_nodes = R > 1 or first_node != last_node
        dur = model.comm_time(nbytes, inter_node=spans_nodes)
        if dur > 0.0:
            start = lane_free[s]
            lane_events[s].append((-1, "allreduce", start, start + dur))
            lane_free[s] = start + dur

    iteration = max(lane_free)
    events = []
    busy = 0.0
    for s in range(S):
        for dev in range(cum[s], cum[s + 1]):
            for mb, phase, start, end in lane_events[s]:
                events.append(Event(device=dev, stage=s, microbatch=mb,
                                    phase=phase, start_sec=start, end_sec=end))
                busy += end - start
    n_devices = cum[-1]
    bubble = 1.0 - busy / (n_devices * iteration) if iteration > 0 else 0.0
    return Schedule(events=tuple(events), iteration_time_sec=iteration,
                    bubble_fraction=bubble, n_devices=n_devices,
                    samples_per_sec=(plan.batch_size / iteration
                                     if iteration > 0 else 0.0))


_TEXT_CHARS = {"fwd": "F", "recompute": "R", "bwd": "B", "comm": "~",
               "allreduce": "A"}

_SVG_COLORS = {"fwd": "#4c86c6", "recompute": "#9bb8d9", "bwd": "#c2643f",
               "comm": "#999999", "allreduce": "#8559a5"}


def render_gantt(schedule: Schedule, mode: str = "text", width: int = 80) -> str:
    """Device-lane timeline of a schedule, one row per device."""
    if mode not in ("text", "svg"):
        raise ValueError(f"unknown gantt mode {mode!r}")
    per_device: dict[int, list[Event]] = {d: [] for d in range(schedule.n_devices)}
    for ev in schedule.events:
        per_device[ev.device].append(ev)
    for evs in per_device.values():
        evs.sort(key=lambda e: e.start_sec)
    total = schedule.iteration_time_sec or 1.0

    if mode == "text":
        lines = [f"iteration {schedule.iteration_time_sec:.6g}s  "
                 f"bubble {schedule.bubble_fraction:.1%}"]
        for dev in range(schedule.n_devices):
            row = ["."] * width
            for ev in per_device[dev]:
                lo = int(ev.start_sec / total * width)
                hi = max(lo + 1, int(ev.end_sec / total * width))
                ch = _TEXT_CHARS[ev.phase]
                for i in range(lo, min(hi, width)):
                    row[i] = ch
            lines.append(f"dev {dev:>3d} |{''.join(row)}|")
        legend = "  ".join(f"{c}={p}" for p, c in _TEXT_CHARS.items())
        lines.append(legend)
        return "\n".join(lines) + "\n"

    row_h, gap, left = 22, 4, 60
    w = 900
    height = schedule.n_devices * (row_h + gap) + gap + 20
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" '
             f'height="{height}" font-family="monospace" font-size="11">']
    for dev in range(schedule.n_devices):
        y = gap + dev * (row_h + gap)
        parts.append(f'<text x="2" y="{y + row_h - 7}">dev {dev}</text>')
        parts.append(f'<rect class="lane" x="{left}" y="{y}" '
                     f'width="{w - left - 4}" height="{row_h}" fill="#f0f0f0"/>')
        for ev in per_device[dev]:
            x = left + ev.start_sec / total * (w - left - 4)
            bw = max(1.0, (ev.end_sec - ev.start_sec) / total * (w - left - 4))
            parts.append(
                f'<rect class="ev phase-{ev.phase}" x="{x:.2f}" y="{y + 2}" '
                f'width="{bw:.2f}" height="{row_h - 4}" '
                f'fill="{_SVG_COLORS[ev.phase]}">'
                f'<title>stage {ev.stage} mb {ev.microbatch} {ev.phase} '
                f'[{ev.start_sec:.6g}, {ev.end_sec:.6g}]</title></rect>')
    parts.append(f'<text x="{left}" y="{height - 6}">iteration '
                 f'{schedule.iteration_time_sec:.6g}s, bubble '
                 f'{schedule.bubble_fraction:.1%}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
