"""Analytic cost model with optional measured overrides.

Compute time scales FLOPs by device throughput, backward time by a fixed
ratio. Memory charges parameters with gradient and optimizer-state factors
plus an activation term that depends on whether checkpointing is active:
without it every produced value stays resident, with it only the stage
inputs plus the largest single-task working set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

from .atoms import Subcomponent
from .graph import ClusterSpec, ParseError, TaskGraph, TaskInfo


@dataclass(frozen=True)
class CostRecord:
    t_fwd_sec: float
    t_bwd_sec: float
    mem_bytes: int


@dataclass(frozen=True)
class CostModelConfig:
    device_flops_per_sec: float = 15.7e12
    bwd_fwd_ratio: float = 2.0
    grad_factor: float = 1.0
    optimizer_state_factor: float = 2.0
    checkpointing: bool = True
    cost_table: Mapping[str, "CostTableEntry"] | None = None

    def __post_init__(self) -> None:
        if self.device_flops_per_sec <= 0:
            raise ValueError("device_flops_per_sec must be positive")
        if self.bwd_fwd_ratio < 0 or self.grad_factor < 0 or self.optimizer_state_factor < 0:
            raise ValueError("cost factors must be non-negative")


@dataclass(frozen=True)
class CostTableEntry:
    microbatch: int
    t_fwd: float
    t_bwd: float | None = None
    act_bytes: int | None = None


def op_signature(task: TaskInfo, microbatch: int) -> str:
    """Stable lookup key for measured costs: op, shape attrs, microbatch."""
    attrs = ",".join(f"{k}={task.attrs[k]}" for k in sorted(task.attrs))
    return f"{task.op}|{attrs}|mb={microbatch}"


def load_cost_table(path: str) -> dict[str, CostTableEntry]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("cost table must be an object of op_sig -> record")
    table: dict[str, CostTableEntry] = {}
    for sig, rec in doc.items():
        if not isinstance(rec, dict):
            raise ParseError(f"cost table entry {sig!r} must be an object")
        unknown = set(rec) - {"microbatch", "t_fwd", "t_bwd", "act_bytes"}
        if unknown:
            raise ParseError(f"cost table entry {sig!r}: unknown fields {sorted(unknown)}")
        if "microbatch" not in rec or "t_fwd" not in rec:
            raise ParseError(f"cost table entry {sig!r}: microbatch and t_fwd are required")
        table[sig] = CostTableEntry(
            microbatch=int(rec["microbatch"]),
            t_fwd=float(rec["t_fwd"]),
            t_bwd=None if rec.get("t_bwd") is None else float(rec["t_bwd"]),
            act_bytes=None if rec.get("act_bytes") is None else int(rec["act_bytes"]),
        )
    return table


def comm_time(nbytes: int, bandwidth: float, latency: float = 0.0) -> float:
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return latency + nbytes / bandwidth


class CostModel:
    """Profiles subcomponents of one graph against one cluster."""

    def __init__(self, graph: TaskGraph, config: CostModelConfig, cluster: ClusterSpec):
        self.graph = graph
        self.config = config
        self.cluster = cluster

    def profile(self, sub: Subcomponent, microbatch: int,
                checkpointing: bool | None = None) -> CostRecord:
        """Forward/backward time and peak training memory at a microbatch size.

        Memory never shrinks when checkpointing is turned off and never counts
        a boundary input twice; parameters are charged once with gradient and
        optimizer-state factors applied.
        """
        if microbatch < 0:
            raise ValueError("microbatch must be non-negative")
        if checkpointing is None:
            checkpointing = self.config.checkpointing
        g = self.graph
        cfg = self.config
        inputs = set(sub.input_values)

        t_fwd = 0.0
        t_bwd = 0.0
        param_bytes = 0
        resident = 0          # produced values and non-param constants
        max_footprint = 0
        input_bytes = sum(g.value_size(v, microbatch) for v in sub.input_values)

        for nid in sorted(sub.node_ids):
            node = g.nodes[nid]
            if node.is_value:
                assert node.value is not None
                if node.value.is_param:
                    param_bytes += node.value.fixed_bytes
                elif nid not in inputs and g.producer(nid) is None:
                    resident += g.value_size(nid, microbatch)
                continue
            assert node.task is not None
            entry = None
            if cfg.cost_table is not None:
                entry = cfg.cost_table.get(op_signature(node.task, microbatch))
            if entry is not None:
                tf = entry.t_fwd
                tb = entry.t_bwd if entry.t_bwd is not None else cfg.bwd_fwd_ratio * tf
            else:
                tf = node.task.flops_per_sample * microbatch / cfg.device_flops_per_sec
                tb = cfg.bwd_fwd_ratio * tf
            t_fwd += tf
            t_bwd += tb

            produced = 0
            for vid in g.succ(nid):
                info = g.nodes[vid].value
                if info is not None and not info.is_param:
                    produced += g.value_size(vid, microbatch)
            if entry is not None and entry.act_bytes is not None:
                produced = entry.act_bytes
            resident += produced
            footprint = produced
            for vid in g.pred(nid):
                info = g.nodes[vid].value
                if info is not None and not info.is_param and vid not in inputs:
                    footprint += g.value_size(vid, microbatch)
            max_footprint = max(max_footprint, footprint)

        activations = input_bytes + (max_footprint if checkpointing else resident)
        mem = int(param_bytes * (1.0 + cfg.grad_factor + cfg.optimizer_state_factor)
                  + activations)
        return CostRecord(t_fwd_sec=t_fwd, t_bwd_sec=t_bwd, mem_bytes=mem)

    def comm_time(self, nbytes: int, inter_node: bool = False) -> float:
        bw = self.cluster.bw_inter if inter_node else self.cluster.bw_intra
        return comm_time(nbytes, bw, self.cluster.link_latency_sec)

    def cut_bytes(self, a: Subcomponent, b: Subcomponent, microbatch: int) -> int:
        """Bytes crossing between two subcomponents in either direction."""
        total = 0
        for src, dst in ((a, b), (b, a)):
            for vid in src.output_values:
                for consumer in self.graph.consumers(vid):
                    if consumer in dst.node_ids:
                        total += self.graph.value_size(vid, microbatch)
                        break
        return total
