"""Shared builders for test graphs."""

from __future__ import annotations

import random

from pipecut.graph import Node, TaskGraph, TaskInfo, ValueInfo


def value(vid, fixed=0, per_sample=0, param=False):
    return Node(vid, value=ValueInfo(fixed_bytes=fixed, bytes_per_sample=per_sample, is_param=param))


def task(tid, op="op", flops=0.0, attrs=None):
    return Node(tid, task=TaskInfo(op=op, flops_per_sample=flops, attrs=attrs or {}))


def chain_graph(n_tasks=2, per_sample=4, flops=1.0):
    """x -> t0 -> v0 -> t1 -> v1 ... ; input x, output last value."""
    nodes = [value("x", per_sample=per_sample)]
    edges = []
    prev = "x"
    for i in range(n_tasks):
        tid, vid = f"t{i:02d}", f"v{i:02d}"
        nodes += [task(tid, flops=flops), value(vid, per_sample=per_sample)]
        edges += [(prev, tid), (tid, vid)]
        prev = vid
    return TaskGraph(nodes, edges, ["x"], [prev])


def tied_matmul_doc():
    """Three chained matmuls; w1/w3 enter through constant transposes."""
    nodes = [
        {"id": "x", "kind": "value", "value": {"bytes_per_sample": 64, "fixed_bytes": 0, "is_param": False}},
        {"id": "w1", "kind": "value", "value": {"fixed_bytes": 256, "bytes_per_sample": 0, "is_param": True}},
        {"id": "w2", "kind": "value", "value": {"fixed_bytes": 256, "bytes_per_sample": 0, "is_param": True}},
        {"id": "w3", "kind": "value", "value": {"fixed_bytes": 256, "bytes_per_sample": 0, "is_param": True}},
        {"id": "transpose1", "kind": "task", "task": {"op": "transpose", "flops_per_sample": 0.0, "attrs": {}}},
        {"id": "transpose2", "kind": "task", "task": {"op": "transpose", "flops_per_sample": 0.0, "attrs": {}}},
        {"id": "w1t", "kind": "value", "value": {"fixed_bytes": 256, "bytes_per_sample": 0, "is_param": False}},
        {"id": "w3t", "kind": "value", "value": {"fixed_bytes": 256, "bytes_per_sample": 0, "is_param": False}},
        {"id": "matmul1", "kind": "task", "task": {"op": "matmul", "flops_per_sample": 128.0, "attrs": {}}},
        {"id": "matmul2", "kind": "task", "task": {"op": "matmul", "flops_per_sample": 128.0, "attrs": {}}},
        {"id": "matmul3", "kind": "task", "task": {"op": "matmul", "flops_per_sample": 128.0, "attrs": {}}},
        {"id": "y1", "kind": "value", "value": {"bytes_per_sample": 64, "fixed_bytes": 0, "is_param": False}},
        {"id": "y2", "kind": "value", "value": {"bytes_per_sample": 64, "fixed_bytes": 0, "is_param": False}},
        {"id": "y3", "kind": "value", "value": {"bytes_per_sample": 64, "fixed_bytes": 0, "is_param": False}},
    ]
    edges = [["w1", "transpose1"], ["transpose1", "w1t"],
             ["x", "matmul1"], ["w1t", "matmul1"], ["matmul1", "y1"],
             ["y1", "matmul2"], ["w2", "matmul2"], ["matmul2", "y2"],
             ["w3", "transpose2"], ["transpose2", "w3t"],
             ["y2", "matmul3"], ["w3t", "matmul3"], ["matmul3", "y3"]]
    return {"nodes": nodes, "edges": edges, "inputs": ["x"], "outputs": ["y3"]}


def random_layered_graph(rng: random.Random, n_layers=None, branch=2) -> TaskGraph:
    """Random valid DAG: layered tasks with skip edges, params, one input."""
    n_layers = n_layers or rng.randint(2, 8)
    nodes = [value("in", per_sample=rng.randint(1, 64) * 4)]
    edges = []
    produced = ["in"]
    for i in range(n_layers):
        for j in range(rng.randint(1, branch)):
            tid = f"t{i:02d}_{j}"
            vid = f"{tid}.out"
            nodes.append(task(tid, flops=float(rng.randint(1, 1000))))
            nodes.append(value(vid, per_sample=rng.randint(0, 64) * 4,
                               fixed=rng.randint(0, 16) * 4))
            # always consume something already produced to stay connected
            k = rng.randint(1, min(2, len(produced)))
            for src in rng.sample(produced, k):
                edges.append((src, tid))
            if rng.random() < 0.5:
                wid = f"{tid}.w"
                nodes.append(value(wid, fixed=rng.randint(1, 256) * 4, param=True))
                edges.append((wid, tid))
            edges.append((tid, vid))
            produced.append(vid)
    return TaskGraph(nodes, edges, ["in"], [produced[-1]])
