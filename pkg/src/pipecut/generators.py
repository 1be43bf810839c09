"""Synthetic model graph builders.

Both builders emit graphs at task granularity (one task per fused op) with
per-sample FLOP counts and activation sizes, so the partitioning passes see
realistic imbalance: the transformer's vocabulary projection dominates late
layers, the CNN's early layers carry large spatial activations.
"""

from __future__ import annotations

from .graph import Node, TaskGraph, TaskInfo, ValueInfo

FLOAT_BYTES = 4


class _Builder:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.edges: list[tuple[str, str]] = []

    def value(self, vid: str, *, fixed: int = 0, per_sample: int = 0, param: bool = False) -> str:
        self.nodes.append(Node(vid, value=ValueInfo(
            fixed_bytes=fixed, bytes_per_sample=per_sample, is_param=param)))
        return vid

    def param(self, vid: str, elements: int) -> str:
        return self.value(vid, fixed=elements * FLOAT_BYTES, param=True)

    def task(self, tid: str, op: str, inputs: list[str], flops: float = 0.0,
             attrs: dict | None = None) -> str:
        self.nodes.append(Node(tid, task=TaskInfo(
            op=op, flops_per_sample=flops, attrs=attrs or {})))
        for vid in inputs:
            self.edges.append((vid, tid))
        return tid

    def out(self, tid: str, vid: str, *, fixed: int = 0, per_sample: int = 0) -> str:
        self.value(vid, fixed=fixed, per_sample=per_sample)
        self.edges.append((tid, vid))
        return vid

    def build(self, inputs: list[str], outputs: list[str]) -> TaskGraph:
        return TaskGraph(self.nodes, self.edges, inputs, outputs)


def gen_bert_like(hidden: int, layers: int, seq_len: int, vocab: int) -> TaskGraph:
    """Transformer encoder with a tied vocabulary projection head.

    Parameter total is embeddings + layers * (12*hidden^2 + 13*hidden) plus
    the prediction head transform and vocabulary bias. The projection reuses
    the embedding table through a transpose, so the table value has two
    consumers on opposite ends of the graph.
    """
    if hidden < 1 or layers < 1 or seq_len < 1 or vocab < 1:
        raise ValueError("all generator dimensions must be positive")
    h, s, v = hidden, seq_len, vocab
    heads = max(1, h // 64)
    b = _Builder()

    ids = b.value("input_ids", per_sample=s * 8)
    # token + position + segment tables and the embedding layernorm
    emb_table = b.param("embedding.w", h * (v + s + 2) + 2 * h)
    emb = b.task("embedding", "embedding", [ids, emb_table], flops=float(s * h))
    x = b.out(emb, "embedding.out", per_sample=s * h * FLOAT_BYTES)

    for i in range(layers):
        p = f"L{i:03d}"
        w = b.param(f"{p}.attn_qkv.w", 3 * h * h + 3 * h)
        t = b.task(f"{p}.attn_qkv", "matmul", [x, w], flops=6.0 * s * h * h)
        qkv = b.out(t, f"{p}.attn_qkv.out", per_sample=3 * s * h * FLOAT_BYTES)

        t = b.task(f"{p}.attn_scores", "matmul", [qkv], flops=2.0 * s * s * h)
        scores = b.out(t, f"{p}.attn_scores.out", per_sample=s * s * heads * FLOAT_BYTES)

        t = b.task(f"{p}.attn_softmax", "softmax", [scores], flops=5.0 * s * s * heads)
        probs = b.out(t, f"{p}.attn_softmax.out", per_sample=s * s * heads * FLOAT_BYTES)

        t = b.task(f"{p}.attn_context", "matmul", [probs, qkv], flops=2.0 * s * s * h)
        ctx = b.out(t, f"{p}.attn_context.out", per_sample=s * h * FLOAT_BYTES)

        w = b.param(f"{p}.attn_proj.w", h * h + h)
        t = b.task(f"{p}.attn_proj", "matmul", [ctx, w], flops=2.0 * s * h * h)
        proj = b.out(t, f"{p}.attn_proj.out", per_sample=s * h * FLOAT_BYTES)

        w = b.param(f"{p}.attn_norm.w", 2 * h)
        t = b.task(f"{p}.attn_norm", "add_layernorm", [proj, x, w], flops=10.0 * s * h)
        attn = b.out(t, f"{p}.attn_norm.out", per_sample=s * h * FLOAT_BYTES)

        w = b.param(f"{p}.mlp_in.w", 4 * h * h + 4 * h)
        t = b.task(f"{p}.mlp_in", "matmul", [attn, w], flops=8.0 * s * h * h)
        mid = b.out(t, f"{p}.mlp_in.out", per_sample=4 * s * h * FLOAT_BYTES)

        t = b.task(f"{p}.mlp_gelu", "gelu", [mid], flops=32.0 * s * h)
        act = b.out(t, f"{p}.mlp_gelu.out", per_sample=4 * s * h * FLOAT_BYTES)

        w = b.param(f"{p}.mlp_out.w", 4 * h * h + h)
        t = b.task(f"{p}.mlp_out", "matmul", [act, w], flops=8.0 * s * h * h)
        down = b.out(t, f"{p}.mlp_out.out", per_sample=s * h * FLOAT_BYTES)

        w = b.param(f"{p}.mlp_norm.w", 2 * h)
        t = b.task(f"{p}.mlp_norm", "add_layernorm", [down, attn, w], flops=10.0 * s * h)
        x = b.out(t, f"{p}.mlp_norm.out", per_sample=s * h * FLOAT_BYTES)

    w = b.param("head.transform.w", h * h + 3 * h)
    t = b.task("head.transform", "matmul", [x, w], flops=2.0 * s * h * h + 10.0 * s * h)
    x = b.out(t, "head.transform.out", per_sample=s * h * FLOAT_BYTES)

    # tied decoder: transpose of the embedding table, recomputable constant
    t = b.task("head.transpose", "transpose", [emb_table])
    table_t = b.out(t, "head.transpose.out", fixed=v * h * FLOAT_BYTES)
    bias = b.param("head.vocab_bias.w", v)
    t = b.task("head.vocab_proj", "matmul", [x, table_t, bias],
               flops=2.0 * s * h * v + float(s * v))
    logits = b.out(t, "head.vocab_proj.out", per_sample=s * v * FLOAT_BYTES)

    return b.build([ids], [logits])


_RESNET_BLOCKS = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}
_IMAGE_SIZE = 224


def gen_resnet_like(layers: int, width_factor: int = 1) -> TaskGraph:
    """Bottleneck residual CNN; filter counts scale with width_factor.

    Convolution parameters grow quadratically with width, the classifier
    linearly, matching the usual widened-ResNet construction.
    """
    if layers not in _RESNET_BLOCKS:
        raise ValueError(f"layers must be one of {sorted(_RESNET_BLOCKS)}")
    if width_factor < 1:
        raise ValueError("width_factor must be a positive integer")
    w = width_factor
    b = _Builder()

    def conv(tid: str, x: str, cin: int, cout: int, k: int, spatial: int) -> str:
        wid = b.param(f"{tid}.w", k * k * cin * cout + 2 * cout)
        t = b.task(tid, "conv", [x, wid],
                   flops=2.0 * k * k * cin * cout * spatial * spatial,
                   attrs={"k": k, "cin": cin, "cout": cout, "spatial": spatial})
        return b.out(t, f"{tid}.out", per_sample=cout * spatial * spatial * FLOAT_BYTES)

    image = b.value("image", per_sample=3 * _IMAGE_SIZE * _IMAGE_SIZE * FLOAT_BYTES)
    x = conv("stem.conv", image, 3, 64 * w, 7, _IMAGE_SIZE // 2)
    t = b.task("stem.pool", "maxpool", [x], flops=9.0 * 64 * w * 56 * 56)
    x = b.out(t, "stem.pool.out", per_sample=64 * w * 56 * 56 * FLOAT_BYTES)

    in_c = 64 * w
    for stage, blocks in enumerate(_RESNET_BLOCKS[layers]):
        mid = 64 * w * (2 ** stage)
        out_c = 4 * mid
        spatial = 56 // (2 ** stage)
        for blk in range(blocks):
            p = f"s{stage}.b{blk:02d}"
            stride = 2 if (stage > 0 and blk == 0) else 1
            identity = x
            y = conv(f"{p}.conv1", x, in_c, mid, 1, spatial * stride)
            y = conv(f"{p}.conv2", y, mid, mid, 3, spatial)
            y = conv(f"{p}.conv3", y, mid, out_c, 1, spatial)
            if stride != 1 or in_c != out_c:
                identity = conv(f"{p}.downsample", x, in_c, out_c, 1, spatial)
            t = b.task(f"{p}.add", "add_relu", [y, identity],
                       flops=float(out_c * spatial * spatial))
            x = b.out(t, f"{p}.add.out", per_sample=out_c * spatial * spatial * FLOAT_BYTES)
            in_c = out_c

    t = b.task("head.pool", "avgpool", [x], flops=2.0 * in_c * 7 * 7)
    x = b.out(t, "head.pool.out", per_sample=in_c * FLOAT_BYTES)
    wid = b.param("head.fc.w", in_c * 1000 + 1000)
    t = b.task("head.fc", "linear", [x, wid], flops=2.0 * in_c * 1000)
    logits = b.out(t, "head.fc.out", per_sample=1000 * FLOAT_BYTES)

    return b.build([image], [logits])
