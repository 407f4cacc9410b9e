"""Example graph constructors used by the bundled corpus and the test suite."""
from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import gradients
from .ir import Graph, TensorValue


@dataclass
class TwoLayerNet:
    """Two fully connected layers: y = relu(x.w + bias).v (bias optional)."""

    graph: Graph
    x: str
    w: str
    v: str
    y: str
    bias: str | None = None
    dy: str | None = None
    loss: str | None = None

    @property
    def params(self) -> list[str]:
        return [p for p in (self.w, self.bias, self.v) if p is not None]


def two_layer_net(b: int = 8, d_io: int = 8, d_h: int = 16, with_bias: bool = True) -> TwoLayerNet:
    g = Graph()
    x = g.add_input([("batch", b), ("io", d_io)], "x")
    w = g.add_variable([("io", d_io), ("hidden", d_h)], "w")
    bias = g.add_variable([("hidden", d_h)], "bias") if with_bias else None
    v = g.add_variable([("hidden", d_h), ("io", d_io)], "v")
    xw = g.add_einsum([x, w], [("batch", b), ("hidden", d_h)], "xw")
    pre = g.add_componentwise("add", [xw, bias], "pre") if with_bias else xw
    h = g.add_componentwise("relu", [pre], "h")
    y = g.add_einsum([h, v], [("batch", b), ("io", d_io)], "y")
    return TwoLayerNet(g, x, w, v, y, bias=bias)


def with_seed_adjoint(net: TwoLayerNet) -> TwoLayerNet:
    """Add an output-adjoint input dy and the scalar loss sum(y * dy).

    Differentiating this loss makes dy the adjoint of y, so the backward
    pass matches the textbook two-layer backpropagation exactly.
    """
    g = net.graph
    shape = g.node(net.y).output_shape
    dy = g.add_input(shape, "dy")
    prod = g.add_componentwise("mul", [net.y, dy], "y_dy")
    loss = g.add_reduce(prod, list(shape.names), "sum", "loss")
    net.dy = dy
    net.loss = loss
    return net


@dataclass
class TrainingStep:
    """One SGD step: squared-error loss, gradients, and updated parameters."""

    graph: Graph
    net: TwoLayerNet
    target: str
    loss: str
    grads: dict[str, str]
    updates: dict[str, str] = field(default_factory=dict)


def training_step(b: int = 8, d_io: int = 8, d_h: int = 16,
                  learning_rate: float = 0.05) -> TrainingStep:
    net = two_layer_net(b, d_io, d_h)
    g = net.graph
    shape = g.node(net.y).output_shape
    target = g.add_input(shape, "target")
    diff = g.add_componentwise("sub", [net.y, target], "diff")
    sq = g.add_componentwise("mul", [diff, diff], "sq")
    loss = g.add_reduce(sq, list(shape.names), "sum", "loss")
    extended, grad_map = gradients(g, loss, net.params)
    lr = extended.add_constant(TensorValue.scalar(learning_rate), "lr")
    updates = {}
    for p in net.params:
        scaled = extended.add_componentwise("mul", [lr, grad_map[p]], f"{p}_scaled_grad")
        updates[p] = extended.add_componentwise("sub", [p, scaled], f"{p}_next")
    net.graph = extended
    return TrainingStep(extended, net, target, loss, grad_map, updates)


@dataclass
class TransformerBlock:
    """Multi-head self-attention plus a feed-forward layer and vocab logits."""

    graph: Graph
    x: str
    loss: str
    vocab_logits: str
    params: list[str]


def transformer_block(b: int = 2, length: int = 2, d_model: int = 8, heads: int = 4,
                      d_k: int = 2, d_ff: int = 16, vocab: int = 8) -> TransformerBlock:
    g = Graph()
    x = g.add_input([("batch", b), ("length", length), ("d_model", d_model)], "x")
    wq = g.add_variable([("heads", heads), ("d_model", d_model), ("d_k", d_k)], "wq")
    wk = g.add_variable([("heads", heads), ("d_model", d_model), ("d_k", d_k)], "wk")
    wv = g.add_variable([("heads", heads), ("d_model", d_model), ("d_k", d_k)], "wv")
    wo = g.add_variable([("heads", heads), ("d_k", d_k), ("d_model", d_model)], "wo")

    qkv_shape = [("batch", b), ("length", length), ("heads", heads), ("d_k", d_k)]
    q = g.add_einsum([x, wq], qkv_shape, "q")
    k = g.add_einsum([x, wk], qkv_shape, "k")
    v = g.add_einsum([x, wv], qkv_shape, "v")
    # Key/value positions get their own dimension name so attention can
    # relate every query position to every context position.
    ctx_shape = [("batch", b), ("length_kv", length), ("heads", heads), ("d_k", d_k)]
    k_ctx = g.add_reshape(k, ctx_shape, "k_ctx")
    v_ctx = g.add_reshape(v, ctx_shape, "v_ctx")

    logits = g.add_einsum(
        [q, k_ctx],
        [("batch", b), ("heads", heads), ("length", length), ("length_kv", length)],
        "attn_logits",
    )
    e = g.add_componentwise("exp", [logits], "attn_exp")
    z = g.add_reduce(e, ["length_kv"], "sum", "attn_norm")
    attn_w = g.add_componentwise("div", [e, z], "attn_weights")
    ctx = g.add_einsum([attn_w, v_ctx], qkv_shape, "attn_ctx")
    attn_out = g.add_einsum([ctx, wo], [("batch", b), ("length", length), ("d_model", d_model)], "attn_out")
    res1 = g.add_componentwise("add", [x, attn_out], "res1")

    w1 = g.add_variable([("d_model", d_model), ("d_ff", d_ff)], "w1")
    w2 = g.add_variable([("d_ff", d_ff), ("d_model", d_model)], "w2")
    ff_pre = g.add_einsum([res1, w1], [("batch", b), ("length", length), ("d_ff", d_ff)], "ff_pre")
    ff_act = g.add_componentwise("relu", [ff_pre], "ff_act")
    ff_out = g.add_einsum([ff_act, w2], [("batch", b), ("length", length), ("d_model", d_model)], "ff_out")
    res2 = g.add_componentwise("add", [res1, ff_out], "res2")

    emb = g.add_variable([("vocab", vocab), ("d_model", d_model)], "emb")
    vocab_logits = g.add_einsum(
        [res2, emb], [("batch", b), ("length", length), ("vocab", vocab)], "vocab_logits"
    )
    sq = g.add_componentwise("mul", [vocab_logits, vocab_logits], "sq")
    loss = g.add_reduce(sq, ["batch", "length", "vocab"], "sum", "loss")
    return TransformerBlock(
        g, x, loss, vocab_logits, [wq, wk, wv, wo, w1, w2, emb]
    )


def reshape_gather_graph(n: int = 8):
    """A split dimension renamed to an unsplit one: lowers to one allgather."""
    g = Graph()
    x = g.add_input([("batch", n)], "x")
    y = g.add_reshape(x, [("examples", n)], "y")
    return g, x, y


def reshape_slice_graph(n: int = 8):
    """An unsplit dimension renamed to a split one: lowers to one local slice."""
    g = Graph()
    x = g.add_input([("examples", n)], "x")
    y = g.add_reshape(x, [("batch", n)], "y")
    return g, x, y


def reshape_exchange_graph(rows: int = 4, cols: int = 6):
    """Renames that move the split from one axis to the other on the same
    mesh dimension: lowers to one alltoall."""
    g = Graph()
    x = g.add_input([("row", rows), ("col", cols)], "x")
    y = g.add_reshape(x, [("row_out", rows), ("col_out", cols)], "y")
    return g, x, y
