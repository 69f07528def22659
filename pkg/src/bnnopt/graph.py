"""Minimal dense tensor graph with reverse-mode differentiation.

Everything runs on float64 numpy arrays in row-major order. A Graph is an
ordered list of operation records (already in topological order: a node may
only consume earlier nodes) over three parameter stores:

* real parameters      -- plain arrays, trained with Adam;
* binary parameters    -- +-1 weights with flip-optimizer state;
* latent parameters    -- real proxies binarized on the forward pass.

Supported ops: input, dense (no bias; normalization shifts play that
role), conv2d (direct, explicit stride/padding), batch_norm, layer_norm,
sign, identity, flatten. The loss head is softmax cross-entropy or squared
hinge. ``forward`` caches activations; ``backward`` returns mean gradients
over the batch for every parameter, applying the straight-through rule to
binary and latent weights.

A graph with its cache is confined to one thread during a forward/backward
pair; the arrays it returns are never aliased into the cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binarize import SteConfig, sign_binarize, ste_backward
from .errors import (
    DegenerateBatchError,
    GraphStateError,
    NumericError,
    ShapeError,
)
from .optim import BinaryParam, LatentWeight

_OPS = ("input", "dense", "conv2d", "batch_norm", "layer_norm", "sign", "identity", "flatten")
_LOSSES = ("cross_entropy", "squared_hinge")

#: default variance floor inside normalization
NORM_EPS = 1e-5

#: decay of the batch-norm running statistics used at eval time
RUNNING_MOMENTUM = 0.9


@dataclass(frozen=True)
class LossValue:
    value: float
    batch_size: int


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    params: tuple[str, ...]
    attrs: dict = field(default_factory=dict)


class Graph:
    def __init__(
        self,
        input_shape,
        num_classes: int,
        loss: str = "cross_entropy",
        weight_ste: SteConfig = SteConfig(),
        activation_ste: SteConfig | None = None,
    ):
        if loss not in _LOSSES:
            raise ShapeError(f"unknown loss {loss!r}, expected one of {_LOSSES}")
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.loss_kind = loss
        self.weight_ste = weight_ste
        self.activation_ste = activation_ste or weight_ste
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.binary_params: dict[str, BinaryParam] = {}
        self.latent_params: dict[str, LatentWeight] = {}
        # per-node mutable state (batch-norm running statistics)
        self.node_state: dict[int, dict] = {}
        self._cache = None

    # ------------------------------------------------------------------
    # construction

    def add_real_param(self, name: str, value) -> None:
        self._check_fresh_param(name)
        self.params[name] = np.asarray(value, dtype=np.float64)

    def add_binary_param(self, name: str, param: BinaryParam) -> None:
        self._check_fresh_param(name)
        self.binary_params[name] = param

    def add_latent_param(self, name: str, param: LatentWeight) -> None:
        self._check_fresh_param(name)
        self.latent_params[name] = param

    def _check_fresh_param(self, name):
        if name in self.params or name in self.binary_params or name in self.latent_params:
            raise ShapeError(f"parameter {name!r} registered twice")

    def add_node(self, op: str, inputs=(), params=(), **attrs) -> int:
        if op not in _OPS:
            raise ShapeError(f"unknown op {op!r}")
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise ShapeError(f"node {nid} ({op}): input id {i} is not an earlier node")
        for p in params:
            if p not in self.params and p not in self.binary_params and p not in self.latent_params:
                raise ShapeError(f"node {nid} ({op}): unknown parameter {p!r}")
        self.nodes.append(Node(op=op, inputs=tuple(inputs), params=tuple(params), attrs=attrs))
        if op == "batch_norm":
            size = self.params[params[0]].shape[0]
            self.node_state[nid] = {
                "running_mean": np.zeros(size),
                "running_var": np.ones(size),
            }
        return nid

    def weight_kind(self, name: str) -> str:
        if name in self.params:
            return "real"
        if name in self.binary_params:
            return "binary"
        return "latent"

    def effective_weight(self, name: str) -> np.ndarray:
        """The tensor the forward pass multiplies by."""
        kind = self.weight_kind(name)
        if kind == "real":
            return self.params[name]
        if kind == "binary":
            return self.binary_params[name].w
        return sign_binarize(self.latent_params[name].w_latent)

    def _node_label(self, nid: int) -> str:
        node = self.nodes[nid]
        if node.params:
            return f"node {nid} ({node.op} {node.params[0]!r})"
        return f"node {nid} ({node.op})"

    # ------------------------------------------------------------------
    # execution

    def run_nodes(self, x, training: bool):
        """Evaluate every node; returns (activations, aux caches)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"node 0 (input): batch shape {x.shape} does not end in "
                f"declared input shape {self.input_shape}"
            )
        acts: list[np.ndarray] = []
        aux: list = []
        for nid, node in enumerate(self.nodes):
            ins = [acts[i] for i in node.inputs]
            try:
                out, cache = _FORWARD[node.op](self, nid, node, ins, x, training)
            except (ShapeError, DegenerateBatchError) as exc:
                raise type(exc)(f"{self._node_label(nid)}: {exc}") from None
            if not np.isfinite(out).all():
                raise NumericError(f"{self._node_label(nid)}: non-finite activation")
            acts.append(out)
            aux.append(cache)
        return acts, aux

    def logits(self, x, training: bool = False) -> np.ndarray:
        acts, _ = self.run_nodes(x, training)
        return acts[-1]


def forward(graph: Graph, x, labels, training: bool = True) -> LossValue:
    """Run the graph on a batch and return the mean loss.

    Caches activations on the graph for a following backward() call.
    """
    x = np.asarray(x, dtype=np.float64)
    acts, aux = graph.run_nodes(x, training)
    logits = acts[-1]
    if logits.ndim != 2 or logits.shape[1] != graph.num_classes:
        raise ShapeError(
            f"loss head: expected logits (batch, {graph.num_classes}), got {logits.shape}"
        )
    y = _as_indices(labels, logits.shape)
    if graph.loss_kind == "cross_entropy":
        loss, dlogits = _softmax_ce(logits, y)
    else:
        loss, dlogits = _squared_hinge(logits, y)
    if not np.isfinite(loss):
        raise NumericError("loss head: non-finite loss")
    graph._cache = {
        "x": x,
        "labels": y,
        "acts": acts,
        "aux": aux,
        "training": training,
        "dlogits": dlogits,
    }
    return LossValue(value=float(loss), batch_size=x.shape[0])


def backward(graph: Graph, loss: LossValue | None = None) -> dict[str, np.ndarray]:
    """Mean gradient over the batch for every parameter.

    Binary and latent parameters receive the straight-through pseudo-
    gradient: the gradient w.r.t. the binarized weight, masked where the
    pre-binarization magnitude exceeds the clip threshold.
    """
    if graph._cache is None:
        raise GraphStateError("backward called before forward")
    cache = graph._cache
    acts, aux = cache["acts"], cache["aux"]
    adjoints: list = [None] * len(graph.nodes)
    adjoints[-1] = cache["dlogits"]
    grads: dict[str, np.ndarray] = {}
    for nid in range(len(graph.nodes) - 1, -1, -1):
        d_out = adjoints[nid]
        if d_out is None:
            continue
        node = graph.nodes[nid]
        ins = [acts[i] for i in node.inputs]
        d_ins, param_grads = _BACKWARD[node.op](graph, nid, node, ins, d_out, aux[nid], cache)
        for i, d in zip(node.inputs, d_ins):
            adjoints[i] = d if adjoints[i] is None else adjoints[i] + d
        for name, g in param_grads.items():
            grads[name] = grads.get(name, 0.0) + g
    for name, g in grads.items():
        kind = graph.weight_kind(name)
        if kind == "binary":
            g = ste_backward(g, graph.binary_params[name].w, graph.weight_ste)
        elif kind == "latent":
            g = ste_backward(g, graph.latent_params[name].w_latent, graph.weight_ste)
        if not np.isfinite(g).all():
            raise NumericError(f"gradient of {name!r}: non-finite values")
        grads[name] = g
    return grads


# ----------------------------------------------------------------------
# loss heads


def _as_indices(labels, logits_shape) -> np.ndarray:
    n, c = logits_shape
    y = np.asarray(labels)
    if y.ndim == 2:
        if y.shape != (n, c) or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
            raise ShapeError(f"labels: expected one-hot rows of shape {(n, c)}")
        y = y.argmax(axis=1)
    y = y.astype(np.int64)
    if y.shape != (n,):
        raise ShapeError(f"labels: expected {n} class indices, got shape {y.shape}")
    if y.min() < 0 or y.max() >= c:
        raise ShapeError(f"labels: class index outside [0, {c})")
    return y


def _softmax_ce(logits, y):
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), y].mean()
    probs = np.exp(logp)
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


def _squared_hinge(logits, y):
    n, c = logits.shape
    t = -np.ones((n, c))
    t[np.arange(n), y] = 1.0
    margin = 1.0 - t * logits
    active = np.maximum(margin, 0.0)
    loss = np.square(active).sum(axis=1).mean()
    dlogits = -2.0 * t * active / n
    return loss, dlogits


# ----------------------------------------------------------------------
# op forward/backward pairs
#
# Each forward returns (output, cache); each backward returns
# (list of input adjoints, dict of parameter gradients).


def _fwd_input(graph, nid, node, ins, x, training):
    return x, None


def _bwd_input(graph, nid, node, ins, d_out, cache, ctx):
    return [], {}


def _fwd_identity(graph, nid, node, ins, x, training):
    return ins[0], None


def _bwd_identity(graph, nid, node, ins, d_out, cache, ctx):
    return [d_out], {}


def _fwd_flatten(graph, nid, node, ins, x, training):
    a = ins[0]
    return a.reshape(a.shape[0], -1), a.shape


def _bwd_flatten(graph, nid, node, ins, d_out, cache, ctx):
    return [d_out.reshape(cache)], {}


def _fwd_dense(graph, nid, node, ins, x, training):
    a = ins[0]
    w = graph.effective_weight(node.params[0])
    if a.ndim != 2 or a.shape[1] != w.shape[0]:
        raise ShapeError(f"input {a.shape} incompatible with weight {w.shape}")
    return a @ w, w


def _bwd_dense(graph, nid, node, ins, d_out, cache, ctx):
    a, w = ins[0], cache
    return [d_out @ w.T], {node.params[0]: a.T @ d_out}


def _fwd_sign(graph, nid, node, ins, x, training):
    a = ins[0]
    return sign_binarize(a), a


def _bwd_sign(graph, nid, node, ins, d_out, cache, ctx):
    return [ste_backward(d_out, cache, graph.activation_ste)], {}


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with "
            f"stride={stride} padding={padding}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, ho * wo, c * kh * kw))
    pos = 0
    for oy in range(ho):
        ys = oy * stride
        for ox in range(wo):
            xs = ox * stride
            cols[:, pos, :] = xp[:, :, ys : ys + kh, xs : xs + kw].reshape(n, -1)
            pos += 1
    return cols, ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    pos = 0
    for oy in range(ho):
        ys = oy * stride
        for ox in range(wo):
            xs = ox * stride
            dxp[:, :, ys : ys + kh, xs : xs + kw] += dcols[:, pos, :].reshape(n, c, kh, kw)
            pos += 1
    if padding:
        return dxp[:, :, padding : h + padding, padding : w + padding]
    return dxp


def _fwd_conv2d(graph, nid, node, ins, x, training):
    a = ins[0]
    w = graph.effective_weight(node.params[0])
    if a.ndim != 4 or w.ndim != 4 or a.shape[1] != w.shape[1]:
        raise ShapeError(f"input {a.shape} incompatible with kernels {w.shape}")
    stride = node.attrs.get("stride", 1)
    padding = node.attrs.get("padding", 0)
    f, _, kh, kw = w.shape
    cols, ho, wo = _im2col(a, kh, kw, stride, padding)
    out = (cols @ w.reshape(f, -1).T).transpose(0, 2, 1).reshape(a.shape[0], f, ho, wo)
    return out, (cols, w, ho, wo)


def _bwd_conv2d(graph, nid, node, ins, d_out, cache, ctx):
    a = ins[0]
    cols, w, ho, wo = cache
    stride = node.attrs.get("stride", 1)
    padding = node.attrs.get("padding", 0)
    f, _, kh, kw = w.shape
    n = a.shape[0]
    dyf = d_out.reshape(n, f, ho * wo).transpose(0, 2, 1)  # (n, P, f)
    dw = np.einsum("npf,npl->fl", dyf, cols).reshape(w.shape)
    dcols = dyf @ w.reshape(f, -1)
    dx = _col2im(dcols, a.shape, kh, kw, stride, padding, ho, wo)
    return [dx], {node.params[0]: dw}


def _norm_axes(x, mode):
    if x.ndim == 2:
        return (0,) if mode == "batch" else (1,)
    if x.ndim == 4:
        return (0, 2, 3) if mode == "batch" else (1, 2, 3)
    raise ShapeError(f"normalization expects a 2-D or 4-D tensor, got shape {x.shape}")


def _affine_shape(x):
    # scale/shift are per feature (2-D input) or per channel (4-D input)
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def _fwd_norm(graph, nid, node, ins, x, training, mode):
    a = ins[0]
    axes = _norm_axes(a, mode)
    eps = node.attrs.get("eps", NORM_EPS)
    scale = graph.params[node.params[0]].reshape(_affine_shape(a))
    shift = graph.params[node.params[1]].reshape(_affine_shape(a))
    if mode == "batch" and not training:
        state = graph.node_state[nid]
        shape = _affine_shape(a)
        mean = state["running_mean"].reshape(shape)
        inv = 1.0 / np.sqrt(state["running_var"].reshape(shape) + eps)
        xhat = (a - mean) * inv
        return scale * xhat + shift, (xhat, inv, axes, False)
    if mode == "batch":
        if a.shape[0] < 2:
            raise DegenerateBatchError("batch normalization needs a batch of at least 2 in training")
        state = graph.node_state[nid]
        mean_flat = a.mean(axis=axes)
        var_flat = a.var(axis=axes)  # biased: same formula training and eval
        state["running_mean"] = (
            RUNNING_MOMENTUM * state["running_mean"] + (1 - RUNNING_MOMENTUM) * mean_flat
        )
        state["running_var"] = (
            RUNNING_MOMENTUM * state["running_var"] + (1 - RUNNING_MOMENTUM) * var_flat
        )
    mean = a.mean(axis=axes, keepdims=True)
    var = a.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a - mean) * inv
    return scale * xhat + shift, (xhat, inv, axes, True)


def _bwd_norm(graph, nid, node, ins, d_out, cache, ctx):
    a = ins[0]
    xhat, inv, axes, batch_stats = cache
    scale = graph.params[node.params[0]].reshape(_affine_shape(a))
    affine_axes = tuple(i for i in range(a.ndim) if i != 1) if a.ndim == 4 else (0,)
    dscale = (d_out * xhat).sum(axis=affine_axes)
    dshift = d_out.sum(axis=affine_axes)
    dxhat = d_out * scale
    if not batch_stats:
        dx = dxhat * inv
    else:
        count = np.prod([a.shape[i] for i in axes])
        centered = xhat / inv  # x - mean, reconstructed exactly
        dvar = (dxhat * centered * -0.5 * inv**3).sum(axis=axes, keepdims=True)
        dmean = (-dxhat * inv).sum(axis=axes, keepdims=True) + dvar * (
            -2.0 / count
        ) * centered.sum(axis=axes, keepdims=True)
        dx = dxhat * inv + dvar * 2.0 * centered / count + dmean / count
    return [dx], {node.params[0]: dscale, node.params[1]: dshift}


def _fwd_batch_norm(graph, nid, node, ins, x, training):
    return _fwd_norm(graph, nid, node, ins, x, training, "batch")


def _fwd_layer_norm(graph, nid, node, ins, x, training):
    return _fwd_norm(graph, nid, node, ins, x, training, "layer")


_FORWARD = {
    "input": _fwd_input,
    "identity": _fwd_identity,
    "flatten": _fwd_flatten,
    "dense": _fwd_dense,
    "sign": _fwd_sign,
    "conv2d": _fwd_conv2d,
    "batch_norm": _fwd_batch_norm,
    "layer_norm": _fwd_layer_norm,
}

_BACKWARD = {
    "input": _bwd_input,
    "identity": _bwd_identity,
    "flatten": _bwd_flatten,
    "dense": _bwd_dense,
    "sign": _bwd_sign,
    "conv2d": _bwd_conv2d,
    "batch_norm": _bwd_norm,
    "layer_norm": _bwd_norm,
}


# ----------------------------------------------------------------------
# standalone normalization and gradient checking


def normalize(x, mode, scale, shift, eps: float = NORM_EPS) -> np.ndarray:
    """Functional normalization with training-time (batch) statistics.

    batch mode normalizes each feature over the batch axis; layer mode
    normalizes each sample over its feature axes. Output has mean ~0 and
    variance ~1 along the normalized axes before scale/shift.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode not in ("batch", "layer"):
        raise ShapeError(f"normalize: mode must be 'batch' or 'layer', got {mode!r}")
    if mode == "batch" and x.shape[0] < 2:
        raise DegenerateBatchError("batch normalization needs a batch of at least 2 in training")
    axes = _norm_axes(x, mode)
    scale = np.asarray(scale, dtype=np.float64).reshape(_affine_shape(x))
    shift = np.asarray(shift, dtype=np.float64).reshape(_affine_shape(x))
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return scale * (x - mean) / np.sqrt(var + eps) + shift


def grad_check(graph: Graph, x, labels, h: float = 1e-3) -> float:
    """Max scale-guarded difference between analytic and numeric gradients.

    Central finite differences with step h over every element of every
    real parameter. Per parameter the error is
    max|analytic - numeric| / max(1, max|analytic|, max|numeric|).
    The graph must hold only real parameters; running statistics are
    restored afterwards so the check has no side effects.
    """
    if graph.binary_params or graph.latent_params:
        raise GraphStateError("grad_check requires a graph with only real-valued parameters")
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    saved_state = {
        nid: {k: v.copy() for k, v in st.items()} for nid, st in graph.node_state.items()
    }
    try:
        forward(graph, x, labels, training=True)
        analytic = backward(graph)
        worst = 0.0
        for name, w in graph.params.items():
            numeric = np.zeros_like(w)
            flat = w.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = forward(graph, x, labels, training=True).value
                flat[i] = orig - h
                lm = forward(graph, x, labels, training=True).value
                flat[i] = orig
                num_flat[i] = (lp - lm) / (2.0 * h)
            a = analytic.get(name, np.zeros_like(w))
            denom = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
            worst = max(worst, float(np.abs(a - numeric).max(initial=0.0)) / denom)
        return worst
    finally:
        for nid, st in saved_state.items():
            graph.node_state[nid] = st
        graph._cache = None
