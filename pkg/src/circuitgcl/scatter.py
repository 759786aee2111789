"""Contrastive pre-training by representation scattering.

Two mean-aggregation message-passing encoders look at the same graph: an
online encoder trained by gradient descent and a target encoder updated as
an exponential moving average of the online weights.  Normalized target
embeddings define a center on the hypersphere; the online branch is pushed
away from that center (scattering) while a small predictor keeps it aligned
with the target rows (alignment).  No negative pairs and no augmentations.

Node features enter as a learned 3-row lookup of the node type code.  An
optional learned degree row adds e_deg * log1p(degree) to the input so that
structurally different nodes of the same type can separate; mean
aggregation alone is count-blind and collapses them otherwise.  The flag
defaults to on and is part of the architecture descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from . import autodiff as ad
from ._errors import (
    CheckpointError,
    ContractError,
    DimensionError,
    GraphFormatError,
    NumericError,
    TrainingError,
)

_CKPT_MAGIC = b"CGLP"
_CKPT_VERSION = 1
_ACTIVATIONS = ("tanh", "prelu")


@dataclass
class LayerParams:
    w_self: ad.Tensor
    w_neigh: ad.Tensor
    slope: ad.Tensor = None

    def tensors(self):
        out = [self.w_self, self.w_neigh]
        if self.slope is not None:
            out.append(self.slope)
        return out


@dataclass
class EncoderParams:
    """Weights of one message-passing encoder."""

    type_table: ad.Tensor
    deg_row: ad.Tensor
    layers: list
    hidden_dim: int
    activation: str = "tanh"
    dropout_rate: float = 0.0

    @property
    def n_layers(self):
        return len(self.layers)

    def parameters(self):
        out = [self.type_table]
        if self.deg_row is not None:
            out.append(self.deg_row)
        for layer in self.layers:
            out.extend(layer.tensors())
        return out

    def validate(self):
        h = self.hidden_dim
        if h < 1 or self.n_layers < 1:
            raise ContractError("encoder needs a positive width and depth")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must be in [0, 1)")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.type_table.shape != (3, h):
            raise ContractError("type table must have 3 rows at hidden width")
        if self.deg_row is not None and self.deg_row.shape != (1, h):
            raise ContractError("degree row must be 1 x hidden")
        for layer in self.layers:
            if layer.w_self.shape != (h, h) or layer.w_neigh.shape != (h, h):
                raise ContractError("layer weights must be hidden x hidden")
            if self.activation == "prelu" and layer.slope is None:
                raise ContractError("prelu layers need a slope")
        for t in self.parameters():
            if not np.isfinite(t.data).all():
                raise ContractError("encoder weights must be finite")
        return self

    def copy(self):
        def dup(t):
            return None if t is None else ad.Tensor(t.data.copy(), requires_grad=True)

        layers = [LayerParams(dup(l.w_self), dup(l.w_neigh), dup(l.slope))
                  for l in self.layers]
        return EncoderParams(dup(self.type_table), dup(self.deg_row), layers,
                             self.hidden_dim, self.activation, self.dropout_rate)

    def same_architecture(self, other):
        return (self.hidden_dim == other.hidden_dim
                and self.n_layers == other.n_layers
                and self.activation == other.activation
                and (self.deg_row is None) == (other.deg_row is None))


@dataclass
class PredictorParams:
    """Two-layer perceptron on top of the online encoder."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    slope: ad.Tensor = None

    def parameters(self):
        out = [self.w1, self.b1, self.w2, self.b2]
        if self.slope is not None:
            out.append(self.slope)
        return out


@dataclass
class EmbeddingMatrix:
    values: ad.Tensor
    normalized: bool = False

    @property
    def n(self):
        return self.values.rows

    @property
    def k(self):
        return self.values.cols

    @property
    def data(self):
        return self.values.data


@dataclass(frozen=True)
class PretrainConfig:
    ema_tau: float = 0.99
    scatter_weight: float = 1.0
    epochs: int = 50
    learning_rate: float = 1e-6
    eps: float = 1e-8
    seed: int = 0
    hidden_dim: int = 256
    n_layers: int = 4
    activation: str = "tanh"
    dropout_rate: float = 0.3
    degree_feature: bool = True
    ema_per_step: bool = False
    subgraph_threshold: int = 50000
    subgraph_hops: int = 2
    subgraph_fanout: int = 10

    def __post_init__(self):
        if not 0.0 <= self.ema_tau <= 1.0:
            raise ContractError("ema_tau must lie in [0, 1]")
        if self.scatter_weight < 0:
            raise ContractError("scatter_weight must be nonnegative")
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.eps <= 0:
            raise ContractError("eps must be positive")
        if self.hidden_dim < 1 or self.n_layers < 1:
            raise ContractError("hidden_dim and n_layers must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must be in [0, 1)")
        if self.subgraph_threshold < 1:
            raise ContractError("subgraph_threshold must be positive")
        if self.subgraph_hops < 0 or self.subgraph_fanout < 1:
            raise ContractError("bad subgraph sampling bounds")


def _param(rng, rows, cols, scale):
    return ad.Tensor(rng.normal(0.0, scale, size=(rows, cols)), requires_grad=True)


def init_encoder(rng, hidden_dim, n_layers, activation="tanh", dropout_rate=0.0,
                 degree_feature=True):
    if activation not in _ACTIVATIONS:
        raise ContractError(f"unknown activation {activation!r}")
    h = int(hidden_dim)
    feat_scale = 1.0 / math.sqrt(h)
    table = _param(rng, 3, h, feat_scale)
    deg = _param(rng, 1, h, feat_scale) if degree_feature else None
    glorot = math.sqrt(6.0 / (2.0 * h))
    layers = []
    for _ in range(int(n_layers)):
        w_self = ad.Tensor(rng.uniform(-glorot, glorot, size=(h, h)),
                           requires_grad=True)
        w_neigh = ad.Tensor(rng.uniform(-glorot, glorot, size=(h, h)),
                            requires_grad=True)
        slope = (ad.Tensor([[0.25]], requires_grad=True)
                 if activation == "prelu" else None)
        layers.append(LayerParams(w_self, w_neigh, slope))
    return EncoderParams(table, deg, layers, h, activation,
                         float(dropout_rate)).validate()


def init_predictor(rng, hidden_dim, activation="tanh"):
    h = int(hidden_dim)
    glorot = math.sqrt(6.0 / (2.0 * h))
    w1 = ad.Tensor(rng.uniform(-glorot, glorot, size=(h, h)), requires_grad=True)
    w2 = ad.Tensor(rng.uniform(-glorot, glorot, size=(h, h)), requires_grad=True)
    b1 = ad.Tensor(np.zeros((1, h)), requires_grad=True)
    b2 = ad.Tensor(np.zeros((1, h)), requires_grad=True)
    slope = ad.Tensor([[0.25]], requires_grad=True) if activation == "prelu" else None
    return PredictorParams(w1, b1, w2, b2, slope)


def _activate(pre, activation, slope):
    if activation == "tanh":
        return ad.tanh(pre)
    return ad.prelu(pre, slope)


def encode(p, g, rng=None, training=False):
    """Run the message-passing stack over a HomoGraph or Subgraph.

    Every layer computes act(W_self . h + W_neigh . mean of neighbor h);
    isolated nodes receive a zero neighbor term through the zero row of the
    mean operator.  Dropout applies between layers only when training.
    """
    if g.n == 0:
        raise ContractError("cannot encode an empty graph")
    operator = g.mean_operator()
    h = ad.take_rows(p.type_table, np.asarray(g.types, dtype=np.int64))
    if p.deg_row is not None:
        feat = np.log1p(np.asarray(g.degrees, dtype=np.float64)).reshape(-1, 1)
        h = ad.add(h, ad.mul(ad.Tensor(feat), p.deg_row))
    for li, layer in enumerate(p.layers):
        pre = ad.add(ad.matmul(h, layer.w_self),
                     ad.spmm(operator, ad.matmul(h, layer.w_neigh)))
        h = _activate(pre, p.activation, layer.slope)
        last = li == len(p.layers) - 1
        if training and p.dropout_rate > 0.0 and not last:
            if rng is None:
                raise ContractError("training-mode dropout needs an rng")
            h = ad.dropout(h, p.dropout_rate, rng)
    return EmbeddingMatrix(h, normalized=False)


def predictor_forward(q, h):
    hidden = _activate(ad.add(ad.matmul(h, q.w1), q.b1),
                       "prelu" if q.slope is not None else "tanh", q.slope)
    return ad.add(ad.matmul(hidden, q.w2), q.b2)


def normalize_embeddings(e, eps=1e-8):
    return EmbeddingMatrix(ad.rowwise_l2_normalize(e.values, eps), normalized=True)


def scatter_center(h_norm):
    """Mean of the normalized rows, detached from any tape."""
    if not h_norm.normalized:
        raise ContractError("scatter_center expects normalized embeddings")
    if h_norm.n == 0:
        raise ContractError("cannot take the center of zero rows")
    return h_norm.data.mean(axis=0, keepdims=True)


def scattering_loss(h_norm, c):
    """-(1/N) sum of squared distances to the center; in [-4, 0] on the sphere."""
    if not h_norm.normalized:
        raise ContractError("scattering_loss expects normalized embeddings")
    center = np.asarray(c, dtype=np.float64).reshape(1, -1)
    if center.shape[1] != h_norm.k:
        raise DimensionError(f"center has {center.shape[1]} dims for {h_norm.k} columns")
    diff = ad.sub(h_norm.values, ad.Tensor(center))
    return ad.neg(ad.mean(ad.sum_rows(ad.pow_const(diff, 2))))


def _normalized_constant(e, eps):
    data = e.data
    if e.normalized:
        return data.copy()
    norms = np.sqrt((data * data).sum(axis=1, keepdims=True))
    return data / np.maximum(norms, eps)


def alignment_loss(z, h_target, eps=1e-8):
    """-(1/N) mean cosine between predictor rows and detached target rows."""
    if (z.n, z.k) != (h_target.n, h_target.k):
        raise DimensionError(f"alignment shapes differ: {z.values.shape} "
                             f"vs {h_target.values.shape}")
    zn = ad.rowwise_l2_normalize(z.values, eps)
    target = _normalized_constant(h_target, eps)
    cos = ad.sum_rows(ad.mul(zn, ad.Tensor(target)))
    return ad.neg(ad.mean(cos))


def ema_update(phi, theta, tau):
    """phi' = tau*phi + (1-tau)*theta, elementwise, architectures matching."""
    if not 0.0 <= tau <= 1.0:
        raise ContractError("tau must lie in [0, 1]")
    if not phi.same_architecture(theta):
        raise ContractError("EMA requires identical architectures")
    out = phi.copy()
    for p_new, p_old, t in zip(out.parameters(), phi.parameters(),
                               theta.parameters()):
        p_new.data[...] = tau * p_old.data + (1.0 - tau) * t.data
    return out


@dataclass
class PretrainResult:
    theta: EncoderParams
    embeddings: EmbeddingMatrix
    history: list = field(default_factory=list)
    predictor: PredictorParams = None


def _training_view(g, cfg, rng):
    if g.n <= cfg.subgraph_threshold:
        return g
    from .graphs import sample_node_subgraph

    anchor = int(rng.integers(g.n))
    return sample_node_subgraph(g, anchor, cfg.subgraph_hops,
                                cfg.subgraph_fanout, int(rng.integers(2 ** 31)))


def pretrain(g, cfg):
    """Scattering/alignment pre-training; returns the online encoder and the
    final full-graph embeddings (normalized rows).

    Per epoch: the frozen target encoder produces normalized embeddings and
    their center; the online encoder plus predictor produce the aligned
    view; L = alignment + scatter_weight * scattering is minimized by plain
    gradient descent on the online parameters; the target then tracks the
    online weights by EMA.
    """
    if g.n == 0:
        raise ContractError("cannot pretrain on an empty graph")
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    theta = init_encoder(rng, cfg.hidden_dim, cfg.n_layers, cfg.activation,
                         cfg.dropout_rate, cfg.degree_feature)
    phi = theta.copy()
    predictor = init_predictor(rng, cfg.hidden_dim, cfg.activation)
    trainable = theta.parameters() + predictor.parameters()

    history = []
    for epoch in range(cfg.epochs):
        view = _training_view(g, cfg, rng)

        try:
            with np.errstate(over="ignore", invalid="ignore"):
                h_t = encode(phi, view, training=False)
                target = EmbeddingMatrix(
                    ad.Tensor(_normalized_constant(h_t, cfg.eps)), normalized=True)
                with ad.Tape() as tape:
                    h_o = encode(theta, view, rng=rng, training=True)
                    online_norm = normalize_embeddings(h_o, cfg.eps)
                    # the center is the online rows' own detached mean;
                    # pushing away from a lagged center lets the whole cloud
                    # migrate instead of spreading
                    center = scatter_center(online_norm)
                    z = predictor_forward(predictor, h_o.values)
                    l_align = alignment_loss(EmbeddingMatrix(z), target, cfg.eps)
                    l_scatter = scattering_loss(online_norm, center)
                    total = ad.add(l_align,
                                   ad.scale(l_scatter, cfg.scatter_weight))
                if not np.isfinite(total.item()):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                ad.backward(total, tape)
                for p in trainable:
                    if p.grad is not None:
                        p.data[...] -= cfg.learning_rate * p.grad
                        p.zero_grad()
        except NumericError as exc:
            raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from None
        phi = ema_update(phi, theta, cfg.ema_tau)
        history.append({
            "epoch": epoch,
            "alignment": l_align.item(),
            "scattering": l_scatter.item(),
            "total": total.item(),
        })

    theta.validate()
    final = encode(theta, g, training=False)
    embeddings = EmbeddingMatrix(
        ad.Tensor(_normalized_constant(final, cfg.eps)), normalized=True)
    return PretrainResult(theta, embeddings, history, predictor)


def export_embeddings(e, path):
    """Write one CSV row per node: id column, then the embedding entries."""
    header = "node_id" + "".join(f",dim_{j}" for j in range(e.k))
    lines = [header]
    for i in range(e.n):
        row = e.data[i]
        lines.append(str(i) + "".join(",%.17e" % v for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_matrix(w, arr):
    w.u32(arr.shape[0])
    w.u32(arr.shape[1])
    for v in arr.ravel():
        w.f64(float(v))


def _read_matrix(r):
    rows = r.u32("matrix rows")
    cols = r.u32("matrix cols")
    data = np.array([r.f64("matrix entry") for _ in range(rows * cols)],
                    dtype=np.float64)
    return data.reshape(rows, cols)


def checkpoint_bytes(theta, seed):
    theta.validate()
    w = _binio.ByteWriter()
    w.u32(theta.hidden_dim)
    w.u32(theta.n_layers)
    w.u8(_ACTIVATIONS.index(theta.activation))
    w.f64(theta.dropout_rate)
    w.u8(1 if theta.deg_row is not None else 0)
    w.text(str(int(seed)))
    _write_matrix(w, theta.type_table.data)
    if theta.deg_row is not None:
        _write_matrix(w, theta.deg_row.data)
    for layer in theta.layers:
        _write_matrix(w, layer.w_self.data)
        _write_matrix(w, layer.w_neigh.data)
        if layer.slope is not None:
            _write_matrix(w, layer.slope.data)
    return _binio.frame(_CKPT_MAGIC, _CKPT_VERSION, w.getvalue())


def checkpoint_from_bytes(blob):
    try:
        version, payload = _binio.unframe(blob, _CKPT_MAGIC)
        if version != _CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        r = _binio.ByteReader(payload, base=8)
        hidden = r.u32("hidden_dim")
        n_layers = r.u32("n_layers")
        act_code = r.u8("activation")
        if act_code >= len(_ACTIVATIONS):
            raise CheckpointError(f"unknown activation code {act_code}")
        activation = _ACTIVATIONS[act_code]
        dropout = r.f64("dropout")
        has_deg = r.u8("degree flag")
        seed = int(r.text("seed"))
        table = ad.Tensor(_read_matrix(r), requires_grad=True)
        deg = ad.Tensor(_read_matrix(r), requires_grad=True) if has_deg else None
        layers = []
        for _ in range(n_layers):
            w_self = ad.Tensor(_read_matrix(r), requires_grad=True)
            w_neigh = ad.Tensor(_read_matrix(r), requires_grad=True)
            slope = (ad.Tensor(_read_matrix(r), requires_grad=True)
                     if activation == "prelu" else None)
            layers.append(LayerParams(w_self, w_neigh, slope))
        r.expect_end()
    except GraphFormatError as exc:
        raise CheckpointError(f"unreadable checkpoint: {exc}") from None
    theta = EncoderParams(table, deg, layers, hidden, activation, dropout)
    try:
        theta.validate()
    except ContractError as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from None
    return theta, seed


def save_checkpoint(path, theta, seed):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(theta, seed))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
