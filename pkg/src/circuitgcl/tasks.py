"""Downstream task heads over pre-trained embeddings, plus evaluation metrics.

Two tasks share one backbone family: a message-passing stack whose input
features are the pre-trained node embeddings.  Edge regression predicts the
normalized coupling value for a candidate pair from a symmetrized feature
(sum and absolute difference of the endpoint rows, so endpoint order can
never matter).  Node classification bins a net's ground capacitance.

The loss is swappable without touching the architecture: mse/gai/bmc for
regression, ce/focal/bsmce for classification.  Metrics follow the
long-tail reporting style: per-bin MAE for regression, and macro
precision/recall/F1 with the dominant target class excluded for
classification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from . import autodiff as ad
from ._errors import (
    CheckpointError,
    ContractError,
    GraphFormatError,
    NumericError,
    TrainingError,
)
from .losses import (
    GmmPrior,
    LossConfig,
    balanced_softmax_ce,
    bmc_loss,
    ce_loss,
    fit_gmm,
    focal_loss,
    gai_loss,
    mse_loss,
)
from .scatter import LayerParams, _activate

EDGE_REGRESSION = "edge_regression"
NODE_CLASSIFICATION = "node_classification"
_REGRESSION_LOSSES = ("mse", "gai", "bmc")
_CLASSIFICATION_LOSSES = ("ce", "focal", "bsmce")
_ACTIVATIONS = ("tanh", "prelu")
_TASK_MAGIC = b"CGTM"
_TASK_VERSION = 1
_REPORT_VERSION = 1


@dataclass(frozen=True)
class TaskConfig:
    task: str = EDGE_REGRESSION
    loss_kind: str = "mse"
    epochs: int = 100
    learning_rate: float = 0.05
    batch_size: int = 256
    seed: int = 0
    hidden_dim: int = 144
    n_layers: int = 5
    activation: str = "tanh"
    dropout_rate: float = 0.0
    degree_feature: bool = True
    n_classes: int = 5
    gmm_components: int = 8
    sigma_noise: float = 0.001
    focal_gamma: float = 2.0
    fine_tune_embeddings: bool = False

    def __post_init__(self):
        if self.task not in (EDGE_REGRESSION, NODE_CLASSIFICATION):
            raise ContractError(f"unknown task {self.task!r}")
        family = (_REGRESSION_LOSSES if self.task == EDGE_REGRESSION
                  else _CLASSIFICATION_LOSSES)
        if self.loss_kind not in family:
            raise ContractError(
                f"loss {self.loss_kind!r} does not fit task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.hidden_dim < 1 or self.n_layers < 1:
            raise ContractError("hidden_dim and n_layers must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must be in [0, 1)")
        if self.n_classes < 2:
            raise ContractError("n_classes must be at least 2")
        if self.gmm_components < 1:
            raise ContractError("gmm_components must be positive")
        if self.sigma_noise <= 0:
            raise ContractError("sigma_noise must be positive")
        if self.focal_gamma < 0:
            raise ContractError("focal_gamma must be nonnegative")


@dataclass
class BackboneParams:
    """Downstream message-passing stack fed by embedding features."""

    w_in: ad.Tensor
    deg_row: ad.Tensor
    layers: list
    hidden_dim: int
    activation: str
    dropout_rate: float = 0.0

    def parameters(self):
        out = [self.w_in]
        if self.deg_row is not None:
            out.append(self.deg_row)
        for layer in self.layers:
            out.extend(layer.tensors())
        return out


@dataclass
class HeadParams:
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
class TaskModel:
    backbone: BackboneParams
    head: HeadParams
    task: str
    loss_kind: str
    n_classes: int
    emb_dim: int
    history: list = field(default_factory=list)
    gmm_prior: GmmPrior = None
    class_prior: tuple = None
    tuned_embeddings: np.ndarray = None

    def parameters(self):
        return self.backbone.parameters() + self.head.parameters()


def _glorot(rng, rows, cols):
    bound = np.sqrt(6.0 / (rows + cols))
    return ad.Tensor(rng.uniform(-bound, bound, size=(rows, cols)),
                     requires_grad=True)


def _init_backbone(rng, emb_dim, cfg):
    h = cfg.hidden_dim
    w_in = _glorot(rng, emb_dim, h)
    deg = (ad.Tensor(rng.normal(0.0, 1.0 / np.sqrt(h), size=(1, h)),
                     requires_grad=True) if cfg.degree_feature else None)
    layers = []
    for _ in range(cfg.n_layers):
        slope = (ad.Tensor([[0.25]], requires_grad=True)
                 if cfg.activation == "prelu" else None)
        layers.append(LayerParams(_glorot(rng, h, h), _glorot(rng, h, h), slope))
    return BackboneParams(w_in, deg, layers, h, cfg.activation, cfg.dropout_rate)


def _init_head(rng, in_dim, hidden, out_dim, activation):
    slope = (ad.Tensor([[0.25]], requires_grad=True)
             if activation == "prelu" else None)
    return HeadParams(_glorot(rng, in_dim, hidden),
                      ad.Tensor(np.zeros((1, hidden)), requires_grad=True),
                      _glorot(rng, hidden, out_dim),
                      ad.Tensor(np.zeros((1, out_dim)), requires_grad=True),
                      slope)


def _backbone_forward(bb, g, emb_tensor, rng=None, training=False):
    operator = g.mean_operator()
    h = ad.matmul(emb_tensor, bb.w_in)
    if bb.deg_row is not None:
        feat = np.log1p(np.asarray(g.degrees, dtype=np.float64)).reshape(-1, 1)
        h = ad.add(h, ad.mul(ad.Tensor(feat), bb.deg_row))
    for li, layer in enumerate(bb.layers):
        pre = ad.add(ad.matmul(h, layer.w_self),
                     ad.spmm(operator, ad.matmul(h, layer.w_neigh)))
        h = _activate(pre, bb.activation, layer.slope)
        if training and bb.dropout_rate > 0.0 and li < len(bb.layers) - 1:
            h = ad.dropout(h, bb.dropout_rate, rng)
    return h


def _head_forward(head, feats, activation):
    hidden = _activate(ad.add(ad.matmul(feats, head.w1), head.b1),
                       activation, head.slope)
    return ad.add(ad.matmul(hidden, head.w2), head.b2)


def _edge_features(h, pairs):
    u = ad.take_rows(h, pairs[:, 0])
    v = ad.take_rows(h, pairs[:, 1])
    return ad.concat_cols(ad.add(u, v), ad.absolute(ad.sub(u, v)))


def _check_labels(g, labels, cfg):
    indices, values = labels
    if cfg.task == EDGE_REGRESSION:
        pairs = np.asarray(indices, dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ContractError("edge labels need an (m, 2) endpoint array")
        vals = np.asarray(values, dtype=np.float64).ravel()
        if len(pairs) == 0:
            raise ContractError("no labeled edges to train on")
        if len(vals) != len(pairs):
            raise ContractError("endpoint and value counts differ")
        if pairs.min() < 0 or pairs.max() >= g.n:
            raise ContractError("edge endpoint id out of range")
        if not np.isfinite(vals).all():
            raise ContractError("labels must be finite")
        return pairs, vals
    ids = np.asarray(indices, dtype=np.int64).ravel()
    vals = np.asarray(values).ravel()
    if len(ids) == 0:
        raise ContractError("no labeled nodes to train on")
    if len(vals) != len(ids):
        raise ContractError("node and label counts differ")
    if ids.min() < 0 or ids.max() >= g.n:
        raise ContractError("node id out of range")
    if np.any(np.asarray(g.x)[ids] != 0):
        raise ContractError("ground-capacitance labels must sit on net nodes")
    as_float = vals.astype(np.float64)
    if not np.all(np.isfinite(as_float)) or np.any(as_float != np.floor(as_float)):
        raise ContractError("class labels must be integers")
    vals = vals.astype(np.int64)
    if vals.min() < 0 or vals.max() >= cfg.n_classes:
        raise ContractError(f"class labels must lie in [0, {cfg.n_classes})")
    return ids, vals


def train_task(g, init_embeddings, labels, cfg):
    """Train a task head (and backbone) on the given labels.

    `labels` is (endpoint_pairs, values) for edge regression or
    (node_ids, class_ids) for node classification.  The embedding matrix is
    consumed as fixed input features unless cfg.fine_tune_embeddings makes
    it a trainable table.
    """
    if init_embeddings.n != g.n:
        raise ContractError(
            f"embeddings cover {init_embeddings.n} nodes, graph has {g.n}")
    indices, values = _check_labels(g, labels, cfg)

    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    emb_data = np.asarray(init_embeddings.data, dtype=np.float64)
    emb_tensor = ad.Tensor(emb_data.copy(),
                           requires_grad=cfg.fine_tune_embeddings)
    emb_dim = emb_tensor.cols

    backbone = _init_backbone(rng, emb_dim, cfg)
    if cfg.task == EDGE_REGRESSION:
        head = _init_head(rng, 2 * cfg.hidden_dim, cfg.hidden_dim, 1,
                          cfg.activation)
    else:
        head = _init_head(rng, cfg.hidden_dim, cfg.hidden_dim, cfg.n_classes,
                          cfg.activation)

    model = TaskModel(backbone, head, cfg.task, cfg.loss_kind, cfg.n_classes,
                      emb_dim)
    trainable = model.parameters()
    if cfg.fine_tune_embeddings:
        trainable = trainable + [emb_tensor]

    loss_cfg = LossConfig(sigma_noise=cfg.sigma_noise)
    if cfg.loss_kind == "gai":
        k = min(cfg.gmm_components, len(np.unique(values)))
        model.gmm_prior = fit_gmm(values, k)
    if cfg.loss_kind == "bsmce":
        counts = np.bincount(values, minlength=cfg.n_classes).astype(np.float64)
        prior = (counts + 1.0) / (counts.sum() + cfg.n_classes)
        model.class_prior = tuple(prior)
        loss_cfg = LossConfig(sigma_noise=cfg.sigma_noise,
                              class_prior=model.class_prior)

    m = len(indices)
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        epoch_losses = []
        for start in range(0, m, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            b_idx = indices[batch]
            b_val = values[batch]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    with ad.Tape() as tape:
                        h = _backbone_forward(backbone, g, emb_tensor,
                                              rng=rng, training=True)
                        if cfg.task == EDGE_REGRESSION:
                            out = _head_forward(head, _edge_features(h, b_idx),
                                                cfg.activation)
                            if cfg.loss_kind == "mse":
                                loss = mse_loss(out, b_val)
                            elif cfg.loss_kind == "gai":
                                loss = gai_loss(out, b_val, model.gmm_prior,
                                                loss_cfg)
                            else:
                                loss = bmc_loss(out, b_val, b_val, loss_cfg)
                        else:
                            logits = _head_forward(head, ad.take_rows(h, b_idx),
                                                   cfg.activation)
                            if cfg.loss_kind == "ce":
                                loss = ce_loss(logits, b_val)
                            elif cfg.loss_kind == "focal":
                                loss = focal_loss(logits, b_val, cfg.focal_gamma)
                            else:
                                loss = balanced_softmax_ce(logits, b_val,
                                                           loss_cfg)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingError(f"non-finite loss at epoch {epoch}")
                    ad.backward(loss, tape)
                    for p in trainable:
                        if p.grad is not None:
                            p.data[...] -= cfg.learning_rate * p.grad
                            p.zero_grad()
            except NumericError as exc:
                raise TrainingError(
                    f"training diverged at epoch {epoch}: {exc}") from None
            epoch_losses.append(value)
        model.history.append({"epoch": epoch,
                              "loss": float(np.mean(epoch_losses))})

    if cfg.fine_tune_embeddings:
        model.tuned_embeddings = emb_tensor.data.copy()
    return model


def _frozen_backbone_output(model, g, emb):
    data = np.asarray(emb.data if hasattr(emb, "data") else emb,
                      dtype=np.float64)
    if data.shape[0] != g.n:
        raise ContractError(f"embeddings cover {data.shape[0]} nodes, "
                            f"graph has {g.n}")
    if data.shape[1] != model.emb_dim:
        raise ContractError(f"model expects {model.emb_dim}-dim embeddings, "
                            f"got {data.shape[1]}")
    return _backbone_forward(model.backbone, g, ad.Tensor(data))


def predict_edges(model, g, emb, pairs):
    """Vectorized edge predictions, clamped to [0, 1]."""
    if model.task != EDGE_REGRESSION:
        raise ContractError("model does not do edge regression")
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ContractError("pairs must have shape (m, 2)")
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= g.n):
        raise ContractError("edge endpoint id out of range")
    if len(pairs) == 0:
        return np.zeros(0)
    h = _frozen_backbone_output(model, g, emb)
    out = _head_forward(model.head, _edge_features(h, pairs),
                        model.backbone.activation)
    return np.clip(out.data.ravel(), 0.0, 1.0)


def predict_edge(model, g, emb, edge):
    u, v = int(edge[0]), int(edge[1])
    return float(predict_edges(model, g, emb, [(u, v)])[0])


def predict_node_classes(model, g, emb, node_ids):
    """Class ids and logits for net nodes; argmax ties go to the lowest id."""
    if model.task != NODE_CLASSIFICATION:
        raise ContractError("model does not do node classification")
    ids = np.asarray(node_ids, dtype=np.int64).ravel()
    if len(ids) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, model.n_classes))
    if ids.min() < 0 or ids.max() >= g.n:
        raise ContractError("node id out of range")
    if np.any(np.asarray(g.x)[ids] != 0):
        raise ContractError("ground-capacitance classes exist only for nets")
    h = _frozen_backbone_output(model, g, emb)
    logits = _head_forward(model.head, ad.take_rows(h, ids),
                           model.backbone.activation)
    return np.argmax(logits.data, axis=1), logits.data


def predict_node_class(model, g, emb, node):
    classes, logits = predict_node_classes(model, g, emb, [int(node)])
    return int(classes[0]), logits[0]


@dataclass
class MetricsReport:
    task: str
    count: int
    mae: float = None
    mse: float = None
    r2: float = None
    mae_log_decades: float = None
    per_bin_mae: list = None
    per_bin_count: list = None
    accuracy: float = None
    precision: float = None
    recall: float = None
    f1: float = None
    excluded_classes: list = None
    n_classes: int = None
    loss_kind: str = None

    def to_json_dict(self):
        doc = {"version": _REPORT_VERSION, "task": self.task,
               "count": self.count}
        if self.loss_kind is not None:
            doc["loss_kind"] = self.loss_kind
        if self.task == EDGE_REGRESSION:
            doc.update(mae=self.mae, mse=self.mse, r2=self.r2,
                       mae_log_decades=self.mae_log_decades,
                       per_bin_mae=self.per_bin_mae,
                       per_bin_count=self.per_bin_count)
        else:
            doc.update(accuracy=self.accuracy, precision=self.precision,
                       recall=self.recall, f1=self.f1,
                       excluded_classes=self.excluded_classes,
                       n_classes=self.n_classes)
        return doc

    def to_json(self, indent=None):
        separators = (",", ":") if indent is None else None
        return json.dumps(self.to_json_dict(), indent=indent,
                          separators=separators)

    def to_text(self):
        if self.task == EDGE_REGRESSION:
            head = ["MAE", "MSE", "R2", "MAE(log10)"]
            row = [self.mae, self.mse, self.r2, self.mae_log_decades]
            lines = [_align_row(head), _align_row(row)]
            lines.append("")
            lines.append(_align_row(["bin", "count", "MAE"]))
            for i, (c, v) in enumerate(zip(self.per_bin_count,
                                           self.per_bin_mae)):
                lines.append(_align_row([i, c, v]))
        else:
            head = ["Acc.", "Precision", "Recall", "F1"]
            row = [self.accuracy, self.precision, self.recall, self.f1]
            lines = [_align_row(head), _align_row(row)]
            lines.append("")
            lines.append(f"excluded target classes: "
                         f"{sorted(self.excluded_classes)}")
        lines.append(f"samples: {self.count}")
        return "\n".join(lines)


def _align_row(cells, width=12):
    out = []
    for c in cells:
        if c is None:
            out.append("-".ljust(width))
        elif isinstance(c, float):
            out.append(f"{c:.6f}".ljust(width))
        else:
            out.append(str(c).ljust(width))
    return "".join(out).rstrip()


def regression_metrics(preds, targets, n_bins=5):
    """MAE, MSE, R-squared, and per-bin MAE over equal-width target bins."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if len(p) != len(t):
        raise ContractError("prediction and target counts differ")
    if len(t) < 2:
        raise ContractError("need at least 2 samples for R-squared")
    err = p - t
    mae = float(np.abs(err).mean())
    mse = float((err ** 2).mean())
    sse = float((err ** 2).sum())
    sst = float(((t - t.mean()) ** 2).sum())
    if sst == 0.0:
        r2 = 1.0 if sse == 0.0 else 0.0
    else:
        r2 = 1.0 - sse / sst
    bins = np.clip(np.floor(t * n_bins).astype(np.int64), 0, n_bins - 1)
    per_mae, per_count = [], []
    for b in range(n_bins):
        mask = bins == b
        per_count.append(int(mask.sum()))
        per_mae.append(float(np.abs(err[mask]).mean()) if mask.any() else None)
    return MetricsReport(task=EDGE_REGRESSION, count=len(t), mae=mae, mse=mse,
                         r2=r2, mae_log_decades=mae * 6.0, per_bin_mae=per_mae,
                         per_bin_count=per_count)


def classification_metrics(preds, targets, excluded=frozenset({2}),
                           n_classes=5):
    """Accuracy and macro precision/recall/F1 after dropping samples whose
    target class is excluded; absent classes contribute 0 to the macros."""
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(targets, dtype=np.int64).ravel()
    if len(p) != len(t):
        raise ContractError("prediction and target counts differ")
    excluded = frozenset(int(c) for c in excluded)
    keep = ~np.isin(t, sorted(excluded))
    if not keep.any():
        raise ContractError("every sample's target class is excluded")
    p, t = p[keep], t[keep]
    accuracy = float((p == t).mean())
    classes = [c for c in range(n_classes) if c not in excluded]
    if not classes:
        raise ContractError("no classes left after exclusion")
    precisions, recalls, f1s = [], [], []
    for c in classes:
        tp = float(((p == c) & (t == c)).sum())
        pred_c = float((p == c).sum())
        targ_c = float((t == c).sum())
        prec = tp / pred_c if pred_c else 0.0
        rec = tp / targ_c if targ_c else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return MetricsReport(task=NODE_CLASSIFICATION, count=int(keep.sum()),
                         accuracy=accuracy,
                         precision=float(np.mean(precisions)),
                         recall=float(np.mean(recalls)),
                         f1=float(np.mean(f1s)),
                         excluded_classes=sorted(excluded),
                         n_classes=n_classes)


# ---------------------------------------------------------------------------
# task-model serialization

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


def _write_opt(w, arr):
    w.u8(0 if arr is None else 1)
    if arr is not None:
        _write_matrix(w, arr)


def _read_opt(r, grad=True):
    if not r.u8("presence flag"):
        return None
    return ad.Tensor(_read_matrix(r), requires_grad=grad)


def task_model_bytes(model):
    w = _binio.ByteWriter()
    w.u8(0 if model.task == EDGE_REGRESSION else 1)
    w.text(model.loss_kind)
    w.u32(model.n_classes)
    w.u32(model.emb_dim)
    bb = model.backbone
    w.u32(bb.hidden_dim)
    w.u32(len(bb.layers))
    w.u8(_ACTIVATIONS.index(bb.activation))
    w.f64(bb.dropout_rate)
    _write_matrix(w, bb.w_in.data)
    _write_opt(w, None if bb.deg_row is None else bb.deg_row.data)
    for layer in bb.layers:
        _write_matrix(w, layer.w_self.data)
        _write_matrix(w, layer.w_neigh.data)
        _write_opt(w, None if layer.slope is None else layer.slope.data)
    head = model.head
    for t in (head.w1, head.b1, head.w2, head.b2):
        _write_matrix(w, t.data)
    _write_opt(w, None if head.slope is None else head.slope.data)
    _write_opt(w, model.tuned_embeddings)
    return _binio.frame(_TASK_MAGIC, _TASK_VERSION, w.getvalue())


def task_model_from_bytes(blob):
    try:
        version, payload = _binio.unframe(blob, _TASK_MAGIC)
        if version != _TASK_VERSION:
            raise CheckpointError(f"unsupported task model version {version}")
        r = _binio.ByteReader(payload, base=8)
        task = EDGE_REGRESSION if r.u8("task") == 0 else NODE_CLASSIFICATION
        loss_kind = r.text("loss kind")
        n_classes = r.u32("n_classes")
        emb_dim = r.u32("emb_dim")
        hidden = r.u32("hidden_dim")
        n_layers = r.u32("n_layers")
        act_code = r.u8("activation")
        if act_code >= len(_ACTIVATIONS):
            raise CheckpointError(f"unknown activation code {act_code}")
        activation = _ACTIVATIONS[act_code]
        dropout = r.f64("dropout")
        w_in = ad.Tensor(_read_matrix(r), requires_grad=True)
        deg = _read_opt(r)
        layers = []
        for _ in range(n_layers):
            w_self = ad.Tensor(_read_matrix(r), requires_grad=True)
            w_neigh = ad.Tensor(_read_matrix(r), requires_grad=True)
            slope = _read_opt(r)
            layers.append(LayerParams(w_self, w_neigh, slope))
        head_mats = [ad.Tensor(_read_matrix(r), requires_grad=True)
                     for _ in range(4)]
        head_slope = _read_opt(r)
        tuned = _read_opt(r, grad=False)
        r.expect_end()
    except GraphFormatError as exc:
        raise CheckpointError(f"unreadable task model: {exc}") from None
    backbone = BackboneParams(w_in, deg, layers, hidden, activation, dropout)
    head = HeadParams(*head_mats, head_slope)
    return TaskModel(backbone, head, task, loss_kind, n_classes, emb_dim,
                     tuned_embeddings=None if tuned is None else tuned.data)


def save_task_model(path, model):
    with open(path, "wb") as fh:
        fh.write(task_model_bytes(model))


def load_task_model(path):
    with open(path, "rb") as fh:
        return task_model_from_bytes(fh.read())
