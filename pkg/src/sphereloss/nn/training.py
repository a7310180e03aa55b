"""Embedding networks, the staged SGD training loop, and the divergence probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .._io import write_csv, write_json
from ..exceptions import ConfigInvalid, DimensionMismatch, NonFiniteInput, ZeroVector
from ..losses import SOFTMAX, MarginLossSpec, log_softmax, loss_forward_backward
from ..rng import CounterRNG
from ..sphere import clamped_acos_with_grad, normalize
from .optim import TrainConfig, sgd_step
from .primitives import Module, Primitive, PrimitiveSpec, Sequential


def linear_softmax_loss(E, W, b, labels):
    """Plain softmax cross-entropy on a biased linear head ``E @ W + b``.

    Returns ``(loss, probabilities, grad_E, grad_W, grad_b)``.
    """
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = E.shape[0]
    z = E @ W + b
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = float(-np.mean(logp[rows, labels]))
    p = np.exp(logp)
    dz = p.copy()
    dz[rows, labels] -= 1.0
    dz /= n
    return loss, p, dz @ W.T, E.T @ dz, dz.sum(axis=0)


class Network:
    """Backbone producing embeddings plus a classification head.

    The head holds class centers ``W`` with shape ``(embedding_dim, n_classes)``
    and a bias ``b`` that only the plain ``Softmax`` stage uses.  Head
    parameters belong to group ``"head"``.
    """

    def __init__(self, backbone: Module, embedding_dim: int, n_classes: int, seed: int = 0):
        self.backbone = backbone
        self.embedding_dim = int(embedding_dim)
        self.n_classes = int(n_classes)
        rng = CounterRNG(seed).spawn("head")
        self.head = {
            "W": normalize(rng.normal((embedding_dim, n_classes)), axis=0),
            "b": np.zeros(n_classes),
        }

    def named_parameters(self) -> dict:
        out = dict(self.backbone.named_parameters("backbone."))
        out["head.W"] = self.head["W"]
        out["head.b"] = self.head["b"]
        return out

    def param_groups(self) -> dict:
        out = dict(self.backbone.param_groups("backbone."))
        out["head.W"] = out["head.b"] = "head"
        return out

    def embed(self, X, training: bool = False) -> np.ndarray:
        return self.backbone.forward(X, training)[0]

    def predict(self, X, spec: MarginLossSpec | None = None) -> np.ndarray:
        E = self.embed(X)
        if spec is not None and spec.variant == SOFTMAX:
            return np.argmax(E @ self.head["W"] + self.head["b"], axis=1)
        return np.argmax(normalize(E) @ normalize(self.head["W"], axis=0), axis=1)

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.named_parameters().items()}


def dense_embedding_net(in_dim: int, hidden: int, embedding_dim: int, n_classes: int, seed: int = 0) -> Network:
    """Two dense layers with a PReLU between them.

    The last dense layer is in group ``"embedding"`` so ``wd_mult`` can target it.
    """
    rng = CounterRNG(seed).spawn("init")
    backbone = Sequential(
        [
            ("fc1", Primitive(PrimitiveSpec("Dense", in_dim, hidden), rng.spawn("fc1"))),
            ("act1", Primitive(PrimitiveSpec("PReLU", hidden, hidden), rng)),
            ("fc2", Primitive(PrimitiveSpec("Dense", hidden, embedding_dim), rng.spawn("fc2"), group="embedding")),
        ]
    )
    return Network(backbone, embedding_dim, n_classes, seed=seed)


@dataclass
class StepRecord:
    step: int
    loss: float
    train_acc: float
    mean_target_angle: float
    diverged: bool = False


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    stage_boundaries: dict = field(default_factory=dict)

    CSV_HEADER = ("step", "loss", "train_acc", "mean_target_angle", "diverged")

    def __len__(self):
        return len(self.records)

    @property
    def diverged(self) -> bool:
        return bool(self.records) and self.records[-1].diverged

    @property
    def divergence_step(self):
        return self.records[-1].step if self.diverged else None

    def rows(self):
        return [(r.step, r.loss, r.train_acc, r.mean_target_angle, int(r.diverged)) for r in self.records]

    def write_csv(self, path, comment: str | None = None):
        return write_csv(path, self.CSV_HEADER, self.rows(), comment=comment)

    def summary(self, **extra) -> dict:
        last = self.records[-1] if self.records else None
        out = {
            "steps": len(self.records),
            "final_loss": last.loss if last else None,
            "final_batch_acc": last.train_acc if last else None,
            "final_mean_target_angle": last.mean_target_angle if last else None,
            "diverged": self.diverged,
            "divergence_step": self.divergence_step,
        }
        out.update(extra)
        return out

    def write_json(self, path, **extra):
        return write_json(path, self.summary(**extra))


def _batches(n: int, batch_size: int, rng: CounterRNG):
    epoch = 0
    while True:
        perm = rng.spawn("shuffle", epoch).permutation(n)
        if n <= batch_size:
            yield perm
        else:
            for start in range(0, n - batch_size + 1, batch_size):
                yield perm[start : start + batch_size]
        epoch += 1


def _all_finite(loss, grads) -> bool:
    return math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())


def train(model: Network, dataset, config: TrainConfig, teacher=None, distill=None, eval_every: int = 0, eval_fn=None,
          on_stage_start=None) -> TrainHistory:
    """Run staged momentum-SGD on ``dataset = (X, y)``.

    Stages in ``config.loss_stages`` are applied in order on the same weights.
    Training stops at the first step whose loss or any gradient is non-finite,
    or whose embeddings collapse to zero; that step is recorded with
    ``diverged=True``.

    Args:
        teacher: callable mapping an input batch to constant target embeddings
            (required when ``distill`` is given).
        distill: a :class:`~sphereloss.distill.DistillSpec`; its weighted loss
            is added to the classification loss.
        eval_every, eval_fn: when both set, ``eval_fn(step, model)`` is called
            after every ``eval_every`` updates and its return value stored in
            ``history.evals`` as ``(step, value)``.
        on_stage_start: ``on_stage_start(step, model)`` is called before the
            first update of every loss stage, with the weights carried over.
    """
    from ..distill import distill_loss_grad

    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    config.validate()
    if len(X) == 0 or len(X) != len(y):
        raise ConfigInvalid("dataset must be non-empty with one label per sample")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ConfigInvalid("labels exceed the model's class count")
    if distill is not None and teacher is None:
        raise ConfigInvalid("distillation needs a teacher")

    history = TrainHistory()
    if config.max_steps == 0:
        return history

    params = model.named_parameters()
    groups = model.param_groups()
    state: dict = {}
    batches = _batches(len(X), config.batch_size, CounterRNG(config.seed))
    rows = None
    current_stage = None

    # overflow on the way to a divergent step is detected and recorded below
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(config.max_steps):
            stage = config.stage_at(step)
            if stage is not current_stage:
                history.stage_boundaries[step] = stage.spec.label
                current_stage = stage
                if on_stage_start is not None:
                    on_stage_start(step, model)
            spec = stage.spec
            idx = next(batches)
            xb, yb = X[idx], y[idx]
            if rows is None or len(rows) != len(idx):
                rows = np.arange(len(idx))

            emb, cache = model.backbone.forward(xb, training=True)
            grads: dict = {}
            try:
                if spec.variant == SOFTMAX:
                    loss, p, g_emb, g_w, g_b = linear_softmax_loss(emb, model.head["W"], model.head["b"], yb)
                    pred = np.argmax(p, axis=1)
                    grads["head.b"] = g_b
                    cos = normalize(emb) @ normalize(model.head["W"], axis=0)
                    angles = clamped_acos_with_grad(cos[rows, yb])[0]
                else:
                    out = loss_forward_backward(spec, emb, model.head["W"], yb)
                    loss, g_emb, g_w = out.loss, out.grad_x, out.grad_W
                    pred = np.argmax(out.cosines, axis=1)
                    angles = out.target_angles
                grads["head.W"] = g_w
                if distill is not None:
                    d_loss, d_grad = distill_loss_grad(distill, emb, teacher(xb))
                    loss = loss + distill.weight * d_loss
                    g_emb = g_emb + distill.weight * d_grad
                _, g_body = model.backbone.backward(cache, g_emb)
            except (NonFiniteInput, ZeroVector, FloatingPointError, ZeroDivisionError):
                history.records.append(StepRecord(step, float("nan"), float("nan"), float("nan"), True))
                break
            for key, val in g_body.items():
                grads["backbone." + key] = val

            acc = float(np.mean(pred == yb))
            mean_angle = float(np.mean(angles))
            if not _all_finite(loss, grads):
                history.records.append(StepRecord(step, float(loss), acc, mean_angle, True))
                break
            history.records.append(StepRecord(step, float(loss), acc, mean_angle, False))
            sgd_step(params, grads, config, state, groups=groups, lr=config.lr_at(step))

            if eval_fn is not None and eval_every and (step + 1) % eval_every == 0:
                history.evals.append((step + 1, eval_fn(step + 1, model)))
    return history


def accuracy(model: Network, X, y, spec: MarginLossSpec | None = None) -> float:
    """Full-dataset classification accuracy."""
    return float(np.mean(model.predict(X, spec) == np.asarray(y)))


def adversarial_gradient_probe(spec: MarginLossSpec, theta0: float, lr: float = 0.1) -> float:
    """Signed change of the target angle after one gradient step on the embedding.

    Two classes in the plane: the target center at angle 0, the other at pi,
    and the embedding at ``theta0`` on the upper half circle.  Only the
    embedding moves.  The rotation is measured from the step vector itself, so
    steps far below double-precision resolution of the position still carry
    their sign.
    """
    if not 0 < theta0 < math.pi:
        raise DimensionMismatch("theta0 must lie in (0, pi)")
    W = np.array([[1.0, -1.0], [0.0, 0.0]])
    x = np.array([[math.cos(theta0), math.sin(theta0)]])
    out = loss_forward_backward(spec, x, W, [0])
    delta = -lr * out.grad_x[0]
    cross = x[0, 0] * delta[1] - x[0, 1] * delta[0]
    dot = float(x[0] @ x[0] + x[0] @ delta)
    # counter-clockwise rotation moves the embedding away from the center at angle 0
    return math.atan2(cross, dot)
