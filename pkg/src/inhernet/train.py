"""SGD training engine with a diminishing step schedule and KD losses.

The optimizer is plain SGD; the default schedule divides the base rate by
the square root of the step index, counting optimizer steps (not epochs)
from 1. Shuffling draws a fresh permutation per epoch from the
counter-based stream keyed by (seed, epoch), so identical configs produce
bit-identical loss trajectories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .errors import NumericalError, RangeError, ShapeError
from .linalg import softmax
from .nn import Network, accuracy, cross_entropy, mse_loss

SCHEDULES = ("constant", "inverse_sqrt", "step")
LOSSES = ("mse", "ce", "ce+kd")

RUNLOG_COLUMNS = ("epoch", "train_loss", "eval_loss", "eval_acc",
                  "grad_norm_mean", "grad_norm_var", "wall_ms")


@dataclass
class TrainConfig:
    base_lr: float
    epochs: int
    batch_size: int
    seed: int
    schedule: str = "inverse_sqrt"
    milestones: tuple[int, ...] = ()     # step indices, for schedule="step"
    decay_factor: float = 0.1
    loss: str = "mse"
    lambda_ce: float = 1.0
    lambda_kd: float = 9.0
    temperature: float = 2.0
    threshold: float | None = None       # eval-loss level for epochs_to_threshold

    def __post_init__(self):
        if self.base_lr <= 0:
            raise RangeError(f"base learning rate must be positive, got {self.base_lr}")
        if self.temperature <= 0:
            raise RangeError(f"temperature must be positive, got {self.temperature}")
        if self.lambda_ce < 0 or self.lambda_kd < 0:
            raise RangeError("loss weights must be nonnegative")
        if self.schedule not in SCHEDULES:
            raise RangeError(f"unknown schedule {self.schedule!r}")
        if self.loss not in LOSSES:
            raise RangeError(f"unknown loss {self.loss!r}")


@dataclass
class RunLog:
    """Per-epoch training metrics; list lengths equal the epoch count."""

    train_loss: list[float] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    eval_acc: list[float] = field(default_factory=list)
    grad_norm_mean: list[float] = field(default_factory=list)
    grad_norm_var: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    epochs_to_threshold: int | None = None

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv(self, path) -> None:
        from .io import atomic_write
        lines = [",".join(RUNLOG_COLUMNS)]
        for i in range(len(self)):
            lines.append(",".join([str(i + 1),
                                   repr(self.train_loss[i]),
                                   repr(self.eval_loss[i]),
                                   repr(self.eval_acc[i]),
                                   repr(self.grad_norm_mean[i]),
                                   repr(self.grad_norm_var[i]),
                                   repr(self.wall_ms[i])]))
        atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def learning_rate(config: TrainConfig, t: int) -> float:
    """Step size at optimizer step ``t`` (1-based)."""
    if t < 1:
        raise RangeError(f"step index must be >= 1, got {t}")
    if config.schedule == "constant":
        return config.base_lr
    if config.schedule == "inverse_sqrt":
        return config.base_lr / np.sqrt(t)
    passed = sum(1 for m in config.milestones if t >= m)
    return config.base_lr * config.decay_factor ** passed


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             t: int, config: TrainConfig) -> None:
    """In-place update ``theta <- theta - eta_t * g``."""
    eta = learning_rate(config, t)
    for key, p in params.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {key!r} at step {t}")
        p -= eta * g


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray,
            labels: np.ndarray, config: TrainConfig):
    """Combined task + distillation loss and its gradient wrt student logits.

    ``L = lambda_ce * CE(student, labels)
       + lambda_kd * tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))``

    averaged over the batch. The temperature-squared factor keeps the KD
    gradient magnitude comparable across temperatures; differentiating the
    softened log-softmax contributes the remaining 1/tau.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logit shapes differ: {student_logits.shape} "
                         f"vs {teacher_logits.shape}")
    b = student_logits.shape[0]
    tau = config.temperature
    ce, ce_grad = cross_entropy(student_logits, labels)
    p = softmax(teacher_logits / tau)
    q = softmax(student_logits / tau)
    log_p = np.log(p)
    log_q = (student_logits / tau
             - student_logits.max(axis=1, keepdims=True) / tau)
    log_q = log_q - np.log(np.exp(log_q).sum(axis=1, keepdims=True))
    kl = float(np.sum(p * (log_p - log_q)) / b)
    loss = config.lambda_ce * ce + config.lambda_kd * tau * tau * kl
    grad = config.lambda_ce * ce_grad + config.lambda_kd * tau * (q - p) / b
    return loss, grad


def _batch_loss(net: Network, x: np.ndarray, y: np.ndarray,
                config: TrainConfig, teacher: Network | None):
    logits = net.forward(x)
    if config.loss == "mse":
        return mse_loss(logits, y), logits
    if config.loss == "ce":
        return cross_entropy(logits, y), logits
    if teacher is None:
        raise RangeError("loss 'ce+kd' requires a teacher network")
    teacher_logits = teacher.forward(x)
    return kd_loss(logits, teacher_logits, y, config), logits


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, config: TrainConfig):
    """Task loss and accuracy on an evaluation split.

    The evaluation loss is always the plain task loss (MSE or CE), even when
    training optimizes the combined KD objective; accuracy is NaN for
    regression targets.
    """
    out = net.forward(x)
    if config.loss == "mse":
        return mse_loss(out, y)[0], float("nan")
    return cross_entropy(out, y)[0], accuracy(out, y)


def grad_norm(net: Network) -> float:
    total = 0.0
    for g in net.grad_items().values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def train(net: Network, data, config: TrainConfig,
          teacher: Network | None = None) -> RunLog:
    """Run SGD for ``config.epochs`` epochs and return the populated log.

    ``data`` is a ``(train_split, eval_split)`` pair of datasets with ``x``
    and ``y`` arrays. ``epochs_to_threshold`` records the first epoch whose
    post-epoch evaluation loss is at or below ``config.threshold``.
    """
    train_ds, eval_ds = data
    log = RunLog()
    n = train_ds.x.shape[0]
    params = net.param_items()
    t = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        perm = _rng.philox(config.seed, _rng.STREAM_SHUFFLE, epoch).permutation(n)
        epoch_losses = []
        step_norms = []
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            xb, yb = train_ds.x[idx], train_ds.y[idx]
            t += 1
            (loss, grad), _ = _batch_loss(net, xb, yb, config, teacher)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"loss became non-finite at epoch {epoch + 1}, step {t}; "
                    f"batch indices {idx[:4].tolist()}...")
            net.zero_grads()
            net.backward(grad)
            step_norms.append(grad_norm(net))
            sgd_step(params, net.grad_items(), t, config)
            epoch_losses.append(loss)
        ev_loss, ev_acc = evaluate(net, eval_ds.x, eval_ds.y, config)
        log.train_loss.append(float(np.mean(epoch_losses)))
        log.eval_loss.append(ev_loss)
        log.eval_acc.append(ev_acc)
        log.grad_norm_mean.append(float(np.mean(step_norms)))
        log.grad_norm_var.append(float(np.var(step_norms)))
        log.wall_ms.append((time.perf_counter() - start) * 1000.0)
        if (log.epochs_to_threshold is None and config.threshold is not None
                and ev_loss <= config.threshold):
            log.epochs_to_threshold = epoch + 1
    return log


@dataclass
class GatingVarianceReport:
    """Per-minibatch gradient variance with learned vs uniform gating."""

    adaptive_variance: float
    uniform_variance: float
    batches: int


def gating_grad_variance(layer, data, config: TrainConfig) -> GatingVarianceReport:
    """Measure gradient variance of one layer under both gating regimes.

    For each minibatch the full parameter gradient of the layer is
    flattened into a vector; the reported variance is the mean squared
    distance from the across-batch mean gradient. The uniform arm clones
    the layer and pins its gate to 1/H. Measurement only, no pass/fail.
    """
    train_ds, _ = data
    n = train_ds.x.shape[0]
    perm = _rng.philox(config.seed, _rng.STREAM_SHUFFLE, 0).permutation(n)

    def collect(net: Network) -> np.ndarray:
        rows = []
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            (_, grad), _ = _batch_loss(net, train_ds.x[idx], train_ds.y[idx],
                                       config, None)
            net.zero_grads()
            net.backward(grad)
            rows.append(np.concatenate([g.ravel() for g in net.grad_items().values()]))
        return np.stack(rows)

    adaptive = Network([layer])
    uniform = Network([_frozen_copy(layer)])
    g_a = collect(adaptive)
    g_u = collect(uniform)

    def spread(g: np.ndarray) -> float:
        mean = g.mean(axis=0)
        return float(np.mean(np.sum((g - mean) ** 2, axis=1)))

    return GatingVarianceReport(adaptive_variance=spread(g_a),
                                uniform_variance=spread(g_u),
                                batches=g_a.shape[0])


def _frozen_copy(layer):
    from .inherit import InherNetLayer
    if not isinstance(layer, InherNetLayer):
        raise ShapeError("gating variance measurement expects an inherited dense layer")
    h = layer.n_heads
    return InherNetLayer(
        w_down=layer.params["w_down"].copy(),
        heads=[layer.params[f"head_{i}"].copy() for i in range(h)],
        gate_weight=np.zeros((0, 0)),
        gate_bias=np.zeros(0),
        gate_input=layer.gate_input,
        head_bias=([layer.params[f"head_bias_{i}"].copy() for i in range(h)]
                   if layer.has_head_bias else None),
        gate_frozen=True,
    )
