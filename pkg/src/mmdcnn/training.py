"""Adam optimization and the paired source/target training loop.

One fit() run owns its model and optimizer state. Every source of
randomness is keyed from (seed, epoch, ...) seed sequences so that a rerun
with the same config reproduces the parameter trajectory bit for bit.
The dropout streams for the source and target forward passes are separate
children, which keeps a zero-weight adaptation run identical to a plain
supervised one.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward
from .data import Batch
from .losses import (
    ADAPT_MODES,
    DEFAULT_MULTIPLIERS,
    KernelSpec,
    LambdaSchedule,
    LossReport,
    categorical_cross_entropy,
    combined_loss,
    update_lambda,
)
from .model import apply_max_norm

_DROPOUT_STREAM = 1  # entropy tag separating dropout rng from data shuffling


class TrainingError(RuntimeError):
    """Training aborted: divergence or a malformed stream."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one run."""

    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    adapt_on: str = "features"
    lambda_max: float = 1.0
    gamma: float = 10.0
    max_norm_cap: float | None = 3.0
    estimator: str = "biased"
    kernel_bandwidths: tuple[float, ...] | None = None
    kernel_multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS
    dtype: str = "float64"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.adapt_on not in ADAPT_MODES:
            raise ValueError(f"adapt_on must be one of {ADAPT_MODES}")
        if self.lambda_max < 0 or self.gamma <= 0:
            raise ValueError("lambda_max must be >= 0 and gamma > 0")
        if self.max_norm_cap is not None and self.max_norm_cap <= 0:
            raise ValueError("max_norm_cap must be positive when set")
        if self.estimator not in ("biased", "unbiased"):
            raise ValueError("estimator must be 'biased' or 'unbiased'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.kernel_bandwidths is not None:
            object.__setattr__(self, "kernel_bandwidths",
                               tuple(float(b) for b in self.kernel_bandwidths))
        object.__setattr__(self, "kernel_multipliers",
                           tuple(float(m) for m in self.kernel_multipliers))

    def kernel_spec(self):
        return KernelSpec(bandwidths=self.kernel_bandwidths,
                          multipliers=self.kernel_multipliers)

    def numpy_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params):
    return AdamState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def adam_step(params, grads, state, cfg):
    """One Adam update over every parameter (in place)."""
    state.t += 1
    t = state.t
    correct1 = 1.0 - cfg.beta1 ** t
    correct2 = 1.0 - cfg.beta2 ** t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            raise TrainingError(f"parameter '{name}' received no gradient")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / correct1
        v_hat = v / correct2
        param.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return params, state


@dataclass(frozen=True)
class MetricsRecord:
    """One epoch's measurements."""

    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    lambda_: float
    mmd_value: float
    wall_seconds: float


def _cycling(stream):
    """Iterator over a re-iterable stream that restarts on exhaustion."""
    it = iter(stream)

    def advance():
        nonlocal it
        try:
            return next(it)
        except StopIteration:
            it = iter(stream)
            try:
                return next(it)
            except StopIteration:
                raise TrainingError("target stream is empty") from None

    return advance


def train_epoch(model, source_stream, target_stream, cfg, lam, rng,
                state=None, epoch=None):
    """One pass over the source stream with paired target batches.

    Per batch: forward both domains, combined loss, backward, Adam step,
    max-norm projection. The target stream cycles when shorter than the
    source stream, so it must be re-iterable (a list or a restartable
    view). Returns the batch-size-weighted mean LossReport.
    """
    if state is None:
        state = init_adam(model.params)
    adapting = cfg.adapt_on != "off"
    next_target = _cycling(target_stream) if adapting else None
    spec = cfg.kernel_spec()
    where = f"epoch {epoch}, " if epoch is not None else ""

    ce_sum = mmd_sum = 0.0
    seen = 0
    for index, batch_s in enumerate(source_stream):
        if len(batch_s) > cfg.batch_size:
            raise TrainingError(f"source batch of {len(batch_s)} exceeds batch_size {cfg.batch_size}")
        rng_source, rng_target = rng.spawn(2)
        try:
            feats_s, probs_s = model.forward(batch_s.images, mode="train", rng=rng_source)
            rep_s = rep_t = None
            if adapting:
                batch_t = next_target()
                feats_t, probs_t = model.forward(batch_t.images, mode="train", rng=rng_target)
                if cfg.adapt_on == "predictions":
                    rep_s, rep_t = probs_s, probs_t
                else:
                    rep_s, rep_t = feats_s, feats_t
            total, report = combined_loss(
                probs_s, batch_s.labels, rep_s, rep_t, cfg.adapt_on, spec, lam,
                estimator=cfg.estimator)
            model.zero_grad()
            backward(total)
            grads = {name: p.grad for name, p in model.params.items()}
            adam_step(model.params, grads, state, cfg)
        except (NonFiniteError, TrainingError) as exc:
            raise TrainingError(f"aborted at {where}batch {index}: {exc}") from exc
        if cfg.max_norm_cap is not None:
            for name in model.constrained:
                apply_max_norm(model.params[name], cfg.max_norm_cap)
        n = len(batch_s)
        ce_sum += report.ce_loss * n
        mmd_sum += report.mmd_value * n
        seen += n
    if seen == 0:
        raise TrainingError("source stream is empty")
    ce_mean, mmd_mean = ce_sum / seen, mmd_sum / seen
    return LossReport(ce_mean, mmd_mean, lam, ce_mean + lam * mmd_mean)


def evaluate(model, labeled_stream):
    """(mean cross-entropy, accuracy) over a labeled stream, eval mode.

    Argmax ties break toward the lower class index.
    """
    ce_sum = 0.0
    correct = 0
    seen = 0
    for batch in labeled_stream:
        if batch.labels is None:
            raise ValueError("evaluation stream must carry labels")
        _, probs = model.forward(batch.images, mode="eval")
        ce = categorical_cross_entropy(probs, batch.labels)
        n = len(batch)
        ce_sum += float(ce.data) * n
        correct += int((probs.data.argmax(axis=1) == batch.labels.data.argmax(axis=1)).sum())
        seen += n
    if seen == 0:
        raise ValueError("evaluation stream is empty")
    return ce_sum / seen, correct / seen


def fit(model, datasets, cfg):
    """Full training run; one MetricsRecord per epoch, in epoch order.

    ``datasets`` provides the four streams: labeled source train, labeled
    source eval (training metrics), unlabeled target train, labeled target
    eval (testing metrics). See ArrayDatasets / data.ManifestDatasets.
    """
    schedule = LambdaSchedule(lambda_max=cfg.lambda_max, gamma=cfg.gamma)
    state = init_adam(model.params)
    records = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lam = update_lambda(schedule, epoch, cfg.epochs)
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, epoch, _DROPOUT_STREAM)))
        source_stream = datasets.source_train_batches(cfg.batch_size, cfg.seed, epoch)
        target_stream = (datasets.target_train_batches(cfg.batch_size, cfg.seed, epoch)
                         if cfg.adapt_on != "off" else None)
        try:
            report = train_epoch(model, source_stream, target_stream, cfg, lam, rng,
                                 state=state, epoch=epoch)
        except TrainingError as exc:
            raise TrainingError(f"run aborted: {exc}") from exc
        train_loss, train_acc = evaluate(model, datasets.source_eval_batches(cfg.batch_size))
        test_loss, test_acc = evaluate(model, datasets.target_eval_batches(cfg.batch_size))
        records.append(MetricsRecord(
            epoch=epoch,
            train_loss=train_loss,
            train_accuracy=train_acc,
            test_loss=test_loss,
            test_accuracy=test_acc,
            lambda_=lam,
            mmd_value=report.mmd_value,
            wall_seconds=time.perf_counter() - start,
        ))
    return records


class ArrayDatasets:
    """In-memory datasets for fit(); mirrors data.ManifestDatasets streams."""

    def __init__(self, source_images, source_labels, target_images,
                 target_eval_images, target_eval_labels,
                 source_eval_images=None, source_eval_labels=None):
        self.source_images = np.asarray(source_images)
        self.source_labels = np.asarray(source_labels)
        self.target_images = np.asarray(target_images)
        self.target_eval = (np.asarray(target_eval_images), np.asarray(target_eval_labels))
        if source_eval_images is None:
            self.source_eval = (self.source_images, self.source_labels)
        else:
            self.source_eval = (np.asarray(source_eval_images), np.asarray(source_eval_labels))

    @staticmethod
    def _shuffled(images, labels, batch_size, seed, epoch, domain):
        order = np.random.default_rng(
            np.random.SeedSequence((seed, epoch))).permutation(len(images))
        out = []
        for start in range(0, len(order), batch_size):
            pick = order[start:start + batch_size]
            out.append(Batch(
                images=Tensor(images[pick]),
                labels=None if labels is None else Tensor(labels[pick]),
                domain=domain))
        return out

    @staticmethod
    def _ordered(images, labels, batch_size, domain):
        out = []
        for start in range(0, len(images), batch_size):
            out.append(Batch(
                images=Tensor(images[start:start + batch_size]),
                labels=Tensor(labels[start:start + batch_size]),
                domain=domain))
        return out

    def source_train_batches(self, batch_size, seed, epoch):
        return self._shuffled(self.source_images, self.source_labels,
                              batch_size, seed, epoch, "source")

    def target_train_batches(self, batch_size, seed, epoch):
        return self._shuffled(self.target_images, None, batch_size, seed, epoch, "target")

    def source_eval_batches(self, batch_size):
        return self._ordered(*self.source_eval, batch_size, "source")

    def target_eval_batches(self, batch_size):
        return self._ordered(*self.target_eval, batch_size, "target")
