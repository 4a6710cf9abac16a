"""Single-phase end-to-end training with Adam."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .shapes import Dataset
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.value = epoch, step, value


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_sp: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    projection_interval: str = "5"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.projection_interval not in ("final", "never"):
            if int(self.projection_interval) < 1:
                raise ValueError("projection_interval must be 'final', 'never' or a positive int")

    def projects_after(self, epoch: int) -> bool:
        """Whether prototypes are projected after 1-based ``epoch``."""
        if self.projection_interval == "never":
            return False
        if self.projection_interval == "final":
            return epoch == self.epochs
        return epoch % int(self.projection_interval) == 0 or epoch == self.epochs


# ---------------------------------------------------------------------------
# loss


def loss_terms(trace: M.ForwardTrace, y, lambda_sp: float) -> tuple[Tensor, Tensor]:
    """Batch-mean cross-entropy and super-prototype terms.

    The super-prototype term rewards the target class's score and penalises
    the others: ``lambda * (sum_{k != y} ss_k - ss_y)``.
    """
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    ce = T.softmax_cross_entropy(trace.logits, y)
    if trace.ss is None or lambda_sp == 0:
        return ce, Tensor(0.0)
    B, K = trace.ss.shape
    sign = np.ones((B, K))
    sign[np.arange(B), y] = -1.0
    sp = T.mul(T.sum_(T.mul(trace.ss, Tensor(sign))), lambda_sp / B)
    return ce, sp


def loss_total(trace: M.ForwardTrace, y, lambda_sp: float = 1.0) -> Tensor:
    ce, sp = loss_terms(trace, y, lambda_sp)
    return T.add(ce, sp)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place bias-corrected Adam update of every tensor in ``params``."""
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise ValueError(f"no gradient for trainable tensor(s): {', '.join(missing)}")
    state.step += 1
    c1 = 1 - beta1 ** state.step
    c2 = 1 - beta2 ** state.step
    for name, t in params.items():
        g = t.grad
        if weight_decay:
            g = g + weight_decay * t.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# training / evaluation


def evaluate(params: M.ModelParams, dataset: Dataset, split: str = "test") -> float:
    idx = dataset.split(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = M.predict(params, dataset.images(idx))
    return float(np.mean(pred == dataset.labels(idx)))


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    sp_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    initial_test_acc: float = float("nan")
    pre_projection_test_acc: float = float("nan")
    final_test_acc: float = float("nan")
    final_train_acc: float = float("nan")
    wall_clock: float = 0.0

    def to_lines(self) -> str:
        """Line-delimited epoch records plus one summary record (no timing)."""
        out = [json.dumps(asdict(e), sort_keys=True) for e in self.epochs]
        summary = {"summary": {
            "initial_test_acc": self.initial_test_acc,
            "pre_projection_test_acc": self.pre_projection_test_acc,
            "final_test_acc": self.final_test_acc,
            "final_train_acc": self.final_train_acc,
            "epochs": len(self.epochs),
        }}
        out.append(json.dumps(summary, sort_keys=True))
        return "\n".join(out) + "\n"

    @classmethod
    def from_lines(cls, text: str) -> "TrainReport":
        rep = cls()
        for line in text.splitlines():
            rec = json.loads(line)
            if "summary" in rec:
                s = rec["summary"]
                rep.initial_test_acc = s["initial_test_acc"]
                rep.pre_projection_test_acc = s["pre_projection_test_acc"]
                rep.final_test_acc = s["final_test_acc"]
                rep.final_train_acc = s["final_train_acc"]
            else:
                rep.epochs.append(EpochRecord(**rec))
        return rep


def train(model_config: M.ModelConfig, dataset: Dataset, config: TrainConfig,
          params: M.ModelParams | None = None, eval_every: int = 1):
    """Jointly optimise every parameter group; returns ``(params, report, projection)``.

    Batches are drawn from a per-epoch shuffle seeded by ``config.seed``.
    Test accuracy is recorded every ``eval_every`` epochs (and always at the end).
    """
    train_idx = dataset.split("train")
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    if params is None:
        params = M.init_params(model_config, seed=config.seed)
    trainable = params.trainable()
    for t in trainable.values():
        t.requires_grad = True
    images = dataset.images()
    labels = dataset.labels()
    train_images = images[train_idx]
    state = AdamState()
    report = TrainReport(initial_test_acc=evaluate(params, dataset, "test"))
    projection = None
    start = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(epoch,)))
        order = train_idx[rng.permutation(len(train_idx))]
        ce_sum = sp_sum = 0.0
        correct = 0
        for step, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = order[lo:lo + config.batch_size]
            y = labels[batch]
            with Tape() as tape:
                trace = M.forward(params, images[batch])
                ce, sp = loss_terms(trace, y, config.lambda_sp)
                loss = T.add(ce, sp)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, step, value)
            for t in trainable.values():
                t.grad = None
            backward(loss, tape)
            adam_step(trainable, state, config.learning_rate, config.adam_beta1,
                      config.adam_beta2, config.adam_eps, config.weight_decay)
            ce_sum += ce.item() * len(batch)
            sp_sum += sp.item() * len(batch)
            correct += int((trace.logits.data.argmax(axis=1) == y).sum())

        if "prototypes" in trainable and config.projects_after(epoch):
            if epoch == config.epochs:
                report.pre_projection_test_acc = evaluate(params, dataset, "test")
            projection = M.project_prototypes(params, train_images, image_ids=train_idx)
        last = epoch == config.epochs
        test_acc = (evaluate(params, dataset, "test")
                    if last or epoch % eval_every == 0 else float("nan"))
        rec = EpochRecord(epoch, ce_sum / len(order), sp_sum / len(order),
                          correct / len(order), test_acc)
        report.epochs.append(rec)
        log.info("epoch %d ce=%.4f sp=%.4f train_acc=%.4f test_acc=%.4f",
                 epoch, rec.ce_loss, rec.sp_loss, rec.train_acc, rec.test_acc)

    for t in params.tensors.values():
        t.requires_grad = False
        t.grad = None
    report.final_test_acc = report.epochs[-1].test_acc
    report.final_train_acc = evaluate(params, dataset, "train")
    if np.isnan(report.pre_projection_test_acc):
        report.pre_projection_test_acc = report.final_test_acc
    report.wall_clock = time.perf_counter() - start
    return params, report, projection



def over_seeds(values) -> tuple[float, float]:
    """Mean and sample standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0
