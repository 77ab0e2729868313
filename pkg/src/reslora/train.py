"""Teacher-student tasks, the optimisation loop and per-layer norm windows."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from reslora.autodiff import backward, mse_and_grad
from reslora.model import BaseLayer, ForwardTrace, ResLoRAModel, base_forward, forward
from reslora.tensor import Matrix, SeededRng, ShapeError, column_norms, gaussian_fill, identity

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
DEFAULT_WINDOW = 64


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class NormWindow:
    """FIFO of the most recent batch-mean norms seen at one layer."""

    layer: int
    capacity: int = DEFAULT_WINDOW
    values: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.values = deque((float(v) for v in self.values), maxlen=self.capacity)

    def push(self, value: float):
        if not value >= 0:
            raise ValueError(f"norms are nonnegative, got {value}")
        self.values.append(float(value))

    def mean(self) -> float:
        if not self.values:
            raise ValueError(f"norm window for layer {self.layer} is empty")
        return float(np.mean(self.values))

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0
    window_capacity: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.window_capacity < 1:
            raise ValueError("window_capacity must be >= 1")


@dataclass
class SyntheticTask:
    """Regression onto a perturbed copy of the student's frozen stack.

    Inputs are standard normal columns; the loss is mean squared error.
    """

    teacher: list[BaseLayer]
    seed: int
    shift: float

    @property
    def d_in(self) -> int:
        return self.teacher[0].shape[1]

    def target(self, x: Matrix) -> Matrix:
        return base_forward(self.teacher, x)

    def sample(self, rng: SeededRng, batch: int) -> tuple[Matrix, Matrix]:
        x = gaussian_fill(rng, self.d_in, batch, 1.0)
        return x, self.target(x)

    def eval_batch(self, batch: int = 256) -> tuple[Matrix, Matrix]:
        """Fixed held-out batch, a pure function of the task seed."""
        return self.sample(SeededRng(self.seed, stream=2), batch)


@dataclass
class LossCurve:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float):
        self.steps.append(step)
        self.losses.append(loss)

    def __len__(self) -> int:
        return len(self.losses)

    @property
    def final(self) -> float:
        return self.losses[-1]

    def tail_mean(self, k: int = 20) -> float:
        """Mean over the last ``k`` recorded losses (smooths batch noise)."""
        return float(np.mean(self.losses[-k:]))


def make_task(
    seed: int,
    depth: int,
    width: int,
    shift: float,
    activation: str = "tanh",
    gain: float | None = None,
    residual: bool = False,
) -> tuple[list[BaseLayer], SyntheticTask]:
    """Frozen student stack plus a teacher whose weights are perturbed copies.

    Student ``W_n = [I +] gain * G_n`` with ``G_n`` standard normal, so
    ``gain`` is the entrywise std (default ``1/sqrt(width)``, norm-preserving);
    ``gain * sqrt(width) < 1`` gives a stack whose signal and gradients shrink
    layer by layer. Teacher ``W_n + shift * G'_n``. Hidden layers use
    ``activation``; the last layer is linear. ``residual`` adds the identity,
    giving the slowly-varying hidden states of a residual stream.
    """
    if depth < 1 or width < 1:
        raise ValueError("depth and width must be >= 1")
    if shift < 0:
        raise ValueError("shift must be >= 0")
    if gain is None:
        gain = 1.0 / np.sqrt(width)
    rng = SeededRng(seed, stream=0)
    student, teacher = [], []
    for n in range(depth):
        W = gaussian_fill(rng, width, width, gain)
        if residual:
            W = W + identity(width)
        act = activation if n < depth - 1 else "identity"
        student.append(BaseLayer(W, act))
        noise = shift * rng.standard_normal((width, width))
        teacher.append(BaseLayer(W + noise, act))
    return student, SyntheticTask(teacher, seed, shift)


def mse_loss(pred: Matrix, target: Matrix) -> float:
    if np.shape(pred) != np.shape(target):
        raise ShapeError(f"shape mismatch: {np.shape(pred)} vs {np.shape(target)}")
    return mse_and_grad(pred, target)[0]


def sgd_step(params: list[Matrix], grads: list[Matrix], state=None, lr: float = 1e-2):
    return [p - lr * g for p, g in zip(params, grads)], state


@dataclass
class AdamState:
    m: list[Matrix]
    v: list[Matrix]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[Matrix]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: list[Matrix],
    grads: list[Matrix],
    state: AdamState | None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    if state is None:
        state = AdamState.zeros_like(params)
    t = state.t + 1
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        ms.append(m)
        vs.append(v)
    return new_params, AdamState(ms, vs, t)


def window_quantity(trace: ForwardTrace, n: int) -> Matrix:
    """What the input-based merge needs at layer ``n``: ``A_n x_n`` for ms, else ``x_n``."""
    if trace.structure == "ms":
        return trace.down[n]
    return trace.inputs[n]


def push_norms(windows: list[NormWindow], trace: ForwardTrace):
    for w in windows:
        w.push(float(np.mean(column_norms(window_quantity(trace, w.layer)))))


def collect_windows(model: ResLoRAModel, x: Matrix, capacity: int = DEFAULT_WINDOW) -> list[NormWindow]:
    """Windows filled from a single forward pass over ``x``."""
    windows = [NormWindow(n, capacity) for n in range(model.depth)]
    push_norms(windows, forward(model, x))
    return windows


def evaluate(model: ResLoRAModel, task: SyntheticTask, batch: int = 256) -> float:
    x, y = task.eval_batch(batch)
    return mse_loss(forward(model, x).output, y)


def _params(model: ResLoRAModel) -> list[Matrix]:
    out = []
    for ad in model.adapters:
        out.extend((ad.A, ad.B))
    return out


def _assign(model: ResLoRAModel, params: list[Matrix]):
    for n, ad in enumerate(model.adapters):
        ad.A, ad.B = params[2 * n], params[2 * n + 1]


def train(
    model: ResLoRAModel, task: SyntheticTask, config: TrainConfig
) -> tuple[ResLoRAModel, LossCurve, list[NormWindow]]:
    """Optimise adapter A/B on fresh batches; the input model is left untouched.

    Each step records the pre-update batch loss and pushes the batch-mean
    column norm of the merge-relevant quantity into every layer's window.
    """
    if model.d_in != task.d_in or model.d_out != task.teacher[-1].shape[0]:
        raise ShapeError("model and task dimensions differ")
    model = model.copy()
    rng = SeededRng(config.seed, stream=1)
    windows = [NormWindow(n, config.window_capacity) for n in range(model.depth)]
    curve = LossCurve()
    step_fn = adam_step if config.optimizer == "adam" else sgd_step
    state = None

    for step in range(config.steps):
        x, y = task.sample(rng, config.batch_size)
        trace = forward(model, x)
        loss, dout = mse_and_grad(trace.output, y)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        curve.append(step, loss)
        push_norms(windows, trace)
        grads = backward(model, trace, dout)
        flat = []
        for dA, dB in zip(grads.dA, grads.dB):
            flat.extend((dA, dB))
        params, state = step_fn(_params(model), flat, state, lr=config.learning_rate)
        _assign(model, params)

    log.debug("trained %s for %d steps, final loss %.3g", model.structure, config.steps, curve.final)
    return model, curve, windows
