"""Reverse-mode gradients for adapter parameters.

The backward pass is written out per structure rather than taped: the
architecture is fixed, so each shortcut's chain rule is a few lines. A
parameter shared by several layers (``bs``), or an intermediate consumed by
later layers (``is`` inputs, ``ms`` down-projections), accumulates the sum of
every path's contribution. Frozen ``W`` never receives a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from reslora.model import ForwardTrace, ResLoRAModel, activation_grad, forward, promote
from reslora.tensor import Matrix, SeededRng, frobenius_norm


class TraceMismatchError(ValueError):
    pass


class Coord(NamedTuple):
    """A trainable scalar: ``param`` is ``"A"`` or ``"B"``."""

    layer: int
    param: str
    row: int
    col: int


@dataclass
class GradientSet:
    dA: list[Matrix]
    dB: list[Matrix]

    def __len__(self) -> int:
        return len(self.dA)

    def get(self, c: Coord) -> float:
        grads = self.dA if c.param == "A" else self.dB
        return float(grads[c.layer][c.row, c.col])


def mse_and_grad(pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def backward(model: ResLoRAModel, trace: ForwardTrace, dL_dout: Matrix) -> GradientSet:
    L = model.depth
    structure = trace.structure
    if len(trace) != L or structure not in (model.structure, "none"):
        raise TraceMismatchError(
            f"trace ({structure}, {len(trace)} layers) does not belong to model ({model.structure}, {L} layers)"
        )
    if trace.pre[0].shape[0] != model.layers[0].base.shape[0] or trace.output.shape != np.shape(dL_dout):
        raise TraceMismatchError("trace shapes do not match the model or the output gradient")

    batch = trace.inputs[0].shape[1]
    dA = [np.zeros_like(layer.adapter.A) for layer in model.layers]
    dB = [np.zeros_like(layer.adapter.B) for layer in model.layers]
    # is: gradient reaching x_n from layer n+1's shortcut
    extra = [None] * L
    # ms: gradient of each layer's A_n x_n, summed over consumer layers
    dz = [np.zeros((layer.adapter.rank, batch)) for layer in model.layers] if structure == "ms" else None

    upstream = np.asarray(dL_dout, dtype=np.float64)
    for n in reversed(range(L)):
        layer = model.layers[n]
        W, ad = layer.base.W, layer.adapter
        x = trace.inputs[n]
        gact = activation_grad(layer.base.activation, trace.post[n])
        d = upstream if gact is None else upstream * gact
        sd = ad.scale * d
        gx = W.T @ d

        if structure == "none":
            dB[n] = dB[n] + sd @ trace.down[n].T
            t = ad.B.T @ sd
            dA[n] = dA[n] + t @ x.T
            gx = gx + ad.A.T @ t
        elif structure == "is":
            u = trace.mixed[n]
            dB[n] = dB[n] + sd @ trace.down[n].T
            t = ad.B.T @ sd
            dA[n] = dA[n] + t @ u.T
            v = ad.A.T @ t
            gx = gx + v
            if n > 0:
                extra[n - 1] = v
            else:
                gx = gx + v
        elif structure == "bs":
            for k in range(model.m_eff(n) + 1):
                j = n - k
                blk = model.layers[j].adapter
                dB[j] = dB[j] + sd @ (blk.A @ x).T
                t = blk.B.T @ sd
                dA[j] = dA[j] + t @ x.T
                gx = gx + blk.A.T @ t
        elif structure == "ms":
            dB[n] = dB[n] + sd @ trace.mid[n].T
            t = ad.B.T @ sd
            for k in range(model.m_eff(n) + 1):
                dz[n - k] = dz[n - k] + t
            # every consumer of A_n x_n sits at index >= n, so dz[n] is final here
            dA[n] = dA[n] + dz[n] @ x.T
            gx = gx + ad.A.T @ dz[n]
        else:
            raise TraceMismatchError(f"unknown structure {structure!r}")

        if extra[n] is not None:
            gx = gx + extra[n]
        upstream = gx
    return GradientSet(dA, dB)


def value_and_grad(model: ResLoRAModel, x: Matrix, target: Matrix) -> tuple[float, GradientSet, ForwardTrace]:
    """MSE loss of ``forward(model, x)`` against ``target`` and its gradients."""
    trace = forward(model, x)
    loss, dout = mse_and_grad(trace.output, target)
    return loss, backward(model, trace, dout), trace


def coords(model: ResLoRAModel):
    """Every trainable coordinate, layer by layer, A before B."""
    for n, layer in enumerate(model.layers):
        for name in ("A", "B"):
            rows, cols = getattr(layer.adapter, name).shape
            for i in range(rows):
                for j in range(cols):
                    yield Coord(n, name, i, j)


def finite_diff_grad(
    model: ResLoRAModel,
    loss_fn: Callable[[ResLoRAModel], float],
    which: Coord,
    h: float = 1e-5,
) -> float:
    """Central difference of ``loss_fn`` at one adapter coordinate.

    The loss is evaluated in whatever dtype ``model`` carries; pass a
    :func:`promote`-d model to suppress round-off.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    layer, param, i, j = which
    if param not in ("A", "B"):
        raise ValueError(f"{param!r} is not a trainable parameter; only adapter A and B are")
    if not 0 <= layer < model.depth:
        raise IndexError(f"layer {layer} out of range for depth {model.depth}")
    m = getattr(model.layers[layer].adapter, param)
    if not (0 <= i < m.shape[0] and 0 <= j < m.shape[1]):
        raise IndexError(f"coordinate ({i}, {j}) outside {param} of shape {m.shape}")

    probe = model.copy()
    target = getattr(probe.layers[layer].adapter, param)
    orig = target[i, j]
    target[i, j] = orig + h
    up = loss_fn(probe)
    target[i, j] = orig - h
    down = loss_fn(probe)
    return float((up - down) / (2.0 * h))


def relative_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: Coord | None
    checked: int
    skipped: int


def gradient_check(
    model: ResLoRAModel,
    x: Matrix,
    target: Matrix,
    h: float = 1e-5,
    floor: float = 1e-8,
    corrupt: bool = False,
) -> GradCheckResult:
    """Compare ``backward`` to central differences at every adapter coordinate.

    The difference quotient is evaluated in long double: in float64 the
    loss round-off (~eps * |L| / h, about 1e-11) swamps a 1e-6 relative
    tolerance for components between 1e-8 and 1e-5. Coordinates where both
    gradients are below ``floor`` are skipped. ``corrupt`` perturbs the
    analytic gradient, as a negative control.
    """
    _, grads, _ = value_and_grad(model, x, target)
    if corrupt:
        grads.dB[-1] = grads.dB[-1] * 1.5 + 1e-3

    wide = promote(model, np.longdouble)
    xw = np.asarray(x, dtype=np.longdouble)
    tw = np.asarray(target, dtype=np.longdouble)

    def loss_fn(m: ResLoRAModel):
        diff = forward(m, xw).output - tw
        return np.mean(diff * diff)

    worst, worst_err, checked, skipped = None, 0.0, 0, 0
    for c in coords(model):
        analytic = grads.get(c)
        numeric = finite_diff_grad(wide, loss_fn, c, h)
        if abs(analytic) < floor and abs(numeric) < floor:
            skipped += 1
            continue
        checked += 1
        err = relative_error(analytic, numeric)
        if err > worst_err or worst is None:
            worst, worst_err = c, err
    return GradCheckResult(worst_err, worst, checked, skipped)


def grad_path_norms(
    model: ResLoRAModel,
    batch: Matrix,
    loss_fn: Callable[[Matrix], tuple[float, Matrix]],
) -> list[float]:
    """Frobenius norm of dL/dB_n for every layer.

    ``loss_fn`` maps the model output to ``(loss, dloss/doutput)``.
    """
    trace = forward(model, batch)
    _, dout = loss_fn(trace.output)
    grads = backward(model, trace, dout)
    return [frobenius_norm(g) for g in grads.dB]


def gradcheck_batch(seed: int, width: int, batch: int = 4) -> tuple[Matrix, Matrix]:
    """Standard normal inputs and targets for a gradient check (stream 8)."""
    rng = SeededRng(seed, stream=8)
    return rng.normal(width, batch), rng.normal(width, batch)
