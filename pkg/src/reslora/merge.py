"""Fold trained adapters, shortcuts included, back into plain linear weights.

``bs`` merges exactly. ``is`` and ``ms`` reuse inputs of earlier layers, so
their merges approximate ``x_{n-1} ~ alpha* x_n`` with a per-layer scalar:

``no``  alpha* = 0, the shortcut terms are dropped
``bi``  alpha* from the norm windows gathered during training
``bw``  alpha* from Frobenius norms of weights (merged ``W*`` for ``is``,
        the ``A`` matrices for ``ms``)

Merging runs front to back so ``bw`` can read the already merged ``W*`` of
earlier layers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from reslora.model import BaseLayer, ResLoRAModel, base_forward, forward
from reslora.tensor import Matrix, SeededRng, frobenius_norm, gaussian_fill
from reslora.train import NormWindow

METHODS = ("exact", "no", "bi", "bw")
N_EVAL = 100


class MergeError(ValueError):
    pass


@dataclass
class MergedModel:
    """A plain stack: every layer reads only its own input and its own ``W*``."""

    layers: list[BaseLayer]
    merged_A: list[Matrix] | None = None

    @property
    def weights(self) -> list[Matrix]:
        return [layer.W for layer in self.layers]

    def forward(self, x: Matrix) -> Matrix:
        return base_forward(self.layers, x)


@dataclass
class MergeReport:
    method: str
    alpha_star: list[float]
    mean_div: float = 0.0
    max_div: float = 0.0
    loss_delta: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def default_eval_inputs(d_in: int, n: int = N_EVAL, seed: int = 0) -> Matrix:
    return gaussian_fill(SeededRng(seed, stream=3), d_in, n, 1.0)


def fidelity_report(
    pre_model: ResLoRAModel,
    merged: MergedModel,
    eval_inputs: Matrix,
    targets: Matrix | None = None,
) -> dict:
    """Per-input divergence between training semantics and the merged stack.

    Each column of ``eval_inputs`` is one input; its divergence is the max
    absolute output difference. ``loss_delta`` is the relative change of the
    MSE against ``targets`` (None without targets).
    """
    before = forward(pre_model, eval_inputs).output
    after = merged.forward(eval_inputs)
    per_input = np.max(np.abs(before - after), axis=0)
    out = {"mean_div": float(np.mean(per_input)), "max_div": float(np.max(per_input)), "loss_delta": None}
    if targets is not None:
        pre_loss = float(np.mean((before - targets) ** 2))
        post_loss = float(np.mean((after - targets) ** 2))
        out["loss_delta"] = (post_loss - pre_loss) / pre_loss if pre_loss > 0 else post_loss
    return out


def _finish(model, merged, method, alphas, eval_inputs, targets):
    if eval_inputs is None:
        eval_inputs = default_eval_inputs(model.d_in)
    report = MergeReport(method, [float(a) for a in alphas], **fidelity_report(model, merged, eval_inputs, targets))
    return merged, report


def _plain(W: Matrix, activation: str) -> BaseLayer:
    return BaseLayer(W, activation)


def merge_plain(model: ResLoRAModel, eval_inputs=None, targets=None):
    """Standard LoRA merge ``W + s B A``, ignoring any shortcut wiring."""
    layers = [_plain(l.base.W + l.adapter.delta(), l.base.activation) for l in model.layers]
    return _finish(model, MergedModel(layers), "exact", [1.0] * model.depth, eval_inputs, targets)


def merge_bs(model: ResLoRAModel, eval_inputs=None, targets=None):
    """Exact: ``W*_n = W_n + s * sum_k B_{n-k} A_{n-k}``."""
    if model.structure != "bs":
        raise MergeError(f"exact merge needs a bs model, got {model.structure!r}")
    layers = []
    for n, layer in enumerate(model.layers):
        ad = layer.adapter
        acc = ad.B @ ad.A
        for k in range(1, model.m_eff(n) + 1):
            prev = model.layers[n - k].adapter
            acc = acc + prev.B @ prev.A
        layers.append(_plain(layer.base.W + ad.scale * acc, layer.base.activation))
    return _finish(model, MergedModel(layers), "exact_bs", [1.0] * model.depth, eval_inputs, targets)


def _window_mean(windows: list[NormWindow], n: int) -> float:
    if windows is None or n >= len(windows) or len(windows[n]) == 0:
        raise MergeError(f"no norm window for layer {n}; train the model first to collect one")
    return windows[n].mean()


def alpha_bi(windows: list[NormWindow], n: int) -> float:
    """``f_{n-1} / f_n`` from the windowed mean norms."""
    if n < 1:
        raise MergeError("alpha_bi needs a previous layer (n >= 1)")
    num = _window_mean(windows, n - 1)
    den = _window_mean(windows, n)
    if den == 0:
        raise MergeError(f"window mean for layer {n} is zero")
    return num / den


def alpha_bw(merged_prefix: list[Matrix], n: int) -> float:
    """``||W*_{n-2}||_F / ||W*_{n-1}||_F``; 1.0 where ``n - 2`` does not exist."""
    if n < 2:
        return 1.0
    if len(merged_prefix) < n:
        raise MergeError(f"layers before {n} must be merged first")
    den = frobenius_norm(merged_prefix[n - 1])
    if den == 0:
        raise MergeError(f"merged weight of layer {n - 1} has zero norm")
    return frobenius_norm(merged_prefix[n - 2]) / den


def merge_is(model: ResLoRAModel, method: str, windows: list[NormWindow] | None = None,
             eval_inputs=None, targets=None):
    """``W*_n = W_n + (1 + alpha*_n) s B_n A_n``; layer 0 is exact with alpha* = 1."""
    if model.structure != "is":
        raise MergeError(f"merge_is needs an is model, got {model.structure!r}")
    if method not in ("no", "bi", "bw"):
        raise MergeError(f"input-shortcut models merge with no, bi or bw, not {method!r}")
    if method == "bi" and windows is None:
        raise MergeError("merge based on input needs the norm windows collected in training")
    merged_W, alphas = [], []
    for n, layer in enumerate(model.layers):
        if n == 0:
            alpha = 1.0
        elif method == "no":
            alpha = 0.0
        elif method == "bi":
            alpha = alpha_bi(windows, n)
        else:
            alpha = alpha_bw(merged_W, n)
        alphas.append(alpha)
        merged_W.append(layer.base.W + (1.0 + alpha) * layer.adapter.delta())
    layers = [_plain(W, l.base.activation) for W, l in zip(merged_W, model.layers)]
    return _finish(model, MergedModel(layers), method, alphas, eval_inputs, targets)


def ms_ratios(model: ResLoRAModel, method: str, windows: list[NormWindow] | None, n: int) -> list[float]:
    """``alpha_{n-k}`` for ``k = 1..m_eff``: ``f_{n-k} / f_n``."""
    ks = range(1, model.m_eff(n) + 1)
    if method == "no" or not ks:
        return []
    if method == "bi":
        den = _window_mean(windows, n)
        if den == 0:
            raise MergeError(f"window mean for layer {n} is zero")
        return [_window_mean(windows, n - k) / den for k in ks]
    den = frobenius_norm(model.layers[n].adapter.A)
    if den == 0:
        raise MergeError(f"A of layer {n} has zero norm")
    return [frobenius_norm(model.layers[n - k].adapter.A) / den for k in ks]


def merge_ms(model: ResLoRAModel, method: str, windows: list[NormWindow] | None = None,
             eval_inputs=None, targets=None, fold: str = "blocks"):
    """Fold earlier down-projections into ``A*_n``, then ``W*_n = W_n + s B_n A*_n``.

    ``fold="blocks"``: ``A*_n = A_n + sum_k alpha_{n-k} A_{n-k}``.
    ``fold="scalar"``: ``A*_n = (1 + sum_k alpha_{n-k}) A_n``, i.e. every
    ``A_{n-k} x_{n-k}`` is taken as a multiple of ``A_n x_n``.
    The reported alpha* of a layer is ``sum_k alpha_{n-k}``.
    """
    if model.structure != "ms":
        raise MergeError(f"merge_ms needs an ms model, got {model.structure!r}")
    if method not in ("no", "bi", "bw"):
        raise MergeError(f"middle-shortcut models merge with no, bi or bw, not {method!r}")
    if method == "bi" and windows is None:
        raise MergeError("merge based on input needs the norm windows collected in training")
    if fold not in ("blocks", "scalar"):
        raise MergeError(f"unknown fold {fold!r}")
    layers, merged_A, alphas = [], [], []
    for n, layer in enumerate(model.layers):
        ad = layer.adapter
        ratios = ms_ratios(model, method, windows, n)
        if fold == "scalar":
            A_star = (1.0 + sum(ratios)) * ad.A
        else:
            A_star = ad.A
            for k, a in enumerate(ratios, start=1):
                A_star = A_star + a * model.layers[n - k].adapter.A
        merged_A.append(A_star)
        alphas.append(sum(ratios))
        layers.append(_plain(layer.base.W + ad.scale * (ad.B @ A_star), layer.base.activation))
    return _finish(model, MergedModel(layers, merged_A), method, alphas, eval_inputs, targets)


def merge(model: ResLoRAModel, method: str, windows: list[NormWindow] | None = None,
          eval_inputs=None, targets=None):
    """Dispatch on ``model.structure`` and ``method``."""
    if method not in METHODS:
        raise MergeError(f"unknown merge method {method!r}; expected one of {METHODS}")
    s = model.structure
    if method == "exact":
        if s == "bs":
            return merge_bs(model, eval_inputs, targets)
        if s == "none":
            return merge_plain(model, eval_inputs, targets)
        raise MergeError(f"exact merge only applies to bs (or plain) models, not {s!r}")
    if s == "is":
        return merge_is(model, method, windows, eval_inputs, targets)
    if s == "ms":
        return merge_ms(model, method, windows, eval_inputs, targets)
    raise MergeError(f"method {method!r} applies to is/ms models; use exact for {s!r}")
