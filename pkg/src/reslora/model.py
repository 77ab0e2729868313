"""Frozen linear stacks with LoRA adapters and the residual shortcut variants.

Batches are column-stacked: an input ``x`` of shape ``(d_in, batch)`` holds
one example per column. Each layer computes a pre-activation ``h_n`` and
feeds ``act(h_n)`` to the next layer.

Four forward semantics are supported, selected by ``ResLoRAModel.structure``:

``none``  ``h_n = W_n x_n + s B_n A_n x_n``
``is``    ``h_n = W_n x_n + s B_n A_n (x_n + x_{n-1})`` with ``x_{-1} = x_0``
``bs``    ``h_n = W_n x_n + s (sum_k B_{n-k} A_{n-k}) x_n``
``ms``    ``h_n = W_n x_n + s B_n (sum_k A_{n-k} x_{n-k})``

where ``k`` runs over ``0..effective_m(n, pre_num)``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from reslora.tensor import Matrix, SeededRng, ShapeError, as_matrix, frozen, gaussian_fill, zeros

STRUCTURES = ("none", "is", "bs", "ms")
ACTIVATIONS = ("identity", "tanh")
INIT_STD = 0.02


class StructureError(ValueError):
    """Invalid model layout for the requested shortcut structure."""


def activate(tag: str, h: Matrix) -> Matrix:
    if tag == "identity":
        return h
    if tag == "tanh":
        return np.tanh(h)
    raise StructureError(f"unknown activation {tag!r}")


def activation_grad(tag: str, out: Matrix) -> Matrix | None:
    """Derivative of the activation expressed via its output; None for identity."""
    if tag == "identity":
        return None
    if tag == "tanh":
        return 1.0 - out * out
    raise StructureError(f"unknown activation {tag!r}")


@dataclass
class AdapterBlock:
    A: Matrix  # rank x d_in
    B: Matrix  # d_out x rank
    scale: float = 1.0

    def __post_init__(self):
        self.A = as_matrix(self.A)
        self.B = as_matrix(self.B)
        if self.A.shape[0] != self.B.shape[1]:
            raise ShapeError(f"A is {self.A.shape} but B is {self.B.shape}; ranks differ")
        # 1-d hand-checkable models need rank == min dim, so only rank > min is refused
        if self.rank > min(self.d_in, self.d_out):
            raise ShapeError(f"rank {self.rank} exceeds min(d_in={self.d_in}, d_out={self.d_out})")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        self.scale = float(self.scale)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta(self) -> Matrix:
        """The block's weight-space contribution ``s * B @ A``."""
        return self.scale * (self.B @ self.A)


@dataclass(frozen=True)
class BaseLayer:
    W: Matrix  # d_out x d_in, read-only
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "W", frozen(as_matrix(self.W)))
        if self.activation not in ACTIVATIONS:
            raise StructureError(f"unknown activation {self.activation!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass
class Layer:
    base: BaseLayer
    adapter: AdapterBlock

    def __post_init__(self):
        if self.base.shape != (self.adapter.d_out, self.adapter.d_in):
            raise ShapeError(
                f"adapter maps {self.adapter.d_in}->{self.adapter.d_out} "
                f"but W is {self.base.shape[0]}x{self.base.shape[1]}"
            )


def effective_m(n: int, m: int, L: int | None = None) -> int:
    """Number of earlier blocks layer ``n`` may reach; ``m == -1`` means all."""
    if L is not None and not 0 <= n < L:
        raise IndexError(f"layer {n} outside 0..{L - 1}")
    if m < -1:
        raise ValueError(f"pre_num must be >= -1, got {m}")
    if m == -1:
        return n
    return min(m, n)


@dataclass
class ResLoRAModel:
    layers: list[Layer]
    structure: str = "none"
    pre_num: int = 0

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise StructureError(f"unknown structure {self.structure!r}; expected one of {STRUCTURES}")
        if not self.layers:
            raise StructureError("model needs at least one layer")
        if self.pre_num < -1:
            raise StructureError(f"pre_num must be >= -1, got {self.pre_num}")
        for n in range(1, len(self.layers)):
            if self.layers[n].base.shape[1] != self.layers[n - 1].base.shape[0]:
                raise ShapeError(f"layer {n} input dim does not match layer {n - 1} output dim")
        self._check_shortcuts()

    def _check_shortcuts(self):
        L = len(self.layers)
        if self.structure == "is":
            for n in range(1, L):
                if self.layers[n].base.shape[1] != self.layers[n - 1].base.shape[1]:
                    raise StructureError(
                        f"input shortcut needs equal input dims; layer {n - 1} takes "
                        f"{self.layers[n - 1].base.shape[1]}, layer {n} takes {self.layers[n].base.shape[1]}"
                    )
        elif self.structure in ("bs", "ms"):
            for n in range(L):
                here = self.layers[n]
                for k in range(1, effective_m(n, self.pre_num) + 1):
                    there = self.layers[n - k]
                    if there.base.shape != here.base.shape:
                        raise StructureError(
                            f"layers {n - k} and {n} share a shortcut but have shapes "
                            f"{there.base.shape} and {here.base.shape}"
                        )
                    if there.adapter.rank != here.adapter.rank:
                        raise StructureError(f"layers {n - k} and {n} share a shortcut but ranks differ")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].base.shape[1]

    @property
    def d_out(self) -> int:
        return self.layers[-1].base.shape[0]

    @property
    def bases(self) -> list[BaseLayer]:
        return [layer.base for layer in self.layers]

    @property
    def adapters(self) -> list[AdapterBlock]:
        return [layer.adapter for layer in self.layers]

    def m_eff(self, n: int) -> int:
        if self.structure in ("bs", "ms"):
            return effective_m(n, self.pre_num, self.depth)
        return 0

    def copy(self) -> "ResLoRAModel":
        """Copy with independent adapters; frozen bases are shared."""
        layers = [Layer(layer.base, copy.deepcopy(layer.adapter)) for layer in self.layers]
        return ResLoRAModel(layers, self.structure, self.pre_num)

    def with_structure(self, structure: str, pre_num: int | None = None) -> "ResLoRAModel":
        """Same parameters (copied) wired with a different shortcut structure."""
        out = self.copy()
        return ResLoRAModel(out.layers, structure, self.pre_num if pre_num is None else pre_num)


@dataclass
class ForwardTrace:
    """Everything backward and the norm collectors need from one forward pass.

    ``inputs[n]`` is ``x_n``; ``pre[n]`` is ``h_n``; ``post[n]`` is
    ``act(h_n)``; ``down[n]`` is ``A_n`` applied to the input the adapter sees
    at layer ``n`` (``x_n`` or, for ``is``, ``x_n + x_{n-1}``); ``mid[n]`` is
    the summed ``A x`` vector ``B_n`` receives under ``ms``.
    """

    structure: str
    pre_num: int
    inputs: list[Matrix] = field(default_factory=list)
    pre: list[Matrix] = field(default_factory=list)
    post: list[Matrix] = field(default_factory=list)
    down: list[Matrix] = field(default_factory=list)
    mid: list[Matrix] = field(default_factory=list)
    mixed: list[Matrix] = field(default_factory=list)

    @property
    def output(self) -> Matrix:
        return self.post[-1]

    def __len__(self) -> int:
        return len(self.pre)


def _check_input(model: ResLoRAModel, x: Matrix) -> Matrix:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.ndim != 2 or x.shape[0] != model.d_in:
        raise ShapeError(f"input has shape {x.shape}; model expects ({model.d_in}, batch)")
    return x


def _run(model: ResLoRAModel, x: Matrix, structure: str) -> ForwardTrace:
    x = _check_input(model, x)
    trace = ForwardTrace(structure, model.pre_num)
    for n, layer in enumerate(model.layers):
        W, ad = layer.base.W, layer.adapter
        trace.inputs.append(x)
        if structure == "none":
            z = ad.A @ x
            h = W @ x + ad.scale * (ad.B @ z)
        elif structure == "is":
            u = x + (trace.inputs[n - 1] if n > 0 else x)
            trace.mixed.append(u)
            z = ad.A @ u
            h = W @ x + ad.scale * (ad.B @ z)
        elif structure == "bs":
            z = ad.A @ x
            acc = ad.B @ z
            for k in range(1, model.m_eff(n) + 1):
                prev = model.layers[n - k].adapter
                acc = acc + prev.B @ (prev.A @ x)
            h = W @ x + ad.scale * acc
        elif structure == "ms":
            z = ad.A @ x
            c = z
            for k in range(1, model.m_eff(n) + 1):
                c = c + trace.down[n - k]
            trace.mid.append(c)
            h = W @ x + ad.scale * (ad.B @ c)
        else:
            raise StructureError(f"unknown structure {structure!r}")
        trace.down.append(z)
        trace.pre.append(h)
        x = activate(layer.base.activation, h)
        trace.post.append(x)
    return trace


def forward_plain(model: ResLoRAModel, x: Matrix) -> ForwardTrace:
    """Plain LoRA semantics on the model's weights, ignoring any shortcuts."""
    return _run(model, x, "none")


def forward_is(model: ResLoRAModel, x: Matrix) -> ForwardTrace:
    _require(model, "is")
    return _run(model, x, "is")


def forward_bs(model: ResLoRAModel, x: Matrix) -> ForwardTrace:
    _require(model, "bs")
    return _run(model, x, "bs")


def forward_ms(model: ResLoRAModel, x: Matrix) -> ForwardTrace:
    _require(model, "ms")
    return _run(model, x, "ms")


def forward(model: ResLoRAModel, x: Matrix) -> ForwardTrace:
    if model.structure not in STRUCTURES:
        raise StructureError(f"unknown structure {model.structure!r}")
    return _run(model, x, model.structure)


def _require(model: ResLoRAModel, structure: str):
    if model.structure != structure:
        raise StructureError(f"model structure is {model.structure!r}, not {structure!r}")


def base_forward(bases: list[BaseLayer], x: Matrix) -> Matrix:
    """Output of the frozen stack alone."""
    x = np.asarray(x, dtype=np.float64)
    for base in bases:
        if x.shape[0] != base.shape[1]:
            raise ShapeError(f"input has {x.shape[0]} rows; layer expects {base.shape[1]}")
        x = activate(base.activation, base.W @ x)
    return x


def init_adapter(rng: SeededRng, d_in: int, d_out: int, rank: int, alpha: float) -> AdapterBlock:
    """Fresh block: Gaussian A (std 0.02), zero B, scale alpha / rank."""
    A = gaussian_fill(rng, rank, d_in, INIT_STD)
    return AdapterBlock(A, zeros(d_out, rank), alpha / rank)


def build_model(
    bases: list[BaseLayer],
    structure: str = "none",
    rank: int = 4,
    alpha: float = 8.0,
    pre_num: int = 4,
    rng: SeededRng | None = None,
    seed: int = 0,
) -> ResLoRAModel:
    """Attach freshly initialised adapters to a frozen stack.

    Initialisation does not depend on ``structure``, so models built from the
    same seed differ only in wiring.
    """
    if rng is None:
        rng = SeededRng(seed, stream=0)
    layers = [Layer(b, init_adapter(rng, b.shape[1], b.shape[0], rank, alpha)) for b in bases]
    return ResLoRAModel(layers, structure, pre_num)


def random_model(
    seed: int,
    structure: str,
    depth: int,
    width: int,
    rank: int,
    pre_num: int = -1,
    activation: str = "tanh",
    adapter_std: float = 0.05,
    alpha: float | None = None,
) -> ResLoRAModel:
    """Square stack with Gaussian W (std 1/sqrt(width)) and nonzero A and B.

    Used for gradient checks, where a zero B would hide most paths.
    """
    rng = SeededRng(seed, stream=7)
    scale = 2.0 if alpha is None else alpha / rank
    layers = []
    for _ in range(depth):
        W = gaussian_fill(rng, width, width, 1.0 / np.sqrt(width))
        A = gaussian_fill(rng, rank, width, adapter_std)
        B = gaussian_fill(rng, width, rank, adapter_std)
        layers.append(Layer(BaseLayer(W, activation), AdapterBlock(A, B, scale)))
    return ResLoRAModel(layers, structure, pre_num)


def promote(model: ResLoRAModel, dtype) -> ResLoRAModel:
    """Copy of ``model`` with every matrix cast to ``dtype`` (e.g. long double)."""
    out = model.copy()
    for layer in out.layers:
        layer.adapter.A = layer.adapter.A.astype(dtype)
        layer.adapter.B = layer.adapter.B.astype(dtype)
        # bases are shared with ``model``; swap in a private one
        base = copy.copy(layer.base)
        object.__setattr__(base, "W", layer.base.W.astype(dtype))
        layer.base = base
    return out
