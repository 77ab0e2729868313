"""Frozen-seed reference experiments shared by the CLI and the acceptance suite.

Two synthetic stacks are used:

* the attenuating stack: tanh, entry std 0.1 at width 16, so every layer
  shrinks the signal (and the gradient flowing back) by roughly 0.4x;
* the merge reference: a residual stack ``W = I + 0.02 G`` with linear
  layers, trained for a short budget. Hidden states change slowly from layer
  to layer, which is the situation the ``is`` merge approximation assumes.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from reslora.autodiff import grad_path_norms, mse_and_grad
from reslora.merge import MergeReport, merge
from reslora.model import AdapterBlock, BaseLayer, Layer, ResLoRAModel, build_model
from reslora.tensor import SeededRng, frobenius_norm
from reslora.train import LossCurve, NormWindow, TrainConfig, collect_windows, evaluate, make_task, train


@dataclass(frozen=True)
class Reference:
    structure: str
    depth: int
    width: int
    rank: int = 4
    alpha: float = 8.0
    pre_num: int = 4
    activation: str = "tanh"
    gain: float | None = None
    residual: bool = False
    shift: float = 0.1
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"


ATTENUATING = Reference("none", depth=8, width=16, activation="tanh", gain=0.1, shift=0.1,
                        steps=300, learning_rate=1e-3)
MERGE_REFERENCE = Reference("is", depth=8, width=16, activation="identity", gain=0.02, residual=True,
                            shift=0.02, steps=500, learning_rate=1e-4)
LOSS_ORDERING_SEEDS = (0, 1, 2, 3, 4)
MERGE_SEED = 0
GRAD_PATH_SEED = 7


def run(ref: Reference, seed: int, **overrides) -> tuple[ResLoRAModel, LossCurve, list[NormWindow], object]:
    """Build task and model from ``ref`` (with overrides), train, return (model, curve, windows, task)."""
    ref = replace(ref, **overrides)
    bases, task = make_task(seed, ref.depth, ref.width, ref.shift, activation=ref.activation,
                            gain=ref.gain, residual=ref.residual)
    model = build_model(bases, ref.structure, rank=ref.rank, alpha=ref.alpha, pre_num=ref.pre_num, seed=seed)
    cfg = TrainConfig(steps=ref.steps, batch_size=ref.batch_size, learning_rate=ref.learning_rate,
                      optimizer=ref.optimizer, seed=seed)
    trained, curve, windows = train(model, task, cfg)
    return trained, curve, windows, task


def loss_ordering(seeds=LOSS_ORDERING_SEEDS, tail: int = 20) -> dict[str, float]:
    """Seed-averaged tail loss for LoRA, bs(m=1) and bs(m=4) on the attenuating stack."""
    variants = {"none": ("none", 0), "bs1": ("bs", 1), "bs4": ("bs", 4)}
    out = {}
    for name, (structure, m) in variants.items():
        tails = [run(ATTENUATING, s, structure=structure, pre_num=m)[1].tail_mean(tail) for s in seeds]
        out[name] = float(np.mean(tails))
    return out


def merge_necessity(seed: int = MERGE_SEED) -> tuple[float, dict[str, MergeReport]]:
    """Train the ``is`` reference and merge it three ways on the task's held-out batch."""
    model, _, windows, task = run(MERGE_REFERENCE, seed)
    x, y = task.eval_batch()
    pre_loss = evaluate(model, task)
    reports = {m: merge(model, m, windows, x, y)[1] for m in ("no", "bi", "bw")}
    return pre_loss, reports


def grad_path(seed: int = GRAD_PATH_SEED, structures=("none", "is")) -> dict[str, list[float]]:
    """``||dL/dB_n||_F`` per layer at initialisation on the attenuating stack."""
    ref = ATTENUATING
    bases, task = make_task(seed, ref.depth, ref.width, ref.shift, activation=ref.activation, gain=ref.gain)
    x, y = task.eval_batch(64)
    out = {}
    for s in structures:
        model = build_model(bases, s, rank=ref.rank, alpha=ref.alpha, pre_num=ref.pre_num, seed=seed)
        out[s] = grad_path_norms(model, x, lambda o: mse_and_grad(o, y))
    return out


def fnorm_diff(lora: ResLoRAModel, bs: ResLoRAModel) -> list[float]:
    """Per layer: ``||merged bs block||_F - ||s B A||_F`` of a separately trained LoRA model."""
    if bs.structure != "bs" or lora.depth != bs.depth:
        raise ValueError("need a bs model and a LoRA model of the same depth")
    diffs = []
    for n, plain in enumerate(lora.layers):
        ad = bs.layers[n].adapter
        block = ad.B @ ad.A
        for k in range(1, bs.m_eff(n) + 1):
            prev = bs.layers[n - k].adapter
            block = block + prev.B @ prev.A
        diffs.append(frobenius_norm(ad.scale * block) - frobenius_norm(plain.adapter.delta()))
    return diffs


def proportional_regime(structure: str, depth: int = 6, width: int = 5, rank: int = 2, seed: int = 0,
                        batch: int = 100) -> tuple[ResLoRAModel, list[NormWindow], np.ndarray]:
    """A model whose merge-relevant quantities are exact positive multiples across layers.

    Every input lies on one line ``c v``; ``W_n = w_n I``, ``A_n = a_n u v^T``
    and ``B_n = b_n v u^T`` with positive scalars and linear layers, so each
    ``x_n`` is ``rho_n x_0`` with ``rho_n > 0``. For ``ms`` all ``A_n`` are
    equal, which makes ``A_{n-k} x_{n-k}`` proportional to ``A_n x_n``. The
    input-based merge is then exact. Returns (model, windows, eval inputs);
    the windows come from a different batch on the same line.
    """
    if structure not in ("is", "ms"):
        raise ValueError("the proportional regime is built for is and ms")
    rng = SeededRng(seed, stream=4)
    gen = rng._gen
    v = gen.standard_normal(width)
    v /= np.linalg.norm(v)
    u = gen.standard_normal(rank)
    u /= np.linalg.norm(u)
    shared_a = gen.uniform(0.2, 1.0)
    layers = []
    for _ in range(depth):
        a = shared_a if structure == "ms" else gen.uniform(0.2, 1.0)
        b = gen.uniform(0.2, 1.0)
        base = BaseLayer(gen.uniform(0.5, 1.2) * np.eye(width), "identity")
        layers.append(Layer(base, AdapterBlock(a * np.outer(u, v), b * np.outer(v, u), 0.5)))
    model = ResLoRAModel(layers, structure, -1)
    line = lambda n: np.outer(v, gen.standard_normal(n))  # noqa: E731
    windows = collect_windows(model, line(32))
    return model, windows, line(batch)
