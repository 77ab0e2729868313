import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reslora.model import (
    STRUCTURES,
    AdapterBlock,
    BaseLayer,
    Layer,
    ResLoRAModel,
    StructureError,
    base_forward,
    build_model,
    effective_m,
    forward,
    forward_bs,
    forward_is,
    forward_ms,
    forward_plain,
    random_model,
)
from reslora.tensor import SeededRng, ShapeError, as_matrix, gaussian_fill


def scalar_stack(n_layers, W=1.0, A=1.0, B=1.0, s=1.0, structure="none", pre_num=0):
    layers = [
        Layer(BaseLayer(as_matrix(W), "identity"), AdapterBlock(as_matrix(A), as_matrix(B), s))
        for _ in range(n_layers)
    ]
    return ResLoRAModel(layers, structure, pre_num)


ONE = as_matrix(1.0)


@pytest.mark.parametrize("n, m, expected", [(0, 4, 0), (3, 2, 2), (5, -1, 5), (2, 0, 0)])
def test_effective_m(n, m, expected):
    assert effective_m(n, m) == expected


def test_plain_scalar_example():
    model = scalar_stack(1, W=2.0, A=3.0, B=1.0, s=2.0)
    assert forward_plain(model, ONE).output[0, 0] == 8.0


def test_is_two_layer_example():
    model = scalar_stack(2, structure="is")
    trace = forward_is(model, ONE)
    assert [h[0, 0] for h in trace.pre] == [3.0, 7.0]
    assert forward(model, ONE).output[0, 0] == 7.0


def test_bs_two_layer_example():
    model = scalar_stack(2, structure="bs", pre_num=1)
    trace = forward_bs(model, ONE)
    assert [h[0, 0] for h in trace.pre] == [2.0, 6.0]


def test_ms_two_layer_example():
    model = scalar_stack(2, structure="ms", pre_num=1)
    trace = forward_ms(model, ONE)
    assert [h[0, 0] for h in trace.pre] == [2.0, 5.0]


def test_single_layer_is_doubles_adapter():
    m = random_model(4, "is", 1, 5, 2, activation="identity")
    x = SeededRng(0).normal(5, 3)
    ad, W = m.layers[0].adapter, m.layers[0].base.W
    np.testing.assert_allclose(forward(m, x).output, W @ x + 2 * ad.scale * ad.B @ (ad.A @ x), rtol=1e-13)


def test_forward_requires_matching_structure():
    model = scalar_stack(2, structure="bs", pre_num=1)
    with pytest.raises(StructureError):
        forward_is(model, ONE)
    with pytest.raises(StructureError):
        ResLoRAModel(model.layers, "bogus", 0)


def test_input_shape_checked():
    model = random_model(0, "none", 2, 4, 2)
    with pytest.raises(ShapeError):
        forward(model, np.ones((3, 2)))


@pytest.mark.parametrize("structure", STRUCTURES)
@pytest.mark.parametrize("pre_num", [0, 1, 3, -1])
def test_zero_adapter_is_base(structure, pre_num):
    rng = SeededRng(9)
    bases = [BaseLayer(gaussian_fill(rng, 6, 6, 0.4), "tanh") for _ in range(4)]
    model = build_model(bases, structure, rank=2, pre_num=pre_num, seed=3)
    x = rng.normal(6, 50)
    assert np.array_equal(forward(model, x).output, base_forward(bases, x))


@pytest.mark.parametrize("structure", ["bs", "ms"])
def test_m0_bitwise_equals_plain(structure):
    model = random_model(2, structure, 5, 6, 2, pre_num=0)
    x = SeededRng(1).normal(6, 7)
    plain = forward(model.with_structure("none"), x).output
    assert forward(model, x).output.tobytes() == plain.tobytes()


def test_zero_input_zero_output():
    model = random_model(0, "ms", 3, 4, 2, activation="identity")
    assert not forward(model, np.zeros((4, 3))).output.any()


def test_trace_shapes():
    model = random_model(1, "ms", 4, 5, 2, pre_num=2)
    trace = forward(model, SeededRng(2).normal(5, 3))
    assert len(trace) == 4
    assert all(z.shape == (2, 3) for z in trace.down)
    assert all(h.shape == (5, 3) for h in trace.pre)


def test_shortcut_shape_gating():
    rng = SeededRng(0)
    a = Layer(BaseLayer(rng.normal(4, 4), "tanh"), AdapterBlock(rng.normal(2, 4), rng.normal(4, 2), 1.0))
    b = Layer(BaseLayer(rng.normal(3, 4), "tanh"), AdapterBlock(rng.normal(2, 4), rng.normal(3, 2), 1.0))
    with pytest.raises(StructureError):
        ResLoRAModel([a, b], "bs", 1)
    # same stack is fine without shortcuts
    ResLoRAModel([a, b], "bs", 0)


def test_adapter_invariants():
    with pytest.raises(ShapeError):
        AdapterBlock(np.ones((2, 4)), np.ones((4, 3)), 1.0)
    with pytest.raises(ShapeError):
        AdapterBlock(np.ones((5, 4)), np.ones((4, 5)), 1.0)
    with pytest.raises(ValueError):
        AdapterBlock(np.ones((1, 4)), np.ones((4, 1)), 0.0)


def test_init_b_zero_and_scale():
    model = build_model([BaseLayer(np.eye(8), "tanh")] * 2, rank=4, alpha=8.0, seed=0)
    for ad in model.adapters:
        assert not ad.B.any() and ad.A.any()
        assert ad.scale == 2.0


def test_base_weights_are_frozen():
    base = BaseLayer(np.eye(3), "tanh")
    with pytest.raises(ValueError):
        base.W[0, 0] = 2.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(STRUCTURES), st.floats(-5, 5, allow_nan=False))
def test_linear_in_x_for_identity(seed, structure, c):
    model = random_model(seed, structure, 3, 5, 2, pre_num=-1, activation="identity")
    x = SeededRng(seed + 1).normal(5, 4)
    lhs, rhs = forward(model, c * x).output, c * forward(model, x).output
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.max(np.abs(rhs)))
