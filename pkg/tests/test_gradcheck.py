import numpy as np
import pytest

from conftest import random_graph
from gmixer.gradcheck import grad_check, grad_check_probes, model_gradcheck, relative_error
from gmixer.graphs import pad_batch
from gmixer.layers import MixerParams, gmn_layer, mixer_block, GmnLayerParams
from gmixer.params import ParamRegistry
from gmixer.tensor import Tensor, corrupted_backward, gather_rows, matmul, mul, tensor_sum


def _jitter(reg, rng, scale=0.2):
    for p in reg:
        p.set_value(p.data + scale * rng.standard_normal(p.shape))


def test_relative_error_floor():
    assert relative_error(1e-10, 3e-10) == pytest.approx(2e-10)
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_linear_model_is_exact(rng):
    reg = ParamRegistry(rng_seed=3)
    w = reg.add("w", (4, 2), "normal")
    x = Tensor(rng.normal(size=(5, 4)))
    c = rng.normal(size=(5, 2))
    err = grad_check(lambda: tensor_sum(mul(matmul(x, w.value), c)), reg, probe_count=20)
    assert err < 1e-9


def test_mixer_block_alone(rng):
    reg = ParamRegistry(rng_seed=4)
    p = MixerParams.create(reg, "m", 6, 5, 7, 9)
    _jitter(reg, rng)
    x = Tensor(rng.normal(size=(2, 6, 5)))
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=bool)
    c = rng.normal(size=(2, 6, 5))
    err = grad_check(lambda: tensor_sum(mul(mixer_block(x, mask, p), c)), reg, probe_count=80, seed=1)
    assert err < 1e-4


def test_single_gmn_layer(rng):
    graphs = [random_graph(rng, 5) for _ in range(2)]
    batch = pad_batch(graphs, 7)
    reg = ParamRegistry(rng_seed=5)
    layer = GmnLayerParams.create(reg, "l", 7, 6, 3, 5, 8)
    bond_table = reg.add("bonds", (3, 3), "normal")
    h0 = reg.add("h0", (2, 7, 6), "normal")
    _jitter(reg, rng)
    c = rng.normal(size=(2, 7, 6))

    def f():
        bonds = gather_rows(bond_table.value, batch.bond_types)
        return tensor_sum(mul(gmn_layer(h0.value, batch, bonds, layer, 0.9), c))

    assert grad_check(f, reg, probe_count=120, seed=2) < 1e-4


def test_model_gradcheck_defaults():
    worst = model_gradcheck(seed=0)
    assert set(worst) >= {"embed.atom", "embed.bond", "layer0.pre", "layer1.mixer", "readout.w1"}
    assert max(worst.values()) < 1e-4


def test_single_node_graph_is_differentiable():
    assert max(model_gradcheck(seed=2, nodes=1).values()) < 1e-4


def test_detects_corrupted_backward():
    with corrupted_backward("layer_norm", 1.5):
        worst = model_gradcheck(seed=0, probes=60)
    assert max(worst.values()) > 1e-2


def test_every_parameter_probed(rng):
    reg = ParamRegistry()
    for k in range(6):
        reg.add(f"p{k}", (3,), "normal")
    probes = grad_check_probes(lambda: tensor_sum(mul(reg["p0"].value, reg["p5"].value)), reg, probe_count=6)
    assert {p.param for p in probes} == set(reg.names())
