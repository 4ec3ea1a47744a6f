import numpy as np
import pytest

from pecnet.autodiff import DimensionError, Tensor
from pecnet.nets import ARCHITECTURE, MlpSpec, architecture, init_model, mlp_forward

from oracles import mlp_numpy


@pytest.fixture(scope="module")
def model():
    return init_model(0, dtype=np.float64)


def test_same_seed_bit_identical():
    a, b = init_model(5), init_model(5)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a.tensors)


def test_different_seeds_differ():
    a, b = init_model(1), init_model(2)
    assert any(not np.array_equal(a[k].data, b[k].data) for k in a.tensors)


def test_parameter_count_matches_table_hand_sum(model):
    table = {
        "e_past": [16, 512, 256, 16],
        "e_end": [2, 8, 16, 16],
        "e_latent": [32, 8, 50, 32],
        "d_latent": [32, 1024, 512, 1024, 2],
        "phi": [32, 512, 64, 128],
        "theta": [32, 512, 64, 128],
        "g": [32, 512, 64, 32],
        "p_future": [32, 1024, 512, 256, 22],
    }
    expected = 0
    for widths in table.values():
        for n, m in zip(widths, widths[1:]):
            expected += n * m + m
    assert model.n_params() == expected


def test_widths_are_consistent():
    assert ARCHITECTURE["e_past"][0] == 8 * 2
    assert ARCHITECTURE["p_future"][-1] == 2 * (12 - 1)
    assert ARCHITECTURE["e_latent"][-1] == 2 * 16
    assert ARCHITECTURE["d_latent"][0] == 16 + ARCHITECTURE["e_past"][-1]
    for net in ("phi", "theta", "g", "p_future"):
        assert ARCHITECTURE[net][0] == ARCHITECTURE["e_past"][-1] + ARCHITECTURE["e_end"][-1]
    assert ARCHITECTURE["g"][-1] == 32


def test_init_policy(model):
    for name, t in model.tensors.items():
        if name.endswith(".b"):
            assert not t.data.any()
        else:
            bound = 1 / np.sqrt(t.shape[0])
            assert np.abs(t.data).max() <= bound


def test_precisions():
    assert init_model(0).dtype == np.float32
    assert init_model(0, dtype=np.float64).dtype == np.float64


@pytest.mark.parametrize("net", sorted(ARCHITECTURE))
def test_forward_preserves_batch_and_width(model, net):
    spec = model.specs[net]
    x = Tensor(np.random.default_rng(0).normal(size=(7, spec.n_in)))
    out = mlp_forward(model, net, x)
    assert out.shape == (7, spec.n_out)
    np.testing.assert_allclose(out.data, mlp_numpy([(W.data, b.data) for W, b in model.layers(net)], x.data), atol=1e-12)


def test_e_past_on_flattened_pasts(model):
    pasts = np.random.default_rng(1).normal(size=(5, 8, 2))
    assert mlp_forward(model, "e_past", Tensor(pasts.reshape(5, 16))).shape == (5, 16)


def test_d_latent_gives_2d_endpoint(model):
    assert mlp_forward(model, "d_latent", Tensor(np.zeros((3, 32)))).shape == (3, 2)


def test_zero_network_outputs_zero():
    m = init_model(0, dtype=np.float64)
    for t in m.tensors.values():
        t.data[...] = 0
    out = mlp_forward(m, "p_future", Tensor(np.random.default_rng(0).normal(size=(4, 32))))
    assert not out.data.any()


def test_width_mismatch(model):
    with pytest.raises(DimensionError, match="e_end"):
        mlp_forward(model, "e_end", Tensor(np.zeros((2, 3))))


def test_final_layer_is_affine(model):
    # a purely negative pre-activation must survive the output layer
    out = mlp_forward(model, "e_latent", Tensor(np.random.default_rng(4).normal(size=(64, 32))))
    assert (out.data < 0).any()


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 2))


def test_architecture_follows_horizons():
    specs = architecture(t_p=5, t_f=7)
    assert specs["e_past"].n_in == 10
    assert specs["p_future"].n_out == 12


def test_copy_is_independent(model):
    c = model.copy()
    c["g.0.w"].data[0, 0] += 1
    assert c["g.0.w"].data[0, 0] != model["g.0.w"].data[0, 0]
