import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intrasplit import autodiff as ad
from intrasplit.autodiff import Tensor
from intrasplit.config import ExperimentConfig
from intrasplit.data import make_synthetic
from intrasplit.errors import ConfigError, DataError, ShapeError
from intrasplit.nn import (LayerSpec, Network, build_autoencoder, build_backbone, init_params, load_network,
                           read_checkpoint, save_network, write_checkpoint)
from intrasplit.splitting import reconstruct, train_split_autoencoder


def test_autoencoder_shape_32():
    ae = init_params(build_autoencoder((32, 32, 1), code_dim=32), 0)
    out = ae(Tensor(np.random.default_rng(0).random((3, 32, 32, 1), dtype=np.float32)))
    assert out.shape == (3, 32, 32, 1)


@pytest.mark.parametrize("size", [8, 16, 28, 31, 32])
def test_autoencoder_reconstructs_any_size(size):
    ae = build_autoencoder((size, size, 3), code_dim=8, channels=(4, 4, 4))
    assert ae.shapes[-1] == (size, size, 3)


def test_autoencoder_rejects_too_small_input():
    with pytest.raises(ConfigError):
        build_autoencoder((4, 4, 1))
    with pytest.raises(ConfigError):
        build_autoencoder((28, 28, 1), code_dim=0)


def test_autoencoder_output_in_unit_interval_and_imperfect():
    rng = np.random.default_rng(1)
    ae = init_params(build_autoencoder((28, 28, 1)), 1)
    x = rng.random((4, 28, 28, 1)).astype(np.float32)
    out = ae(Tensor(x)).data
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.mean((out - x) ** 2) > 0


def test_autoencoder_training_halves_mse():
    images = make_synthetic(n_train=500, n_test_normal=1, n_test_abnormal=1, seed=3).train.images
    config = ExperimentConfig(ae_iterations=200)
    before = init_params(build_autoencoder(images.shape[1:], config.code_dim, config.ae_channels), 0)
    mse0 = np.mean((reconstruct(before, images) - images) ** 2)
    after = train_split_autoencoder(images, config, seed=0)
    mse1 = np.mean((reconstruct(after, images) - images) ** 2)
    assert mse1 <= 0.5 * mse0


def test_backbone_shapes_and_range():
    net = init_params(build_backbone((28, 28, 1), latent_dim=64), 0)
    x = Tensor(np.random.default_rng(0).random((5, 28, 28, 1), dtype=np.float32))
    z = net.forward(x, stop=net.latent_layer)
    y = net.forward(z, start=net.latent_layer)
    assert z.shape == (5, 64)
    assert y.shape == (5, 1)
    assert np.all((y.data > 0) & (y.data < 1))


def test_backbone_forward_backward_reaches_every_param():
    net = init_params(build_backbone((28, 28, 1)), 2)
    x = Tensor(np.random.default_rng(2).random((64, 28, 28, 1), dtype=np.float32))
    ad.mean(net(x)).backward()
    for p in net.params:
        assert p.tensor.grad is not None and p.tensor.grad.shape == p.tensor.shape


def test_backbone_parameter_budget():
    assert build_backbone((28, 28, 1), 64, (32, 64, 128)).n_parameters() < 500_000
    assert build_backbone((32, 32, 3), 64, (32, 64, 128)).n_parameters() < 500_000


def test_input_shape_checked():
    net = build_backbone((28, 28, 1))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 32, 32, 1), np.float32)))


def test_layers_must_compose():
    with pytest.raises(ConfigError):
        Network("bad", (8, 8, 1), [LayerSpec("dense", 4)])
    with pytest.raises(ConfigError):
        Network("bad", (8,), [LayerSpec("conv2d", 4)])
    with pytest.raises(ConfigError):
        LayerSpec("conv2d", 4, kernel=0)
    with pytest.raises(ConfigError):
        LayerSpec("softmax")


def test_conv_kernels_carry_decay_flag():
    net = build_backbone((28, 28, 1))
    decays = net.l2_decays(1e-6)
    for p, d in zip(net.params, decays):
        expected = 1e-6 if (p.is_conv and p.role == "kernel") else 0.0
        assert d == expected
    assert sum(d > 0 for d in decays) == 3


def test_init_deterministic_and_seed_sensitive():
    a = init_params(build_backbone((28, 28, 1)), 5).state_dict()
    b = init_params(build_backbone((28, 28, 1)), 5).state_dict()
    c = init_params(build_backbone((28, 28, 1)), 6).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)
    assert all(not a[k].any() for k in a if k.endswith(".bias"))


def test_he_normal_variance():
    net = init_params(Network("he", (100,), [LayerSpec("dense", 100, init="he-normal"), LayerSpec("relu")]), 0)
    kernel = net.params[0].tensor.data
    assert kernel.size == 10_000
    assert abs(kernel.var() / (2.0 / 100) - 1) < 0.2


def test_glorot_uniform_bounds():
    net = init_params(Network("g", (30,), [LayerSpec("dense", 20), LayerSpec("sigmoid")]), 0)
    limit = np.sqrt(6.0 / 50)
    kernel = net.params[0].tensor.data
    assert np.abs(kernel).max() <= limit
    assert np.abs(kernel).max() > 0.9 * limit


def test_checkpoint_round_trip(tmp_path):
    net = init_params(build_backbone((28, 28, 1), 16, (4, 4, 4)), 3)
    path = tmp_path / "net.icsp"
    save_network(net, path)
    other = load_network(init_params(build_backbone((28, 28, 1), 16, (4, 4, 4)), 9), path)
    for k, v in net.state_dict().items():
        assert other.state_dict()[k].tobytes() == v.tobytes()


def test_checkpoint_layout():
    buf = io.BytesIO()
    write_checkpoint(buf, {"w": np.array([[1.0, 2.0, 3.0]], np.float32)})
    raw = buf.getvalue()
    assert raw[:4] == b"ICSP"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<I", raw, 12) == (1,)
    assert raw[16:17] == b"w"
    assert struct.unpack_from("<III", raw, 17) == (2, 1, 3)
    np.testing.assert_array_equal(np.frombuffer(raw[29:], "<f4"), [1.0, 2.0, 3.0])


def test_checkpoint_errors():
    buf = io.BytesIO()
    write_checkpoint(buf, {"w": np.ones((2, 2), np.float32)})
    raw = buf.getvalue()
    with pytest.raises(DataError, match="magic"):
        read_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="truncated"):
        read_checkpoint(raw[:-1])
    with pytest.raises(DataError, match="trailing"):
        read_checkpoint(raw + b"\0")
    net = build_backbone((28, 28, 1))
    with pytest.raises(DataError):
        net.load_state_dict({})


@settings(max_examples=100, deadline=None)
@given(data=st.binary(max_size=64))
def test_checkpoint_reader_is_total(data):
    try:
        read_checkpoint(b"ICSP" + data)
    except DataError:
        pass
