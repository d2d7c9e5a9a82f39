import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intrasplit import autodiff as ad
from intrasplit.autodiff import Tensor
from intrasplit.config import ExperimentConfig
from intrasplit.data import make_synthetic
from intrasplit.errors import ConfigError, ContractError, DataError
from intrasplit.metrics import auc
from intrasplit.model import (OneClassModel, TrainState, Trainer, closeness_loss, dispersion_loss, intra_class_loss,
                              load_checkpoint, pair_batch, pair_indices, save_checkpoint, train, train_ablation)
from intrasplit.splitting import split_scores

from oracles import model_loss_gradcheck

LN2 = math.log(2)


def small_setup(n=40, seed=0, iterations=4):
    images = make_synthetic(n_train=n, n_test_normal=1, n_test_abnormal=1, image_size=16, seed=seed).train.images
    config = ExperimentConfig(iterations=iterations, batch=8, latent_dim=8, backbone_channels=(4, 4, 4))
    split = split_scores(np.random.default_rng(seed).random(n), 25)
    model = OneClassModel(images.shape[1:], config.latent_dim, config.backbone_channels, seed=seed)
    return images, config, split, model


def value(t):
    return t.item()


def test_closeness_examples():
    assert value(closeness_loss([0.0, 0.0])) == pytest.approx(0.0, abs=1e-6)
    assert value(closeness_loss([0.5, 0.5])) == pytest.approx(LN2, abs=1e-12)
    assert value(closeness_loss([0.1, 0.9])) == pytest.approx(1.2040, abs=1e-4)
    assert value(closeness_loss([0.1, 0.9])) == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.1)), rel=1e-12)


def test_dispersion_examples():
    assert value(dispersion_loss([1.0, 1.0])) == pytest.approx(0.0, abs=1e-6)
    assert value(dispersion_loss([0.5])) == pytest.approx(LN2, abs=1e-12)
    assert value(dispersion_loss([0.25, 0.75])) == pytest.approx(0.8370, abs=1e-4)


def test_intra_class_examples():
    assert value(intra_class_loss([1, 0], [1 - 1e-7, 1e-7])) == pytest.approx(0.0, abs=1e-6)
    assert value(intra_class_loss([0], [0.5])) == pytest.approx(LN2, abs=1e-12)
    assert value(intra_class_loss([1, 0], [0.8, 0.3])) == pytest.approx(0.2899, abs=1e-4)


def test_losses_survive_saturated_inputs():
    assert np.isfinite(value(closeness_loss([1.0])))
    assert np.isfinite(value(dispersion_loss([0.0])))
    assert np.isfinite(value(intra_class_loss([1, 0], [0.0, 1.0])))
    assert value(closeness_loss([1.0])) == pytest.approx(-math.log(1e-7), rel=1e-6)


@settings(max_examples=200, deadline=None)
@given(d=st.lists(st.floats(0, 1), min_size=1, max_size=16), y=st.lists(st.integers(0, 1), min_size=1, max_size=16))
def test_losses_non_negative(d, y):
    assert value(closeness_loss(d)) >= 0
    assert value(dispersion_loss(d)) >= 0
    k = min(len(d), len(y))
    assert value(intra_class_loss(y[:k], d[:k])) >= 0


def test_pairing_two():
    i, j = pair_indices(2, np.random.default_rng(0))
    assert set(zip(i.tolist(), j.tolist())) == {(0, 1), (1, 0)}


@settings(max_examples=100, deadline=None)
@given(batch=st.integers(2, 128), seed=st.integers(0, 2**31 - 1))
def test_pairing_is_a_derangement(batch, seed):
    i, j = pair_indices(batch, np.random.default_rng(seed))
    assert len(i) == batch
    assert sorted(i.tolist()) == list(range(batch)) == sorted(j.tolist())
    assert np.all(i != j)
    i2, j2 = pair_indices(batch, np.random.default_rng(seed))
    assert np.array_equal(i, i2) and np.array_equal(j, j2)


def test_pairing_needs_two():
    with pytest.raises(ContractError):
        pair_indices(1, np.random.default_rng(0))


def test_pair_batch_gathers_rows():
    z = Tensor(np.arange(12.0).reshape(4, 3))
    zi, zj = pair_batch(z, np.random.default_rng(2))
    i, j = pair_indices(4, np.random.default_rng(2))
    np.testing.assert_array_equal(zi.data, z.data[i])
    np.testing.assert_array_equal(zj.data, z.data[j])


def test_distance_range_and_asymmetry():
    model = OneClassModel((16, 16, 1), 8, (4, 4, 4), seed=1)
    rng = np.random.default_rng(1)
    zi, zj = Tensor(rng.standard_normal((6, 8)).astype(np.float32)), Tensor(rng.standard_normal((6, 8)).astype(np.float32))
    d = model.distance(zi, zj).data
    assert d.shape == (6, 1)
    assert np.all((d > 0) & (d < 1))
    assert not np.allclose(d, model.distance(zj, zi).data)


def test_closeness_gradient_reaches_both_subnetworks():
    for seed in range(10):
        err, grads = model_loss_gradcheck("closeness", seed)
        if any(g.any() for g in grads[:-2]):
            break
    assert err < 1e-4
    assert any(g.any() for g in grads[:-2])  # backbone (feature extractor)
    assert all(g.any() for g in grads[-2:])  # distance subnetwork


def test_intra_class_gradient_skips_distance_net():
    _, grads = model_loss_gradcheck("intra_class", 0)
    assert not any(g.any() for g in grads[-2:])


def test_scores_in_open_interval_and_batch_independent():
    images, _, _, model = small_setup()
    scores = model.score(images)
    assert scores.shape == (len(images),)
    assert np.all((scores > 0) & (scores < 1))
    single = np.concatenate([model.score(images[k : k + 1]) for k in range(5)])
    np.testing.assert_allclose(scores[:5], single, rtol=1e-6)
    np.testing.assert_array_equal(model.score(images, chunk=7), scores)


def test_one_iteration_changes_parameters():
    images, config, split, model = small_setup(iterations=1)
    before = model.state_dict()
    train(model, split, images, config)
    after = model.state_dict()
    assert all(not np.array_equal(before[k], after[k]) for k in before)


def test_intra_class_step_leaves_distance_net_alone():
    images, config, split, model = small_setup()
    before = model.distance_net.state_dict()
    Trainer(model, images, config, split, "ours").intra_class_step()
    after = model.distance_net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_ablations_never_touch_distance_net():
    images, config, split, model = small_setup()
    before = model.distance_net.state_dict()
    train_ablation("nn_with_ics", model, split, images, config)
    train_ablation("naive_nn", model, None, images, config)
    assert all(np.array_equal(before[k], v) for k, v in model.distance_net.state_dict().items())


def test_mode_and_split_errors():
    images, config, split, model = small_setup()
    with pytest.raises(ConfigError):
        Trainer(model, images, config, split, "recon_baseline")
    with pytest.raises(ConfigError):
        train_ablation("ours", model, split, images, config)
    with pytest.raises(ConfigError):
        Trainer(model, images, config, None, "nn_with_ics")
    with pytest.raises(DataError):
        Trainer(model, images[:-1], config, split, "ours")
    empty = split_scores(np.arange(40.0), 25)
    empty.atypical_idx = np.empty(0, np.int64)
    with pytest.raises(ConfigError):
        Trainer(model, images, config, empty, "ours")


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        images, config, split, model = small_setup(iterations=3)
        train(model, split, images, config, seed=5)
        runs.append(model.state_dict())
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])


@pytest.mark.parametrize("mode", ["ours", "nn_with_ics", "naive_nn"])
def test_checkpoint_resume_is_bit_exact(tmp_path, mode):
    images, config, split, model = small_setup(iterations=6)
    if mode == "naive_nn":
        split = None
    Trainer(model, images, config, split, mode, seed=3).run()
    reference = model.state_dict()

    _, _, _, first = small_setup(iterations=6)
    trainer = Trainer(first, images, config, split, mode, seed=3)
    trainer.run(until=3)
    save_checkpoint(tmp_path / "ckpt.icsp", first, trainer.state, config, {"mode": mode})

    _, _, _, resumed = small_setup(iterations=6, seed=9)  # different init, overwritten by the checkpoint
    state, sidecar = load_checkpoint(tmp_path / "ckpt.icsp", resumed)
    assert state.iteration == 3 and sidecar["mode"] == mode
    Trainer(resumed, images, config, split, mode, state=state).run()
    final = resumed.state_dict()
    assert all(final[k].tobytes() == reference[k].tobytes() for k in reference)


def test_checkpoint_missing_sidecar(tmp_path):
    images, config, split, model = small_setup()
    save_checkpoint(tmp_path / "m.icsp", model, TrainState())
    (tmp_path / "m.icsp.json").unlink()
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "m.icsp", model)


def test_label_convention_flip_gives_complement_auc():
    images, config, split, model = small_setup(iterations=3)
    train(model, split, images, config)
    scores = model.score(images)
    atyp = np.zeros(len(images), bool)
    atyp[split.atypical_idx] = True
    forward = auc(scores[~atyp], scores[atyp]).auc
    flipped = auc(1 - scores[~atyp], 1 - scores[atyp]).auc
    assert forward + flipped == pytest.approx(1.0, abs=1e-12)


def test_typical_scored_below_atypical_after_training():
    images = make_synthetic(n_train=400, n_test_normal=1, n_test_abnormal=1, seed=1).train.images
    # a split the network can learn: the brightest tenth is atypical
    split = split_scores(-images.mean(axis=(1, 2, 3)), 10)
    config = ExperimentConfig(iterations=150, batch=32)
    model = OneClassModel(images.shape[1:], config.latent_dim, config.backbone_channels, seed=0)
    train(model, split, images, config)
    scores = model.score(images)
    assert scores[split.typical_idx].mean() < scores[split.atypical_idx].mean()
