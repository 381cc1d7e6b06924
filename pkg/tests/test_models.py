import numpy as np
import pytest

from countshift import tensor as T
from countshift.errors import InvalidShapeError, MalformedDatasetError
from countshift.losses import bce_loss, mse_loss
from countshift.models import (
    HEAD_INIT_GAIN,
    MAGIC,
    discriminate,
    init_params,
    load_model,
    predict_counts,
    predict_maps,
    regress_density,
    save_model,
)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(0, 1, (3, 32, 32))


def test_regressor_shape_and_nonnegative(images):
    maps = regress_density(init_params(0), images)
    assert maps.shape == (3, 1, 8, 8)
    assert maps.data.min() >= 0


def test_zero_head_gives_zero_map(images):
    params = init_params(1)
    params["reg.head.weight"].data[...] = 0
    params["reg.head.bias"].data[...] = 0
    assert not predict_maps(params, images).any()
    np.testing.assert_array_equal(predict_counts(params, images), 0.0)


def test_regressor_rejects_bad_extent():
    with pytest.raises(InvalidShapeError):
        regress_density(init_params(0), np.zeros((1, 30, 32)))


def test_regressor_is_bitwise_deterministic(images):
    a = regress_density(init_params(2), images).data
    b = regress_density(init_params(2), images).data
    assert a.tobytes() == b.tobytes()


def test_predicted_count_is_map_sum(images):
    params = init_params(3)
    maps = predict_maps(params, images)
    np.testing.assert_allclose(predict_counts(params, images), maps.sum(axis=(1, 2)), rtol=1e-12)
    assert (predict_counts(params, images) >= 0).all()


def test_init_is_seeded():
    assert init_params(5).equal(init_params(5))
    assert not init_params(5).equal(init_params(6))


def test_init_weight_bound():
    params = init_params(7)
    for name in params.names():
        if not name.endswith(".weight"):
            continue
        w = params[name].data
        fan_in = int(np.prod(w.shape[1:]))
        assert np.abs(w).max() <= np.sqrt(6.0 / fan_in)
    head = params["reg.head.weight"].data
    assert np.abs(head).max() <= HEAD_INIT_GAIN * np.sqrt(6.0 / 32)
    for name in params.names():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert not params[name].data.any()
        if name.endswith(".gamma"):
            np.testing.assert_array_equal(params[name].data, 1.0)


def test_parameter_order_is_fixed():
    names = init_params(0).names()
    assert len(set(names)) == len(names)
    assert names[0] == "reg.conv1.weight" and names == init_params(9).names()


def test_discriminator_output_range(images):
    params = init_params(0)
    maps = regress_density(params, images)
    prob = discriminate(params, maps, 1.0)
    assert prob.shape == (3,)
    assert ((prob.data > 0) & (prob.data < 1)).all()


def test_discriminator_forward_ignores_mu(images):
    maps = regress_density(init_params(0), images)
    p0 = discriminate(init_params(0), maps, 0.0).data
    p1 = discriminate(init_params(0), maps, 1.0).data
    assert p0.tobytes() == p1.tobytes()


def _map_gradient(mu, images, reverse=True):
    params = init_params(4)
    maps = T.Tensor(regress_density(params, images).data.copy(), requires_grad=True)
    prob = discriminate(params, maps, mu) if reverse else _plain_discriminate(params, maps)
    bce_loss(prob, np.array([1.0, 0.0, 1.0])).backward()
    return maps.grad


def _plain_discriminate(params, maps):
    import countshift.models as M

    original = T.grad_reverse
    M.T.grad_reverse = lambda x, mu: x
    try:
        return discriminate(params, maps, 1.0)
    finally:
        M.T.grad_reverse = original


def test_reversal_negates_identity_path(images):
    reversed_grad = _map_gradient(1.0, images)
    plain_grad = _map_gradient(1.0, images, reverse=False)
    assert np.abs(plain_grad).max() > 0
    np.testing.assert_allclose(reversed_grad, -plain_grad, rtol=0, atol=1e-12)


def test_mu_zero_blocks_adversarial_gradient(images):
    params = init_params(5)
    prob = discriminate(params, regress_density(params, images), 0.0)
    bce_loss(prob, np.array([1.0, 0.0, 0.0])).backward()
    assert all(params[n].grad is None or not params[n].grad.any() for n in params.names("reg."))
    assert any(params[n].grad is not None and params[n].grad.any() for n in params.names("disc."))


def test_save_load_round_trip(tmp_path, images):
    params = init_params(11)
    # touch the running statistics so buffers are non-trivial
    discriminate(params, regress_density(params, images), 0.1)
    path = save_model(params, tmp_path / "a.model", {"alpha": 0.1})
    back = load_model(path)
    assert back.equal(params)
    assert back.hyperparameters == {"alpha": 0.1} and back.seed == 11
    again = save_model(back, tmp_path / "b.model")
    assert path.read_bytes() == again.read_bytes()
    assert path.read_bytes()[:8] == MAGIC


def test_regress_and_mse_are_differentiable(images):
    params = init_params(12)
    loss = mse_loss(regress_density(params, images), np.zeros((3, 1, 8, 8)))
    loss.backward()
    assert params["reg.conv1.weight"].grad is not None


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing"])
def test_load_rejects_damaged_files(tmp_path, damage):
    raw = save_model(init_params(0), tmp_path / "m.model").read_bytes()
    bad = {"magic": b"XXXXXXXX" + raw[8:], "truncate": raw[:-8], "trailing": raw + b"\0" * 8}[damage]
    (tmp_path / "bad.model").write_bytes(bad)
    with pytest.raises(MalformedDatasetError):
        load_model(tmp_path / "bad.model")
