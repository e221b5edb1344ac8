import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cim.encoder import (AlignmentBatch, EncoderTrainer, encode, encoder_update, identity_encoder,
                         loss_cim, loss_variant, make_encoder, make_skill_projector, mi_lower_bound,
                         phi_diff)
from cim.errors import ConfigError, ContractError, NumericError, ShapeError
from cim.nn import Mlp

from oracles import fd_grad, rel_err


def random_batch(rng, n=8, state_dim=4, n_z=2, categorical=False):
    s = rng.standard_normal((n, state_dim))
    sn = s + 0.3 * rng.standard_normal((n, state_dim))
    if categorical:
        idx = rng.integers(0, n_z, n)
        return AlignmentBatch(s, sn, np.eye(n_z)[idx], idx)
    z = rng.standard_normal((n, n_z))
    return AlignmentBatch(s, sn, z / np.linalg.norm(z, axis=1, keepdims=True))


def loss_oracle(enc, batch):
    """Per-pair loop over the contrastive loss with its negative set spelled out."""
    d = encode(enc, batch.s_next) - encode(enc, batch.s)
    n = len(batch)
    total = 0.0
    for i in range(n):
        terms = []
        for j in range(n):
            if j != i and batch.skill_index is not None and batch.skill_index[j] == batch.skill_index[i]:
                continue
            terms.append(float(d[j] @ batch.z[i]))
        m = max(terms)
        total += -float(d[i] @ batch.z[i]) + m + math.log(sum(math.exp(t - m) for t in terms))
    return total / n


def check_grads(kind, seed, categorical=False):
    rng = np.random.default_rng(seed)
    enc = make_encoder(4, 2, (16,), seed)
    for b in enc.net.biases:
        b.assign(0.1 * rng.standard_normal(b.shape))
    batch = random_batch(rng, categorical=categorical)
    aux = {"lsd_weight": 10.0}
    params = enc.net.parameters()
    if kind == "cic":
        aux["projector"] = make_skill_projector(2, 8, seed + 1)
        params = params + aux["projector"].parameters()
    for p in params:
        p.zero_grad()
    loss_variant(kind, enc, batch, aux)
    worst = 0.0
    for p in params:
        num = fd_grad(lambda: loss_variant(kind, enc, batch, aux, backward=False), p.values)
        worst = max(worst, rel_err(p.grad, num))
    return worst


@pytest.mark.parametrize("kind", ["cim", "mse", "vmf", "lsd", "cic"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(kind, seed):
    assert check_grads(kind, seed) < 1e-4


@pytest.mark.parametrize("kind", ["cim", "cic"])
def test_gradients_with_categorical_negatives(kind):
    assert check_grads(kind, 11, categorical=True) < 1e-4


def test_encode_identity_and_zero():
    enc = identity_encoder(3)
    s = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(encode(enc, s), s)
    zero = Mlp.from_arrays([(np.zeros((3, 2)), np.zeros(2))])
    from cim.encoder import Encoder
    assert not encode(Encoder(zero), s).any()


def test_phi_diff_cases():
    enc = identity_encoder(2)
    np.testing.assert_array_equal(phi_diff(enc, np.zeros(2), np.array([1.0, 2.0])), [1.0, 2.0])
    rnd = make_encoder(3, 2, seed=4)
    s, t = np.array([0.1, 0.2, 0.3]), np.array([-1.0, 0.0, 2.0])
    assert not phi_diff(rnd, s, s).any()
    np.testing.assert_array_equal(phi_diff(rnd, s, t), encode(rnd, t) - encode(rnd, s))


def test_encode_shape_error():
    with pytest.raises(ShapeError):
        encode(make_encoder(3, 2), np.zeros(5))


def test_loss_matches_loop_oracle():
    rng = np.random.default_rng(3)
    enc = make_encoder(4, 2, seed=3)
    for categorical in (False, True):
        batch = random_batch(rng, n=12, categorical=categorical)
        assert loss_cim(enc, batch, backward=False) == pytest.approx(loss_oracle(enc, batch), rel=1e-12)


def test_single_pair_loss_is_zero():
    enc = make_encoder(4, 2, seed=0)
    batch = AlignmentBatch(np.ones((1, 4)), np.full((1, 4), 2.0), np.array([[0.6, 0.8]]))
    assert loss_cim(enc, batch) == 0.0


def test_empty_batch_is_a_contract_error():
    with pytest.raises(ContractError):
        AlignmentBatch(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 2)))


def test_mismatched_batch_shapes():
    with pytest.raises(ShapeError):
        AlignmentBatch(np.zeros((3, 4)), np.zeros((3, 5)), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        loss_cim(make_encoder(4, 2), AlignmentBatch(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((3, 3))))


def test_unknown_variant():
    with pytest.raises(ConfigError):
        loss_variant("becl", make_encoder(4, 2), random_batch(np.random.default_rng(0)))
    with pytest.raises(ConfigError):
        loss_variant("cic", make_encoder(4, 2), random_batch(np.random.default_rng(0)))


def test_vmf_zero_norm_raises():
    zero = Mlp.from_arrays([(np.zeros((4, 2)), np.zeros(2))])
    from cim.encoder import Encoder
    with pytest.raises(NumericError):
        loss_variant("vmf", Encoder(zero), random_batch(np.random.default_rng(0)))


def test_variant_closed_forms():
    enc = identity_encoder(2)
    s = np.array([[0.0, 0.0], [1.0, 1.0]])
    sn = np.array([[3.0, 4.0], [1.0, 2.0]])
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    batch = AlignmentBatch(s, sn, z)
    # mse: ||s' - z||^2 -> (4 + 16, 1 + 1) / 2
    assert loss_variant("mse", enc, batch, backward=False) == pytest.approx(11.0)
    # vmf: -cos(s', z) -> -(3/5 + 2/sqrt(5)) / 2
    assert loss_variant("vmf", enc, batch, backward=False) == pytest.approx(-(0.6 + 2 / math.sqrt(5)) / 2)
    # lsd with identity encoder: penalty vanishes, leaving -d.z
    assert loss_variant("lsd", enc, batch, {"lsd_weight": 10.0}, backward=False) == pytest.approx(-(3 + 1) / 2)


def test_lsd_subgradient_at_zero_displacement():
    enc = make_encoder(2, 2, seed=0)
    batch = AlignmentBatch(np.ones((3, 2)), np.ones((3, 2)), np.eye(2)[[0, 1, 0]])
    loss = loss_variant("lsd", enc, batch)
    assert loss == 0.0
    assert all(np.all(np.isfinite(p.grad)) for p in enc.net.parameters())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.integers(0, 10_000))
def test_loss_non_negative_for_distinct_pairs(n, seed):
    rng = np.random.default_rng(seed)
    enc = make_encoder(3, 2, seed=seed)
    s = rng.standard_normal((n, 3))
    z = rng.standard_normal((n, 2))
    batch = AlignmentBatch(s, s + rng.standard_normal((n, 3)), z / np.linalg.norm(z, axis=1, keepdims=True))
    assert loss_cim(enc, batch, backward=False) >= -1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 24), st.integers(0, 10_000))
def test_loss_bounded_by_log_batch_when_untrained(n, seed):
    # all-zero encoder: every logit is 0, so every term equals log of its partition size
    zero = Mlp.from_arrays([(np.zeros((3, 2)), np.zeros(2))])
    from cim.encoder import Encoder
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n, 3))
    batch = AlignmentBatch(s, s + 1, rng.standard_normal((n, 2)))
    assert loss_cim(Encoder(zero), batch, backward=False) == pytest.approx(math.log(n))


def synthetic_directions(rng, n, k=8, state_dim=2, step=0.5):
    idx = rng.integers(0, k, n)
    ang = 2 * np.pi * idx / k
    u = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    s = rng.uniform(-1, 1, (n, state_dim))
    sn = s.copy()
    sn[:, :2] += step * u
    return AlignmentBatch(s, sn, u), idx


def train_synthetic(seed=0, steps=2000, batch_size=256, lr=1e-2):
    rng = np.random.default_rng(seed)
    data, _ = synthetic_directions(rng, 8192)
    trainer = EncoderTrainer(make_encoder(2, 2, (16,), seed), "cim", lr=lr, seed=seed)
    for _ in range(steps // 50):
        encoder_update(trainer, data, 50, batch_size)
    probe, _ = synthetic_directions(np.random.default_rng(seed + 1000), batch_size)
    return mi_lower_bound(loss_cim(trainer.enc, probe, backward=False), batch_size)


def test_bound_approaches_log_k():
    bound = train_synthetic()
    assert abs(bound - math.log(8)) < 0.1


def test_mi_lower_bound_formula():
    assert mi_lower_bound(1.0, 256) == pytest.approx(math.log(256) - 1.0)


def test_encoder_update_noop_and_skip():
    enc = make_encoder(4, 2, seed=0)
    trainer = EncoderTrainer(enc, "cim", seed=0)
    before = [p.values.copy() for p in enc.net.parameters()]
    data = random_batch(np.random.default_rng(0), n=32)
    assert encoder_update(trainer, data, 0, 16) == 0.0
    assert encoder_update(trainer, data, 3, 64) == 0.0
    assert trainer.skipped == 1
    for p, b in zip(enc.net.parameters(), before):
        assert np.array_equal(p.values, b)
    loss = trainer.update(data, 3, 16)
    assert math.isfinite(loss) and loss > 0
    assert any(not np.array_equal(p.values, b) for p, b in zip(enc.net.parameters(), before))


@pytest.mark.parametrize("kind", ["cim", "mse", "vmf", "lsd", "cic"])
def test_training_reduces_each_loss(kind):
    rng = np.random.default_rng(5)
    data, _ = synthetic_directions(rng, 2048)
    trainer = EncoderTrainer(make_encoder(2, 2, (16,), 5), kind, lr=1e-2, seed=5, cic_hidden=16)
    probe = data.subset(np.arange(256))
    start = loss_variant(kind, trainer.enc, probe, trainer.aux, backward=False)
    encoder_update(trainer, data, 150, 128)
    assert loss_variant(kind, trainer.enc, probe, trainer.aux, backward=False) < start


def test_unknown_trainer_kind():
    with pytest.raises(ConfigError):
        EncoderTrainer(make_encoder(2, 2), "becl")
