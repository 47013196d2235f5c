import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copdflow import gan as G
from copdflow.errors import ContractError, ShapeError, TrainingDivergedError
from copdflow.nn.gradcheck import check_layer
from copdflow.tensor import Rng

SMALL = dict(latent_dim=8, image_size=16, generator_widths=(8, 8, 4, 4), discriminator_widths=(4, 4, 8, 8),
             batch_size=4, dtype=np.float64)


def snapshot(net):
    return {k: v.copy() for k, v in net.state_dict().items()}


def changed(before, net):
    after = net.state_dict()
    return {k for k in before if not np.array_equal(before[k], after[k])}


def test_full_size_shape_traces():
    g = G.build_generator(rng=Rng(0))
    d = G.build_discriminator(rng=Rng(1))
    assert g.shape_trace((4, 100)) == G.expected_generator_trace(4)
    assert g.shape_trace((4, 100))[-1] == (4, 1, 128, 128)
    assert d.shape_trace((4, 1, 128, 128)) == G.expected_discriminator_trace(4)
    assert d.shape_trace((4, 1, 128, 128))[-1] == (4, 1)


def test_generate_is_deterministic_and_bounded():
    a = G.FlowGAN(seed=3, generator_widths=(16, 8, 8, 4), dtype=np.float64)
    b = G.FlowGAN(seed=3, generator_widths=(16, 8, 8, 4), dtype=np.float64)
    a._build(), b._build()
    z = Rng(9).normal((4, 100))
    out = a.generate(z)
    assert out.shape == (4, 1, 128, 128)
    assert np.array_equal(out, b.generate(z))
    assert np.all(np.abs(out) <= 1)
    with pytest.raises(ShapeError):
        a.generate(np.zeros((4, 99)))
    with pytest.raises(ContractError):
        a.generate(np.full((1, 100), np.nan))


def test_untrained_generator_is_centred():
    gan = G.FlowGAN(seed=0, generator_widths=(16, 8, 8, 4))
    gan._build()
    images = gan.generate(Rng(1).normal((64, 100)))
    assert -0.5 < images.mean() < 0.5


def test_generator_gradients():
    net = G.build_generator(4, (3, 3, 2, 2), image_size=16, rng=Rng(2))
    errors = check_layer(net, Rng(3).normal((2, 4)), seed=5)
    assert max(errors.values()) < 1e-4, errors


def test_discriminator_gradients():
    net = G.build_discriminator((2, 2, 3, 3), image_size=16, rng=Rng(4))
    errors = check_layer(net, Rng(5).uniform(-1, 1, (3, 1, 16, 16)), seed=6)
    assert max(errors.values()) < 1e-4, errors


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_discriminator_output_is_a_probability(seed):
    gan = G.FlowGAN(seed=seed, **SMALL)
    gan._build()
    out = gan.discriminate(Rng(seed).uniform(-1, 1, (4, 16, 16)))
    assert out.shape == (4,) and np.all((out > 0) & (out < 1))


def test_phases_touch_only_their_own_network():
    gan = G.FlowGAN(seed=1, **SMALL)
    gan._build()
    real = Rng(0).uniform(-1, 1, (4, 1, 16, 16))
    g0, d0 = snapshot(gan.generator_), snapshot(gan.discriminator_)
    gan.d_step(real)
    assert changed(g0, gan.generator_) == set()
    assert any(k.endswith(".weight") for k in changed(d0, gan.discriminator_))
    g1, d1 = snapshot(gan.generator_), snapshot(gan.discriminator_)
    gan.g_step(4)
    assert changed(d1, gan.discriminator_) == set()
    assert any(k.endswith(".weight") for k in changed(g1, gan.generator_))


def test_discriminator_learns_a_separable_batch():
    gan = G.FlowGAN(seed=2, **{**SMALL, "discriminator_widths": (8, 16, 16, 32), "dropout": 0.0, "lr": 1e-3})
    gan._build()
    real = np.full((8, 1, 16, 16), 0.9)
    # only the discriminator is updated, so the fakes stay near the untrained output
    losses = [gan.d_step(real) for _ in range(60)]
    assert np.mean(losses[-10:]) < np.mean(losses[:10]) - 0.1


def test_fit_history_and_determinism():
    X = Rng(4).uniform(-1, 1, (6, 16, 16))
    a = G.FlowGAN(seed=5, steps=3, **SMALL).fit(X)
    b = G.FlowGAN(seed=5, steps=3, **SMALL).fit(X)
    assert len(a.history_) == 3 and a.history_ == b.history_
    assert np.array_equal(a.sample(2, Rng(1)), b.sample(2, Rng(1)))


def test_fit_input_checks():
    with pytest.raises(ContractError):
        G.FlowGAN(**SMALL).fit(np.zeros((0, 16, 16)))
    with pytest.raises(ContractError):
        G.FlowGAN(**SMALL).fit(np.full((2, 16, 16), 2.0))
    with pytest.raises(ShapeError):
        G.FlowGAN(**SMALL).fit(np.zeros((2, 8, 8)))


def test_non_finite_loss_reports_step():
    gan = G.FlowGAN(seed=0, **SMALL)
    real = Rng(0).uniform(-1, 1, (4, 1, 16, 16))
    gan.train_step(real)
    gan.discriminator_.params["0.weight"][...] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        gan.train_step(real)
    assert info.value.step == 2


def test_synthesize_class():
    untrained = G.FlowGAN(**SMALL)
    with pytest.raises(ContractError):
        G.synthesize_class(untrained, "left", 3, Rng(0))
    gan = G.FlowGAN(seed=0, steps=1, **SMALL).fit(Rng(1).uniform(-1, 1, (4, 16, 16)))
    assert G.synthesize_class(gan, "left", 0, Rng(0)) == []
    out = G.synthesize_class(gan, "left", 355, Rng(0))
    assert len(out) == 355
    assert all(t.label == "left" and t.provenance == "synthetic" for t in out)
    stack = np.stack([t.image for t in out])
    assert stack.shape == (355, 16, 16) and stack.min() >= -1 and stack.max() <= 1
    with pytest.raises(ValueError):
        G.synthesize_class(gan, "left", -1, Rng(0))


def test_checkpoint_round_trip(tmp_path):
    gan = G.FlowGAN(seed=0, steps=2, **SMALL).fit(Rng(1).uniform(-1, 1, (4, 16, 16)))
    path = tmp_path / "gan.cfn"
    gan.save(path)
    back = G.FlowGAN(seed=99, **SMALL).load(path)
    z = Rng(3).normal((3, 8))
    # checkpoints store float32
    assert np.allclose(back.generate(z), gan.generate(z), rtol=1e-5, atol=1e-7)
    with pytest.raises(ContractError, match="gan.cfn"):
        G.FlowGAN(**{**SMALL, "latent_dim": 9}).load(path)


def test_history_csv(tmp_path):
    G.write_history(tmp_path / "h.csv", [(1.0, 2.5), (0.1234567, 3.0)])
    assert (tmp_path / "h.csv").read_text() == "step,d_loss,g_loss\n1,1.000000,2.500000\n2,0.123457,3.000000\n"


def test_get_params_round_trip():
    gan = G.FlowGAN(steps=7, seed=4)
    assert gan.get_params()["steps"] == 7
    assert G.FlowGAN(**gan.get_params()).get_params() == gan.get_params()
