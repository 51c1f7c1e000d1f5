import numpy as np
import pytest
from hypothesis import given, strategies as st

from tmgan import tensor as T
from tmgan.models import (DiscriminatorParams, GammaParam, GeneratorParams, discriminator_forward,
                          generator_forward, matched_multiplier, siamese_forward)
from tmgan.synthdata import TextureSpec, sample_texture
from tmgan.tensor import Adam, Tape, Tensor, backward


def randomize_last(gen, seed=0, scale=0.1):
    r = np.random.default_rng(seed)
    gen.kernels[-1].data[...] = r.standard_normal(gen.kernels[-1].shape) * scale
    return gen


def test_zero_init_generator_is_identity(rng):
    gen = GeneratorParams.create(depth=5, width=8, seed=3)
    y = 1000 + 50 * rng.standard_normal((2, 1, 16, 16))
    np.testing.assert_array_equal(generator_forward(gen, Tensor(y)).data, y)


def test_clinical_scale_parameter_count():
    gen = GeneratorParams.create(depth=17, width=64)
    expected = (1 * 64 * 9 + 64) + 15 * (64 * 64 * 9 + 64) + (64 * 1 * 9 + 1)
    assert expected == 555_137
    assert gen.parameter_count() == expected


def test_desk_scale_parameter_count():
    gen = GeneratorParams.create(depth=7, width=32)
    assert gen.parameter_count() == (9 * 32 + 32) + 5 * (32 * 32 * 9 + 32) + (32 * 9 + 1)


def test_layer_shapes_chain():
    gen = GeneratorParams.create(depth=6, width=5, batch_norm=True)
    for a, b in zip(gen.kernels, gen.kernels[1:]):
        assert a.shape[0] == b.shape[1]
    assert gen.kernels[0].shape[1] == 1 and gen.kernels[-1].shape[0] == 1
    assert len(gen.bn_scales) == 4
    assert gen.receptive_field == 13


def test_random_generator_shape_and_finite(rng):
    gen = randomize_last(GeneratorParams.create(depth=7, width=8))
    out = generator_forward(gen, Tensor(1000 + 30 * rng.standard_normal((2, 1, 32, 32))))
    assert out.shape == (2, 1, 32, 32)
    assert np.all(np.isfinite(out.data))


def test_generator_rejects_multichannel():
    gen = GeneratorParams.create(depth=3, width=4)
    with pytest.raises(ValueError):
        generator_forward(gen, Tensor(np.zeros((1, 2, 8, 8))))


def test_generator_bad_config():
    with pytest.raises(ValueError):
        GeneratorParams.create(depth=1)
    with pytest.raises(ValueError):
        GeneratorParams.create(kernel_size=4)


def test_siamese_same_input_bitwise(rng):
    gen = randomize_last(GeneratorParams.create(depth=4, width=6))
    y = Tensor(1000 + 20 * rng.standard_normal((1, 1, 12, 12)))
    a, b = siamese_forward(gen, y, Tensor(y.data.copy()))
    np.testing.assert_array_equal(a.data, b.data)


def test_siamese_swap(rng):
    gen = randomize_last(GeneratorParams.create(depth=4, width=6))
    y1 = Tensor(rng.standard_normal((1, 1, 10, 10)) * 100)
    y2 = Tensor(rng.standard_normal((1, 1, 10, 10)) * 100)
    a1, a2 = siamese_forward(gen, y1, y2)
    b1, b2 = siamese_forward(gen, y2, y1)
    np.testing.assert_array_equal(a1.data, b2.data)
    np.testing.assert_array_equal(a2.data, b1.data)


def test_siamese_shape_mismatch():
    gen = GeneratorParams.create(depth=3, width=2)
    with pytest.raises(ValueError):
        siamese_forward(gen, Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 8, 9))))


def test_siamese_gradient_is_sum_of_branches(rng):
    gen = randomize_last(GeneratorParams.create(depth=3, width=4))
    params = gen.parameters()
    y1 = Tensor(rng.standard_normal((2, 1, 8, 8)) * 100)
    y2 = Tensor(rng.standard_normal((2, 1, 8, 8)) * 100)

    def grad_of(fn):
        with Tape() as tape:
            loss = fn()
        return backward(tape, loss, params)

    both = grad_of(lambda: T.add(T.sum_(T.square(siamese_forward(gen, y1, y2)[0])),
                                 T.sum_(T.square(siamese_forward(gen, y1, y2)[1]))))
    g1 = grad_of(lambda: T.sum_(T.square(generator_forward(gen, y1))))
    g2 = grad_of(lambda: T.sum_(T.square(generator_forward(gen, y2))))
    for b, a, c in zip(both, g1, g2):
        np.testing.assert_allclose(b, a + c, rtol=1e-12, atol=1e-10)


def test_weight_sharing_mutation(rng):
    gen = randomize_last(GeneratorParams.create(depth=3, width=4))
    y = Tensor(rng.standard_normal((1, 1, 8, 8)) * 100)
    before = siamese_forward(gen, y, y)
    gen.biases[-1].data += 0.01
    after = siamese_forward(gen, y, y)
    d1 = after[0].data - before[0].data
    d2 = after[1].data - before[1].data
    np.testing.assert_array_equal(d1, d2)
    np.testing.assert_allclose(d1, -10.0)


def test_discriminator_zero_head_is_half(rng):
    disc = DiscriminatorParams.create(0.25, seed=1)
    p = discriminator_forward(disc, Tensor(rng.standard_normal((3, 1, 32, 32)) * 40))
    np.testing.assert_array_equal(p.data, 0.5)


@given(scale=st.floats(1e-3, 1e4), seed=st.integers(0, 1000))
def test_discriminator_open_interval(scale, seed):
    r = np.random.default_rng(seed)
    disc = DiscriminatorParams.create(0.125, seed=seed, zero_head=False)
    p = discriminator_forward(disc, Tensor(r.standard_normal((2, 1, 16, 16)) * scale)).data
    assert p.shape == (2,)
    assert np.all((p > 0) & (p < 1))


@pytest.mark.parametrize("depth,width", [(7, 32), (7, 16), (17, 64)])
def test_discriminator_strength_matched(depth, width):
    g = GeneratorParams.create(depth=depth, width=width).parameter_count()
    d = DiscriminatorParams.create(match_count=g).parameter_count()
    assert 0.5 <= d / g <= 2.0
    assert abs(np.log(d / g)) < 0.05


def test_matched_multiplier_monotone():
    assert matched_multiplier(10_000) < matched_multiplier(100_000)


def test_discriminator_separates_toy_textures():
    """White noise (real) against strongly low-passed noise (fake)."""
    size, n = 16, 64
    white = TextureSpec(30.0, "white", seed=5)
    low = TextureSpec(30.0, "lowpass", cutoff=0.05, seed=5)
    real = np.stack([sample_texture(white, size, size, i) for i in range(n)])[:, None]
    fake = np.stack([sample_texture(low, size, size, i) for i in range(n)])[:, None]
    disc = DiscriminatorParams.create(0.125, seed=0, zero_head=False, input_scale=0.03)
    opt = Adam(disc.parameters(), 3e-3)
    for _ in range(150):
        with Tape() as tape:
            pr = discriminator_forward(disc, Tensor(real))
            pf = discriminator_forward(disc, Tensor(fake))
            loss = T.neg(T.add(T.mean(T.log(T.clip(pr, 1e-7, 1))), T.mean(T.log(T.clip(T.add_const(T.neg(pf), 1.0),
                                                                                       1e-7, 1)))))
        opt.step(backward(tape, loss, disc.parameters()))
    assert discriminator_forward(disc, Tensor(real)).data.mean() > 0.9
    assert discriminator_forward(disc, Tensor(fake)).data.mean() < 0.1


def test_gamma_positive_under_updates():
    g = GammaParam.create(1.0)
    opt = Adam(g.parameters(), 0.5)
    for _ in range(100):
        opt.step([np.array([10.0])])   # drive log-gamma far negative
    assert g.value > 0
    assert np.isfinite(g.value)
    with pytest.raises(ValueError):
        GammaParam.create(0.0)


def test_gamma_fixed_has_no_parameters():
    assert GammaParam.create(2.0, learnable=False).parameters() == []
    assert GammaParam.create(2.0).value == pytest.approx(2.0, rel=1e-15)


def test_clinical_scale_gradient_check_small_input():
    gen = randomize_last(GeneratorParams.create(depth=17, width=64), scale=0.01)
    y = Tensor(1000 + 30 * np.random.default_rng(0).standard_normal((1, 1, 8, 8)))
    rep = T.finite_diff_check(lambda: T.mean(T.square(generator_forward(gen, y))), gen.parameters()[-4:],
                              probe_count=20)
    assert rep.passed, rep.max_rel_error


def test_batch_norm_generator_train_and_eval(rng):
    gen = randomize_last(GeneratorParams.create(depth=4, width=4, batch_norm=True))
    y = Tensor(1000 + 30 * rng.standard_normal((2, 1, 8, 8)))
    out_train = generator_forward(gen, y, train=True)
    out_eval = generator_forward(gen, y, train=False)
    assert out_train.shape == out_eval.shape == y.shape
    assert not np.array_equal(gen.bn_stats[0].mean, np.zeros(4))
