"""Block-level oracles: gate references, identity at init, mode relations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from panet.blocks import (
    BlockParams,
    block_forward,
    fmm,
    pam,
    parallel_block,
    pca,
    psa,
    serial_block,
)
from panet.errors import ShapeError
from panet.tensor import Tensor, gradcheck

RNG = np.random.default_rng(7151)


def t64(arr, rg=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


def make_params(channels=4, mode="parallel", pooling="both", seed=3, dtype=np.float64):
    return BlockParams.create(channels, np.random.default_rng(seed), mode=mode,
                              pooling=pooling, dtype=dtype)


def randomize(p: BlockParams, scale=0.3, seed=11):
    rng = np.random.default_rng(seed)
    for _, t in p.named_parameters():
        t.data[...] = rng.normal(0.0, scale, size=t.shape)
    return p


# ---- PSA ----


def test_psa_halves_channels_and_multiplies():
    x = RNG.normal(size=(2, 6, 3, 3))
    out = psa(t64(x)).data
    assert out.shape == (2, 3, 3, 3)
    np.testing.assert_allclose(out, x[:, :3] * x[:, 3:], rtol=1e-12)


def test_psa_of_duplicated_halves_is_nonnegative():
    half = RNG.normal(size=(1, 2, 4, 4))
    x = np.concatenate([half, half], axis=1)
    assert (psa(t64(x)).data >= 0).all()


# ---- PCA against an explicit loop reference ----


def ref_pca(x, pooling):
    """Scalar loops only: pooled statistic per (sample, channel), then rescale."""
    n, c, h, w = x.shape
    half = c // 2
    out = np.empty_like(x)
    for ni in range(n):
        for ci in range(c):
            if pooling == "gap_only" or (pooling == "both" and ci >= half):
                acc = 0.0
                for i in range(h):
                    for j in range(w):
                        acc += x[ni, ci, i, j]
                s = acc / (h * w)
            else:
                s = x[ni, ci, 0, 0]
                for i in range(h):
                    for j in range(w):
                        if x[ni, ci, i, j] > s:
                            s = x[ni, ci, i, j]
            for i in range(h):
                for j in range(w):
                    out[ni, ci, i, j] = x[ni, ci, i, j] * s
    return out


@pytest.mark.parametrize("pooling", ["both", "gap_only", "gmp_only"])
def test_pca_matches_loop_reference(pooling):
    x = RNG.normal(size=(2, 8, 5, 7))
    got = pca(t64(x), pooling).data
    np.testing.assert_allclose(got, ref_pca(x, pooling), rtol=0, atol=1e-6)


def test_pca_variants_agree_on_constant_maps():
    # per-map constants make max and mean coincide, so all variants agree
    x = np.broadcast_to(RNG.normal(size=(2, 8, 1, 1)), (2, 8, 5, 7)).copy()
    outs = [pca(t64(x), m).data for m in ("both", "gap_only", "gmp_only")]
    np.testing.assert_allclose(outs[0], outs[1], rtol=0, atol=1e-7)
    np.testing.assert_allclose(outs[0], outs[2], rtol=0, atol=1e-7)


def test_pca_rejects_unknown_mode():
    with pytest.raises(ValueError):
        pca(t64(np.zeros((1, 2, 2, 2))), "median")


# ---- identity at initialization ----


def test_fresh_block_is_bitwise_identity():
    for mode in ("parallel", "serial"):
        p = make_params(mode=mode)
        for trial in range(20):
            x = RNG.normal(size=(2, 4, 6, 6))
            out = block_forward(t64(x), p)
            assert (out.data == x).all(), f"{mode} trial {trial} not an exact identity"


def test_randomized_block_is_not_identity():
    p = randomize(make_params())
    x = RNG.normal(size=(2, 4, 6, 6))
    assert not np.allclose(block_forward(t64(x), p).data, x)


# ---- mode relations ----


def test_modes_agree_when_one_branch_is_off():
    x = RNG.normal(size=(2, 4, 6, 6))
    for which in ("alpha", "beta"):
        p = randomize(make_params())
        getattr(p, which).data[...] = 0.0
        np.testing.assert_array_equal(parallel_block(t64(x), p).data,
                                      serial_block(t64(x), p).data)


def test_modes_differ_when_both_branches_active():
    p = randomize(make_params())
    x = RNG.normal(size=(2, 4, 6, 6))
    par = parallel_block(t64(x), p).data
    ser = serial_block(t64(x), p).data
    assert not np.allclose(par, ser)


def test_block_forward_dispatches_on_mode():
    x = RNG.normal(size=(1, 4, 5, 5))
    pp = randomize(make_params(mode="parallel"))
    ps = randomize(make_params(mode="serial"))
    np.testing.assert_array_equal(block_forward(t64(x), pp).data,
                                  parallel_block(t64(x), pp).data)
    np.testing.assert_array_equal(block_forward(t64(x), ps).data,
                                  serial_block(t64(x), ps).data)


def test_block_forward_rejects_wrong_width():
    p = make_params(channels=4)
    with pytest.raises(ShapeError):
        block_forward(t64(np.zeros((1, 6, 4, 4))), p)


def test_create_rejects_odd_width_and_bad_modes():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        BlockParams.create(3, rng)
    with pytest.raises(ValueError):
        BlockParams.create(4, rng, mode="diagonal")
    with pytest.raises(ValueError):
        BlockParams.create(4, rng, pooling="sometimes")


# ---- batch behaviour ----


def test_block_treats_batch_items_independently():
    p = randomize(make_params())
    x = RNG.normal(size=(3, 4, 6, 6))
    full = block_forward(t64(x), p).data
    perm = [2, 0, 1]
    permuted = block_forward(t64(x[perm]), p).data
    np.testing.assert_array_equal(permuted, full[perm])


def test_branch_shapes():
    p = randomize(make_params(channels=6))
    x = t64(RNG.normal(size=(2, 6, 5, 5)))
    assert pam(x, p).shape == (2, 6, 5, 5)
    assert fmm(x, p).shape == (2, 6, 5, 5)


# ---- gradients ----


@pytest.mark.parametrize("mode", ["parallel", "serial"])
def test_block_gradcheck(mode):
    # zero residual scales would zero out every internal gradient, so
    # randomize them along with the weights before checking
    p = make_params(mode=mode)
    for _, t in p.named_parameters():
        t.requires_grad = True
    randomize(p, scale=0.4, seed=23)
    x = Tensor(RNG.normal(size=(2, 4, 5, 5)), requires_grad=True)
    w = t64(RNG.normal(size=(2, 4, 5, 5)))
    params = {"x": x, **dict(p.named_parameters())}
    res = gradcheck(lambda: (block_forward(x, p) * w).sum(), params)
    assert not res.nonfinite, res.nonfinite
    assert res.passed(1e-4), f"worst relative error {res.worst:.3e}"


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float64, (1, 4, 3, 3), elements=st.floats(-5, 5)))
def test_identity_at_init_property(arr):
    p = make_params()
    assert (block_forward(Tensor(arr), p).data == arr).all()
