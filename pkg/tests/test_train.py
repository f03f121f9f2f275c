"""Trainer oracles: brute-force miner reference, optimizer simulations,
schedule endpoints, and a tiny end-to-end smoke run."""

import numpy as np
import pytest

from panet.backbone import BackboneConfig, PANet
from panet.errors import DataError, NumericError, ShapeError, UsageError
from panet.tensor import Tensor, gradcheck
from panet.train import (
    MetricsRow,
    OptState,
    TrainConfig,
    TripletBatch,
    active_fraction,
    decays,
    gather2d,
    lr_at,
    opt_step,
    pairwise_sq_dist,
    sample_batch,
    semi_hard_mine,
    train,
    triplet_loss,
    write_metrics,
)

RNG = np.random.default_rng(90210)


def unit_rows(n, d, rng=RNG):
    e = rng.normal(size=(n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


# ---- pairwise distances ----


def test_pairwise_known_geometry():
    e = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    d = pairwise_sq_dist(e).data
    assert d[0, 1] == pytest.approx(0.0, abs=1e-12)  # identical vectors
    assert d[0, 2] == pytest.approx(2.0, abs=1e-12)  # orthogonal
    assert d[0, 3] == pytest.approx(4.0, abs=1e-12)  # antipodal
    assert (d >= 0).all()
    np.testing.assert_allclose(d, d.T, rtol=0, atol=0)


def test_pairwise_matches_norm_formula():
    e = unit_rows(6, 5)
    d = pairwise_sq_dist(Tensor(e)).data
    want = ((e[:, None, :] - e[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(d, want, rtol=0, atol=1e-12)


def test_pairwise_gradcheck():
    # rows scaled below unit norm keep every pre-clamp value strictly
    # positive, away from the clamp's nondifferentiable boundary
    e = Tensor(0.8 * unit_rows(5, 4), requires_grad=True)
    w = Tensor(RNG.normal(size=(5, 5)))
    res = gradcheck(lambda: (pairwise_sq_dist(e) * w).sum(), {"e": e})
    assert not res.nonfinite and res.passed(1e-4), res.max_rel_err


def test_gather2d_scatter_accumulates_duplicates():
    m = Tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)
    out = gather2d(m, [0, 0, 2], [1, 1, 0])
    np.testing.assert_array_equal(out.data, [1.0, 1.0, 6.0])
    out.sum().backward()
    want = np.zeros((3, 3))
    want[0, 1] = 2.0  # two gathers of the same cell add up
    want[2, 0] = 1.0
    np.testing.assert_array_equal(m.grad, want)


# ---- mining vs an exhaustive reference ----


def brute_mine(dist, labels, margin):
    """O(B^3) reference: rank every negative by (tier, distance, index)."""
    picks = {}
    b = len(labels)
    for a in range(b):
        for p in range(b):
            if a == p or labels[a] != labels[p]:
                continue
            d1 = dist[a, p]
            best = None
            for ni in range(b):
                if labels[ni] == labels[a]:
                    continue
                d2 = dist[a, ni]
                if d1 < d2 < d1 + margin:
                    tier = 0
                elif d2 >= d1 + margin:
                    tier = 1
                else:
                    tier = 2
                key = (tier, d2, ni)
                if best is None or key < best:
                    best = key
            if best is not None:
                picks[(a, p)] = best[2]
    return picks


def mined_as_dict(tb: TripletBatch):
    return {(int(a), int(p)): int(n)
            for a, p, n in zip(tb.anchors, tb.positives, tb.negatives)}


def quantized_dist(rng, b):
    """Symmetric distances on a coarse grid so exact ties happen often."""
    d = rng.integers(0, 8, size=(b, b)) / 4.0
    d = np.triu(d, 1)
    d = d + d.T
    return d


def test_miner_matches_brute_force_on_random_batches():
    rng = np.random.default_rng(7)
    for _ in range(40):
        b = int(rng.integers(4, 20))
        labels = rng.integers(0, 4, size=b)
        dist = quantized_dist(rng, b)
        got = mined_as_dict(semi_hard_mine(dist, labels, 0.2))
        assert got == brute_mine(dist, labels, 0.2)


def test_miner_forced_single_band_choice():
    labels = np.array([0, 0, 1, 1])
    dist = np.zeros((4, 4))
    dist[0, 1] = dist[1, 0] = 0.5
    dist[0, 2] = dist[2, 0] = 0.6  # inside (0.5, 0.7)
    dist[0, 3] = dist[3, 0] = 2.0  # beyond the band
    dist[1, 2] = dist[2, 1] = 2.0
    dist[1, 3] = dist[3, 1] = 2.0
    dist[2, 3] = dist[3, 2] = 0.5
    tb = semi_hard_mine(dist, labels, 0.2)
    assert mined_as_dict(tb)[(0, 1)] == 2
    assert tb.stats.n_band >= 1


def test_miner_fallback_when_all_negatives_easy():
    labels = np.array([0, 0, 1, 1])
    dist = np.full((4, 4), 3.0)
    np.fill_diagonal(dist, 0.0)
    dist[0, 1] = dist[1, 0] = 0.1
    dist[2, 3] = dist[3, 2] = 0.1
    tb = semi_hard_mine(dist, labels, 0.2)
    assert tb.stats.n_band == 0 and tb.stats.n_beyond_margin == len(tb)
    # both negatives tie at 3.0, lowest index wins
    assert mined_as_dict(tb)[(0, 1)] == 2


def test_miner_fallback_when_all_negatives_hard():
    labels = np.array([0, 0, 1, 1])
    dist = np.zeros((4, 4))
    dist[0, 1] = dist[1, 0] = 1.0
    for i in (0, 1):
        for j in (2, 3):
            dist[i, j] = dist[j, i] = 0.05  # closer than the positive
    dist[2, 3] = dist[3, 2] = 1.0
    tb = semi_hard_mine(dist, labels, 0.2)
    pair_tiers = mined_as_dict(tb)
    assert pair_tiers[(0, 1)] == 2
    assert tb.stats.n_hardest >= 1


def test_miner_counts_singletons_and_skips_them():
    labels = np.array([0, 0, 1, 2, 2])
    dist = quantized_dist(np.random.default_rng(3), 5)
    tb = semi_hard_mine(dist, labels, 0.2)
    assert tb.stats.n_singleton_identities == 1
    assert all(labels[a] != 1 for a in tb.anchors)


def test_miner_permutation_equivariance():
    rng = np.random.default_rng(11)
    labels = np.array([0, 0, 1, 1, 2, 2])
    dist = quantized_dist(rng, 6)
    base = mined_as_dict(semi_hard_mine(dist, labels, 0.2))
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    permuted = mined_as_dict(semi_hard_mine(dist[np.ix_(perm, perm)], labels[perm], 0.2))
    # relabel the permuted picks back into original indices
    back = {(int(perm[a]), int(perm[p])): int(perm[n]) for (a, p), n in permuted.items()}
    assert set(back) == set(base)
    # tie breaking follows index order, which the permutation scrambles, so
    # compare the chosen negative's distance rather than its identity
    for (a, p) in base:
        assert dist[a, back[(a, p)]] == dist[a, base[(a, p)]]


# ---- triplet loss ----


def dist_tensor(d1, d2):
    """A 3x3 distance Tensor with one (anchor=0, pos=1, neg=2) triplet."""
    d = np.zeros((3, 3))
    d[0, 1] = d[1, 0] = d1
    d[0, 2] = d[2, 0] = d2
    d[1, 2] = d[2, 1] = 1.0
    t = Tensor(d, requires_grad=True)
    tb = TripletBatch(anchors=np.array([0]), positives=np.array([1]),
                      negatives=np.array([2]), d1=np.array([d1]), d2=np.array([d2]),
                      margin=0.2)
    return t, tb


@pytest.mark.parametrize("d1,d2,want", [(0.5, 1.0, 0.0), (1.0, 0.5, 0.7), (0.9, 0.9, 0.2)])
def test_triplet_loss_cases(d1, d2, want):
    dist, tb = dist_tensor(d1, d2)
    assert float(triplet_loss(dist, tb, 0.2).data) == pytest.approx(want, abs=1e-12)


def test_triplet_loss_nonnegative_and_zero_iff_satisfied():
    rng = np.random.default_rng(5)
    for _ in range(20):
        e = unit_rows(8, 4, rng)
        labels = np.repeat([0, 1], 4)
        dist = pairwise_sq_dist(Tensor(e))
        tb = semi_hard_mine(dist.data, labels, 0.2)
        loss = float(triplet_loss(dist, tb, 0.2).data)
        assert loss >= 0.0
        satisfied = (tb.d2 >= tb.d1 + 0.2 - 1e-12).all()
        assert (loss == 0.0) == bool(satisfied) or abs(loss) < 1e-6


def test_nonparticipant_embeddings_get_zero_gradient():
    e = Tensor(unit_rows(5, 4), requires_grad=True)
    dist = pairwise_sq_dist(e)
    tb = TripletBatch(anchors=np.array([0]), positives=np.array([1]),
                      negatives=np.array([2]), d1=np.zeros(1), d2=np.zeros(1), margin=5.0)
    # margin 5 exceeds any possible d2 - d1 gap, so the hinge is active
    triplet_loss(dist, tb, 5.0).backward()
    assert np.all(e.grad[3] == 0.0) and np.all(e.grad[4] == 0.0)
    assert np.any(e.grad[:3] != 0.0)


def test_triplet_loss_gradcheck_through_distances():
    e = Tensor(unit_rows(6, 4), requires_grad=True)
    labels = np.repeat([0, 1], 3)
    tb = semi_hard_mine(pairwise_sq_dist(e).data, labels, 0.3)
    res = gradcheck(lambda: triplet_loss(pairwise_sq_dist(e), tb, 0.3), {"e": e})
    assert not res.nonfinite and res.passed(1e-4), res.max_rel_err


def test_active_fraction():
    tb = TripletBatch(anchors=np.zeros(4, int), positives=np.zeros(4, int),
                      negatives=np.zeros(4, int),
                      d1=np.array([1.0, 0.1, 0.5, 0.2]),
                      d2=np.array([0.5, 5.0, 0.65, 0.2]), margin=0.2)
    # hinges: 0.7, <0, 0.05, 0.2 -> three active out of four
    assert active_fraction(tb) == 0.75
    empty = TripletBatch(*(np.zeros(0, int),) * 3, d1=np.zeros(0), d2=np.zeros(0), margin=0.2)
    assert active_fraction(empty) == 0.0


# ---- optimizer ----


def named_single(theta):
    return [("theta", theta)]


def test_opt_step_zero_grad_no_decay_is_identity():
    theta = Tensor(np.array([[1.5, -2.0]], dtype=np.float32), requires_grad=True)
    state = OptState.create(named_single(theta))
    opt_step(named_single(theta), [np.zeros((1, 2), dtype=np.float32)], state, 0.1, 0.0)
    np.testing.assert_array_equal(theta.data, [[1.5, -2.0]])


def test_opt_step_zero_grad_with_decay_shrinks_matrices_only():
    w = Tensor(np.full((2, 2), 4.0, dtype=np.float32), requires_grad=True)
    b = Tensor(np.full(2, 4.0, dtype=np.float32), requires_grad=True)
    a = Tensor(np.full((2, 1, 1), 4.0, dtype=np.float32), requires_grad=True)
    named = [("layer.weight", w), ("layer.bias", b), ("blocks.0.alpha", a)]
    state = OptState.create(named)
    zeros = [np.zeros_like(t.data) for _, t in named]
    opt_step(named, zeros, state, lr=0.5, weight_decay=0.1)
    np.testing.assert_allclose(w.data, 4.0 * (1 - 0.5 * 0.1), rtol=1e-6)
    np.testing.assert_array_equal(b.data, np.full(2, 4.0))  # biases not decayed
    np.testing.assert_array_equal(a.data, np.full((2, 1, 1), 4.0))  # scales not decayed


def test_decay_mask_rules():
    w = Tensor(np.zeros((3, 3), dtype=np.float32))
    assert decays("stem.weight", w)
    assert not decays("stages.0.blocks.0.alpha", Tensor(np.zeros((4, 1, 1), dtype=np.float32)))
    assert not decays("stages.0.blocks.0.beta", Tensor(np.zeros((4, 1, 1), dtype=np.float32)))
    assert not decays("head.bias", Tensor(np.zeros(3, dtype=np.float32)))
    assert not decays("pam_norm.gain", Tensor(np.zeros(3, dtype=np.float32)))


def test_opt_step_aborts_on_nonfinite_without_mutation():
    theta = Tensor(np.array([[1.0]], dtype=np.float32), requires_grad=True)
    state = OptState.create(named_single(theta))
    with pytest.raises(NumericError, match="theta"):
        opt_step(named_single(theta), [np.array([[np.nan]], dtype=np.float32)], state, 0.1, 0.1)
    np.testing.assert_array_equal(theta.data, [[1.0]])
    assert state.step == 0


def test_opt_step_quadratic_descends_monotonically():
    theta = Tensor(np.array([[1.0]]), requires_grad=True)
    state = OptState.create(named_single(theta))
    history = [1.0]
    for _ in range(100):
        g = 2.0 * theta.data
        opt_step(named_single(theta), [g], state, lr=0.005, weight_decay=0.0)
        history.append(abs(theta.data.item()))
    assert all(b < a for a, b in zip(history, history[1:]))


# ---- schedule ----


def test_lr_at_endpoints_exact():
    assert lr_at(0, 100, 5e-4, 1e-6) == 5e-4
    assert lr_at(100, 100, 5e-4, 1e-6) == 1e-6
    assert lr_at(50, 100, 5e-4, 1e-6) == pytest.approx((5e-4 + 1e-6) / 2, rel=1e-12)
    assert lr_at(0, 7, 0.3, 0.0) == 0.3
    assert lr_at(7, 7, 0.3, 0.0) == 0.0


def test_lr_at_monotone_nonincreasing():
    vals = [lr_at(t, 97, 1e-3, 1e-5) for t in range(98)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_lr_at_rejects_bad_arguments():
    with pytest.raises(UsageError):
        lr_at(0, 0, 1e-3)
    with pytest.raises(UsageError):
        lr_at(5, 4, 1e-3)


# ---- config and batching ----


def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(UsageError):
        TrainConfig(lr0=0.0).validate()
    with pytest.raises(UsageError):
        TrainConfig(margin=-0.1).validate()
    with pytest.raises(UsageError):
        TrainConfig(batch_size=10).validate()  # 4x4 != 10
    with pytest.raises(UsageError):
        TrainConfig(p_identities=1, k_samples=16).validate()
    with pytest.raises(UsageError):
        TrainConfig(lr_min=1.0).validate()


def test_sample_batch_composition():
    labels = np.repeat(np.arange(5), 4)
    by_label = {i: np.flatnonzero(labels == i) for i in range(5)}
    by_label[9] = np.array([99])  # singleton never sampled
    rng = np.random.default_rng(0)
    for _ in range(10):
        idx = sample_batch(rng, by_label, 4, 4)
        assert idx.shape == (16,)
        assert 99 not in idx
        chosen = labels[idx].reshape(4, 4)
        assert all(len(set(row)) == 1 for row in chosen)  # K block per identity
        assert len({row[0] for row in chosen}) == 4  # distinct identities


# ---- metrics csv ----


def test_write_metrics_columns_and_blanks(tmp_path):
    rows = [MetricsRow(0, 0, 1e-3, 2.5, 0.5),
            MetricsRow(1, 0, 9e-4, 1.25, 0.25, eval_accuracy=87.5)]
    path = tmp_path / "metrics.csv"
    write_metrics(rows, str(path))
    text = path.read_text().splitlines()
    assert text[0] == "step,epoch,lr,loss,active_triplet_fraction,eval_accuracy"
    assert text[1].endswith(",")  # blank eval field
    assert text[2].split(",")[-1] == "87.5"


# ---- end-to-end smoke ----


class ArraysDataset:
    def __init__(self, images, labels):
        self.images = images
        self.labels = labels


def constant_image_dataset():
    imgs = np.zeros((8, 3, 16, 16), dtype=np.float32)
    imgs[:4] += 0.2
    imgs[4:] += 0.8
    labels = np.repeat([0, 1], 4)
    return ArraysDataset(imgs, labels)


TINY = BackboneConfig(in_channels=3, img_size=16, base_channels=4, depths=(1,),
                      channel_multipliers=(1,), embed_dim=8)


def smoke_config(seed=0, epochs=50):
    return TrainConfig(lr0=1e-2, batch_size=8, epochs=epochs, margin=0.2, seed=seed,
                       p_identities=2, k_samples=4)


def test_train_two_constant_identities_reaches_zero_loss(tmp_path):
    model = PANet.create(TINY, seed=2)
    rows = train(model, constant_image_dataset(), smoke_config(),
                 metrics_path=str(tmp_path / "m.csv"))
    assert len(rows) == 50
    assert rows[-1].loss == 0.0
    assert min(r.loss for r in rows[:50]) == 0.0


def test_train_is_seed_deterministic(tmp_path):
    losses = []
    csvs = []
    for run in range(2):
        model = PANet.create(TINY, seed=2)
        path = tmp_path / f"m{run}.csv"
        rows = train(model, constant_image_dataset(), smoke_config(seed=3, epochs=10),
                     metrics_path=str(path))
        losses.append([r.loss for r in rows])
        csvs.append(path.read_bytes())
    assert losses[0] == losses[1]
    assert csvs[0] == csvs[1]
    model = PANet.create(TINY, seed=2)
    other = train(model, constant_image_dataset(), smoke_config(seed=4, epochs=10))
    assert [r.loss for r in other] != losses[0]


def test_train_rejects_single_identity():
    data = ArraysDataset(np.zeros((4, 3, 16, 16), dtype=np.float32), np.zeros(4, dtype=int))
    with pytest.raises(DataError):
        train(PANet.create(TINY, seed=0), data, smoke_config())
