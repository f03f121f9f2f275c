"""Metric training: P x K batch construction, semi-hard triplet mining,
hinge triplet loss, decoupled-weight-decay adaptive-moment optimizer,
and a cosine-annealed learning rate.

Distances are squared Euclidean on unit-norm embeddings, computed as
2 - 2 * (e_i . e_j) and clamped at zero. Mining picks, for every ordered
same-label (anchor, positive) pair, the negative with the smallest
distance inside the semi-hard band (d1, d1 + margin); if the band is
empty it falls back to the closest negative beyond the margin, and if
every negative is closer than the anchor-positive pair, to the hardest
negative overall. Ties always resolve to the lowest index.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, ShapeError, UsageError
from .tensor import Tensor, _accum, _node, hinge


# ---- distances -------------------------------------------------------------


def pairwise_sq_dist(e: Tensor) -> Tensor:
    """All-pairs squared Euclidean distance for unit-norm embedding rows."""
    if e.data.ndim != 2:
        raise ShapeError(f"pairwise_sq_dist: expected (B, dim) embeddings, got {e.shape}")
    raw = 2.0 - 2.0 * (e.data @ e.data.T)
    mask = raw > 0
    out = _node(np.where(mask, raw, 0.0), (e,), "pairwise_sq_dist")
    if out.requires_grad:
        def _bw():
            gm = out.grad * mask
            _accum(e, -2.0 * ((gm + gm.T) @ e.data))
        out._backward = _bw
    return out


def gather2d(m: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick m[rows[k], cols[k]] as a vector; backward scatter-adds in place."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = _node(m.data[rows, cols], (m,), "gather2d")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(m.data)
            np.add.at(g, (rows, cols), out.grad)
            _accum(m, g)
        out._backward = _bw
    return out


# ---- mining ----------------------------------------------------------------


@dataclass
class MiningStats:
    n_band: int = 0  # negative found inside the semi-hard band
    n_beyond_margin: int = 0  # fallback: closest negative past d1 + margin
    n_hardest: int = 0  # fallback: every negative closer than the positive
    n_singleton_identities: int = 0  # labels with one sample, pairs skipped

    @property
    def n_triplets(self) -> int:
        return self.n_band + self.n_beyond_margin + self.n_hardest


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    d1: np.ndarray  # anchor-positive distances at mining time
    d2: np.ndarray  # anchor-negative distances at mining time
    margin: float
    stats: MiningStats = field(default_factory=MiningStats)

    def __len__(self) -> int:
        return int(self.anchors.size)


def semi_hard_mine(dist: np.ndarray, labels: np.ndarray, margin: float) -> TripletBatch:
    """One triplet per ordered same-label pair, negative chosen semi-hard."""
    dist = np.asarray(dist)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if dist.shape != (n, n):
        raise ShapeError(f"semi_hard_mine: distances {dist.shape} for {n} labels")
    stats = MiningStats()
    uniq, counts = np.unique(labels, return_counts=True)
    stats.n_singleton_identities = int((counts == 1).sum())
    anchors, positives, negatives, d1s, d2s = [], [], [], [], []
    for a in range(n):
        neg_idx = np.flatnonzero(labels != labels[a])
        if neg_idx.size == 0:
            continue
        dn = dist[a, neg_idx]
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            d1 = dist[a, p]
            in_band = (dn > d1) & (dn < d1 + margin)
            if in_band.any():
                # argmin scans ascending indices, so ties pick the lowest
                pick = neg_idx[in_band][np.argmin(dn[in_band])]
                stats.n_band += 1
            else:
                beyond = dn >= d1 + margin
                if beyond.any():
                    pick = neg_idx[beyond][np.argmin(dn[beyond])]
                    stats.n_beyond_margin += 1
                else:
                    pick = neg_idx[np.argmin(dn)]
                    stats.n_hardest += 1
            anchors.append(a)
            positives.append(p)
            negatives.append(int(pick))
            d1s.append(d1)
            d2s.append(dist[a, pick])
    return TripletBatch(
        anchors=np.asarray(anchors, dtype=np.intp),
        positives=np.asarray(positives, dtype=np.intp),
        negatives=np.asarray(negatives, dtype=np.intp),
        d1=np.asarray(d1s),
        d2=np.asarray(d2s),
        margin=float(margin),
        stats=stats,
    )


def triplet_loss(dist: Tensor, triplets: TripletBatch, margin: float) -> Tensor:
    """Sum over triplets of max(0, d1 - d2 + margin), differentiable in dist."""
    d1 = gather2d(dist, triplets.anchors, triplets.positives)
    d2 = gather2d(dist, triplets.anchors, triplets.negatives)
    return hinge(d1 - d2 + float(margin)).sum()


def active_fraction(triplets: TripletBatch) -> float:
    """Share of mined triplets with a positive hinge at mining time."""
    if len(triplets) == 0:
        return 0.0
    return float(np.mean(triplets.d1 - triplets.d2 + triplets.margin > 0))


# ---- optimizer -------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def decays(name: str, tensor: Tensor) -> bool:
    """Weight decay hits matrices and conv kernels only; biases, norm
    gains, and the residual scales stay unregularized."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("alpha", "beta"):
        return False
    return tensor.data.ndim >= 2


@dataclass
class OptState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def create(cls, named_params) -> "OptState":
        m = {name: np.zeros_like(t.data) for name, t in named_params}
        v = {name: np.zeros_like(t.data) for name, t in named_params}
        return cls(step=0, m=m, v=v)


def opt_step(named_params, grads, state: OptState, lr: float, weight_decay: float) -> None:
    """One adaptive-moment update with decoupled weight decay.

    The whole step aborts (no parameter is touched) if any gradient has a
    non-finite entry.
    """
    named_params = list(named_params)
    if len(grads) != len(named_params):
        raise ShapeError(f"opt_step: {len(grads)} gradients for {len(named_params)} parameters")
    for (name, _), g in zip(named_params, grads):
        if g is None:
            raise NumericError(f"opt_step: parameter {name!r} has no gradient")
        if not np.isfinite(g).all():
            raise NumericError(f"opt_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for (name, p), g in zip(named_params, grads):
        if weight_decay and decays(name, p):
            p.data *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def lr_at(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine schedule from lr0 down to lr_min across total steps."""
    if total == 0:
        raise UsageError("lr_at: schedule length must be positive")
    if not 0 <= t <= total:
        raise UsageError(f"lr_at: step {t} outside [0, {total}]")
    w = 0.5 * (1.0 + math.cos(math.pi * t / total))
    # convex blend keeps both endpoints exact in floating point
    return lr0 * w + lr_min * (1.0 - w)


# ---- training loop ---------------------------------------------------------


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    weight_decay: float = 5e-2
    batch_size: int = 16
    epochs: int = 300
    lr_min: float = 0.0
    margin: float = 0.2
    seed: int = 0
    p_identities: int = 4
    k_samples: int = 4

    def validate(self) -> "TrainConfig":
        if self.lr0 <= 0:
            raise UsageError(f"lr0 must be positive, got {self.lr0}")
        if self.margin <= 0:
            raise UsageError(f"margin must be positive, got {self.margin}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be at least 1, got {self.epochs}")
        if self.p_identities < 2 or self.k_samples < 2:
            raise UsageError("batches need at least 2 identities and 2 samples each "
                             f"(got P={self.p_identities}, K={self.k_samples})")
        if self.p_identities * self.k_samples != self.batch_size:
            raise UsageError(
                f"batch composition {self.p_identities}x{self.k_samples} does not "
                f"multiply to batch_size {self.batch_size}"
            )
        if self.lr_min < 0 or self.lr_min > self.lr0:
            raise UsageError(f"lr_min must lie in [0, lr0], got {self.lr_min}")
        return self


@dataclass
class MetricsRow:
    step: int
    epoch: int
    lr: float
    loss: float
    active_triplet_fraction: float
    eval_accuracy: float | None = None


METRICS_COLUMNS = ("step", "epoch", "lr", "loss", "active_triplet_fraction", "eval_accuracy")


def write_metrics(rows: list[MetricsRow], path: str) -> None:
    """Full-precision CSV so identical runs produce identical bytes."""
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(METRICS_COLUMNS)
        for r in rows:
            out.writerow([
                r.step,
                r.epoch,
                repr(r.lr),
                repr(r.loss),
                repr(r.active_triplet_fraction),
                "" if r.eval_accuracy is None else repr(r.eval_accuracy),
            ])


def _index_by_label(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(u): np.flatnonzero(labels == u) for u in np.unique(labels)}


def sample_batch(rng: np.random.Generator, by_label: dict[int, np.ndarray],
                 p_identities: int, k_samples: int) -> np.ndarray:
    """Indices for one P x K batch. Identities with fewer than two samples
    are never picked; identities with fewer than K samples repeat some."""
    eligible = sorted(lbl for lbl, idx in by_label.items() if idx.size >= 2)
    take = min(p_identities, len(eligible))
    chosen = rng.choice(np.asarray(eligible), size=take, replace=False)
    picks = []
    for lbl in chosen:
        pool = by_label[int(lbl)]
        picks.append(rng.choice(pool, size=k_samples, replace=pool.size < k_samples))
    return np.concatenate(picks)


def train(model, dataset, cfg: TrainConfig, metrics_path: str | None = None,
          eval_fn=None) -> list[MetricsRow]:
    """Optimize the model on the dataset; returns the per-step metrics rows.

    ``dataset`` needs ``images`` (N, C, H, W float32) and ``labels`` (N,)
    attributes. ``eval_fn``, when given, is called with the model at the
    end of every epoch and its result lands in that step's row.
    """
    cfg.validate()
    labels = np.asarray(dataset.labels)
    by_label = _index_by_label(labels)
    eligible = [lbl for lbl, idx in by_label.items() if idx.size >= 2]
    if len(eligible) < 2:
        raise DataError(
            f"training needs at least 2 identities with 2+ samples, found {len(eligible)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    named = list(model.named_parameters())
    state = OptState.create(named)
    steps_per_epoch = max(1, len(labels) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    rows: list[MetricsRow] = []
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            lr = lr_at(step, total_steps, cfg.lr0, cfg.lr_min)
            idx = sample_batch(rng, by_label, cfg.p_identities, cfg.k_samples)
            x = Tensor(np.ascontiguousarray(dataset.images[idx]))
            emb = model.forward(x)
            dist = pairwise_sq_dist(emb)
            mined = semi_hard_mine(dist.data, labels[idx], cfg.margin)
            loss = triplet_loss(dist, mined, cfg.margin)
            model.zero_grad()
            loss.backward()
            opt_step(named, [t.grad for _, t in named], state, lr, cfg.weight_decay)
            rows.append(MetricsRow(
                step=step,
                epoch=epoch,
                lr=lr,
                loss=float(loss.data),
                active_triplet_fraction=active_fraction(mined),
            ))
            step += 1
        if eval_fn is not None:
            rows[-1].eval_accuracy = float(eval_fn(model))
    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    return rows
