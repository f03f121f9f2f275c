"""Gallery/probe identification.

One seeded-random sample per identity forms the feature library; every
remaining sample becomes a probe and is assigned the library identity
with the highest cosine similarity (ties go to the lowest identity id).
Accuracy is TP/N, with per-condition rollups reported two ways: the
contribution TP_c/N (these sum exactly to the overall accuracy) and the
conditional accuracy TP_c/N_c.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import LIGHT_CONDITIONS, ORIENTATIONS, ArrayDataset
from .errors import DataError, NumericError, ShapeError

CSV_COLUMNS = ("Dark", "Normal", "Exposure", "Nonuniform", "Left", "Front", "Right", "Sum")


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: dimensions differ, {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cosine_similarity: zero-norm vector")
    return float(u @ v) / (nu * nv)


@dataclass
class FeatureLibrary:
    identities: list[str]  # ascending, so argmax ties resolve to the lowest id
    embeddings: np.ndarray  # (L, dim), row i belongs to identities[i]
    source_paths: list[str]
    excluded_identities: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.identities) != len(set(self.identities)):
            raise DataError("feature library has duplicate identities")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.identities):
            raise ShapeError(
                f"feature library embeddings {self.embeddings.shape} do not match "
                f"{len(self.identities)} identities"
            )
        if self.identities != sorted(self.identities):
            raise DataError("feature library identities must be sorted ascending")

    def __len__(self) -> int:
        return len(self.identities)


def build_library(model, dataset: ArrayDataset, seed: int = 0) -> FeatureLibrary:
    """Pick one gallery sample per identity by seeded randomness and embed it."""
    by_id: dict[str, list[int]] = {}
    for i, rec in enumerate(dataset.records):
        by_id.setdefault(rec.id, []).append(i)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    identities, gallery_idx, excluded = [], [], []
    for ident in sorted(by_id):
        rows = by_id[ident]
        if len(rows) < 2:
            excluded.append(ident)
            continue
        identities.append(ident)
        gallery_idx.append(rows[int(rng.integers(len(rows)))])
    if not identities:
        raise DataError("no identity has the 2+ samples needed for gallery plus probe")
    emb = model.embed(dataset.images[gallery_idx])
    return FeatureLibrary(
        identities=identities,
        embeddings=np.asarray(emb),
        source_paths=[dataset.records[i].path for i in gallery_idx],
        excluded_identities=excluded,
    )


def classify(probe: np.ndarray, lib: FeatureLibrary) -> tuple[str, float]:
    """The library identity most cosine-similar to the probe embedding."""
    if len(lib) == 0:
        raise DataError("cannot classify against an empty feature library")
    probe = np.asarray(probe, dtype=np.float64).ravel()
    pn = float(np.linalg.norm(probe))
    norms = np.linalg.norm(lib.embeddings.astype(np.float64), axis=1)
    if pn == 0.0 or (norms == 0.0).any():
        raise NumericError("classify: zero-norm embedding")
    sims = (lib.embeddings.astype(np.float64) / norms[:, None]) @ (probe / pn)
    best = int(np.argmax(sims))  # first maximum, hence lowest identity id
    return lib.identities[best], float(sims[best])


@dataclass
class ConditionStats:
    tp: int
    n: int
    total: int  # probe count N across the whole evaluation

    @property
    def contribution(self) -> Fraction:
        return Fraction(self.tp, self.total)

    @property
    def accuracy(self) -> float | None:
        return self.tp / self.n if self.n else None


@dataclass
class EvalReport:
    n: int
    tp: int
    per_light: dict[str, ConditionStats] | None
    per_orientation: dict[str, ConditionStats] | None
    excluded_identities: list[str]
    gallery: list[tuple[str, str]]  # (identity, source path), replay log
    seed: int
    n_ties: int = 0

    @property
    def acc(self) -> float:
        return self.tp / self.n

    @property
    def acc_fraction(self) -> Fraction:
        return Fraction(self.tp, self.n)

    @property
    def sum_percent(self) -> float:
        return 100.0 * self.tp / self.n

    def to_json(self) -> str:
        def stats(block):
            if block is None:
                return None
            return {
                value: {
                    "tp": s.tp,
                    "n": s.n,
                    "contribution": float(s.contribution),
                    "accuracy": s.accuracy,
                }
                for value, s in block.items()
            }

        return json.dumps({
            "n": self.n,
            "tp": self.tp,
            "accuracy": self.acc,
            "per_light": stats(self.per_light),
            "per_orientation": stats(self.per_orientation),
            "excluded_identities": self.excluded_identities,
            "gallery": [{"id": i, "path": p} for i, p in self.gallery],
            "seed": self.seed,
            "ties": self.n_ties,
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Header plus one percent-valued row: per-condition contributions
        and their Sum, rounded to two decimals."""
        def cell(block, value):
            if block is None:
                return ""
            return f"{float(block[value].contribution) * 100.0:.2f}"

        cells = [cell(self.per_light, v) for v in LIGHT_CONDITIONS]
        cells += [cell(self.per_orientation, v) for v in ORIENTATIONS]
        cells.append(f"{self.sum_percent:.2f}")
        return ",".join(CSV_COLUMNS) + "\n" + ",".join(cells) + "\n"


def evaluate(model, dataset: ArrayDataset, seed: int = 0) -> EvalReport:
    """Build the library, classify every remaining probe, and roll up."""
    lib = build_library(model, dataset, seed)
    gallery_paths = set(lib.source_paths)
    kept = set(lib.identities)
    probe_rows = [i for i, rec in enumerate(dataset.records)
                  if rec.id in kept and rec.path not in gallery_paths]
    if not probe_rows:
        raise DataError("no probes remain after gallery selection")
    emb = np.asarray(model.embed(dataset.images[probe_rows]))
    n = len(probe_rows)
    tp = 0
    n_ties = 0
    correct: list[bool] = []
    norms = np.linalg.norm(lib.embeddings.astype(np.float64), axis=1)
    if (norms == 0.0).any():
        raise NumericError("evaluate: zero-norm gallery embedding")
    lib_unit = lib.embeddings.astype(np.float64) / norms[:, None]
    for row, e in zip(probe_rows, emb):
        pn = float(np.linalg.norm(e))
        if pn == 0.0:
            raise NumericError("evaluate: zero-norm probe embedding")
        sims = lib_unit @ (np.asarray(e, dtype=np.float64) / pn)
        best = int(np.argmax(sims))
        n_ties += int((sims == sims[best]).sum()) > 1
        ok = lib.identities[best] == dataset.records[row].id
        tp += ok
        correct.append(ok)

    def rollup(values: tuple[str, ...], getter) -> dict[str, ConditionStats] | None:
        tags = [getter(dataset.records[i]) for i in probe_rows]
        if any(t is None for t in tags):
            return None
        out = {v: ConditionStats(0, 0, n) for v in values}
        for tag, ok in zip(tags, correct):
            out[tag].n += 1
            out[tag].tp += int(ok)
        return out

    return EvalReport(
        n=n,
        tp=tp,
        per_light=rollup(LIGHT_CONDITIONS, lambda r: r.light),
        per_orientation=rollup(ORIENTATIONS, lambda r: r.orientation),
        excluded_identities=lib.excluded_identities,
        gallery=list(zip(lib.identities, lib.source_paths)),
        seed=seed,
        n_ties=n_ties,
    )
