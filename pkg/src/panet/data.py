"""Synthetic identity corpus: deterministic generation, PPM (P6) image
I/O, JSON-lines manifests, stratified splitting, and augmentation.

Each identity gets a procedural base pattern (a sinusoid mixture plus a
blob layout, unique per identity). Each sample applies a small jitter
and one nuisance condition per family:

    light:       dark (x0.4), normal, exposure (x1.8, clipped),
                 nonuniform (horizontal illumination ramp)
    orientation: left (shear -0.3), front, right (mirror then shear 0.3)

Everything derives from ``np.random.SeedSequence(seed)`` with fixed
spawn keys, so one config always produces byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError, UsageError

LIGHT_CONDITIONS = ("dark", "normal", "exposure", "nonuniform")
ORIENTATIONS = ("left", "front", "right")
SPLITS = ("train", "test")


@dataclass
class ManifestRecord:
    path: str
    id: str
    split: str
    light: str | None = None
    orientation: str | None = None

    def validate(self) -> "ManifestRecord":
        if self.split not in SPLITS:
            raise DataError(f"record {self.path!r}: split {self.split!r} not in {SPLITS}")
        if self.light is not None and self.light not in LIGHT_CONDITIONS:
            raise DataError(f"record {self.path!r}: light {self.light!r} not in {LIGHT_CONDITIONS}")
        if self.orientation is not None and self.orientation not in ORIENTATIONS:
            raise DataError(
                f"record {self.path!r}: orientation {self.orientation!r} not in {ORIENTATIONS}"
            )
        return self


@dataclass
class SynthConfig:
    n_identities: int = 8
    samples_per_identity: int = 10
    image_size: int = 64
    seed: int = 0
    condition_mix: dict | None = None  # {"light": {...}, "orientation": {...}}

    def validate(self) -> "SynthConfig":
        if self.n_identities < 2:
            raise UsageError(f"need at least 2 identities, got {self.n_identities}")
        if self.samples_per_identity < 2:
            raise UsageError(f"need at least 2 samples per identity, got"
                             f" {self.samples_per_identity}")
        if self.image_size < 8:
            raise UsageError(f"image_size must be at least 8, got {self.image_size}")
        for family, vocab in (("light", LIGHT_CONDITIONS), ("orientation", ORIENTATIONS)):
            mix = (self.condition_mix or {}).get(family)
            if mix is None:
                continue
            unknown = set(mix) - set(vocab)
            if unknown:
                raise UsageError(f"condition_mix[{family!r}] has unknown values {sorted(unknown)}")
            if any(v < 0 for v in mix.values()) or sum(mix.values()) <= 0:
                raise UsageError(f"condition_mix[{family!r}] proportions must be nonnegative "
                                 "and sum to something positive")
        return self

    def mix_for(self, family: str, vocab: tuple[str, ...]) -> list[float]:
        mix = (self.condition_mix or {}).get(family)
        if mix is None:
            return [1.0 / len(vocab)] * len(vocab)
        total = sum(mix.values())
        return [mix.get(v, 0.0) / total for v in vocab]


# ---- PPM (P6) image I/O ------------------------------------------------------

_WS = b" \t\r\n\x0b\x0c"


def save_image(x: np.ndarray, path) -> None:
    """Write a (1,3,H,W) or (3,H,W) array in [0,1] as binary 8-bit PPM."""
    arr = np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError(f"save_image: expected a single image, got batch {arr.shape}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"save_image: expected (3,H,W) channels-first RGB, got {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


def load_image(path) -> np.ndarray:
    """Read a binary 8-bit PPM into a (1,3,H,W) float32 array in [0,1]."""
    blob = Path(path).read_bytes()
    pos = 0

    def skip_space():
        nonlocal pos
        while pos < len(blob):
            if blob[pos] in _WS:
                pos += 1
            elif blob[pos:pos + 1] == b"#":  # comment runs to end of line
                while pos < len(blob) and blob[pos] not in b"\r\n":
                    pos += 1
            else:
                return

    def token(what: str) -> bytes:
        nonlocal pos
        skip_space()
        start = pos
        while pos < len(blob) and blob[pos] not in _WS:
            pos += 1
        if start == pos:
            raise DataError(f"{path}: missing {what} at byte {start}")
        return blob[start:pos]

    def integer(what: str) -> int:
        start = pos
        t = token(what)
        if not t.isdigit():
            raise DataError(f"{path}: {what} is not a number at byte {start}")
        return int(t)

    magic = token("magic")
    if magic != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {magic!r} at byte 0)")
    w = integer("width")
    h = integer("height")
    maxval = integer("maxval")
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    if pos >= len(blob) or blob[pos] not in _WS:
        raise DataError(f"{path}: expected whitespace after maxval at byte {pos}")
    pos += 1  # exactly one separator byte, then raw samples
    need = 3 * w * h
    have = len(blob) - pos
    if have < need:
        raise DataError(f"{path}: payload truncated at byte {len(blob)}: "
                        f"need {need} bytes, have {have}")
    if have > need:
        raise DataError(f"{path}: {have - need} unexpected bytes after byte {pos + need}")
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    img = data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
    return img[None]


# ---- manifests ---------------------------------------------------------------


def write_manifest(records: list[ManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            row = {k: v for k, v in asdict(r).items() if v is not None}
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    fields = set(ManifestRecord.__dataclass_fields__)
    records = []
    seen_paths = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: manifest line does not parse: {e}") from None
            unknown = set(row) - fields
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown manifest keys {sorted(unknown)}")
            missing = {"path", "id", "split"} - set(row)
            if missing:
                raise DataError(f"{path}:{lineno}: manifest record missing {sorted(missing)}")
            rec = ManifestRecord(**row).validate()
            if rec.path in seen_paths:
                raise DataError(f"{path}:{lineno}: duplicate record path {rec.path!r}")
            seen_paths.add(rec.path)
            records.append(rec)
    return records


@dataclass
class ArrayDataset:
    """Manifest records materialized into arrays ready for the model."""

    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int indices into label_names
    label_names: list[str]
    records: list[ManifestRecord]


def load_dataset(manifest_path, image_size: int | None = None) -> ArrayDataset:
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    if not records:
        raise DataError(f"{manifest_path}: manifest is empty")
    root = manifest_path.parent
    images = []
    for r in records:
        img = load_image(root / r.path)
        if image_size is not None and img.shape[2:] != (image_size, image_size):
            img = resize(img, image_size)
        images.append(img[0])
    label_names = sorted({r.id for r in records})
    index = {name: i for i, name in enumerate(label_names)}
    return ArrayDataset(
        images=np.stack(images).astype(np.float32),
        labels=np.asarray([index[r.id] for r in records], dtype=np.int64),
        label_names=label_names,
        records=records,
    )


# ---- augmentation and resize ---------------------------------------------------


def augment(image: np.ndarray, op: str, factor: float | None = None,
            dx: int = 0, dy: int = 0) -> np.ndarray:
    """Apply one augmentation to a (..., H, W) array in [0, 1]."""
    img = np.asarray(image)
    h, w = img.shape[-2:]
    if op == "hflip":
        return img[..., ::-1].copy()
    if op == "brightness":
        if factor is None or factor <= 0:
            raise UsageError(f"brightness factor must be positive, got {factor}")
        return np.clip(img * factor, 0.0, 1.0)
    if op == "translate":
        if abs(dx) >= w or abs(dy) >= h:
            raise UsageError(f"translate ({dx},{dy}) out of range for {h}x{w} image")
        out = np.zeros_like(img)
        ys = slice(max(dy, 0), h + min(dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        ys_src = slice(max(-dy, 0), h + min(-dy, 0))
        xs_src = slice(max(-dx, 0), w + min(-dx, 0))
        out[..., ys, xs] = img[..., ys_src, xs_src]
        return out
    raise UsageError(f"unknown augmentation {op!r}")


def resize(x: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of the trailing two axes using pixel centers."""
    if target < 1:
        raise UsageError(f"resize target must be at least 1, got {target}")
    arr = np.asarray(x, dtype=np.float32)
    h, w = arr.shape[-2:]

    def axis(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, ty = axis(h, target)
    x0, x1, tx = axis(w, target)
    top = arr[..., y0, :][..., :, x0] * (1 - tx) + arr[..., y0, :][..., :, x1] * tx
    bot = arr[..., y1, :][..., :, x0] * (1 - tx) + arr[..., y1, :][..., :, x1] * tx
    return top * (1 - ty[:, None]) + bot * (ty[:, None])


def _shear(img: np.ndarray, slope: float) -> np.ndarray:
    """Integer per-row horizontal shift proportional to distance from center."""
    h, w = img.shape[-2:]
    out = np.zeros_like(img)
    mid = (h - 1) / 2.0
    for r in range(h):
        shift = int(round(slope * (r - mid)))
        shift = max(-(w - 1), min(w - 1, shift))
        if shift >= 0:
            out[..., r, shift:] = img[..., r, :w - shift]
        else:
            out[..., r, :w + shift] = img[..., r, -shift:]
    return out


def _apply_orientation(img: np.ndarray, orientation: str) -> np.ndarray:
    if orientation == "front":
        return img
    if orientation == "left":
        return _shear(img, -0.3)
    if orientation == "right":
        return _shear(augment(img, "hflip"), 0.3)
    raise DataError(f"unknown orientation {orientation!r}")


def _apply_light(img: np.ndarray, light: str) -> np.ndarray:
    if light == "normal":
        return img
    if light == "dark":
        return img * 0.4
    if light == "exposure":
        return np.clip(img * 1.8, 0.0, 1.0)
    if light == "nonuniform":
        ramp = np.linspace(0.45, 1.2, img.shape[-1], dtype=img.dtype)
        return np.clip(img * ramp, 0.0, 1.0)
    raise DataError(f"unknown light condition {light!r}")


# ---- generation ----------------------------------------------------------------


def _base_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    """Identity-unique texture: per-channel sinusoids plus shared blobs.

    The pattern is mirror symmetric so the mirrored "right" orientation
    stays correlated with the identity, and it is normalized to an exact
    0.5 mean with fixed structure energy so identities differ in spatial
    layout rather than in overall brightness.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((3, size, size))
    for c in range(3):
        for _ in range(3):
            # low frequencies survive the shear and translation nuisances
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            amp = rng.uniform(0.2, 0.5)
            img[c] += amp * np.sin(2.0 * math.pi * (fx * xx + fy * yy) + phase)
    for _ in range(4):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        sigma = rng.uniform(0.12, 0.25)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma * sigma))
        img += rng.uniform(-0.9, 0.9, size=3)[:, None, None] * blob
    img = 0.5 * (img + img[:, :, ::-1])
    img -= img.mean()
    img *= 0.22 / (np.sqrt(np.mean(img * img)) + 1e-9)
    return np.clip(0.5 + img, 0.02, 0.98).astype(np.float32)


def _allocate(k: int, props: list[float], vocab: tuple[str, ...]) -> list[int]:
    """Largest-remainder counts per vocabulary value summing to k."""
    base = [int(math.floor(p * k)) for p in props]
    fracs = [p * k - b for p, b in zip(props, base)]
    order = sorted(range(len(vocab)), key=lambda i: (-fracs[i], i))
    for i in order[:k - sum(base)]:
        base[i] += 1
    return base


def _condition_pairs(cfg: SynthConfig) -> list[tuple[str, str]]:
    """One (light, orientation) assignment per sample index, shared by all
    identities so their per-condition compositions are identical."""
    k = cfg.samples_per_identity
    light_counts = _allocate(k, cfg.mix_for("light", LIGHT_CONDITIONS), LIGHT_CONDITIONS)
    orient_counts = _allocate(k, cfg.mix_for("orientation", ORIENTATIONS), ORIENTATIONS)
    lights = [v for v, n in zip(LIGHT_CONDITIONS, light_counts) for _ in range(n)]
    # round-robin interleave so orientations spread across the light runs
    remaining = list(orient_counts)
    orients = []
    for _ in range(k):
        i = max(range(len(ORIENTATIONS)), key=lambda j: (remaining[j], -j))
        orients.append(ORIENTATIONS[i])
        remaining[i] -= 1
    pairs = list(zip(lights, orients))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    rng.shuffle(pairs)
    return pairs


def generate(cfg: SynthConfig, out_dir) -> list[ManifestRecord]:
    """Write the corpus and its manifest; returns the manifest records."""
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DataError(f"output directory {out} is not writable: {e}") from None
    pairs = _condition_pairs(cfg)
    records: list[ManifestRecord] = []
    for i in range(cfg.n_identities):
        ident = f"id{i:03d}"
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, i)))
        base = _base_pattern(rng, cfg.image_size)
        (out / ident).mkdir(exist_ok=True)
        for s, (light, orientation) in enumerate(pairs):
            img = base
            dx, dy = (int(v) for v in rng.integers(-2, 3, size=2))
            img = augment(img, "translate", dx=dx, dy=dy)
            img = augment(img, "brightness", factor=float(rng.uniform(0.92, 1.08)))
            img = _apply_orientation(img, orientation)
            img = np.clip(_apply_light(img, light), 0.0, 1.0)
            rel = f"{ident}/{s:03d}.ppm"
            save_image(img, out / rel)
            records.append(ManifestRecord(path=rel, id=ident, split="train",
                                          light=light, orientation=orientation))
    write_manifest(records, out / "manifest.jsonl")
    return records


def split(records: list[ManifestRecord], ratio: float = 0.8,
          seed: int = 0) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
    """Per-identity stratified split; every identity lands in both halves.

    Within an identity the draw is further stratified by condition pair
    (largest-remainder allocation), so identities with the same condition
    composition keep identical train compositions.
    """
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    by_id: dict[str, list[ManifestRecord]] = {}
    for r in records:
        by_id.setdefault(r.id, []).append(r)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    train, test = [], []
    for ident in sorted(by_id):
        group = by_id[ident]
        k = len(group)
        if k < 2:
            raise DataError(f"identity {ident!r} has {k} sample(s); need at least 2 to split")
        n_train = min(max(int(round(ratio * k)), 1), k - 1)
        buckets: dict[tuple, list[int]] = {}
        for j, rec in enumerate(group):
            key = (rec.light or "", rec.orientation or "")
            buckets.setdefault(key, []).append(j)
        keys = sorted(buckets)
        quota = {key: int(math.floor(ratio * len(buckets[key]))) for key in keys}
        remainder = sorted(keys, key=lambda key: (-(ratio * len(buckets[key]) - quota[key]),
                                                  keys.index(key)))
        for key in remainder:
            if sum(quota.values()) >= n_train:
                break
            if quota[key] < len(buckets[key]):
                quota[key] += 1
        # rounding can still leave the per-identity total off by a few
        while sum(quota.values()) > n_train:
            key = max(keys, key=lambda v: quota[v])
            quota[key] -= 1
        while sum(quota.values()) < n_train:
            key = max(keys, key=lambda v: len(buckets[v]) - quota[v])
            quota[key] += 1
        chosen: set[int] = set()
        for key in keys:
            members = buckets[key]
            perm = rng.permutation(len(members))
            chosen.update(members[p] for p in perm[:quota[key]])
        for j, rec in enumerate(group):
            if j in chosen:
                train.append(replace(rec, split="train"))
            else:
                test.append(replace(rec, split="test"))
    return train, test
