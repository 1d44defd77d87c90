"""Datasets: a synthetic compositional image generator with ground-truth part
compositions, pixel-level domain shifts, IDX ingestion/export, split
management, and episodic sampling.

Every generator and loader is a pure function of its inputs and seed; rng
streams are keyed with SeedSequence so per-sample randomness is independent
of class identity where tests rely on it (placement jitter and render noise
re-use the same stream across classes).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# rng stream tags (SeedSequence entropy prefixes)
_TAG_GLYPH = 11
_TAG_COMPOSITION = 12
_TAG_TYPE = 13
_TAG_JITTER = 14
_TAG_NOISE = 15
_TAG_SHIFT = 16


def _stream(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


@dataclass
class LabeledImageSet:
    """Images (N, H, W) with values in [0,1], integer labels, an optional
    domain tag, and optional per-class semantic vectors."""

    images: np.ndarray
    labels: np.ndarray
    domain: str | None = None
    semantics: dict[int, np.ndarray] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or len(self.labels) != len(self.images):
            raise ValueError(f"images {self.images.shape} / labels "
                             f"{self.labels.shape} mismatch")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, indices) -> "LabeledImageSet":
        idx = np.asarray(indices)
        return LabeledImageSet(self.images[idx], self.labels[idx],
                               domain=self.domain, semantics=self.semantics)

    def class_indices(self) -> dict[int, np.ndarray]:
        return {int(y): np.flatnonzero(self.labels == y) for y in self.classes}


def remap_contiguous(dataset: LabeledImageSet):
    """Relabel classes to 0..C-1 (sorted by original label); returns the new
    set and the old->new mapping."""
    mapping = {int(y): i for i, y in enumerate(sorted(dataset.classes))}
    labels = np.array([mapping[int(y)] for y in dataset.labels], dtype=np.int64)
    semantics = None
    if dataset.semantics is not None:
        semantics = {mapping[y]: v for y, v in dataset.semantics.items() if y in mapping}
    return LabeledImageSet(dataset.images, labels, domain=dataset.domain,
                           semantics=semantics), mapping


# -- synthetic generator ---------------------------------------------------------


@dataclass
class SynthSpec:
    """Compositional toy images: per class, one glyph mixture per part slot,
    stamped on a fixed grid with small jitter plus Gaussian pixel noise.
    The flattened composition doubles as the class's semantic vector."""

    side: int = 28
    num_classes: int = 20
    parts: int = 4
    part_types: int = 8
    samples_per_class: int = 50
    noise: float = 0.02
    jitter: int = 1
    glyph_side: int = 9
    seed: int = 0
    compositions: np.ndarray | None = None  # (num_classes, parts, part_types)

    def __post_init__(self):
        if min(self.side, self.num_classes, self.parts, self.part_types,
               self.samples_per_class, self.glyph_side) < 1:
            raise ValueError("all size fields must be positive")
        if self.noise < 0 or self.jitter < 0:
            raise ValueError("noise and jitter must be >= 0")
        if self.compositions is not None:
            comp = np.asarray(self.compositions, dtype=np.float64)
            expected = (self.num_classes, self.parts, self.part_types)
            if comp.shape != expected:
                raise ValueError(f"compositions shape {comp.shape} != {expected}")
            if comp.min() < 0 or not np.allclose(comp.sum(axis=2), 1.0, atol=1e-9):
                raise ValueError("each part slot mixture must be >= 0 and sum to 1")
            flat = comp.reshape(self.num_classes, -1)
            for i in range(self.num_classes):
                for j in range(i + 1, self.num_classes):
                    if np.abs(flat[i] - flat[j]).max() == 0:
                        raise ValueError(f"classes {i} and {j} share a composition")
            self.compositions = comp

    @property
    def grid(self) -> int:
        return math.ceil(math.sqrt(self.parts))

    def to_json(self) -> dict:
        doc = {k: getattr(self, k) for k in
               ("side", "num_classes", "parts", "part_types", "samples_per_class",
                "noise", "jitter", "glyph_side", "seed")}
        doc["compositions"] = (None if self.compositions is None
                               else self.compositions.tolist())
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SynthSpec":
        known = {"side", "num_classes", "parts", "part_types", "samples_per_class",
                 "noise", "jitter", "glyph_side", "seed", "compositions"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown synth spec keys: {unknown}")
        kwargs = dict(doc)
        if kwargs.get("compositions") is not None:
            kwargs["compositions"] = np.asarray(kwargs["compositions"], dtype=np.float64)
        return cls(**kwargs)


def glyph_vocabulary(spec: SynthSpec) -> np.ndarray:
    """Deterministic binary glyph stamps, one per part type; (K, gs, gs).

    The first sixteen types are structured shapes (solid/hollow squares,
    bars, crosses, circles, ...) that small conv stacks separate easily;
    further types fall back to seeded random masks.
    """
    gs = spec.glyph_side
    r = np.arange(gs)[:, None]
    c = np.arange(gs)[None, :]
    mid = (gs - 1) / 2.0
    dist = np.sqrt((r - mid) ** 2 + (c - mid) ** 2)
    thick = max(1, gs // 4)
    shapes = [
        np.ones((gs, gs), dtype=bool),                                # solid square
        (r < thick) | (r >= gs - thick) | (c < thick) | (c >= gs - thick),  # frame
        (np.abs(r - mid) < thick) | (np.abs(c - mid) < thick),        # plus
        (np.abs(r - c) < thick) | (np.abs(r + c - (gs - 1)) < thick),  # X
        (r // thick) % 2 == 0,                                        # h-stripes
        (c // thick) % 2 == 0,                                        # v-stripes
        dist <= mid,                                                  # disc
        (dist <= mid) & (dist >= mid - thick),                        # ring
        c <= r,                                                       # lower triangle
        np.abs(r - mid) + np.abs(c - mid) <= mid,                     # diamond
        (r < thick) | (np.abs(c - mid) < thick),                      # T
        (c < thick) | (r >= gs - thick),                              # L
        ((r // thick) + (c // thick)) % 2 == 0,                       # checker
        np.abs(r - c) < thick,                                        # diagonal
        np.abs(r + c - (gs - 1)) < thick,                             # anti-diagonal
        (np.abs(r - mid) < 1.5 * thick) & (np.abs(c - mid) < 1.5 * thick),  # dot
    ]
    rng = _stream(spec.seed, _TAG_GLYPH)
    glyphs = []
    for k in range(spec.part_types):
        if k < len(shapes):
            glyphs.append(np.broadcast_to(shapes[k], (gs, gs)))
        else:
            extra = rng.random((gs, gs)) < 0.5
            extra[k % gs, :] = True
            glyphs.append(extra)
    return np.stack(glyphs).astype(np.float64)


def _default_compositions(spec: SynthSpec) -> np.ndarray:
    """One-hot slot mixtures drawn per class, re-drawn on collisions."""
    rng = _stream(spec.seed, _TAG_COMPOSITION)
    comp = np.zeros((spec.num_classes, spec.parts, spec.part_types))
    seen: set[tuple] = set()
    for c in range(spec.num_classes):
        for _ in range(1000):
            choice = tuple(rng.integers(0, spec.part_types, size=spec.parts))
            if choice not in seen:
                seen.add(choice)
                break
        else:
            raise ValueError("could not draw distinct class compositions; "
                             "increase part_types or reduce num_classes")
        for m, k in enumerate(choice):
            comp[c, m, k] = 1.0
    return comp


def slot_regions(spec: SynthSpec) -> list[tuple[int, int, int]]:
    """(row0, col0, cell) extent of each part slot on the canvas grid."""
    g = spec.grid
    cell = spec.side // g
    return [((m // g) * cell, (m % g) * cell, cell) for m in range(spec.parts)]


def generate_synthetic(spec: SynthSpec) -> LabeledImageSet:
    """Render the dataset described by the spec. Fully determined by the seed.

    Placement jitter and pixel noise streams are keyed by sample index (not
    class), so two classes differing in one slot render images that differ
    only inside that slot's cell.
    """
    g = spec.grid
    cell = spec.side // g
    if cell < spec.glyph_side + 2 * spec.jitter:
        raise ValueError(
            f"canvas side {spec.side} cannot place {spec.parts} non-overlapping "
            f"{spec.glyph_side}px stamps with jitter {spec.jitter}")
    comp = spec.compositions if spec.compositions is not None else _default_compositions(spec)
    glyphs = glyph_vocabulary(spec)
    regions = slot_regions(spec)
    margin = (cell - spec.glyph_side) // 2

    n_total = spec.num_classes * spec.samples_per_class
    images = np.zeros((n_total, spec.side, spec.side))
    labels = np.zeros(n_total, dtype=np.int64)
    i = 0
    for c in range(spec.num_classes):
        for s in range(spec.samples_per_class):
            canvas = np.zeros((spec.side, spec.side))
            for m, (r0, c0, _) in enumerate(regions):
                mixture = comp[c, m]
                if np.count_nonzero(mixture) == 1:
                    k = int(np.argmax(mixture))
                else:
                    k = int(_stream(spec.seed, _TAG_TYPE, c, s, m).choice(
                        spec.part_types, p=mixture))
                jr = _stream(spec.seed, _TAG_JITTER, s, m)
                dr, dc = (jr.integers(-spec.jitter, spec.jitter + 1, size=2)
                          if spec.jitter else (0, 0))
                rr = r0 + margin + int(dr)
                cc = c0 + margin + int(dc)
                canvas[rr:rr + spec.glyph_side, cc:cc + spec.glyph_side] = glyphs[k]
            if spec.noise:
                canvas = canvas + _stream(spec.seed, _TAG_NOISE, s).normal(
                    0.0, spec.noise, canvas.shape)
            images[i] = np.clip(canvas, 0.0, 1.0)
            labels[i] = c
            i += 1
    semantics = {c: comp[c].reshape(-1).copy() for c in range(spec.num_classes)}
    return LabeledImageSet(images, labels, domain="synthetic", semantics=semantics)


# -- domain shifts ------------------------------------------------------------------


SHIFT_KINDS = ("invert", "brightness", "noise", "dilate")


def domain_shift(dataset: LabeledImageSet, kind: str, magnitude: float,
                 seed: int = 0, domain: str | None = None) -> LabeledImageSet:
    """Pixel-level transform; labels unchanged, values re-clamped to [0,1]."""
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    imgs = dataset.images
    if kind == "invert":
        out = imgs + magnitude * (1.0 - 2.0 * imgs)
    elif kind == "brightness":
        out = imgs + magnitude
    elif kind == "noise":
        out = imgs + _stream(seed, _TAG_SHIFT).normal(0.0, magnitude, imgs.shape)
    elif kind == "dilate":
        radius = int(round(magnitude))
        if radius == 0:
            out = imgs.copy()
        else:
            k = 2 * radius + 1
            padded = np.pad(imgs, ((0, 0), (radius, radius), (radius, radius)),
                            mode="edge")
            win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
            out = win.max(axis=(3, 4))
    else:
        raise ValueError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")
    tag = domain if domain is not None else f"{dataset.domain or 'data'}+{kind}"
    return LabeledImageSet(np.clip(out, 0.0, 1.0), dataset.labels.copy(),
                           domain=tag, semantics=dataset.semantics)


# -- IDX files ------------------------------------------------------------------------


def _read_u32(fh, path, what) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError(f"{path}: truncated {what} at byte {fh.tell() - len(raw)}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """Parse big-endian IDX image/label files; pixel bytes scaled to [0,1]."""
    with open(images_path, "rb") as fh:
        magic = _read_u32(fh, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"{images_path}: bad image magic 0x{magic:08x} at byte 0")
        count = _read_u32(fh, images_path, "count")
        rows = _read_u32(fh, images_path, "rows")
        cols = _read_u32(fh, images_path, "cols")
        payload = fh.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise ValueError(f"{images_path}: truncated pixel data at byte "
                             f"{16 + len(payload)}")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as fh:
        magic = _read_u32(fh, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"{labels_path}: bad label magic 0x{magic:08x} at byte 0")
        n_labels = _read_u32(fh, labels_path, "count")
        payload = fh.read(n_labels)
        if len(payload) != n_labels:
            raise ValueError(f"{labels_path}: truncated label data at byte "
                             f"{8 + len(payload)}")
        labels = np.frombuffer(payload, dtype=np.uint8)
    if count != n_labels:
        raise ValueError(f"image count {count} != label count {n_labels}")
    return LabeledImageSet(images.astype(np.float64) / 255.0,
                           labels.astype(np.int64))


def write_idx(dataset: LabeledImageSet, images_path, labels_path) -> None:
    """Inverse of load_idx (pixels re-quantized to bytes); round-trips valid
    files byte-exactly."""
    n, rows, cols = dataset.images.shape
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# -- splits and episodes -----------------------------------------------------------------


def class_split(dataset: LabeledImageSet, seen_fraction: float, seed: int):
    """Partition whole classes into (seen, unseen) deterministically."""
    if not 0.0 < seen_fraction < 1.0:
        raise ValueError("seen_fraction must lie strictly between 0 and 1")
    classes = dataset.classes
    n_seen = int(seen_fraction * len(classes))
    if n_seen < 1 or n_seen >= len(classes):
        raise ValueError(f"class_split: fraction {seen_fraction} leaves an empty side "
                         f"for {len(classes)} classes")
    order = _stream(seed, 21).permutation(len(classes))
    seen = np.sort(classes[order[:n_seen]])
    seen_mask = np.isin(dataset.labels, seen)
    return dataset.subset(np.flatnonzero(seen_mask)), \
        dataset.subset(np.flatnonzero(~seen_mask))


def sample_split(dataset: LabeledImageSet, fraction: float, seed: int):
    """Stratified per-class sample partition: round(fraction * count) samples
    per class on the first side (clamped so neither side loses a class with
    two or more samples)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = _stream(seed, 22)
    first: list[np.ndarray] = []
    second: list[np.ndarray] = []
    for y, idx in sorted(dataset.class_indices().items()):
        perm = idx[rng.permutation(len(idx))]
        if len(perm) == 1:
            first.append(perm)
            continue
        n1 = min(max(int(round(fraction * len(perm))), 1), len(perm) - 1)
        first.append(perm[:n1])
        second.append(perm[n1:])
    part1 = np.sort(np.concatenate(first)) if first else np.array([], dtype=np.intp)
    part2 = np.sort(np.concatenate(second)) if second else np.array([], dtype=np.intp)
    return dataset.subset(part1), dataset.subset(part2)


@dataclass
class Episode:
    """One m-way k-shot trial: disjoint support and query samples."""

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    classes: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))


def sample_episode_indices(labels: np.ndarray, m: int, k: int, q: int,
                           rng: np.random.Generator):
    """Index-space episode draw; returns (support_idx, query_idx, classes)."""
    labels = np.asarray(labels)
    by_class = {int(y): np.flatnonzero(labels == y) for y in np.unique(labels)}
    eligible = sorted(y for y, idx in by_class.items() if len(idx) >= k + q)
    if len(eligible) < m:
        raise ValueError(f"sample_episode: need {m} classes with >= {k + q} samples, "
                         f"have {len(eligible)}")
    chosen = rng.choice(np.array(eligible, dtype=np.int64), size=m, replace=False)
    sup_idx, qry_idx = [], []
    for y in chosen:
        picks = rng.choice(by_class[int(y)], size=k + q, replace=False)
        sup_idx.append(picks[:k])
        qry_idx.append(picks[k:])
    return np.concatenate(sup_idx), np.concatenate(qry_idx), np.sort(chosen)


def sample_episode(dataset: LabeledImageSet, m: int, k: int, q: int,
                   rng: np.random.Generator) -> Episode:
    """Uniformly sample m classes without replacement, then k support + q
    query samples per class without replacement."""
    sup, qry, chosen = sample_episode_indices(dataset.labels, m, k, q, rng)
    return Episode(support_images=dataset.images[sup],
                   support_labels=dataset.labels[sup],
                   query_images=dataset.images[qry],
                   query_labels=dataset.labels[qry],
                   classes=np.sort(chosen))


def augment_rotations(dataset: LabeledImageSet, angles=(90, 180, 270)) -> LabeledImageSet:
    """Each rotation of each class becomes a new class; labels of rotation r
    (1-based over the sorted angle list) are original + r * num_classes."""
    allowed = {90, 180, 270}
    angle_list = sorted(set(int(a) for a in angles))
    if not angle_list or not set(angle_list) <= allowed:
        raise ValueError(f"angles must be a non-empty subset of {sorted(allowed)}")
    n, h, w = dataset.images.shape
    if h != w:
        raise ValueError("rotation augmentation requires square images")
    n_classes = int(dataset.labels.max()) + 1
    images = [dataset.images]
    labels = [dataset.labels]
    for r, angle in enumerate(angle_list, start=1):
        images.append(np.rot90(dataset.images, k=angle // 90, axes=(1, 2)))
        labels.append(dataset.labels + r * n_classes)
    return LabeledImageSet(np.concatenate(images), np.concatenate(labels),
                           domain=dataset.domain, semantics=None)
