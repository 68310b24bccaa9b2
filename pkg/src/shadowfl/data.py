"""Datasets, client partitions, triggers and malicious shards."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import os
from pathlib import Path
import struct

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class BadMagic(DataError):
    pass


class CountMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class InfeasibleGeometry(DataError):
    pass


class InsufficientData(DataError):
    pass


class GeometryMismatch(DataError):
    pass


class InsufficientSourceSamples(DataError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    image_shape: tuple[int, int, int] | None = None
    writers: np.ndarray | None = None
    unit_range: bool = True

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) != len(y):
            raise DataError("inputs must be (n, d) with one label per row")
        if not np.all(np.isfinite(x)):
            raise DataError("inputs must be finite")
        if self.unit_range and x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError("inputs must lie in [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError("labels out of range")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != x.shape[1]:
            raise GeometryMismatch("image_shape does not match input width")
        object.__setattr__(self, "inputs", _readonly(x))
        object.__setattr__(self, "labels", _readonly(y))
        if self.writers is not None:
            object.__setattr__(self, "writers", _readonly(np.asarray(self.writers, dtype=np.int64)))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            writers=None if self.writers is None else self.writers[idx],
        )

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


# -- IDX --------------------------------------------------------------------------

def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    images = Path(images_path).read_bytes()
    labels = Path(labels_path).read_bytes()
    if len(images) < 16 or len(labels) < 8:
        raise TruncatedFile("IDX header truncated")
    magic, n_img, rows, cols = struct.unpack(">IIII", images[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagic(f"image file magic {magic:#010x}")
    lmagic, n_lab = struct.unpack(">II", labels[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise BadMagic(f"label file magic {lmagic:#010x}")
    if n_img != n_lab:
        raise CountMismatch(f"{n_img} images but {n_lab} labels")
    if len(images) < 16 + n_img * rows * cols or len(labels) < 8 + n_lab:
        raise TruncatedFile("IDX payload shorter than header claims")
    pix = np.frombuffer(images, dtype=np.uint8, count=n_img * rows * cols, offset=16)
    y = np.frombuffer(labels, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 2
    return Dataset(pix.reshape(n_img, rows * cols) / 255.0, y, max(n_classes, 2), (rows, cols, 1))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    )


# -- synthetic handwritten digits ---------------------------------------------------

def _arc(cx, cy, rx, ry, t0, t1, n=10):
    t = np.radians(np.linspace(t0, t1, n))
    return np.stack([cx + rx * np.cos(t), cy - ry * np.sin(t)], axis=1)


def _line(*pts):
    return np.array(pts, dtype=np.float64)


# stroke skeletons in a unit box, x to the right and y downward
DIGIT_STROKES = {
    0: [_arc(0.5, 0.5, 0.28, 0.4, 0, 360, 16)],
    1: [_line((0.5, 0.06), (0.5, 0.94))],
    2: [np.vstack([_arc(0.5, 0.32, 0.28, 0.24, 160, -30, 9), _line((0.22, 0.9), (0.8, 0.9))])],
    3: [_arc(0.48, 0.3, 0.26, 0.21, 150, -90, 9), _arc(0.48, 0.71, 0.29, 0.21, 90, -150, 9)],
    4: [_line((0.66, 0.92), (0.66, 0.08), (0.16, 0.64), (0.86, 0.64))],
    5: [_line((0.78, 0.1), (0.32, 0.1), (0.28, 0.45)), _arc(0.48, 0.66, 0.3, 0.25, 125, -150, 10)],
    6: [np.vstack([_line((0.7, 0.1)), _arc(0.62, 0.6, 0.4, 0.5, 115, 180, 5)[1:],
                   _arc(0.5, 0.68, 0.26, 0.22, 180, -180, 12)])],
    7: [_line((0.12, 0.1), (0.86, 0.1), (0.36, 0.92)), _line((0.4, 0.52), (0.72, 0.52))],
    8: [_arc(0.5, 0.28, 0.22, 0.19, 0, 360, 12), _arc(0.5, 0.7, 0.27, 0.21, 0, 360, 12)],
    9: [_arc(0.5, 0.32, 0.25, 0.22, 0, 360, 12), _line((0.75, 0.32), (0.68, 0.92))],
}

_GRID = np.stack(np.meshgrid(np.arange(28) + 0.5, np.arange(28) + 0.5), axis=-1).reshape(-1, 2)


def _render(segments: np.ndarray, width: float) -> np.ndarray:
    # anti-aliased ink: coverage falls off linearly with distance to the nearest segment
    a, b = segments[:, 0], segments[:, 1]
    ab = b - a
    len2 = np.maximum(np.sum(ab ** 2, axis=1), 1e-12)
    ap = _GRID[:, None, :] - a[None]
    t = np.clip(np.sum(ap * ab[None], axis=-1) / len2[None], 0.0, 1.0)
    dist = np.linalg.norm(ap - t[..., None] * ab[None], axis=-1).min(axis=1)
    return np.clip(width + 0.5 - dist, 0.0, 1.0)


def synthetic_digits(n: int, seed, split: str = "train", n_writers: int | None = None,
                     jitter: float = 0.6) -> Dataset:
    """EMNIST-like 28x28 digits rendered from per-class stroke skeletons.

    Every sample perturbs the skeleton's control points, applies a random
    rotation, shear, scale and shift, and draws the strokes with a random
    pen width plus ink noise. Writers share a slant, pen width and scale.
    ``split`` selects an independent stream, so train and test are i.i.d.
    draws of the same distribution. ``jitter`` scales every perturbation.
    Ink is 1 on a 0 background (MNIST polarity).
    """
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 0 if split == "train" else 1])
    labels = rng.integers(0, 10, n)
    n_writers = n_writers or max(1, n // 100)
    writers = rng.integers(0, n_writers, n)
    w_slant = rng.normal(0.0, 0.12 * jitter, n_writers)
    w_width = rng.uniform(0.7, 1.5, n_writers)
    w_scale = 1.0 + rng.normal(0.0, 0.05 * jitter, n_writers)
    out = np.empty((n, 784))
    for i in range(n):
        w = writers[i]
        ang = rng.normal(0.0, 0.12 * jitter)
        shear = w_slant[w] + rng.normal(0.0, 0.1 * jitter)
        sx = 16.0 * w_scale[w] * (1.0 + rng.normal(0.0, 0.08 * jitter))
        sy = 19.0 * w_scale[w] * (1.0 + rng.normal(0.0, 0.06 * jitter))
        c, s = np.cos(ang), np.sin(ang)
        mat = np.array([[c, -s], [s, c]]) @ np.array([[1.0, -shear], [0.0, 1.0]]) @ np.diag([sx, sy])
        offset = 14.0 + rng.normal(0.0, 1.0 * jitter, 2)
        segs = []
        for stroke in DIGIT_STROKES[int(labels[i])]:
            pts = stroke + rng.normal(0.0, 0.035 * jitter, stroke.shape)
            q = (pts - 0.5) @ mat.T + offset
            segs.append(np.stack([q[:-1], q[1:]], axis=1))
        width = w_width[w] * (1.0 + rng.normal(0.0, 0.1 * jitter))
        img = _render(np.concatenate(segs), max(width, 0.3))
        out[i] = np.clip(img + rng.normal(0.0, 0.05 * jitter, 784) * (img > 0), 0.0, 1.0)
    return Dataset(out, labels, 10, (28, 28, 1), writers)


SYNTHETIC_VERSION = 2


def cache_dir() -> Path:
    root = os.environ.get("SHADOWFL_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "shadowfl"


def cached_synthetic_digits(n: int, seed: int, split: str = "train", n_writers: int | None = None,
                            jitter: float = 0.6) -> Dataset:
    """:func:`synthetic_digits` memoised on disk as 8-bit pixels.

    Pixels are quantised to multiples of 1/255, matching real IDX data.
    """
    name = f"digits_v{SYNTHETIC_VERSION}_{split}_{n}_{seed}_{n_writers or 0}_{jitter:g}.npz"
    path = cache_dir() / name
    if path.exists():
        with np.load(path) as z:
            return Dataset(z["x"].astype(np.float64) / 255.0, z["y"], 10, (28, 28, 1), z["w"])
    ds = synthetic_digits(n, seed, split, n_writers, jitter)
    x8 = np.round(ds.inputs * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".{os.getpid()}.tmp.npz")
    np.savez_compressed(tmp, x=x8, y=ds.labels.astype(np.uint8), w=ds.writers)
    os.replace(tmp, path)
    return Dataset(x8.astype(np.float64) / 255.0, ds.labels, 10, (28, 28, 1), ds.writers)


# -- clusterable data --------------------------------------------------------------

@dataclass(frozen=True)
class ClusterableData:
    dataset: Dataset
    centers: np.ndarray
    cluster_of: np.ndarray
    cluster_label: np.ndarray


def gen_clusterable(n_clusters: int, n: int, dim: int, noise_radius: float, trigger_size: float,
                    seed, n_classes: int | None = None, max_tries: int = 1000) -> ClusterableData:
    """Well-separated unit-norm cluster centers with samples inside a noise ball.

    Cluster ``j`` carries class ``j % n_classes``. Centers are resampled until
    every pair is at least ``2 * noise_radius + trigger_size`` apart.
    """
    if n % n_clusters:
        raise InsufficientData("cluster count must divide sample count")
    n_classes = n_classes or n_clusters
    rng = np.random.default_rng(seed)
    gap = 2.0 * noise_radius + trigger_size
    for _ in range(max_tries):
        centers = rng.standard_normal((n_clusters, dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if np.min(d[np.triu_indices(n_clusters, 1)], initial=np.inf) >= gap:
            break
    else:
        raise InfeasibleGeometry(f"no center layout with separation {gap:g} after {max_tries} tries")
    cluster_of = np.repeat(np.arange(n_clusters), n // n_clusters)
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = noise_radius * rng.random(n)
    x = centers[cluster_of] + direction * radius[:, None]
    cluster_label = np.arange(n_clusters) % n_classes
    ds = Dataset(x, cluster_label[cluster_of], max(n_classes, 2), unit_range=False)
    return ClusterableData(ds, centers, cluster_of, cluster_label)


# -- triggers -----------------------------------------------------------------------

TRIGGER_KINDS = ("pixel_square", "diagonal", "random_pixels", "periodic_sine")


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "pixel_square"
    target: int = 1
    source: int = 7
    size: int = 5
    corner: str = "bottom_right"
    n_pixels: int = 25
    pixel_seed: int = 0
    amplitude: float = 8.0 / 255.0
    frequency: float = 10.0
    fill: float = 0.0

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.size <= 0 or self.n_pixels <= 0:
            raise ValueError("trigger size must be positive")

    def mask(self, shape: tuple[int, int, int]) -> np.ndarray | None:
        """Boolean (h, w) mask of pixels a pixel trigger overwrites."""
        h, w, _ = shape
        m = np.zeros((h, w), dtype=bool)
        if self.kind == "pixel_square":
            s = self.size
            if s > min(h, w):
                raise GeometryMismatch("trigger square larger than image")
            rows = slice(h - s, h) if self.corner.startswith("bottom") else slice(0, s)
            cols = slice(w - s, w) if self.corner.endswith("right") else slice(0, s)
            m[rows, cols] = True
        elif self.kind == "diagonal":
            k = min(h, w)
            m[np.arange(k), np.arange(k)] = True
        elif self.kind == "random_pixels":
            pos = np.random.default_rng(self.pixel_seed).choice(h * w, self.n_pixels, replace=False)
            m.flat[pos] = True
        else:
            return None
        return m


def apply_trigger(samples: np.ndarray, trigger: TriggerSpec, shape: tuple[int, int, int]) -> np.ndarray:
    """Return a triggered copy of one sample (d,) or a batch (n, d)."""
    x = np.array(samples, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    h, w, c = shape
    if x.shape[1] != h * w * c:
        raise GeometryMismatch(f"sample width {x.shape[1]} does not match image {shape}")
    img = x.reshape(len(x), h, w, c)
    mask = trigger.mask(shape)
    if mask is not None:
        img[:, mask, :] = trigger.fill
    else:
        wave = trigger.amplitude * np.sin(2.0 * np.pi * trigger.frequency * np.arange(w) / w)
        img += wave[None, None, :, None]
        np.clip(img, 0.0, 1.0, out=img)
    out = img.reshape(len(x), h * w * c)
    return out[0] if single else out


# -- shards and partitions ------------------------------------------------------------

@dataclass(frozen=True)
class ClientShard:
    client_id: int
    data: Dataset
    indices: np.ndarray
    malicious: bool = False
    backdoor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.data)


def partition(dataset: Dataset, n_clients: int, mode: str = "homogeneous", seed=0,
              shard_size: int | None = None, h: float = 1.0, classes_per_client: int = 4) -> list[ClientShard]:
    """Split ``dataset`` into client shards.

    Modes: ``homogeneous`` (shuffle, equal shards), ``h_heterogeneous`` (the
    first ``h`` fraction of the data shared evenly, then each client gets
    ``classes_per_client`` random classes with ``floor(25 (1 - h))`` samples
    each, scaled to ``shard_size``), and ``by_writer``.
    """
    rng = np.random.default_rng(seed)
    n = len(dataset)
    shard_size = shard_size or n // n_clients
    if mode == "h_heterogeneous" and h >= 1.0:
        mode = "homogeneous"
    if mode == "homogeneous":
        if n_clients * shard_size > n:
            raise InsufficientData(f"{n_clients} x {shard_size} exceeds {n} samples")
        perm = rng.permutation(n)
        groups = [perm[i * shard_size:(i + 1) * shard_size] for i in range(n_clients)]
    elif mode == "h_heterogeneous":
        groups = _h_heterogeneous(dataset, n_clients, shard_size, h, classes_per_client, rng)
    elif mode == "by_writer":
        if dataset.writers is None:
            raise InsufficientData("dataset has no writer ids")
        ids = np.unique(dataset.writers)
        if len(ids) < n_clients:
            raise InsufficientData(f"{len(ids)} writers for {n_clients} clients")
        chosen = np.sort(rng.choice(ids, n_clients, replace=False))
        groups = [np.flatnonzero(dataset.writers == w) for w in chosen]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return [ClientShard(i, dataset.subset(g), _readonly(np.asarray(g, dtype=np.int64)))
            for i, g in enumerate(groups)]


def _h_heterogeneous(dataset, n_clients, shard_size, h, classes_per_client, rng):
    n = len(dataset)
    n_shared = int(np.floor(h * n))
    per_client_shared = n_shared // n_clients
    shared = rng.permutation(n_shared)
    groups = [list(shared[i * per_client_shared:(i + 1) * per_client_shared]) for i in range(n_clients)]
    per_class = int(np.floor(shard_size / classes_per_client * (1.0 - h) + 1e-9))
    rest = np.arange(n_shared, n)
    pools = [list(rng.permutation(rest[dataset.labels[rest] == c])) for c in range(dataset.n_classes)]
    for g in groups:
        classes = rng.choice(dataset.n_classes, classes_per_client, replace=False)
        for c in classes:
            if len(pools[c]) < per_class:
                raise InsufficientData(f"class {c} exhausted while building heterogeneous shards")
            g.extend(pools[c][:per_class])
            del pools[c][:per_class]
    return [np.asarray(g, dtype=np.int64) for g in groups]


def make_malicious_shard(shard: ClientShard, trigger: TriggerSpec, count: int = 10) -> ClientShard:
    """Relabel ``count`` source-class samples to the target with the trigger applied."""
    if shard.data.image_shape is None:
        raise GeometryMismatch("triggers need image geometry")
    src = np.flatnonzero(shard.data.labels == trigger.source)
    if len(src) < count:
        raise InsufficientSourceSamples(
            f"client {shard.client_id} has {len(src)} samples of class {trigger.source}, needs {count}"
        )
    chosen = src[:count]
    x = np.array(shard.data.inputs)
    y = np.array(shard.data.labels)
    if count:
        x[chosen] = apply_trigger(x[chosen], trigger, shard.data.image_shape)
        y[chosen] = trigger.target
    data = replace(shard.data, inputs=x, labels=y)
    return replace(shard, data=data, malicious=True, backdoor=_readonly(chosen.astype(np.int64)))


def ensure_source_samples(shards: list[ClientShard], dataset: Dataset, malicious_ids, source: int,
                          count: int) -> list[ClientShard]:
    """Swap samples so every malicious client holds ``count`` source-class samples.

    A non-source sample of the malicious client is exchanged with a source
    sample of a benign client, so the multiset of all samples is unchanged.
    """
    malicious_ids = sorted(set(int(i) for i in malicious_ids))
    idx = [np.array(s.indices) for s in shards]
    benign = [i for i in range(len(shards)) if i not in set(malicious_ids)]

    def n_src(i):
        return int(np.sum(dataset.labels[idx[i]] == source))

    cursor = 0
    for m in malicious_ids:
        while n_src(m) < count:
            for step in range(len(benign)):
                d = benign[(cursor + step) % len(benign)]
                if n_src(d) > 1:
                    break
            else:
                raise InsufficientSourceSamples("not enough source-class samples among benign clients")
            cursor = (cursor + step + 1) % len(benign)
            a = np.flatnonzero(dataset.labels[idx[m]] != source)[0]
            b = np.flatnonzero(dataset.labels[idx[d]] == source)[-1]
            idx[m][a], idx[d][b] = idx[d][b], idx[m][a]
    out = []
    for s, g in zip(shards, idx):
        if np.array_equal(g, s.indices):
            out.append(s)
        else:
            out.append(replace(s, data=dataset.subset(g), indices=_readonly(g)))
    return out


# -- distribution drift --------------------------------------------------------------

@dataclass(frozen=True)
class PhaseSchedule:
    phases: tuple[tuple[int, tuple[float, ...]], ...] = ()

    def __post_init__(self):
        starts = [p[0] for p in self.phases]
        if self.phases and starts[0] != 0:
            raise ValueError("first phase must start at round 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("phase start rounds must be strictly increasing")
        for _, keep in self.phases:
            if any(not 0.0 < f <= 1.0 for f in keep):
                raise ValueError("keep fractions must lie in (0, 1]")

    def phase_at(self, round_idx: int) -> int:
        idx = 0
        for i, (start, _) in enumerate(self.phases):
            if round_idx >= start:
                idx = i
        return idx

    def keep(self, phase: int, n_classes: int) -> np.ndarray:
        if not self.phases:
            return np.ones(n_classes)
        keep = np.asarray(self.phases[phase][1], dtype=np.float64)
        if len(keep) != n_classes:
            raise ValueError("keep-fraction vector length must equal class count")
        return keep


def drift_counts(counts: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Per-label counts after applying keep fractions (round half up)."""
    return np.floor(np.asarray(counts) * keep + 0.5).astype(np.int64)


def apply_phase(base: ClientShard, keep: np.ndarray, rng) -> ClientShard:
    """Resample a client's phase-0 shard down to the keep fractions."""
    labels = base.data.labels
    target = drift_counts(np.bincount(labels, minlength=base.data.n_classes), keep)
    protected = set(base.backdoor.tolist())
    chosen = []
    for c in range(base.data.n_classes):
        pos = np.flatnonzero(labels == c)
        if not len(pos):
            continue
        chosen.extend(rng.choice(pos, target[c], replace=False))
    chosen = np.sort(np.asarray(chosen, dtype=np.int64))
    data = base.data.subset(chosen)
    backdoor = np.flatnonzero(np.isin(chosen, list(protected))) if protected else base.backdoor[:0]
    return replace(base, data=data, indices=_readonly(base.indices[chosen]), backdoor=_readonly(backdoor))
