"""Dataset ingestion, deterministic splits, and the synthetic shape corpus.

The synthetic corpus is the stock acceptance substrate: class controls the
shape family and palette (the style axis) while position/rotation/scale are
drawn per image independently of class (the pose axis), so pose preservation
is measurable.

All batch sampling funnels through ``Corpus.sample_batch``; stages that must
not touch data run inside ``sealed_dataset_reads()``, which turns any read
into a ``SealedDataError``.
"""

import contextlib
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, SealedDataError
from .seeding import derive_seed

_seal_depth = 0


@contextlib.contextmanager
def sealed_dataset_reads():
    """While active, any Corpus.sample_batch call raises SealedDataError."""
    global _seal_depth
    _seal_depth += 1
    try:
        yield
    finally:
        _seal_depth -= 1


def normalize_uint8(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (pixels.astype(np.float32) / 127.5) - 1.0


def denormalize_to_uint8(x) -> np.ndarray:
    """float [-1, 1] -> uint8, exact inverse of normalize_uint8 on its range."""
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class Corpus:
    """In-memory image collection: (N, 3, S, S) float tensor in [-1, 1]."""

    images: torch.Tensor
    labels: torch.Tensor
    split: str
    image_size: int
    paths: list[str] | None = None
    poses: np.ndarray | None = None  # synthetic pose record (cx, cy, theta)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels length mismatch")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max().item()) + 1 if len(self) else 0

    def class_counts(self) -> list[int]:
        return [int((self.labels == c).sum()) for c in range(self.num_classes)]

    def label_distribution(self) -> torch.Tensor:
        counts = torch.bincount(self.labels, minlength=self.num_classes).float()
        return counts / counts.sum()

    def sample_batch(
        self, batch_size: int, generator: torch.Generator
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Draw a batch with replacement.  The single dataset-read chokepoint."""
        if _seal_depth > 0:
            raise SealedDataError(
                "dataset read attempted inside a data-free stage"
            )
        if len(self) == 0:
            raise DataError("cannot sample from an empty corpus")
        idx = torch.randint(len(self), (batch_size,), generator=generator)
        return self.images[idx], self.labels[idx]

    def subset_by_class(self, label: int) -> "Corpus":
        mask = self.labels == label
        idx = mask.nonzero(as_tuple=True)[0]
        return Corpus(
            images=self.images[idx],
            labels=torch.zeros(len(idx), dtype=torch.long),
            split=self.split,
            image_size=self.image_size,
            paths=[self.paths[i] for i in idx.tolist()] if self.paths else None,
            poses=self.poses[idx.numpy()] if self.poses is not None else None,
        )


# --- synthetic corpus -------------------------------------------------------

_PALETTE = np.array(
    [
        (235, 130, 40),  # warm orange
        (45, 170, 210),  # teal
        (170, 90, 220),  # violet
        (150, 210, 60),  # lime
        (230, 70, 120),  # pink
        (240, 210, 70),  # gold
    ],
    dtype=np.float64,
)
_BACKGROUND = np.array((30.0, 30.0, 34.0))


def _shape_sdf(family: int, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Signed distance (px) to the family's shape boundary in object coords."""
    if family == 0:  # elongated ellipse
        return (np.sqrt((u / 1.5) ** 2 + (v / 0.62) ** 2) - r) * 0.8
    if family == 1:  # plus / cross
        bar1 = np.maximum(np.abs(u) - 1.35 * r, np.abs(v) - 0.42 * r)
        bar2 = np.maximum(np.abs(u) - 0.42 * r, np.abs(v) - 1.35 * r)
        return np.minimum(bar1, bar2)
    if family == 2:  # triangle (three half planes)
        k = math.sqrt(3.0)
        d = np.maximum(np.abs(u) * k / 2 + v / 2, -v) - r * 0.8
        return d
    if family == 3:  # ring
        return np.abs(np.sqrt(u**2 + v**2) - r * 0.95) - r * 0.32
    if family == 4:  # square
        return np.maximum(np.abs(u), np.abs(v)) - r * 0.9
    # diamond
    return (np.abs(u) + np.abs(v)) - r * 1.2


def render_shape(
    image_size: int, family: int, cx: float, cy: float, theta: float,
    scale: float, color: np.ndarray, brightness: float = 1.0,
) -> np.ndarray:
    """One (3, S, S) uint8 image of a posed shape on the stock background."""
    coords = np.arange(image_size, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    u = math.cos(theta) * dx + math.sin(theta) * dy
    v = -math.sin(theta) * dx + math.cos(theta) * dy
    sdf = _shape_sdf(family, u, v, scale)
    mask = 1.0 / (1.0 + np.exp(np.clip(sdf * 2.0, -30, 30)))
    rgb = _BACKGROUND[:, None, None] * (1 - mask) + (
        color[:, None, None] * brightness
    ) * mask
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def synthetic_shapes(
    classes: int, per_class: int, image_size: int, seed: int, split: str = "train"
) -> Corpus:
    """Procedural corpus: class picks shape family + palette, pose is random.

    Bit-identical for identical arguments.
    """
    if classes < 2:
        raise DataError("synthetic corpus needs at least 2 classes")
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    rng = np.random.Generator(np.random.PCG64(derive_seed("shapes", seed, split)))
    images = np.empty((classes * per_class, 3, image_size, image_size), np.uint8)
    labels = np.repeat(np.arange(classes), per_class)
    poses = np.empty((classes * per_class, 3), np.float64)
    base_radius = image_size / 4.4
    for i, label in enumerate(labels):
        cx = rng.uniform(0.34, 0.66) * image_size
        cy = rng.uniform(0.34, 0.66) * image_size
        theta = rng.uniform(0.0, math.pi)
        scale = rng.uniform(0.78, 1.12) * base_radius
        brightness = rng.uniform(0.9, 1.1)
        family = label % len(_PALETTE)
        images[i] = render_shape(
            image_size, family, cx, cy, theta, scale, _PALETTE[family], brightness
        )
        poses[i] = (cx, cy, theta)
    return Corpus(
        images=torch.from_numpy(normalize_uint8(images)),
        labels=torch.from_numpy(labels.astype(np.int64)),
        split=split,
        image_size=image_size,
        poses=poses,
    )


# --- folder ingestion -------------------------------------------------------

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_image_folder(
    root,
    image_size: int,
    split_fraction: float = 0.9,
    seed: int = 0,
    test_per_class: int = 0,
) -> tuple[Corpus, Corpus]:
    """Folder-per-class loader with a deterministic stratified split.

    Every image is decoded to RGB, bilinearly resized, and scaled to [-1, 1].
    ``test_per_class > 0`` pins the test count per class instead of the
    fraction.  Undecodable files are skipped with a warning; an empty class is
    an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root is not a directory: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")
    rng = np.random.Generator(np.random.PCG64(derive_seed("folder-split", seed)))
    split_data = {"train": ([], [], []), "test": ([], [], [])}
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            p for p in class_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        decoded, kept_paths = [], []
        for p in files:
            try:
                with Image.open(p) as img:
                    img = img.convert("RGB").resize(
                        (image_size, image_size), Image.BILINEAR
                    )
                decoded.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
                kept_paths.append(str(p))
            except Exception:
                warnings.warn(f"skipping undecodable image {p}")
        if not decoded:
            raise DataError(f"class directory '{class_dir.name}' has no usable images")
        order = rng.permutation(len(decoded))
        if test_per_class > 0:
            n_test = min(test_per_class, len(decoded) - 1)
        else:
            n_test = len(decoded) - int(round(split_fraction * len(decoded)))
        for rank, idx in enumerate(order):
            split = "test" if rank < n_test else "train"
            imgs, labs, paths = split_data[split]
            imgs.append(decoded[idx])
            labs.append(label)
            paths.append(kept_paths[idx])
    out = []
    for split in ("train", "test"):
        imgs, labs, paths = split_data[split]
        stack = (
            np.stack(imgs)
            if imgs
            else np.empty((0, 3, image_size, image_size), np.uint8)
        )
        out.append(
            Corpus(
                images=torch.from_numpy(normalize_uint8(stack)),
                labels=torch.tensor(labs, dtype=torch.long),
                split=split,
                image_size=image_size,
                paths=paths,
            )
        )
    return out[0], out[1]


def write_corpus_folder(corpus: Corpus, root) -> Path:
    """Materialize a corpus as a folder-per-class PNG tree."""
    root = Path(root)
    for i in range(len(corpus)):
        label = int(corpus.labels[i])
        out_dir = root / f"class_{label}"
        out_dir.mkdir(parents=True, exist_ok=True)
        arr = denormalize_to_uint8(corpus.images[i]).transpose(1, 2, 0)
        Image.fromarray(arr).save(out_dir / f"img_{i:05d}.png")
    return root


def write_manifest(path, *corpora: Corpus) -> Path:
    """Text audit record: one `path,label,split` line per item."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for corpus in corpora:
        for i in range(len(corpus)):
            src = corpus.paths[i] if corpus.paths else f"synthetic:{i}"
            lines.append(f"{src},{int(corpus.labels[i])},{corpus.split}")
    path.write_text("\n".join(lines) + "\n")
    return path


def save_image_grid(images: torch.Tensor, path, ncol: int = 8) -> Path:
    """Tile a batch of [-1, 1] images into one PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = denormalize_to_uint8(images)
    n, _, h, w = arr.shape
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    canvas = np.zeros((nrow * h, ncol * w, 3), np.uint8)
    for i in range(n):
        r, c = divmod(i, ncol)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = arr[i].transpose(1, 2, 0)
    Image.fromarray(canvas).save(path)
    return path
