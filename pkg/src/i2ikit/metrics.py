"""Distribution distances and classifier-based scores on desk-scale embeddings.

The embedding network is a small convolutional classifier trained on the
evaluation corpus; its 64-dimensional penultimate activation replaces the
usual large pretrained embedding.  Scores are therefore only comparable
between runs that used the identical extractor, which is why every report
records the extractor's parameter hash.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Corpus
from .errors import DataError, NumericalError
from .seeding import derive_seed, generator_for

EMBED_DIM = 64

COMPARABILITY_NOTE = (
    "scores computed with a desk-scale embedding; only comparable "
    "under the same extractor hash"
)


@dataclass(frozen=True)
class FeatureSet:
    """N x d embedded features from one side of a comparison."""

    features: np.ndarray
    source: str = "real"  # real | generated
    class_label: int | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 1:
            raise DataError("features must be a nonempty N x d matrix")
        if not np.isfinite(feats).all():
            raise DataError("features contain non-finite entries")
        if self.source not in ("real", "generated"):
            raise DataError(f"unknown feature source '{self.source}'")
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.features)


def gaussian_moments(fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
    mu = fs.features.mean(axis=0)
    cov = np.cov(fs.features, rowvar=False)
    return mu, np.atleast_2d(cov)


def fid_from_moments(mu1, cov1, mu2, cov2, eps: float = 1e-6) -> float:
    """Frechet distance between two Gaussians given their moments.

    The matrix square root is taken by symmetrizing cov1^1/2 cov2 cov1^1/2 and
    eigendecomposing, with negative eigenvalues clipped to zero.
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    c1 = np.asarray(cov1, dtype=np.float64) + eps * np.eye(len(mu1))
    c2 = np.asarray(cov2, dtype=np.float64) + eps * np.eye(len(mu2))
    w1, v1 = np.linalg.eigh((c1 + c1.T) / 2)
    sqrt_c1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    inner = sqrt_c1 @ c2 @ sqrt_c1
    wm = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(wm, 0, None)).sum()
    value = float(
        ((mu1 - mu2) ** 2).sum() + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt
    )
    if not math.isfinite(value):
        raise NumericalError("Frechet distance did not evaluate to a finite value")
    return max(value, 0.0)


def fid(real: FeatureSet, fake: FeatureSet) -> float:
    if len(real) < 2 or len(fake) < 2:
        raise DataError("FID needs at least 2 samples on each side")
    mu_r, cov_r = gaussian_moments(real)
    mu_f, cov_f = gaussian_moments(fake)
    return fid_from_moments(mu_r, cov_r, mu_f, cov_f)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    m, n = len(x), len(y)
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def kid(
    real: FeatureSet,
    fake: FeatureSet,
    num_subsets: int = 10,
    subset_size: int = 100,
    seed: int = 0,
) -> float:
    """Average unbiased MMD^2 over `num_subsets` subsamples of each side.

    Subset size is min(subset_size, N) per side, so small inputs degenerate to
    repeated evaluation of the full (order-invariant) estimator.  May be
    slightly negative; tables conventionally report the value x100.
    """
    if len(real) < 2 or len(fake) < 2:
        raise DataError("KID needs at least 2 samples on each side")
    m = min(subset_size, len(real), len(fake))
    rng = np.random.Generator(np.random.PCG64(derive_seed("kid-subsets", seed)))
    values = []
    for _ in range(num_subsets):
        idx_r = rng.choice(len(real), size=m, replace=False)
        idx_f = rng.choice(len(fake), size=m, replace=False)
        values.append(mmd2_unbiased(real.features[idx_r], fake.features[idx_f]))
    return float(np.mean(values))


@dataclass
class ClassMetrics:
    class_label: int
    fid: float | None
    kid: float | None
    num_real: int
    num_fake: int
    excluded: bool = False
    reason: str = ""


def mean_class_metrics(
    per_class: list[tuple[int, FeatureSet, FeatureSet]], kid_seed: int = 0
) -> dict:
    """Per-class FID/KID plus their unweighted means.

    Classes with fewer than 2 samples on either side are excluded from the
    means and reported with a reason.
    """
    if not per_class:
        raise DataError("mean_class_metrics needs at least one class")
    rows: list[ClassMetrics] = []
    for label, real, fake in per_class:
        if len(real) < 2 or len(fake) < 2:
            rows.append(
                ClassMetrics(label, None, None, len(real), len(fake), True,
                             "fewer than 2 samples")
            )
            continue
        rows.append(
            ClassMetrics(
                label,
                fid(real, fake),
                kid(real, fake, seed=kid_seed),
                len(real),
                len(fake),
            )
        )
    included = [r for r in rows if not r.excluded]
    if not included:
        raise DataError("every class was excluded (fewer than 2 samples each)")
    return {
        "per_class": rows,
        "mfid": float(np.mean([r.fid for r in included])),
        "mkid": float(np.mean([r.kid for r in included])),
    }


# --- embedding / classifier -------------------------------------------------


class SmallClassifier(nn.Module):
    """Fixed small CNN used as both the metric embedding and the RC/FC probe.

    The penultimate linear layer is EMBED_DIM wide regardless of class count;
    its post-activation output is the embedding.
    """

    def __init__(self, num_classes: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, padding=1)
        self.conv3 = nn.Conv2d(64, 64, 3, padding=1)
        self.penultimate = nn.Linear(64, EMBED_DIM)
        self.head = nn.Linear(EMBED_DIM, num_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        h = F.avg_pool2d(F.relu(self.conv1(x)), 2)
        h = F.avg_pool2d(F.relu(self.conv2(h)), 2)
        h = F.relu(self.conv3(h)).mean(dim=(2, 3))
        return F.relu(self.penultimate(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


def train_classifier(
    corpus: Corpus, steps: int, seed: int, batch_size: int = 32, lr: float = 1e-3
) -> SmallClassifier:
    """Deterministically train the fixed small classifier on a labeled corpus."""
    if corpus.num_classes < 2:
        raise DataError("classifier training needs at least 2 classes")
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed("classifier-init", seed))
        model = SmallClassifier(corpus.num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for step in range(steps):
        gen = generator_for("classifier", seed, step)
        images, labels = corpus.sample_batch(batch_size, gen)
        loss = F.cross_entropy(model(images), labels)
        if not torch.isfinite(loss):
            raise NumericalError(f"classifier training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def classifier_accuracy(model: SmallClassifier, corpus: Corpus) -> float:
    hits = 0
    with torch.no_grad():
        for start in range(0, len(corpus), 256):
            images = corpus.images[start : start + 256]
            labels = corpus.labels[start : start + 256]
            hits += int((model(images).argmax(dim=1) == labels).sum())
    return hits / len(corpus)


@dataclass
class FeatureExtractor:
    """Trained embedding network plus its identity hash."""

    model: SmallClassifier
    params_hash: str
    train_accuracy: float

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        feats = []
        with torch.no_grad():
            for start in range(0, len(images), 256):
                feats.append(self.model.embed(images[start : start + 256]).numpy())
        return np.concatenate(feats, axis=0).astype(np.float64)


def build_feature_extractor(
    corpus: Corpus, steps: int = 600, seed: int = 0
) -> FeatureExtractor:
    model = train_classifier(corpus, steps=steps, seed=seed)
    model.eval()
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.numpy().tobytes())
    return FeatureExtractor(
        model=model,
        params_hash=h.hexdigest()[:16],
        train_accuracy=classifier_accuracy(model, corpus),
    )


def rc_fc(
    real_train: Corpus,
    real_test: Corpus,
    fake: Corpus,
    steps: int = 400,
    seed: int = 0,
) -> tuple[float, float]:
    """Real-classifier and fake-classifier accuracies.

    RC: train on real_train, score on fake.  FC: train on fake, score on
    real_test.  Both sides use the identical architecture and step budget.
    """
    num_classes = real_train.num_classes
    if num_classes < 2:
        raise DataError("RC/FC protocol is degenerate with a single class")
    for name, corpus in (("real_test", real_test), ("fake", fake)):
        if corpus.num_classes > num_classes:
            raise DataError(f"{name} labels exceed the training label range")
    rc_model = train_classifier(real_train, steps=steps, seed=derive_seed("rc", seed))
    fc_model = train_classifier(fake, steps=steps, seed=derive_seed("fc", seed))
    return classifier_accuracy(rc_model, fake), classifier_accuracy(fc_model, real_test)


# --- reports ------------------------------------------------------------------


@dataclass
class MetricReport:
    """Structured evaluation output, JSON-serializable."""

    per_class: list[ClassMetrics]
    mfid: float
    mkid: float
    rc: float | None
    fc: float | None
    sample_counts: dict[str, int]
    extractor_hash: str
    note: str = COMPARABILITY_NOTE

    def to_dict(self) -> dict:
        return {
            "note": self.note,
            "extractor_hash": self.extractor_hash,
            "mfid": self.mfid,
            "mkid": self.mkid,
            "mkid_x100": self.mkid * 100.0,
            "rc": self.rc,
            "fc": self.fc,
            "sample_counts": self.sample_counts,
            "per_class": [
                {
                    "class": r.class_label,
                    "fid": r.fid,
                    "kid": r.kid,
                    "kid_x100": None if r.kid is None else r.kid * 100.0,
                    "num_real": r.num_real,
                    "num_fake": r.num_fake,
                    "excluded": r.excluded,
                    "reason": r.reason,
                }
                for r in self.per_class
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def render_table(headers: list[str], rows: list[list], title: str = "") -> str:
    """Plain text table in the row/column layout of the result tables."""
    cells = [[_fmt(c) for c in row] for row in rows]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in cells)) if cells else len(headers[i])
        for i in range(len(headers))
    ]
    lines = []
    if title:
        lines.append(title)
    lines.append(" | ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    lines.append("-+-".join("-" * w for w in widths))
    for row in cells:
        lines.append(" | ".join(row[i].ljust(widths[i]) for i in range(len(row))))
    return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.2f}"
    if isinstance(value, bool):
        return "yes" if value else "no"
    return str(value)
