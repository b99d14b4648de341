"""Evaluation protocol: translate held inputs, embed, score per class.

For each target class the fakes are translations of capped source-side train
inputs (fixed latents per run seed) and the reals are that class's train
images.  FID/KID run on the shared desk-scale embedding; RC/FC optionally
train the fixed probe classifier in both directions.
"""

import torch

from .config import StageConfig
from .data import Corpus
from .errors import DataError
from .i2i import I2ISystem, translate
from .metrics import (
    FeatureExtractor,
    FeatureSet,
    MetricReport,
    mean_class_metrics,
    rc_fc,
)
from .seeding import derive_seed, generator_for


def _translate_batchwise(system, images, z, direction=None, labels=None, chunk=64):
    out = []
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            sl = slice(start, start + chunk)
            out.append(
                translate(
                    system,
                    images[sl],
                    z[sl],
                    direction=direction or "1to2",
                    labels=labels[sl] if labels is not None else None,
                )
            )
    return torch.cat(out)


def _eval_inputs(corpus: Corpus, cap: int, z_per_input: int, spec, seed, tag):
    gen = generator_for("eval-inputs", seed, tag)
    n = min(cap, len(corpus))
    idx = torch.randperm(len(corpus), generator=gen)[:n]
    images = corpus.images[idx].repeat_interleave(z_per_input, dim=0)
    z = torch.randn(len(images), spec.latent_dim, generator=gen)
    return images, z


def generate_fakes(
    system: I2ISystem, datasets: dict[str, Corpus], config: StageConfig, seed: int
) -> Corpus:
    """Labeled corpus of translations, one entry set per target class."""
    spec = system.spec
    cap, zper = config.eval_inputs_cap, config.eval_z_per_input
    images, labels = [], []
    if system.conditional:
        corpus = datasets["all"]
        for c in range(corpus.num_classes):
            inputs, z = _eval_inputs(corpus, cap, zper, spec, seed, f"class{c}")
            t_labels = torch.full((len(inputs),), c, dtype=torch.long)
            fakes = _translate_batchwise(system, inputs, z, labels=t_labels)
            images.append(fakes)
            labels.append(t_labels)
    else:
        pairs = (("1to2", datasets["source"], 1), ("2to1", datasets["target"], 0))
        for direction, corpus, target_class in pairs:
            inputs, z = _eval_inputs(corpus, cap, zper, spec, seed, direction)
            fakes = _translate_batchwise(system, inputs, z, direction=direction)
            images.append(fakes)
            labels.append(
                torch.full((len(fakes),), target_class, dtype=torch.long)
            )
    return Corpus(
        images=torch.cat(images),
        labels=torch.cat(labels),
        split="generated",
        image_size=spec.image_size,
    )


def _real_by_class(datasets: dict[str, Corpus], conditional: bool) -> dict[int, Corpus]:
    if conditional:
        corpus = datasets["all"]
        return {
            c: corpus.subset_by_class(c) for c in range(corpus.num_classes)
        }
    return {0: datasets["source"], 1: datasets["target"]}


def evaluate_system(
    system: I2ISystem,
    datasets: dict[str, Corpus],
    extractor: FeatureExtractor,
    config: StageConfig,
    seed: int,
    rcfc_sets: tuple[Corpus, Corpus] | None = None,
) -> MetricReport:
    """Score a translation system: per-class FID/KID, their means, and
    (when rcfc_sets=(real_train, real_test) is given) RC/FC accuracies."""
    fakes = generate_fakes(system, datasets, config, seed)
    reals = _real_by_class(datasets, system.conditional)
    per_class = []
    for c, real_corpus in sorted(reals.items()):
        fake_subset = fakes.subset_by_class(c)
        if len(real_corpus) == 0:
            raise DataError(f"no real images for class {c}")
        per_class.append(
            (
                c,
                FeatureSet(extractor(real_corpus.images), "real", c),
                FeatureSet(extractor(fake_subset.images), "generated", c),
            )
        )
    summary = mean_class_metrics(per_class, kid_seed=derive_seed("kid", seed))
    rc = fc = None
    if rcfc_sets is not None:
        real_train, real_test = rcfc_sets
        rc, fc = rc_fc(
            real_train, real_test, fakes, steps=config.rcfc_steps, seed=seed
        )
    counts = {
        "real": sum(len(r) for _, r, _ in per_class),
        "generated": len(fakes),
    }
    return MetricReport(
        per_class=summary["per_class"],
        mfid=summary["mfid"],
        mkid=summary["mkid"],
        rc=rc,
        fc=fc,
        sample_counts=counts,
        extractor_hash=extractor.params_hash,
    )
