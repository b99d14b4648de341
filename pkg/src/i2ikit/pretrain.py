"""GAN training for stage (a): the base model and its domain finetunes.

The base GAN stands in for a large pretrained model and is trained here at
desk scale.  Two-class runs then finetune it separately on the source and the
target domain; multi-class runs finetune one class-conditional pair on all
labeled data.  Both losses are the standard minimax objective in a
numerically stable log-sigmoid form, with the generator using the
non-saturating variant:

    d_loss = softplus(-real_logit) + softplus(fake_logit)
           (+ aux_weight * softplus(aux_logit))
    g_loss = softplus(-fake_logit) (+ aux_weight * softplus(-aux_logit))

Every random draw comes from a generator derived from (tag, seed, step), so
a run is bit-reproducible and resumable from any checkpoint.
"""

import csv
from pathlib import Path

import torch
import torch.nn.functional as F

from .checkpoint import (
    Checkpoint,
    make_checkpoint,
    require_stage,
    restore_optimizer,
)
from .config import StageConfig
from .data import Corpus, save_image_grid
from .errors import DataError, NumericalError, UsageError
from .nets import Discriminator, Generator, build_networks
from .seeding import generator_for

LOSS_COLUMNS = ("step", "d_loss", "g_loss", "aux_loss")


def gan_loss(
    real_logits: torch.Tensor | None,
    fake_logits: torch.Tensor,
    side: str,
    aux_fake_logits: torch.Tensor | None = None,
    aux_weight: float = 0.01,
) -> torch.Tensor:
    """Adversarial loss for one side of the minimax game.

    The discriminator side is the negated log-likelihood of the real/fake
    split (optionally including the auxiliary fakes, scaled by aux_weight);
    the generator side is the non-saturating form.
    """
    if side not in ("discriminator", "generator"):
        raise UsageError(f"unknown gan_loss side '{side}'")
    for name, logits in (
        ("real", real_logits),
        ("fake", fake_logits),
        ("aux", aux_fake_logits),
    ):
        if logits is not None and not torch.isfinite(logits).all():
            raise NumericalError(f"non-finite {name} logits in gan_loss")
    if side == "discriminator":
        if real_logits is None:
            raise UsageError("discriminator side needs real logits")
        loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
        if aux_fake_logits is not None:
            loss = loss + aux_weight * F.softplus(aux_fake_logits).mean()
        return loss
    loss = F.softplus(-fake_logits).mean()
    if aux_fake_logits is not None:
        loss = loss + aux_weight * F.softplus(-aux_fake_logits).mean()
    return loss


def make_optimizers(
    generator: Generator, discriminator: Discriminator, config: StageConfig
) -> tuple[torch.optim.Adam, torch.optim.Adam]:
    opt_g = torch.optim.Adam(
        generator.parameters(), lr=config.lr_g, betas=config.betas
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=config.lr_ad, betas=config.betas
    )
    return opt_g, opt_d


def _sample_labels(probs: torch.Tensor, batch: int, gen: torch.Generator):
    return torch.multinomial(probs, batch, replacement=True, generator=gen)


def _write_loss_csv(out_dir: Path, name: str, rows: list[tuple]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        writer.writerows(rows)


def _run_gan_loop(
    generator: Generator,
    discriminator: Discriminator,
    opt_g: torch.optim.Adam,
    opt_d: torch.optim.Adam,
    corpus: Corpus,
    config: StageConfig,
    seed: int,
    rng_tag: str,
    start_step: int,
    steps: int,
    out_dir: Path | None,
    log_name: str,
) -> None:
    conditional = generator.conditional
    label_probs = corpus.label_distribution() if conditional else None
    rows = []
    for step in range(start_step, steps):
        gen = generator_for(rng_tag, seed, step)
        real, real_labels = corpus.sample_batch(config.batch_size, gen)
        z = torch.randn(config.batch_size, config.latent_dim, generator=gen)
        fake_labels = (
            _sample_labels(label_probs, config.batch_size, gen) if conditional else None
        )
        fake, _ = generator(z, fake_labels)
        d_real, _ = discriminator(real, real_labels if conditional else None)
        d_fake, _ = discriminator(fake.detach(), fake_labels)
        d_loss = gan_loss(d_real, d_fake, "discriminator")
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        z2 = torch.randn(config.batch_size, config.latent_dim, generator=gen)
        fake_labels2 = (
            _sample_labels(label_probs, config.batch_size, gen) if conditional else None
        )
        fake2, _ = generator(z2, fake_labels2)
        discriminator.requires_grad_(False)
        d_fake2, _ = discriminator(fake2, fake_labels2)
        g_loss = gan_loss(None, d_fake2, "generator")
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        discriminator.requires_grad_(True)

        rows.append((step + 1, float(d_loss), float(g_loss), 0.0))
        if (
            out_dir is not None
            and config.sample_every > 0
            and (step + 1) % config.sample_every == 0
        ):
            with torch.no_grad():
                probe_gen = generator_for(rng_tag + "-samples", seed)
                zp = torch.randn(16, config.latent_dim, generator=probe_gen)
                lp = (
                    _sample_labels(label_probs, 16, probe_gen) if conditional else None
                )
                grid, _ = generator(zp, lp)
            save_image_grid(grid, out_dir / "samples" / f"{log_name}_{step + 1:06d}.png")
    if out_dir is not None:
        _write_loss_csv(Path(out_dir) / "logs", f"{log_name}_losses.csv", rows)


def train_base_gan(
    corpus: Corpus,
    config: StageConfig,
    seed: int,
    out_dir=None,
    resume: Checkpoint | None = None,
    steps: int | None = None,
) -> Checkpoint:
    """Train the stage-(a) starting GAN from scratch (or resume it).

    Unconditional under the two_class profile (the corpus is the union of
    both domains); class-conditional under multi_class.
    """
    if len(corpus) == 0:
        raise DataError("base GAN training needs a nonempty dataset")
    spec = config.arch_spec()
    steps = config.base_steps if steps is None else steps
    nets = build_networks(spec, seed)
    generator, discriminator = nets["generator"], nets["discriminator"]
    opt_g, opt_d = make_optimizers(generator, discriminator, config)
    start_step = 0
    if resume is not None:
        require_stage(resume, "base", "resume checkpoint")
        resume.load_into("generator", generator)
        resume.load_into("discriminator", discriminator)
        pair = {"generator": generator, "discriminator": discriminator}
        restore_optimizer(opt_g, resume.opt.get("opt_g", {}), pair)
        restore_optimizer(opt_d, resume.opt.get("opt_d", {}), pair)
        start_step = resume.step
    if config.conditional and corpus.num_classes != spec.num_classes:
        raise DataError(
            f"corpus has {corpus.num_classes} classes, spec expects {spec.num_classes}"
        )
    out_dir = Path(out_dir) if out_dir is not None else None
    _run_gan_loop(
        generator, discriminator, opt_g, opt_d, corpus, config, seed,
        "base", start_step, steps, out_dir, "base",
    )
    path = out_dir / "base.ckpt.npz" if out_dir is not None else None
    return _save_gan(path, "base", steps, seed, spec, generator, discriminator,
                     opt_g, opt_d)


def _save_gan(path, stage, step, seed, spec, generator, discriminator, opt_g, opt_d):
    ckpt = make_checkpoint(
        stage, step, seed, spec,
        nets={"generator": generator, "discriminator": discriminator},
        optimizers={"opt_g": opt_g, "opt_d": opt_d},
    )
    if path is not None:
        ckpt.save(path)
    return ckpt


def finetune_gan(
    base: Checkpoint,
    corpus: Corpus,
    config: StageConfig,
    seed: int,
    out_dir=None,
    log_name: str = "finetune",
    steps: int | None = None,
) -> Checkpoint:
    """Finetune the base GAN on one corpus with fresh optimizer state."""
    require_stage(base, "base", "finetune input")
    if len(corpus) == 0:
        raise DataError("finetuning needs a nonempty dataset")
    spec = config.arch_spec()
    steps = config.pretrain_steps if steps is None else steps
    nets = build_networks(spec, seed)
    generator, discriminator = nets["generator"], nets["discriminator"]
    base.load_into("generator", generator)
    base.load_into("discriminator", discriminator)
    opt_g, opt_d = make_optimizers(generator, discriminator, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    _run_gan_loop(
        generator, discriminator, opt_g, opt_d, corpus, config, seed,
        "pretrain", 0, steps, out_dir, log_name,
    )
    path = out_dir / f"{log_name}.ckpt.npz" if out_dir is not None else None
    return _save_gan(path, "pretrain", steps, seed, spec, generator, discriminator,
                     opt_g, opt_d)


def finetune_source_target(
    base: Checkpoint,
    dataset_src: Corpus,
    dataset_tgt: Corpus,
    config: StageConfig,
    seed: int,
    out_dir=None,
    steps: int | None = None,
) -> tuple[Checkpoint, Checkpoint]:
    """Two independent domain finetunes from the same base (two-class path)."""
    if config.conditional:
        raise UsageError("source/target finetuning is the two_class path")
    ck_src = finetune_gan(
        base, dataset_src, config, seed, out_dir, log_name="pretrain_source",
        steps=steps,
    )
    ck_tgt = finetune_gan(
        base, dataset_tgt, config, seed, out_dir, log_name="pretrain_target",
        steps=steps,
    )
    return ck_src, ck_tgt


def finetune_conditional(
    base: Checkpoint,
    dataset_all: Corpus,
    config: StageConfig,
    seed: int,
    out_dir=None,
    steps: int | None = None,
) -> Checkpoint:
    """Single conditional finetune on all labeled data (multi-class path)."""
    spec = config.arch_spec()
    if spec.conditional:
        counts = dataset_all.class_counts()
        if len(counts) != spec.num_classes or any(c == 0 for c in counts):
            raise DataError(
                f"labels must cover classes 0..{spec.num_classes - 1}; "
                f"got counts {counts}"
            )
    return finetune_gan(
        base, dataset_all, config, seed, out_dir, log_name="pretrain_conditional",
        steps=steps,
    )


def load_gan(ckpt: Checkpoint) -> tuple[Generator, Discriminator]:
    """Reconstruct the (generator, discriminator) pair stored in a checkpoint."""
    nets = build_networks(ckpt.spec, ckpt.seed)
    generator, discriminator = nets["generator"], nets["discriminator"]
    ckpt.load_into("generator", generator)
    ckpt.load_into("discriminator", discriminator)
    return generator, discriminator
