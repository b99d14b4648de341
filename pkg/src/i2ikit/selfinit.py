"""Data-free adaptor pretraining (stage b).

Latents are sampled, pushed through the frozen generator (collecting its
injection-site pyramid and the synthesized image), the image goes through the
frozen discriminator (collecting its pyramid), and the adaptor is trained to
map the discriminator pyramid onto the generator pyramid under a per-level
mean-L1 loss summed across levels.  No dataset image is ever read; the whole
loop runs inside the sealed-data guard so an accidental read raises.

The per-level mean (instead of a raw elementwise sum) makes the loss scale
resolution-independent; it only rescales the effective learning rate.
"""

import csv
from pathlib import Path

import torch

from .checkpoint import Checkpoint, make_checkpoint, require_stage
from .config import StageConfig
from .data import save_image_grid, sealed_dataset_reads
from .errors import CheckpointError, NumericalError, ShapeError
from .nets import Adaptor, Discriminator, FeaturePyramid, Generator, build_networks
from .seeding import derive_seed, generator_for


def alignment_loss(
    target_pyramid: FeaturePyramid, adapted_pyramid: FeaturePyramid
) -> torch.Tensor:
    """Sum over levels of the per-element mean absolute difference."""
    if set(target_pyramid) != set(adapted_pyramid):
        raise ShapeError(
            f"pyramid levels differ: {sorted(target_pyramid)} vs "
            f"{sorted(adapted_pyramid)}"
        )
    total = None
    for level in sorted(target_pyramid):
        t, a = target_pyramid[level], adapted_pyramid[level]
        if t.shape != a.shape:
            raise ShapeError(
                f"pyramid level {level}: shape {tuple(a.shape)} != {tuple(t.shape)}"
            )
        term = (t - a).abs().mean()
        total = term if total is None else total + term
    return total


def _probe_inputs(spec, config, seed):
    gen = generator_for("selfinit-probe", seed)
    z = torch.randn(4 * config.batch_size, spec.latent_dim, generator=gen)
    labels = None
    if spec.conditional:
        labels = torch.randint(spec.num_classes, (len(z),), generator=gen)
    return z, labels


def _alignment_on(generator, discriminator, adaptor, z, labels):
    with torch.no_grad():
        image, gen_pyr = generator(z, labels)
        _, disc_pyr = discriminator(image, labels)
        adapted = adaptor(disc_pyr)
        return float(alignment_loss(gen_pyr, adapted))


def self_initialize_adaptor(
    gen_ckpt: Checkpoint,
    disc_ckpt: Checkpoint,
    adaptor: Adaptor,
    steps: int,
    config: StageConfig,
    seed: int,
    out_dir=None,
) -> Checkpoint:
    """Train only the adaptor to align the frozen (G, D) pair's pyramids.

    Two-class wiring passes the target domain's generator checkpoint and the
    source domain's discriminator checkpoint (the pair the translation system
    will connect through the encoder); conditional wiring passes the single
    pair.  The returned checkpoint carries the untouched G and D next to the
    trained adaptor plus the initial/final loss measured on a fixed probe
    batch.
    """
    require_stage(gen_ckpt, ("base", "pretrain"), "generator checkpoint")
    require_stage(disc_ckpt, ("base", "pretrain"), "discriminator checkpoint")
    if gen_ckpt.spec != disc_ckpt.spec or gen_ckpt.spec != adaptor.spec:
        raise CheckpointError(
            "generator/discriminator checkpoints and adaptor must share one spec"
        )
    spec = gen_ckpt.spec
    generator = Generator(spec)
    discriminator = Discriminator(spec)
    gen_ckpt.load_into("generator", generator)
    disc_ckpt.load_into("discriminator", discriminator)
    generator.requires_grad_(False)
    discriminator.requires_grad_(False)
    opt = torch.optim.Adam(adaptor.parameters(), lr=config.lr_ad, betas=config.betas)

    probe_z, probe_labels = _probe_inputs(spec, config, seed)
    initial = _alignment_on(generator, discriminator, adaptor, probe_z, probe_labels)
    rows = []
    with sealed_dataset_reads():
        for step in range(steps):
            gen = generator_for("selfinit", seed, step)
            z = torch.randn(config.batch_size, spec.latent_dim, generator=gen)
            labels = None
            if spec.conditional:
                labels = torch.randint(
                    spec.num_classes, (config.batch_size,), generator=gen
                )
            with torch.no_grad():
                image, gen_pyr = generator(z, labels)
                _, disc_pyr = discriminator(image, labels)
            adapted = adaptor(disc_pyr)
            loss = alignment_loss(gen_pyr, adapted)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite alignment loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append((step + 1, float(loss)))
    final = _alignment_on(generator, discriminator, adaptor, probe_z, probe_labels)

    if out_dir is not None:
        out_dir = Path(out_dir)
        logs = out_dir / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        with open(logs / "selfinit_losses.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step", "alignment_loss"))
            writer.writerows(rows)
        orig, recon, _ = reconstruction_probe(
            generator, discriminator, adaptor, probe_z[:16],
            probe_labels[:16] if probe_labels is not None else None,
        )
        save_image_grid(
            torch.cat([orig, recon]), out_dir / "samples" / "selfinit_probe.png"
        )
    ckpt = make_checkpoint(
        "selfinit",
        steps,
        seed,
        spec,
        nets={
            "generator": generator,
            "discriminator": discriminator,
            "adaptor": adaptor,
        },
        optimizers={"opt_a": opt},
        extra={
            "initial_alignment_loss": initial,
            "final_alignment_loss": final,
        },
    )
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "selfinit.ckpt.npz")
    return ckpt


def reconstruction_probe(
    generator: Generator,
    discriminator: Discriminator,
    adaptor: Adaptor,
    z: torch.Tensor,
    labels: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, float]:
    """Drive the generator from adaptor features only (zero latent).

    Returns the original images G(z), the reconstructions, and their mean
    absolute pixel error.  A well-aligned adaptor reconstructs G(z) far
    better than a randomly initialized one.
    """
    with torch.no_grad():
        original, _ = generator(z, labels)
        _, disc_pyr = discriminator(original, labels)
        adapted = adaptor(disc_pyr)
        recon, _ = generator(
            torch.zeros_like(z),
            labels,
            adapted=adapted,
            weights=[1.0] * generator.spec.num_resblocks,
        )
    return original, recon, float((original - recon).abs().mean())


def load_selfinit_adaptor(ckpt: Checkpoint) -> Adaptor:
    """Reconstruct the trained adaptor stored in a selfinit checkpoint."""
    require_stage(ckpt, "selfinit", "adaptor checkpoint")
    adaptor = build_networks(ckpt.spec, ckpt.seed)["adaptor"]
    ckpt.load_into("adaptor", adaptor)
    return adaptor
