"""The translation stage (c): {encoder, adaptor, generator, auxiliary
generator, discriminator} trained adversarially with a discriminator-feature
reconstruction loss.

Two-class systems hold one such five-net set per direction and train both
directions jointly; multi-class systems hold a single class-conditional set.
The auxiliary generator shares its deepest ResBlocks with the main generator
(storage identity, not copies) and sees only noise, which forces gradient
through the deep trunk that the high-resolution skip injections would
otherwise let the system ignore.

The reconstruction loss treats the discriminator pyramid as a fixed
perceptual metric: during the minimization step the discriminator's
parameters are gradient-disabled, so L_rec shapes only the generator side.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, make_checkpoint, require_stage
from .config import StageConfig
from .data import Corpus, save_image_grid
from .errors import (
    CheckpointError,
    ConfigurationError,
    NumericalError,
    ShapeError,
    UsageError,
)
from .nets import (
    Adaptor,
    Discriminator,
    Generator,
    SharingPlan,
    build_networks,
    clone_network,
    default_injection_weights,
    share_deep_layers,
)
from .pretrain import gan_loss
from .seeding import derive_seed, generator_for
from .selfinit import load_selfinit_adaptor

TWO_CLASS_DIRECTIONS = ("1to2", "2to1")
CONDITIONAL_DIRECTION = "all"


@dataclass
class TwoClassInit:
    """Initialization checkpoints for the two-domain system; None = random."""

    source_gan: Checkpoint | None = None  # (G1, D1)
    target_gan: Checkpoint | None = None  # (G2, D2)
    adaptor_1to2: Checkpoint | None = None  # selfinit on (G2, D1)
    adaptor_2to1: Checkpoint | None = None  # selfinit on (G1, D2)


@dataclass
class ConditionalInit:
    gan: Checkpoint | None = None
    adaptor: Checkpoint | None = None


@dataclass
class DirectionSystem:
    encoder: Discriminator
    adaptor: Adaptor
    generator: Generator
    aux_generator: Generator | None
    discriminator: Discriminator
    sharing: SharingPlan | None

    def nets(self) -> dict:
        out = {
            "encoder": self.encoder,
            "adaptor": self.adaptor,
            "generator": self.generator,
            "discriminator": self.discriminator,
        }
        if self.aux_generator is not None:
            out["aux_generator"] = self.aux_generator
        return out


@dataclass
class I2ISystem:
    config: StageConfig
    directions: dict[str, DirectionSystem]
    opt_min: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0

    @property
    def conditional(self) -> bool:
        return self.config.conditional

    @property
    def spec(self):
        return self.config.arch_spec()

    def injection_weights(self) -> list[float]:
        return list(self.config.injection_weights) or default_injection_weights(
            self.spec
        )

    def all_nets(self) -> dict[str, torch.nn.Module]:
        if self.conditional:
            return self.directions[CONDITIONAL_DIRECTION].nets()
        out = {}
        for name, ds in self.directions.items():
            for role, net in ds.nets().items():
                out[f"{role}_{name}"] = net
        return out


def _dedup(params) -> list[torch.nn.Parameter]:
    return list({id(p): p for p in params}.values())


def _make_system_optimizers(
    directions: dict[str, DirectionSystem], config: StageConfig
) -> tuple[torch.optim.Adam, torch.optim.Adam]:
    gen_params, enc_params, disc_params = [], [], []
    for ds in directions.values():
        gen_params += list(ds.generator.parameters())
        if ds.aux_generator is not None:
            gen_params += list(ds.aux_generator.parameters())
        enc_params += list(ds.encoder.parameters())
        enc_params += list(ds.adaptor.parameters())
        disc_params += list(ds.discriminator.parameters())
    opt_min = torch.optim.Adam(
        [
            {"params": _dedup(gen_params), "lr": config.lr_g},
            {"params": _dedup(enc_params), "lr": config.lr_ad},
        ],
        betas=config.betas,
    )
    opt_d = torch.optim.Adam(_dedup(disc_params), lr=config.lr_ad, betas=config.betas)
    return opt_min, opt_d


def _load_gan_nets(ckpt: Checkpoint | None, spec, seed: int, tag: str):
    """(G, D) from a checkpoint, or a fresh random pair when ckpt is None."""
    if ckpt is not None:
        require_stage(ckpt, ("base", "pretrain"), f"{tag} GAN checkpoint")
        if ckpt.spec != spec:
            raise ConfigurationError(f"{tag} GAN checkpoint spec differs from config")
    nets = build_networks(spec, derive_seed(seed, "i2i-init", tag))
    generator, discriminator = nets["generator"], nets["discriminator"]
    if ckpt is not None:
        ckpt.load_into("generator", generator)
        ckpt.load_into("discriminator", discriminator)
    return generator, discriminator


def _load_adaptor(ckpt: Checkpoint | None, spec, seed: int, tag: str) -> Adaptor:
    if ckpt is None:
        return build_networks(spec, derive_seed(seed, "i2i-init", tag))["adaptor"]
    if ckpt.spec != spec:
        raise ConfigurationError(f"{tag} adaptor checkpoint spec differs from config")
    return load_selfinit_adaptor(ckpt)


def _direction(
    gen_src: Generator,
    disc_src: Discriminator,
    gen_tgt: Generator,
    disc_tgt: Discriminator,
    adaptor: Adaptor,
    config: StageConfig,
) -> DirectionSystem:
    encoder = clone_network(disc_src, role="encoder")
    generator = clone_network(gen_tgt)
    discriminator = clone_network(disc_tgt)
    aux, sharing = None, None
    if config.aux_generator:
        aux = clone_network(generator, role="aux_generator")
        sharing = share_deep_layers(generator, aux, config.shared_resblocks)
    return DirectionSystem(encoder, adaptor, generator, aux, discriminator, sharing)


def build_system(
    config: StageConfig, init: TwoClassInit | ConditionalInit, seed: int
) -> I2ISystem:
    """Wire the translation system from stage (a)/(b) checkpoints.

    Any None entry in `init` falls back to seeded random initialization
    (the scratch ablations).  Adaptor checkpoints must be stage 'selfinit';
    GAN checkpoints must be stage 'base' or 'pretrain'.
    """
    spec = config.arch_spec()
    directions: dict[str, DirectionSystem] = {}
    if config.conditional:
        if not isinstance(init, ConditionalInit):
            raise UsageError("multi_class profile needs ConditionalInit")
        gen, disc = _load_gan_nets(init.gan, spec, seed, "conditional")
        adaptor = _load_adaptor(init.adaptor, spec, seed, "conditional-adaptor")
        directions[CONDITIONAL_DIRECTION] = _direction(
            gen, disc, gen, disc, adaptor, config
        )
    else:
        if not isinstance(init, TwoClassInit):
            raise UsageError("two_class profile needs TwoClassInit")
        g1, d1 = _load_gan_nets(init.source_gan, spec, seed, "source")
        g2, d2 = _load_gan_nets(init.target_gan, spec, seed, "target")
        a12 = _load_adaptor(init.adaptor_1to2, spec, seed, "adaptor-1to2")
        a21 = _load_adaptor(init.adaptor_2to1, spec, seed, "adaptor-2to1")
        directions["1to2"] = _direction(g1, d1, g2, d2, a12, config)
        directions["2to1"] = _direction(g2, d2, g1, d1, a21, config)
    opt_min, opt_d = _make_system_optimizers(directions, config)
    return I2ISystem(config=config, directions=directions, opt_min=opt_min, opt_d=opt_d)


def translate(
    system: I2ISystem,
    x: torch.Tensor,
    z: torch.Tensor,
    direction: str = "1to2",
    labels: torch.Tensor | None = None,
) -> torch.Tensor:
    """Map a batch into the target domain: encode, adapt, generate."""
    if system.conditional:
        if labels is None:
            raise UsageError("conditional translation needs target class labels")
        ds = system.directions[CONDITIONAL_DIRECTION]
    else:
        if direction not in system.directions:
            raise UsageError(f"unknown direction '{direction}'")
        ds = system.directions[direction]
        labels = None
    _, taps = ds.encoder(x)
    adapted = ds.adaptor(taps)
    image, _ = ds.generator(
        z, labels, adapted=adapted, weights=system.injection_weights()
    )
    return image


def _pyramid_l1(pyr_in, pyr_out, alphas) -> torch.Tensor:
    total = None
    for level in sorted(pyr_in):
        term = alphas[level] * (pyr_in[level] - pyr_out[level]).abs().mean()
        total = term if total is None else total + term
    return total


def reconstruction_loss(
    discriminator: Discriminator,
    x_in: torch.Tensor,
    x_out: torch.Tensor,
    alphas,
    labels: torch.Tensor | None = None,
) -> torch.Tensor:
    """Weighted per-level mean-L1 between the discriminator pyramids of two
    batches.  Gradient reaches x_out through the discriminator's features but
    is never applied to the discriminator itself (the training step disables
    its parameter gradients during minimization)."""
    if x_in.shape != x_out.shape:
        raise ShapeError(
            f"reconstruction inputs differ in shape: {tuple(x_in.shape)} vs "
            f"{tuple(x_out.shape)}"
        )
    n = discriminator.spec.num_resblocks
    if len(alphas) != n:
        raise ConfigurationError(f"need {n} alpha weights, got {len(alphas)}")
    with torch.no_grad():
        _, pyr_in = discriminator(x_in, labels)
    _, pyr_out = discriminator(x_out, labels)
    return _pyramid_l1(pyr_in, pyr_out, alphas)


def _check_finite(value: torch.Tensor, term: str) -> torch.Tensor:
    if not torch.isfinite(value):
        raise NumericalError(f"non-finite loss term '{term}'")
    return value


def i2i_train_step(
    system: I2ISystem,
    batch_src: torch.Tensor,
    batch_tgt: torch.Tensor,
    z: torch.Tensor,
    target_labels: torch.Tensor | None = None,
    real_labels: torch.Tensor | None = None,
) -> dict[str, float]:
    """One discriminator maximization step and one {E, A, G, G'} minimization
    step over every direction jointly.  Returns per-direction loss terms."""
    config = system.config
    alphas = config.alphas()
    record: dict[str, float] = {}
    if system.conditional:
        work = [(CONDITIONAL_DIRECTION, batch_src, batch_tgt, target_labels,
                 real_labels)]
        if target_labels is None:
            raise UsageError("conditional training step needs target labels")
    else:
        work = [
            ("1to2", batch_src, batch_tgt, None, None),
            ("2to1", batch_tgt, batch_src, None, None),
        ]

    # discriminator maximization
    d_total = None
    for name, x_in, x_real, t_labels, r_labels in work:
        ds = system.directions[name]
        with torch.no_grad():
            fake = translate(system, x_in, z, direction=name, labels=t_labels)
            aux_img = None
            if ds.aux_generator is not None:
                aux_img, _ = ds.aux_generator(z, t_labels)
        d_real, _ = ds.discriminator(x_real, r_labels)
        d_fake, _ = ds.discriminator(fake, t_labels)
        d_aux = None
        if aux_img is not None:
            d_aux, _ = ds.discriminator(aux_img, t_labels)
        d_loss = _check_finite(
            gan_loss(d_real, d_fake, "discriminator", d_aux, config.lambda_aux),
            f"d_loss/{name}",
        )
        record[f"d_loss/{name}"] = float(d_loss)
        d_total = d_loss if d_total is None else d_total + d_loss
    system.opt_d.zero_grad()
    d_total.backward()
    system.opt_d.step()

    # generator-side minimization with discriminators gradient-disabled
    for ds in system.directions.values():
        ds.discriminator.requires_grad_(False)
    g_total = None
    for name, x_in, x_real, t_labels, r_labels in work:
        ds = system.directions[name]
        fake = translate(system, x_in, z, direction=name, labels=t_labels)
        d_fake, fake_pyr = ds.discriminator(fake, t_labels)
        g_adv = _check_finite(
            gan_loss(None, d_fake, "generator"), f"g_adv/{name}"
        )
        g_aux = None
        if ds.aux_generator is not None:
            aux_img, _ = ds.aux_generator(z, t_labels)
            d_aux, _ = ds.discriminator(aux_img, t_labels)
            g_aux = _check_finite(
                gan_loss(None, d_aux, "generator"), f"g_aux/{name}"
            )
        with torch.no_grad():
            _, in_pyr = ds.discriminator(x_in, t_labels)
        g_rec = _check_finite(
            _pyramid_l1(in_pyr, fake_pyr, alphas), f"g_rec/{name}"
        )
        total = g_adv + config.lambda_rec * g_rec
        if g_aux is not None:
            total = total + config.lambda_aux * g_aux
        record[f"g_adv/{name}"] = float(g_adv)
        record[f"g_rec/{name}"] = float(g_rec)
        record[f"g_aux/{name}"] = float(g_aux) if g_aux is not None else 0.0
        g_total = total if g_total is None else g_total + total
    system.opt_min.zero_grad()
    g_total.backward()
    system.opt_min.step()
    for ds in system.directions.values():
        ds.discriminator.requires_grad_(True)

    system.step += 1
    return record


def system_checkpoint(system: I2ISystem, seed: int) -> Checkpoint:
    sharing = {
        name: ds.sharing.to_dict() if ds.sharing else None
        for name, ds in system.directions.items()
    }
    return make_checkpoint(
        "i2i",
        system.step,
        seed,
        system.spec,
        nets=system.all_nets(),
        optimizers={"opt_min": system.opt_min, "opt_d": system.opt_d},
        sharing=sharing,
        extra={"aux_generator": system.config.aux_generator},
    )


def load_i2i_system(ckpt: Checkpoint, config: StageConfig) -> I2ISystem:
    """Rebuild a trained system from its checkpoint (fresh optimizer state)."""
    require_stage(ckpt, "i2i", "translation system checkpoint")
    if ckpt.spec != config.arch_spec():
        raise ConfigurationError("i2i checkpoint spec differs from config")
    aux_enabled = bool(ckpt.extra.get("aux_generator", True))
    cfg = config if config.aux_generator == aux_enabled else _with_aux(config, aux_enabled)
    init = ConditionalInit() if cfg.conditional else TwoClassInit()
    system = build_system(cfg, init, ckpt.seed)
    system.step = ckpt.step
    for net_name, module in system.all_nets().items():
        ckpt.load_into(net_name, module)
    return system


def _with_aux(config: StageConfig, aux: bool) -> StageConfig:
    from dataclasses import replace

    return replace(config, aux_generator=aux)


def run_i2i_stage(
    init: TwoClassInit | ConditionalInit,
    datasets: dict[str, Corpus],
    config: StageConfig,
    seed: int,
    out_dir=None,
    extractor=None,
) -> tuple[Checkpoint, "object | None"]:
    """Full stage (c) run: wire, train config.steps steps, checkpoint.

    ``datasets`` holds {'source', 'target'} train corpora (two_class) or
    {'all'} (multi_class).  If an extractor is given, a final MetricReport is
    computed; with ``config.snapshot_every`` also periodic mFID/mKID rows.
    """
    system = build_system(config, init, seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    spec = system.spec
    if out_dir is not None:
        system_checkpoint(system, seed).save(out_dir / "i2i_init.ckpt.npz")
    if config.conditional:
        corpus_all = datasets["all"]
        label_probs = corpus_all.label_distribution()
    else:
        corpus_src, corpus_tgt = datasets["source"], datasets["target"]
    rows = []
    snapshots = []
    for step in range(config.steps):
        gen = generator_for("i2i", seed, step)
        z = torch.randn(config.batch_size, spec.latent_dim, generator=gen)
        if config.conditional:
            x_in, _ = corpus_all.sample_batch(config.batch_size, gen)
            x_real, r_labels = corpus_all.sample_batch(config.batch_size, gen)
            t_labels = torch.multinomial(
                label_probs, config.batch_size, replacement=True, generator=gen
            )
            record = i2i_train_step(system, x_in, x_real, z, t_labels, r_labels)
        else:
            x1, _ = corpus_src.sample_batch(config.batch_size, gen)
            x2, _ = corpus_tgt.sample_batch(config.batch_size, gen)
            record = i2i_train_step(system, x1, x2, z)
        rows.append({"step": step + 1, **record})
        if (
            out_dir is not None
            and config.sample_every > 0
            and (step + 1) % config.sample_every == 0
        ):
            _save_samples(system, datasets, seed, out_dir, step + 1)
        if (
            extractor is not None
            and config.snapshot_every > 0
            and (step + 1) % config.snapshot_every == 0
        ):
            from .evaluate import evaluate_system

            report = evaluate_system(system, datasets, extractor, config, seed)
            snapshots.append((step + 1, report.mfid, report.mkid))
    if out_dir is not None and rows:
        _write_i2i_csv(out_dir / "logs" / "i2i_losses.csv", rows)
    if out_dir is not None and snapshots:
        with open(out_dir / "logs" / "i2i_metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step", "mfid", "mkid"))
            writer.writerows(snapshots)
    ckpt = system_checkpoint(system, seed)
    if out_dir is not None:
        ckpt.save(out_dir / "i2i.ckpt.npz")
    report = None
    if extractor is not None:
        from .evaluate import evaluate_system

        report = evaluate_system(system, datasets, extractor, config, seed)
    return ckpt, report


def _write_i2i_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = sorted(rows[0], key=lambda c: (c != "step", c))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _save_samples(system, datasets, seed, out_dir, step) -> None:
    gen = generator_for("i2i-samples", seed)
    spec = system.spec
    with torch.no_grad():
        if system.conditional:
            corpus = datasets["all"]
            x, _ = corpus.sample_batch(8, gen)
            z = torch.randn(8, spec.latent_dim, generator=gen)
            labels = torch.randint(spec.num_classes, (8,), generator=gen)
            fake = translate(system, x, z, labels=labels)
            grid = torch.cat([x, fake])
        else:
            x1, _ = datasets["source"].sample_batch(8, gen)
            z = torch.randn(8, spec.latent_dim, generator=gen)
            fake = translate(system, x1, z, direction="1to2")
            grid = torch.cat([x1, fake])
    save_image_grid(grid, Path(out_dir) / "samples" / f"i2i_{step:06d}.png")


# --- Fisher-weighted weight fluctuation --------------------------------------


def fisher_diagonal(
    generator: Generator,
    discriminator: Discriminator,
    config: StageConfig,
    seed: int,
    num_batches: int = 256,
    batch_size: int | None = None,
) -> dict[str, np.ndarray]:
    """Diagonal Fisher estimate for the generator's parameters.

    Squared gradients of the fake-side GAN log-likelihood
    log(1 - sigmoid(D(G(z)))), averaged over sampled latent batches at the
    current parameters.
    """
    spec = generator.spec
    bs = batch_size or config.batch_size
    params = dict(generator.named_parameters())
    fisher = {name: torch.zeros_like(p) for name, p in params.items()}
    for b in range(num_batches):
        gen = generator_for("fisher", seed, b)
        z = torch.randn(bs, spec.latent_dim, generator=gen)
        labels = None
        if spec.conditional:
            labels = torch.randint(spec.num_classes, (bs,), generator=gen)
        image, _ = generator(z, labels)
        logit, _ = discriminator(image, labels)
        log_lik = (-F.softplus(logit)).mean()
        grads = torch.autograd.grad(
            log_lik, list(params.values()), allow_unused=True
        )
        for (name, _), g in zip(params.items(), grads):
            if g is not None:
                fisher[name] += g.detach() ** 2
    return {name: (v / num_batches).numpy() for name, v in fisher.items()}


def generator_resblock_groups(spec, param_names) -> dict[str, list[str]]:
    """RB_i groups indexed from the latent input toward the output."""
    groups = {f"RB_{i}": [] for i in range(spec.num_resblocks)}
    for name in param_names:
        if name.startswith("blocks."):
            idx = int(name.split(".")[1])
            groups[f"RB_{idx}"].append(name)
    return groups


def weight_fluctuation(
    before: dict[str, np.ndarray],
    after: dict[str, np.ndarray],
    fisher: dict[str, np.ndarray],
    groups: dict[str, list[str]],
) -> dict[str, float]:
    """Fisher-weighted squared parameter displacement, one value per group."""
    out = {}
    for group, names in groups.items():
        total = 0.0
        for name in names:
            if name not in before or name not in after:
                raise CheckpointError(f"parameter '{name}' missing from a checkpoint")
            if name not in fisher:
                raise CheckpointError(f"no Fisher entry for parameter '{name}'")
            if before[name].shape != after[name].shape:
                raise CheckpointError(f"parameter '{name}' changed shape")
            delta = np.asarray(after[name], np.float64) - np.asarray(
                before[name], np.float64
            )
            total += float((np.asarray(fisher[name], np.float64) * delta**2).sum())
        out[group] = total
    return out


def weight_fluctuation_probe(
    ckpt_before: Checkpoint,
    ckpt_after: Checkpoint,
    fisher: dict[str, np.ndarray],
    net_name: str = "generator",
    groups: dict[str, list[str]] | None = None,
) -> dict[str, float]:
    """Per-ResBlock weight fluctuation of one generator between checkpoints."""
    for ckpt in (ckpt_before, ckpt_after):
        if net_name not in ckpt.nets:
            raise CheckpointError(f"checkpoint has no net '{net_name}'")
    before = ckpt_before.nets[net_name]
    after = ckpt_after.nets[net_name]
    if set(before) != set(after):
        raise CheckpointError(
            f"checkpoints disagree on '{net_name}' parameter names"
        )
    if groups is None:
        groups = generator_resblock_groups(ckpt_before.spec, before)
    return weight_fluctuation(before, after, fisher, groups)


def plot_weight_fluctuation(curves: dict[str, dict[str, float]], path) -> Path:
    """Line plot of per-ResBlock WF for each labeled arm (aux on/off)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, values in curves.items():
        keys = sorted(values, key=lambda k: int(k.split("_")[1]))
        ax.plot(range(len(keys)), [values[k] for k in keys], marker="o", label=label)
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys)
    ax.set_xlabel("generator ResBlock (input to output)")
    ax.set_ylabel("weight fluctuation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
