"""Ablation grids: the initialization wiring table, the shared-layer sweep,
and the matched auxiliary-generator comparison with its weight-fluctuation
probe.

`prepare_two_class` trains the per-seed assets once (base GAN, domain
finetunes, adaptor self-initializations); the grid then wires each ablation
row from those assets so every row of one seed differs only in
initialization.  The feature extractor is trained once per grid on the real
corpus and shared by every row, making mFID/mKID comparable across rows.
"""

from dataclasses import dataclass
from pathlib import Path

from .checkpoint import Checkpoint
from .config import StageConfig
from .data import Corpus, load_image_folder, synthetic_shapes
from .errors import ConfigurationError
from .evaluate import evaluate_system
from .i2i import (
    TwoClassInit,
    build_system,
    fisher_diagonal,
    plot_weight_fluctuation,
    run_i2i_stage,
    system_checkpoint,
    weight_fluctuation_probe,
)
from .metrics import FeatureExtractor, build_feature_extractor
from .nets import build_networks
from .pretrain import finetune_source_target, train_base_gan
from .seeding import derive_seed
from .selfinit import self_initialize_adaptor

# Table rows: wiring name -> (source-target init, self-init)
INIT_WIRINGS = {
    "scratch": (False, False),
    "source_target_only": (True, False),
    "self_init_only": (False, True),
    "both": (True, True),
}


def load_two_class_corpora(config: StageConfig, seed: int) -> dict[str, Corpus]:
    """Train/test corpora per domain from the configured data source."""
    if config.data_kind == "synthetic":
        train = synthetic_shapes(
            config.num_classes, config.per_class, config.image_size, seed, "train"
        )
        test_per_class = max(
            1, round(config.per_class * (1 - config.split_fraction))
        )
        test = synthetic_shapes(
            config.num_classes, test_per_class, config.image_size,
            derive_seed(seed, "test"), "test",
        )
    else:
        if not config.data_root:
            raise ConfigurationError("data_kind=folder needs data_root")
        train, test = load_image_folder(
            config.data_root,
            config.image_size,
            config.split_fraction,
            seed,
            config.test_per_class,
        )
    out = {"train": train, "test": test}
    if not config.conditional:
        for split in ("train", "test"):
            out[f"source_{split}"] = out[split].subset_by_class(0)
            out[f"target_{split}"] = out[split].subset_by_class(1)
    return out


@dataclass
class PreparedTwoClass:
    """Per-seed stage (a)/(b) assets feeding every ablation row."""

    seed: int
    corpora: dict[str, Corpus]
    base: Checkpoint
    source: Checkpoint
    target: Checkpoint
    adaptor_ft_1to2: Checkpoint
    adaptor_ft_2to1: Checkpoint
    adaptor_base: Checkpoint


def prepare_two_class(
    config: StageConfig, seed: int, corpora: dict[str, Corpus] | None = None
) -> PreparedTwoClass:
    corpora = corpora or load_two_class_corpora(config, seed)
    base = train_base_gan(corpora["train"], config, seed)
    source, target = finetune_source_target(
        base, corpora["source_train"], corpora["target_train"], config, seed
    )
    spec = config.arch_spec()

    def selfinit(gen_ckpt, disc_ckpt, tag):
        adaptor = build_networks(spec, derive_seed(seed, "adaptor", tag))["adaptor"]
        return self_initialize_adaptor(
            gen_ckpt, disc_ckpt, adaptor, config.selfinit_steps, config, seed
        )

    return PreparedTwoClass(
        seed=seed,
        corpora=corpora,
        base=base,
        source=source,
        target=target,
        adaptor_ft_1to2=selfinit(target, source, "ft-1to2"),
        adaptor_ft_2to1=selfinit(source, target, "ft-2to1"),
        adaptor_base=selfinit(base, base, "base"),
    )


def wiring_init(prep: PreparedTwoClass, st_init: bool, self_init: bool) -> TwoClassInit:
    """Translate one ablation-table row into initialization checkpoints.

    Without source-target init the system starts from the base GAN (random
    everywhere when self-init is off too, i.e. the scratch row); self-init
    rows use adaptors aligned against whichever GAN pair the row starts from.
    """
    if st_init and self_init:
        return TwoClassInit(
            prep.source, prep.target, prep.adaptor_ft_1to2, prep.adaptor_ft_2to1
        )
    if st_init:
        return TwoClassInit(prep.source, prep.target, None, None)
    if self_init:
        return TwoClassInit(prep.base, prep.base, prep.adaptor_base, prep.adaptor_base)
    return TwoClassInit(None, None, None, None)


def grid_extractor(config: StageConfig, corpora: dict[str, Corpus]) -> FeatureExtractor:
    return build_feature_extractor(
        corpora["train"], steps=config.extractor_steps,
        seed=derive_seed(config.seed, "extractor"),
    )


def _i2i_datasets(corpora: dict[str, Corpus], config: StageConfig) -> dict[str, Corpus]:
    if config.conditional:
        return {"all": corpora["train"]}
    return {"source": corpora["source_train"], "target": corpora["target_train"]}


def run_init_grid(
    config: StageConfig,
    seeds: tuple[int, ...],
    out_dir=None,
    extractor: FeatureExtractor | None = None,
    log=None,
) -> list[dict]:
    """The four-row initialization ablation, one row per (wiring, seed)."""
    out_dir = Path(out_dir) if out_dir is not None else None
    corpora0 = load_two_class_corpora(config, seeds[0])
    extractor = extractor or grid_extractor(config, corpora0)
    rows = []
    for seed in seeds:
        corpora = corpora0 if seed == seeds[0] else load_two_class_corpora(config, seed)
        prep = prepare_two_class(config, seed, corpora)
        for name, (st, si) in INIT_WIRINGS.items():
            run_dir = out_dir / f"seed{seed}" / name if out_dir else None
            _, report = run_i2i_stage(
                wiring_init(prep, st, si),
                _i2i_datasets(corpora, config),
                config,
                seed,
                out_dir=run_dir,
                extractor=extractor,
            )
            row = {
                "wiring": name,
                "source_target_init": st,
                "self_init": si,
                "seed": seed,
                "mkid_x100": report.mkid * 100.0,
                "mfid": report.mfid,
            }
            rows.append(row)
            if log:
                log(
                    f"wiring={name} seed={seed} "
                    f"mKIDx100={row['mkid_x100']:.2f} mFID={row['mfid']:.2f}"
                )
    return rows


def run_sharing_sweep(
    config: StageConfig,
    seeds: tuple[int, ...],
    ks: tuple[int, ...] = (1, 2, 3, 4),
    out_dir=None,
    extractor: FeatureExtractor | None = None,
    log=None,
) -> list[dict]:
    """Shared-ResBlock-count sweep on the fully initialized wiring."""
    from dataclasses import replace

    out_dir = Path(out_dir) if out_dir is not None else None
    corpora0 = load_two_class_corpora(config, seeds[0])
    extractor = extractor or grid_extractor(config, corpora0)
    rows = []
    for seed in seeds:
        corpora = corpora0 if seed == seeds[0] else load_two_class_corpora(config, seed)
        prep = prepare_two_class(config, seed, corpora)
        init = wiring_init(prep, True, True)
        for k in ks:
            cfg_k = replace(config, shared_resblocks=k)
            run_dir = out_dir / f"seed{seed}" / f"k{k}" if out_dir else None
            _, report = run_i2i_stage(
                init, _i2i_datasets(corpora, cfg_k), cfg_k, seed,
                out_dir=run_dir, extractor=extractor,
            )
            row = {
                "shared_resblocks": k,
                "seed": seed,
                "mkid_x100": report.mkid * 100.0,
                "mfid": report.mfid,
            }
            rows.append(row)
            if log:
                log(
                    f"k={k} seed={seed} "
                    f"mKIDx100={row['mkid_x100']:.2f} mFID={row['mfid']:.2f}"
                )
    return rows


def run_aux_comparison(
    config: StageConfig,
    seeds: tuple[int, ...],
    out_dir=None,
    log=None,
) -> list[dict]:
    """Matched aux-on/aux-off runs plus the per-ResBlock WF probe.

    Both arms of one seed start from identical checkpoints and see identical
    batches; only the auxiliary generator differs.  Fisher is estimated once
    per seed at the shared initialization.
    """
    from dataclasses import replace

    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for seed in seeds:
        corpora = load_two_class_corpora(config, seed)
        prep = prepare_two_class(config, seed, corpora)
        init = wiring_init(prep, True, True)
        init_system = build_system(config, init, seed)
        ds = init_system.directions["1to2"]
        fisher = fisher_diagonal(ds.generator, ds.discriminator, config, seed)
        ckpt_before = system_checkpoint(init_system, seed)
        wf = {}
        for label, aux in (("with_aux", True), ("without_aux", False)):
            cfg = replace(config, aux_generator=aux)
            run_dir = out_dir / f"seed{seed}" / label if out_dir else None
            ckpt_after, _ = run_i2i_stage(
                init, _i2i_datasets(corpora, cfg), cfg, seed, out_dir=run_dir
            )
            wf[label] = weight_fluctuation_probe(
                ckpt_before, ckpt_after, fisher, net_name="generator_1to2"
            )
        for group in sorted(wf["with_aux"], key=lambda g: int(g.split("_")[1])):
            row = {
                "seed": seed,
                "resblock": group,
                "wf_with_aux": wf["with_aux"][group],
                "wf_without_aux": wf["without_aux"][group],
            }
            rows.append(row)
            if log:
                log(
                    f"seed={seed} {group} WF(aux)={row['wf_with_aux']:.4g} "
                    f"WF(no aux)={row['wf_without_aux']:.4g}"
                )
        if out_dir is not None:
            plot_weight_fluctuation(
                wf, out_dir / f"seed{seed}" / "weight_fluctuation.png"
            )
    return rows


def median(values) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    return float(
        ordered[mid] if n % 2 else (ordered[mid - 1] + ordered[mid]) / 2.0
    )


def summarize_grid(rows: list[dict], key: str) -> dict[str, dict[str, float]]:
    """Median mFID/mKID per wiring (or per k) across seeds."""
    out: dict[str, dict[str, float]] = {}
    for value in sorted({str(r[key]) for r in rows}):
        group = [r for r in rows if str(r[key]) == value]
        out[value] = {
            "mfid_median": median([r["mfid"] for r in group]),
            "mkid_x100_median": median([r["mkid_x100"] for r in group]),
        }
    return out
