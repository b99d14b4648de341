"""Command-line orchestration of the pipeline stages and evaluation.

Subcommands mirror the stages: ``base``, ``pretrain``, ``selfinit``,
``train``, ``eval``, ``ablate``.  Every run takes a flat key=value config
file plus ``--set key=value`` overrides, writes its artifacts under
``--out-dir``, and leaves a manifest (config snapshot + content hashes of
input checkpoints) sufficient to reproduce the run bit-exactly on the same
platform.  Failures print one machine-readable ``error <CODE>: <text>`` line
on stderr and exit nonzero.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from . import ablate
from .checkpoint import file_hash, load_checkpoint
from .config import StageConfig, load_config
from .errors import ConfigurationError, I2IKitError
from .evaluate import evaluate_system
from .i2i import ConditionalInit, TwoClassInit, load_i2i_system, run_i2i_stage
from .metrics import build_feature_extractor, render_table
from .nets import build_networks
from .pretrain import (
    finetune_conditional,
    finetune_source_target,
    train_base_gan,
)
from .seeding import derive_seed
from .selfinit import self_initialize_adaptor

EXIT_CODES = {
    "E_CONFIG": 2,
    "E_USAGE": 2,
    "E_DATA": 3,
    "E_SHAPE": 4,
    "E_NUMERIC": 5,
    "E_CHECKPOINT": 6,
    "E_SEALED": 7,
    "E_INTERNAL": 1,
}


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--out-dir", default=None, help="artifact directory")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    sub.add_argument(
        "--dry-run",
        action="store_true",
        help="validate config and inputs, write nothing",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="i2ikit",
        description="desk-scale transfer pipeline for unpaired image translation",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("base", help="train the starting GAN from scratch")
    _add_common(p)
    p.set_defaults(handler=cmd_base)

    p = subs.add_parser("pretrain", help="finetune the base GAN per domain/class")
    _add_common(p)
    p.set_defaults(handler=cmd_pretrain)

    p = subs.add_parser("selfinit", help="data-free adaptor alignment")
    _add_common(p)
    p.set_defaults(handler=cmd_selfinit)

    p = subs.add_parser("train", help="train the translation system")
    _add_common(p)
    p.add_argument(
        "--no-aux-generator",
        action="store_true",
        help="disable the auxiliary generator",
    )
    p.set_defaults(handler=cmd_train)

    p = subs.add_parser("eval", help="score a trained translation system")
    _add_common(p)
    p.add_argument("--checkpoint", help="i2i checkpoint (overrides config key)")
    p.set_defaults(handler=cmd_eval)

    p = subs.add_parser("ablate", help="run an ablation grid")
    _add_common(p)
    p.add_argument(
        "--grid",
        choices=("init", "layers", "aux"),
        default="init",
        help="init wiring table, shared-layer sweep, or aux-generator WF probe",
    )
    p.set_defaults(handler=cmd_ablate)
    return parser


def _load_run_config(args) -> StageConfig:
    config = load_config(args.config) if args.config else StageConfig()
    if args.overrides:
        pairs = {}
        for item in args.overrides:
            if "=" not in item:
                raise ConfigurationError(f"--set expects KEY=VALUE, got '{item}'")
            key, value = item.split("=", 1)
            pairs[key.strip()] = value
        config = config.with_overrides(pairs)
    if args.seed is not None:
        config = config.with_overrides({"seed": str(args.seed)})
    if getattr(args, "no_aux_generator", False):
        config = config.with_overrides({"aux_generator": "false"})
    return config


def _out_dir(args) -> Path:
    return Path(args.out_dir) if args.out_dir else Path("runs") / args.command


def _checkpoint_inputs(config: StageConfig, keys: list[str]) -> dict[str, Path]:
    """Resolve required / optional checkpoint paths from config keys."""
    out = {}
    for key in keys:
        path = getattr(config, key)
        if path:
            out[key] = Path(path)
    return out


def _validate_inputs(paths: dict[str, Path], required: tuple[str, ...] = ()):
    loaded = {}
    for key in required:
        if key not in paths:
            raise ConfigurationError(f"config key '{key}' is required by this command")
    for key, path in paths.items():
        loaded[key] = load_checkpoint(path)
    return loaded


def _write_manifest(out_dir: Path, command: str, config: StageConfig,
                    inputs: dict[str, Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": config.seed,
        "config": config.to_dict(),
        "inputs": {key: file_hash(path) for key, path in sorted(inputs.items())},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                      sort_keys=True))


def _corpora(config: StageConfig):
    return ablate.load_two_class_corpora(config, config.seed)


def cmd_base(args) -> int:
    config = _load_run_config(args)
    if args.dry_run:
        print("dry-run ok: base")
        return 0
    out_dir = _out_dir(args)
    corpora = _corpora(config)
    _write_manifest(out_dir, "base", config, {})
    ckpt = train_base_gan(corpora["train"], config, config.seed, out_dir=out_dir)
    print(f"base checkpoint at step {ckpt.step} -> {out_dir / 'base.ckpt.npz'}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_run_config(args)
    paths = _checkpoint_inputs(config, ["base_checkpoint"])
    loaded = _validate_inputs(paths, required=("base_checkpoint",))
    if args.dry_run:
        print("dry-run ok: pretrain")
        return 0
    out_dir = _out_dir(args)
    corpora = _corpora(config)
    _write_manifest(out_dir, "pretrain", config, paths)
    base = loaded["base_checkpoint"]
    if config.conditional:
        finetune_conditional(base, corpora["train"], config, config.seed,
                             out_dir=out_dir)
        print(f"conditional pretrain -> {out_dir / 'pretrain_conditional.ckpt.npz'}")
    else:
        finetune_source_target(
            base, corpora["source_train"], corpora["target_train"], config,
            config.seed, out_dir=out_dir,
        )
        print(f"domain pretrains -> {out_dir}/pretrain_{{source,target}}.ckpt.npz")
    return 0


def cmd_selfinit(args) -> int:
    config = _load_run_config(args)
    paths = _checkpoint_inputs(
        config, ["generator_checkpoint", "discriminator_checkpoint"]
    )
    loaded = _validate_inputs(
        paths, required=("generator_checkpoint", "discriminator_checkpoint")
    )
    if args.dry_run:
        print("dry-run ok: selfinit")
        return 0
    out_dir = _out_dir(args)
    _write_manifest(out_dir, "selfinit", config, paths)
    spec = config.arch_spec()
    adaptor = build_networks(spec, derive_seed(config.seed, "adaptor"))["adaptor"]
    ckpt = self_initialize_adaptor(
        loaded["generator_checkpoint"],
        loaded["discriminator_checkpoint"],
        adaptor,
        config.selfinit_steps,
        config,
        config.seed,
        out_dir=out_dir,
    )
    print(
        "selfinit alignment loss "
        f"{ckpt.extra['initial_alignment_loss']:.4f} -> "
        f"{ckpt.extra['final_alignment_loss']:.4f}; "
        f"checkpoint -> {out_dir / 'selfinit.ckpt.npz'}"
    )
    return 0


def cmd_train(args) -> int:
    config = _load_run_config(args)
    if config.conditional:
        keys = ["gan_checkpoint", "adaptor_checkpoint"]
    else:
        keys = [
            "source_checkpoint",
            "target_checkpoint",
            "adaptor_1to2_checkpoint",
            "adaptor_2to1_checkpoint",
        ]
    paths = _checkpoint_inputs(config, keys)
    loaded = _validate_inputs(paths)
    if args.dry_run:
        print("dry-run ok: train")
        return 0
    out_dir = _out_dir(args)
    corpora = _corpora(config)
    _write_manifest(out_dir, "train", config, paths)
    if config.conditional:
        init = ConditionalInit(
            gan=loaded.get("gan_checkpoint"),
            adaptor=loaded.get("adaptor_checkpoint"),
        )
        datasets = {"all": corpora["train"]}
    else:
        init = TwoClassInit(
            source_gan=loaded.get("source_checkpoint"),
            target_gan=loaded.get("target_checkpoint"),
            adaptor_1to2=loaded.get("adaptor_1to2_checkpoint"),
            adaptor_2to1=loaded.get("adaptor_2to1_checkpoint"),
        )
        datasets = {
            "source": corpora["source_train"],
            "target": corpora["target_train"],
        }
    extractor = None
    if config.snapshot_every > 0:
        extractor = ablate.grid_extractor(config, corpora)
    ckpt, report = run_i2i_stage(
        init, datasets, config, config.seed, out_dir=out_dir, extractor=extractor
    )
    print(f"i2i checkpoint at step {ckpt.step} -> {out_dir / 'i2i.ckpt.npz'}")
    if report is not None:
        print(f"final mFID={report.mfid:.2f} mKIDx100={report.mkid * 100:.2f}")
    return 0


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    if args.checkpoint:
        config = config.with_overrides({"i2i_checkpoint": args.checkpoint})
    paths = _checkpoint_inputs(config, ["i2i_checkpoint"])
    loaded = _validate_inputs(paths, required=("i2i_checkpoint",))
    if args.dry_run:
        print("dry-run ok: eval")
        return 0
    out_dir = _out_dir(args)
    corpora = _corpora(config)
    _write_manifest(out_dir, "eval", config, paths)
    system = load_i2i_system(loaded["i2i_checkpoint"], config)
    extractor = build_feature_extractor(
        corpora["train"],
        steps=config.extractor_steps,
        seed=derive_seed(config.seed, "extractor"),
    )
    datasets = (
        {"all": corpora["train"]}
        if config.conditional
        else {
            "source": corpora["source_train"],
            "target": corpora["target_train"],
        }
    )
    report = evaluate_system(
        system, datasets, extractor, config, config.seed,
        rcfc_sets=(corpora["train"], corpora["test"]),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    rows = [
        [r.class_label, r.fid, None if r.kid is None else r.kid * 100,
         r.num_real, r.num_fake, r.excluded]
        for r in report.per_class
    ]
    table = render_table(
        ["class", "FID", "KIDx100", "n_real", "n_fake", "excluded"],
        rows,
        title=f"note: {report.note}\nextractor={report.extractor_hash}",
    )
    summary = render_table(
        ["mKIDx100", "mFID", "RC", "FC"],
        [[report.mkid * 100, report.mfid, report.rc, report.fc]],
    )
    (out_dir / "report.txt").write_text(table + "\n\n" + summary + "\n")
    print(summary)
    return 0


def cmd_ablate(args) -> int:
    config = _load_run_config(args)
    if args.dry_run:
        print(f"dry-run ok: ablate --grid {args.grid}")
        return 0
    out_dir = _out_dir(args)
    _write_manifest(out_dir, f"ablate-{args.grid}", config, {})
    seeds = tuple(config.ablate_seeds)
    if args.grid == "init":
        rows = ablate.run_init_grid(config, seeds, out_dir=out_dir, log=print)
        medians = ablate.summarize_grid(rows, "wiring")
        table_rows = [
            [
                ablate.INIT_WIRINGS[w][0],
                ablate.INIT_WIRINGS[w][1],
                medians[w]["mkid_x100_median"],
                medians[w]["mfid_median"],
            ]
            for w in ablate.INIT_WIRINGS
        ]
        table = render_table(
            ["source-target init", "self-init", "mKIDx100", "mFID"],
            table_rows,
            title=f"initialization grid (median over seeds {list(seeds)})",
        )
    elif args.grid == "layers":
        rows = ablate.run_sharing_sweep(config, seeds, out_dir=out_dir, log=print)
        medians = ablate.summarize_grid(rows, "shared_resblocks")
        table_rows = [
            [k, medians[k]["mkid_x100_median"], medians[k]["mfid_median"]]
            for k in sorted(medians, key=int)
        ]
        table = render_table(
            ["#ResBlock", "mKIDx100", "mFID"],
            table_rows,
            title=f"shared-layer sweep (median over seeds {list(seeds)})",
        )
    else:
        rows = ablate.run_aux_comparison(config, seeds, out_dir=out_dir, log=print)
        table = render_table(
            ["seed", "resblock", "WF with aux", "WF without aux"],
            [[r["seed"], r["resblock"], r["wf_with_aux"], r["wf_without_aux"]]
             for r in rows],
            title="auxiliary-generator weight fluctuation",
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{args.grid}_rows.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    (out_dir / f"{args.grid}_table.txt").write_text(table + "\n")
    print(table)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except I2IKitError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.code, 1)


if __name__ == "__main__":
    sys.exit(main())
