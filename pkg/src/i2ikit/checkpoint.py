"""Single-file checkpoint archive shared by all pipeline stages.

An archive is an uncompressed npz holding one float array per state-dict
entry (keyed ``net::<netname>::<param>``), optional Adam moments (keyed
``opt::<netname>::<param>::<slot>``), and a ``__meta__`` entry carrying the
JSON metadata record {stage, step, seed, spec, sharing, extra}.  Entry order
and JSON form are canonicalized so save -> load -> save reproduces identical
bytes.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigurationError
from .nets import ArchitectureSpec

STAGES = ("base", "pretrain", "selfinit", "i2i")
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """In-memory checkpoint: metadata plus per-net numpy state dicts."""

    stage: str
    step: int
    seed: int
    spec: ArchitectureSpec
    nets: dict[str, dict[str, np.ndarray]]
    opt: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    sharing: dict | None = None
    extra: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": FORMAT_VERSION,
            "stage": self.stage,
            "step": self.step,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "nets": {name: sorted(sd) for name, sd in sorted(self.nets.items())},
            "sharing": self.sharing,
            "extra": self.extra,
        }
        entries = {"__meta__": _json_bytes(meta)}
        for net_name, sd in sorted(self.nets.items()):
            for key, arr in sorted(sd.items()):
                entries[f"net::{net_name}::{key}"] = arr
        for net_name, sd in sorted(self.opt.items()):
            for key, arr in sorted(sd.items()):
                entries[f"opt::{net_name}::{key}"] = arr
        with open(path, "wb") as fh:
            np.savez(fh, **entries)
        return path

    def state_dict_for(self, net_name: str) -> dict[str, torch.Tensor]:
        if net_name not in self.nets:
            raise CheckpointError(
                f"checkpoint has no net '{net_name}' (has {sorted(self.nets)})"
            )
        return {k: torch.from_numpy(v.copy()) for k, v in self.nets[net_name].items()}

    def load_into(self, net_name: str, module: nn.Module) -> None:
        """Copy the named net's parameters into `module`, validating names/shapes."""
        sd = self.state_dict_for(net_name)
        own = module.state_dict()
        if set(sd) != set(own):
            missing = sorted(set(own) - set(sd))
            extra = sorted(set(sd) - set(own))
            raise CheckpointError(
                f"checkpoint net '{net_name}' does not match target module "
                f"(missing={missing[:3]}, extra={extra[:3]})"
            )
        for key in own:
            if tuple(sd[key].shape) != tuple(own[key].shape):
                raise CheckpointError(
                    f"checkpoint net '{net_name}' param '{key}': shape "
                    f"{tuple(sd[key].shape)} != {tuple(own[key].shape)}"
                )
        module.load_state_dict(sd)


def _json_bytes(obj) -> np.ndarray:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode(), dtype=np.uint8)


def state_dict_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def optimizer_arrays(
    optimizer: torch.optim.Optimizer, nets: dict[str, nn.Module]
) -> dict[str, np.ndarray]:
    """Flatten Adam state into arrays keyed by the owning parameter's name.

    Shared parameters are recorded once, under the first (net-name-sorted)
    name that resolves to the same storage.
    """
    names: dict[int, str] = {}
    for net_name in sorted(nets):
        for pname, p in nets[net_name].named_parameters():
            names.setdefault(id(p), f"{net_name}::{pname}")
    out: dict[str, np.ndarray] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            base = names.get(id(p))
            if base is None:
                raise CheckpointError("optimizer holds a parameter not in any net")
            for slot, value in state.items():
                arr = (
                    value.detach().cpu().numpy().copy()
                    if torch.is_tensor(value)
                    else np.asarray(value)
                )
                out[f"{base}::{slot}"] = arr
    return out


def restore_optimizer(
    optimizer: torch.optim.Optimizer,
    arrays: dict[str, np.ndarray],
    nets: dict[str, nn.Module],
) -> None:
    params: dict[str, torch.Tensor] = {}
    for net_name in sorted(nets):
        for pname, p in nets[net_name].named_parameters():
            params.setdefault(f"{net_name}::{pname}", p)
    slots: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        base, slot = key.rsplit("::", 1)
        slots.setdefault(base, {})[slot] = arr
    for base, state in slots.items():
        if base not in params:
            raise CheckpointError(f"optimizer state for unknown parameter '{base}'")
        p = params[base]
        optimizer.state[p] = {
            slot: torch.from_numpy(arr.copy()) for slot, arr in state.items()
        }


def make_checkpoint(
    stage: str,
    step: int,
    seed: int,
    spec: ArchitectureSpec,
    nets: dict[str, nn.Module],
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    sharing=None,
    extra: dict | None = None,
) -> Checkpoint:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage '{stage}', expected one of {STAGES}")
    opt = {}
    if optimizers:
        for opt_name, optimizer in sorted(optimizers.items()):
            opt[opt_name] = optimizer_arrays(optimizer, nets)
    return Checkpoint(
        stage=stage,
        step=step,
        seed=seed,
        spec=spec,
        nets={name: state_dict_arrays(m) for name, m in nets.items()},
        opt=opt,
        sharing=sharing.to_dict() if hasattr(sharing, "to_dict") else sharing,
        extra=extra or {},
    )


def save_checkpoint(path, *args, **kwargs) -> Checkpoint:
    ckpt = make_checkpoint(*args, **kwargs)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as zf:
            entries = {k: zf[k] for k in zf.files}
    except Exception as exc:  # zipfile/format errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in entries:
        raise CheckpointError(f"checkpoint {path} has no metadata entry")
    meta = json.loads(entries.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    nets: dict[str, dict[str, np.ndarray]] = {n: {} for n in meta["nets"]}
    opt: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in entries.items():
        kind, rest = key.split("::", 1)
        if kind == "net":
            net_name, pname = rest.split("::", 1)
            nets[net_name][pname] = arr
        elif kind == "opt":
            opt_name, pkey = rest.split("::", 1)
            opt.setdefault(opt_name, {})[pkey] = arr
        else:
            raise CheckpointError(f"unknown checkpoint entry '{key}' in {path}")
    for net_name, expected in meta["nets"].items():
        if sorted(nets[net_name]) != expected:
            raise CheckpointError(f"checkpoint {path}: net '{net_name}' entries differ "
                                  "from metadata listing")
    return Checkpoint(
        stage=meta["stage"],
        step=meta["step"],
        seed=meta["seed"],
        spec=ArchitectureSpec.from_dict(meta["spec"]),
        nets=nets,
        opt=opt,
        sharing=meta["sharing"],
        extra=meta["extra"],
    )


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def require_stage(ckpt: Checkpoint, stage: str | tuple[str, ...], what: str) -> None:
    """Enforce a stage-tag contract on a consumed checkpoint."""
    stages = (stage,) if isinstance(stage, str) else stage
    if ckpt.stage not in stages:
        raise ConfigurationError(
            f"{what} must come from stage {' or '.join(stages)}, got '{ckpt.stage}'"
        )
