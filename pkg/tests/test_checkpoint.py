import pytest
import torch

from i2ikit.checkpoint import (
    file_hash,
    load_checkpoint,
    make_checkpoint,
    require_stage,
    restore_optimizer,
    save_checkpoint,
)
from i2ikit.errors import CheckpointError, ConfigurationError
from i2ikit.nets import ArchitectureSpec, build_networks


def _gan_pair(spec, seed=0):
    nets = build_networks(spec, seed)
    return {"generator": nets["generator"], "discriminator": nets["discriminator"]}


def test_save_load_save_bit_exact(tmp_path, micro_spec):
    nets = _gan_pair(micro_spec)
    opt = torch.optim.Adam(nets["generator"].parameters(), lr=1e-3)
    img, _ = nets["generator"](torch.randn(2, micro_spec.latent_dim))
    img.mean().backward()
    opt.step()
    path1 = tmp_path / "a.ckpt.npz"
    save_checkpoint(
        path1, "base", 5, 42, micro_spec, nets, {"opt_g": opt},
        extra={"note": 1.5},
    )
    loaded = load_checkpoint(path1)
    path2 = tmp_path / "b.ckpt.npz"
    loaded.save(path2)
    assert path1.read_bytes() == path2.read_bytes()


def test_metadata_round_trip(tmp_path, micro_spec):
    nets = _gan_pair(micro_spec)
    path = tmp_path / "c.ckpt.npz"
    save_checkpoint(
        path, "pretrain", 12, 3, micro_spec, nets,
        sharing={"1to2": {"num_shared_resblocks": 2, "shared_param_names": []}},
        extra={"initial_alignment_loss": 0.5},
    )
    ckpt = load_checkpoint(path)
    assert ckpt.stage == "pretrain"
    assert ckpt.step == 12
    assert ckpt.seed == 3
    assert ckpt.spec == micro_spec
    assert ckpt.sharing["1to2"]["num_shared_resblocks"] == 2
    assert ckpt.extra["initial_alignment_loss"] == 0.5


def test_load_into_restores_parameters(micro_spec):
    nets = _gan_pair(micro_spec, seed=0)
    ckpt = make_checkpoint("base", 0, 0, micro_spec, nets)
    fresh = _gan_pair(micro_spec, seed=99)
    ckpt.load_into("generator", fresh["generator"])
    for (_, a), (_, b) in zip(
        sorted(nets["generator"].state_dict().items()),
        sorted(fresh["generator"].state_dict().items()),
    ):
        assert torch.equal(a, b)


def test_load_into_rejects_mismatched_module(micro_spec):
    nets = _gan_pair(micro_spec)
    ckpt = make_checkpoint("base", 0, 0, micro_spec, nets)
    other_spec = ArchitectureSpec(
        image_size=16, channels_base=8, num_resblocks=2, latent_dim=4
    )
    other = build_networks(other_spec, 0)["generator"]
    with pytest.raises(CheckpointError):
        ckpt.load_into("generator", other)
    with pytest.raises(CheckpointError):
        ckpt.load_into("missing_net", other)


def test_optimizer_state_round_trip(micro_spec):
    nets = _gan_pair(micro_spec)
    gen = nets["generator"]
    opt = torch.optim.Adam(gen.parameters(), lr=1e-3, betas=(0.0, 0.99))
    for _ in range(3):
        img, _ = gen(torch.randn(2, micro_spec.latent_dim))
        opt.zero_grad()
        img.abs().mean().backward()
        opt.step()
    ckpt = make_checkpoint("base", 3, 0, micro_spec, nets, {"opt_g": opt})
    opt2 = torch.optim.Adam(gen.parameters(), lr=1e-3, betas=(0.0, 0.99))
    restore_optimizer(opt2, ckpt.opt["opt_g"], nets)
    for p in gen.parameters():
        s1, s2 = opt.state[p], opt2.state[p]
        assert torch.equal(s1["exp_avg"], s2["exp_avg"])
        assert torch.equal(s1["exp_avg_sq"], s2["exp_avg_sq"])
        assert float(s1["step"]) == float(s2["step"])


def test_missing_file_and_bad_stage(tmp_path, micro_spec):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.npz")
    nets = _gan_pair(micro_spec)
    with pytest.raises(CheckpointError):
        make_checkpoint("warmup", 0, 0, micro_spec, nets)
    ckpt = make_checkpoint("base", 0, 0, micro_spec, nets)
    with pytest.raises(ConfigurationError):
        require_stage(ckpt, "selfinit", "adaptor checkpoint")


def test_file_hash_stable(tmp_path, micro_spec):
    nets = _gan_pair(micro_spec)
    path = tmp_path / "h.ckpt.npz"
    save_checkpoint(path, "base", 0, 0, micro_spec, nets)
    assert file_hash(path) == file_hash(path)
