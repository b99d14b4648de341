import numpy as np
import pytest
import torch

from i2ikit.errors import ConfigurationError, ShapeError, UsageError
from i2ikit.nets import (
    ArchitectureSpec,
    Discriminator,
    build_networks,
    clone_network,
    default_injection_weights,
    parameter_hash,
    share_deep_layers,
)

from conftest import numpy_avgpool2, numpy_conv1x1, numpy_conv2d, state_bytes

DEFAULT = ArchitectureSpec()


def test_default_spec_shape_contract():
    nets = build_networks(DEFAULT, seed=0)
    z = torch.randn(3, 128)
    img, pyramid = nets["generator"](z)
    assert img.shape == (3, 3, 32, 32)
    assert img.min() >= -1.0 and img.max() <= 1.0
    assert set(pyramid) == set(DEFAULT.pyramid_levels)


def test_pyramid_shape_law_default_spec():
    # exact doubling/halving shapes for the stock 32px architecture
    expected_gen = {0: (64, 2, 2), 1: (64, 4, 4), 2: (32, 8, 8), 3: (16, 16, 16)}
    expected_disc = {0: (16, 16, 16), 1: (32, 8, 8), 2: (64, 4, 4), 3: (64, 2, 2)}
    for level in DEFAULT.pyramid_levels:
        assert DEFAULT.generator_site_shape(level) == expected_gen[level]
        assert DEFAULT.encoder_tap_shape(level) == expected_disc[level]


def test_discriminator_pyramid_sizes_halve():
    nets = build_networks(DEFAULT, seed=1)
    x = torch.randn(16, 3, 32, 32).clamp(-1, 1)
    logit, pyramid = nets["discriminator"](x)
    assert logit.shape == (16,)
    sizes = [pyramid[level].shape[-1] for level in sorted(pyramid)]
    assert sizes == [16, 8, 4, 2]


def test_build_determinism_bit_identical():
    a = build_networks(DEFAULT, seed=7)
    b = build_networks(DEFAULT, seed=7)
    for role in ("generator", "discriminator", "adaptor"):
        assert state_bytes(a[role]) == state_bytes(b[role])
    c = build_networks(DEFAULT, seed=8)
    assert state_bytes(a["generator"]) != state_bytes(c["generator"])


def test_forward_determinism():
    nets = build_networks(DEFAULT, seed=3)
    z = torch.randn(2, 128)
    x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
    img1, pyr1 = nets["generator"](z)
    img2, pyr2 = nets["generator"](z)
    assert torch.equal(img1, img2)
    logit1, _ = nets["discriminator"](x)
    logit2, _ = nets["discriminator"](x)
    assert torch.equal(logit1, logit2)
    assert all(torch.equal(pyr1[level], pyr2[level]) for level in pyr1)


def test_conditional_adaptor_parameter_count_matches_conv_arithmetic():
    # four sub-adaptors; the three shallower ones are ReLU + 3x3 + 3x3 + 1x1
    # convs, the deepest-encoder one is two 3x3 convs; all stride 1.
    spec = ArchitectureSpec(num_classes=149)
    adaptor = build_networks(spec, seed=0)["adaptor"]
    channels = [spec.encoder_tap_shape(j)[0] for j in range(4)]
    assert channels == [16, 32, 64, 64]
    expected = 0
    for j, c in enumerate(channels):
        conv3 = 9 * c * c + c
        conv1 = c * c + c
        expected += 2 * conv3 + (0 if j == 3 else conv1)
    assert sum(p.numel() for p in adaptor.parameters()) == expected


def test_unconditional_adaptor_is_single_conv_per_level():
    adaptor = build_networks(DEFAULT, seed=0)["adaptor"]
    channels = [DEFAULT.encoder_tap_shape(j)[0] for j in range(4)]
    expected = sum(9 * c * c + c for c in channels)
    assert sum(p.numel() for p in adaptor.parameters()) == expected


def test_discriminator_hand_convolution_trace():
    # 1-ResBlock spec on a 4x4 constant image, checked against an
    # independent numpy convolution of the same weights.
    spec = ArchitectureSpec(image_size=4, channels_base=8, num_resblocks=1,
                            latent_dim=4)
    disc = Discriminator(spec)
    with torch.no_grad():
        disc.in_conv.weight.fill_(0.01)
        disc.in_conv.bias.fill_(0.0)
        block = disc.blocks[0]
        block.conv1.weight.fill_(0.02)
        block.conv1.bias.fill_(0.0)
        block.conv2.weight.fill_(-0.015)
        block.conv2.bias.fill_(0.01)
        block.skip.weight.fill_(0.03)
        block.skip.bias.fill_(-0.02)
        disc.head.weight.fill_(0.05)
        disc.head.bias.fill_(0.1)
    x = torch.full((1, 3, 4, 4), 0.5)
    logit, pyramid = disc(x)

    xin = np.full((3, 4, 4), 0.5)
    f = numpy_conv2d(xin, disc.in_conv.weight.detach().numpy().astype(np.float64),
                     disc.in_conv.bias.detach().numpy().astype(np.float64))
    h = numpy_conv2d(np.maximum(f, 0), block.conv1.weight.detach().numpy().astype(np.float64),
                     block.conv1.bias.detach().numpy().astype(np.float64))
    h = numpy_conv2d(np.maximum(h, 0), block.conv2.weight.detach().numpy().astype(np.float64),
                     block.conv2.bias.detach().numpy().astype(np.float64))
    tap = numpy_avgpool2(h) + numpy_conv1x1(
        numpy_avgpool2(f), block.skip.weight.detach().numpy().astype(np.float64),
        block.skip.bias.detach().numpy().astype(np.float64),
    )
    pooled = np.maximum(tap, 0).sum(axis=(1, 2))
    expected_logit = (
        disc.head.weight.detach().numpy().astype(np.float64)[0] @ pooled
        + disc.head.bias.detach().numpy().astype(np.float64)[0]
    )
    np.testing.assert_allclose(
        pyramid[0][0].detach().numpy(), tap, rtol=1e-5, atol=1e-6
    )
    np.testing.assert_allclose(float(logit[0]), expected_logit, rtol=1e-5)


def _zero_pyramid(spec, batch):
    return {
        level: torch.zeros((batch, *spec.generator_site_shape(level)))
        for level in spec.pyramid_levels
    }


def _random_pyramid(spec, batch, seed):
    gen = torch.Generator().manual_seed(seed)
    return {
        level: torch.randn((batch, *spec.generator_site_shape(level)), generator=gen)
        for level in spec.pyramid_levels
    }


def test_injection_additive_identity():
    nets = build_networks(DEFAULT, seed=5)
    z = torch.randn(2, 128)
    plain, _ = nets["generator"](z)
    zeros, _ = nets["generator"](
        z, adapted=_zero_pyramid(DEFAULT, 2), weights=[0.7, 1.3, 0.1, 2.0]
    )
    assert torch.equal(plain, zeros)


def test_injection_zero_weights_ignores_features():
    nets = build_networks(DEFAULT, seed=5)
    z = torch.randn(2, 128)
    plain, _ = nets["generator"](z)
    injected, _ = nets["generator"](
        z, adapted=_random_pyramid(DEFAULT, 2, 9), weights=[0.0] * 4
    )
    assert torch.equal(plain, injected)


def test_default_injection_weights_rule():
    # ones everywhere except the highest-resolution level
    assert default_injection_weights(DEFAULT) == [1.0, 1.0, 1.0, 0.1]
    # on an architecture whose top adaptor level is the 32x32 feature, that
    # level carries the 0.1
    spec64 = ArchitectureSpec(image_size=64)
    assert spec64.generator_site_shape(3)[1] == 32
    assert default_injection_weights(spec64)[3] == 0.1


def test_injection_linearity_at_first_site():
    nets = build_networks(DEFAULT, seed=6)
    z = torch.randn(2, 128)
    weights = [0.5, 1.0, 1.0, 0.1]
    p1 = _random_pyramid(DEFAULT, 2, 1)
    p2 = _random_pyramid(DEFAULT, 2, 2)
    both = {level: p1[level] + p2[level] for level in p1}
    _, pyr_sum = nets["generator"](z, adapted=both, weights=weights)
    _, pyr_p1 = nets["generator"](z, adapted=p1, weights=weights)
    torch.testing.assert_close(
        pyr_sum[0], pyr_p1[0] + weights[0] * p2[0], rtol=1e-6, atol=1e-6
    )


def test_share_deep_layers_zero_is_isolation(micro_spec):
    g = build_networks(micro_spec, seed=0)["generator"]
    aux = clone_network(g, role="aux_generator")
    plan = share_deep_layers(g, aux, 0)
    assert plan.shared_param_names == ()
    before = state_bytes(g)
    opt = torch.optim.Adam(aux.parameters(), lr=0.1)
    img, _ = aux(torch.randn(2, micro_spec.latent_dim))
    img.sum().backward()
    opt.step()
    assert state_bytes(g) == before


def test_share_all_blocks_parameter_accounting(micro_spec):
    g = build_networks(micro_spec, seed=0)["generator"]
    aux = clone_network(g, role="aux_generator")
    n = micro_spec.num_resblocks
    plan = share_deep_layers(g, aux, n)
    trunk_names = {
        f"blocks.{i}.{name}"
        for i in range(n)
        for name, _ in g.blocks[i].named_parameters()
    }
    assert set(plan.shared_param_names) == trunk_names
    distinct = {id(p) for p in g.parameters()} | {id(p) for p in aux.parameters()}
    g_total = sum(p.numel() for p in g.parameters())
    aux_non_trunk = sum(
        p.numel()
        for name, p in aux.named_parameters()
        if not name.startswith("blocks.")
    )
    total = sum(
        p.numel()
        for p in {id(q): q for q in list(g.parameters()) + list(aux.parameters())}.values()
    )
    assert len(distinct) == len(list(g.parameters())) + sum(
        1 for name, _ in aux.named_parameters() if not name.startswith("blocks.")
    )
    assert total == g_total + aux_non_trunk


def test_shared_gradient_step_moves_both(micro_spec):
    g = build_networks(micro_spec, seed=0)["generator"]
    aux = clone_network(g, role="aux_generator")
    share_deep_layers(g, aux, 1)
    shared_before = g.blocks[0].conv1.weight.clone()
    stem_before = g.stem.weight.clone()
    opt = torch.optim.Adam(aux.parameters(), lr=0.05)
    for _ in range(10):
        img, _ = aux(torch.randn(2, micro_spec.latent_dim))
        opt.zero_grad()
        img.abs().mean().backward()
        opt.step()
    assert not torch.equal(g.blocks[0].conv1.weight, shared_before)
    assert torch.equal(g.stem.weight, stem_before)
    assert g.blocks[0] is aux.blocks[0]


def test_share_deep_layers_range_check(micro_spec):
    g = build_networks(micro_spec, seed=0)["generator"]
    aux = clone_network(g)
    with pytest.raises(ConfigurationError):
        share_deep_layers(g, aux, micro_spec.num_resblocks + 1)


def test_invalid_spec_names_invariant():
    with pytest.raises(ConfigurationError, match="power-of-two"):
        ArchitectureSpec(image_size=20)
    with pytest.raises(ConfigurationError):
        ArchitectureSpec(num_resblocks=0)


def test_conditional_discriminator_requires_labels():
    spec = ArchitectureSpec(num_classes=3)
    nets = build_networks(spec, seed=0)
    x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
    with pytest.raises(UsageError):
        nets["discriminator"](x)
    with pytest.raises(UsageError):
        nets["generator"](torch.randn(2, 128))


def test_adapted_pyramid_shape_error_names_level():
    nets = build_networks(DEFAULT, seed=0)
    z = torch.randn(2, 128)
    bad = _zero_pyramid(DEFAULT, 2)
    bad[2] = torch.zeros(2, 32, 4, 4)  # wrong spatial size at level 2
    with pytest.raises(ShapeError, match="level 2"):
        nets["generator"](z, adapted=bad)


def test_encoder_discriminator_identical_parameter_shapes():
    nets = build_networks(DEFAULT, seed=0)
    encoder = clone_network(nets["discriminator"], role="encoder")
    d_shapes = {k: tuple(v.shape) for k, v in nets["discriminator"].state_dict().items()}
    e_shapes = {k: tuple(v.shape) for k, v in encoder.state_dict().items()}
    assert d_shapes == e_shapes
    assert encoder.role == "encoder"


def test_parameter_hash_tracks_content(micro_spec):
    g = build_networks(micro_spec, seed=0)["generator"]
    h1 = parameter_hash(g)
    assert h1 == parameter_hash(g)
    with torch.no_grad():
        g.stem.weight += 1.0
    assert parameter_hash(g) != h1
