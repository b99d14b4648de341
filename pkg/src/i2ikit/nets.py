"""Networks for the desk-scale translation system.

Five parts share one architecture family: a ResBlock generator that doubles
resolution per block, a ResBlock discriminator (also reused as the encoder)
that halves resolution per block, and a stack of small per-level adaptor
convolutions that turn discriminator/encoder features into
generator-compatible features injected as weighted additive skips.

Feature pyramids are plain dicts keyed by level index.  Generator pyramids
are tapped at the input of each ResBlock (after injection), so level 0 is
the deepest, lowest-resolution feature.  Discriminator pyramids are tapped
at the output of each ResBlock, so level 0 is the highest-resolution
feature.  Adaptor sub-net ``j`` consumes discriminator level ``j`` and
produces the generator level at the same spatial resolution, which is
``num_resblocks - 1 - j``.
"""

import copy
import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DataError, ShapeError, UsageError
from .seeding import derive_seed

FeaturePyramid = dict[int, torch.Tensor]

IMAGE_CHANNELS = 3
MIN_WIDTH = 8


@dataclass(frozen=True)
class ArchitectureSpec:
    """Scalars that fix every tensor shape in the system.

    ``channels_base`` is the width of the deepest trunk features; width halves
    toward the output resolution with a floor of ``MIN_WIDTH``.  A network is
    class-conditional iff ``num_classes >= 2``.
    """

    image_size: int = 32
    channels_base: int = 64
    num_resblocks: int = 4
    latent_dim: int = 128
    num_classes: int = 1

    def __post_init__(self):
        if self.num_resblocks < 1:
            raise ConfigurationError("num_resblocks must be >= 1")
        stem = self.image_size >> self.num_resblocks
        if stem < 1 or stem << self.num_resblocks != self.image_size:
            raise ConfigurationError(
                f"image_size={self.image_size} is not a power-of-two multiple of "
                f"the {self.num_resblocks}-ResBlock stem (image_size must equal "
                f"2^num_resblocks x stem size)"
            )
        if self.channels_base < MIN_WIDTH:
            raise ConfigurationError(f"channels_base must be >= {MIN_WIDTH}")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")

    @property
    def conditional(self) -> bool:
        return self.num_classes >= 2

    @property
    def stem_size(self) -> int:
        return self.image_size >> self.num_resblocks

    @property
    def pyramid_levels(self) -> tuple[int, ...]:
        return tuple(range(self.num_resblocks))

    def trunk_widths(self) -> list[int]:
        """Channel widths from the deepest feature (index 0) to the output."""
        return [
            max(self.channels_base >> max(0, i - 1), MIN_WIDTH)
            for i in range(self.num_resblocks + 1)
        ]

    def generator_site_shape(self, level: int) -> tuple[int, int, int]:
        """(C, H, W) of the generator injection site / pyramid tap at `level`."""
        size = self.stem_size << level
        return (self.trunk_widths()[level], size, size)

    def encoder_tap_shape(self, level: int) -> tuple[int, int, int]:
        """(C, H, W) of the discriminator/encoder pyramid tap at `level`."""
        size = self.image_size >> (level + 1)
        return (self.trunk_widths()[self.num_resblocks - 1 - level], size, size)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels_base": self.channels_base,
            "num_resblocks": self.num_resblocks,
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


def default_injection_weights(spec: ArchitectureSpec) -> list[float]:
    """Per-level weights for adaptor injection.

    All ones except the highest-resolution level, which is damped to 0.1 so
    the high-res skip does not drown the trunk (on a four-level system whose
    top adaptor level is the 32x32 feature, that level gets the 0.1).
    """
    weights = [1.0] * spec.num_resblocks
    weights[-1] = 0.1
    return weights


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


def _check_labels(net, labels):
    if net.conditional:
        if labels is None:
            raise UsageError(f"conditional {net.role} called without class labels")
        if labels.min().item() < 0 or labels.max().item() >= net.spec.num_classes:
            raise DataError(f"class label out of range 0..{net.spec.num_classes - 1}")
    elif labels is not None:
        raise UsageError(f"unconditional {net.role} does not take class labels")


class UpBlock(nn.Module):
    """Generator ResBlock; doubles spatial resolution."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = _gn(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _gn(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        h = F.interpolate(F.relu(self.norm1(x)), scale_factor=2, mode="nearest")
        h = self.conv2(F.relu(self.norm2(self.conv1(h))))
        return h + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class DownBlock(nn.Module):
    """Discriminator/encoder ResBlock; halves spatial resolution."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        return F.avg_pool2d(h, 2) + self.skip(F.avg_pool2d(x, 2))


class Generator(nn.Module):
    """Latent -> image generator with per-level additive feature injection.

    ``forward`` returns ``(image, pyramid)`` where the pyramid holds the
    post-injection activation entering each ResBlock.  When ``adapted`` is
    given, level ``l`` receives ``x + weights[l] * adapted[l]`` right before
    ResBlock ``l``; omitting ``adapted`` (or passing all-zero features, or
    all-zero weights) yields pure generation from ``z``.
    """

    role = "generator"

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.conditional = spec.conditional
        widths = spec.trunk_widths()
        stem_in = spec.latent_dim
        if self.conditional:
            self.class_embed = nn.Embedding(spec.num_classes, spec.latent_dim)
            stem_in *= 2
        self.stem = nn.Linear(stem_in, widths[0] * spec.stem_size**2)
        self.blocks = nn.ModuleList(
            UpBlock(widths[i], widths[i + 1]) for i in range(spec.num_resblocks)
        )
        self.out_norm = _gn(widths[-1])
        self.out_conv = nn.Conv2d(widths[-1], IMAGE_CHANNELS, 3, padding=1)

    def _check_adapted(self, adapted: FeaturePyramid, batch: int):
        expected = set(self.spec.pyramid_levels)
        if set(adapted) != expected:
            raise ShapeError(
                f"adapted pyramid levels {sorted(adapted)} != expected {sorted(expected)}"
            )
        for level in self.spec.pyramid_levels:
            want = (batch, *self.spec.generator_site_shape(level))
            got = tuple(adapted[level].shape)
            if got != want:
                raise ShapeError(
                    f"adapted pyramid level {level}: shape {got} != expected {want}"
                )

    def forward(
        self,
        z: torch.Tensor,
        labels: torch.Tensor | None = None,
        adapted: FeaturePyramid | None = None,
        weights=None,
    ) -> tuple[torch.Tensor, FeaturePyramid]:
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(
                f"latent shape {tuple(z.shape)} != (B, {self.spec.latent_dim})"
            )
        batch = z.shape[0]
        _check_labels(self, labels)
        if adapted is not None:
            self._check_adapted(adapted, batch)
            if weights is None:
                weights = default_injection_weights(self.spec)
            if len(weights) != self.spec.num_resblocks:
                raise ConfigurationError(
                    f"need {self.spec.num_resblocks} injection weights, got {len(weights)}"
                )
        if self.conditional:
            z = torch.cat([z, self.class_embed(labels)], dim=1)
        x = self.stem(z).view(batch, -1, self.spec.stem_size, self.spec.stem_size)
        pyramid: FeaturePyramid = {}
        for level, block in enumerate(self.blocks):
            if adapted is not None:
                x = x + weights[level] * adapted[level]
            pyramid[level] = x
            x = block(x)
        image = torch.tanh(self.out_conv(F.relu(self.out_norm(x))))
        return image, pyramid


class Discriminator(nn.Module):
    """Image -> (logit, pyramid) critic; also used (role-tagged) as encoder.

    The logit is unbounded; losses apply the squashing.  Conditional handles
    use projection conditioning: the class embedding's inner product with the
    pooled final features is added to the logit.
    """

    role = "discriminator"

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.conditional = spec.conditional
        widths = spec.trunk_widths()
        n = spec.num_resblocks
        self.in_conv = nn.Conv2d(IMAGE_CHANNELS, widths[n], 3, padding=1)
        self.blocks = nn.ModuleList(
            DownBlock(widths[n - j], widths[n - 1 - j]) for j in range(n)
        )
        self.head = nn.Linear(widths[0], 1)
        if self.conditional:
            self.proj_embed = nn.Embedding(spec.num_classes, widths[0])

    def forward(
        self, x: torch.Tensor, labels: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, FeaturePyramid]:
        want = (IMAGE_CHANNELS, self.spec.image_size, self.spec.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"image shape {tuple(x.shape)} != (B, {want})")
        _check_labels(self, labels)
        f = self.in_conv(x)
        pyramid: FeaturePyramid = {}
        for level, block in enumerate(self.blocks):
            f = block(f)
            pyramid[level] = f
        h = F.relu(f).sum(dim=(2, 3))
        logit = self.head(h).squeeze(1)
        if self.conditional:
            logit = logit + (self.proj_embed(labels) * h).sum(dim=1)
        return logit, pyramid


class Adaptor(nn.Module):
    """Per-level feature translators from encoder taps to generator sites.

    Sub-net ``j`` maps discriminator/encoder pyramid level ``j`` to the
    generator injection site of equal resolution.  Unconditional sub-nets are
    a single 3x3 stride-1 conv; conditional sub-nets are ReLU + two 3x3
    stride-1 convs + one 1x1 stride-1 conv, except the sub-net on the deepest
    encoder level, which is two 3x3 stride-1 convs.
    """

    role = "adaptor"

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.conditional = spec.conditional
        n = spec.num_resblocks
        subnets = []
        for j in range(n):
            in_ch = spec.encoder_tap_shape(j)[0]
            out_ch = spec.generator_site_shape(n - 1 - j)[0]
            if not self.conditional:
                subnets.append(nn.Conv2d(in_ch, out_ch, 3, padding=1))
            elif j == n - 1:
                subnets.append(
                    nn.Sequential(
                        nn.Conv2d(in_ch, out_ch, 3, padding=1),
                        nn.Conv2d(out_ch, out_ch, 3, padding=1),
                    )
                )
            else:
                subnets.append(
                    nn.Sequential(
                        nn.ReLU(),
                        nn.Conv2d(in_ch, out_ch, 3, padding=1),
                        nn.Conv2d(out_ch, out_ch, 3, padding=1),
                        nn.Conv2d(out_ch, out_ch, 1),
                    )
                )
        self.subnets = nn.ModuleList(subnets)

    def forward(self, taps: FeaturePyramid) -> FeaturePyramid:
        n = self.spec.num_resblocks
        if set(taps) != set(range(n)):
            raise ShapeError(
                f"encoder pyramid levels {sorted(taps)} != expected {list(range(n))}"
            )
        return {n - 1 - j: self.subnets[j](taps[j]) for j in range(n)}


@dataclass(frozen=True)
class SharingPlan:
    """Record of which generator parameters are shared storage."""

    num_shared_resblocks: int
    shared_param_names: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "num_shared_resblocks": self.num_shared_resblocks,
            "shared_param_names": list(self.shared_param_names),
        }


def build_networks(spec: ArchitectureSpec, seed: int) -> dict[str, nn.Module]:
    """Freshly initialized generator, discriminator, and adaptor.

    Initialization is a pure function of (spec, seed): calling twice with the
    same arguments yields bit-identical parameters.  The global RNG state is
    left untouched.
    """
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed("build", seed))
        return {
            "generator": Generator(spec),
            "discriminator": Discriminator(spec),
            "adaptor": Adaptor(spec),
        }


def clone_network(net: nn.Module, role: str | None = None) -> nn.Module:
    """Deep copy of a network, optionally retagged with a new role."""
    out = copy.deepcopy(net)
    if role is not None:
        out.role = role
    return out


def share_deep_layers(
    generator: Generator, aux_generator: Generator, num_shared: int
) -> SharingPlan:
    """Share the `num_shared` ResBlocks closest to the latent input.

    After this call the shared blocks are literally the same modules in both
    generators: a gradient update through either network mutates both.  The
    auxiliary generator keeps its own stem, output head, and any non-shared
    blocks (which the caller typically initialized from the main generator).
    """
    if generator.spec != aux_generator.spec:
        raise ConfigurationError("generators to share must come from the same spec")
    n = generator.spec.num_resblocks
    if not 0 <= num_shared <= n:
        raise ConfigurationError(f"shared ResBlock count {num_shared} not in 0..{n}")
    for i in range(num_shared):
        aux_generator.blocks[i] = generator.blocks[i]
    names = tuple(
        sorted(
            f"blocks.{i}.{name}"
            for i in range(num_shared)
            for name, _ in generator.blocks[i].named_parameters()
        )
    )
    return SharingPlan(num_shared_resblocks=num_shared, shared_param_names=names)


def parameter_hash(net: nn.Module) -> str:
    """Short content hash over a network's state dict, for frozen-net checks."""
    h = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]
