import numpy as np
import pytest
import torch

from i2ikit.config import StageConfig
from i2ikit.data import synthetic_shapes
from i2ikit.nets import ArchitectureSpec


@pytest.fixture(scope="session")
def micro_spec():
    """Smallest sensible architecture; keeps unit tests fast."""
    return ArchitectureSpec(
        image_size=8, channels_base=8, num_resblocks=2, latent_dim=4
    )


@pytest.fixture(scope="session")
def micro_config():
    return StageConfig(
        image_size=8,
        channels_base=8,
        num_resblocks=2,
        latent_dim=4,
        batch_size=4,
        steps=3,
        base_steps=3,
        pretrain_steps=3,
        selfinit_steps=3,
        lr_g=1e-3,
        lr_ad=1e-3,
        shared_resblocks=2,
        per_class=8,
    )


@pytest.fixture(scope="session")
def micro_corpus():
    return synthetic_shapes(classes=2, per_class=8, image_size=8, seed=11)


def state_bytes(module: torch.nn.Module) -> bytes:
    return b"".join(
        v.detach().cpu().numpy().tobytes() for _, v in sorted(module.state_dict().items())
    )


def numpy_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Independent stride-1, pad-1 convolution used as a hand-trace oracle."""
    c_out, c_in, kh, kw = weight.shape
    _, h, w = x.shape
    padded = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    padded[:, 1:-1, 1:-1] = x
    out = np.zeros((c_out, h, w), dtype=np.float64)
    for co in range(c_out):
        for i in range(h):
            for j in range(w):
                out[co, i, j] = (
                    padded[:, i : i + kh, j : j + kw] * weight[co]
                ).sum() + bias[co]
    return out


def numpy_conv1x1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c_out = weight.shape[0]
    return np.einsum("oc,chw->ohw", weight[:, :, 0, 0], x) + bias.reshape(c_out, 1, 1)


def numpy_avgpool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
