"""Image-conditional perturbation generator.

A fully convolutional encoder-decoder with additive skip connections maps an
image to a perturbation of the same shape. The output layer is tanh-scaled by
``eps_max``, so raw perturbations are structurally bounded, and it is
zero-initialized, so a fresh generator emits exactly zero (the identity
attack) and early training is well conditioned.

Deploying a trained generator is a single forward pass: no detector access and
no gradients.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoints
from .data import validate_image_tensor

STRIDE_MULTIPLE = 4  # two downsampling stages


class PerturbationGenerator(nn.Module):
    def __init__(self, *, base_channels: int = 16, eps_max: float = 0.15):
        super().__init__()
        if eps_max <= 0:
            raise ValueError(f"eps_max must be > 0, got {eps_max}")
        c = base_channels
        self.arch = {"base_channels": base_channels, "eps_max": eps_max}
        self.eps_max = eps_max
        self.meta: dict = {"version": "1"}

        self.enc1 = nn.Conv2d(3, c, 3, stride=1, padding=1)
        self.enc2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(4 * c, 4 * c, 3, stride=1, padding=1)
        self.dec2 = nn.Conv2d(4 * c, 2 * c, 3, stride=1, padding=1)
        self.dec1 = nn.Conv2d(2 * c, c, 3, stride=1, padding=1)
        self.out = nn.Conv2d(c, 3, 3, stride=1, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _check_shape(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        if h % STRIDE_MULTIPLE or w % STRIDE_MULTIPLE or h < 2 * STRIDE_MULTIPLE or w < 2 * STRIDE_MULTIPLE:
            raise ValueError(
                f"generator input must be at least {2 * STRIDE_MULTIPLE} px per side and a "
                f"multiple of {STRIDE_MULTIPLE}, got {h}x{w}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Perturbation for a (3, H, W) image; same shape, bounded by eps_max."""
        validate_image_tensor(x)
        self._check_shape(x)
        b = x.unsqueeze(0)
        e1 = F.relu(self.enc1(b))
        e2 = F.relu(self.enc2(e1))
        e3 = F.relu(self.enc3(e2))
        m = F.relu(self.mid(e3))
        d2 = F.relu(self.dec2(F.interpolate(m, scale_factor=2, mode="nearest"))) + e2
        d1 = F.relu(self.dec1(F.interpolate(d2, scale_factor=2, mode="nearest"))) + e1
        return torch.tanh(self.out(d1))[0] * self.eps_max

    def generate(self, x: torch.Tensor) -> torch.Tensor:
        """Inference path: one forward pass, no gradient bookkeeping."""
        with torch.no_grad():
            return self.forward(x).detach()


def apply_perturbation(x: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Element-wise clamp(x + delta, -1, 1); output always satisfies the image range."""
    if x.shape != delta.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(delta.shape)}")
    return torch.clamp(x + delta, -1.0, 1.0)


def save_generator(model: PerturbationGenerator, path) -> None:
    checkpoints.save(path, "generator", model.state_dict(), model.arch, model.meta)


def load_generator(path) -> PerturbationGenerator:
    _, arch, meta, state = checkpoints.load(path, expect_kind="generator")
    model = PerturbationGenerator(
        base_channels=arch["base_channels"], eps_max=arch["eps_max"]
    )
    model.load_state_dict(state)
    model.meta = meta
    model.eval()
    return model


def generator_fingerprint(model: PerturbationGenerator) -> str:
    return checkpoints.fingerprint("generator", model.state_dict(), model.arch, model.meta)
