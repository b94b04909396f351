"""Building blocks shared by the three stages and the discriminator."""

from __future__ import annotations

import contextlib
import hashlib

import torch
from torch import nn


def derive_seed(root: int, label: str) -> int:
    """Expand the root seed into an independent per-label seed."""
    digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


@contextlib.contextmanager
def seeded(root: int, label: str):
    """Run a block under a torch RNG seeded from ``(root, label)``; restores the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(root, label))
        yield


def kaiming_init(module: nn.Module) -> nn.Module:
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


class ClipEncoder(nn.Module):
    """1-D convolutions over the hop axis of a CQT clip (bins as channels), then mean-pooled."""

    def __init__(self, bins: int = 84, out_dim: int = 256, width: int = 64):
        super().__init__()
        self.bins = bins
        self.net = nn.Sequential(
            nn.Conv1d(bins, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv1d(width, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv1d(width, out_dim, 3, padding=1),
            nn.LeakyReLU(0.2),
        )

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        lead = clips.shape[:-2]
        if clips.shape[-2] != self.bins:
            raise ValueError(f"expected {self.bins} CQT bins, got {clips.shape[-2]}")
        h = self.net(clips.reshape(-1, *clips.shape[-2:]))
        return h.mean(dim=-1).reshape(*lead, -1)


class FrozenBackbone(nn.Module):
    """Five VGG-style 3x3 convolutions (two blocks of two, then one), never trained.

    ``taps(x)`` returns ``[x, relu1_1, relu1_2, relu2_1, relu2_2, relu3_1]``
    so index 0 is the identity layer.
    """

    def __init__(self, widths=(8, 16, 32), weights: str = "", seed: int = 0):
        super().__init__()
        w1, w2, w3 = widths
        self.vgg = bool(weights)
        if self.vgg:
            from torchvision.models import vgg19

            full = vgg19(weights=None)
            full.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
            feats = full.features
            convs = [feats[0], feats[2], feats[5], feats[7], feats[10]]
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        else:
            with seeded(seed, "frozen-backbone"):
                convs = [
                    nn.Conv2d(3, w1, 3, padding=1), nn.Conv2d(w1, w1, 3, padding=1),
                    nn.Conv2d(w1, w2, 3, padding=1), nn.Conv2d(w2, w2, 3, padding=1),
                    nn.Conv2d(w2, w3, 3, padding=1),
                ]
                for c in convs:
                    nn.init.kaiming_normal_(c.weight, nonlinearity="relu")
                    nn.init.zeros_(c.bias)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def out_channels(self) -> int:
        return self.convs[-1].out_channels

    def train(self, mode: bool = True):
        return super().train(False)

    def taps(self, x: torch.Tensor, upto: int = 5) -> list[torch.Tensor]:
        if self.vgg:
            x = (x - self.mean) / self.std
        outs = [x]
        h = x
        for k, conv in enumerate(self.convs[:upto]):
            if k in (2, 4):
                h = nn.functional.max_pool2d(h, 2)
            h = torch.relu(conv(h))
            outs.append(h)
        return outs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.taps(x)[-1]


def down(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2))


def up(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2))
