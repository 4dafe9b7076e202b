"""The three-subnetwork counting model: downsampling encoder, upsampling
decoder with skip concatenations, and a domain classifier attached to the
encoder bottleneck through a gradient reversal layer.

The encoder is shared: one copy of its parameters serves both the density
path (encoder -> decoder) and the domain path (encoder -> reversal ->
classifier). Every convolution except the two output layers is followed by
batch normalization and ReLU; both output layers end in a sigmoid.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from adacount.config import TrainConfig


class _GradientReversalFn(torch.autograd.Function):
    """Identity in the forward pass; multiplies the gradient by -lambda."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, lam: float) -> torch.Tensor:
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output.neg() * ctx.lam, None


def gradient_reversal(features: torch.Tensor, lam: float) -> torch.Tensor:
    """Forward identity; backward gradient scaled by -lam."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return _GradientReversalFn.apply(features, float(lam))


class _DoubleConv(nn.Module):
    """Two 3x3 padded convolutions, each followed by BN and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _build_domain_head(in_ch: int, grid: int) -> nn.Sequential:
    """3x3 unpadded convolutions interleaved with 2x2 max pooling until the
    grid shrinks to <= 2, then a 1x1 convolution down to one channel.

    Channel widths halve per convolution (floor 8). The head is fully
    convolutional, so bottleneck grids larger than the design size still work.
    """
    layers: list[nn.Module] = []
    ch, s = in_ch, grid
    while s > 2:
        nxt = max(8, ch // 2)
        layers += [nn.Conv2d(ch, nxt, 3), nn.BatchNorm2d(nxt), nn.ReLU(inplace=True)]
        ch, s = nxt, s - 2
        if s > 2:
            layers.append(nn.MaxPool2d(2))
            s //= 2
    layers.append(nn.Conv2d(ch, 1, 1))  # output layer: no BN/ReLU
    return nn.Sequential(*layers)


class CountingModel(nn.Module):
    """Encoder (G_d), decoder (G_u), and optional domain classifier (G_c).

    ``grl_lambda`` is the current reversal coefficient, updated by the
    trainer each iteration. ``grl_enabled`` exists so the forward-identity
    property of the reversal layer can be exercised; it never changes
    forward outputs.
    """

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        bottleneck_ch = cfg.base_width * 2**cfg.depth

        self.depth = cfg.depth
        self.density_activation = cfg.density_activation
        self.grl_lambda: float = 0.0
        self.grl_enabled: bool = True

        self.encoder_blocks = nn.ModuleList()
        in_ch = 3
        for w in widths:
            self.encoder_blocks.append(_DoubleConv(in_ch, w))
            in_ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(widths[-1], bottleneck_ch)

        self.up_convs = nn.ModuleList()
        self.decoder_blocks = nn.ModuleList()
        in_ch = bottleneck_ch
        for w in reversed(widths):
            self.up_convs.append(nn.ConvTranspose2d(in_ch, w, 2, stride=2))
            self.decoder_blocks.append(_DoubleConv(2 * w, w))
            in_ch = w
        self.density_out = nn.Conv2d(widths[0], 1, 1)  # output layer: no BN/ReLU

        if cfg.adaptation_enabled:
            grid = cfg.image_size // 2**cfg.depth
            self.domain_head: nn.Module | None = _build_domain_head(bottleneck_ch, grid)
        else:
            self.domain_head = None

    @property
    def has_domain_head(self) -> bool:
        return self.domain_head is not None

    def _check_spatial(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (batch, 3, H, W) tensor, got shape {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        div = 2**self.depth
        if h % div or w % div:
            raise ValueError(
                f"input size {h}x{w} is not divisible by 2^{self.depth} = {div} "
                f"(required by {self.depth} downsampling blocks)"
            )

    def encode(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Run the downsampling path; returns per-level skip grids and the bottleneck."""
        self._check_spatial(x)
        skips = []
        for block in self.encoder_blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        return skips, self.bottleneck(x)

    def decode(self, skips: list[torch.Tensor], bottom: torch.Tensor) -> torch.Tensor:
        """Upsample with skip concatenation down to a single-channel density map."""
        x = bottom
        for up, block, skip in zip(self.up_convs, self.decoder_blocks, reversed(skips)):
            x = up(x)
            x = torch.cat([skip, x], dim=1)
            x = block(x)
        x = self.density_out(x)
        if self.density_activation == "sigmoid":
            x = torch.sigmoid(x)
        return x

    def domain_probs(self, bottom: torch.Tensor) -> torch.Tensor:
        """Domain classifier on (reversed) bottleneck features; one scalar per image."""
        if self.domain_head is None:
            raise RuntimeError("model was built without a domain head (adaptation disabled)")
        z = gradient_reversal(bottom, self.grl_lambda) if self.grl_enabled else bottom
        logits = self.domain_head(z).mean(dim=(2, 3)).squeeze(1)
        return torch.sigmoid(logits)

    def forward_density(self, x: torch.Tensor) -> torch.Tensor:
        """Density maps for a batch: (B, 3, H, W) -> (B, 1, H, W)."""
        skips, bottom = self.encode(x)
        return self.decode(skips, bottom)

    def forward_domain(self, x: torch.Tensor) -> torch.Tensor:
        """Source-domain probabilities for a batch: (B, 3, H, W) -> (B,)."""
        _, bottom = self.encode(x)
        return self.domain_probs(bottom)

    def forward_mixed(self, x: torch.Tensor, n_density: int) -> tuple[torch.Tensor, torch.Tensor]:
        """One shared encoder pass: density maps for the first ``n_density``
        samples, domain probabilities for the whole batch."""
        skips, bottom = self.encode(x)
        density = self.decode([s[:n_density] for s in skips], bottom[:n_density])
        return density, self.domain_probs(bottom)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_density(x)


def _init_parameters(model: nn.Module) -> None:
    # Rectifier-appropriate fan-in scaling; draws are consumed in module
    # definition order, so a fixed torch seed fixes the parameters.
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_model(cfg: TrainConfig) -> CountingModel:
    """Construct and deterministically initialize a model from a config."""
    torch.manual_seed(cfg.seed)
    model = CountingModel(cfg)
    _init_parameters(model)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
