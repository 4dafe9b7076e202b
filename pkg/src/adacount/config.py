"""Training configuration: every hyperparameter plus gap-filling choices,
serializable so runs are reproducible."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

DENSITY_ACTIVATIONS = ("sigmoid", "linear")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    ``adaptation_enabled=False`` is the ablation baseline: the domain head
    and gradient reversal are removed and the run degenerates to supervised
    density estimation on the source domain.
    """

    batch_size: int = 8
    image_size: int = 256
    lr_encoder_decoder: float = 1e-3
    lr_domain_head: float = 1e-4
    epochs: int = 150
    val_fraction: float = 0.2
    sigma: float = 1.0
    gamma: float = 10.0
    seed: int = 0
    density_activation: str = "sigmoid"
    adaptation_enabled: bool = True
    source_per_batch: int = 4
    # Architecture knobs: the encoder ladder doubles widths per level,
    # starting at base_width, with `depth` pooling stages.
    depth: int = 4
    base_width: int = 64

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.source_per_batch <= self.batch_size:
            raise ValueError(
                f"source_per_batch must lie in (0, batch_size={self.batch_size}], "
                f"got {self.source_per_batch}"
            )
        if self.lr_encoder_decoder <= 0 or self.lr_domain_head <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.density_activation not in DENSITY_ACTIVATIONS:
            raise ValueError(
                f"density_activation must be one of {DENSITY_ACTIVATIONS}, "
                f"got {self.density_activation!r}"
            )
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.image_size < 2**self.depth or self.image_size % 2**self.depth != 0:
            raise ValueError(
                f"image_size {self.image_size} must be a positive multiple of "
                f"2^depth = {2**self.depth}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)
