"""Joint training loop: mixed source/target batches, gradient reversal with
a ramped coefficient, two learning-rate groups, source-only validation, and
per-epoch checkpointing.

Run directory layout:

    <run_dir>/
      config                 JSON snapshot of the effective TrainConfig
      history                line-delimited JSON: one record per epoch
      checkpoints/epoch_{n}  parameters + optimizer state after epoch n
      checkpoints/best       lowest source-validation density loss so far
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from adacount.config import TrainConfig
from adacount.core import (
    Dataset,
    DensityMap,
    DomainTag,
    DotAnnotationSet,
    Image,
    Sample,
    split_train_val,
)
from adacount.density import render_density
from adacount.network import CountingModel, build_model
from adacount.objective import (
    LambdaSchedule,
    LossBreakdown,
    density_loss,
    domain_loss,
    lambda_at,
    total_loss,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    density_loss: float
    domain_loss: float
    total: float
    val_loss: float
    lambda_mean: float


@dataclass
class TrainState:
    """Mutable record of one training run."""

    model: CountingModel
    iteration: int = 0
    best_val_loss: float = float("inf")
    history: list[EpochRecord] = field(default_factory=list)
    lambda_trace: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Input preparation
# ---------------------------------------------------------------------------


def image_to_tensor(image: Image, size: Optional[int] = None) -> torch.Tensor:
    """(H, W, 3) [0,1] pixels -> (3, S, S) float tensor, bilinear-resized."""
    x = torch.from_numpy(np.asarray(image.pixels, dtype=np.float32)).permute(2, 0, 1)
    if size is not None and (image.height, image.width) != (size, size):
        x = F.interpolate(x.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False)
        x = x.squeeze(0).clamp(0.0, 1.0)
    return x


def _target_tensor(sample: Sample, size: int, sigma: float) -> torch.Tensor:
    # density targets are rendered at the training resolution from rescaled
    # dot coordinates, never by resampling a pre-rendered map (which would
    # break mass conservation)
    pts = sample.dots.points
    scale = np.array(
        [size / sample.image.height, size / sample.image.width], dtype=np.float64
    )
    scaled = DotAnnotationSet(pts * scale, image_id=sample.image.id)
    rendered = render_density(scaled, size, size, sigma)
    return torch.from_numpy(np.asarray(rendered.values, dtype=np.float32)).unsqueeze(0)


class _Cycler:
    """Endless pass over indices with independent reshuffling per pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out: list[int] = []
        while len(out) < k:
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.perm[self.pos]))
            self.pos += 1
        return out


def epoch_batches(
    source_order: Sequence[int],
    target_cycler: Optional[_Cycler],
    source_per_batch: int,
    target_per_batch: int,
) -> Iterator[tuple[list[int], list[int]]]:
    """Yield (source indices, target indices) per iteration.

    Every batch holds exactly ``source_per_batch`` source samples; the
    source pass defines the epoch length (remainder dropped).
    """
    iters = len(source_order) // source_per_batch
    for i in range(iters):
        src = [int(j) for j in source_order[i * source_per_batch : (i + 1) * source_per_batch]]
        tgt = target_cycler.take(target_per_batch) if target_per_batch else []
        yield src, tgt


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: Path,
    model: CountingModel,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    iteration: int,
    epoch: int,
    best_val_loss: float,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": cfg.to_dict(),
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "iteration": iteration,
            "epoch": epoch,
            "best_val_loss": best_val_loss,
        },
        path,
    )


def load_checkpoint(path: Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise RuntimeError(
            f"checkpoint {path} has format version {version!r}; "
            f"this build supports version {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def load_model(path: Path) -> tuple[CountingModel, TrainConfig]:
    """Rebuild the model of a checkpoint and restore its parameters."""
    payload = load_checkpoint(path)
    cfg = TrainConfig.from_dict(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _optimizer_for(model: CountingModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    enc_dec = [
        {
            "params": [
                p
                for name, p in model.named_parameters()
                if not name.startswith("domain_head")
            ],
            "lr": cfg.lr_encoder_decoder,
        }
    ]
    if model.has_domain_head:
        enc_dec.append(
            {"params": list(model.domain_head.parameters()), "lr": cfg.lr_domain_head}
        )
    return torch.optim.Adam(enc_dec)


def _validate_inputs(source: Dataset, target: Optional[Dataset], cfg: TrainConfig) -> None:
    if len(source) == 0:
        raise ValueError("source dataset is empty")
    if source.domain is not DomainTag.SOURCE:
        raise ValueError("source dataset must carry the SOURCE tag")
    if not all(s.labeled for s in source):
        raise ValueError("every source sample must carry dot annotations")
    if cfg.adaptation_enabled:
        if target is None or len(target) == 0:
            raise ValueError("adaptation is enabled but the target dataset is empty")
        if target.domain is not DomainTag.TARGET:
            raise ValueError("target dataset must carry the TARGET tag")
        if any(s.labeled for s in target):
            raise ValueError("target samples must be unlabeled during training")


def _eval_density_loss(
    model: CountingModel, xs: torch.Tensor, ys: torch.Tensor, batch_size: int
) -> float:
    """log(eps + MSE) over an entire split, batched for memory."""
    model.eval()
    sq_sum, n_px = 0.0, 0
    with torch.no_grad():
        for i in range(0, xs.shape[0], batch_size):
            pred = model.forward_density(xs[i : i + batch_size])
            diff = pred - ys[i : i + batch_size]
            sq_sum += float((diff**2).sum())
            n_px += diff.numel()
    return math.log(1e-12 + sq_sum / n_px)


def train(
    source: Dataset,
    target: Optional[Dataset],
    cfg: TrainConfig,
    run_dir: Path,
) -> TrainState:
    """Run the full training scheme and return the final state.

    With adaptation enabled, each batch mixes ``source_per_batch`` labeled
    source samples with unlabeled target samples; the density loss sees only
    the source portion, the domain loss the whole batch, and the reversal
    coefficient follows the ramp schedule. With adaptation disabled the
    domain head does not exist and batches are source-only.
    """
    _validate_inputs(source, target, cfg)
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    history_path = run_dir / "history"
    history_path.write_text("", encoding="utf-8")

    train_split, val_split = split_train_val(source, 1.0 - cfg.val_fraction, cfg.seed)
    if len(val_split) == 0 or len(train_split) == 0:
        raise ValueError(
            f"degenerate train/val split ({len(train_split)}/{len(val_split)}); "
            "adjust val_fraction or dataset size"
        )
    if len(train_split) < cfg.source_per_batch and cfg.adaptation_enabled:
        raise ValueError("source training split smaller than source_per_batch")

    size = cfg.image_size
    src_x = torch.stack([image_to_tensor(s.image, size) for s in train_split])
    src_y = torch.stack([_target_tensor(s, size, cfg.sigma) for s in train_split])
    val_x = torch.stack([image_to_tensor(s.image, size) for s in val_split])
    val_y = torch.stack([_target_tensor(s, size, cfg.sigma) for s in val_split])

    adapt = cfg.adaptation_enabled
    if adapt:
        tgt_x = torch.stack([image_to_tensor(s.image, size) for s in target])
        src_per_batch = cfg.source_per_batch
        tgt_per_batch = cfg.batch_size - cfg.source_per_batch
    else:
        tgt_x = None
        src_per_batch = cfg.batch_size
        tgt_per_batch = 0

    iters_per_epoch = len(train_split) // src_per_batch
    if iters_per_epoch == 0:
        raise ValueError(
            f"source training split ({len(train_split)}) smaller than one batch ({src_per_batch})"
        )
    schedule = LambdaSchedule(
        total_iterations=cfg.epochs * iters_per_epoch, gamma=cfg.gamma
    )

    model = build_model(cfg)
    optimizer = _optimizer_for(model, cfg)
    state = TrainState(model=model)

    rng_order = np.random.default_rng([cfg.seed, 1])
    cycler = _Cycler(len(target), np.random.default_rng([cfg.seed, 2])) if adapt and tgt_per_batch else None
    labels = torch.tensor([1.0] * src_per_batch + [0.0] * tgt_per_batch)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        sums = {"density": 0.0, "domain": 0.0, "total": 0.0, "lam": 0.0}
        n_batches = 0
        for src_idx, tgt_idx in epoch_batches(
            rng_order.permutation(len(train_split)), cycler, src_per_batch, tgt_per_batch
        ):
            lam = lambda_at(schedule, state.iteration) if adapt else 0.0
            model.grl_lambda = lam
            state.lambda_trace.append(lam)

            xb_src = src_x[src_idx]
            yb_src = src_y[src_idx]
            if adapt:
                xb = torch.cat([xb_src, tgt_x[tgt_idx]]) if tgt_idx else xb_src
                pred, probs = model.forward_mixed(xb, len(src_idx))
                dl = density_loss(pred, yb_src)
                dom = domain_loss(probs, labels)
                loss = dl + dom
                breakdown = total_loss(float(dl), float(dom))
            else:
                pred = model.forward_density(xb_src)
                dl = density_loss(pred, yb_src)
                loss = dl
                breakdown = total_loss(float(dl), 0.0)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            sums["density"] += breakdown.density_loss
            sums["domain"] += breakdown.domain_loss
            sums["total"] += breakdown.total
            sums["lam"] += lam
            n_batches += 1
            state.iteration += 1

        val_loss = _eval_density_loss(model, val_x, val_y, cfg.batch_size)
        record = EpochRecord(
            epoch=epoch,
            density_loss=sums["density"] / n_batches,
            domain_loss=sums["domain"] / n_batches,
            total=sums["total"] / n_batches,
            val_loss=val_loss,
            lambda_mean=sums["lam"] / n_batches,
        )
        state.history.append(record)
        with history_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(record)) + "\n")

        save_checkpoint(
            ckpt_dir / f"epoch_{epoch}", model, cfg, optimizer, state.iteration, epoch,
            min(state.best_val_loss, val_loss),
        )
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            save_checkpoint(
                ckpt_dir / "best", model, cfg, optimizer, state.iteration, epoch, val_loss
            )

    return state


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict(
    model: CountingModel,
    images: Sequence[Image],
    image_size: Optional[int],
    batch_size: int = 16,
) -> list[tuple[DensityMap, float]]:
    """Density map and raw-sum count per image, deterministically.

    ``image_size=None`` runs each image at native resolution (the model is
    fully convolutional; sizes must still divide by 2^depth).
    """
    model.eval()
    results: list[tuple[DensityMap, float]] = []
    i = 0
    while i < len(images):
        # batch a run of equally-sized inputs
        j = i + 1
        shape = (images[i].height, images[i].width)
        while (
            j < len(images)
            and j - i < batch_size
            and (images[j].height, images[j].width) == shape
        ):
            j += 1
        xb = torch.stack([image_to_tensor(img, image_size) for img in images[i:j]])
        with torch.no_grad():
            pred = model.forward_density(xb)
        for k in range(pred.shape[0]):
            values = pred[k, 0].numpy().astype(np.float32)
            results.append((DensityMap(values, sigma=None), float(values.sum())))
        i = j
    return results
