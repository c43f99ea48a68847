"""L1 training with Adam: schedule, checkpointing, deterministic batching."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ModeError, NumericError, ShapeError
from .data import SrDataset, sample_patch
from .model import CfsrModel
from .tensor import GradTape, Tensor, abs_val, backward, mean_all, sub


@dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults are the standard CFSR recipe."""

    total_iters: int
    batch_size: int = 16
    patch_size: int = 64            # LR patch side; HR crops are scale x larger
    lr_init: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    schedule: str = "halve"         # "halve" at milestones, or "constant"
    milestones: tuple[float, ...] = (0.5, 0.75, 0.9)
    seed: int = 0
    checkpoint_every: int = 0       # 0 = final checkpoint only
    clip_norm: float | None = None

    def __post_init__(self):
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_init <= 0:
            raise ConfigError(f"lr_init must be > 0, got {self.lr_init}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.schedule not in ("halve", "constant"):
            raise ConfigError(f"schedule must be 'halve' or 'constant', got {self.schedule!r}")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for a 1-based iteration index."""
        if self.schedule == "constant":
            return self.lr_init
        halvings = sum(
            1 for m in self.milestones if iteration > int(m * self.total_iters)
        )
        return self.lr_init * (0.5 ** halvings)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements (subgradient 0 at ties)."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss operands differ in shape: {pred.shape} vs {target.shape}")
    return mean_all(abs_val(sub(pred, target)))


class Adam:
    """Standard Adam with bias correction over named parameters."""

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params}
        self._v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                raise ConfigError(f"parameter {name!r} has no gradient")
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_gradients(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _assemble_batch(dataset: SrDataset, cfg: TrainConfig, scale: int,
                    rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    lr_stack, hr_stack = [], []
    for _ in range(cfg.batch_size):
        hr, lr = dataset.pair(int(rng.integers(0, len(dataset))))
        sample = sample_patch(hr, lr, cfg.patch_size, scale, rng)
        lr_stack.append(sample.lr_patch)
        hr_stack.append(sample.hr_patch)
    return Tensor(np.stack(lr_stack)), Tensor(np.stack(hr_stack))


def train_loop(model: CfsrModel, dataset: SrDataset, cfg: TrainConfig,
               out_dir) -> list[Path]:
    """Optimize the model on random augmented patches; write checkpoints + log.

    Checkpoints are named ``ckpt_{iter}.cfsrwt``; the log is a CSV with columns
    iter,loss,lr,elapsed_s.  A non-finite loss aborts with the iteration index.
    Returns the list of checkpoint paths, final checkpoint last.
    """
    if model.mode != "branched":
        raise ModeError("training requires a branched-mode model")
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    for i in range(len(dataset)):
        _, lr = dataset.pair(i)
        if cfg.patch_size > min(lr.height, lr.width):
            raise ConfigError(
                f"patch size {cfg.patch_size} exceeds LR image {lr.height}x{lr.width} "
                f"(dataset item {i})"
            )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    params = model.learnable_params()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    log_path = out_dir / "train_log.csv"
    checkpoints: list[Path] = []
    start = time.monotonic()

    def save_checkpoint(iteration: int) -> None:
        path = out_dir / f"ckpt_{iteration}.cfsrwt"
        model.state().save(path)
        checkpoints.append(path)

    with open(log_path, "w") as log:
        log.write("iter,loss,lr,elapsed_s\n")
        for iteration in range(1, cfg.total_iters + 1):
            lr_now = cfg.lr_at(iteration)
            x, target = _assemble_batch(dataset, cfg, model.cfg.scale, rng)
            with GradTape() as tape:
                pred = model(x)
                loss = l1_loss(pred, target)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NumericError(f"non-finite loss at iteration {iteration}")
                backward(loss, tape)
            if cfg.clip_norm is not None:
                clip_gradients(params, cfg.clip_norm)
            opt.step(lr_now)
            opt.zero_grad()
            log.write(f"{iteration},{loss_val:.8f},{lr_now:.3e},"
                      f"{time.monotonic() - start:.3f}\n")
            if cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
                save_checkpoint(iteration)
    if not checkpoints or checkpoints[-1].name != f"ckpt_{cfg.total_iters}.cfsrwt":
        save_checkpoint(cfg.total_iters)
    return checkpoints


def read_loss_curve(log_path) -> list[float]:
    """Loss column of a training log, in iteration order."""
    losses = []
    with open(log_path) as fh:
        next(fh)
        for line in fh:
            losses.append(float(line.split(",")[1]))
    return losses
