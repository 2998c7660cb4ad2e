"""Supervised multi-task training: task registry, SNR-balanced L1 loss,
patch sampling, the training loop, and synthetic desk-scale datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from . import tensor as T
from .metrics import psnr
from .noise import NoiseParams, sample_noise, sample_params
from .problem import ProblemInstance

__all__ = ["TaskSpec", "TrainConfig", "make_synthetic_dataset",
           "sample_batch", "task_loss", "train"]


@dataclass
class TaskSpec:
    """One training task: how to draw operators, noise levels, and data."""

    name: str
    kind: str  # identity | inpainting | blur | motion_blur | downsampling
    channels: int = 1
    sigma_range: object = 0.0
    gamma_range: object = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.channels not in (1, 2, 3):
            raise ValueError("channel count must be 1, 2, or 3")
        self._fixed_kernel = None

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "channels": self.channels,
                "sigma_range": self.sigma_range, "gamma_range": self.gamma_range,
                "params": self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        def as_range(v):
            return tuple(v) if isinstance(v, list) else v

        return cls(name=d["name"], kind=d["kind"], channels=int(d.get("channels", 1)),
                   sigma_range=as_range(d.get("sigma_range", 0.0)),
                   gamma_range=as_range(d.get("gamma_range")),
                   params=dict(d.get("params", {})))

    def draw_operator(self, shape, rng) -> ops.OperatorHandle:
        if self.kind == "identity":
            return ops.identity_operator(shape)
        if self.kind == "inpainting":
            lo, hi = self.params.get("p_range", (0.3, 0.9))
            p = float(rng.uniform(lo, hi))
            mask = ops.make_bernoulli_mask(shape, p, seed=int(rng.integers(2 ** 31)))
            return ops.make_inpainting(mask)
        if self.kind == "blur":
            # deterministic task: kernel fixed for the task's lifetime
            if self._fixed_kernel is None:
                self._fixed_kernel = ops.make_gaussian_kernel(
                    self.params.get("sigma_blur", 1.0), self.params.get("kernel_size", 7))
            return ops.make_blur(self._fixed_kernel, shape)
        if self.kind == "motion_blur":
            kern = ops.make_motion_kernel(
                self.params.get("length_scale", 0.6), self.params.get("amplitude", 0.5),
                self.params.get("kernel_size", 7), seed=int(rng.integers(2 ** 31)))
            return ops.make_blur(kern, shape)
        if self.kind == "downsampling":
            return ops.make_downsampling(
                self.params.get("factor", 2), self.params.get("filter", "bicubic"), shape)
        raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    lr_decay_step: int = 1800
    patch_size: int = 32
    sigma_floor: float = 1e-3
    seed: int = 0
    log_every: int = 50
    log_path: object = None
    checkpoint_path: object = None
    checkpoint_every: int = 500

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.patch_size,
               self.lr_decay_step, self.log_every, self.checkpoint_every) < 1:
            raise ValueError("config values must be positive")
        if self.lr <= 0 or self.sigma_floor <= 0:
            raise ValueError("config values must be positive")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch_size": self.batch_size, "lr": self.lr,
                "lr_decay_step": self.lr_decay_step, "patch_size": self.patch_size,
                "sigma_floor": self.sigma_floor, "seed": self.seed,
                "log_every": self.log_every}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        base = cls()
        kw = {k: d.get(k, getattr(base, k)) for k in base.to_dict()}
        return cls(**kw)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def make_synthetic_dataset(kind: str, count: int, shape, seed: int = 0) -> list:
    """Deterministic synthetic images in [0, 1]; shape is (C, H, W)."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(count):
        if kind == "piecewise-constant":
            img = np.full((h, w), rng.uniform(0.1, 0.4))
            for _ in range(rng.integers(2, 6)):
                t, l = rng.integers(0, h - 2), rng.integers(0, w - 2)
                bh = int(rng.integers(2, max(3, h // 2)))
                bw = int(rng.integers(2, max(3, w // 2)))
                img[t:t + bh, l:l + bw] = rng.uniform(0, 1)
        elif kind == "smooth-bumps":
            yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
            img = np.zeros((h, w))
            for _ in range(rng.integers(2, 5)):
                cy, cx = rng.uniform(0, 1, 2)
                s = rng.uniform(0.08, 0.25)
                img += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s ** 2))
            img /= max(img.max(), 1e-9)
        elif kind == "text-like":
            img = np.full((h, w), 0.95)
            for _ in range(rng.integers(4, 10)):
                r0, c0 = rng.integers(1, h - 1), rng.integers(1, w - 1)
                length = int(rng.integers(2, max(3, w // 3)))
                if rng.random() < 0.5:
                    img[r0, c0:c0 + length] = rng.uniform(0, 0.2)
                else:
                    img[r0:r0 + length, c0] = rng.uniform(0, 0.2)
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
        images.append(np.broadcast_to(np.clip(img, 0, 1), (c, h, w)).copy())
    return images


def _random_patch(img: np.ndarray, size: int, rng) -> np.ndarray:
    c, h, w = img.shape
    if h < size or w < size:
        ph, pw = max(0, size - h), max(0, size - w)
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        c, h, w = img.shape
    t = int(rng.integers(0, h - size + 1))
    l = int(rng.integers(0, w - size + 1))
    return img[:, t:t + size, l:l + size].copy()


def sample_batch(task: TaskSpec, dataset: list, batch: int, patch: int,
                 seed: int = 0) -> list:
    """Draw ``batch`` problem instances: random patch, fresh operator (per
    task policy), noise parameters, and a simulated measurement."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(batch):
        x = _random_patch(dataset[int(rng.integers(len(dataset)))], patch, rng)
        op = task.draw_operator(x.shape, rng)
        nz = sample_params(task.sigma_range, task.gamma_range,
                           seed=int(rng.integers(2 ** 31)))
        y, _ = sample_noise(op.apply(x), nz, seed=int(rng.integers(2 ** 31)))
        out.append(ProblemInstance(op=op, y=y, noise=nz, x=x, seed=seed))
    return out


# ---------------------------------------------------------------------------
# loss and loop
# ---------------------------------------------------------------------------


def snr_weight(op, y, sigma, sigma_floor=1e-3) -> float:
    """omega = ||A^T y||_2 / max(sigma, floor), balancing tasks and noise
    levels."""
    return float(np.linalg.norm(op.adjoint(y))) / max(sigma, sigma_floor)


def task_loss(model, inst: ProblemInstance, sigma_floor: float = 1e-3) -> T.Tensor:
    """Weighted L1 reconstruction loss, differentiable in the model."""
    if inst.x is None:
        raise ValueError("supervised loss needs a ground truth")
    out = model.forward(inst.y, inst.op, inst.noise)
    omega = snr_weight(inst.op, inst.y, inst.noise.sigma, sigma_floor)
    return T.constant(omega) * T.sum_all(T.abs_val(out - T.constant(inst.x[None])))


def train(model, tasks: list, cfg: TrainConfig, datasets: dict) -> dict:
    """Joint multi-task loop: per step one batch per task, losses summed,
    one Adam step; lr is divided by 10 at the decay step.

    ``datasets`` maps task name -> image list.  Returns a report with the
    loss trajectory and final per-task train PSNR next to the A^T y
    baseline.
    """
    if not tasks:
        raise ValueError("need at least one task")
    opt = T.AdamOptimizer(model.parameters(), lr=cfg.lr)
    log_rows = []
    loss_history = []
    for step in range(cfg.steps):
        if step == cfg.lr_decay_step:
            opt.lr = cfg.lr / 10.0
        opt.zero_grad()
        total = 0.0
        per_task = {}
        for ti, task in enumerate(tasks):
            batch = sample_batch(task, datasets[task.name], cfg.batch_size,
                                 cfg.patch_size, seed=cfg.seed * 1000003 + step * 131 + ti)
            task_total = None
            for inst in batch:
                loss = task_loss(model, inst, cfg.sigma_floor)
                task_total = loss if task_total is None else task_total + loss
            task_total.backward()
            per_task[task.name] = task_total.item()
            total += task_total.item()
        if not np.isfinite(total):
            raise RuntimeError(f"training diverged at step {step}: loss {total}")
        opt.step()
        loss_history.append(total)
        if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
            for task in tasks:
                log_rows.append({"step": step + 1, "task": task.name,
                                 "loss": per_task[task.name],
                                 "psnr": _train_psnr(model, task, datasets[task.name], cfg)})
        if cfg.checkpoint_path and ((step + 1) % cfg.checkpoint_every == 0
                                    or step == cfg.steps - 1):
            model.save_checkpoint(cfg.checkpoint_path)
    if cfg.log_path:
        with open(cfg.log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "task", "loss", "psnr"])
            writer.writeheader()
            writer.writerows(log_rows)
    report = {"steps": cfg.steps, "loss_history": loss_history, "log": log_rows,
              "task_psnr": {}, "baseline_psnr": {}}
    for task in tasks:
        model_db, base_db = _eval_task(model, task, datasets[task.name], cfg)
        report["task_psnr"][task.name] = model_db
        report["baseline_psnr"][task.name] = base_db
    return report


def _eval_batch(task: TaskSpec, dataset, cfg: TrainConfig, n=8):
    return sample_batch(task, dataset, n, cfg.patch_size, seed=cfg.seed * 7 + 999331)


def _train_psnr(model, task, dataset, cfg) -> float:
    vals = [psnr(inst.x, model.reconstruct(inst.y, inst.op, inst.noise))
            for inst in _eval_batch(task, dataset, cfg, n=4)]
    return float(np.mean(vals))


def _eval_task(model, task, dataset, cfg):
    model_vals, base_vals = [], []
    for inst in _eval_batch(task, dataset, cfg, n=16):
        model_vals.append(psnr(inst.x, model.reconstruct(inst.y, inst.op, inst.noise)))
        base_vals.append(psnr(inst.x, inst.op.adjoint(inst.y)))
    return float(np.mean(model_vals)), float(np.mean(base_vals))
