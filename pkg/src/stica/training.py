"""SGD pretraining loop: crop, encode, contrast, update.

One step draws two large input-space crops and an audio augmentation per
instance, encodes both crops once, spawns the feature-space views, and
optimizes the combined contrastive objective. Checkpoints capture
parameters, momentum buffers, counters and the rng state, and resuming
from one reproduces the uninterrupted run bit-exactly.
"""

import hashlib
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .augment import (
    AugmentParams,
    audio_augment,
    input_crop_resize,
    photometric_augment,
    sample_crop_tube,
    sample_view_sets,
)
from .data import iterate_batches
from .io_binary import CheckpointError, load_checkpoint, save_checkpoint
from .losses import cross_modal_loss, total_loss, within_modal_loss
from .tensor import NumericError, Tensor, backward, recording

__all__ = [
    "ScheduleSpec",
    "lr_schedule",
    "SGD",
    "StepMetrics",
    "TrainSettings",
    "TrainingAborted",
    "train_step",
    "run_pretraining",
    "save_training_checkpoint",
    "load_training_checkpoint",
    "config_digest",
    "METRICS_HEADER",
]

METRICS_HEADER = "step,epoch,lr,loss_total,loss_vv,loss_va"


class TrainingAborted(NumericError):
    """Run stopped after repeated non-finite losses."""


@dataclass
class ScheduleSpec:
    base_lr: float = 0.05
    warmup_epochs: int = 3
    steps_per_epoch: int = 20
    policy: str = "constant"  # or "step"
    milestones: tuple = ()
    factor: float = 1.0

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not 0.0 < self.factor <= 1.0:
            raise ValueError("factor must be in (0, 1]")
        if self.policy not in ("constant", "step"):
            raise ValueError(f"unknown schedule policy {self.policy!r}")


def lr_schedule(spec, step):
    """Linear warm-up to base_lr, then the configured post-warmup policy."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup_steps = spec.warmup_epochs * spec.steps_per_epoch
    if step < warmup_steps:
        return spec.base_lr * (step + 1) / warmup_steps
    if spec.policy == "constant":
        return spec.base_lr
    epoch = step // spec.steps_per_epoch
    drops = sum(1 for m in spec.milestones if epoch >= m)
    return spec.base_lr * spec.factor ** drops


class SGD:
    """Momentum SGD with coupled weight decay.

    buf <- momentum * buf + grad + wd * param; param <- param - lr * buf;
    gradients are reset to zero after every applied step.
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-5):
        if isinstance(params, OrderedDict):
            self.params = params
        else:
            self.params = OrderedDict((f"p{i}", p) for i, p in enumerate(params))
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = OrderedDict(
            (name, np.zeros_like(p.data)) for name, p in self.params.items()
        )
        self.step_count = 0

    def step(self, lr):
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"step aborted: non-finite gradient in {name}")
            buf = self.buffers[name]
            buf *= self.momentum
            buf += grad
            if self.weight_decay:
                buf += self.weight_decay * p.data
            p.data -= lr * buf
        self.zero_grad()
        self.step_count += 1

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class StepMetrics:
    step: int
    epoch: int
    lr: float
    loss_total: float
    loss_vv: float
    loss_va: float

    def csv_row(self):
        return (f"{self.step},{self.epoch},{self.lr!r},"
                f"{self.loss_total!r},{self.loss_vv!r},{self.loss_va!r}")


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    checkpoint_every: int = 10
    area_range: tuple = (0.4, 1.0)
    aspect_range: tuple = (0.75, 4.0 / 3.0)
    augment: AugmentParams = field(default_factory=lambda: AugmentParams(
        flip_prob=0.5, brightness=0.2, contrast=0.2, audio_gain=0.25))


def _augment_batch(batch, model, settings, rng):
    """Two large input crops plus an audio augmentation per instance."""
    t0, h0, w0 = model.visual_cfg.ref_input
    crops1, crops2, audios = [], [], []
    for inst in batch:
        t = inst.video.shape[1]
        pair = []
        for _ in range(2):
            tube = sample_crop_tube((t, inst.video.shape[2], inst.video.shape[3]),
                                    settings.area_range, settings.aspect_range, t0, rng)
            view = input_crop_resize(inst.video, tube, (h0, w0))
            pair.append(photometric_augment(view, settings.augment, rng))
        crops1.append(pair[0])
        crops2.append(pair[1])
        audios.append(audio_augment(inst.audio, settings.augment, rng))
    return np.stack(crops1), np.stack(crops2), np.stack(audios)


def train_step(batch, model, optimizer, weights, plan, lr, settings, rng):
    """One optimization step; returns the loss components actually used."""
    crops1, crops2, audios = _augment_batch(batch, model, settings, rng)
    with recording():
        feat1 = model.visual(Tensor(crops1))
        feat2 = model.visual(Tensor(crops2))

        def embed(view, offsets):
            return model.embed_view(view, None, offsets)

        set1, set2 = sample_view_sets(feat1, feat2, plan, rng, embed)
        use_vv = weights.lambda_vv > 0 and (plan.m + plan.n) > 0
        l_vv = within_modal_loss(set1, set2, weights.tau_within) if use_vv else Tensor(0.0)
        if weights.lambda_va > 0:
            z_audio = model.embed_audio(Tensor(audios))
            l_va = cross_modal_loss(set1.large, set2.large, z_audio, weights.tau_cross)
        else:
            l_va = Tensor(0.0)
        loss = total_loss(l_vv, l_va, weights)
        finite = np.isfinite(loss.item())
        if finite and loss._entry is not None:
            backward(loss)
            optimizer.step(lr)
    return loss.item(), l_vv.item(), l_va.item(), finite


def config_digest(text):
    return hashlib.sha256(text.encode("utf-8")).digest()


def save_training_checkpoint(path, model, optimizer, step, epoch, rng, digest):
    arrays = OrderedDict()
    for name, p in model.named_parameters().items():
        arrays[f"param/{name}"] = p.data
    for name, buf in optimizer.buffers.items():
        arrays[f"momentum/{name}"] = buf
    save_checkpoint(path, arrays, step, epoch, rng, digest)


def load_training_checkpoint(path, model, optimizer=None, rng=None):
    """Restore parameters (and optionally buffers and rng) from a checkpoint.

    Returns (step, epoch, digest).
    """
    arrays, step, epoch, blob, digest = load_checkpoint(path)
    params = model.named_parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {key}")
        stored = arrays[key]
        if stored.shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint tensor {key} has shape {stored.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data[...] = stored
    if optimizer is not None:
        for name, buf in optimizer.buffers.items():
            key = f"momentum/{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing tensor {key}")
            buf[...] = arrays[key]
    if rng is not None:
        from .io_binary import unpack_rng_state

        unpack_rng_state(blob, rng)
    return step, epoch, digest


def run_pretraining(model, dataset, optimizer, schedule, weights, plan, settings,
                    rng, out_dir=None, digest=b"\x00" * 32, start_epoch=0,
                    start_step=0, log=None):
    """Epoch loop over shuffled batches; emits one metrics row per step.

    Aborts with TrainingAborted after two consecutive non-finite losses.
    Writes `metrics.csv` and periodic checkpoints under `out_dir` when given.
    """
    metrics = []
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = open(os.path.join(out_dir, "metrics.csv"), "w")
        writer.write(METRICS_HEADER + "\n")
    step = start_step
    bad_streak = 0
    try:
        for epoch in range(start_epoch, settings.epochs):
            for batch in iterate_batches(dataset.train, settings.batch_size, rng):
                lr = lr_schedule(schedule, step)
                loss, l_vv, l_va, finite = train_step(
                    batch, model, optimizer, weights, plan, lr, settings, rng)
                row = StepMetrics(step, epoch, lr, loss, l_vv, l_va)
                metrics.append(row)
                if writer is not None:
                    writer.write(row.csv_row() + "\n")
                if log is not None:
                    log(row)
                bad_streak = 0 if finite else bad_streak + 1
                if bad_streak >= 2:
                    raise TrainingAborted(
                        f"non-finite loss twice in a row at step {step}")
                step += 1
            if (out_dir is not None and settings.checkpoint_every > 0
                    and (epoch + 1) % settings.checkpoint_every == 0
                    and epoch + 1 < settings.epochs):
                path = os.path.join(out_dir, f"checkpoint_epoch_{epoch + 1:04d}.stca")
                save_training_checkpoint(path, model, optimizer, step, epoch + 1,
                                         rng, digest)
        if out_dir is not None:
            save_training_checkpoint(os.path.join(out_dir, "checkpoint_final.stca"),
                                     model, optimizer, step, settings.epochs, rng, digest)
    finally:
        if writer is not None:
            writer.close()
    return metrics
