"""Distillation loop: learning-rate schedules, gradient assembly, updates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch

from ..camera import Camera, PoseDistribution, sample_refine_pose
from ..fields import FieldSet
from ..render import RenderConfig, render_image
from .providers import ScoreProvider, lora_regression_step, predict_epsilon
from .schedule import DiffusionSchedule, Parameterization, add_noise, v_from_epsilon


class NumericalAbort(RuntimeError):
    def __init__(self, block: str, step: int):
        super().__init__(f"non-finite gradient in parameter block {block!r} at step {step}")
        self.block = block
        self.step = step


@dataclass
class LRSchedule:
    volume_lo: float = 1e-3
    volume_hi: float = 1e-2
    ramp_fraction: float = 0.5
    texture_hi: float = 1e-2
    texture_lo: float = 1e-3

    def __post_init__(self):
        if not 0 < self.ramp_fraction <= 1:
            raise ValueError("ramp_fraction must be in (0, 1]")
        if self.volume_lo > self.volume_hi or self.texture_lo > self.texture_hi:
            raise ValueError("learning-rate bounds need lo <= hi")
        if min(self.volume_lo, self.texture_lo) <= 0:
            raise ValueError("learning rates must be positive")


def lr_schedule(step: int, total: int, sched: LRSchedule) -> tuple[float, float]:
    """(volume rate, hash-texture rate) at ``step`` of ``total``.

    Volume ramps linearly lo -> hi over the first ``ramp_fraction`` of the run
    and then holds; the texture rate follows a cosine decay hi -> lo.
    """
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    last = total - 1
    if last == 0:
        return sched.volume_lo, sched.texture_hi
    ramp = sched.ramp_fraction * last
    frac = min(step / ramp, 1.0)
    # weighted-sum form hits both endpoints exactly
    eta1 = sched.volume_lo * (1.0 - frac) + sched.volume_hi * frac
    c = 0.5 * (1.0 + math.cos(math.pi * step / last))
    eta2 = sched.texture_lo * (1.0 - c) + sched.texture_hi * c
    return eta1, eta2


@dataclass
class RefineConfig:
    iterations: int = 1000
    batch: int = 1
    lr: LRSchedule = field(default_factory=LRSchedule)
    lr_texture_mlp: float = 1e-3
    lr_lora: float = 1e-3
    seed: int = 0
    condition: int = 0
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch < 1:
            raise ValueError("batch (particle count) must be >= 1")
        if self.lr_texture_mlp <= 0 or self.lr_lora <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TraceRow:
    step: int
    eta1: float
    eta2: float
    vsd_norm: float
    lora_loss: float


def write_trace_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "eta1", "eta2", "vsd_norm", "lora_loss"])
        for r in rows:
            w.writerow([r.step, repr(r.eta1), repr(r.eta2), repr(r.vsd_norm), repr(r.lora_loss)])


def vsd_pixel_gradient(x_t, t: int, eps_pretrain, eps_lora, schedule: DiffusionSchedule):
    """w(t) (eps_pretrain - eps_lora), the per-pixel gradient w.r.t. the render."""
    if tuple(np.shape(eps_pretrain)) != tuple(np.shape(eps_lora)) or tuple(np.shape(x_t)) != tuple(np.shape(eps_lora)):
        raise ValueError("x_t and both noise predictions must share a shape")
    return schedule.weight(t) * (eps_pretrain - eps_lora)


class Scene(Protocol):
    def blocks(self) -> dict[str, list[torch.Tensor]]: ...

    def render(self, camera: Camera) -> torch.Tensor: ...


class FieldScene:
    """Color renders of a field set; blocks are volume, hash and texture."""

    def __init__(self, fieldset: FieldSet, config: RenderConfig):
        self.fieldset = fieldset
        self.config = config

    def blocks(self):
        return self.fieldset.parameter_blocks()

    def render(self, camera):
        return render_image(self.fieldset, camera, self.config, with_normals=False).color


class IdentityScene:
    """The image is the parameter: render(camera) returns the pixels."""

    def __init__(self, pixels):
        self.pixels = torch.nn.Parameter(torch.as_tensor(np.asarray(pixels, dtype=np.float64)).clone())

    def blocks(self):
        return {"volume": [self.pixels]}

    def render(self, camera):
        return self.pixels


RateFn = Callable[[int], dict[str, float]]


def refine_rates(config: RefineConfig) -> RateFn:
    def rates(step):
        eta1, eta2 = lr_schedule(step, max(config.iterations, 1), config.lr)
        return {"volume": eta1, "hash": eta2, "texture": config.lr_texture_mlp}

    return rates


def run_vsd(
    scene: Scene,
    pretrained: ScoreProvider,
    lora: ScoreProvider,
    poses: PoseDistribution,
    schedule: DiffusionSchedule,
    iterations: int,
    rates: RateFn,
    lr_lora: float,
    seed: int = 0,
    condition: int = 0,
    batch: int = 1,
    grad_clip: float = 10.0,
    after_step: Callable[[], None] | None = None,
) -> list[TraceRow]:
    """Generic distillation loop over any scene exposing parameter blocks."""
    rng = np.random.default_rng(seed)
    blocks = scene.blocks()
    trace: list[TraceRow] = []
    for step in range(iterations):
        lr = rates(step)
        vsd_sq, lora_losses = 0.0, []
        for p in (p for ps in blocks.values() for p in ps):
            p.grad = None
        for _ in range(batch):
            camera, pose = sample_refine_pose(poses, rng)
            with torch.enable_grad():
                x = scene.render(camera)
            t = schedule.sample_t(rng)
            eps = torch.as_tensor(rng.standard_normal(tuple(x.shape)))
            x0 = x.detach()
            x_t = add_noise(x0, t, eps, schedule)
            with torch.no_grad():
                e_pre = predict_epsilon(pretrained, x_t, t, schedule, condition, pose)
                e_lora = predict_epsilon(lora, x_t, t, schedule, condition, pose)
            g = vsd_pixel_gradient(x_t, t, e_pre, e_lora, schedule) / batch
            vsd_sq += float((g * g).sum())
            if x.requires_grad:
                x.backward(g)
            if lora.trainable:
                target = eps if lora.parameterization is Parameterization.EPSILON else v_from_epsilon(eps, x0, t, schedule)
                lora_losses.append((x_t, t, pose, target))
        with torch.no_grad():
            for name, params in blocks.items():
                grads = [p.grad for p in params if p.grad is not None]
                if not grads:
                    continue
                if not all(torch.isfinite(gr).all() for gr in grads):
                    raise NumericalAbort(name, step)
                norm = math.sqrt(sum(float((gr * gr).sum()) for gr in grads))
                scale = grad_clip / norm if grad_clip and norm > grad_clip else 1.0
                rate = lr.get(name, 0.0)
                for p in params:
                    if p.grad is not None:
                        p -= (rate * scale) * p.grad
                        p.grad = None
        if after_step is not None:
            after_step()
        lora_loss = 0.0
        for x_t, t, pose, target in lora_losses:
            lora_loss += lora_regression_step(lora, x_t, t, condition, pose, target, lr_lora) / len(lora_losses)
        trace.append(TraceRow(step, lr.get("volume", 0.0), lr.get("hash", 0.0), math.sqrt(vsd_sq), lora_loss))
    return trace


def refine_loop(
    fieldset: FieldSet,
    pretrained: ScoreProvider,
    lora: ScoreProvider,
    poses: PoseDistribution,
    schedule: DiffusionSchedule,
    config: RefineConfig,
    render_config: RenderConfig | None = None,
    scene: Scene | None = None,
):
    """Priors refinement: optimize volume, hash tables and texture decoder.

    The geometry decoder stays frozen; its checksum is verified on exit.
    Returns ``(fieldset, trace)``.
    """
    scene = scene or FieldScene(fieldset, render_config or RenderConfig())
    before = fieldset.geometry_checksum() if fieldset is not None else None
    trace = run_vsd(
        scene,
        pretrained,
        lora,
        poses,
        schedule,
        config.iterations,
        refine_rates(config),
        config.lr_lora,
        seed=config.seed,
        condition=config.condition,
        batch=config.batch,
        grad_clip=config.grad_clip,
    )
    if fieldset is not None and fieldset.geometry_checksum() != before:
        raise RuntimeError("geometry decoder parameters changed during refinement")
    return fieldset, trace
