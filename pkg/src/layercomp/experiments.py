"""Frozen-encoder training of the merger and a linear projector.

Only the merger MLP and the projector are updated; every encoder weight is
left untouched. The objective asks the compressed encoder output, after the
projector, to reconstruct the average-pooled patch embeddings of the same
image, which is a direct probe of how much information survives the merge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, EncoderParams, encode, patch_embed
from .errors import EvaluationError
from .grid import avg_pool2d
from .pml import MergerVariant, PMLParams
from .tensor import GradTape, Tensor, backward


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr: float = 0.05
    seed: int = 7
    batch: int = 4
    objective: str = "reconstruct_pooled"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.objective != "reconstruct_pooled":
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class Projector:
    w: Tensor
    b: Tensor

    @classmethod
    def identity(cls, d: int) -> "Projector":
        return cls(Tensor(np.eye(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))

    def __call__(self, tokens: Tensor) -> Tensor:
        return tokens @ self.w + self.b

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    pml_grad_norms: list[float] = field(default_factory=list)
    pml: PMLParams | None = None
    projector: Projector | None = None

    def rows(self):
        for step, (loss, norm) in enumerate(zip(self.losses, self.pml_grad_norms)):
            yield {"step": step, "loss": loss, "pml_grad_norm": norm}


def synth_batch(seed: int, n: int, cfg: EncoderConfig, params: EncoderParams, r: int):
    """Deterministic random images and their pooled patch-embedding targets.

    Returns ``(images, targets)``; each target is an ``(N / r^2) x d`` matrix.
    """
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    images, targets = [], []
    for _ in range(n):
        image = Tensor(rng.random((cfg.image_edge, cfg.image_edge, 3)))
        pooled = avg_pool2d(patch_embed(image, params.patch_w, params.patch_b, cfg.patch), r)
        images.append(image)
        targets.append(Tensor(pooled.tokens().data))
    return images, targets


def reconstruction_loss(
    images, targets, params: EncoderParams, projector: Projector,
    cfg: EncoderConfig, k: int, r: int, variant,
) -> Tensor:
    """Mean squared error per image, averaged over the batch."""
    total = None
    for image, target in zip(images, targets):
        out = projector(encode(image, params, cfg, k, r, variant).tokens())
        diff = out - target
        err = (diff * diff).mean()
        total = err if total is None else total + err
    return total * (1.0 / len(images))


def train_stage1(
    params: EncoderParams,
    tcfg: TrainConfig,
    ecfg: EncoderConfig,
    k: int,
    r: int,
    variant=MergerVariant.PML_WITH_RESIDUAL,
    projector: Projector | None = None,
) -> TrainLog:
    """Plain gradient descent on the merger and projector for ``tcfg.steps`` steps.

    ``params.pml`` and ``projector`` are updated in place. ``losses[i]`` is
    the loss before update ``i``, so ``losses[0]`` is the loss at init.
    """
    variant = MergerVariant.parse(variant)
    projector = projector or Projector.identity(ecfg.d)
    images, targets = synth_batch(tcfg.seed, tcfg.batch, ecfg, params, r)
    pml = params.pml.tensors()
    trainable = pml + projector.tensors()

    frozen = params.encoder_tensors()
    saved = [t.requires_grad for t in frozen]
    for t in frozen:
        t.requires_grad = False
    for t in trainable:
        t.requires_grad = True

    log = TrainLog(pml=params.pml, projector=projector)
    try:
        for step in range(tcfg.steps):
            with GradTape() as tape:
                loss = reconstruction_loss(images, targets, params, projector, ecfg, k, r, variant)
            value = loss.item()
            if not math.isfinite(value):
                raise EvaluationError(f"loss became non-finite ({value}) at step {step}")
            grads = backward(loss, tape, wrt=trainable)
            log.losses.append(value)
            log.pml_grad_norms.append(math.sqrt(sum(float((grads[t] ** 2).sum()) for t in pml)))
            for t in trainable:
                t.data = t.data - tcfg.lr * grads[t]
    finally:
        for t, flag in zip(frozen, saved):
            t.requires_grad = flag
    return log
