"""Toy downstream task: shape classification plus center localization.

The head turns a 3x64x64 image into a four-level feature pyramid (strides 4,
8, 16, 32); the tail predicts the shape class from pooled P5 and the shape
center from a P2 heatmap with sub-cell offsets. Head and tail bracket the
feature codec exactly like a detector's backbone and heads would.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, concat, no_grad, tensor
from .errors import ContractError
from .layers import LEAKY_SLOPE, Conv2d
from .optim import Adam, cosine_lr
from .params import ParamStore, fnv1a64
from .rng import Xoshiro256, derive_seed
from .toydata import CLASS_NAMES, IMAGE_SIZE, FeaturePyramid, ToyImage

P2_STRIDE = 4  # pixels per P2 cell
LOC_HIT_RADIUS = 4.0  # pixels


@dataclass
class TaskPrediction:
    class_logits: np.ndarray        # (3,)
    center_estimate: tuple[float, float]  # (row, col), clamped to image bounds

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_logits))


@dataclass
class AccuracyReport:
    class_acc: float
    loc_hit: float

    def combined(self) -> float:
        return 0.5 * (self.class_acc + self.loc_hit)


class TaskModel:
    """Head + tail parameters and forward passes."""

    ARCH = "task-head-tail/v1 ch32 strides4-2-2-2"

    def __init__(self, seed: int = 0):
        ps = ParamStore()
        rng = Xoshiro256(derive_seed(seed, "task-init"))
        ch = 32
        self.stem1 = Conv2d(ps, "head.stem1", 3, ch, 3, stride=2, pad=1, rng=rng)
        self.stem2 = Conv2d(ps, "head.stem2", ch, ch, 3, stride=2, pad=1, rng=rng)
        self.down3 = Conv2d(ps, "head.down3", ch, ch, 3, stride=2, pad=1, rng=rng)
        self.down4 = Conv2d(ps, "head.down4", ch, ch, 3, stride=2, pad=1, rng=rng)
        self.down5 = Conv2d(ps, "head.down5", ch, ch, 3, stride=2, pad=1, rng=rng)
        self.lat = {lvl: Conv2d(ps, f"head.lat{lvl}", ch, ch, 3, pad=1, rng=rng)
                    for lvl in (2, 3, 4, 5)}
        self.cls1 = Conv2d(ps, "tail.cls1", ch, 16, 1, rng=rng)
        self.cls2 = Conv2d(ps, "tail.cls2", 16, len(CLASS_NAMES), 1, rng=rng)
        self.loc1 = Conv2d(ps, "tail.loc1", ch, 16, 3, pad=1, rng=rng)
        self.loc2 = Conv2d(ps, "tail.loc2", 16, 3, 1, rng=rng)
        ps.set_meta("arch_hash", float(fnv1a64(self.ARCH.encode()) % 2 ** 24))
        self.ps = ps

    # -- forward ---------------------------------------------------------

    def head_batch(self, x: Tensor) -> dict[int, Tensor]:
        c2 = self.stem2(self.stem1(x).leaky_relu(LEAKY_SLOPE)).leaky_relu(LEAKY_SLOPE)
        c3 = self.down3(c2).leaky_relu(LEAKY_SLOPE)
        c4 = self.down4(c3).leaky_relu(LEAKY_SLOPE)
        c5 = self.down5(c4).leaky_relu(LEAKY_SLOPE)
        feats = {2: c2, 3: c3, 4: c4, 5: c5}
        return {lvl: self.lat[lvl](feats[lvl]) for lvl in (2, 3, 4, 5)}

    def tail_batch(self, pyr: dict[int, Tensor]) -> tuple[Tensor, Tensor]:
        pooled = pyr[5].mean(axis=(2, 3), keepdims=True)
        logits = self.cls2(self.cls1(pooled).leaky_relu(LEAKY_SLOPE))
        loc = self.loc2(self.loc1(pyr[2]).leaky_relu(LEAKY_SLOPE))
        return logits.reshape((logits.shape[0], len(CLASS_NAMES))), loc

    # -- public single/batch task ops -------------------------------------

    def task_head(self, image: ToyImage) -> FeaturePyramid:
        self.ps.require_trained("task head")
        return self.pyramids([image])[0]

    def pyramids(self, images: list[ToyImage], batch: int = 32) -> list[FeaturePyramid]:
        self.ps.require_trained("task head")
        out: list[FeaturePyramid] = []
        with no_grad():
            for i in range(0, len(images), batch):
                x = tensor(np.stack([im.pixels for im in images[i:i + batch]]))
                pyr = self.head_batch(x)
                arrs = {lvl: pyr[lvl].data for lvl in (2, 3, 4, 5)}
                for j in range(x.shape[0]):
                    out.append(FeaturePyramid(arrs[2][j], arrs[3][j],
                                              arrs[4][j], arrs[5][j]))
        return out

    def task_tail(self, pyramid: FeaturePyramid) -> TaskPrediction:
        return self.predict([pyramid])[0]

    def predict(self, pyramids: list[FeaturePyramid], batch: int = 64
                ) -> list[TaskPrediction]:
        self.ps.require_trained("task tail")
        preds: list[TaskPrediction] = []
        with no_grad():
            for i in range(0, len(pyramids), batch):
                chunk = pyramids[i:i + batch]
                pyr = {lvl: tensor(np.stack([p.levels()[lvl - 2] for p in chunk]))
                       for lvl in (2, 3, 4, 5)}
                logits, loc = self.tail_batch(pyr)
                preds.extend(self._decode(logits.data, loc.data))
        return preds

    @staticmethod
    def _decode(logits: np.ndarray, loc: np.ndarray) -> list[TaskPrediction]:
        out = []
        n, _, gh, gw = loc.shape
        for i in range(n):
            heat = loc[i, 0]
            flat = int(np.argmax(heat))
            ci, cj = divmod(flat, gw)
            off_r = 1.0 / (1.0 + np.exp(-loc[i, 1, ci, cj]))
            off_c = 1.0 / (1.0 + np.exp(-loc[i, 2, ci, cj]))
            row = float(np.clip((ci + off_r) * P2_STRIDE, 0.0, IMAGE_SIZE - 1))
            col = float(np.clip((cj + off_c) * P2_STRIDE, 0.0, IMAGE_SIZE - 1))
            out.append(TaskPrediction(class_logits=logits[i].copy(),
                                      center_estimate=(row, col)))
        return out

    # -- training ----------------------------------------------------------

    def _loss(self, images: list[ToyImage]) -> Tensor:
        x = tensor(np.stack([im.pixels for im in images]))
        n = len(images)
        pyr = self.head_batch(x)
        logits, loc = self.tail_batch(pyr)

        labels = np.array([im.label for im in images])
        onehot = np.zeros((n, len(CLASS_NAMES)))
        onehot[np.arange(n), labels] = 1.0
        shift = logits - tensor(np.max(logits.data, axis=1, keepdims=True))
        lse = shift.exp().sum(axis=1, keepdims=True).log()
        logp = shift - concat([lse] * len(CLASS_NAMES), axis=1)
        ce = -(logp * tensor(onehot)).sum() * (1.0 / n)

        gh = loc.shape[2]
        heat_target = np.zeros((n, 1, gh, gh))
        off_target = np.zeros((n, 2, gh, gh))
        off_mask = np.zeros((n, 2, gh, gh))
        for i, im in enumerate(images):
            ci = min(int(im.center[0] / P2_STRIDE), gh - 1)
            cj = min(int(im.center[1] / P2_STRIDE), gh - 1)
            heat_target[i, 0, ci, cj] = 1.0
            off_target[i, 0, ci, cj] = im.center[0] / P2_STRIDE - ci
            off_target[i, 1, ci, cj] = im.center[1] / P2_STRIDE - cj
            off_mask[i, :, ci, cj] = 1.0
        heat = loc.slice_axis(1, 0, 1)
        offs = loc.slice_axis(1, 1, 3).sigmoid()
        heat_loss = ad.sum_squares(heat - tensor(heat_target)) * (1.0 / n)
        diff = (offs - tensor(off_target)) * tensor(off_mask)
        off_loss = ad.sum_squares(diff) * (1.0 / n)
        return ce + 2.0 * heat_loss + 4.0 * off_loss

    def train(self, dataset: list[ToyImage], steps: int, lr: float = 1e-3,
              batch: int = 16, seed: int = 0, log=None) -> None:
        if not dataset:
            raise ContractError("cannot train the task model on an empty dataset")
        opt = Adam(self.ps.trainable(), lr=lr)
        order_rng = Xoshiro256(derive_seed(seed, "task-batches"))
        for step in range(steps):
            idx = order_rng.integers(len(dataset), batch)
            loss = self._loss([dataset[i] for i in idx])
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(lr, step, steps))
            if log is not None and (step % 100 == 0 or step == steps - 1):
                log(step, float(loss.data))
        self.ps.mark_trained()


def task_accuracy(preds: list[TaskPrediction],
                  truths: list[ToyImage]) -> AccuracyReport:
    """Fraction of correct classes and of centers within 4 px."""
    if len(preds) != len(truths):
        raise ContractError("predictions and truths must have equal length")
    if not preds:
        raise ContractError("cannot score an empty prediction list")
    cls_ok = 0
    loc_ok = 0
    for p, t in zip(preds, truths):
        if p.label == t.label:
            cls_ok += 1
        dr = p.center_estimate[0] - t.center[0]
        dc = p.center_estimate[1] - t.center[1]
        if (dr * dr + dc * dc) ** 0.5 <= LOC_HIT_RADIUS:
            loc_ok += 1
    return AccuracyReport(class_acc=cls_ok / len(preds), loc_hit=loc_ok / len(preds))
