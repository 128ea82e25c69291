"""Minimizing the weighted alignment objective on seen classes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import IO

import numpy as np

from . import numerics as nx
from .data import BatchSampler, FeatureTable, SplitSpec
from .losses import (
    GZSL_WEIGHTS,
    TERMS,
    ZSL_WEIGHTS,
    LossWeights,
    encode_batch,
    total_loss,
    total_loss_stacked,
)
from .model import VaeDims, VaePair, init_params


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, breakdown: dict):
        self.step, self.breakdown = step, breakdown
        super().__init__(f"non-finite loss or gradient at step {step}: {breakdown}")


@dataclass
class HyperParams:
    weights: LossWeights = field(default_factory=LossWeights)
    c: int = 5
    k: int = 5
    epochs: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 0  # linear ramp of λ1..λ5, off by default
    dims: VaeDims = field(default_factory=VaeDims)
    n_gen: int = 200
    clf_epochs: int = 50
    clf_learning_rate: float = 1e-2
    eval_on_sample: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("optimizer betas must be in [0, 1) and eps > 0")
        if self.c < 1 or self.k < 1:
            raise ValueError("c and k must be >= 1")
        w = self.weights
        if w.lambda3 > 0 and self.k < 2:
            raise ValueError("visual-to-visual contrast needs k >= 2")
        if (w.lambda4 > 0 or w.lambda5 > 0 or w.lambda3 > 0) and self.c < 2:
            raise ValueError("contrastive terms need c >= 2")
        if self.n_gen < 1 or self.clf_epochs < 1 or self.clf_learning_rate <= 0:
            raise ValueError("classifier settings must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        self.dims.validate()

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "HyperParams":
        doc = dict(doc)
        doc["weights"] = LossWeights(**doc.get("weights", {}))
        doc["dims"] = VaeDims(**doc.get("dims", {}))
        return cls(**doc)


def preset(name: str, **overrides) -> HyperParams:
    """Default settings for ``zsl`` or ``gzsl``."""
    if name == "zsl":
        hp = HyperParams(weights=LossWeights(**ZSL_WEIGHTS), c=5, k=5)
    elif name == "gzsl":
        hp = HyperParams(weights=LossWeights(**GZSL_WEIGHTS), c=5, k=10)
    else:
        raise ValueError(f"unknown preset {name!r}; expected 'zsl' or 'gzsl'")
    return replace(hp, **overrides)


def synthetic_dims(visual_dim: int, semantic_dim: int) -> VaeDims:
    """Desk-scale network widths for small synthetic feature tables."""
    return VaeDims(
        visual_dim=visual_dim,
        semantic_dim=semantic_dim,
        visual_hidden=2 * visual_dim,
        semantic_hidden=2 * semantic_dim,
        latent_dim=64,
    )


class Adam:
    """Adaptive-moment optimizer on one flat parameter vector."""

    def __init__(self, size: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self._a = np.empty(size)
        self._b = np.empty(size)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of ``params``."""
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
        self.t += 1
        a, b = self._a, self._b
        self.m *= self.beta1
        np.multiply(grad, 1 - self.beta1, out=a)
        self.m += a
        self.v *= self.beta2
        np.multiply(grad, grad, out=a)
        a *= 1 - self.beta2
        self.v += a
        # bias-corrected moments: lr * m_hat / (sqrt(v_hat) + eps)
        np.divide(self.v, 1 - self.beta2**self.t, out=a)
        np.sqrt(a, out=a)
        a += self.eps
        np.multiply(self.m, self.lr / (1 - self.beta1**self.t), out=b)
        b /= a
        params -= b


def adam_step(params: np.ndarray, grads: np.ndarray, state: Adam) -> np.ndarray:
    """Functional form: returns updated copy of ``params``; ``state`` advances."""
    out = np.array(params, dtype=np.float64, copy=True)
    state.step(out, grads)
    return out


@dataclass
class TrainResult:
    model: VaePair
    history: list[dict]  # one entry per epoch: mean of each unweighted term


def _weights_at(w: LossWeights, epoch: int, warmup: int) -> LossWeights:
    if warmup <= 0 or epoch >= warmup:
        return w
    f = (epoch + 1) / warmup
    return replace(
        w,
        lambda1=w.lambda1 * f,
        lambda2=w.lambda2 * f,
        lambda3=w.lambda3 * f,
        lambda4=w.lambda4 * f,
        lambda5=w.lambda5 * f,
    )


def train(
    table: FeatureTable,
    split: SplitSpec,
    hp: HyperParams,
    *,
    mode: str = "zsl",
    seed: int | None = None,
    log: IO[str] | None = None,
) -> TrainResult:
    """Fit both VAEs on the seen-class training instances of ``split``.

    Each step samples a class-balanced batch, encodes both modalities,
    samples latents, decodes self and cross, and takes one Adam step on the
    weighted objective.  ``log`` receives one JSON line per step and one
    summary line per epoch.
    """
    return train_variants(table, split, [hp], mode=mode, seed=seed, log=log)[0]


def train_variants(
    table: FeatureTable,
    split: SplitSpec,
    hps: list[HyperParams],
    *,
    mode: str = "zsl",
    seed: int | None = None,
    log: IO[str] | None = None,
) -> list[TrainResult]:
    """Train several configurations that differ only in their loss weights.

    All runs start from the same initialization and see the same batches
    and the same reparameterization noise, so each result equals what
    :func:`train` gives for that configuration alone (up to float summation
    order); the runs are simply evaluated together as one stacked model.
    """
    if not hps:
        raise ValueError("no configurations to train")
    base = hps[0]
    for hp in hps:
        hp.validate()
        if replace(hp, weights=base.weights) != base:
            raise ValueError("stacked configurations may differ only in their loss weights")
    seed = base.seed if seed is None else seed
    if base.dims.visual_dim != table.visual_dim or base.dims.semantic_dim != table.semantic_dim:
        raise nx.DimensionError(
            f"model expects {base.dims.visual_dim}/{base.dims.semantic_dim} features, "
            f"table has {table.visual_dim}/{table.semantic_dim}"
        )
    stacked = len(hps) > 1
    pair = init_params(nx.make_rng(seed, "init"), base.dims)
    if stacked:
        pair = pair.stack(len(hps))
    sampler = BatchSampler(
        table,
        split.train_indices(table, mode),
        base.c,
        base.k,
        need_pairs=any(hp.weights.lambda3 > 0 for hp in hps),
    )
    batch_rng = nx.make_rng(seed, "sampler")
    reparam_rng = nx.make_rng(seed, "reparam")
    opt = Adam(pair.flat.size, base.learning_rate, base.beta1, base.beta2, base.eps)
    flat_view = pair.flat.reshape(-1)

    histories: list[list[dict]] = [[] for _ in hps]
    step = 0
    for epoch in range(base.epochs):
        ws = [_weights_at(hp.weights, epoch, hp.warmup_epochs) for hp in hps]
        sums = [dict.fromkeys(TERMS + ("total",), 0.0) for _ in hps]
        for _ in range(sampler.steps_per_epoch):
            batch = sampler.sample(batch_rng)
            tape = nx.Tape()
            latents = encode_batch(
                pair.bind(tape),
                batch.visual,
                batch.descriptors,
                batch.labels,
                batch.class_ids,
                reparam_rng,
                s_index=batch.s_index,
            )
            if stacked:
                loss, parts = total_loss_stacked(latents, ws)
            else:
                loss, single = total_loss(latents, ws[0])
                parts = [single]
            if not all(math.isfinite(p["total"]) for p in parts):
                raise DivergenceError(step, parts if stacked else parts[0])
            grad = pair.flatten(tape.backward(loss)).reshape(-1)
            try:
                opt.step(flat_view, grad)
            except FloatingPointError:
                raise DivergenceError(step, parts if stacked else parts[0]) from None
            for acc, p in zip(sums, parts):
                for t, val in p.items():
                    if val is not None:
                        acc[t] += val
            if log is not None:
                for r, p in enumerate(parts):
                    run = {"run": r} if stacked else {}
                    log.write(json.dumps({"step": step, "epoch": epoch, **run, **p}) + "\n")
            step += 1
        for r, (acc, w) in enumerate(zip(sums, ws)):
            summary = {
                t: (None if t != "total" and w.weight(t) == 0 else acc[t] / sampler.steps_per_epoch)
                for t in acc
            }
            histories[r].append(summary)
            if log is not None:
                run = {"run": r} if stacked else {}
                log.write(json.dumps({"epoch_summary": epoch, **run, **summary}) + "\n")
    return [TrainResult(model, hist) for model, hist in zip(pair.unstack(), histories)]
