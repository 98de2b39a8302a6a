"""Scale-averaged training of the toy model, with the ablation switches."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
import logging
import math
from typing import Callable, Sequence

import numpy as np
import torch

from . import pyramid
from .data import Batch, TensorData
from .model import ModelConfig, ToyLMM

log = logging.getLogger(__name__)

MODES = ("average", "random")
TRAINABLE = ("all", "encoder-projector")
ENCODER_SIDE = ("encoder.", "projector.")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "average"  # average over all scales, or one random scale per sample
    trainable: str = "all"  # or "encoder-projector" to freeze the language model
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 3000
    init_steps: int = 0  # phase 1: finest scale only, before the multiscale phase
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.trainable not in TRAINABLE:
            raise ValueError(f"trainable must be one of {TRAINABLE}, got {self.trainable!r}")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be a finite non-negative number")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("need 0 <= beta1, beta2 < 1 and eps > 0")
        if self.batch_size < 1 or self.steps < 0 or self.init_steps < 0 or self.eval_every < 0:
            raise ValueError("batch_size must be positive; steps, init_steps, eval_every non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        kw = {}
        for k, v in values.items():
            t = types[k]
            kw[k] = v if t == "str" else float(v) if t == "float" else int(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def frozen_names(model: ToyLMM, trainable: str) -> list[str]:
    if trainable == "all":
        return []
    return [n for n, _ in model.named_parameters() if not n.startswith(ENCODER_SIDE)]


def make_optimizer(model: ToyLMM, cfg: TrainConfig) -> torch.optim.Adam:
    frozen = set(frozen_names(model, cfg.trainable))
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name not in frozen)
        if name not in frozen:
            params.append(p)
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def multiscale_loss(model: ToyLMM, pyr: pyramid.TokenPyramid, question, answer) -> torch.Tensor:
    """Mean over all scales of the per-scale answer NLL (per sample if batched)."""
    if len(pyr) == 0:
        raise ValueError("pyramid has no scales")
    losses = [model.nll(pyramid.flatten(s), question, answer) for s in pyr.scales]
    return torch.stack(losses).mean(dim=0)


def draw_scales(rng: np.random.Generator, n_scales: int, n: int) -> np.ndarray:
    return rng.integers(0, n_scales, size=n)


def batch_loss(
    model: ToyLMM,
    batch: Batch,
    mode: str,
    rng: np.random.Generator | None = None,
    scales: Sequence[int] | None = None,
) -> torch.Tensor:
    """Mean over the batch of each sample's loss.

    ``mode="average"`` uses the scale-averaged loss; ``"random"`` uses the NLL
    at one scale per sample drawn uniformly from ``rng``. ``scales`` restricts
    the pyramid to a subset of scale indices (used for finest-only warmup).
    """
    pyr = model.pyramid(batch.images)
    if scales is not None:
        pyr = pyramid.TokenPyramid(tuple(pyr.scales[i] for i in scales))
    if mode == "average":
        return multiscale_loss(model, pyr, batch.questions, batch.answers).mean()
    if mode != "random":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("random-scale mode needs an rng")
    picks = draw_scales(rng, len(pyr), len(batch))
    total = torch.zeros((), dtype=model.dtype)
    for i in range(len(pyr)):
        idx = np.flatnonzero(picks == i)
        if len(idx) == 0:
            continue
        sel = torch.as_tensor(idx)
        tokens = pyramid.flatten(pyr.scales[i])[sel]
        total = total + model.nll(tokens, batch.questions[sel], batch.answers[sel]).sum()
    return total / len(batch)


def train_step(
    model: ToyLMM,
    opt: torch.optim.Optimizer,
    batch: Batch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    scales: Sequence[int] | None = None,
) -> float:
    opt.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, cfg.mode, rng, scales)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} (mode={cfg.mode}, batch of {len(batch)})")
    loss.backward()
    opt.step()
    return float(loss.detach())


def train(
    data: TensorData,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    model: ToyLMM | None = None,
    evaluate: Callable[[ToyLMM], dict[int, float]] | None = None,
) -> tuple[ToyLMM, list[dict]]:
    """Run ``cfg.init_steps`` finest-only steps and then ``cfg.steps`` steps of
    the configured objective. Returns the model and one history row per step."""
    if len(data) == 0:
        raise ValueError("empty training set")
    if model is None:
        model = ToyLMM(model_cfg or ModelConfig(), seed=cfg.seed)
    opt = make_optimizer(model, cfg)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    scale_rng = np.random.default_rng([cfg.seed, 2])
    finest = [len(model.cfg.schedule) - 1]
    history: list[dict] = []
    order = np.empty(0, dtype=np.int64)
    total = cfg.init_steps + cfg.steps
    for step in range(total):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, batch_rng.permutation(len(data))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        warm = step < cfg.init_steps
        loss = train_step(
            model, opt, data.batch(idx), cfg, scale_rng,
            scales=finest if warm else None,
        )
        row: dict = {"step": step + 1, "phase": "init" if warm else "multiscale", "loss": loss}
        if evaluate is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == total):
            model.eval()
            row["accuracy"] = evaluate(model)
            log.info("step %d loss %.4f acc %s", step + 1, loss, row["accuracy"])
        history.append(row)
    for p in model.parameters():
        p.requires_grad_(True)
    return model, history
