"""Greedy-decode evaluation at each visual-token scale or baseline selection."""

from __future__ import annotations

import numpy as np
import torch

from . import pyramid
from .data import TensorData
from .model import ToyLMM

METHODS = ("m3", "pool", "spatial", "sequential")


def method_tokens(model: ToyLMM, images, method: str, k: int) -> torch.Tensor:
    """Visual prefix of ``k`` tokens chosen by ``method``, shape ``(B, k, C)``."""
    grid = model.encode_image(images)
    if method == "m3":
        return pyramid.flatten(pyramid.build_pyramid(grid).scale(k))
    if method == "pool":
        return pyramid.flatten(pyramid.inference_pool(grid, k))
    if method == "spatial":
        return pyramid.flatten(pyramid.spatial_sample(grid, k))
    if method == "sequential":
        return pyramid.sequential_sample(grid, k)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


@torch.no_grad()
def correctness(model: ToyLMM, data: TensorData, k: int, method: str = "m3", chunk: int = 256) -> np.ndarray:
    """Exact-match correctness of the greedy answer per instance."""
    model.eval()
    max_len = data.answers.shape[1]
    out = np.zeros(len(data), dtype=bool)
    for lo in range(0, len(data), chunk):
        idx = np.arange(lo, min(lo + chunk, len(data)))
        b = data.batch(idx)
        tokens = method_tokens(model, b.images, method, k)
        preds = model.generate_batch(tokens, b.questions, max_len)
        for i, pred in zip(idx, preds):
            out[i] = pred == data.instances[i].answer
    return out


def correctness_matrix(model: ToyLMM, data: TensorData, schedule=None) -> np.ndarray:
    """``(N, M)`` boolean matrix, one column per pyramid scale, coarsest first."""
    schedule = schedule or model.cfg.schedule
    return np.stack([correctness(model, data, k) for k in schedule], axis=1)


def accuracy_by_kind(model: ToyLMM, data: TensorData, schedule=None) -> dict[str, dict[int, float]]:
    schedule = schedule or model.cfg.schedule
    mat = correctness_matrix(model, data, schedule)
    out = {}
    for kind in sorted(set(data.kinds)):
        rows = mat[data.kinds == kind]
        out[str(kind)] = {k: float(rows[:, i].mean()) for i, k in enumerate(schedule)}
    return out
