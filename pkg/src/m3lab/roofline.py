"""Analytic prefill cost model: FLOPs, two-regime roofline latency, memory.

Conventions: one multiply-accumulate counts as 2 FLOPs; memory in bytes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable


@dataclass(frozen=True)
class RooflineConfig:
    params: float = 6.74e9
    layers: int = 32
    width: int = 4096
    heads: int = 32
    bytes_per_param: float = 2.0
    peak_flops: float = 1.25e14  # FLOP/s
    bandwidth: float = 9.0e11  # bytes/s
    activation_multiplier: float = 16.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")

    @classmethod
    def from_mapping(cls, values: dict) -> "RooflineConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown roofline keys: {sorted(unknown)}")
        kw = {}
        for k, v in values.items():
            kw[k] = int(float(v)) if k in ("layers", "width", "heads") else float(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CostReport:
    tokens: int
    flops: float
    prefill_time: float
    compute_time: float
    memory_time: float
    weight_memory: float
    kv_cache_memory: float
    activation_memory: float

    @property
    def total_memory(self) -> float:
        return self.weight_memory + self.kv_cache_memory + self.activation_memory

    @property
    def memory_bound(self) -> bool:
        return self.memory_time >= self.compute_time


def prefill_flops(cfg: RooflineConfig, n_tokens: int) -> float:
    """Dense matmuls (2 FLOPs per weight per token) plus attention scores and
    the weighted value sum (each ``n^2 d`` MACs per layer)."""
    _check_tokens(n_tokens)
    n = n_tokens
    return 2.0 * cfg.params * n + 4.0 * cfg.layers * n * n * cfg.width


def weight_memory(cfg: RooflineConfig) -> float:
    return cfg.params * cfg.bytes_per_param


def prefill_time(cfg: RooflineConfig, n_tokens: int) -> float:
    return max(prefill_flops(cfg, n_tokens) / cfg.peak_flops, weight_memory(cfg) / cfg.bandwidth)


def kv_cache_memory(cfg: RooflineConfig, n_tokens: int) -> float:
    _check_tokens(n_tokens)
    return 2.0 * cfg.layers * n_tokens * cfg.width * cfg.bytes_per_param


def activation_memory(cfg: RooflineConfig, n_tokens: int) -> float:
    """Rough single-layer peak: hidden states times a multiplier plus one
    layer's attention score tensor. An estimate, not a measurement."""
    _check_tokens(n_tokens)
    n, b = n_tokens, cfg.bytes_per_param
    return n * cfg.width * b * cfg.activation_multiplier + n * n * cfg.heads * b


def memory_report(cfg: RooflineConfig, n_tokens: int) -> dict[str, float]:
    w = weight_memory(cfg)
    kv = kv_cache_memory(cfg, n_tokens)
    act = activation_memory(cfg, n_tokens)
    return {"weights": w, "kv_cache": kv, "activation": act, "total": w + kv + act}


def cost_report(cfg: RooflineConfig, n_tokens: int) -> CostReport:
    flops = prefill_flops(cfg, n_tokens)
    mem = memory_report(cfg, n_tokens)
    compute_t = flops / cfg.peak_flops
    memory_t = mem["weights"] / cfg.bandwidth
    return CostReport(
        tokens=n_tokens,
        flops=flops,
        prefill_time=max(compute_t, memory_t),
        compute_time=compute_t,
        memory_time=memory_t,
        weight_memory=mem["weights"],
        kv_cache_memory=mem["kv_cache"],
        activation_memory=mem["activation"],
    )


TABLE_HEADER = ["visual_tokens", "total_tokens", "flops_tb", "prefill_time_ms", "total_memory_gb", "activation_gb"]


def cost_table(cfg: RooflineConfig, visual_tokens: Iterable[int], text_tokens: int = 30) -> list[list]:
    """Rows in the layout ``# tokens | FLOPs (1e12) | time (ms) | total GB | activation GB``."""
    rows = []
    for v in visual_tokens:
        r = cost_report(cfg, v + text_tokens)
        rows.append([
            v,
            v + text_tokens,
            r.flops / 1e12,
            r.prefill_time * 1e3,
            r.total_memory / 1e9,
            r.activation_memory / 1e9,
        ])
    return rows


def toy_param_count(
    vocab: int,
    width: int,
    layers: int,
    channels: int,
    image_channels: int,
    max_seq: int,
    ffn_mult: int = 4,
) -> int:
    """Parameter count of the toy multimodal model, by component."""
    d, f = width, ffn_mult * width
    encoder = image_channels * channels + channels
    projector = channels * d + d
    embeddings = vocab * d + max_seq * d
    block = 2 * (2 * d) + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    head = 2 * d + d * vocab + vocab
    return encoder + projector + embeddings + layers * block + head


def toy_matmul_params(vocab: int, width: int, layers: int, ffn_mult: int = 4) -> int:
    """Weights touched by a matmul once per token (the ``P`` in ``2 P n``)."""
    d = width
    return layers * (4 * d * d + 2 * ffn_mult * d * d) + d * vocab


def _check_tokens(n: int) -> None:
    if n < 0:
        raise ValueError(f"token count must be non-negative, got {n}")
