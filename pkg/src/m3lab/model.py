"""Toy multimodal decoder: patch encoder, per-scale projector and a small
pre-norm causal transformer that reads ``[visual tokens, question, answer]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import math

import torch
import torch.nn.functional as F
from torch import nn

from . import pyramid
from .tasks import EOS, TaskConfig


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    width: int = 64
    heads: int = 4
    layers: int = 4
    channels: int = 16  # encoder feature width C
    image_channels: int = 9
    patch: int = 2
    grid: int = 12
    max_seq: int = 160
    ffn_mult: int = 4

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        for name in ("width", "heads", "layers", "channels", "image_channels", "patch", "grid", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def for_task(cls, task: TaskConfig, **kw) -> "ModelConfig":
        return cls(image_channels=task.channels, patch=task.patch, grid=task.grid, **kw)

    @property
    def resolution(self) -> int:
        return self.grid * self.patch

    @property
    def schedule(self) -> list[int]:
        return pyramid.schedule_for(self.grid, self.grid)

    def to_dict(self) -> dict:
        return asdict(self)


INIT_STD = 0.1


class SequenceOverflow(ValueError):
    pass


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.width
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.ffn_mult * d)
        self.fc2 = nn.Linear(cfg.ffn_mult * d, d)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.heads

        def split(z):
            return z.view(b, t, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.o(out.transpose(1, 2).reshape(b, t, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyLMM(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.encoder = nn.Linear(cfg.image_channels, cfg.channels)
        self.projector = nn.Linear(cfg.channels, cfg.width)
        self.tok_emb = nn.Embedding(cfg.vocab, cfg.width)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.width)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.vocab)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.startswith("encoder.weight"):
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[1]))
            elif "ln" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * INIT_STD)
        # residual projections get the usual depth scaling
        for blk in self.blocks:
            for lin in (blk.o, blk.fc2):
                lin.weight.mul_(1.0 / math.sqrt(2 * self.cfg.layers))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    # -- vision side -------------------------------------------------------

    def encode_image(self, image) -> torch.Tensor:
        """``(..., R, R, ch)`` pixels -> ``(..., G, G, C)`` token grid."""
        img = torch.as_tensor(image, dtype=self.dtype)
        r, ch = self.cfg.resolution, self.cfg.image_channels
        if img.shape[-3:] != (r, r, ch):
            raise ValueError(f"expected image shape (..., {r}, {r}, {ch}), got {tuple(img.shape)}")
        g, p = self.cfg.grid, self.cfg.patch
        lead = img.shape[:-3]
        patches = img.reshape(*lead, g, p, g, p, ch).mean(dim=(-4, -2))
        return self.encoder(patches)

    def pyramid(self, image) -> pyramid.TokenPyramid:
        return pyramid.build_pyramid(self.encode_image(image))

    # -- language side -----------------------------------------------------

    def forward(self, visual, question, answer_prefix=None) -> torch.Tensor:
        """Next-token logits for every answer position.

        ``visual`` holds encoder-width tokens ``(B, n, C)`` (or ``(n, C)``),
        already flattened from one pyramid scale. Returns ``(B, a + 1, V)``:
        row ``j`` is the distribution of answer token ``j`` given the first
        ``j`` answer tokens.
        """
        visual = torch.as_tensor(visual, dtype=self.dtype)
        question = torch.as_tensor(question, dtype=torch.long)
        single = visual.dim() == 2
        if single:
            visual, question = visual[None], question[None]
        if answer_prefix is None:
            answer_prefix = question[:, :0]
        else:
            answer_prefix = torch.as_tensor(answer_prefix, dtype=torch.long)
            if single:
                answer_prefix = answer_prefix[None]
        if question.shape[1] < 1:
            raise ValueError("question must hold at least one token")
        logits = self._run(visual, torch.cat([question, answer_prefix], dim=1))
        out = logits[:, visual.shape[1] + question.shape[1] - 1:]
        return out[0] if single else out

    def _run(self, visual: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        n, t = visual.shape[1], text.shape[1]
        if n + t > self.cfg.max_seq:
            raise SequenceOverflow(f"sequence of {n + t} tokens exceeds max_seq={self.cfg.max_seq}")
        x = torch.cat([self.projector(visual), self.tok_emb(text)], dim=1)
        x = x + self.pos_emb.weight[: n + t]
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_f(x))

    def nll(self, visual, question, answer) -> torch.Tensor:
        """Teacher-forced ``-log P(answer | visual, question)``, summed over answer tokens."""
        answer = torch.as_tensor(answer, dtype=torch.long)
        if answer.shape[-1] < 1:
            raise ValueError("answer must hold at least one token")
        logits = self.forward(visual, question, answer[..., :-1])
        logp = logits.log_softmax(dim=-1)
        picked = logp.gather(-1, answer.unsqueeze(-1)).squeeze(-1)
        return -picked.sum(dim=-1)

    def grad(self, visual, question, answer) -> dict[str, torch.Tensor]:
        """Gradient of :meth:`nll` with respect to every parameter."""
        names, params = zip(*self.named_parameters())
        loss = self.nll(visual, question, answer)
        grads = torch.autograd.grad(loss.sum(), params, allow_unused=True)
        return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}

    @torch.no_grad()
    def generate(self, visual, question, max_len: int, eos: int = EOS) -> list[int]:
        """Greedy decode; ties go to the lowest token id. Stops after ``eos``."""
        out: list[int] = []
        for _ in range(max_len):
            logits = self.forward(visual, question, out or None)
            tok = int(torch.argmax(logits[-1]))
            out.append(tok)
            if tok == eos:
                break
        return out

    @torch.no_grad()
    def generate_batch(self, visual, questions, max_len: int, eos: int = EOS) -> list[list[int]]:
        """Batched greedy decode, equal to calling :meth:`generate` per row."""
        visual = torch.as_tensor(visual, dtype=self.dtype)
        questions = torch.as_tensor(questions, dtype=torch.long)
        b = visual.shape[0]
        prefix = questions[:, :0]
        done = torch.zeros(b, dtype=torch.bool)
        outs: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_len):
            if bool(done.all()):
                break
            logits = self.forward(visual, questions, prefix)[:, -1]
            toks = logits.argmax(dim=-1)
            for i in range(b):
                if not done[i]:
                    outs[i].append(int(toks[i]))
            done |= toks == eos
            prefix = torch.cat([prefix, toks[:, None]], dim=1)
        return outs
