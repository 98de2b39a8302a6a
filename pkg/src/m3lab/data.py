from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .tasks import TaskConfig, TaskInstance, render


@dataclass
class Batch:
    images: torch.Tensor  # (B, R, R, ch)
    questions: torch.Tensor  # (B, q)
    answers: torch.Tensor  # (B, L)

    def __len__(self) -> int:
        return self.images.shape[0]


class TensorData:
    """Rendered images and tokenized text for a list of task instances."""

    def __init__(self, instances: list[TaskInstance], task: TaskConfig):
        self.instances = instances
        self.task = task
        if instances:
            self.images = torch.from_numpy(np.stack([render(t.image, task) for t in instances]))
        else:
            r = task.resolution
            self.images = torch.zeros(0, r, r, task.channels)
        self.questions = torch.tensor([t.question for t in instances], dtype=torch.long)
        self.answers = torch.tensor([t.answer for t in instances], dtype=torch.long)
        self.kinds = np.array([t.kind for t in instances])

    def __len__(self) -> int:
        return len(self.instances)

    def batch(self, idx) -> Batch:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return Batch(self.images[idx], self.questions[idx], self.answers[idx])

    def subset(self, kind: str) -> "TensorData":
        return TensorData([t for t in self.instances if t.kind == kind], self.task)
