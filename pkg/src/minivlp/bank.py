"""Momentum machinery: EMA teacher, weighted feature queues, centers.

The teacher is a gradient-free copy of the student updated by exponential
moving average after every optimizer step. Two fixed-capacity ring queues
hold recent teacher embeddings; each occupied slot carries an age, and its
reliability weight is ``decay ** age`` (new items enter at weight 1.0).
A per-modality center tracks the running mean of teacher embeddings for
collapse-free feature distillation.
"""

from __future__ import annotations

import copy
import logging

import torch
from torch import Tensor
import torch.nn.functional as F

from .model import VLModel

logger = logging.getLogger(__name__)


@torch.no_grad()
def make_teacher(student: VLModel) -> VLModel:
    """Deep-copy the student into a gradient-free teacher."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


@torch.no_grad()
def ema_update(student: torch.nn.Module, teacher: torch.nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.named_parameters())
    if s_params.keys() != t_params.keys():
        raise ValueError("student and teacher parameter sets differ")
    for name, sp in s_params.items():
        tp = t_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {name}: {tp.shape} vs {sp.shape}")
        tp.mul_(momentum).add_(sp.detach(), alpha=1.0 - momentum)
    # buffers (none today, but keep teacher faithful if any appear)
    for (name, sb), (_, tb) in zip(student.named_buffers(), teacher.named_buffers()):
        tb.copy_(sb)


class FeatureQueue:
    """Fixed-capacity FIFO ring of unit-norm features with decaying weights.

    ``weights[i] == decay ** ages[i]`` holds exactly for every occupied slot
    because weights are recomputed from the integer ages, never by repeated
    multiplication.
    """

    def __init__(self, capacity: int, dim: int, decay: float, dtype=torch.float32):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if not 0.0 < decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        self.capacity = capacity
        self.dim = dim
        self.decay = decay
        self.features = torch.zeros(capacity, dim, dtype=dtype)
        self.ages = torch.zeros(capacity, dtype=torch.long)
        self.fill_count = 0
        self.ptr = 0  # next slot to write; oldest slot once full

    @property
    def weights(self) -> Tensor:
        """decay ** age per occupied slot, exact in float64."""
        w = torch.ones(self.capacity, dtype=torch.float64)
        occupied = self.occupied_mask()
        ages = self.ages[occupied]
        if ages.numel():
            lookup = {int(a): self.decay ** int(a) for a in torch.unique(ages)}
            w[occupied] = torch.tensor(
                [lookup[int(a)] for a in ages], dtype=torch.float64
            )
        return w

    def occupied_mask(self) -> Tensor:
        mask = torch.zeros(self.capacity, dtype=torch.bool)
        if self.fill_count == self.capacity:
            mask[:] = True
        elif self.fill_count > 0:
            # before the first wrap, slots [0, fill_count) are occupied
            mask[: self.fill_count] = True
        return mask

    def snapshot(self) -> tuple[Tensor, Tensor]:
        """(features, weights) over occupied slots only."""
        occupied = self.occupied_mask()
        return self.features[occupied], self.weights[occupied]

    @torch.no_grad()
    def enqueue(self, new_features: Tensor) -> None:
        n = new_features.shape[0]
        if n > self.capacity:
            raise ValueError(f"cannot enqueue {n} items into a queue of capacity {self.capacity}")
        if new_features.shape[1] != self.dim:
            raise ValueError(f"feature dim {new_features.shape[1]} != queue dim {self.dim}")
        norms = new_features.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            logger.warning("enqueue received non-normalized features; normalizing")
            new_features = F.normalize(new_features, dim=1)
        # all surviving items age one iteration; the new arrivals stay at age 0
        occupied = self.occupied_mask()
        self.ages[occupied] += 1
        feats = new_features.detach().to(self.features.dtype)
        for i in range(n):
            self.features[self.ptr] = feats[i]
            self.ages[self.ptr] = 0
            self.ptr = (self.ptr + 1) % self.capacity
            if self.fill_count < self.capacity:
                self.fill_count += 1

    def state_dict(self) -> dict:
        return {
            "features": self.features.clone(),
            "ages": self.ages.clone(),
            "fill_count": self.fill_count,
            "ptr": self.ptr,
            "capacity": self.capacity,
            "dim": self.dim,
            "decay": self.decay,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["capacity"] != self.capacity or state["dim"] != self.dim:
            raise ValueError("queue geometry mismatch on load")
        self.features = state["features"].clone()
        self.ages = state["ages"].clone()
        self.fill_count = int(state["fill_count"])
        self.ptr = int(state["ptr"])
        self.decay = float(state["decay"])


class Center:
    """Momentum-updated mean of teacher outputs, initialized at zero."""

    def __init__(self, dim: int, dtype=torch.float32):
        self.mu = torch.zeros(dim, dtype=dtype)

    @torch.no_grad()
    def update(self, teacher_batch: Tensor, momentum: float) -> None:
        if teacher_batch.ndim != 2 or teacher_batch.shape[0] < 1:
            raise ValueError("expected a non-empty [n, d] batch of teacher outputs")
        batch_mean = teacher_batch.detach().mean(dim=0).to(self.mu.dtype)
        self.mu.mul_(momentum).add_(batch_mean, alpha=1.0 - momentum)

    def state_dict(self) -> dict:
        return {"mu": self.mu.clone()}

    def load_state_dict(self, state: dict) -> None:
        self.mu = state["mu"].clone()


def update_center(center: Center, teacher_batch: Tensor, momentum: float) -> Center:
    center.update(teacher_batch, momentum)
    return center


class MomentumBank:
    """Bundle of teacher model, both feature queues, and both centers."""

    def __init__(self, student: VLModel, dtype=torch.float32):
        cfg = student.cfg
        self.teacher = make_teacher(student)
        self.image_queue = FeatureQueue(cfg.queue_capacity, cfg.hidden_dim, cfg.queue_decay, dtype)
        self.text_queue = FeatureQueue(cfg.queue_capacity, cfg.hidden_dim, cfg.queue_decay, dtype)
        self.image_center = Center(cfg.hidden_dim, dtype)
        self.text_center = Center(cfg.hidden_dim, dtype)
        self.ema_momentum = cfg.ema_momentum
        self.center_momentum = cfg.center_momentum

    @torch.no_grad()
    def step_update(self, student: VLModel) -> None:
        ema_update(student, self.teacher, self.ema_momentum)

    def state_dict(self) -> dict:
        return {
            "teacher": self.teacher.state_dict(),
            "image_queue": self.image_queue.state_dict(),
            "text_queue": self.text_queue.state_dict(),
            "image_center": self.image_center.state_dict(),
            "text_center": self.text_center.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.teacher.load_state_dict(state["teacher"])
        self.image_queue.load_state_dict(state["image_queue"])
        self.text_queue.load_state_dict(state["text_queue"])
        self.image_center.load_state_dict(state["image_center"])
        self.text_center.load_state_dict(state["text_center"])
