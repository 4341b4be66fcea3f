"""Three-term self-distillation loss with the cross-image object queue."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .semantic import PrototypeBank, TempSchedule, assign_semantic, teacher_assignment
from .spatial import ClusterAssignment, ObjectReps


@dataclass(frozen=True)
class Temps:
    teacher: float = 0.04
    student: float = 0.1

    @classmethod
    def at_step(cls, schedule: TempSchedule, step: int) -> "Temps":
        return cls(schedule.teacher(step), schedule.student)


def cross_entropy(teacher: torch.Tensor, student: torch.Tensor, student_is_log: bool = False) -> torch.Tensor:
    """-sum_k t_k log s_k over the last axis; the teacher is a constant."""
    t = teacher.detach()
    logs = student if student_is_log else torch.log(student)
    # 0 * log(0) contributes nothing
    return -(torch.where(t > 0, t * logs, torch.zeros_like(logs))).sum(dim=-1)


def entropy(p: torch.Tensor) -> torch.Tensor:
    return cross_entropy(p, p)


def _ce(t_probs, z_student, student_bank, temps):
    return cross_entropy(t_probs, assign_semantic(z_student, student_bank, temps.student, log=True), student_is_log=True)


def global_cv_loss(
    teacher_global_a: torch.Tensor,
    teacher_global_b: torch.Tensor,
    student_global_a: torch.Tensor,
    student_global_b: torch.Tensor,
    teacher_bank: PrototypeBank,
    temps: Temps,
    student_bank: PrototypeBank | None = None,
) -> torch.Tensor:
    """Symmetrized cross-view loss on projected global embeddings (batched or single)."""
    student_bank = student_bank or teacher_bank
    ta, _ = teacher_assignment(teacher_global_a, teacher_bank, temps.teacher)
    tb, _ = teacher_assignment(teacher_global_b, teacher_bank, temps.teacher)
    loss = 0.5 * (_ce(ta, student_global_b, student_bank, temps) + _ce(tb, student_global_a, student_bank, temps))
    return loss.mean()


def object_cv_loss(
    teacher_objects_a: ObjectReps,
    teacher_objects_b: ObjectReps,
    student_objects_a: ObjectReps,
    student_objects_b: ObjectReps,
    assignment: ClusterAssignment,
    teacher_bank: PrototypeBank,
    temps: Temps,
    student_bank: PrototypeBank | None = None,
) -> tuple[torch.Tensor, int]:
    """Mean symmetrized cross-view loss over clusters present in both views.

    ObjectReps here carry projected embeddings. Returns (loss, pair count).
    """
    student_bank = student_bank or teacher_bank
    span = set(assignment.spanning_clusters().tolist())
    for reps in (teacher_objects_a, teacher_objects_b, student_objects_a, student_objects_b):
        span &= set(reps.cluster_ids.tolist())
    ids = sorted(span)
    if not ids:
        return torch.zeros((), dtype=torch.float64), 0

    def rows(reps, keys):
        where = {k: i for i, k in enumerate(reps.cluster_ids.tolist())}
        idx = torch.as_tensor([where[k] for k in keys])
        return torch.as_tensor(reps.reps)[idx]

    ta, _ = teacher_assignment(rows(teacher_objects_a, ids), teacher_bank, temps.teacher)
    tb, _ = teacher_assignment(rows(teacher_objects_b, ids), teacher_bank, temps.teacher)
    sa, sb = rows(student_objects_a, ids), rows(student_objects_b, ids)
    loss = 0.5 * (_ce(ta, sb, student_bank, temps) + _ce(tb, sa, student_bank, temps))
    return loss.mean(), len(ids)


class ObjectQueue:
    """FIFO ring buffer of (teacher object embedding, teacher assignment)."""

    def __init__(self, capacity: int, warm_fraction: float = 0.1):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.warm_fraction = warm_fraction
        self._items: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    @property
    def warm_level(self) -> int:
        return int(np.ceil(self.warm_fraction * self.capacity))

    @property
    def is_warm(self) -> bool:
        return len(self) >= max(1, self.warm_level)

    def push(self, embedding, probs):
        self._items.append((np.asarray(embedding, dtype=np.float64).copy(), np.asarray(probs, dtype=np.float64).copy()))

    def embeddings(self) -> np.ndarray:
        return np.stack([e for e, _ in self._items]) if self._items else np.zeros((0, 0))

    def assignments(self) -> np.ndarray:
        return np.stack([p for _, p in self._items]) if self._items else np.zeros((0, 0))

    def copy(self) -> "ObjectQueue":
        out = ObjectQueue(self.capacity, self.warm_fraction)
        out._items = deque(((e.copy(), p.copy()) for e, p in self._items), maxlen=self.capacity)
        return out


def queue_update(queue: ObjectQueue, teacher_objects: ObjectReps, assignments) -> ObjectQueue:
    """Append a batch of teacher objects in order; the oldest entries fall out."""
    reps = teacher_objects.reps
    reps = reps.detach().numpy() if isinstance(reps, torch.Tensor) else np.asarray(reps)
    probs = assignments.detach().numpy() if isinstance(assignments, torch.Tensor) else np.asarray(assignments)
    if len(reps) != len(probs):
        raise ValueError("one assignment per teacher object is required")
    for e, p in zip(reps, probs):
        queue.push(e, p)
    return queue


def nearest_neighbors(queue_embeddings: np.ndarray, queries: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(queries) @ np.asarray(queue_embeddings).T, axis=1)


def object_ci_loss(
    queue: ObjectQueue,
    teacher_objects: ObjectReps,
    student_objects: ObjectReps,
    student_bank: PrototypeBank,
    temps: Temps,
    cycle_consistent: bool = False,
) -> tuple[torch.Tensor, int]:
    """Cross-image bootstrapping through nearest neighbours in the queue.

    ``teacher_objects`` are backbone-space embeddings used for retrieval;
    ``student_objects`` are projected embeddings aligned by cluster id.
    """
    zero = torch.zeros((), dtype=torch.float64)
    if not queue.is_warm or len(teacher_objects) == 0:
        return zero, 0
    t_reps = teacher_objects.reps
    t_reps = t_reps.detach().numpy() if isinstance(t_reps, torch.Tensor) else np.asarray(t_reps)
    bank_e = queue.embeddings()
    nn = nearest_neighbors(bank_e, t_reps)
    keep = np.ones(len(nn), dtype=bool)
    if cycle_consistent:
        back = nearest_neighbors(t_reps, bank_e[nn])
        keep = back == np.arange(len(nn))
    s_pos = {k: i for i, k in enumerate(student_objects.cluster_ids.tolist())}
    ids = [k for k, ok in zip(teacher_objects.cluster_ids.tolist(), keep) if ok and k in s_pos]
    if not ids:
        return zero, 0
    t_pos = {k: i for i, k in enumerate(teacher_objects.cluster_ids.tolist())}
    targets = torch.as_tensor(queue.assignments()[[nn[t_pos[k]] for k in ids]])
    s = torch.as_tensor(student_objects.reps)[torch.as_tensor([s_pos[k] for k in ids])]
    loss = _ce(targets, s, student_bank, temps)
    return loss.mean(), len(ids)


@dataclass
class LossBreakdown:
    global_cv: torch.Tensor
    object_cv: torch.Tensor
    object_ci: torch.Tensor
    counts: dict = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return self.global_cv + self.object_cv + self.object_ci

    def as_row(self, step: int) -> dict:
        return {
            "step": step,
            "global_cv": self.global_cv.item(),
            "object_cv": self.object_cv.item(),
            "object_ci": self.object_ci.item(),
            "total": self.total.item(),
            "n_global": self.counts.get("global_cv", 0),
            "n_object_cv": self.counts.get("object_cv", 0),
            "n_object_ci": self.counts.get("object_ci", 0),
        }


def total_loss(global_cv, object_cv, object_ci, counts: dict | None = None) -> LossBreakdown:
    """Unweighted sum of the three terms."""
    def t(x):
        return x if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=torch.float64)

    return LossBreakdown(t(global_cv), t(object_cv), t(object_ci), dict(counts or {}))
