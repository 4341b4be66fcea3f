"""Prototype assignment: uniform-prior softmax and the vMF-normalized variant."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .vmf import log_vmf_normalizer

MODES = ("uniform", "vmf")


@dataclass
class PrototypeBank:
    """Prototype vectors W [K, D] plus the running teacher center [K].

    In ``uniform`` mode the center lives in logit space; in ``vmf`` mode it is
    a probability vector.
    """

    prototypes: torch.Tensor
    mode: str = "vmf"
    center: torch.Tensor | None = None
    center_momentum: float = 0.9
    # per-temperature memo of log C(|W_k| / tau); only for banks whose prototypes stay fixed
    cache: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        k = self.prototypes.shape[0]
        if k < 2:
            raise ValueError("need at least two prototypes")
        if not 0 <= self.center_momentum <= 1:
            raise ValueError("center_momentum must lie in [0, 1]")
        if self.center is None:
            self.center = initial_center(k, self.mode, self.prototypes.dtype)
        if self.mode == "vmf" and (self.center <= 0).any():
            raise ValueError("vmf center entries must be positive")

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def snapshot(self) -> "PrototypeBank":
        return replace(self, prototypes=self.prototypes.detach().clone(), center=self.center.clone(), cache=None)

    def log_normalizers(self, temperature: float) -> torch.Tensor:
        """log C_D(|W_k| / tau) for every prototype."""
        if self.cache is not None and temperature in self.cache:
            return self.cache[temperature]
        value = log_vmf_normalizer(self.prototypes.norm(dim=-1) / temperature, self.dim)
        if self.cache is not None:
            self.cache[temperature] = value
        return value


def initial_center(k: int, mode: str, dtype=torch.float64) -> torch.Tensor:
    if mode == "vmf":
        return torch.full((k,), 1.0 / k, dtype=dtype)
    return torch.zeros(k, dtype=dtype)


@dataclass(frozen=True)
class TempSchedule:
    teacher_start: float = 0.04
    teacher_end: float = 0.07
    warmup_steps: int = 30
    student: float = 0.1

    def __post_init__(self):
        if min(self.teacher_start, self.teacher_end, self.student) <= 0:
            raise ValueError("temperatures must be positive")

    def teacher(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.teacher_end
        frac = min(step / self.warmup_steps, 1.0)
        return self.teacher_start + (self.teacher_end - self.teacher_start) * frac


def _check_unit(z: torch.Tensor, tol: float = 1e-6):
    norms = z.detach().norm(dim=-1)
    if (norms - 1.0).abs().max() > tol:
        raise ValueError(f"embedding must be unit-norm (max deviation {(norms - 1).abs().max().item():.2e})")


def raw_logits(z: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """<W_k, z> with unit-norm W_k in uniform mode and raw W_k in vmf mode."""
    w = bank.prototypes
    if bank.mode == "uniform":
        w = F.normalize(w, dim=-1)
    return z @ w.T


def semantic_scores(z: torch.Tensor, bank: PrototypeBank, temperature: float) -> torch.Tensor:
    """Unnormalized log-probabilities over the K prototypes."""
    _check_unit(z)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scores = raw_logits(z, bank) / temperature
    if bank.mode == "vmf":
        scores = scores + bank.log_normalizers(temperature)
    return scores


def assign_semantic(z: torch.Tensor, bank: PrototypeBank, temperature: float, log: bool = False) -> torch.Tensor:
    scores = semantic_scores(z, bank, temperature)
    return F.log_softmax(scores, dim=-1) if log else F.softmax(scores, dim=-1)


def apply_centering(raw: torch.Tensor, bank: PrototypeBank, teacher_temp: float | None = None) -> torch.Tensor:
    """Teacher-side centering.

    uniform: ``raw`` are logits <W, z>; returns softmax((raw - center) / teacher_temp).
    vmf: ``raw`` are probabilities; returns p / center renormalized.
    """
    if bank.mode == "uniform":
        if teacher_temp is None:
            raise ValueError("uniform-mode centering needs the teacher temperature")
        return F.softmax((raw - bank.center) / teacher_temp, dim=-1)
    if (bank.center <= 0).any():
        raise ValueError("vmf center entries must be positive")
    # p_k / c_k in log space so tiny probabilities survive
    logp = torch.log(raw) - torch.log(bank.center)
    return F.softmax(logp, dim=-1)


def teacher_assignment(z: torch.Tensor, bank: PrototypeBank, temperature: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Centered teacher probabilities plus the raw statistic used for the center update."""
    with torch.no_grad():
        if bank.mode == "uniform":
            raw = raw_logits(z, bank)
            _check_unit(z)
            return apply_centering(raw, bank, temperature), raw
        scores = semantic_scores(z, bank, temperature)
        probs = F.softmax(scores, dim=-1)
        centered = F.softmax(scores - torch.log(bank.center), dim=-1)
        return centered, probs


def update_center(bank: PrototypeBank, teacher_batch_outputs: torch.Tensor) -> PrototypeBank:
    """EMA of the batch mean of teacher logits (uniform) or probabilities (vmf)."""
    batch = torch.as_tensor(teacher_batch_outputs, dtype=bank.center.dtype).detach()
    if batch.ndim == 1:
        batch = batch[None]
    if len(batch) == 0:
        raise ValueError("center update needs a nonempty batch")
    m = bank.center_momentum
    if m == 1.0:
        return replace(bank, center=bank.center.clone(), cache=None)
    center = m * bank.center + (1.0 - m) * batch.mean(dim=0)
    if bank.mode == "vmf":
        center = center / center.sum()
    return replace(bank, center=center, cache=None)
