"""Group fairness metrics (DP / EO gaps) and differentiable regularizers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

REGULARIZERS = ("dp", "eo")


class MetricUndefinedError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GroupedScores:
    """Positive-class scores split by sensitive group, and by group and label."""

    q0: np.ndarray
    q1: np.ndarray
    by_label: dict[tuple[int, int], np.ndarray]

    @classmethod
    def from_arrays(cls, scores, sensitive, labels) -> GroupedScores:
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        sensitive = np.asarray(sensitive).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
        if np.any((scores < 0) | (scores > 1)):
            raise ValueError("scores must lie in [0, 1]")
        cells = {(a, y): scores[(sensitive == a) & (labels == y)] for a in (0, 1) for y in (0, 1)}
        return cls(scores[sensitive == 0], scores[sensitive == 1], cells)

    @classmethod
    def from_cells(cls, q00=(), q01=(), q10=(), q11=()) -> GroupedScores:
        """Build from cells ``q<a><y>``: group ``a``, label ``y``."""
        cells = {(0, 0): q00, (0, 1): q01, (1, 0): q10, (1, 1): q11}
        cells = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in cells.items()}
        q0 = np.concatenate([cells[0, 0], cells[0, 1]])
        q1 = np.concatenate([cells[1, 0], cells[1, 1]])
        return cls(q0, q1, cells)

    @property
    def eo_partial(self) -> bool:
        return any(self.by_label[0, y].size == 0 or self.by_label[1, y].size == 0 for y in (0, 1))


def delta_dp(g: GroupedScores) -> float:
    if g.q0.size == 0 or g.q1.size == 0:
        raise MetricUndefinedError("demographic parity needs both sensitive groups")
    return abs(float(g.q0.mean()) - float(g.q1.mean()))


def delta_eo(g: GroupedScores) -> float:
    """Sum over labels of the group mean-score gap; labels missing a group cell are skipped."""
    total, used = 0.0, 0
    for y in (0, 1):
        c0, c1 = g.by_label[0, y], g.by_label[1, y]
        if c0.size and c1.size:
            total += abs(float(c0.mean()) - float(c1.mean()))
            used += 1
    if not used:
        raise MetricUndefinedError("equalized odds undefined: no label has both sensitive groups")
    return total


class Penalty(NamedTuple):
    value: Tensor
    degenerate: bool


def _zero() -> Tensor:
    return Tensor(0.0)


def _group_mean(scores: Tensor, mask: np.ndarray) -> Tensor:
    return ad.mean(ad.take_rows(scores, np.flatnonzero(mask)))


def reg_dp(probs: Tensor, sensitive) -> Penalty:
    """Squared gap between the group mean scores; zero and flagged when a group is missing."""
    sensitive = np.asarray(sensitive).reshape(-1)
    m0, m1 = sensitive == 0, sensitive == 1
    if not m0.any() or not m1.any():
        return Penalty(_zero(), True)
    scores = ad.take_cols(probs, [1])
    return Penalty(ad.square(_group_mean(scores, m0) - _group_mean(scores, m1)), False)


def reg_eo(probs: Tensor, sensitive, labels) -> Penalty:
    """Sum over labels of squared group mean-score gaps, skipping labels missing a group."""
    sensitive = np.asarray(sensitive).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    scores = ad.take_cols(probs, [1])
    terms = []
    for y in (0, 1):
        m0 = (sensitive == 0) & (labels == y)
        m1 = (sensitive == 1) & (labels == y)
        if m0.any() and m1.any():
            terms.append(ad.square(_group_mean(scores, m0) - _group_mean(scores, m1)))
    if not terms:
        return Penalty(_zero(), True)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return Penalty(total, False)


def fairness_penalty(probs: Tensor, sensitive, labels, kind: str = "dp") -> Penalty:
    if kind == "dp":
        return reg_dp(probs, sensitive)
    if kind == "eo":
        return reg_eo(probs, sensitive, labels)
    raise ValueError(f"unknown regularizer {kind!r}; expected one of {REGULARIZERS}")


def regularized_loss_from_probs(probs: Tensor, labels, sensitive, lam: float, kind: str = "dp") -> Tensor:
    ce = ad.cross_entropy(probs, labels)
    if lam == 0:
        return ce
    return ce + ad.mul(fairness_penalty(probs, sensitive, labels, kind).value, lam)


def regularized_loss(params, batch, lam: float, kind: str = "dp") -> Tensor:
    """Mean cross-entropy on ``batch`` plus ``lam`` times the fairness penalty."""
    from .models import classifier_forward

    if len(batch) == 0:
        raise ValueError("regularized_loss needs a non-empty set")
    _, probs = classifier_forward(params, batch.x)
    return regularized_loss_from_probs(probs, batch.y, batch.a, lam, kind)


# -- reports ------------------------------------------------------------------

@dataclass
class TaskMetrics:
    task_id: int
    dp: float
    eo: float | None
    acc: float
    partial: bool


def task_metrics(task_id: int, scores, sensitive, labels) -> TaskMetrics:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    g = GroupedScores.from_arrays(scores, sensitive, labels)
    acc = float(np.mean((scores > 0.5).astype(np.intp) == labels))
    try:
        eo = delta_eo(g)
    except MetricUndefinedError:
        eo = None
    return TaskMetrics(task_id, delta_dp(g), eo, acc, g.eo_partial)


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None}
    return {"mean": float(arr.mean()), "std": float(arr.std())}


@dataclass
class MetricsReport:
    tasks: list[TaskMetrics] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def mean(self, key: str) -> float:
        """Mean over tasks where the metric is defined."""
        return float(np.mean([v for t in self.tasks if (v := getattr(t, key)) is not None]))

    def summary(self) -> dict:
        full = [t for t in self.tasks if not t.partial]
        return {
            "n_tasks": self.n_tasks,
            "n_partial": self.n_tasks - len(full),
            "dp": _stats([t.dp for t in self.tasks]),
            "eo": _stats([t.eo for t in self.tasks if t.eo is not None]),
            "eo_complete": _stats([t.eo for t in full]),
            "acc": _stats([t.acc for t in self.tasks]),
        }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(t)) + "\n" for t in self.tasks)

    @classmethod
    def from_jsonl(cls, text: str) -> MetricsReport:
        return cls([TaskMetrics(**json.loads(line)) for line in text.splitlines() if line.strip()])

    def write(self, out_dir, extra: dict | None = None) -> None:
        """Write ``tasks.jsonl`` and ``summary.json`` (summary merged with ``extra``) into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tasks.jsonl").write_text(self.to_jsonl())
        summary = dict(self.summary(), **(extra or {}))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
