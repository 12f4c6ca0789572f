"""Fairness-aware mutual-information loss and the gradient-keyed auxiliary-set dictionary."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import Batch, DatasetTable, sample_episode
from .fairness import Penalty, regularized_loss, regularized_loss_from_probs
from .models import ParamBundle, classifier_forward


class SelectionError(LookupError):
    pass


# -- probability estimates ----------------------------------------------------

def cond_prob_support_given_aux(probs: Tensor, sensitive, aux_label: int, aux_group: int) -> Penalty:
    """Weights p(x_i | x*_j) over the support rows as a ``(|S|, 1)`` tensor.

    Rows outside the auxiliary sample's sensitive group get exactly zero; rows
    inside get their probability of the auxiliary label, normalized over the
    group. ``degenerate`` is set when the group has no support rows.
    """
    sensitive = np.asarray(sensitive).reshape(-1)
    mask = (sensitive == aux_group).astype(np.float64).reshape(-1, 1)
    if not mask.any():
        return Penalty(Tensor(np.zeros((len(sensitive), 1))), True)
    masked = ad.take_cols(probs, [aux_label]) * mask
    return Penalty(masked / ad.sum(masked), False)


def cond_prob_aux_given_support(embedding: Tensor, aux_embeddings: Tensor, aux_sensitive, aux_group: int) -> Tensor:
    """Row ``(1, |A|)`` of p(x*_k | x_i): softmax of ``-|x_i - x*_k|^2`` over the group, zero elsewhere."""
    aux_sensitive = np.asarray(aux_sensitive).reshape(-1)
    members = np.flatnonzero(aux_sensitive == aux_group)
    if members.size == 0:
        raise ad.DegenerateInputError(f"auxiliary set has no samples with sensitive value {aux_group}")
    # unit-norm rows: -|u - v|^2 = 2 u.v - 2, and the constant cancels in the softmax
    sims = ad.mul(ad.tensor(embedding) @ ad.take_rows(aux_embeddings, members).T, 2.0)
    probs = ad.softmax_row(sims)
    scatter = np.zeros((members.size, len(aux_sensitive)))
    scatter[np.arange(members.size), members] = 1.0
    return probs @ Tensor(scatter)


def mi_loss(support_emb: Tensor, support_probs: Tensor, support_sensitive,
            aux_emb: Tensor, aux_labels, aux_sensitive) -> Penalty:
    """Negative fairness-aware mutual information between a support set and an auxiliary set.

    For each auxiliary sample j and each support sample i in the same
    sensitive group, the contrastive log-probability ``2 x_i.x*_j -
    logsumexp_k 2 x_i.x*_k`` (k over the group's auxiliary samples) is
    weighted by p(x_i | x*_j); the negated sum is averaged over |A|.
    """
    s_attr = np.asarray(support_sensitive).reshape(-1)
    a_attr = np.asarray(aux_sensitive).reshape(-1)
    a_lab = np.asarray(aux_labels, dtype=np.intp).reshape(-1)
    n_aux = len(a_attr)
    terms = []
    for group in (0, 1):
        s_idx = np.flatnonzero(s_attr == group)
        a_idx = np.flatnonzero(a_attr == group)
        if s_idx.size == 0 or a_idx.size == 0:
            continue
        xs = ad.take_rows(support_emb, s_idx)
        xa = ad.take_rows(aux_emb, a_idx)
        sims = ad.mul(xs @ xa.T, 2.0)
        log_p = sims - ad.logsumexp_rows(sims)
        p = ad.reshape(ad.gather(support_probs, s_idx[:, None], a_lab[a_idx][None, :]),
                       (s_idx.size, a_idx.size))
        weights = p / ad.sum(p, axis=0)
        terms.append(ad.sum(weights * log_p))
    if not terms:
        return Penalty(Tensor(0.0), True)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return Penalty(ad.mul(total, -1.0 / n_aux), False)


def fairness_adaptation_loss(params, support: Batch, aux: Batch | None, gamma: float, lam: float,
                             kind: str = "dp", use_mi: bool = True) -> Tensor:
    """``L_R(S) + gamma * (L_R(A) + L_MI)``; reduces to ``L_R(S)`` without an auxiliary set or at gamma 0."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if aux is None or gamma == 0:
        return regularized_loss(params, support, lam, kind)
    n_s = len(support)
    emb, probs = classifier_forward(params, np.vstack([support.x, aux.x]))
    s_rows, a_rows = np.arange(n_s), np.arange(n_s, n_s + len(aux))
    s_probs, a_probs = ad.take_rows(probs, s_rows), ad.take_rows(probs, a_rows)
    loss_s = regularized_loss_from_probs(s_probs, support.y, support.a, lam, kind)
    aux_part = regularized_loss_from_probs(a_probs, aux.y, aux.a, lam, kind)
    if use_mi:
        mi = mi_loss(ad.take_rows(emb, s_rows), s_probs, support.a,
                     ad.take_rows(emb, a_rows), aux.y, aux.a)
        if not mi.degenerate:
            aux_part = aux_part + mi.value
    return loss_s + ad.mul(aux_part, gamma)


def loss_gradient(loss_fn, params: ParamBundle) -> tuple[float, list[np.ndarray]]:
    """Value and per-array gradients of ``loss_fn(tensors)`` at ``params``."""
    tensors = params.tensors(requires_grad=True)
    loss = loss_fn(tensors)
    if not loss.requires_grad:
        return loss.item(), [np.zeros(s) for s in params.shapes]
    return loss.item(), ad.grad(loss, tensors.values())


def adaptation_direction(params: ParamBundle, batch: Batch, lam: float, kind: str = "dp") -> np.ndarray:
    """Flattened gradient of the regularized loss: the retrieval key of a candidate set."""
    _, grads = loss_gradient(lambda t: regularized_loss(t, batch, lam, kind), params)
    return np.concatenate([g.reshape(-1) for g in grads])


# -- candidate dictionary -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class AuxiliarySet:
    batch: Batch
    key: np.ndarray
    enqueue_step: int
    subset: int


class CandidateDictionary:
    """Bounded FIFO of auxiliary sets keyed by adaptation directions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.step = 0
        self._items: deque[AuxiliarySet] = deque()
        self._keys: np.ndarray | None = None

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, batch: Batch, key, subset: int = -1) -> AuxiliarySet | None:
        """Enqueue a set; returns the evicted oldest set when over capacity."""
        item = AuxiliarySet(batch, np.asarray(key, dtype=np.float64).reshape(-1), self.step, subset)
        if self._items and item.key.size != self._items[0].key.size:
            raise ad.ShapeError(f"key length {item.key.size} differs from {self._items[0].key.size}")
        self.step += 1
        self._items.append(item)
        self._keys = None
        if len(self._items) > self.capacity:
            return self._items.popleft()
        return None

    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = np.stack([it.key for it in self._items])
        return self._keys

    def select(self, direction) -> AuxiliarySet:
        """Set whose key is nearest in Euclidean distance; ties go to the oldest."""
        if not self._items:
            raise SelectionError("candidate dictionary is empty")
        direction = np.asarray(direction, dtype=np.float64).reshape(-1)
        dist = np.linalg.norm(self.keys() - direction, axis=1)
        return self._items[int(np.argmin(dist))]

    def sample(self, rng: np.random.Generator) -> AuxiliarySet:
        if not self._items:
            raise SelectionError("candidate dictionary is empty")
        return self._items[int(rng.integers(len(self._items)))]

    def save(self, directory) -> None:
        """JSON index (enqueue step, subset, row indices) plus a little-endian f64 key matrix."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"capacity": self.capacity, "step": self.step,
                 "items": [{"enqueue_step": it.enqueue_step, "subset": it.subset,
                            "rows": it.batch.rows.tolist()} for it in self._items]}
        (directory / "dictionary.json").write_text(json.dumps(index))
        keys = self.keys() if self._items else np.zeros((0, 0))
        keys.astype("<f8").tofile(directory / "dictionary_keys.bin")

    @classmethod
    def load(cls, directory, table: DatasetTable) -> CandidateDictionary:
        directory = Path(directory)
        index = json.loads((directory / "dictionary.json").read_text())
        out = cls(index["capacity"])
        items = index["items"]
        if items:
            keys = np.fromfile(directory / "dictionary_keys.bin", dtype="<f8").reshape(len(items), -1)
            for it, key in zip(items, keys):
                out._items.append(AuxiliarySet(table.batch(it["rows"]), key.copy(), it["enqueue_step"], it["subset"]))
        out.step = index["step"]
        return out


def resize_support(batch: Batch, size: int, rng: np.random.Generator, table: DatasetTable | None = None,
                   subset: int | None = None) -> Batch:
    """Bring a support set to ``size`` rows.

    Shrinking keeps one random row per non-empty (label, group) cell while
    the budget allows, then fills uniformly. Growing draws extra rows from the
    same subset of ``table``.
    """
    n = len(batch)
    if n == size:
        return batch
    if n > size:
        keep: list[int] = []
        cells = [np.flatnonzero((batch.y == y) & (batch.a == a)) for y in (0, 1) for a in (0, 1)]
        cells = [c for c in cells if c.size]
        if len(cells) <= size:
            keep = [int(rng.choice(c)) for c in cells]
        rest = np.setdiff1d(np.arange(n), keep)
        keep += [int(i) for i in rng.choice(rest, size=size - len(keep), replace=False)]
        idx = np.sort(np.asarray(keep, dtype=np.intp))
        return Batch(batch.x[idx], batch.y[idx], batch.a[idx], batch.rows[idx])
    if table is None or subset is None:
        raise ValueError("growing a support set needs the source table and subset")
    pool = np.setdiff1d(table.subset_rows(subset), batch.rows)
    extra = rng.choice(pool, size=min(size - n, pool.size), replace=False)
    return table.batch(np.concatenate([batch.rows, extra]))


def enqueue_candidate(dictionary: CandidateDictionary, support: Batch, params: ParamBundle, lam: float,
                      rng: np.random.Generator, aux_size: int, table: DatasetTable | None = None,
                      subset: int = -1, kind: str = "dp") -> AuxiliarySet:
    """Resize ``support`` to the auxiliary size, key it by its adaptation direction, and enqueue it."""
    resized = resize_support(support, aux_size, rng, table, subset)
    dictionary.push(resized, adaptation_direction(params, resized, lam, kind), subset)
    return dictionary._items[-1]


def init_dictionary(table: DatasetTable, train_subsets, params: ParamBundle, capacity: int, lam: float,
                    rng: np.random.Generator, k_shot: int, query_size: int, aux_size: int,
                    kind: str = "dp") -> CandidateDictionary:
    """Fill a dictionary with ``capacity`` random meta-training support sets keyed at ``params``."""
    dictionary = CandidateDictionary(capacity)
    for _ in range(capacity):
        ep = sample_episode(table, train_subsets, k_shot, query_size, rng)
        enqueue_candidate(dictionary, ep.support, params, lam, rng, aux_size, table, ep.subset, kind)
    return dictionary
