"""Classifier MLP and the support-set direction generator."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateInputError, ShapeError, Tensor

EMBED_EPS = 1e-12


class ParamBundle:
    """Ordered named float64 arrays with a stable flat layout."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [v.shape for v in self.arrays.values()]

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def values(self) -> list[np.ndarray]:
        return list(self.arrays.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> ParamBundle:
        return ParamBundle({k: v.copy() for k, v in self.arrays.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def unflatten(self, vec) -> ParamBundle:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != self.size:
            raise ShapeError(f"expected {self.size} values, got {vec.size}")
        out, pos = {}, 0
        for name, v in self.arrays.items():
            out[name] = vec[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return ParamBundle(out)

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.arrays.items()}

    def equals(self, other: ParamBundle) -> bool:
        return self.names == other.names and all(
            np.array_equal(a, b) for a, b in zip(self.values(), other.values()))

    def manifest(self) -> list[dict]:
        return [{"name": k, "shape": list(v.shape)} for k, v in self.arrays.items()]

    def save(self, path) -> None:
        """Write ``<path>.json`` (names, shapes, flatten order) and ``<path>.bin`` (little-endian f64)."""
        path = Path(path)
        path.with_suffix(".json").write_text(json.dumps({"layout": self.manifest(), "size": self.size}, indent=2))
        self.flatten().astype("<f8").tofile(path.with_suffix(".bin"))

    @classmethod
    def load(cls, path) -> ParamBundle:
        path = Path(path)
        layout = json.loads(path.with_suffix(".json").read_text())["layout"]
        vec = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        template = cls({d["name"]: np.zeros(d["shape"]) for d in layout})
        return template.unflatten(vec)


def flatten_params(params: ParamBundle) -> np.ndarray:
    return params.flatten()


def unflatten_params(params: ParamBundle, vec) -> ParamBundle:
    return params.unflatten(vec)


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, (1, fan_out))


def init_classifier(n_features: int, rng: np.random.Generator, hidden=(40, 40), n_classes: int = 2) -> ParamBundle:
    sizes = (n_features, *hidden, n_classes)
    arrays = {}
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        arrays[f"w{i}"], arrays[f"b{i}"] = _linear(rng, fi, fo)
    return ParamBundle(arrays)


def _as_tensors(params) -> dict[str, Tensor]:
    return params.tensors(requires_grad=False) if isinstance(params, ParamBundle) else params


def classifier_forward(params, x) -> tuple[Tensor, Tensor]:
    """Return (l2-normalized penultimate embeddings, class probabilities).

    ``params`` is a ParamBundle (treated as constants) or a dict of tensors.
    """
    p = _as_tensors(params)
    x = ad.tensor(x)
    if x.shape[1] != p["w1"].shape[0]:
        raise ShapeError(f"classifier expects {p['w1'].shape[0]} features, got {x.shape[1]}")
    h = ad.relu(ad.add_bias(x @ p["w1"], p["b1"]))
    h = ad.relu(ad.add_bias(h @ p["w2"], p["b2"]))
    probs = ad.softmax_row(ad.add_bias(h @ p["w3"], p["b3"]))
    return ad.l2_normalize_rows(h, eps=EMBED_EPS), probs


def init_generator(d_theta: int, rng: np.random.Generator, d_model: int = 40, d_ff: int = 64,
                   d_hidden: int = 128) -> ParamBundle:
    arrays = {"label_emb": rng.normal(0.0, 1.0 / math.sqrt(d_model), (2, d_model)),
              "group_emb": rng.normal(0.0, 1.0 / math.sqrt(d_model), (2, d_model))}
    for name in ("wq", "wk", "wv", "wo"):
        arrays[name], _ = _linear(rng, d_model, d_model)
    arrays["ln1_g"], arrays["ln1_b"] = np.ones((1, d_model)), np.zeros((1, d_model))
    arrays["ff_w1"], arrays["ff_b1"] = _linear(rng, d_model, d_ff)
    arrays["ff_w2"], arrays["ff_b2"] = _linear(rng, d_ff, d_model)
    arrays["ln2_g"], arrays["ln2_b"] = np.ones((1, d_model)), np.zeros((1, d_model))
    arrays["head_w1"], arrays["head_b1"] = _linear(rng, d_model, d_hidden)
    arrays["head_w2"], arrays["head_b2"] = _linear(rng, d_hidden, d_theta)
    return ParamBundle(arrays)


def generator_forward(gparams, support_embeddings, labels=None, sensitive=None) -> Tensor:
    """Estimate the adaptation direction of a support set: MLP(mean(encoder(tokens))) -> (1, d_theta).

    Each token is a support embedding plus learned vectors for its label and
    sensitive group (when given). No positional encoding, so the result is
    invariant to the order of rows.
    """
    p = _as_tensors(gparams)
    x = ad.tensor(support_embeddings)
    if x.shape[0] == 0:
        raise DegenerateInputError("generator needs at least one support row")
    if labels is not None:
        x = x + ad.take_rows(p["label_emb"], np.asarray(labels, dtype=np.intp).reshape(-1))
    if sensitive is not None:
        x = x + ad.take_rows(p["group_emb"], np.asarray(sensitive, dtype=np.intp).reshape(-1))
    d = x.shape[1]
    scores = (x @ p["wq"]) @ (x @ p["wk"]).T
    attn = ad.softmax_row(ad.mul(scores, 1.0 / math.sqrt(d)))
    h = ad.layer_norm_rows(x + (attn @ (x @ p["wv"])) @ p["wo"], p["ln1_g"], p["ln1_b"])
    ff = ad.add_bias(ad.relu(ad.add_bias(h @ p["ff_w1"], p["ff_b1"])) @ p["ff_w2"], p["ff_b2"])
    h = ad.layer_norm_rows(h + ff, p["ln2_g"], p["ln2_b"])
    pooled = ad.mean_rows(h)
    hidden = ad.relu(ad.add_bias(pooled @ p["head_w1"], p["head_b1"]))
    return ad.add_bias(hidden @ p["head_w2"], p["head_b2"])
