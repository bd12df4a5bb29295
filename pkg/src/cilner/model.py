"""Window-context tagger with an expanding linear classifier.

A token's feature is ``tanh(W @ concat(emb[j-w .. j+w]) + b)``; logits are
``features @ cls_W + cls_b``. Gradients are written out by hand so that
every parameter can be checked against finite differences.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

PAD, OOV = "<pad>", "<oov>"
BACKBONE = ("embedding", "enc_W", "enc_b")
CLASSIFIER = ("cls_W", "cls_b")
PARAM_NAMES = BACKBONE + CLASSIFIER
CHECKPOINT_VERSION = 1


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Batch:
    """Window indices for a flat run of tokens from one or more sequences."""

    windows: np.ndarray  # (N, 2w+1) vocab ids
    offsets: np.ndarray  # (S+1,) token offsets per sequence


class TaggerModel:
    def __init__(self, vocab: dict[str, int], window: int, params: dict[str, np.ndarray]):
        self.vocab = vocab
        self.window = int(window)
        self.params = params

    @classmethod
    def create(
        cls,
        tokens: Iterable[str],
        emb_dim: int = 32,
        hidden_dim: int = 64,
        window: int = 2,
        seed: int = 0,
    ) -> "TaggerModel":
        """Fresh model with only the O column in the classifier."""
        if emb_dim < 1 or hidden_dim < 1 or window < 0:
            raise ConfigError("emb_dim, hidden_dim must be >= 1 and window >= 0")
        vocab = {PAD: 0, OOV: 1}
        for tok in sorted(set(tokens)):
            if tok not in vocab:
                vocab[tok] = len(vocab)
        rng = np.random.default_rng(seed)
        fan = emb_dim * (2 * window + 1)
        params = {
            "embedding": _uniform(rng, 1, (len(vocab), emb_dim)),
            "enc_W": _uniform(rng, fan, (fan, hidden_dim)),
            "enc_b": _uniform(rng, fan, (hidden_dim,)),
            "cls_W": _uniform(rng, hidden_dim, (hidden_dim, 1)),
            "cls_b": np.zeros(1),
        }
        return cls(vocab, window, params)

    @property
    def emb_dim(self) -> int:
        return self.params["embedding"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.params["enc_W"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.params["cls_W"].shape[1]

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        oov = self.vocab[OOV]
        return np.fromiter((self.vocab.get(t, oov) for t in tokens), dtype=np.int64, count=len(tokens))

    def make_batch(self, sequences: Sequence[Sequence[str]]) -> Batch:
        w = self.window
        rows, offsets = [], [0]
        for toks in sequences:
            ids = self.encode(toks)
            padded = np.concatenate([np.zeros(w, np.int64), ids, np.zeros(w, np.int64)])
            n = len(ids)
            rows.append(np.stack([padded[k : k + n] for k in range(2 * w + 1)], axis=1))
            offsets.append(offsets[-1] + n)
        windows = np.concatenate(rows) if rows else np.zeros((0, 2 * w + 1), np.int64)
        return Batch(windows=windows, offsets=np.asarray(offsets))

    # forward / backward -------------------------------------------------

    def features_of(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Return (features, flattened window embeddings)."""
        p = self.params
        x = p["embedding"][batch.windows].reshape(len(batch.windows), -1)
        h = np.tanh(x @ p["enc_W"] + p["enc_b"])
        return h, x

    def logits_of(self, features: np.ndarray) -> np.ndarray:
        return features @ self.params["cls_W"] + self.params["cls_b"]

    def run(self, batch: Batch) -> tuple[np.ndarray, np.ndarray, tuple]:
        h, x = self.features_of(batch)
        return self.logits_of(h), h, (batch, x, h)

    def backward(
        self, cache: tuple, d_logits: np.ndarray, d_features: np.ndarray | None = None
    ) -> dict[str, np.ndarray]:
        """Backpropagate token-level logit (and optional feature) gradients."""
        batch, x, h = cache
        p = self.params
        grads = {
            "cls_W": h.T @ d_logits,
            "cls_b": d_logits.sum(axis=0),
        }
        dh = d_logits @ p["cls_W"].T
        if d_features is not None:
            dh = dh + d_features
        dpre = dh * (1.0 - h * h)
        grads["enc_W"] = x.T @ dpre
        grads["enc_b"] = dpre.sum(axis=0)
        dx = (dpre @ p["enc_W"].T).reshape(len(batch.windows), batch.windows.shape[1], -1)
        d_emb = np.zeros_like(p["embedding"])
        np.add.at(d_emb, batch.windows, dx)
        grads["embedding"] = d_emb
        return grads

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self) -> "TaggerModel":
        return TaggerModel(dict(self.vocab), self.window, {k: v.copy() for k, v in self.params.items()})


def forward(model: TaggerModel, tokens: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Per-token logits (L, C) and features (L, d) for one sequence."""
    if len(tokens) == 0:
        raise DataError("cannot run forward on an empty sequence")
    logits, h, _ = model.run(model.make_batch([tokens]))
    return logits, h


def expand_classifier(model: TaggerModel, new_classes: int, rng_seed: int) -> TaggerModel:
    """Return a copy with ``new_classes`` extra classifier columns; old ones kept verbatim."""
    if new_classes < 1:
        raise ConfigError(f"new_classes must be >= 1, got {new_classes}")
    out = model.copy()
    d = model.hidden_dim
    rng = np.random.default_rng(rng_seed)
    new_w = _uniform(rng, d, (d, new_classes))
    out.params["cls_W"] = np.concatenate([model.params["cls_W"], new_w], axis=1)
    out.params["cls_b"] = np.concatenate([model.params["cls_b"], np.zeros(new_classes)])
    return out


class ModelSnapshot:
    """Read-only copy of a model taken at the end of a task."""

    def __init__(self, model: TaggerModel, task_id: int):
        frozen = copy.deepcopy(model)
        for arr in frozen.params.values():
            arr.setflags(write=False)
        self._model = frozen
        self.task_id = task_id

    @property
    def model(self) -> TaggerModel:
        return self._model

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    def run(self, batch: Batch) -> np.ndarray:
        logits, _, _ = self._model.run(batch)
        return logits

    def forward(self, tokens: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        return forward(self._model, tokens)


def snapshot(model: TaggerModel | ModelSnapshot, task_id: int = 0) -> ModelSnapshot:
    if isinstance(model, ModelSnapshot):
        return ModelSnapshot(model.model, model.task_id)
    return ModelSnapshot(model, task_id)


# checkpoints -------------------------------------------------------------

def model_arrays(model: TaggerModel, prefix: str = "model/") -> dict[str, np.ndarray]:
    inv = sorted(model.vocab, key=model.vocab.__getitem__)
    meta = {"version": CHECKPOINT_VERSION, "window": model.window, "vocab": inv}
    out = {f"{prefix}{k}": model.params[k] for k in PARAM_NAMES}
    out[f"{prefix}meta"] = np.array(json.dumps(meta))
    return out


def model_from_arrays(arrays, prefix: str = "model/") -> TaggerModel:
    meta = json.loads(str(arrays[f"{prefix}meta"]))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')!r}")
    vocab = {tok: i for i, tok in enumerate(meta["vocab"])}
    params = {k: np.array(arrays[f"{prefix}{k}"], dtype=np.float64) for k in PARAM_NAMES}
    return TaggerModel(vocab, meta["window"], params)


def save_model(path, model: TaggerModel) -> None:
    with open(path, "wb") as f:
        np.savez(f, **model_arrays(model))


def load_model(path) -> TaggerModel:
    with np.load(path, allow_pickle=False) as data:
        return model_from_arrays(data)
