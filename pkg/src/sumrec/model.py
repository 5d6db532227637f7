"""Encoder + ranker bundle, item lookup and the JSON checkpoint format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .data import ItemTable
from .encoder import AblationFlags, GruEncoder, GruParams, SumEncoder, SumParams, rum_flags
from .ranker import RankerParams

CHECKPOINT_VERSION = 1
ENCODER_KINDS = ("sum", "rum", "gru")


@dataclass
class Embeddings:
    """Learned item-ID and category-ID tables; an item is their concatenation."""

    item: np.ndarray
    category: np.ndarray
    item_category: np.ndarray

    @classmethod
    def init(cls, items: ItemTable, item_dim: int, category_dim: int, rng, scale: float = 0.1):
        return cls(
            item=rng.normal(0.0, scale, (len(items), item_dim)),
            category=rng.normal(0.0, scale, (len(items.category_ids), category_dim)),
            item_category=np.asarray(items.categories, dtype=np.int64),
        )

    @property
    def dim(self) -> int:
        return self.item.shape[1] + self.category.shape[1]

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        return np.concatenate([self.item[ids], self.category[self.item_category[ids]]], axis=-1)

    def accumulate(self, grads: Dict[str, np.ndarray], ids: np.ndarray, d: np.ndarray) -> None:
        di = self.item.shape[1]
        ids = ids.reshape(-1)
        d = d.reshape(-1, self.dim)
        np.add.at(grads["emb.item"], ids, d[:, :di])
        np.add.at(grads["emb.category"], self.item_category[ids], d[:, di:])


@dataclass
class Model:
    kind: str
    encoder_params: object
    ranker: RankerParams
    flags: Optional[AblationFlags] = None
    embeddings: Optional[Embeddings] = None
    item_ids: Optional[list] = None  # raw ids, kept for serving in learned-embedding mode

    @property
    def D(self) -> int:
        return self.ranker.D

    @property
    def K(self) -> int:
        return 1 if self.kind == "gru" else self.encoder_params.K

    def encoder(self):
        if self.kind == "gru":
            return GruEncoder(self.encoder_params)
        return SumEncoder(self.encoder_params, self.flags)

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder_params.tensors().items()}
        out.update({f"rank.{k}": v for k, v in self.ranker.tensors().items()})
        if self.embeddings is not None:
            out["emb.item"] = self.embeddings.item
            out["emb.category"] = self.embeddings.category
        return out

    def clamp(self) -> None:
        self.encoder_params.clamp()

    def vectors(self, ids: np.ndarray, items: Optional[ItemTable]) -> np.ndarray:
        if self.embeddings is not None:
            return self.embeddings.lookup(ids)
        if items is None or items.vectors is None:
            raise ValueError("fixed-embedding model needs an item table with vectors")
        return items.vectors[ids]

    def hyperparams(self) -> Dict[str, object]:
        hp: Dict[str, object] = {"kind": self.kind, "D": self.D, "K": self.K, "hidden": self.ranker.hidden}
        if self.kind != "gru":
            hp["beta"] = self.encoder_params.beta
            hp["read_beta"] = self.encoder_params.read_beta
            hp["flags"] = self.flags.as_dict()
        if self.embeddings is not None:
            hp["item_dim"] = self.embeddings.item.shape[1]
            hp["category_dim"] = self.embeddings.category.shape[1]
            hp["item_category"] = [int(c) for c in self.embeddings.item_category]
            hp["item_ids"] = list(self.item_ids or [])
        return hp


def build_model(kind: str, D: int, K: int, rng: np.random.Generator, flags: Optional[AblationFlags] = None,
                beta: float = 1.0, hidden: int = 64, items: Optional[ItemTable] = None,
                item_dim: int = 64, category_dim: int = 16) -> Model:
    if kind not in ENCODER_KINDS:
        raise ValueError(f"unknown encoder kind {kind!r}")
    embeddings = None
    if items is not None and items.learned:
        if item_dim + category_dim != D:
            raise ValueError(f"D={D} must equal item_dim + category_dim = {item_dim + category_dim}")
        embeddings = Embeddings.init(items, item_dim, category_dim, rng)
    if kind == "gru":
        enc, flags = GruParams.init(D, rng), None
    else:
        if kind == "rum":
            flags = rum_flags()
        flags = flags or AblationFlags()
        enc = SumParams.init(D, K, rng, highway=flags.highway_channel, beta=beta, read_beta=beta)
    ranker = RankerParams.init(D, rng, hidden)
    return Model(kind, enc, ranker, flags, embeddings,
                 list(items.raw_ids) if embeddings is not None else None)


# ----------------------------------------------------------------- checkpoint


def _tensor_json(arr: np.ndarray) -> Dict[str, object]:
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def dumps_checkpoint(model: Model, extra: Optional[Dict[str, object]] = None) -> str:
    """Versioned JSON document; floats use shortest round-trip repr."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "hyperparams": model.hyperparams(),
        "tensors": {k: _tensor_json(v) for k, v in sorted(model.tensors().items())},
    }
    if extra:
        doc["meta"] = extra
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_checkpoint(model: Model, path, extra=None) -> None:
    Path(path).write_text(dumps_checkpoint(model, extra))


def loads_checkpoint(text: str) -> Model:
    doc = json.loads(text)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    hp = doc["hyperparams"]
    tensors = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["tensors"].items()}

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    kind = hp["kind"]
    if kind == "gru":
        enc, flags = GruParams(**group("enc.")), None
    else:
        flags = AblationFlags(**hp["flags"])
        enc = SumParams(**group("enc."), beta=hp["beta"], read_beta=hp.get("read_beta", hp["beta"]))
    ranker = RankerParams(**group("rank."))
    embeddings = None
    item_ids = None
    if "emb.item" in tensors:
        embeddings = Embeddings(tensors["emb.item"], tensors["emb.category"],
                                np.array(hp["item_category"], dtype=np.int64))
        item_ids = hp.get("item_ids")
    model = Model(kind, enc, ranker, flags, embeddings, item_ids)
    if model.D != hp["D"] or model.K != hp["K"]:
        raise ValueError("checkpoint tensors disagree with declared D/K")
    return model


def load_checkpoint(path) -> Model:
    return loads_checkpoint(Path(path).read_text())
