"""End-to-end training by backpropagation through the unrolled write sequence.

Samples that share a history (one positive and its negatives) are grouped so
the history is encoded once and read once per candidate. Histories are
left-padded inside a batch; padded steps are masked out of every update.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ranker as rk
from .data import Dataset, ItemTable, Sample
from .encoder import AblationFlags, SumEncoder, rum_flags
from .metrics import EvalReport, evaluate
from .model import Model, build_model
from .numerics import NumericError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    lam: float = 0.0
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 2
    D: int = 64
    K: int = 5
    beta: float = 1.0
    hidden: int = 64
    max_len: int = 100
    encoder_kind: str = "sum"
    flags: AblationFlags = field(default_factory=AblationFlags)
    clip_norm: float = 5.0
    item_dim: int = 64
    category_dim: int = 16
    seed: int = 0

    def validate(self) -> None:
        for name in ("learning_rate", "batch_size", "max_epochs", "D", "K", "beta", "hidden", "max_len"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.patience < 0:
            raise ValueError("lam and patience must be non-negative")
        if self.encoder_kind not in ("sum", "rum", "gru"):
            raise ValueError(f"unknown encoder kind {self.encoder_kind!r}")

    def effective_flags(self) -> Optional[AblationFlags]:
        if self.encoder_kind == "gru":
            return None
        if self.encoder_kind == "rum":
            return rum_flags()
        return self.flags

    def as_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["flags"] = self.flags.as_dict()
        return d


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ batching


@dataclass
class Group:
    """One history and the candidates scored against it."""

    user_id: str
    history: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray


def make_groups(samples: Sequence[Sample], max_len: int = 100) -> List[Group]:
    by_key: Dict[Tuple[str, int], list] = {}
    for s in samples:
        by_key.setdefault((s.user_id, s.group), []).append(s)
    groups = []
    for (uid, _), members in by_key.items():
        hist = np.asarray(members[0].history[-max_len:] if max_len else members[0].history, dtype=np.int64)
        groups.append(Group(
            uid, hist,
            np.array([m.target for m in members], dtype=np.int64),
            np.array([m.label for m in members], dtype=np.float64),
        ))
    return groups


@dataclass
class Batch:
    hist: np.ndarray  # (B, T) item ids, left-padded
    mask: np.ndarray  # (B, T) 1.0 on real events
    cand: np.ndarray  # (B, C)
    cmask: np.ndarray  # (B, C) bool
    labels: np.ndarray  # (B, C)
    user_ids: List[str]


def collate(groups: Sequence[Group]) -> Batch:
    B = len(groups)
    T = max(len(g.history) for g in groups)
    C = max(len(g.candidates) for g in groups)
    hist = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    cand = np.zeros((B, C), dtype=np.int64)
    cmask = np.zeros((B, C), dtype=bool)
    labels = np.zeros((B, C))
    for b, g in enumerate(groups):
        n = len(g.history)
        if n:
            hist[b, T - n:] = g.history
            mask[b, T - n:] = 1.0
        c = len(g.candidates)
        cand[b, :c] = g.candidates
        cmask[b, :c] = True
        labels[b, :c] = g.labels
    return Batch(hist, mask, cand, cmask, labels, [g.user_id for g in groups])


def make_batches(groups: Sequence[Group], batch_size: int, rng: np.random.Generator,
                 shuffle: bool = True, bucket: int = 8) -> List[List[Group]]:
    """Split groups into batches of about ``batch_size`` samples.

    After shuffling, runs of ``bucket`` batches are sorted by history length
    to cut padding.
    """
    order = rng.permutation(len(groups)) if shuffle else np.arange(len(groups))
    per_group = max(1, int(np.mean([len(g.candidates) for g in groups]))) if groups else 1
    groups_per_batch = max(1, batch_size // per_group)
    chunk = groups_per_batch * bucket
    batches: List[List[Group]] = []
    for start in range(0, len(order), chunk):
        block = [groups[i] for i in order[start:start + chunk]]
        if shuffle:
            block.sort(key=lambda g: len(g.history))
        batches.extend(block[i:i + groups_per_batch] for i in range(0, len(block), groups_per_batch))
    if shuffle:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# ------------------------------------------------------------ forward / BPTT


def _forward(model: Model, batch: Batch, items: Optional[ItemTable], keep: bool):
    enc = model.encoder()
    X = model.vectors(batch.hist, items)
    V = model.vectors(batch.cand, items)
    B, T = batch.hist.shape
    carry = enc.zero_carry(B)
    caches = []
    for t in range(T):
        m = batch.mask[:, t]
        if not m.any():
            caches.append(None)
            continue
        carry, cache = enc.step(carry, X[:, t], None if m.all() else m)
        caches.append(cache if keep else None)
    U, zr, rcache = enc.readout(carry, V)
    valid = batch.cmask.reshape(-1)
    D = model.D
    U_f = U.reshape(-1, D)[valid]
    V_f = V.reshape(-1, D)[valid]
    yhat, logit, kcache = rk.forward(model.ranker, U_f, V_f)
    if not np.all(np.isfinite(yhat)):
        raise NumericError("non-finite prediction")
    return {"enc": enc, "X": X, "V": V, "caches": caches, "rcache": rcache, "kcache": kcache,
            "yhat": yhat, "zr": zr, "valid": valid}


def loss_and_grads(model: Model, batch: Batch, items: Optional[ItemTable], lam: float = 0.0,
                   need_grads: bool = True):
    """Mean clipped BCE (+ L2) over the batch's candidates and its gradients."""
    fw = _forward(model, batch, items, keep=need_grads)
    y = batch.labels.reshape(-1)[fw["valid"]]
    yhat = fw["yhat"]
    tensors = model.tensors()
    loss = rk.loss(yhat, y, lam, tensors.values())
    if not need_grads:
        return loss, None, yhat
    enc = fw["enc"]
    n = len(y)
    grads = {k: np.zeros_like(v) for k, v in tensors.items()}
    rgrads = {k: grads[f"rank.{k}"] for k in model.ranker.tensors()}
    egrads = {k: grads[f"enc.{k}"] for k in model.encoder_params.tensors()}
    dlogit = rk.dloss_dlogit(yhat, y, n)
    dU_f, dV_f = rk.backward(model.ranker, fw["kcache"], dlogit, rgrads)
    B, C = batch.cand.shape
    D = model.D
    dU = np.zeros((B * C, D))
    dU[fw["valid"]] = dU_f
    dV = np.zeros((B * C, D))
    dV[fw["valid"]] = dV_f
    dcarry, dV_enc = enc.readout_backward(fw["rcache"], dU.reshape(B, C, D), egrads)
    dV = dV.reshape(B, C, D) + dV_enc
    need_dx = model.embeddings is not None
    dX = np.zeros_like(fw["X"]) if need_dx else None
    for t in range(batch.hist.shape[1] - 1, -1, -1):
        cache = fw["caches"][t]
        if cache is None:
            continue
        dcarry, dx = enc.step_backward(cache, dcarry, egrads, need_dx)
        if need_dx:
            dX[:, t] = dx * batch.mask[:, t][:, None]
    if need_dx:
        model.embeddings.accumulate(grads, batch.hist, dX)
        dV = dV * batch.cmask[:, :, None]
        model.embeddings.accumulate(grads, batch.cand, dV)
    if lam:
        for k, v in tensors.items():
            grads[k] += 2.0 * lam * v
    return loss, grads, yhat


def forward_sequence(model: Model, sample: Sample, items: Optional[ItemTable] = None):
    """Replay one sample's history from a fresh state, read with the target, score.

    Returns ``(yhat, trace)`` where trace holds the per-step write attention
    (SUM only), the final state and the read attention.
    """
    enc = model.encoder()
    state = enc.init_state()
    writes = []
    for x in model.vectors(np.asarray(sample.history, dtype=np.int64), items):
        state, z = enc.write(state, x, return_attention=True)
        writes.append(z)
    v = model.vectors(np.array([sample.target]), items)[0]
    u, zr = enc.read(state, v, return_attention=True)
    yhat = rk.score(model.ranker, u, v)
    trace = {"write": np.array(writes) if writes and writes[0] is not None else None,
             "read": zr, "state": state, "u": u}
    return yhat, trace


def backward_sequence(model: Model, sample: Sample, items: Optional[ItemTable] = None, lam: float = 0.0):
    """Gradients of the single-sample loss wrt every trainable tensor."""
    group = Group(sample.user_id, np.asarray(sample.history, dtype=np.int64),
                  np.array([sample.target]), np.array([float(sample.label)]))
    loss, grads, _ = loss_and_grads(model, collate([group]), items, lam)
    return grads


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              lr: Optional[float] = None) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    lr = state.lr if lr is None else lr
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- evaluation


def predict_groups(model: Model, groups: Sequence[Group], items: Optional[ItemTable],
                   batch_size: int = 1024):
    """Scores for every candidate, in group order; returns (user_ids, scores, labels)."""
    users, scores, labels = [], [], []
    rng = np.random.default_rng(0)
    for chunk in make_batches(groups, batch_size, rng, shuffle=False):
        batch = collate(chunk)
        fw = _forward(model, batch, items, keep=False)
        valid = fw["valid"]
        users.extend(np.repeat(batch.user_ids, batch.cand.shape[1])[valid])
        scores.append(fw["yhat"])
        labels.append(batch.labels.reshape(-1)[valid])
    return list(users), np.concatenate(scores), np.concatenate(labels)


def evaluate_groups(model: Model, groups: Sequence[Group], items: Optional[ItemTable]) -> EvalReport:
    users, scores, labels = predict_groups(model, groups, items)
    return evaluate(users, scores, labels)


def evaluate_samples(model: Model, samples: Sequence[Sample], items: Optional[ItemTable],
                     max_len: int = 100) -> EvalReport:
    return evaluate_groups(model, make_groups(samples, max_len), items)


def collect_traces(model: Model, groups: Sequence[Group], items: Optional[ItemTable],
                   batch_size: int = 1024):
    """Per-group write attention (T_i, K) and read attention of positive candidates.

    Returns ``(write_traces, read_traces, user_ids)``; write traces are empty
    for encoders without channel attention.
    """
    write_traces, read_traces, users = [], [], []
    for chunk in make_batches(groups, batch_size, np.random.default_rng(0), shuffle=False):
        batch = collate(chunk)
        fw = _forward(model, batch, items, keep=True)
        enc = fw["enc"]
        per_step = [None if c is None else enc.attention_of(c) for c in fw["caches"]]
        for b, g in enumerate(chunk):
            steps = [per_step[t][b] for t in range(batch.hist.shape[1])
                     if batch.mask[b, t] > 0 and per_step[t] is not None]
            write_traces.append(np.array(steps) if steps else np.zeros((0, model.K)))
            users.append(g.user_id)
            for c in range(len(g.candidates)):
                if g.labels[c] == 1:
                    read_traces.append(fw["zr"][b, c])
    return write_traces, read_traces, users


# ------------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_gauc: float
    valid_ndcg3: float
    valid_logloss: float
    seconds: float


@dataclass
class TrainResult:
    model: Model
    history: List[EpochRecord]
    best_epoch: int
    best_valid_gauc: float

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,valid_gauc,valid_ndcg3,valid_logloss"]
        for r in self.history:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.valid_gauc!r},{r.valid_ndcg3!r},{r.valid_logloss!r}")
        return "\n".join(lines) + "\n"


def init_model(config: TrainConfig, dataset: Dataset) -> Model:
    rng = np.random.default_rng(config.seed)
    D = dataset.D if dataset.items.learned else config.D
    if not dataset.items.learned and config.D != dataset.D:
        raise ValueError(f"config D={config.D} does not match dataset D={dataset.D}")
    return build_model(config.encoder_kind, D, config.K, rng, config.effective_flags(),
                       config.beta, config.hidden, dataset.items, config.item_dim, config.category_dim)


def train(config: TrainConfig, dataset: Dataset, model: Optional[Model] = None,
          progress: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Adam mini-batch training with early stopping on validation gAUC.

    Training stops once ``patience + 1`` consecutive epochs fail to improve on
    the best validation gAUC; the best parameters are restored.
    """
    config.validate()
    train_set, valid_set = dataset["train"], dataset["valid"]
    if not train_set or not valid_set:
        raise ValueError("train and valid splits must be non-empty")
    model = model or init_model(config, dataset)
    rng = np.random.default_rng(config.seed + 1)
    items = dataset.items
    train_groups = make_groups(train_set, config.max_len)
    valid_groups = make_groups(valid_set, config.max_len)
    tensors = model.tensors()
    opt = AdamState(lr=config.learning_rate)
    history: List[EpochRecord] = []
    best_gauc, best_epoch, best = -np.inf, 0, None
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        total, count = 0.0, 0
        for chunk in make_batches(train_groups, config.batch_size, rng):
            batch = collate(chunk)
            try:
                loss, grads, yhat = loss_and_grads(model, batch, items, config.lam)
            except NumericError as err:
                raise TrainingDiverged(f"epoch {epoch}: {err}") from err
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss {loss}")
            clip_global_norm(grads, config.clip_norm)
            adam_step(opt, tensors, grads)
            model.clamp()
            total += loss * len(yhat)
            count += len(yhat)
        report = evaluate_groups(model, valid_groups, items)
        record = EpochRecord(epoch, total / count, report.gauc, report.ndcg3, report.logloss,
                             time.perf_counter() - start)
        history.append(record)
        log.info("epoch %d loss %.4f valid gAUC %.4f (%.1fs)", epoch, record.train_loss,
                 record.valid_gauc, record.seconds)
        if progress:
            progress(record)
        if report.gauc > best_gauc:
            best_gauc, best_epoch = report.gauc, epoch
            best = {k: v.copy() for k, v in tensors.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break
    for k, v in best.items():
        tensors[k][...] = v
    return TrainResult(model, history, best_epoch, best_gauc)
