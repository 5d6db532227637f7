"""Near-real-time user-state serving at single-node scale.

An ``ObjectStore`` maps user ids to immutable ``Entry`` records. Event
ingestion is a read-modify-write under a per-user lock (users update in
parallel, one user's events apply strictly in arrival order); scoring reads
the latest entry without locking. Snapshots take an exclusive gate so the
file is a consistent cut of the whole store.
"""
from __future__ import annotations

import hashlib
import json
import os
import socketserver
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Union

import numpy as np

from . import ranker as rk
from .data import ItemTable
from .encoder import MemoryState
from .model import Model

SNAPSHOT_FORMAT = "sumrec-snapshot"
SNAPSHOT_VERSION = 1


class ServingError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class SnapshotError(ServingError):
    def __init__(self, message: str):
        super().__init__("corrupt_snapshot", message)


@dataclass(frozen=True)
class Entry:
    state: MemoryState
    version: int
    last_update: int


@dataclass
class EventMessage:
    user_id: str
    timestamp: int = 0
    embedding: Optional[Sequence[float]] = None
    item_id: Optional[str] = None


@dataclass
class ScoreRequest:
    user_id: str
    candidates: List[Union[str, Sequence[float]]]


@dataclass
class ScoreResponse:
    user_id: str
    version: int
    scores: List[Optional[float]]
    errors: List[Optional[Dict[str, object]]] = field(default_factory=list)


class _Gate:
    """Shared/exclusive gate: many appliers, or one snapshotter."""

    def __init__(self):
        self._cond = threading.Condition()
        self._active = 0
        self._exclusive = False

    @contextmanager
    def shared(self):
        with self._cond:
            while self._exclusive:
                self._cond.wait()
            self._active += 1
        try:
            yield
        finally:
            with self._cond:
                self._active -= 1
                self._cond.notify_all()

    @contextmanager
    def exclusive(self):
        with self._cond:
            while self._exclusive:
                self._cond.wait()
            self._exclusive = True
            while self._active:
                self._cond.wait()
        try:
            yield
        finally:
            with self._cond:
                self._exclusive = False
                self._cond.notify_all()


class ObjectStore:
    """In-memory map user_id -> Entry with per-user serialization."""

    def __init__(self, D: int, K: int):
        self.D = D
        self.K = K
        self._entries: Dict[str, Entry] = {}
        self._locks: Dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self.gate = _Gate()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, user_id: str) -> bool:
        return user_id in self._entries

    def users(self) -> List[str]:
        return sorted(self._entries)

    def get(self, user_id: str) -> Optional[Entry]:
        return self._entries.get(user_id)

    def lock(self, user_id: str) -> threading.Lock:
        lk = self._locks.get(user_id)
        if lk is None:
            with self._locks_guard:
                lk = self._locks.setdefault(user_id, threading.Lock())
        return lk

    def put(self, user_id: str, entry: Entry) -> None:
        if entry.state.H.shape != (self.D, self.K):
            raise ServingError("dimension_mismatch", f"state shape {entry.state.H.shape} != ({self.D}, {self.K})")
        self._entries[user_id] = entry

    def same_as(self, other: "ObjectStore") -> bool:
        if (self.D, self.K) != (other.D, other.K) or self.users() != other.users():
            return False
        for u in self.users():
            a, b = self.get(u), other.get(u)
            if a.version != b.version or a.last_update != b.last_update or not a.state.same_as(b.state):
                return False
        return True

    # ------------------------------------------------------------- snapshots

    def _body_lines(self) -> List[str]:
        lines = []
        for u in self.users():
            e = self._entries[u]
            rec = {
                "user_id": u,
                "version": e.version,
                "last_update": e.last_update,
                "steps": e.state.steps,
                "H": [float(v) for v in e.state.H.reshape(-1)],
                "prev_x": None if e.state.prev_x is None else [float(v) for v in e.state.prev_x],
            }
            lines.append(json.dumps(rec, separators=(",", ":")) + "\n")
        return lines

    def snapshot(self, path) -> int:
        """Write a consistent snapshot atomically; returns the user count."""
        with self.gate.exclusive():
            body = "".join(self._body_lines()).encode()
            n = len(self._entries)
        header = {
            "format": SNAPSHOT_FORMAT,
            "format_version": SNAPSHOT_VERSION,
            "D": self.D,
            "K": self.K,
            "n_users": n,
            "checksum": "sha256:" + hashlib.sha256(body).hexdigest(),
        }
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(body)
        os.replace(tmp, path)
        return n

    @classmethod
    def restore(cls, path) -> "ObjectStore":
        """Load a snapshot; refuses (SnapshotError) on any checksum or format problem."""
        raw = Path(path).read_bytes()
        head, sep, body = raw.partition(b"\n")
        try:
            header = json.loads(head)
        except ValueError as err:
            raise SnapshotError(f"unreadable snapshot header: {err}") from None
        if not isinstance(header, dict) or header.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotError("not a sumrec snapshot")
        if header.get("format_version") != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {header.get('format_version')!r}")
        if not sep or "sha256:" + hashlib.sha256(body).hexdigest() != header.get("checksum"):
            raise SnapshotError("checksum mismatch: snapshot is truncated or corrupt")
        D, K = int(header["D"]), int(header["K"])
        store = cls(D, K)
        lines = body.decode().splitlines()
        if len(lines) != header["n_users"]:
            raise SnapshotError("user count does not match header")
        for line in lines:
            rec = json.loads(line)
            H = np.array(rec["H"], dtype=np.float64).reshape(D, K)
            prev = None if rec["prev_x"] is None else np.array(rec["prev_x"], dtype=np.float64)
            state = MemoryState(H=H, prev_x=prev, steps=int(rec["steps"]))
            store._entries[rec["user_id"]] = Entry(state, int(rec["version"]), int(rec["last_update"]))
        return store


class ServingEngine:
    """Event ingestion and scoring over an ``ObjectStore`` with frozen parameters."""

    def __init__(self, model: Model, store: Optional[ObjectStore] = None, items: Optional[ItemTable] = None):
        self.model = model
        self.encoder = model.encoder()
        self.store = store if store is not None else ObjectStore(model.D, model.K)
        if (self.store.D, self.store.K) != (model.D, model.K):
            raise ServingError("dimension_mismatch",
                               f"store is D={self.store.D} K={self.store.K}, model is D={model.D} K={model.K}")
        self.items = items
        self._item_index: Dict[str, int] = {}
        if model.embeddings is not None and model.item_ids:
            self._item_index = {r: i for i, r in enumerate(model.item_ids)}
        elif items is not None:
            self._item_index = {r: i for i, r in enumerate(items.raw_ids)}

    # ---------------------------------------------------------------- lookup

    def item_vector(self, item_id: str) -> np.ndarray:
        idx = self._item_index.get(item_id)
        if idx is None:
            raise ServingError("unknown_item", f"unknown item id {item_id!r}")
        return self.model.vectors(np.array([idx]), self.items)[0]

    def _vector(self, value) -> np.ndarray:
        if isinstance(value, str):
            return self.item_vector(value)
        try:
            x = np.asarray(value, dtype=np.float64)
        except (TypeError, ValueError):
            raise ServingError("bad_request", "embedding must be a list of numbers") from None
        if x.shape != (self.model.D,):
            raise ServingError("dimension_mismatch", f"expected a {self.model.D}-dim embedding, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ServingError("bad_request", "embedding has non-finite entries")
        return x

    # ------------------------------------------------------------- contracts

    def apply_event(self, msg: EventMessage) -> int:
        """One-step incremental write of the user's state; returns the new version."""
        if msg.embedding is not None:
            x = self._vector(msg.embedding)
        elif msg.item_id is not None:
            x = self.item_vector(msg.item_id)
        else:
            raise ServingError("bad_request", "event needs an embedding or an item_id")
        with self.store.gate.shared(), self.store.lock(msg.user_id):
            entry = self.store.get(msg.user_id)
            state = entry.state if entry else self.encoder.init_state()
            new = self.encoder.write(state, x)
            version = (entry.version if entry else 0) + 1
            self.store.put(msg.user_id, Entry(new, version, int(msg.timestamp)))
        return version

    def score(self, req: ScoreRequest) -> ScoreResponse:
        """Score candidates against the user's latest state (zero state if unseen)."""
        entry = self.store.get(req.user_id)
        state = entry.state if entry else self.encoder.init_state()
        version = entry.version if entry else 0
        scores: List[Optional[float]] = []
        errors: List[Optional[Dict[str, object]]] = []
        for i, cand in enumerate(req.candidates):
            try:
                v = self._vector(cand)
            except ServingError as err:
                scores.append(None)
                errors.append({"index": i, "error": err.code, "message": err.message})
                continue
            u = self.encoder.read(state, v)
            scores.append(rk.score(self.model.ranker, u, v))
            errors.append(None)
        return ScoreResponse(req.user_id, version, scores, errors)

    # -------------------------------------------------------------- protocol

    def handle(self, request: Dict[str, object]) -> Dict[str, object]:
        """Dispatch one decoded JSON request object to a response object."""
        try:
            if not isinstance(request, dict):
                raise ServingError("bad_request", "request must be a JSON object")
            op = request.get("op")
            if op == "event":
                msg = EventMessage(
                    user_id=str(_required(request, "user_id")),
                    timestamp=int(request.get("timestamp", 0)),
                    embedding=request.get("embedding"),
                    item_id=request.get("item_id"),
                )
                return {"ok": True, "user_id": msg.user_id, "version": self.apply_event(msg)}
            if op == "score":
                req = ScoreRequest(str(_required(request, "user_id")), list(_required(request, "candidates")))
                resp = self.score(req)
                out = {"ok": True, "user_id": resp.user_id, "version": resp.version, "scores": resp.scores}
                if any(e is not None for e in resp.errors):
                    out["errors"] = [e for e in resp.errors if e is not None]
                return out
            if op == "snapshot":
                n = self.store.snapshot(str(_required(request, "path")))
                return {"ok": True, "n_users": n}
            if op == "restore":
                store = ObjectStore.restore(str(_required(request, "path")))
                if (store.D, store.K) != (self.model.D, self.model.K):
                    raise ServingError("dimension_mismatch", "snapshot D/K does not match the loaded model")
                self.store = store
                return {"ok": True, "n_users": len(store)}
            if op == "stats":
                return {"ok": True, "n_users": len(self.store), "D": self.model.D, "K": self.model.K,
                        "encoder": self.model.kind}
            raise ServingError("unknown_op", f"unknown op {op!r}")
        except ServingError as err:
            return {"ok": False, "error": err.code, "message": err.message}
        except (TypeError, ValueError, OSError) as err:
            return {"ok": False, "error": "bad_request", "message": str(err)}

    def handle_line(self, line: str) -> str:
        try:
            request = json.loads(line)
        except ValueError as err:
            return json.dumps({"ok": False, "error": "bad_json", "message": str(err)})
        return json.dumps(self.handle(request))

    def serve_pipe(self, infile: TextIO, outfile: TextIO) -> int:
        """Line-delimited JSON loop over a pipe; returns the request count."""
        n = 0
        for line in infile:
            if not line.strip():
                continue
            outfile.write(self.handle_line(line) + "\n")
            outfile.flush()
            n += 1
        return n

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 7070):
        """Threaded TCP server speaking the same line protocol (one request per line)."""
        engine = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    line = raw.decode().strip()
                    if line:
                        self.wfile.write((engine.handle_line(line) + "\n").encode())

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        return Server((host, port), Handler)


def _required(request: Dict[str, object], key: str):
    if key not in request:
        raise ServingError("bad_request", f"missing field {key!r}")
    return request[key]
