"""Channel usage analytics over recorded attention traces."""
from __future__ import annotations

import csv
import io
from typing import Iterable, List, Optional, Sequence

import numpy as np


def channel_utilization(traces: Iterable[np.ndarray], K: int, highway: bool = True) -> float:
    """Mean over users of (distinct argmax content channels) / (number of content channels).

    ``traces`` holds one (T, K) array of write attention per user. The highway
    channel (last column) is excluded from the argmax when ``highway`` is set.
    Users with empty traces are skipped.
    """
    n_content = K - 1 if highway else K
    if n_content < 1:
        raise ValueError("no content channels to measure")
    values = []
    for tr in traces:
        tr = np.asarray(tr)
        if tr.size == 0:
            continue
        hits = np.unique(np.argmax(tr[:, :n_content], axis=1))
        values.append(len(hits) / n_content)
    if not values:
        raise ValueError("no non-empty traces")
    return float(np.mean(values))


def readout_attention_profile(traces: Iterable[np.ndarray]) -> np.ndarray:
    """Cumulative per-channel reading attention, normalized to sum to 1."""
    total: Optional[np.ndarray] = None
    for z in traces:
        z = np.asarray(z, dtype=np.float64)
        total = z.copy() if total is None else total + z
    if total is None:
        raise ValueError("no reading traces")
    return total / total.sum()


def heatmap_csv(traces: Sequence[np.ndarray], user_ids: Sequence[str], K: int) -> str:
    """Long-form CSV of write attention: user_id, step, ch0..ch{K-1}."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["user_id", "step"] + [f"ch{k}" for k in range(K)])
    for uid, tr in zip(user_ids, traces):
        for t, row in enumerate(np.asarray(tr)):
            writer.writerow([uid, t] + [repr(float(v)) for v in row])
    return out.getvalue()
