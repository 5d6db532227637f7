"""User encoders behind one incremental contract: init -> write(event) -> read(item).

``SumEncoder`` is the multi-channel sequential user matrix; ``rum_flags()``
configures it as the RUM reference. ``GruEncoder`` is the single-vector
baseline. Every encoder exposes

* single-instance ``init_state`` / ``write`` / ``read`` used by serving and
  offline replay, and
* batched ``zero_carry`` / ``step`` / ``step_backward`` / ``readout`` /
  ``readout_backward`` used by the trainer for BPTT.

The single-instance methods are thin wrappers around the batched ones with a
batch of one, so a streamed state is bit-identical to an offline replay.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .numerics import (
    DTYPE,
    NumericError,
    ShapeError,
    as_array,
    cosine_rows,
    cosine_rows_backward,
    sigmoid,
    softmax_scaled,
    softmax_scaled_backward,
)

ALPHA_INIT = 0.98
ALPHA_MIN = 1e-6
ALPHA_MAX = 1.5 - 1e-6


@dataclass(frozen=True)
class AblationFlags:
    instance_level_attention: bool = True
    local_proximity_debuff: bool = True
    highway_channel: bool = True
    legacy_read: bool = False

    def as_dict(self) -> Dict[str, bool]:
        return {
            "instance_level_attention": self.instance_level_attention,
            "local_proximity_debuff": self.local_proximity_debuff,
            "highway_channel": self.highway_channel,
            "legacy_read": self.legacy_read,
        }


def rum_flags() -> AblationFlags:
    return AblationFlags(
        instance_level_attention=False,
        local_proximity_debuff=False,
        highway_channel=False,
        legacy_read=True,
    )


# Single-component ablations, keyed by the row label used in reports.
ABLATIONS = {
    "SUM": AblationFlags(),
    "w/o instance-level att": AblationFlags(instance_level_attention=False),
    "w/o proximity debuff": AblationFlags(local_proximity_debuff=False),
    "w/o highway channel": AblationFlags(highway_channel=False),
    "reading operation (-)": AblationFlags(legacy_read=True),
}


@dataclass(frozen=True)
class Event:
    user_id: str
    x: np.ndarray
    timestamp: int = 0


@dataclass(frozen=True)
class MemoryState:
    """Channel matrix ``H`` (D x K), previous event and write counter.

    For the SUM encoder with a highway channel, column K-1 is the highway.
    GRU states use K = 1.
    """

    H: np.ndarray
    prev_x: Optional[np.ndarray] = None
    steps: int = 0

    def __post_init__(self):
        if (self.prev_x is None) != (self.steps == 0):
            raise ValueError("prev_x must be present iff steps > 0")

    @property
    def D(self) -> int:
        return self.H.shape[0]

    @property
    def K(self) -> int:
        return self.H.shape[1]

    def same_as(self, other: "MemoryState") -> bool:
        """Bitwise equality of all fields."""
        if self.steps != other.steps or self.H.shape != other.H.shape:
            return False
        if self.H.tobytes() != other.H.tobytes():
            return False
        if self.prev_x is None or other.prev_x is None:
            return self.prev_x is None and other.prev_x is None
        return self.prev_x.tobytes() == other.prev_x.tobytes()


def init_state(K: int, D: int, highway: bool = False) -> MemoryState:
    if K < 1 or D < 1:
        raise ValueError("K and D must be >= 1")
    if highway and K < 2:
        raise ValueError("highway channel needs K >= 2 (at least one content channel)")
    return MemoryState(H=np.zeros((D, K), dtype=DTYPE))


# ---------------------------------------------------------------- parameters


@dataclass
class SumParams:
    Fw: np.ndarray  # D x (K-1) with highway, D x K without
    Fr: np.ndarray  # D x D reading transform
    Fr_legacy: np.ndarray  # D x K legacy reading heads
    Wa: np.ndarray  # D x 2D
    ba: np.ndarray
    We: np.ndarray  # D x 2D
    be: np.ndarray
    Wr: np.ndarray  # 2D
    br: np.ndarray  # scalar (0-d)
    alpha: np.ndarray  # scalar (0-d)
    beta: float = 1.0
    read_beta: float = 1.0

    @property
    def D(self) -> int:
        return self.Fr.shape[0]

    @property
    def K(self) -> int:
        return self.Fr_legacy.shape[1]

    @classmethod
    def init(cls, D: int, K: int, rng: np.random.Generator, highway: bool = True,
             beta: float = 1.0, read_beta: float = 1.0) -> "SumParams":
        if highway and K < 2:
            raise ValueError("highway channel needs K >= 2")
        n_content = K - 1 if highway else K
        s = 1.0 / np.sqrt(D)
        # memory-side gate columns start at zero: the first updates look like a
        # plain item write and the instance context is learned from there
        Wa = np.concatenate([rng.normal(0.0, s, (D, D)), np.zeros((D, D))], axis=1)
        We = np.concatenate([rng.normal(0.0, s, (D, D)), np.zeros((D, D))], axis=1)
        return cls(
            Fw=rng.normal(0.0, 1.0, (D, n_content)),
            Fr=rng.normal(0.0, s, (D, D)),
            Fr_legacy=rng.normal(0.0, 1.0, (D, K)),
            Wa=Wa,
            ba=np.zeros(D),
            We=We,
            be=np.zeros(D),
            Wr=rng.normal(0.0, s, 2 * D),
            br=np.array(0.0),
            alpha=np.array(ALPHA_INIT),
            beta=beta,
            read_beta=read_beta,
        )

    def tensors(self) -> Dict[str, np.ndarray]:
        names = ["Fw", "Fr", "Fr_legacy", "Wa", "ba", "We", "be", "Wr", "br", "alpha"]
        return {n: getattr(self, n) for n in names}

    def clamp(self) -> None:
        np.clip(self.alpha, ALPHA_MIN, ALPHA_MAX, out=self.alpha)


@dataclass
class GruParams:
    Wz: np.ndarray  # D x 2D
    bz: np.ndarray
    Wr: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    bh: np.ndarray

    @property
    def D(self) -> int:
        return self.bz.shape[0]

    @classmethod
    def init(cls, D: int, rng: np.random.Generator) -> "GruParams":
        s = 1.0 / np.sqrt(D)
        # memory-side gate columns start at zero: the first updates look like a
        # plain item write and the instance context is learned from there
        Wa = np.concatenate([rng.normal(0.0, s, (D, D)), np.zeros((D, D))], axis=1)
        We = np.concatenate([rng.normal(0.0, s, (D, D)), np.zeros((D, D))], axis=1)
        return cls(
            Wz=rng.normal(0.0, s, (D, 2 * D)), bz=np.zeros(D),
            Wr=rng.normal(0.0, s, (D, 2 * D)), br=np.zeros(D),
            Wh=rng.normal(0.0, s, (D, 2 * D)), bh=np.zeros(D),
        )

    def tensors(self) -> Dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in ["Wz", "bz", "Wr", "br", "Wh", "bh"]}

    def clamp(self) -> None:
        pass


# ----------------------------------------------------------- SUM write path


def _check_vec(x, D: int, name: str) -> np.ndarray:
    x = as_array(x, name)
    if x.shape != (D,):
        raise ShapeError(f"{name}: expected dimension {D}, got shape {x.shape}")
    return x


def _attention_batch(p: SumParams, flags: AblationFlags, x, prev, has_prev):
    """Batched writing attention. Returns ``z`` (B, K) and a cache."""
    logits = x @ p.Fw
    soft = softmax_scaled(logits, p.beta)
    cache = {"soft": soft}
    zc = soft
    if flags.local_proximity_debuff:
        cos, na, nb, valid = cosine_rows(x, prev)
        sim = np.where(has_prev, cos, 0.0)
        factor = p.alpha ** sim
        zc = soft * factor[:, None]
        cache.update(cos=cos, na=na, nb=nb, valid=valid, sim=sim, factor=factor)
    if flags.highway_channel:
        z = np.concatenate([zc, np.ones((x.shape[0], 1))], axis=1)
    else:
        z = zc
    return z, cache


def write_attention(p: SumParams, x, prev_x=None, flags: AblationFlags = AblationFlags()) -> np.ndarray:
    """Writing attention of one event over all K channels.

    Content channels get a scaled softmax of ``x . f_k``; the highway channel
    (last index) is pinned to 1. With the debuff on and a previous event,
    content entries are multiplied by ``alpha ** cosine(x, prev_x)``.
    """
    x = _check_vec(x, p.D, "x")
    has_prev = prev_x is not None
    prev = _check_vec(prev_x, p.D, "prev_x") if has_prev else np.zeros(p.D)
    z, _ = _attention_batch(p, flags, x[None], prev[None], np.array([has_prev]))
    return z[0]


def _sum_step(p: SumParams, flags: AblationFlags, carry, x, mask=None):
    H, prev, has_prev = carry["H"], carry["prev"], carry["has_prev"]
    D = p.D
    z, acache = _attention_batch(p, flags, x, prev, has_prev)
    cache = {"x": x, "prev": prev, "has_prev": has_prev, "H": H, "z": z, "mask": mask, **acache}
    if flags.instance_level_attention:
        hhat = (H @ z[:, :, None])[:, :, 0]
        c = np.concatenate([x, hhat], axis=1)
        reset = sigmoid(c @ p.Wr + p.br)
        ca = np.concatenate([x, reset[:, None] * hhat], axis=1)
        add = np.tanh(ca @ p.Wa.T + p.ba)
        erase = sigmoid(c @ p.We.T + p.be)
        cache.update(hhat=hhat, c=c, reset=reset, ca=ca)
    else:
        add = np.tanh(x @ p.Wa[:, :D].T + p.ba)
        erase = sigmoid(x @ p.We[:, :D].T + p.be)
    # alpha ** cos can exceed 1; capping the coefficient keeps each write a convex step
    raw = erase[:, :, None] * z[:, None, :]
    g = np.minimum(raw, 1.0)
    if mask is not None:
        g = g * mask[:, None, None]
    H_new = add[:, :, None] * g + H * (1.0 - g)
    cache.update(add=add, erase=erase, g=g, capped=raw > 1.0)
    if mask is None:
        new_prev = x
        new_has = np.ones_like(has_prev)
    else:
        new_prev = np.where(mask[:, None] > 0, x, prev)
        new_has = has_prev | (mask > 0)
    return {"H": H_new, "prev": new_prev, "has_prev": new_has}, cache


def _sum_step_backward(p: SumParams, flags: AblationFlags, cache, dcarry, grads, need_dx: bool):
    D = p.D
    H, g, add, erase, z, mask = (cache[k] for k in ("H", "g", "add", "erase", "z", "mask"))
    x = cache["x"]
    dHn = dcarry["H"]
    dH = dHn * (1.0 - g)
    dg = dHn * (add[:, :, None] - H)
    if mask is not None:
        dg = dg * mask[:, None, None]
    dg = np.where(cache["capped"], 0.0, dg)
    dadd = (dHn * g).sum(-1)
    derase = (dg * z[:, None, :]).sum(-1)
    dz = (dg * erase[:, :, None]).sum(1)
    dpa = dadd * (1.0 - add * add)
    dpe = derase * erase * (1.0 - erase)
    if flags.instance_level_attention:
        hhat, c, reset, ca = cache["hhat"], cache["c"], cache["reset"], cache["ca"]
        grads["Wa"] += dpa.T @ ca
        grads["ba"] += dpa.sum(0)
        dca = dpa @ p.Wa
        dx = dca[:, :D]
        drh = dca[:, D:]
        dreset = (drh * hhat).sum(-1)
        dhhat = reset[:, None] * drh
        grads["We"] += dpe.T @ c
        grads["be"] += dpe.sum(0)
        dc = dpe @ p.We
        dpr = dreset * reset * (1.0 - reset)
        grads["Wr"] += dpr @ c
        grads["br"] += dpr.sum()
        dc = dc + dpr[:, None] * p.Wr[None, :]
        dx = dx + dc[:, :D]
        dhhat = dhhat + dc[:, D:]
        dH = dH + dhhat[:, :, None] * z[:, None, :]
        dz = dz + np.einsum("bd,bdk->bk", dhhat, H)
    else:
        grads["Wa"][:, :D] += dpa.T @ x
        grads["ba"] += dpa.sum(0)
        grads["We"][:, :D] += dpe.T @ x
        grads["be"] += dpe.sum(0)
        dx = dpa @ p.Wa[:, :D] + dpe @ p.We[:, :D]
    n_content = p.Fw.shape[1]
    dzc = dz[:, :n_content]
    soft = cache["soft"]
    dprev = None
    if flags.local_proximity_debuff:
        factor, sim = cache["factor"], cache["sim"]
        dsoft = dzc * factor[:, None]
        dfactor = (dzc * soft).sum(-1)
        grads["alpha"] += (dfactor * sim * p.alpha ** (sim - 1.0)).sum()
        if need_dx:
            dsim = np.where(cache["has_prev"], dfactor * factor * np.log(p.alpha), 0.0)
            dxc, dprev = cosine_rows_backward(
                x, cache["prev"], cache["cos"], cache["na"], cache["nb"], cache["valid"], dsim
            )
            dx = dx + dxc
    else:
        dsoft = dzc
    dlog = softmax_scaled_backward(soft, dsoft, p.beta)
    grads["Fw"] += x.T @ dlog
    out = {"H": dH}
    if not need_dx:
        return out, None
    dx = dx + dlog @ p.Fw.T
    dprev_in = dprev if dprev is not None else np.zeros_like(x)
    # prev_out = where(mask, x, prev_in)
    dprev_out = dcarry.get("prev")
    if dprev_out is not None:
        if mask is None:
            dx = dx + dprev_out
        else:
            live = mask[:, None]
            dx = dx + dprev_out * live
            dprev_in = dprev_in + dprev_out * (1.0 - live)
    out["prev"] = dprev_in
    return out, dx


def _sum_read(p: SumParams, flags: AblationFlags, H, V):
    """H (B, D, K), V (B, C, D) -> u (B, C, D), z_r (B, C, K)."""
    if flags.legacy_read:
        w = V @ p.Fr_legacy
        q = None
    else:
        q = V @ p.Fr
        w = np.einsum("bcd,bdk->bck", q, H)
    zr = softmax_scaled(w, p.read_beta)
    u = np.einsum("bck,bdk->bcd", zr, H)
    return u, zr, {"H": H, "V": V, "q": q, "zr": zr}


def _sum_read_backward(p: SumParams, flags: AblationFlags, cache, dU, grads):
    H, V, q, zr = cache["H"], cache["V"], cache["q"], cache["zr"]
    dH = np.einsum("bcd,bck->bdk", dU, zr)
    dzr = np.einsum("bcd,bdk->bck", dU, H)
    dw = softmax_scaled_backward(zr, dzr, p.read_beta)
    if flags.legacy_read:
        grads["Fr_legacy"] += np.einsum("bcd,bck->dk", V, dw)
        dV = dw @ p.Fr_legacy.T
    else:
        dH = dH + np.einsum("bcd,bck->bdk", q, dw)
        dq = np.einsum("bck,bdk->bcd", dw, H)
        grads["Fr"] += np.einsum("bce,bcd->ed", V, dq)
        dV = dq @ p.Fr.T
    return {"H": dH}, dV


# ----------------------------------------------------------- GRU write path


def _gru_step(p: GruParams, carry, x, mask=None):
    h = carry["h"]
    c = np.concatenate([x, h], axis=1)
    z = sigmoid(c @ p.Wz.T + p.bz)
    r = sigmoid(c @ p.Wr.T + p.br)
    cn = np.concatenate([x, r * h], axis=1)
    n = np.tanh(cn @ p.Wh.T + p.bh)
    h_new = z * h + (1.0 - z) * n
    if mask is not None:
        h_new = np.where(mask[:, None] > 0, h_new, h)
    return {"h": h_new}, {"x": x, "h": h, "c": c, "z": z, "r": r, "cn": cn, "n": n, "mask": mask}


def _gru_step_backward(p: GruParams, cache, dcarry, grads, need_dx: bool):
    D = p.D
    x, h, c, z, r, cn, n, mask = (cache[k] for k in ("x", "h", "c", "z", "r", "cn", "n", "mask"))
    dout = dcarry["h"]
    if mask is not None:
        live = (mask > 0)[:, None]
        dnew = np.where(live, dout, 0.0)
        dh = np.where(live, 0.0, dout)
    else:
        dnew = dout
        dh = np.zeros_like(dout)
    dh = dh + dnew * z
    dz = dnew * (h - n)
    dn = dnew * (1.0 - z)
    dpn = dn * (1.0 - n * n)
    grads["Wh"] += dpn.T @ cn
    grads["bh"] += dpn.sum(0)
    dcn = dpn @ p.Wh
    drh = dcn[:, D:]
    dh = dh + drh * r
    dr = drh * h
    dpz = dz * z * (1.0 - z)
    dpr = dr * r * (1.0 - r)
    grads["Wz"] += dpz.T @ c
    grads["bz"] += dpz.sum(0)
    grads["Wr"] += dpr.T @ c
    grads["br"] += dpr.sum(0)
    dc = dpz @ p.Wz + dpr @ p.Wr
    dh = dh + dc[:, D:]
    dx = dcn[:, :D] + dc[:, :D] if need_dx else None
    return {"h": dh}, dx


def gru_write(p: GruParams, h, x) -> np.ndarray:
    """One GRU update of the state vector ``h`` with input ``x``."""
    h = _check_vec(h, p.D, "h")
    x = _check_vec(x, p.D, "x")
    out, _ = _gru_step(p, {"h": h[None]}, x[None])
    return out["h"][0]


# ------------------------------------------------------------ encoder objects


class _Encoder:
    params: object
    K: int

    @property
    def D(self) -> int:
        return self.params.D

    def init_state(self) -> MemoryState:
        return init_state(self.K, self.D)

    def _carry_from_state(self, state: MemoryState):
        raise NotImplementedError

    def _state_from_carry(self, carry, x, steps) -> MemoryState:
        raise NotImplementedError

    def write(self, state: MemoryState, x, return_attention: bool = False):
        """Apply one event; returns the new state (and write attention if asked)."""
        if state.H.shape != (self.D, self.K):
            raise ShapeError(f"state shape {state.H.shape} does not match encoder ({self.D}, {self.K})")
        x = _check_vec(x, self.D, "x")
        carry = self._carry_from_state(state)
        carry, cache = self.step(carry, x[None])
        new = self._state_from_carry(carry, x, state.steps + 1)
        if not np.all(np.isfinite(new.H)):
            raise NumericError("non-finite memory state after write", step=state.steps)
        if return_attention:
            return new, self._attention_from_cache(cache)
        return new

    def read(self, state: MemoryState, v, return_attention: bool = False):
        """Read a user vector for candidate item ``v``."""
        v = _check_vec(v, self.D, "v")
        u, zr, _ = self.readout(self._carry_from_state(state), v[None, None, :])
        if return_attention:
            return u[0, 0], zr[0, 0]
        return u[0, 0]

    def _attention_from_cache(self, cache):
        return None


class SumEncoder(_Encoder):
    """Multi-channel encoder; ``flags`` select the ablation or RUM variant."""

    def __init__(self, params: SumParams, flags: AblationFlags = AblationFlags()):
        expected = params.K - 1 if flags.highway_channel else params.K
        if params.Fw.shape[1] != expected:
            raise ShapeError(
                f"writing heads have {params.Fw.shape[1]} columns, flags require {expected}"
            )
        self.params = params
        self.flags = flags
        self.K = params.K

    def init_state(self) -> MemoryState:
        return init_state(self.K, self.D, highway=self.flags.highway_channel)

    def _carry_from_state(self, state):
        has = state.prev_x is not None
        prev = state.prev_x if has else np.zeros(self.D)
        return {"H": state.H[None], "prev": prev[None], "has_prev": np.array([has])}

    def _state_from_carry(self, carry, x, steps):
        return MemoryState(H=carry["H"][0], prev_x=x, steps=steps)

    def _attention_from_cache(self, cache):
        return cache["z"][0]

    def zero_carry(self, B: int):
        return {
            "H": np.zeros((B, self.D, self.K)),
            "prev": np.zeros((B, self.D)),
            "has_prev": np.zeros(B, dtype=bool),
        }

    def step(self, carry, x, mask=None):
        return _sum_step(self.params, self.flags, carry, x, mask)

    def step_backward(self, cache, dcarry, grads, need_dx=False):
        return _sum_step_backward(self.params, self.flags, cache, dcarry, grads, need_dx)

    def carry_grad_zero(self, B: int):
        return {"H": np.zeros((B, self.D, self.K)), "prev": np.zeros((B, self.D))}

    def readout(self, carry, V):
        return _sum_read(self.params, self.flags, carry["H"], V)

    def readout_backward(self, cache, dU, grads):
        return _sum_read_backward(self.params, self.flags, cache, dU, grads)

    @staticmethod
    def attention_of(cache) -> np.ndarray:
        return cache["z"]


class GruEncoder(_Encoder):
    """GRU baseline; its state is stored as a D x 1 matrix and read back as-is."""

    def __init__(self, params: GruParams):
        self.params = params
        self.flags = None
        self.K = 1

    def _carry_from_state(self, state):
        return {"h": state.H[:, 0][None]}

    def _state_from_carry(self, carry, x, steps):
        return MemoryState(H=carry["h"][0][:, None], prev_x=x, steps=steps)

    def zero_carry(self, B: int):
        return {"h": np.zeros((B, self.D))}

    def step(self, carry, x, mask=None):
        return _gru_step(self.params, carry, x, mask)

    def step_backward(self, cache, dcarry, grads, need_dx=False):
        return _gru_step_backward(self.params, cache, dcarry, grads, need_dx)

    def carry_grad_zero(self, B: int):
        return {"h": np.zeros((B, self.D))}

    def readout(self, carry, V):
        h = carry["h"]
        B, C, _ = V.shape
        u = np.broadcast_to(h[:, None, :], (B, C, self.D)).copy()
        return u, np.ones((B, C, 1)), None

    def readout_backward(self, cache, dU, grads):
        return {"h": dU.sum(1)}, np.zeros_like(dU)

    @staticmethod
    def attention_of(cache) -> Optional[np.ndarray]:
        return None


def write(params: SumParams, state: MemoryState, x, flags: AblationFlags = AblationFlags()) -> MemoryState:
    return SumEncoder(params, flags).write(state, x)


def read(params: SumParams, state: MemoryState, v, flags: AblationFlags = AblationFlags()) -> np.ndarray:
    return SumEncoder(params, flags).read(state, v)


def write_flops(D: int, K: int, flags: AblationFlags = AblationFlags()) -> Dict[str, int]:
    """Multiply-add count of one SUM write, split into shared and per-channel parts.

    The gate projections are computed once per event and shared by every
    channel (``shared``, quadratic in D); attention, merging and the
    erase-and-add update repeat per channel (``per_channel``, linear in D).
    """
    width = 2 * D if flags.instance_level_attention else D
    shared = 2 * D * width + (width if flags.instance_level_attention else 0)
    n_content = K - 1 if flags.highway_channel else K
    per_channel = D * n_content  # x . f_k
    if flags.instance_level_attention:
        per_channel += D * K  # h_hat merge
    per_channel += 3 * D * K  # erase * z, interpolation
    linear = 4 * D + (3 * D if flags.local_proximity_debuff else 0)
    return {"shared": shared, "per_channel": per_channel, "linear": linear,
            "total": shared + per_channel + linear}
