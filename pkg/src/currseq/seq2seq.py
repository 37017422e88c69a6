"""Single-layer LSTM encoder-decoder with hand-written gradients.

Everything is plain numpy. The encoder consumes the source sequence and
its final (hidden, cell) state seeds the decoder, which is teacher-forced
on the gold target and trained with masked per-token cross-entropy
(natural log). float32 is the training dtype; converting Parameters to
float64 gives the exact arithmetic needed for finite-difference checks.

Gate layout inside every 4h-wide weight block is (input, forget, cell
candidate, output). Padded encoder steps carry state through unchanged,
so a sequence's final state never depends on how much padding its batch
added.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .util import make_rng
from .vocab import EOS_ID, PAD_ID, SOS_ID

MAX_TARGET_LEN = 18  # 16 words + SOS + EOS


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    init_scale: float = 0.08
    seed: int = 0
    reverse_source: bool = False

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the reserved ids")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be positive")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        v, d, h = self.vocab_size, self.embed_dim, self.hidden_dim
        return {
            "enc_embed": (v, d),
            "dec_embed": (v, d),
            "enc_wx": (d, 4 * h),
            "enc_wh": (h, 4 * h),
            "enc_b": (4 * h,),
            "dec_wx": (d, 4 * h),
            "dec_wh": (h, 4 * h),
            "dec_b": (4 * h,),
            "out_w": (h, self.vocab_size),
            "out_b": (self.vocab_size,),
        }

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "init_scale": self.init_scale,
            "seed": self.seed,
            "reverse_source": self.reverse_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PARAM_FIELDS = (
    "enc_embed", "dec_embed",
    "enc_wx", "enc_wh", "enc_b",
    "dec_wx", "dec_wh", "dec_b",
    "out_w", "out_b",
)


@dataclass
class Parameters:
    """Named dense arrays; also the container for gradients and moments."""

    enc_embed: np.ndarray
    dec_embed: np.ndarray
    enc_wx: np.ndarray
    enc_wh: np.ndarray
    enc_b: np.ndarray
    dec_wx: np.ndarray
    dec_wh: np.ndarray
    dec_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in PARAM_FIELDS:
            yield name, getattr(self, name)

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_FIELDS]

    def copy(self) -> "Parameters":
        return Parameters(*(a.copy() for a in self.arrays()))

    def astype(self, dtype) -> "Parameters":
        return Parameters(*(a.astype(dtype) for a in self.arrays()))

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    @property
    def dtype(self):
        return self.enc_embed.dtype


def zeros_like_params(p: Parameters) -> Parameters:
    return Parameters(*(np.zeros_like(a) for a in p.arrays()))


def init_params(cfg: ModelConfig, dtype=np.float32) -> Parameters:
    """I.i.d. uniform on [-init_scale, +init_scale] from a Philox stream
    keyed by cfg.seed; array draw order is the declared field order."""
    rng = make_rng("init_params", cfg.seed)
    s = cfg.init_scale
    arrays = [
        rng.uniform(-s, s, size=shape).astype(dtype)
        for shape in cfg.shapes().values()
    ]
    return Parameters(*arrays)


@dataclass
class Batch:
    """PAD-right-padded source ids, SOS..EOS target ids, prediction mask.

    mask[b, t] marks that target position t+1 is a real token to predict;
    its true-count is the number of loss terms in the batch.
    """

    source: np.ndarray  # (B, S) int32
    target: np.ndarray  # (B, T) int32
    mask: np.ndarray    # (B, T-1) bool


def pad_batch(sources: list[np.ndarray], targets: list[np.ndarray], reverse_source: bool = False) -> Batch:
    if len(sources) != len(targets) or not sources:
        raise ValueError("need equal, non-zero source/target counts")
    bsz = len(sources)
    s_max = max(len(s) for s in sources)
    t_max = max(len(t) for t in targets)
    if t_max > MAX_TARGET_LEN:
        raise ValueError(f"target length {t_max} exceeds {MAX_TARGET_LEN}")
    src = np.full((bsz, s_max), PAD_ID, dtype=np.int32)
    tgt = np.full((bsz, t_max), PAD_ID, dtype=np.int32)
    for i, (s, t) in enumerate(zip(sources, targets)):
        if reverse_source:
            src[i, : len(s)] = s[::-1]
        else:
            src[i, : len(s)] = s
        tgt[i, : len(t)] = t
    mask = tgt[:, 1:] != PAD_ID
    return Batch(src, tgt, mask)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


@dataclass
class _LSTMStep:
    x_ids: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tc: np.ndarray           # tanh of the new cell state
    m: np.ndarray | None     # (B,1) carry mask, None when every row is live


def _lstm_forward_step(wx, wh, b, x, h_prev, c_prev, h):
    pre = x @ wx + h_prev @ wh + b
    i = _sigmoid(pre[:, :h])
    f = _sigmoid(pre[:, h:2 * h])
    g = np.tanh(pre[:, 2 * h:3 * h])
    o = _sigmoid(pre[:, 3 * h:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return i, f, g, o, c, tc, o * tc


@dataclass
class ForwardCache:
    batch: Batch
    enc_steps: list[_LSTMStep]
    dec_steps: list[_LSTMStep]
    dec_h: np.ndarray        # (T-1, B, h) decoder hidden states
    probs: np.ndarray        # ((T-1)*B, V) softmax rows
    gold: np.ndarray         # ((T-1)*B,) gold ids, time-major
    mask_flat: np.ndarray    # ((T-1)*B,) bool
    n_mask: int
    masked_nll_sum: float    # float64 sum of -ln p over masked positions


def forward_loss(p: Parameters, batch: Batch) -> tuple[float, ForwardCache]:
    """Masked per-token mean cross-entropy plus everything backward needs."""
    dtype = p.dtype
    h = p.enc_wh.shape[0]
    bsz, s_len = batch.source.shape
    t_len = batch.target.shape[1]
    if t_len > MAX_TARGET_LEN:
        raise ValueError(f"target length {t_len} exceeds {MAX_TARGET_LEN}")
    n_mask = int(batch.mask.sum())
    if n_mask == 0:
        raise ValueError("batch has no predictable target positions")

    # Encoder with carry-through on padded steps.
    live = batch.source != PAD_ID
    h_t = np.zeros((bsz, h), dtype=dtype)
    c_t = np.zeros((bsz, h), dtype=dtype)
    enc_steps: list[_LSTMStep] = []
    for t in range(s_len):
        ids = batch.source[:, t]
        x = p.enc_embed[ids]
        i, f, g, o, c_hat, tc, h_hat = _lstm_forward_step(p.enc_wx, p.enc_wh, p.enc_b, x, h_t, c_t, h)
        col = live[:, t]
        if col.all():
            m = None
            h_new, c_new = h_hat, c_hat
        else:
            m = col[:, None].astype(dtype)
            h_new = m * h_hat + (1.0 - m) * h_t
            c_new = m * c_hat + (1.0 - m) * c_t
        enc_steps.append(_LSTMStep(ids, h_t, c_t, i, f, g, o, tc, m))
        h_t, c_t = h_new, c_new

    # Teacher-forced decoder.
    dec_in = batch.target[:, :-1]
    dec_steps: list[_LSTMStep] = []
    dec_h = np.empty((t_len - 1, bsz, h), dtype=dtype)
    for t in range(t_len - 1):
        ids = dec_in[:, t]
        x = p.dec_embed[ids]
        i, f, g, o, c_hat, tc, h_hat = _lstm_forward_step(p.dec_wx, p.dec_wh, p.dec_b, x, h_t, c_t, h)
        dec_steps.append(_LSTMStep(ids, h_t, c_t, i, f, g, o, tc, None))
        h_t, c_t = h_hat, c_hat
        dec_h[t] = h_hat

    flat_h = dec_h.reshape((t_len - 1) * bsz, h)
    logits = flat_h @ p.out_w + p.out_b
    if not np.isfinite(logits).all():
        raise NumericalError("non-finite logits")
    mx = logits.max(axis=1, keepdims=True)
    with np.errstate(over="ignore"):
        ex = np.exp(logits - mx)
    denom = ex.sum(axis=1, keepdims=True)
    probs = ex / denom
    log_z = (mx + np.log(denom))[:, 0]
    gold = np.ascontiguousarray(batch.target[:, 1:].T).reshape(-1)
    mask_flat = np.ascontiguousarray(batch.mask.T).reshape(-1)
    log_p_gold = logits[np.arange(logits.shape[0]), gold] - log_z
    nll = -log_p_gold[mask_flat].astype(np.float64).sum()
    loss = float(nll / n_mask)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    cache = ForwardCache(batch, enc_steps, dec_steps, dec_h, probs, gold, mask_flat, n_mask, float(nll))
    return loss, cache


def backward(p: Parameters, cache: ForwardCache) -> Parameters:
    """Exact gradient of the masked mean loss for every parameter array."""
    dtype = p.dtype
    h = p.enc_wh.shape[0]
    batch = cache.batch
    bsz = batch.source.shape[0]
    t_len = batch.target.shape[1]
    g_out = zeros_like_params(p)

    d_logits = cache.probs.copy()
    rows = np.arange(d_logits.shape[0])
    d_logits[rows, cache.gold] -= 1.0
    d_logits *= (cache.mask_flat.astype(dtype) / dtype.type(cache.n_mask))[:, None]

    flat_h = cache.dec_h.reshape((t_len - 1) * bsz, h)
    g_out.out_w += flat_h.T @ d_logits
    g_out.out_b += d_logits.sum(axis=0)
    d_h_stack = (d_logits @ p.out_w.T).reshape(t_len - 1, bsz, h)

    dh = np.zeros((bsz, h), dtype=dtype)
    dc = np.zeros((bsz, h), dtype=dtype)
    for t in reversed(range(t_len - 1)):
        step = cache.dec_steps[t]
        dh = dh + d_h_stack[t]
        dh, dc = _lstm_backward_step(p, g_out, step, dh, dc, encoder=False)

    for t in reversed(range(len(cache.enc_steps))):
        step = cache.enc_steps[t]
        if step.m is None:
            dh_hat, dc_hat = dh, dc
            dh_carry = dc_carry = None
        else:
            dh_hat = step.m * dh
            dh_carry = (1.0 - step.m) * dh
            dc_hat = step.m * dc
            dc_carry = (1.0 - step.m) * dc
        dh, dc = _lstm_backward_step(p, g_out, step, dh_hat, dc_hat, encoder=True)
        if dh_carry is not None:
            dh = dh + dh_carry
            dc = dc + dc_carry

    for arr in g_out.arrays():
        if not np.isfinite(arr).all():
            raise NumericalError("non-finite gradient")
    return g_out


def _lstm_backward_step(p, g_out, step, dh, dc_in, encoder):
    """One step of BPTT; returns (dh_prev, dc_prev) and accumulates grads."""
    i, f, g, o, tc = step.i, step.f, step.g, step.o, step.tc
    d_o = dh * tc
    dc = dc_in + dh * o * (1.0 - tc * tc)
    d_i = dc * g
    d_f = dc * step.c_prev
    d_g = dc * i
    dc_prev = dc * f
    d_pre = np.concatenate(
        [d_i * i * (1.0 - i), d_f * f * (1.0 - f), d_g * (1.0 - g * g), d_o * o * (1.0 - o)],
        axis=1,
    )
    if encoder:
        wx, wh, embed = p.enc_wx, p.enc_wh, p.enc_embed
        g_wx, g_wh, g_b, g_embed = g_out.enc_wx, g_out.enc_wh, g_out.enc_b, g_out.enc_embed
    else:
        wx, wh, embed = p.dec_wx, p.dec_wh, p.dec_embed
        g_wx, g_wh, g_b, g_embed = g_out.dec_wx, g_out.dec_wh, g_out.dec_b, g_out.dec_embed
    x = embed[step.x_ids]
    g_wx += x.T @ d_pre
    g_wh += step.h_prev.T @ d_pre
    g_b += d_pre.sum(axis=0)
    np.add.at(g_embed, step.x_ids, d_pre @ wx.T)
    dh_prev = d_pre @ wh.T
    return dh_prev, dc_prev


def global_norm(g: Parameters) -> float:
    total = 0.0
    for arr in g.arrays():
        a = arr.astype(np.float64, copy=False)
        total += float((a * a).sum())
    return float(np.sqrt(total))


def clip_global_norm(g: Parameters, max_norm: float = 5.0) -> Parameters:
    """Scale all arrays by max_norm/norm when the global L2 norm exceeds it."""
    norm = global_norm(g)
    if norm <= max_norm or norm == 0.0:
        return g
    factor = g.dtype.type(max_norm / norm)
    return Parameters(*(arr * factor for arr in g.arrays()))


@dataclass
class OptimizerState:
    m: Parameters
    v: Parameters
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initialize(cls, p: Parameters, lr: float = 1e-3) -> "OptimizerState":
        return cls(m=zeros_like_params(p), v=zeros_like_params(p), t=0, lr=lr)


def adam_step(p: Parameters, g: Parameters, state: OptimizerState) -> tuple[Parameters, OptimizerState]:
    """Bias-corrected adaptive-moment update; returns fresh arrays."""
    t = state.t + 1
    dt = p.dtype.type
    b1, b2 = dt(state.beta1), dt(state.beta2)
    corr1 = dt(1.0 - state.beta1 ** t)
    corr2 = dt(1.0 - state.beta2 ** t)
    lr, eps = dt(state.lr), dt(state.eps)
    new_p, new_m, new_v = [], [], []
    for p_a, g_a, m_a, v_a in zip(p.arrays(), g.arrays(), state.m.arrays(), state.v.arrays()):
        m_n = b1 * m_a + (dt(1.0) - b1) * g_a
        v_n = b2 * v_a + (dt(1.0) - b2) * (g_a * g_a)
        update = lr * (m_n / corr1) / (np.sqrt(v_n / corr2) + eps)
        new_p.append(p_a - update)
        new_m.append(m_n)
        new_v.append(v_n)
    return Parameters(*new_p), replace(state, m=Parameters(*new_m), v=Parameters(*new_v), t=t)


def greedy_decode(p: Parameters, source_ids, max_len: int = MAX_TARGET_LEN,
                  reverse_source: bool = False) -> list[int]:
    """Feed SOS, emit argmax tokens (ties to the lowest id) until EOS or max_len.

    Returns the emitted ids without the leading SOS; a terminating EOS is
    included when it is produced within the budget.
    """
    dtype = p.dtype
    h = p.enc_wh.shape[0]
    ids = np.asarray(source_ids, dtype=np.int32).reshape(1, -1)
    if reverse_source:
        ids = ids[:, ::-1]
    h_t = np.zeros((1, h), dtype=dtype)
    c_t = np.zeros((1, h), dtype=dtype)
    for t in range(ids.shape[1]):
        x = p.enc_embed[ids[:, t]]
        step = _lstm_forward_step(p.enc_wx, p.enc_wh, p.enc_b, x, h_t, c_t, h)
        c_t, h_t = step[4], step[6]
    out: list[int] = []
    token = SOS_ID
    for _ in range(max_len):
        x = p.dec_embed[np.asarray([token], dtype=np.int32)]
        step = _lstm_forward_step(p.dec_wx, p.dec_wh, p.dec_b, x, h_t, c_t, h)
        c_t, h_t = step[4], step[6]
        logits = h_t @ p.out_w + p.out_b
        token = int(np.argmax(logits[0]))
        out.append(token)
        if token == EOS_ID:
            break
    return out


def finite_difference_gradients(p: Parameters, batch: Batch, step: float = 1e-4,
                                progress=None) -> Parameters:
    """Central finite differences of forward_loss over every coordinate.

    Intended for float64 Parameters on tiny models; this is the slow
    reference route that the analytic backward pass is checked against.
    """
    grads = zeros_like_params(p)
    work = p.copy()
    for name, arr in work.named():
        flat = arr.reshape(-1)
        out = getattr(grads, name).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up, _ = forward_loss(work, batch)
            flat[idx] = orig - step
            down, _ = forward_loss(work, batch)
            flat[idx] = orig
            out[idx] = (up - down) / (2.0 * step)
        if progress is not None:
            progress(name)
    return grads


def max_relative_error(analytic: Parameters, numeric: Parameters, floor: float = 1e-6) -> tuple[float, str]:
    """Worst |a-n| / max(|a|, |n|, floor) over all coordinates, with its location.

    The floor sits above the central-difference roundoff scale
    (machine eps * loss / step ~ 1e-11), so near-zero coordinates are
    compared absolutely at the floor scale instead of amplifying noise.
    """
    worst = 0.0
    where = ""
    for (name, a), (_, n) in zip(analytic.named(), numeric.named()):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = np.abs(a - n) / denom
        idx = int(np.argmax(rel))
        if rel.reshape(-1)[idx] >= worst:
            worst = float(rel.reshape(-1)[idx])
            where = f"{name}[{np.unravel_index(idx, a.shape)}]"
    return worst, where
