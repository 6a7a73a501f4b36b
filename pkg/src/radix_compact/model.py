"""Toy causal transformer (Qwen3-style) with forward and backward passes.

The model runs in two modes over the same packed batch: the plain full-space
pass, and the compact pass where every position-wise stage (embedding,
norms, projections, rotary embedding, MLP, residuals, LM head) operates on
the deduplicated rows while attention always sees the original layout.
Q/K/V are scattered out to full layout right before attention and the
attention output is gathered back immediately after.

All position-wise stages are strict row-wise computations, so the two modes
produce bit-identical logits; gradients differ only by scatter-add
accumulation order. Attention is exact dense causal softmax per sequence
(no Flash-style tiling), keeping a single attention backend so compaction
is the only variable under test.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FixtureError, OddHeadDim, PlanBatchMismatch, ShapeMismatch
from .ops import gather_rows, gather_rows_backward, scatter_rows, scatter_rows_backward
from .ragged import RaggedBatch
from .trie import CompactionPlan


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_size: int = 256
    intermediate_size: int = 512
    num_heads: int = 4
    num_kv_heads: int = 2
    head_dim: int = 64
    vocab_size: int = 128
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.hidden_size != self.num_heads * self.head_dim:
            raise ShapeMismatch("hidden_size must equal num_heads * head_dim")
        if self.num_kv_heads < 1 or self.num_heads % self.num_kv_heads:
            raise ShapeMismatch("num_heads must be divisible by num_kv_heads")
        for name in ("num_layers", "hidden_size", "intermediate_size", "vocab_size"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be >= 1")

    def to_json(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "intermediate_size": self.intermediate_size,
            "num_heads": self.num_heads,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "vocab_size": self.vocab_size,
            "rope_theta": self.rope_theta,
            "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


class FlopLedger:
    """Row-operation counters split by position-wise vs attention work.

    ``phases`` records (name, rows) per position-wise stage so tests can
    assert every stage processed exactly the compact row count.
    """

    def __init__(self):
        self.positionwise_row_ops = 0
        self.attention_row_ops = 0
        self.gather_scatter_rows = 0
        self.phases: list[tuple[str, int]] = []

    def positionwise(self, name: str, rows: int) -> None:
        self.positionwise_row_ops += rows
        self.phases.append((name, rows))

    def attention(self, rows: int) -> None:
        self.attention_row_ops += rows

    def index_copy(self, rows: int) -> None:
        self.gather_scatter_rows += rows


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Deterministic seeded init: uniform [-0.05, 0.05], norm weights 1."""
    rng = np.random.default_rng(seed)
    d, di = config.hidden_size, config.intermediate_size
    hd, h, kv = config.head_dim, config.num_heads, config.num_kv_heads

    def w(*shape):
        return rng.uniform(-0.05, 0.05, size=shape).astype(dtype)

    params = {"embed": w(config.vocab_size, d)}
    for i in range(config.num_layers):
        p = f"layers.{i}."
        params[p + "ln1"] = np.ones(d, dtype=dtype)
        params[p + "wq"] = w(h * hd, d)
        params[p + "wk"] = w(kv * hd, d)
        params[p + "wv"] = w(kv * hd, d)
        params[p + "wo"] = w(d, h * hd)
        params[p + "q_norm"] = np.ones(hd, dtype=dtype)
        params[p + "k_norm"] = np.ones(hd, dtype=dtype)
        params[p + "ln2"] = np.ones(d, dtype=dtype)
        params[p + "w_gate"] = w(di, d)
        params[p + "w_up"] = w(di, d)
        params[p + "w_down"] = w(d, di)
    params["final_norm"] = np.ones(d, dtype=dtype)
    params["lm_head"] = w(config.vocab_size, d)  # untied from the embedding
    return params


# --- position-wise primitives ---

# BLAS picks different kernels by matrix shape, which breaks bit-identity
# between the N-row and N'-row passes. Issuing every position-wise matmul
# as fixed-shape (block x K) GEMMs makes each output row depend only on its
# input row, never on the batch around it.
_MM_BLOCK = 128


def _mm(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    m = x.shape[0]
    if m == _MM_BLOCK:
        return x @ w_t
    out = np.empty((m, w_t.shape[1]), dtype=x.dtype)
    for lo in range(0, m, _MM_BLOCK):
        hi = min(lo + _MM_BLOCK, m)
        if hi - lo == _MM_BLOCK:
            np.matmul(x[lo:hi], w_t, out=out[lo:hi])
        else:
            pad = np.zeros((_MM_BLOCK, x.shape[1]), dtype=x.dtype)
            pad[: hi - lo] = x[lo:hi]
            out[lo:hi] = np.matmul(pad, w_t)[: hi - lo]
    return out


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"rmsnorm: x {x.shape} vs weight {weight.shape}")
    rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)
    return x / rms * weight


def _rmsnorm_backward(dy, x, weight, eps):
    d = x.shape[1]
    rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)
    dw = np.sum(dy * x / rms, axis=0)
    dyw = dy * weight
    dot = np.sum(dyw * x, axis=1, keepdims=True)
    dx = dyw / rms - x * (dot / d) / (rms**3)
    return dx, dw


def _rope_tables(positions: np.ndarray, head_dim: int, theta: float, dtype):
    if head_dim % 2:
        raise OddHeadDim(f"head_dim {head_dim} is odd")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=1).astype(dtype)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=1).astype(dtype)
    return cos, sin


def _rotate_half(x):
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def apply_rope(q: np.ndarray, k: np.ndarray, positions, theta: float = 10000.0):
    """Rotary embedding on (rows, heads, head_dim) tensors, rotate-half form.

    Positions are the per-row ids; in compact mode these are the gathered
    originals so every compact token keeps its true sequence position.
    """
    positions = np.asarray(positions)
    if positions.shape[0] != q.shape[0]:
        raise ShapeMismatch("positions length must match q rows")
    cos, sin = _rope_tables(positions, q.shape[-1], theta, q.dtype)
    c, s = cos[:, None, :], sin[:, None, :]
    return q * c + _rotate_half(q) * s, k * c + _rotate_half(k) * s


def _rope_backward(dq, dk, cos, sin):
    c, s = cos[:, None, :], sin[:, None, :]
    # adjoint of x -> x*c + rotate_half(x)*s
    return dq * c - _rotate_half(dq * s), dk * c - _rotate_half(dk * s)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def swiglu_mlp(h: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, w_down: np.ndarray):
    if h.ndim != 2 or h.shape[1] != w_gate.shape[1]:
        raise ShapeMismatch(f"swiglu: h {h.shape} vs w_gate {w_gate.shape}")
    return _mm(_silu(_mm(h, w_gate.T)) * _mm(h, w_up.T), w_down.T)


def attention_ragged(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    cu_seqlens,
    num_heads: int,
    num_kv_heads: int,
    head_dim: int,
) -> np.ndarray:
    """Exact causal softmax attention over a packed batch, full layout.

    Positions never attend across sequence boundaries; query heads map to
    kv heads by contiguous grouping.
    """
    out, _ = _attention_forward(q, k, v, cu_seqlens, num_heads, num_kv_heads, head_dim)
    return out


def _attention_forward(q, k, v, cu_seqlens, num_heads, num_kv_heads, head_dim, want_probs=False):
    # Scores are computed one query row at a time over exactly its causal
    # window. Two tokens with identical causal history then run through
    # identical-shape kernels, so their outputs are bit-identical even when
    # their sequences have different lengths.
    n = q.shape[0]
    if q.shape != (n, num_heads * head_dim):
        raise ShapeMismatch(f"q shape {q.shape}")
    if k.shape != (n, num_kv_heads * head_dim) or v.shape != k.shape:
        raise ShapeMismatch(f"k/v shape {k.shape}/{v.shape}")
    cu = np.asarray(cu_seqlens, dtype=np.int64)
    group = num_heads // num_kv_heads
    scale = 1.0 / np.sqrt(head_dim)
    qh = q.reshape(n, num_heads, head_dim)
    kh = k.reshape(n, num_kv_heads, head_dim)
    vh = v.reshape(n, num_kv_heads, head_dim)
    out = np.empty_like(qh)
    probs = []  # (seq, head) -> lower-triangular softmax matrix for backward
    for s in range(cu.shape[0] - 1):
        lo, hi = int(cu[s]), int(cu[s + 1])
        length = hi - lo
        seq_probs = []
        for h in range(num_heads):
            g = h // group
            p_full = np.zeros((length, length), dtype=q.dtype) if want_probs else None
            keys = kh[lo:hi, g]
            values = vh[lo:hi, g]
            for i in range(length):
                w = (keys[: i + 1] @ qh[lo + i, h]) * scale
                w -= w.max()
                e = np.exp(w)
                p = e / e.sum()
                out[lo + i, h] = p @ values[: i + 1]
                if want_probs:
                    p_full[i, : i + 1] = p
            seq_probs.append(p_full)
        probs.append(seq_probs)
    return out.reshape(n, num_heads * head_dim), probs


def _attention_backward(dout, q, k, v, probs, cu_seqlens, num_heads, num_kv_heads, head_dim):
    n = q.shape[0]
    cu = np.asarray(cu_seqlens, dtype=np.int64)
    group = num_heads // num_kv_heads
    scale = 1.0 / np.sqrt(head_dim)
    qh = q.reshape(n, num_heads, head_dim)
    kh = k.reshape(n, num_kv_heads, head_dim)
    vh = v.reshape(n, num_kv_heads, head_dim)
    doh = dout.reshape(n, num_heads, head_dim)
    dq = np.zeros_like(qh)
    dk = np.zeros_like(kh)
    dv = np.zeros_like(vh)
    for s in range(cu.shape[0] - 1):
        lo, hi = int(cu[s]), int(cu[s + 1])
        for h in range(num_heads):
            g = h // group
            p = probs[s][h]
            do = doh[lo:hi, h]
            dv[lo:hi, g] += p.T @ do
            dp = do @ vh[lo:hi, g].T
            ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
            dq[lo:hi, h] = (ds @ kh[lo:hi, g]) * scale
            dk[lo:hi, g] += (ds.T @ qh[lo:hi, h]) * scale
    return (
        dq.reshape(n, num_heads * head_dim),
        dk.reshape(n, num_kv_heads * head_dim),
        dv.reshape(n, num_kv_heads * head_dim),
    )


# --- full model ---


def _check_plan(plan: CompactionPlan, batch: RaggedBatch) -> None:
    if plan.n_original != batch.num_tokens:
        raise PlanBatchMismatch(
            f"plan built for {plan.n_original} tokens, batch has {batch.num_tokens}"
        )
    if plan.scatter_indices.shape[0] != batch.num_tokens:
        raise PlanBatchMismatch("scatter index length disagrees with batch")


def forward(
    config: ModelConfig,
    params: dict,
    batch: RaggedBatch,
    plan: CompactionPlan | None = None,
    ledger: FlopLedger | None = None,
) -> np.ndarray:
    """Run the forward pass; logits come back in full N-row layout."""
    logits, _ = _forward_cached(config, params, batch, plan, ledger, want_cache=False)
    return logits


def _forward_cached(config, params, batch, plan, ledger, want_cache):
    if ledger is None:
        ledger = FlopLedger()
    if plan is not None:
        _check_plan(plan, batch)
        gather = plan.gather_indices.astype(np.int64)
        scatter = plan.scatter_indices.astype(np.int64)
        token_rows = np.asarray(batch.token_ids, dtype=np.int64)[gather]
        positions = plan.compact_positions.astype(np.int64)
        ledger.index_copy(gather.shape[0])
    else:
        gather = scatter = None
        token_rows = np.asarray(batch.token_ids, dtype=np.int64)
        positions = np.asarray(batch.position_ids, dtype=np.int64)
    m = token_rows.shape[0]
    n = batch.num_tokens
    hd, heads, kv = config.head_dim, config.num_heads, config.num_kv_heads
    eps = config.norm_eps

    h = params["embed"][token_rows]
    ledger.positionwise("embed", m)
    cos, sin = _rope_tables(positions, hd, config.rope_theta, h.dtype)
    cache = {"token_rows": token_rows, "cos": cos, "sin": sin, "layers": []}

    for i in range(config.num_layers):
        p = f"layers.{i}."
        lc: dict = {"h_in": h}
        hn = rmsnorm(h, params[p + "ln1"], eps)
        ledger.positionwise(f"l{i}.ln1", m)
        lc["hn"] = hn
        q = _mm(hn, params[p + "wq"].T)
        k = _mm(hn, params[p + "wk"].T)
        v = _mm(hn, params[p + "wv"].T)
        ledger.positionwise(f"l{i}.qkv_proj", m)
        q = q.reshape(m, heads, hd)
        k = k.reshape(m, kv, hd)
        lc["q_pre"], lc["k_pre"] = q, k
        # per-head RMS norms (weights shared across heads), then rotary
        qn = rmsnorm(q.reshape(-1, hd), params[p + "q_norm"], eps).reshape(m, heads, hd)
        kn = rmsnorm(k.reshape(-1, hd), params[p + "k_norm"], eps).reshape(m, kv, hd)
        ledger.positionwise(f"l{i}.qk_norm_rope", m)
        c, s = cos[:, None, :], sin[:, None, :]
        qr = qn * c + _rotate_half(qn) * s
        kr = kn * c + _rotate_half(kn) * s
        qf = qr.reshape(m, heads * hd)
        kf = kr.reshape(m, kv * hd)
        if plan is not None:
            qf = scatter_rows(qf, scatter)
            kf = scatter_rows(kf, scatter)
            vf = scatter_rows(v, scatter)
            ledger.index_copy(3 * n)
        else:
            vf = v
        lc["qf"], lc["kf"], lc["vf"] = qf, kf, vf
        ledger.attention(n)
        attn_full, probs = _attention_forward(
            qf, kf, vf, batch.cu_seqlens, heads, kv, hd, want_probs=want_cache
        )
        lc["probs"] = probs if want_cache else None
        if plan is not None:
            a = gather_rows(attn_full, gather)
            ledger.index_copy(m)
        else:
            a = attn_full
        lc["a_comp"] = a
        o = _mm(a, params[p + "wo"].T)
        ledger.positionwise(f"l{i}.o_proj", m)
        h = h + o
        ledger.positionwise(f"l{i}.attn_residual", m)
        lc["h_mid"] = h
        hn2 = rmsnorm(h, params[p + "ln2"], eps)
        lc["hn2"] = hn2
        g = _mm(hn2, params[p + "w_gate"].T)
        u = _mm(hn2, params[p + "w_up"].T)
        lc["g"], lc["u"] = g, u
        mlp_out = _mm(_silu(g) * u, params[p + "w_down"].T)
        ledger.positionwise(f"l{i}.mlp", m)
        h = h + mlp_out
        ledger.positionwise(f"l{i}.mlp_residual", m)
        cache["layers"].append(lc if want_cache else None)

    cache["h_final_in"] = h
    hf = rmsnorm(h, params["final_norm"], eps)
    ledger.positionwise("final_norm", m)
    cache["hf"] = hf
    logits_c = _mm(hf, params["lm_head"].T)
    ledger.positionwise("lm_head", m)
    if plan is not None:
        logits = scatter_rows(logits_c, scatter)
        ledger.index_copy(n)
    else:
        logits = logits_c
    cache["logits_c"] = logits_c
    cache["m"] = m
    return logits, cache


def loss_and_grads(
    config: ModelConfig,
    params: dict,
    batch: RaggedBatch,
    plan: CompactionPlan | None,
    targets,
    ledger: FlopLedger | None = None,
):
    """Mean cross-entropy over all N positions, with full backward.

    Returns (loss, grads) where grads has one entry per parameter tensor,
    keyed like ``params``. The compact path backpropagates through the
    gather/scatter adjoints (scatter-add).
    """
    targets = np.asarray(targets, dtype=np.int64)
    n = batch.num_tokens
    if targets.shape[0] != n:
        raise ShapeMismatch(f"{targets.shape[0]} targets for {n} tokens")
    logits, cache = _forward_cached(config, params, batch, plan, ledger, want_cache=True)

    # cross-entropy on the full layout
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    denom = exps.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = -float(np.mean(log_probs[np.arange(n), targets]))
    dlogits = exps / denom
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n

    grads = {name: np.zeros_like(value) for name, value in params.items()}
    hd, heads, kv = config.head_dim, config.num_heads, config.num_kv_heads
    eps = config.norm_eps
    m = cache["m"]
    if plan is not None:
        gather = plan.gather_indices.astype(np.int64)
        scatter = plan.scatter_indices.astype(np.int64)
        dlogits_c = scatter_rows_backward(dlogits, scatter, m)
    else:
        gather = scatter = None
        dlogits_c = dlogits

    grads["lm_head"] += dlogits_c.T @ cache["hf"]
    dhf = dlogits_c @ params["lm_head"]
    dh, dw = _rmsnorm_backward(dhf, cache["h_final_in"], params["final_norm"], eps)
    grads["final_norm"] += dw

    cos, sin = cache["cos"], cache["sin"]
    for i in reversed(range(config.num_layers)):
        p = f"layers.{i}."
        lc = cache["layers"][i]
        # MLP branch
        silu_g = _silu(lc["g"])
        act = silu_g * lc["u"]
        grads[p + "w_down"] += dh.T @ act
        dact = dh @ params[p + "w_down"]
        du = dact * silu_g
        sig = 1.0 / (1.0 + np.exp(-lc["g"]))
        dg = dact * lc["u"] * sig * (1.0 + lc["g"] * (1.0 - sig))
        grads[p + "w_gate"] += dg.T @ lc["hn2"]
        grads[p + "w_up"] += du.T @ lc["hn2"]
        dhn2 = dg @ params[p + "w_gate"] + du @ params[p + "w_up"]
        dx, dw = _rmsnorm_backward(dhn2, lc["h_mid"], params[p + "ln2"], eps)
        grads[p + "ln2"] += dw
        dh = dh + dx  # residual joins the MLP-branch gradient

        # attention branch
        do = dh
        grads[p + "wo"] += do.T @ lc["a_comp"]
        da = do @ params[p + "wo"]
        if plan is not None:
            da_full = gather_rows_backward(da, gather, n)
        else:
            da_full = da
        dqf, dkf, dvf = _attention_backward(
            da_full, lc["qf"], lc["kf"], lc["vf"], lc["probs"],
            batch.cu_seqlens, heads, kv, hd,
        )
        if plan is not None:
            dqr = scatter_rows_backward(dqf, scatter, m)
            dkr = scatter_rows_backward(dkf, scatter, m)
            dv = scatter_rows_backward(dvf, scatter, m)
        else:
            dqr, dkr, dv = dqf, dkf, dvf
        dqr = dqr.reshape(m, heads, hd)
        dkr = dkr.reshape(m, kv, hd)
        c, s = cos[:, None, :], sin[:, None, :]
        dqn = dqr * c - _rotate_half(dqr * s)
        dkn = dkr * c - _rotate_half(dkr * s)
        dq_pre, dw = _rmsnorm_backward(
            dqn.reshape(-1, hd), lc["q_pre"].reshape(-1, hd), params[p + "q_norm"], eps
        )
        grads[p + "q_norm"] += dw
        dk_pre, dw = _rmsnorm_backward(
            dkn.reshape(-1, hd), lc["k_pre"].reshape(-1, hd), params[p + "k_norm"], eps
        )
        grads[p + "k_norm"] += dw
        dq_pre = dq_pre.reshape(m, heads * hd)
        dk_pre = dk_pre.reshape(m, kv * hd)
        grads[p + "wq"] += dq_pre.T @ lc["hn"]
        grads[p + "wk"] += dk_pre.T @ lc["hn"]
        grads[p + "wv"] += dv.T @ lc["hn"]
        dhn = (
            dq_pre @ params[p + "wq"]
            + dk_pre @ params[p + "wk"]
            + dv @ params[p + "wv"]
        )
        dx, dw = _rmsnorm_backward(dhn, lc["h_in"], params[p + "ln1"], eps)
        grads[p + "ln1"] += dw
        dh = dh + dx

    np.add.at(grads["embed"], cache["token_rows"], dh)
    return loss, grads


# --- checkpoint fixtures (JSON config + manifest + raw little-endian blobs) ---


def save_checkpoint(config: ModelConfig, params: dict, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.json"), "w") as f:
        json.dump(config.to_json(), f, indent=1)
    manifest = []
    for name, tensor in params.items():
        fname = name.replace(".", "_") + ".bin"
        arr = np.ascontiguousarray(tensor, dtype="<f8")
        with open(os.path.join(directory, fname), "wb") as f:
            f.write(arr.tobytes())
        manifest.append({"name": name, "shape": list(tensor.shape), "dtype": "f8", "file": fname})
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_checkpoint(directory):
    try:
        with open(os.path.join(directory, "config.json")) as f:
            config = ModelConfig.from_json(json.load(f))
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
        params = {}
        for entry in manifest:
            with open(os.path.join(directory, entry["file"]), "rb") as f:
                arr = np.frombuffer(f.read(), dtype="<" + entry["dtype"])
            params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FixtureError(f"cannot load checkpoint from {directory}: {exc}") from exc
    return config, params
