"""Self-attention and co-attention kernels over token bags.

Both kernels share one fused scaled-dot-product op whose forward streams
over key blocks with an online log-sum-exp accumulator, so the full
score matrix never has to be materialized. The streamed result is exact
(not an approximation): for any block size it matches the dense
computation to accumulation roundoff.

The cross-modal embedding identity is shipped as an executable check:
concatenated self-attention contains co-attention as the cross block of
its score matrix, and masking the query modality's self block recovers
co-attention exactly. See :func:`verify_ca_embedding`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DataError, DegenerateAttentionError, ShapeError
from .numcore import Tensor


@dataclass
class AttentionParams:
    """Square query/key/value projections, optionally split into heads."""

    query: Tensor
    key: Tensor
    value: Tensor
    head_count: int = 1
    out_proj: Tensor | None = None

    def __post_init__(self):
        d = self.query.shape[0]
        for name, t in (("query", self.query), ("key", self.key), ("value", self.value)):
            if t.shape != (d, d):
                raise ShapeError(f"{name} projection must be {d}x{d}, got {t.shape}")
        if self.head_count < 1 or d % self.head_count:
            raise ConfigError(f"width {d} is not divisible into {self.head_count} heads")
        if self.head_count > 1 and self.out_proj is None:
            raise ConfigError("multi-head attention requires an output projection")

    @property
    def width(self) -> int:
        return self.query.shape[0]

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, head_count: int = 1) -> "AttentionParams":
        bound = 1.0 / np.sqrt(d)
        mats = [
            Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True) for _ in range(3)
        ]
        out_proj = None
        if head_count > 1:
            # Near-identity so the multi-head stack starts close to the
            # single-head behaviour.
            out_proj = Tensor(
                np.eye(d) + 0.01 * rng.standard_normal((d, d)), requires_grad=True
            )
        return cls(*mats, head_count=head_count, out_proj=out_proj)

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        named = [
            (f"{prefix}.query", self.query),
            (f"{prefix}.key", self.key),
            (f"{prefix}.value", self.value),
        ]
        if self.out_proj is not None:
            named.append((f"{prefix}.out_proj", self.out_proj))
        return named


def _validate_mask(mask: np.ndarray, n_queries: int, n_keys: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n_queries, n_keys):
        raise ShapeError(f"mask shape {mask.shape} does not match scores ({n_queries}, {n_keys})")
    ok = (mask == 0.0) | np.isneginf(mask)
    if not np.all(ok):
        raise ConfigError("attention mask entries must be 0 or -inf")
    if np.any(np.all(np.isneginf(mask), axis=1)):
        raise DegenerateAttentionError("a query row is fully masked")
    return mask


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scale: float,
    mask: np.ndarray | None = None,
    key_chunk: int | None = None,
) -> Tensor:
    """softmax(q kᵀ · scale + mask) v as one fused, differentiable op.

    With ``key_chunk`` set the forward pass streams over key blocks of
    that size using a running row maximum and running normalizer; the
    backward pass re-walks the same blocks, so peak memory stays at
    n_queries x key_chunk scores.
    """
    n, dh = q.shape
    m = k.shape[0]
    if k.shape != (m, dh) or v.shape[0] != m:
        raise ShapeError(f"attention operand shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if key_chunk is not None and key_chunk < 1:
        raise ConfigError(f"key_chunk must be >= 1, got {key_chunk}")
    block = m if key_chunk is None else min(key_chunk, m)
    bounds = [(s, min(s + block, m)) for s in range(0, m, block)]

    qd, kd, vd = q.data, k.data, v.data
    row_max = np.full(n, -np.inf)
    normalizer = np.zeros(n)
    acc = np.zeros((n, vd.shape[1]))
    for start, stop in bounds:
        scores = qd @ kd[start:stop].T * scale
        if mask is not None:
            scores = scores + mask[:, start:stop]
        with np.errstate(invalid="ignore"):
            new_max = np.maximum(row_max, scores.max(axis=1))
            carried = np.where(np.isneginf(new_max), 1.0, np.exp(row_max - new_max))
            probs = np.where(np.isneginf(new_max)[:, None], 0.0, np.exp(scores - new_max[:, None]))
        normalizer = normalizer * carried + probs.sum(axis=1)
        acc = acc * carried[:, None] + probs @ vd[start:stop]
        row_max = new_max
    if np.any(normalizer == 0.0):
        raise DegenerateAttentionError("attention normalizer vanished for a fully masked row")
    out = acc / normalizer[:, None]

    def backward(g):
        delta = np.sum(g * out, axis=1)
        dq = np.zeros_like(qd) if q.requires_grad else None
        dk = np.zeros_like(kd) if k.requires_grad else None
        dv = np.zeros_like(vd) if v.requires_grad else None
        for start, stop in bounds:
            scores = qd @ kd[start:stop].T * scale
            if mask is not None:
                scores = scores + mask[:, start:stop]
            probs = np.exp(scores - row_max[:, None]) / normalizer[:, None]
            if dv is not None:
                dv[start:stop] += probs.T @ g
            if dq is not None or dk is not None:
                dscores = probs * (g @ vd[start:stop].T - delta[:, None])
                if dq is not None:
                    dq += dscores @ kd[start:stop] * scale
                if dk is not None:
                    dk[start:stop] += dscores.T @ qd * scale
        if dq is not None:
            nc.accumulate_grad(q, dq)
        if dk is not None:
            nc.accumulate_grad(k, dk)
        if dv is not None:
            nc.accumulate_grad(v, dv)

    return nc.graph_op(out, (q, k, v), backward, "scaled_dot_attention")


def _per_head(params: AttentionParams, projected: Tensor, head: int) -> Tensor:
    dh = params.width // params.head_count
    return nc.slice_columns(projected, head * dh, (head + 1) * dh)


def _attend(
    queries_from: Tensor,
    keys_from: Tensor,
    params: AttentionParams,
    mask: np.ndarray | None,
    key_chunk: int | None,
) -> Tensor:
    xq = nc.matmul(queries_from, params.query)
    xk = nc.matmul(keys_from, params.key)
    xv = nc.matmul(keys_from, params.value)
    dh = params.width // params.head_count
    scale = 1.0 / np.sqrt(dh)
    if params.head_count == 1:
        return scaled_dot_attention(xq, xk, xv, scale, mask, key_chunk)
    heads = [
        scaled_dot_attention(
            _per_head(params, xq, h), _per_head(params, xk, h), _per_head(params, xv, h),
            scale, mask, key_chunk,
        )
        for h in range(params.head_count)
    ]
    return nc.matmul(nc.concat_columns(heads), params.out_proj)


def self_attention(
    tokens: Tensor,
    params: AttentionParams,
    mask: np.ndarray | None = None,
    key_chunk: int | None = None,
) -> Tensor:
    """Attend a token bag to itself: softmax((XQ)(XK)ᵀ/√d_head + mask)(XV)."""
    if tokens.ndim != 2 or tokens.shape[1] != params.width:
        raise ShapeError(f"token bag shape {tokens.shape} does not match width {params.width}")
    n = tokens.shape[0]
    if n < 1:
        raise DataError("self_attention needs at least one token")
    if mask is not None:
        mask = _validate_mask(mask, n, n)
    return _attend(tokens, tokens, params, mask, key_chunk)


def co_attention(
    f1: Tensor,
    f2: Tensor,
    params: AttentionParams,
    key_chunk: int | None = None,
) -> Tensor:
    """Attend f1 queries over f2 keys/values: softmax((F1Q)(F2K)ᵀ/√d_head)(F2V)."""
    for name, bag in (("f1", f1), ("f2", f2)):
        if bag.ndim != 2 or bag.shape[0] < 1:
            raise DataError(f"co_attention needs a nonempty rank-2 {name} bag")
        if bag.shape[1] != params.width:
            raise ShapeError(f"{name} width {bag.shape[1]} does not match {params.width}")
    return _attend(f1, f2, params, None, key_chunk)


def attention_weights(
    tokens_q: Tensor, tokens_kv: Tensor, params: AttentionParams, mask: np.ndarray | None = None
) -> np.ndarray:
    """Post-softmax attention weights per head (inspection only, no graph)."""
    with nc.no_grad():
        xq = tokens_q.data @ params.query.data
        xk = tokens_kv.data @ params.key.data
    dh = params.width // params.head_count
    scale = 1.0 / np.sqrt(dh)
    rows = []
    for h in range(params.head_count):
        sl = slice(h * dh, (h + 1) * dh)
        scores = xq[:, sl] @ xk[:, sl].T * scale
        if mask is not None:
            scores = scores + mask
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        rows.append(e / e.sum(axis=1, keepdims=True))
    return np.stack(rows)


def cross_block_mask(n1: int, n2: int) -> np.ndarray:
    """Additive mask over [F1; F2] tokens that hides the F1->F1 block."""
    mask = np.zeros((n1 + n2, n1 + n2))
    mask[:n1, :n1] = -np.inf
    return mask


@dataclass
class CaEquivalenceReport:
    """Outcome of the co-attention-inside-self-attention check."""

    ok: bool
    score_block_dev: float
    output_dev: float

    @property
    def max_deviation(self) -> float:
        return max(self.score_block_dev, self.output_dev)


def verify_ca_embedding(
    f1: Tensor,
    f2: Tensor,
    params: AttentionParams,
    ca_params: AttentionParams | None = None,
    score_tol: float = 1e-12,
    output_tol: float = 1e-10,
) -> CaEquivalenceReport:
    """Check that co-attention is embedded in concatenated self-attention.

    Two facts are verified with shared single-head weights: (a) the
    pre-softmax cross block of the concatenated score matrix equals the
    co-attention scores, and (b) self-attention with the query modality's
    own block masked out, restricted to the first n1 rows, equals
    co-attention. ``ca_params`` substitutes different weights on the
    co-attention side (useful as a negative control) and defaults to the
    shared ones.
    """
    if params.head_count != 1:
        raise ConfigError("the embedding identity is checked for a single head")
    ca = ca_params if ca_params is not None else params
    n1, n2 = f1.shape[0], f2.shape[0]
    scale = 1.0 / np.sqrt(params.width)
    with nc.no_grad():
        stacked = np.concatenate([f1.data, f2.data], axis=0)
        full_scores = (stacked @ params.query.data) @ (stacked @ params.key.data).T * scale
        ca_scores = (f1.data @ ca.query.data) @ (f2.data @ ca.key.data).T * scale
        score_dev = float(np.max(np.abs(full_scores[:n1, n1:] - ca_scores)))

        masked = self_attention(
            nc.concat_rows([f1, f2]), params, mask=cross_block_mask(n1, n2)
        )
        co = co_attention(f1, f2, ca)
        output_dev = float(np.max(np.abs(masked.data[:n1] - co.data)))
    return CaEquivalenceReport(
        ok=score_dev <= score_tol and output_dev <= output_tol,
        score_block_dev=score_dev,
        output_dev=output_dev,
    )
