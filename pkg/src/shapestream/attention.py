"""Kernelized causal attention with a constant-size associative memory.

The memory summarizing a key/value stream is the prefix-sum pair

    M = sum_j phi(k_j)^T v_j        (m x d)
    m_vec = sum_j phi(k_j)^T        (m,)

and a query retrieves  phi(q) M / (phi(q) . m_vec),  a convex combination of
the stored value vectors when phi is nonnegative. Storage is a function of
(m, d) only, independent of how many frames were absorbed.

Two feature maps are supported:
  * "relu":     phi(x) = max(0, x), deterministic, m == d_qk. The induced
                kernel ReLU(q).ReLU(k)^T is computed exactly, so linear and
                quadratic attention agree to round-off.
  * "softmax":  positive random features phi(x) = exp(x W^T - |x|^2/2)/sqrt(m)
                with unit-Gaussian rows W, an unbiased estimator of
                exp(q k^T).

Degenerate rows: with the relu map all attention weights for a row can be
exactly zero. Both attention routines then fall back to the row's own value
vector, keeping outputs finite and causal. ``memory_query`` applies the
documented division guard EPS_DENOM unless an explicit ``fallback`` value is
supplied, in which case it follows the same rule as the attention routines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor

# division guard for near-empty attention rows
EPS_DENOM = 1e-9

KERNEL_KINDS = ("softmax", "relu")


# ---------------------------------------------------------------------------
# feature maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelFeatureMap:
    """Mapping phi: R^{d_qk} -> R^m with K(q, k) = E[phi(q).phi(k)]."""

    kind: str
    d_qk: int
    m: int
    seed: int = 0
    orthogonal: bool = False
    projection: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.kind == "relu":
            if self.m != self.d_qk:
                raise ValueError(f"relu feature map requires m == d_qk, got m={self.m}, d_qk={self.d_qk}")
            if self.projection is not None:
                raise ValueError("relu feature map carries no projection")
        else:
            if self.projection is None:
                object.__setattr__(self, "projection", _draw_projection(
                    self.m, self.d_qk, self.seed, self.orthogonal))
            elif self.projection.shape != (self.m, self.d_qk):
                raise ValueError(
                    f"projection shape {self.projection.shape} != (m, d_qk) = ({self.m}, {self.d_qk})")


def _draw_projection(m: int, d_qk: int, seed: int, orthogonal: bool) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((m, d_qk))
    if orthogonal:
        # per-block QR orthogonalization, preserving each row's norm
        for start in range(0, m, d_qk):
            block = w[start : start + d_qk]
            norms = np.linalg.norm(block, axis=1, keepdims=True)
            q, _ = np.linalg.qr(block.T)
            w[start : start + d_qk] = q.T[: block.shape[0]] * norms
    return w


def feature_map(kind: str, d_qk: int, m: int | None = None, seed: int = 0,
                orthogonal: bool = False) -> KernelFeatureMap:
    """Build a feature map; regenerating with the same seed is exact."""
    if kind == "relu":
        return KernelFeatureMap(kind="relu", d_qk=d_qk, m=d_qk)
    if m is None:
        raise ValueError("softmax feature map requires a feature count m")
    return KernelFeatureMap(kind="softmax", d_qk=d_qk, m=m, seed=seed, orthogonal=orthogonal)


def feature_map_apply(fmap: KernelFeatureMap, x: np.ndarray) -> np.ndarray:
    """phi(x) for x of shape (d_qk,) or (L, d_qk); output (m,) or (L, m)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != fmap.d_qk:
        raise ValueError(f"input dim {x.shape[-1]} does not match d_qk={fmap.d_qk}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature map input must be finite")
    if fmap.kind == "relu":
        return np.maximum(x, 0.0)
    proj = x @ fmap.projection.T
    sq = 0.5 * np.sum(x * x, axis=-1, keepdims=x.ndim > 1)
    return np.exp(proj - sq) / np.sqrt(fmap.m)


def feature_map_apply_t(fmap: KernelFeatureMap, x: Tensor) -> Tensor:
    """Differentiable phi for a row tensor of shape (1, d_qk)."""
    if fmap.kind == "relu":
        return x.relu()
    w = Tensor(fmap.projection)
    proj = x @ w.T                                   # (1, m)
    sq = (x * x).sum(axis=1, keepdims=True) * 0.5    # (1, 1)
    return (proj - sq).exp() * (1.0 / np.sqrt(fmap.m))


# ---------------------------------------------------------------------------
# associative memory
# ---------------------------------------------------------------------------


@dataclass
class AssociativeMemory:
    """Prefix-sum summary (M, m_vec) of an absorbed key/value stream."""

    fmap: KernelFeatureMap
    M: np.ndarray
    m_vec: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, fmap: KernelFeatureMap, d: int) -> "AssociativeMemory":
        return cls(fmap=fmap, M=np.zeros((fmap.m, d)), m_vec=np.zeros(fmap.m), count=0)

    @property
    def nbytes(self) -> int:
        return self.M.nbytes + self.m_vec.nbytes


def memory_update(mem: AssociativeMemory, k: np.ndarray, v: np.ndarray) -> AssociativeMemory:
    """Absorb one (key, value) pair in place; storage size is unchanged."""
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape != (mem.fmap.d_qk,):
        raise ValueError(f"key shape {k.shape} does not match d_qk={mem.fmap.d_qk}")
    if v.shape != (mem.M.shape[1],):
        raise ValueError(f"value shape {v.shape} does not match d={mem.M.shape[1]}")
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
        raise ValueError("non-finite key or value rejected; memory unmodified")
    pk = feature_map_apply(mem.fmap, k)
    mem.M += np.outer(pk, v)
    mem.m_vec += pk
    mem.count += 1
    return mem


def memory_query(mem: AssociativeMemory, q: np.ndarray,
                 fallback: np.ndarray | None = None) -> np.ndarray:
    """Retrieve phi(q) M / max(phi(q).m_vec, EPS_DENOM).

    With ``fallback`` given, a denominator at or below EPS_DENOM returns the
    fallback vector instead (the rule the attention routines use).
    """
    if mem.count < 1:
        raise ValueError("query of an empty memory (denominator would be 0)")
    q = np.asarray(q, dtype=np.float64)
    pq = feature_map_apply(mem.fmap, q)
    denom = float(pq @ mem.m_vec)
    if denom <= EPS_DENOM and fallback is not None:
        return np.asarray(fallback, dtype=np.float64).copy()
    return (pq @ mem.M) / max(denom, EPS_DENOM)


# ---------------------------------------------------------------------------
# attention over full sequences
# ---------------------------------------------------------------------------


def causal_linear_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                            fmap: KernelFeatureMap) -> np.ndarray:
    """Row i attends to rows 1..i through the prefix-sum memory.

    One left-to-right pass with O(m*d) state; row i equals a memory query
    after absorbing rows 1..i (with the degenerate-row fallback to v_i).
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.shape != Q.shape or V.shape[0] != Q.shape[0]:
        raise ValueError(f"Q/K/V row counts must agree, got {Q.shape}, {K.shape}, {V.shape}")
    if Q.shape[0] < 1:
        raise ValueError("empty sequence")
    mem = AssociativeMemory.fresh(fmap, V.shape[1])
    out = np.empty_like(V)
    for i in range(Q.shape[0]):
        memory_update(mem, K[i], V[i])
        out[i] = memory_query(mem, Q[i], fallback=V[i])
    return out


def exact_causal_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                           kernel: str = "softmax") -> np.ndarray:
    """Quadratic-time reference: row i = sum_{j<=i} K(q_i,k_j) v_j / sum_l K(q_i,k_l).

    Softmax kernel is exp(q.k); its weights are rescaled by the row maximum
    (a no-op on the normalized sum) for conditioning. A relu-kernel row whose
    weights are all ~zero falls back to that row's value vector.
    """
    if kernel not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNEL_KINDS}")
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.shape != Q.shape or V.shape[0] != Q.shape[0]:
        raise ValueError(f"Q/K/V row counts must agree, got {Q.shape}, {K.shape}, {V.shape}")
    L = Q.shape[0]
    if L < 1:
        raise ValueError("empty sequence")
    out = np.empty_like(V)
    for i in range(L):
        if kernel == "softmax":
            logits = K[: i + 1] @ Q[i]
            w = np.exp(logits - logits.max())
        else:
            w = np.maximum(K[: i + 1], 0.0) @ np.maximum(Q[i], 0.0)
        total = w.sum()
        if total <= EPS_DENOM:
            out[i] = V[i]
        else:
            out[i] = (w @ V[: i + 1]) / total
    return out


# ---------------------------------------------------------------------------
# differentiable per-step counterparts (used by the sequence model)
# ---------------------------------------------------------------------------


def causal_linear_attention_t(qs: list[Tensor], ks: list[Tensor], vs: list[Tensor],
                              fmap: KernelFeatureMap) -> list[Tensor]:
    """Gradient-tracked linear attention over per-frame (1, dim) rows."""
    if not qs:
        raise ValueError("empty sequence")
    d = vs[0].shape[1]
    M: Tensor | None = None
    m_vec: Tensor | None = None
    out = []
    for q, k, v in zip(qs, ks, vs):
        pk = feature_map_apply_t(fmap, k)            # (1, m)
        outer = pk.T @ v                             # (m, d)
        M = outer if M is None else M + outer
        m_vec = pk if m_vec is None else m_vec + pk
        pq = feature_map_apply_t(fmap, q)            # (1, m)
        denom = (pq * m_vec).sum(axis=1, keepdims=True)  # (1, 1)
        if denom.item() <= EPS_DENOM:
            out.append(v)
        else:
            out.append((pq @ M) / denom)
    return out


def exact_causal_attention_t(qs: list[Tensor], ks: list[Tensor], vs: list[Tensor],
                             kernel: str = "softmax") -> list[Tensor]:
    """Gradient-tracked quadratic attention over per-frame (1, dim) rows."""
    if not qs:
        raise ValueError("empty sequence")
    out = []
    for i, q in enumerate(qs):
        if kernel == "softmax":
            logits = [(k * q).sum(axis=1, keepdims=True) for k in ks[: i + 1]]
            shift = max(l.item() for l in logits)  # constant; ratio-invariant
            weights = [(l - shift).exp() for l in logits]
        else:
            weights = [(k.relu() * q.relu()).sum(axis=1, keepdims=True) for k in ks[: i + 1]]
        total = weights[0]
        for w in weights[1:]:
            total = total + w
        if total.item() <= EPS_DENOM:
            out.append(vs[i])
            continue
        acc = weights[0] * vs[0]
        for w, v in zip(weights[1:], vs[1 : i + 1]):
            acc = acc + w * v
        out.append(acc / total)
    return out
