"""Attention-block throughput: constant-size memory vs stored-history attention.

Measures the median per-frame step cost of the two sequence blocks at several
history lengths L. The memory path does one update+query on its (m, d) state,
independent of L; the stored-history path computes one exact attention row
over L keys, linear in L. ``heads`` batches independent rows into each step
so numpy dispatch overhead does not mask the asymptotic contrast.
"""

from __future__ import annotations

import json
from time import perf_counter

import numpy as np


def bench_attention(lengths: tuple = (16, 64, 256), d: int = 256, d_qk: int = 256,
                    heads: int = 8, trials: int = 200, kernel: str = "relu",
                    seed: int = 0) -> dict:
    """Median step seconds per history length for both block kinds."""
    results = {"mvp": {}, "mvt": {}, "d": d, "d_qk": d_qk, "heads": heads,
               "trials": trials, "kernel": kernel}
    for L in lengths:
        rng = np.random.default_rng(seed)
        m = d_qk
        M = rng.standard_normal((heads, m, d))
        m_vec = rng.standard_normal((heads, m, 1)) ** 2
        k_hist = rng.standard_normal((heads, L, d_qk))
        v_hist = rng.standard_normal((heads, L, d))
        k = rng.standard_normal((heads, d_qk))
        v = rng.standard_normal((heads, d))
        q = rng.standard_normal((heads, d_qk))

        def phi(x):
            if kernel == "relu":
                return np.maximum(x, 0.0)
            return np.exp(x - 0.5 * (x * x).sum(-1, keepdims=True)) / np.sqrt(m)

        def mvp_step():
            pk = phi(k)
            M_new = M + pk[:, :, None] @ v[:, None, :]
            mv_new = m_vec + pk[:, :, None]
            pq = phi(q)
            num = pq[:, None, :] @ M_new
            den = pq[:, None, :] @ mv_new
            return num / np.maximum(den, 1e-9)

        def mvt_step():
            if kernel == "relu":
                w = np.einsum("hld,hd->hl", np.maximum(k_hist, 0.0), np.maximum(q, 0.0))
            else:
                logits = np.einsum("hld,hd->hl", k_hist, q)
                w = np.exp(logits - logits.max(axis=1, keepdims=True))
            out = np.einsum("hl,hld->hd", w, v_hist)
            return out / np.maximum(w.sum(axis=1, keepdims=True), 1e-9)

        for name, step in (("mvp", mvp_step), ("mvt", mvt_step)):
            step()  # warm up caches and BLAS dispatch
            samples = np.empty(trials)
            for t in range(trials):
                t0 = perf_counter()
                step()
                samples[t] = perf_counter() - t0
            results[name][L] = float(np.median(samples))
    lo, hi = min(lengths), max(lengths)
    results["ratios"] = {name: results[name][hi] / results[name][lo]
                         for name in ("mvp", "mvt")}
    return results


def format_table(results: dict) -> str:
    lengths = sorted(k for k in results["mvp"])
    lines = ["history length | mvp step (us) | mvt step (us)"]
    for L in lengths:
        lines.append(f"{L:>14d} | {results['mvp'][L] * 1e6:13.1f} "
                     f"| {results['mvt'][L] * 1e6:13.1f}")
    lines.append(
        f"step-time ratio L={lengths[-1]} vs L={lengths[0]}: "
        f"mvp {results['ratios']['mvp']:.2f}x, mvt {results['ratios']['mvt']:.2f}x")
    return "\n".join(lines)


def write_results(results: dict, path) -> None:
    serializable = dict(results)
    for name in ("mvp", "mvt"):
        serializable[name] = {str(k): v for k, v in results[name].items()}
    with open(path, "w") as f:
        json.dump(serializable, f, indent=2, sort_keys=True)
