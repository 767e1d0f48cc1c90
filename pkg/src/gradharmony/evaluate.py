"""Zero-shot retrieval metrics, conflict histograms and indicator separation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from . import model as M
from .errors import EvalError
from .synth import Triplet, to_batch


@dataclass(frozen=True)
class RetrievalReport:
    recall_at_k: dict[int, float]
    median_rank: float
    n_queries: int
    n_candidates: int
    direction: str = "video_to_text"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at_k"] = {str(k): v for k, v in sorted(self.recall_at_k.items())}
        return d


@dataclass(frozen=True)
class ConflictHistogram:
    step_edges: np.ndarray  # (n_step_bins + 1,), half-open [lo, hi) ranges
    cos_edges: np.ndarray   # (n_cos_bins + 1,), uniform over [-1, 1]
    counts: np.ndarray      # (n_step_bins, n_cos_bins)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step_lo", "step_hi"] + [
                f"[{lo:.4g},{hi:.4g})" for lo, hi in zip(self.cos_edges[:-1], self.cos_edges[1:])
            ])
            for i, row in enumerate(self.counts):
                w.writerow([int(self.step_edges[i]), int(self.step_edges[i + 1])]
                           + [int(c) for c in row])


@dataclass(frozen=True)
class SeparationReport:
    mean_cos_aligned: float
    mean_cos_misaligned: float
    auc: float
    n_aligned: int
    n_misaligned: int

    def to_dict(self) -> dict:
        return asdict(self)


def ranks_of_matches(scores: np.ndarray) -> np.ndarray:
    """1-based rank of candidate ``i`` in row ``i`` of a (queries, candidates)
    score matrix. Ties go to the lower candidate index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    diag = scores[np.arange(n), np.arange(n)]
    higher = (scores > diag[:, None]).sum(axis=1)
    cols = np.arange(scores.shape[1])
    tied_before = ((scores == diag[:, None]) & (cols[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def retrieval_from_embeddings(queries: np.ndarray, candidates: np.ndarray, ks=(1, 5, 10),
                              direction="video_to_text") -> RetrievalReport:
    """Query ``i`` matches candidate ``i``."""
    if len(queries) == 0:
        raise EvalError("retrieval needs at least one query")
    if not ks:
        raise EvalError("ks must be nonempty")
    ranks = ranks_of_matches(queries @ candidates.T)
    recall = {int(k): float(np.mean(ranks <= k)) for k in sorted(set(ks))}
    return RetrievalReport(recall, float(np.median(ranks)), len(queries), len(candidates),
                           direction)


def retrieval_eval(params: M.ModelParams, eval_set: list[Triplet], ks=(1, 5, 10),
                   reverse: bool = False) -> RetrievalReport:
    """Text-from-video retrieval in the video-text space; each candidate is a
    clip's own narration, neighbors excluded. ``reverse`` retrieves video
    from text instead."""
    if not eval_set:
        raise EvalError("eval set is empty")
    if not all(t.aligned for t in eval_set):
        raise EvalError("retrieval eval set must contain only aligned triplets")
    emb = M.forward(params, to_batch(eval_set))
    z_v, z_t = emb.z_v_vt, emb.z_t
    if reverse:
        return retrieval_from_embeddings(z_t, z_v, ks, "text_to_video")
    return retrieval_from_embeddings(z_v, z_t, ks)


def histogram(records, n_step_bins: int = 10, n_cos_bins: int = 20) -> ConflictHistogram:
    if not records:
        raise EvalError("no records to histogram")
    steps = np.array([r.step for r in records], dtype=np.float64)
    cos = np.array([r.cos_sim for r in records], dtype=np.float64)
    step_edges = np.linspace(steps.min(), steps.max() + 1, n_step_bins + 1)
    cos_edges = np.linspace(-1.0, 1.0, n_cos_bins + 1)
    si = np.clip(np.searchsorted(step_edges, steps, side="right") - 1, 0, n_step_bins - 1)
    ci = np.clip(np.searchsorted(cos_edges, cos, side="right") - 1, 0, n_cos_bins - 1)
    counts = np.zeros((n_step_bins, n_cos_bins), dtype=np.int64)
    np.add.at(counts, (si, ci), 1)
    return ConflictHistogram(step_edges, cos_edges, counts)


def separation(trace) -> SeparationReport:
    """Group means of cos and the rank-sum AUC of aligned over misaligned.

    ``trace`` is an iterable of ``(cos, aligned)`` pairs (or objects with
    ``cos`` and ``aligned`` attributes). Ties count one half.
    """
    pairs = [(t.cos, t.aligned) if hasattr(t, "cos") else (t[0], t[1]) for t in trace]
    cos = np.array([p[0] for p in pairs], dtype=np.float64)
    aligned = np.array([bool(p[1]) for p in pairs])
    n_a, n_m = int(aligned.sum()), int((~aligned).sum())
    if n_a == 0 or n_m == 0:
        raise EvalError("separation needs both aligned and misaligned samples")
    ranks = rankdata(cos)  # midranks for ties
    u = ranks[aligned].sum() - n_a * (n_a + 1) / 2
    return SeparationReport(float(cos[aligned].mean()), float(cos[~aligned].mean()),
                            float(u / (n_a * n_m)), n_a, n_m)


def extreme_ids(trace, fraction: float = 0.05):
    """Ids of the top and bottom ``fraction`` of the trace by cos (at least one each)."""
    items = sorted(trace, key=lambda t: (t.cos, t.id))
    n = max(1, int(round(fraction * len(items))))
    top = [t.id for t in items[::-1][:n]]
    bottom = [t.id for t in items[:n]]
    return top, bottom


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "cos", "aligned", "text_aligned", "audio_aligned"])
        for t in trace:
            w.writerow([t.id, repr(float(t.cos)), int(t.aligned), int(t.text_aligned),
                        int(t.audio_aligned)])


def write_embeddings_csv(params: M.ModelParams, triplets: list[Triplet], path) -> None:
    """Dump per-triplet embeddings (both spaces) for external visualization tools."""
    emb = M.forward(params, to_batch(triplets))
    blocks = {"v_va": emb.z_v_va, "a": emb.z_a, "v_vt": emb.z_v_vt, "t": emb.z_t}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "aligned"] + [f"{name}_{i}" for name, arr in blocks.items()
                                        for i in range(arr.shape[1])])
        for row, t in enumerate(triplets):
            w.writerow([t.id, int(t.aligned)] + [repr(float(x)) for arr in blocks.values()
                                                 for x in arr[row]])


def write_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
