"""Evaluation metrics for generation quality and retrieval.

The feature space comes from the trained retriever towers, so absolute
values are not comparable to any published numbers; only orderings and
self-consistency properties are meaningful here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureBank:
    features: np.ndarray  # (n, d)
    encoder_hash: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("feature bank must be a 2-D (n, d) matrix")
        n, d = self.features.shape
        if n < d + 1:
            raise ValueError(f"need at least d+1={d + 1} samples for covariance, got {n}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature bank contains non-finite values")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


def _psd_sqrt(mat):
    """Symmetric PSD square root via eigen-decomposition."""
    w, v = np.linalg.eigh(mat)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(bank_a: FeatureBank, bank_b: FeatureBank) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The product square root is computed through the symmetric form
    S_a^{1/2} S_b S_a^{1/2}. Eigenvalues below -1e-8 are an error; small
    negatives round to zero.
    """
    if bank_a.dim != bank_b.dim:
        raise ValueError(f"feature dims differ: {bank_a.dim} vs {bank_b.dim}")
    mu_a = bank_a.features.mean(axis=0)
    mu_b = bank_b.features.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(bank_a.features, rowvar=False))
    cov_b = np.atleast_2d(np.cov(bank_b.features, rowvar=False))
    for name, cov in (("first", cov_a), ("second", cov_b)):
        if not np.all(np.isfinite(cov)):
            raise ValueError(f"{name} covariance has non-finite entries")
        ev = np.linalg.eigvalsh(cov)
        if ev.min() < -1e-8 * max(1.0, ev.max()):
            raise ValueError(f"{name} covariance is not positive semidefinite")
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if w.min() < -1e-8:
        raise ValueError(f"negative eigenvalue {w.min():g} in the covariance product")
    w = np.clip(w, 0.0, None)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b)
                  - 2.0 * np.sum(np.sqrt(w)))
    return max(value, 0.0)


def r_precision(text_feats, motion_feats, pool=32, seed=0):
    """Rank the true motion in a pool of one true plus pool-1 distractors.

    Returns (top1, top2, top3) fractions over all queries.
    """
    text_feats = np.asarray(text_feats, dtype=np.float64)
    motion_feats = np.asarray(motion_feats, dtype=np.float64)
    n = text_feats.shape[0]
    if motion_feats.shape[0] != n:
        raise ValueError("need matched text/motion pairs")
    if n < pool:
        raise ValueError(f"need at least {pool} pairs, got {n}")
    rng = np.random.default_rng(seed)
    hits = np.zeros(3)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        distract = rng.choice(others, size=pool - 1, replace=False)
        cand = np.concatenate([[i], distract])
        d = np.linalg.norm(motion_feats[cand] - text_feats[i][None, :], axis=1)
        rank = int(np.sum(d < d[0]) + 1)  # strict distances beat the true one
        for k in range(3):
            hits[k] += rank <= k + 1
    return tuple(hits / n)


def mm_dist(text_feats, motion_feats) -> float:
    """Mean Euclidean distance between matched text/motion features."""
    text_feats = np.asarray(text_feats, dtype=np.float64)
    motion_feats = np.asarray(motion_feats, dtype=np.float64)
    if text_feats.shape != motion_feats.shape:
        raise ValueError("need matched text/motion pairs of equal shape")
    return float(np.mean(np.linalg.norm(text_feats - motion_feats, axis=1)))


def diversity(motion_feats, subset=300, seed=0) -> float:
    """Mean distance over `subset` random disjoint feature pairs."""
    motion_feats = np.asarray(motion_feats, dtype=np.float64)
    n = motion_feats.shape[0]
    s = min(subset, n // 2)
    if s < 1:
        raise ValueError("need at least two features")
    rng = np.random.default_rng(seed)
    pick = rng.choice(n, size=2 * s, replace=False)
    a, b = motion_feats[pick[:s]], motion_feats[pick[s:]]
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def multimodality(per_text_feats) -> float:
    """Mean pairwise distance within each text's repeat set, averaged.

    `per_text_feats` is a list of (r_i, d) arrays, one per text.
    """
    if not per_text_feats:
        raise ValueError("need at least one text")
    means = []
    for feats in per_text_feats:
        feats = np.asarray(feats, dtype=np.float64)
        r = feats.shape[0]
        if r < 2:
            raise ValueError("each text needs at least two repeats")
        dists = [np.linalg.norm(feats[i] - feats[j]) for i in range(r) for j in range(i + 1, r)]
        means.append(np.mean(dists))
    return float(np.mean(means))


def rank_of_truth(scores_row, true_idx, record_ids):
    """Rank (1-based) of the true candidate under descending score with
    ties broken by ascending record id."""
    order = sorted(range(len(scores_row)), key=lambda i: (-scores_row[i], record_ids[i]))
    return order.index(true_idx) + 1


def retrieval_metrics(query_feats, candidate_feats, record_ids=None, ks=(1, 2, 3, 5, 10)):
    """R@k percentages and the median rank for matched query/candidate pairs.

    Query i's true counterpart is candidate i; score is cosine (dot product
    of unit vectors).
    """
    query_feats = np.asarray(query_feats, dtype=np.float64)
    candidate_feats = np.asarray(candidate_feats, dtype=np.float64)
    n = query_feats.shape[0]
    if candidate_feats.shape[0] != n or n == 0:
        raise ValueError("need matched nonempty query/candidate sets")
    if record_ids is None:
        record_ids = list(range(n))
    scores = query_feats @ candidate_feats.T
    ranks = np.array([rank_of_truth(scores[i], i, record_ids) for i in range(n)])
    out = {f"R@{k}": float(np.mean(ranks <= k) * 100.0) for k in ks}
    out["MedR"] = float(np.median(ranks))
    return out, ranks


@dataclass
class MetricReport:
    fid: float
    r_precision_top1: float
    r_precision_top2: float
    r_precision_top3: float
    mm_dist: float
    diversity: float
    multimodality: float
    retrieval_t2m: dict
    retrieval_m2t: dict

    def validate(self):
        vals = [self.fid, self.r_precision_top1, self.r_precision_top2,
                self.r_precision_top3, self.mm_dist, self.diversity, self.multimodality]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("metric report contains non-finite values")
        for v in (self.r_precision_top1, self.r_precision_top2, self.r_precision_top3):
            if not 0.0 <= v <= 1.0:
                raise ValueError("r-precision out of [0, 1]")
        return self

    def to_dict(self):
        return {
            "fid": self.fid,
            "r_precision": {"top1": self.r_precision_top1, "top2": self.r_precision_top2,
                            "top3": self.r_precision_top3},
            "mm_dist": self.mm_dist,
            "diversity": self.diversity,
            "multimodality": self.multimodality,
            "retrieval": {"text_to_motion": self.retrieval_t2m, "motion_to_text": self.retrieval_m2t},
        }

    def table(self):
        lines = [
            f"{'R-Prec top1':>14} {'top2':>8} {'top3':>8} {'FID':>10} {'MM Dist':>10} "
            f"{'Diversity':>10} {'MultiModality':>14}",
            f"{self.r_precision_top1:14.3f} {self.r_precision_top2:8.3f} "
            f"{self.r_precision_top3:8.3f} {self.fid:10.4f} {self.mm_dist:10.4f} "
            f"{self.diversity:10.4f} {self.multimodality:14.4f}",
        ]
        for tag, m in (("text->motion", self.retrieval_t2m), ("motion->text", self.retrieval_m2t)):
            ks = " ".join(f"{k}={m[k]:.2f}" for k in m if k.startswith("R@"))
            lines.append(f"retrieval {tag}: {ks} MedR={m['MedR']:.1f}")
        return "\n".join(lines)
