"""External retrieval database: caption/motion embedding pairs with exact search.

The index stores one record per corpus motion (text embedding, motion
embedding, caption, record id) produced by a fixed retriever checkpoint,
whose config hash is pinned so generation can refuse a mismatched pairing.
Search is exhaustive cosine similarity; the corpus is small enough that
exactness beats cleverness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import load_container, save_container
from .retriever import RetrieverState, encode_motion, encode_text, retriever_hash


@dataclass
class RetrievalIndex:
    text_embeddings: np.ndarray    # (n, d), unit rows
    motion_embeddings: np.ndarray  # (n, d), unit rows
    captions: list
    record_ids: list
    retriever_hash: str
    split: str = "train"

    def __len__(self):
        return len(self.captions)


def build_index(corpus, state: RetrieverState, split="train") -> RetrievalIndex:
    ids = corpus.splits[split]
    if not ids:
        raise ValueError(f"split '{split}' is empty")
    text_rows, motion_rows, captions = [], [], []
    for rid in ids:
        m = corpus.records[rid]
        text_rows.append(encode_text(state.params, state.cfg, state.vocab_map, m.caption))
        motion_rows.append(encode_motion(state.params, state.cfg, state.skeleton, m))
        captions.append(m.caption)
    return RetrievalIndex(
        text_embeddings=np.stack(text_rows),
        motion_embeddings=np.stack(motion_rows),
        captions=captions,
        record_ids=list(ids),
        retriever_hash=retriever_hash(state),
        split=split,
    )


def retrieve(index: RetrievalIndex, query_embedding, k=1, score_mode="text"):
    """Top-k records by cosine similarity, ties broken by ascending record id.

    Returns a list of (text_embedding, motion_embedding, score, record_id,
    caption) tuples sorted by descending score.
    """
    n = len(index)
    if n == 0:
        raise ValueError("cannot retrieve from an empty index")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    q = np.asarray(query_embedding, dtype=np.float64).ravel()
    scores = index.text_embeddings @ q
    if score_mode == "max":
        scores = np.maximum(scores, index.motion_embeddings @ q)
    elif score_mode != "text":
        raise ValueError(f"unknown score_mode '{score_mode}'")
    order = sorted(range(n), key=lambda i: (-scores[i], index.record_ids[i]))
    out = []
    for i in order[:k]:
        out.append((index.text_embeddings[i].copy(), index.motion_embeddings[i].copy(),
                    float(scores[i]), index.record_ids[i], index.captions[i]))
    return out


def retrieved_features(index: RetrievalIndex, query_embedding, k=1, score_mode="text"):
    """(R_t, R_m) pair for conditioning: top-1 directly, or the renormalized
    mean of the top-k embeddings for k > 1."""
    hits = retrieve(index, query_embedding, k=k, score_mode=score_mode)
    rt_vec = np.mean([h[0] for h in hits], axis=0)
    rm_vec = np.mean([h[1] for h in hits], axis=0)
    if k > 1:
        rt_vec = rt_vec / max(np.linalg.norm(rt_vec), 1e-12)
        rm_vec = rm_vec / max(np.linalg.norm(rm_vec), 1e-12)
    return rt_vec, rm_vec


def save_index(index: RetrievalIndex, path):
    if len(index) == 0:
        raise ValueError("refusing to save an empty index")
    header = {
        "kind": "index",
        "retriever_hash": index.retriever_hash,
        "split": index.split,
        "captions": index.captions,
        "record_ids": index.record_ids,
    }
    blobs = {"text_embeddings": index.text_embeddings,
             "motion_embeddings": index.motion_embeddings}
    save_container(path, "index", header, blobs)


def load_index(path) -> RetrievalIndex:
    header, blobs = load_container(path, "index")
    return RetrievalIndex(
        text_embeddings=blobs["text_embeddings"],
        motion_embeddings=blobs["motion_embeddings"],
        captions=list(header["captions"]),
        record_ids=list(header["record_ids"]),
        retriever_hash=header["retriever_hash"],
        split=header["split"],
    )
