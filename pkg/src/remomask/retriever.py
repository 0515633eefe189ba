"""Bidirectional momentum text-motion contrastive retriever.

Two online encoder towers (text, part-level motion) train against momentum
copies of themselves; each modality keeps a FIFO queue of momentum keys so
the negative pool size is independent of the batch size. Both directions
of the InfoNCE-style loss are summed, the online towers take the gradient
step, the momentum towers follow by exponential moving average, and the
batch's momentum keys are pushed into the queues, in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import nn
from .container import load_container, rng_state, restore_rng, save_container, config_hash
from .motion import FEATS_PER_JOINT, MotionSequence, Skeleton

UNK = "<unk>"


@dataclass
class RetrieverConfig:
    dim: int = 32                 # shared embedding dimension
    text_dim: int = 32
    text_layers: int = 2
    text_heads: int = 2
    text_ffn: int = 64
    part_hidden: int = 16
    whole_hidden: int = 48
    momentum: float = 0.99        # reference setting
    tau: float = 0.07             # reference setting
    queue_capacity: int = 1024    # desk-scale (reference uses 65536)
    batch_size: int = 8           # desk-scale
    lr: float = 2e-4
    queue_mode: str = "both"      # "both" | "none" (in-batch negatives)
    motion_encoder: str = "part"  # "part" | "whole"

    def validate(self):
        if not (0.0 <= self.momentum <= 1.0):
            raise ValueError("momentum must be in [0, 1]")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.queue_mode not in ("both", "none"):
            raise ValueError(f"unknown queue_mode '{self.queue_mode}'")
        if self.motion_encoder not in ("part", "whole"):
            raise ValueError(f"unknown motion_encoder '{self.motion_encoder}'")
        if self.queue_mode == "both" and self.batch_size > self.queue_capacity // 4:
            raise ValueError("batch_size must be <= queue_capacity / 4")
        return self


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def build_vocab(captions) -> list:
    words = sorted({w for c in captions for w in c.lower().split()})
    return [UNK] + words


def tokenize(vocab_map: dict, caption: str) -> np.ndarray:
    ids = [vocab_map.get(w, 0) for w in caption.lower().split()]
    if not ids:
        ids = [0]
    return np.array(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# encoder towers
# ---------------------------------------------------------------------------

def init_text_params(params, rng, cfg: RetrieverConfig, vocab_size):
    nn.init_embedding(params, rng, "text/tok", vocab_size, cfg.text_dim)
    for i in range(cfg.text_layers):
        nn.init_self_attention_block(params, rng, f"text/block{i}", cfg.text_dim,
                                     cfg.text_heads, cfg.text_ffn)
    nn.init_layer_norm(params, "text/ln_out", cfg.text_dim)
    nn.init_linear(params, rng, "text/proj", cfg.text_dim, cfg.dim, bias_scale=0.02)


def text_forward(pt, cfg: RetrieverConfig, ids) -> ad.Tensor:
    """Caption token ids -> unit embedding of shape (1, dim)."""
    x = nn.embed(pt, "text/tok", ids)
    x = ad.add(x, ad.constant(nn.sinusoid_1d(len(ids), cfg.text_dim)))
    for i in range(cfg.text_layers):
        x = nn.self_attention_block(pt, f"text/block{i}", x, cfg.text_heads)
    x = nn.layer_norm(pt, "text/ln_out", x)
    x = ad.reshape(ad.tmean(x, axis=0), (1, cfg.text_dim))
    return ad.l2_normalize(nn.linear(pt, "text/proj", x))


def init_motion_params(params, rng, cfg: RetrieverConfig, skeleton: Skeleton):
    if cfg.motion_encoder == "whole":
        d_in = skeleton.n_joints * FEATS_PER_JOINT
        nn.init_linear(params, rng, "motion/frame", d_in, cfg.whole_hidden)
        nn.init_linear(params, rng, "motion/mlp", cfg.whole_hidden, cfg.whole_hidden)
        nn.init_linear(params, rng, "motion/proj", cfg.whole_hidden, cfg.dim, bias_scale=0.02)
        return
    for pname in skeleton.part_names():
        nn.init_linear(params, rng, f"motion/{pname}/joint", FEATS_PER_JOINT, cfg.part_hidden)
        nn.init_linear(params, rng, f"motion/{pname}/mlp", cfg.part_hidden, cfg.part_hidden)
    n_parts = len(skeleton.part_names())
    nn.init_linear(params, rng, "motion/proj", n_parts * cfg.part_hidden, cfg.dim, bias_scale=0.02)


def split_parts(skeleton: Skeleton, features: np.ndarray) -> list:
    """(T, 12*J) -> per-part arrays of shape (T, |joints_p|, 12)."""
    T = features.shape[0]
    grid = features.reshape(T, skeleton.n_joints, FEATS_PER_JOINT)
    return [np.ascontiguousarray(grid[:, list(skeleton.parts[p]), :]) for p in skeleton.part_names()]


def motion_forward(pt, cfg: RetrieverConfig, skeleton: Skeleton, features: np.ndarray) -> ad.Tensor:
    """Motion features -> unit embedding of shape (1, dim)."""
    if cfg.motion_encoder == "whole":
        x = ad.gelu(nn.linear(pt, "motion/frame", ad.constant(features)))
        x = ad.gelu(nn.linear(pt, "motion/mlp", x))
        x = ad.reshape(ad.tmean(x, axis=0), (1, cfg.whole_hidden))
        return ad.l2_normalize(nn.linear(pt, "motion/proj", x))
    pooled = []
    for pname, part in zip(skeleton.part_names(), split_parts(skeleton, features)):
        T, nj, _ = part.shape
        x = ad.constant(part.reshape(T * nj, FEATS_PER_JOINT))
        x = ad.gelu(nn.linear(pt, f"motion/{pname}/joint", x))
        x = ad.tmean(ad.reshape(x, (T, nj, cfg.part_hidden)), axis=1)  # joint pooling
        x = ad.gelu(nn.linear(pt, f"motion/{pname}/mlp", x))
        x = ad.reshape(ad.tmean(x, axis=0), (1, cfg.part_hidden))      # temporal pooling
        pooled.append(x)
    x = ad.concat(pooled, axis=1)
    return ad.l2_normalize(nn.linear(pt, "motion/proj", x))


# ---------------------------------------------------------------------------
# negative queue
# ---------------------------------------------------------------------------

class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm key vectors (ring buffer)."""

    def __init__(self, capacity, dim):
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.buf = np.zeros((self.capacity, self.dim))
        self.size = 0
        self.cursor = 0

    def push(self, keys: np.ndarray):
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ValueError(f"queue expects dim {self.dim}, got {keys.shape[1]}")
        if keys.shape[0] > self.capacity:
            raise ValueError("cannot push more keys than the queue capacity")
        for row in keys:
            self.buf[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def as_matrix(self) -> np.ndarray:
        """Entries in FIFO order, oldest first."""
        if self.size < self.capacity:
            start = (self.cursor - self.size) % self.capacity
            idx = [(start + i) % self.capacity for i in range(self.size)]
            return self.buf[idx].copy()
        return np.concatenate([self.buf[self.cursor:], self.buf[:self.cursor]]).copy()

    def state(self):
        return {"size": self.size, "cursor": self.cursor}

    @staticmethod
    def from_state(buf, meta, capacity, dim):
        q = NegativeQueue(capacity, dim)
        q.buf = np.array(buf).reshape(capacity, dim)
        q.size = int(meta["size"])
        q.cursor = int(meta["cursor"])
        return q


def momentum_update(online: dict, momentum: dict, m: float) -> dict:
    """theta_hat <- m * theta_hat + (1 - m) * theta, elementwise."""
    return {k: m * momentum[k] + (1.0 - m) * online[k] for k in online}


# ---------------------------------------------------------------------------
# contrastive losses
# ---------------------------------------------------------------------------

def contrastive_loss(q_rows: ad.Tensor, pos_keys: np.ndarray, queue_keys: np.ndarray, tau: float) -> ad.Tensor:
    """Sum over the batch of -log( e^{q.k+ / tau} / (e^{q.k+ / tau} + sum_queue e^{q.k / tau}) ).

    q_rows come from the online tower (gradients flow), pos_keys and
    queue_keys are momentum-encoded constants. Stabilized via the fused
    log-sum-exp inside cross_entropy (positive sits in column 0).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    queue_keys = np.asarray(queue_keys, dtype=np.float64)
    if queue_keys.ndim != 2 or queue_keys.shape[0] == 0:
        raise ValueError("queue must be nonempty")
    n = q_rows.shape[0]
    pos = ad.tsum(ad.mul(q_rows, ad.constant(pos_keys)), axis=1)
    pos = ad.reshape(pos, (n, 1))
    neg = ad.matmul(q_rows, ad.constant(queue_keys.T))
    logits = ad.scale(ad.concat([pos, neg], axis=1), 1.0 / tau)
    return ad.cross_entropy(logits, np.zeros(n, dtype=np.int64))


def loss_m2t(q_motion: ad.Tensor, k_text: np.ndarray, queue_t: np.ndarray, tau: float) -> ad.Tensor:
    """Motion-to-text direction: online motion queries vs momentum text keys."""
    return contrastive_loss(q_motion, k_text, queue_t, tau)


def loss_t2m(q_text: ad.Tensor, k_motion: np.ndarray, queue_m: np.ndarray, tau: float) -> ad.Tensor:
    """Text-to-motion direction: roles of the towers reversed."""
    return contrastive_loss(q_text, k_motion, queue_m, tau)


def inbatch_loss(q_rows: ad.Tensor, keys: np.ndarray, tau: float) -> ad.Tensor:
    """Plain in-batch InfoNCE (the no-queue baseline): keys_i is the positive."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = q_rows.shape[0]
    logits = ad.scale(ad.matmul(q_rows, ad.constant(np.asarray(keys).T)), 1.0 / tau)
    return ad.cross_entropy(logits, np.arange(n, dtype=np.int64))


def brute_force_contrastive(q, pos, queue, tau):
    """Independent naive-loop oracle for the queue-negative loss."""
    import math

    total = 0.0
    for i in range(len(q)):
        p = math.exp(float(np.dot(q[i], pos[i])) / tau)
        neg = sum(math.exp(float(np.dot(q[i], k)) / tau) for k in queue)
        total += -math.log(p / (p + neg))
    return total


# ---------------------------------------------------------------------------
# trainer state
# ---------------------------------------------------------------------------

@dataclass
class RetrieverState:
    cfg: RetrieverConfig
    skeleton: Skeleton
    vocab: list
    params: dict
    momentum_params: dict
    queue_t: NegativeQueue
    queue_m: NegativeQueue
    opt: ad.Adam
    rng: np.random.Generator
    step: int = 0
    loss_log: list = field(default_factory=list)

    @property
    def vocab_map(self):
        return {w: i for i, w in enumerate(self.vocab)}


def init_retriever(corpus, cfg: RetrieverConfig, seed=0) -> RetrieverState:
    cfg.validate()
    rng = np.random.default_rng(seed)
    vocab = build_vocab([m.caption for m in corpus.split_records("train")])
    params = {}
    init_text_params(params, rng, cfg, len(vocab))
    init_motion_params(params, rng, cfg, corpus.skeleton)
    momentum_params = {k: v.copy() for k, v in params.items()}
    return RetrieverState(
        cfg=cfg,
        skeleton=corpus.skeleton,
        vocab=vocab,
        params=params,
        momentum_params=momentum_params,
        queue_t=NegativeQueue(cfg.queue_capacity, cfg.dim),
        queue_m=NegativeQueue(cfg.queue_capacity, cfg.dim),
        opt=ad.Adam(params, lr=cfg.lr),
        rng=rng,
    )


def encode_text(params, cfg, vocab_map, caption) -> np.ndarray:
    """No-gradient text embedding, shape (dim,), unit norm."""
    pt = nn.wrap(params, trainable=False)
    return text_forward(pt, cfg, tokenize(vocab_map, caption)).data[0]


def encode_motion(params, cfg, skeleton, motion_or_features) -> np.ndarray:
    """No-gradient motion embedding, shape (dim,), unit norm."""
    feats = motion_or_features.features if isinstance(motion_or_features, MotionSequence) else motion_or_features
    pt = nn.wrap(params, trainable=False)
    return motion_forward(pt, cfg, skeleton, feats).data[0]


def _batch_rows(pt, state, batch, tower):
    rows = []
    for m in batch:
        if tower == "text":
            rows.append(text_forward(pt, state.cfg, tokenize(state.vocab_map, m.caption)))
        else:
            rows.append(motion_forward(pt, state.cfg, state.skeleton, m.features))
    return ad.concat(rows, axis=0)


def bmm_train_step(state: RetrieverState, batch) -> float:
    """One training step: loss, gradient step, momentum update, queue update."""
    cfg = state.cfg
    if len(batch) < 2:
        raise ValueError("contrastive batches need at least 2 pairs")
    mpt = nn.wrap(state.momentum_params, trainable=False)
    k_t = np.concatenate([text_forward(mpt, cfg, tokenize(state.vocab_map, m.caption)).data
                          for m in batch], axis=0)
    k_m = np.concatenate([motion_forward(mpt, cfg, state.skeleton, m.features).data
                          for m in batch], axis=0)

    queue_t_mat = state.queue_t.as_matrix()
    queue_m_mat = state.queue_m.as_matrix()
    use_queue = cfg.queue_mode == "both"
    warm = queue_t_mat.shape[0] > 0 and queue_m_mat.shape[0] > 0

    if use_queue and not warm:
        # first step: empty queues make both losses exactly zero with zero
        # gradient, so only the momentum and queue updates have any effect
        loss_val = 0.0
    else:
        pt = nn.wrap(state.params, trainable=True)
        q_m = _batch_rows(pt, state, batch, "motion")
        q_t = _batch_rows(pt, state, batch, "text")
        if use_queue:
            loss = ad.add(contrastive_loss(q_m, k_t, queue_t_mat, cfg.tau),
                          contrastive_loss(q_t, k_m, queue_m_mat, cfg.tau))
        else:
            loss = ad.add(inbatch_loss(q_m, k_t, cfg.tau), inbatch_loss(q_t, k_m, cfg.tau))
        ad.backward(loss)
        grads = {k: (pt[k].grad if pt[k].grad is not None else np.zeros_like(v))
                 for k, v in state.params.items()}
        state.opt.step(grads)
        loss_val = loss.data.item()

    state.momentum_params = momentum_update(state.params, state.momentum_params, cfg.momentum)
    if use_queue:
        state.queue_t.push(k_t)
        state.queue_m.push(k_m)
    state.step += 1
    state.loss_log.append(loss_val)
    return loss_val


def train_retriever(state: RetrieverState, corpus, steps) -> RetrieverState:
    train_ids = list(corpus.splits["train"])
    for _ in range(steps):
        pick = state.rng.choice(len(train_ids), size=state.cfg.batch_size, replace=False)
        batch = [corpus.records[train_ids[i]] for i in pick]
        bmm_train_step(state, batch)
    return state


# ---------------------------------------------------------------------------
# checkpointing (.rmr)
# ---------------------------------------------------------------------------

def save_retriever(state: RetrieverState, path):
    cfg_dict = asdict(state.cfg)
    header = {
        "kind": "retriever",
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "vocab": state.vocab,
        "skeleton": state.skeleton.to_header(),
        "step": state.step,
        "rng": rng_state(state.rng),
        "adam_t": state.opt.t,
        "queue_t_meta": state.queue_t.state(),
        "queue_m_meta": state.queue_m.state(),
        "loss_log": state.loss_log[-200:],
    }
    blobs = {}
    for k, v in state.params.items():
        blobs[f"params/{k}"] = v
    for k, v in state.momentum_params.items():
        blobs[f"momentum/{k}"] = v
    blobs.update(state.opt.state_arrays())
    blobs["queue_t/buf"] = state.queue_t.buf
    blobs["queue_m/buf"] = state.queue_m.buf
    save_container(path, "retriever", header, blobs)


def load_retriever(path) -> RetrieverState:
    header, blobs = load_container(path, "retriever")
    cfg = RetrieverConfig(**header["config"])
    skeleton = Skeleton.from_header(header["skeleton"])
    params = {k[len("params/"):]: np.array(v) for k, v in blobs.items() if k.startswith("params/")}
    momentum = {k[len("momentum/"):]: np.array(v) for k, v in blobs.items() if k.startswith("momentum/")}
    opt = ad.Adam(params, lr=cfg.lr)
    opt.load_state_arrays(blobs, header["adam_t"])
    state = RetrieverState(
        cfg=cfg,
        skeleton=skeleton,
        vocab=list(header["vocab"]),
        params=params,
        momentum_params=momentum,
        queue_t=NegativeQueue.from_state(blobs["queue_t/buf"], header["queue_t_meta"],
                                         cfg.queue_capacity, cfg.dim),
        queue_m=NegativeQueue.from_state(blobs["queue_m/buf"], header["queue_m_meta"],
                                         cfg.queue_capacity, cfg.dim),
        opt=opt,
        rng=restore_rng(header["rng"]),
        step=header["step"],
        loss_log=list(header["loss_log"]),
    )
    return state


def retriever_hash(path_or_state) -> str:
    if isinstance(path_or_state, RetrieverState):
        return config_hash(asdict(path_or_state.cfg))
    header, _ = load_container(path_or_state, "retriever")
    return header["config_hash"]
