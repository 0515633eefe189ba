"""Masked and residual transformers over the 2D token grid.

The masked model predicts base-layer codes on the flattened (time x part)
grid through semantic spatial-temporal attention: keys extend the motion
rows with the text embedding and a projection of the retrieved text+motion
features, values extend them with the text embedding and the retrieved
motion feature. The residual model is the same stack without retrieval
rows (text condition only) plus a learned level-index embedding. Decoding
is iterative confidence-based unmasking with retrieval-aware
classifier-free guidance on the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import nn
from .container import config_hash, load_container, rng_state, restore_rng, save_container

MASK_STATE_VISIBLE = 0
MASK_STATE_MASK = 1      # carries the reserved [MASK] index
MASK_STATE_RANDOM = 2    # BERT-style random code
MASK_STATE_KEEP = 3      # BERT-style kept original


@dataclass
class GenTransformerConfig:
    layers: int = 6
    heads: int = 8
    dim: int = 64            # desk-scale width (reference uses 512)
    ffn: int = 256
    cond_dim: int = 32       # retriever embedding dimension
    codebook_size: int = 64  # K; the mask token is index K
    code_dim: int = 16       # codec latent dim (residual model input)
    levels: int = 3          # residual levels (residual model)
    pos_mode: str = "bias"   # "bias": positional term added to attention logits
    cond_dropout: float = 0.10
    lr: float = 2e-4
    batch_size: int = 8
    with_retrieval: bool = True  # SSTA; False gives STA (text condition only)

    def validate(self):
        if self.dim % 2 != 0 or self.dim % self.heads != 0:
            raise ValueError("dim must be even and divisible by heads")
        if self.pos_mode not in ("bias", "embed"):
            raise ValueError(f"unknown pos_mode '{self.pos_mode}'")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must be in [0, 1]")
        return self

    @property
    def mask_token(self):
        return self.codebook_size


# ---------------------------------------------------------------------------
# 2D positional encoding
# ---------------------------------------------------------------------------

def pos_encode_2d(tp, jp, d) -> np.ndarray:
    """Per-cell code of dim d: first half sinusoidal in t, second half in j."""
    if d % 2 != 0:
        raise ValueError("positional encoding dimension must be even")
    half = d // 2
    pt = nn.sinusoid_1d(tp, half)
    pj = nn.sinusoid_1d(jp, half)
    out = np.zeros((tp, jp, d))
    out[:, :, :half] = pt[:, None, :]
    out[:, :, half:] = pj[None, :, :]
    return out


def positional_bias(pe: np.ndarray, n_cond: int) -> np.ndarray:
    """Additive attention-logit bias over the motion-key block.

    B[(t,j),(t',j')] = p(t,j) . p(t',j') / sqrt(d); condition columns zero.
    """
    tp, jp, d = pe.shape
    flat = pe.reshape(tp * jp, d)
    bias = np.zeros((tp * jp, tp * jp + n_cond))
    bias[:, :tp * jp] = flat @ flat.T / np.sqrt(d)
    return bias


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------

def init_masked_params(rng, cfg: GenTransformerConfig) -> dict:
    params = {}
    nn.init_embedding(params, rng, "tok", cfg.codebook_size + 1, cfg.dim)
    _init_cond_and_stack(params, rng, cfg)
    return params


def init_residual_params(rng, cfg: GenTransformerConfig) -> dict:
    params = {}
    nn.init_linear(params, rng, "in_proj", cfg.code_dim, cfg.dim)
    nn.init_embedding(params, rng, "level", cfg.levels, cfg.dim)
    _init_cond_and_stack(params, rng, cfg)
    return params


def _init_cond_and_stack(params, rng, cfg):
    nn.init_linear(params, rng, "cond/t", cfg.cond_dim, cfg.dim)
    params["null/t"] = rng.normal(0.0, 0.02, size=(cfg.cond_dim,))
    if cfg.with_retrieval:
        nn.init_linear(params, rng, "cond/kr", 2 * cfg.cond_dim, cfg.dim)
        nn.init_linear(params, rng, "cond/rm", cfg.cond_dim, cfg.dim)
        params["null/rt"] = rng.normal(0.0, 0.02, size=(cfg.cond_dim,))
        params["null/rm"] = rng.normal(0.0, 0.02, size=(cfg.cond_dim,))
    for i in range(cfg.layers):
        nn.init_self_attention_block(params, rng, f"layer{i}", cfg.dim, cfg.heads, cfg.ffn)
    nn.init_layer_norm(params, "ln_out", cfg.dim)
    nn.init_linear(params, rng, "head", cfg.dim, cfg.codebook_size)


# ---------------------------------------------------------------------------
# attention stacks
# ---------------------------------------------------------------------------

def _cond_rows(pt, cfg, conditions):
    """Project raw condition vectors (or learned nulls) to model width."""
    if conditions is None:
        t_vec = ad.reshape(pt["null/t"], (1, cfg.cond_dim))
        rt_vec = ad.reshape(pt["null/rt"], (1, cfg.cond_dim)) if cfg.with_retrieval else None
        rm_vec = ad.reshape(pt["null/rm"], (1, cfg.cond_dim)) if cfg.with_retrieval else None
    else:
        if cfg.with_retrieval:
            t, rt, rm = conditions
            rt_vec = ad.constant(np.asarray(rt).reshape(1, cfg.cond_dim))
            rm_vec = ad.constant(np.asarray(rm).reshape(1, cfg.cond_dim))
        else:
            t = conditions[0] if isinstance(conditions, (tuple, list)) else conditions
            rt_vec = rm_vec = None
        t_vec = ad.constant(np.asarray(t).reshape(1, cfg.cond_dim))
    t_row = nn.linear(pt, "cond/t", t_vec)
    if not cfg.with_retrieval:
        return t_row, None, None
    kr_row = nn.linear(pt, "cond/kr", ad.concat([rm_vec, rt_vec], axis=1))
    vm_row = nn.linear(pt, "cond/rm", rm_vec)
    return t_row, kr_row, vm_row


def _block(pt, name, x, cond_k, cond_v, bias, n_heads):
    """Pre-LN block whose keys/values are extended with condition rows."""
    h = nn.layer_norm(pt, f"{name}/ln1", x)
    q = nn.linear(pt, f"{name}/q", h)
    k = nn.linear(pt, f"{name}/k", ad.concat([h] + cond_k, axis=0))
    v = nn.linear(pt, f"{name}/v", ad.concat([h] + cond_v, axis=0))
    a = nn.attention(q, k, v, n_heads, bias=bias)
    x = ad.add(x, nn.linear(pt, f"{name}/o", a))
    h = nn.layer_norm(pt, f"{name}/ln2", x)
    h = nn.linear(pt, f"{name}/ff2", ad.gelu(nn.linear(pt, f"{name}/ff1", h)))
    return ad.add(x, h)


def _run_stack(pt, cfg, x, conditions, tp, jp):
    pe = pos_encode_2d(tp, jp, cfg.dim)
    if cfg.pos_mode == "embed":
        x = ad.add(x, ad.constant(pe.reshape(tp * jp, cfg.dim)))
        bias = None
    t_row, kr_row, vm_row = _cond_rows(pt, cfg, conditions)
    if cfg.with_retrieval:
        cond_k, cond_v, n_cond = [t_row, kr_row], [t_row, vm_row], 2
    else:
        cond_k, cond_v, n_cond = [t_row], [t_row], 1
    if cfg.pos_mode == "bias":
        bias = positional_bias(pe, n_cond)
    for i in range(cfg.layers):
        x = _block(pt, f"layer{i}", x, cond_k, cond_v, bias, cfg.heads)
    x = nn.layer_norm(pt, "ln_out", x)
    return nn.linear(pt, "head", x)


def masked_forward(pt, cfg: GenTransformerConfig, token_grid: np.ndarray, conditions):
    """Token grid (T', J') of indices (mask = K) -> logits (T'*J', K)."""
    tp, jp = token_grid.shape
    x = nn.embed(pt, "tok", token_grid.ravel())
    return _run_stack(pt, cfg, x, conditions, tp, jp)


def residual_forward(pt, cfg: GenTransformerConfig, grid_vecs: np.ndarray, level: int, condition):
    """Summed code vectors (T', J', d_c) + level index -> logits (T'*J', K)."""
    if not 1 <= level <= cfg.levels:
        raise ValueError(f"residual level must be in [1, {cfg.levels}], got {level}")
    tp, jp, dc = grid_vecs.shape
    x = nn.linear(pt, "in_proj", ad.constant(grid_vecs.reshape(tp * jp, dc)))
    lvl = ad.reshape(nn.embed(pt, "level", np.array([level - 1])), (cfg.dim,))
    x = ad.add(x, lvl)
    return _run_stack(pt, cfg, x, condition, tp, jp)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def mask_schedule(u) -> float:
    """Cosine schedule: fraction of cells masked at progress u."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"schedule input must be in [0, 1], got {u}")
    return float(np.cos(np.pi * (1.0 - u) / 2.0))


@dataclass
class MaskState:
    states: np.ndarray     # (T', J') uint8 cell states
    corrupted: np.ndarray  # (T', J') token grid after corruption
    u: float

    @property
    def selected(self):
        """Cells whose original code the model must reconstruct."""
        return self.states != MASK_STATE_VISIBLE


def mask_2d(grid: np.ndarray, u: float, rng: np.random.Generator, mask_token: int,
            codebook_size: int) -> MaskState:
    """Two-stage 2D masking: whole time columns first, then per-frame cells.

    The masked set then gets the BERT treatment: 80% [MASK], 10% random
    code, 10% left unchanged (still predicted).
    """
    if not 0.0 < u <= 1.0:
        raise ValueError(f"mask progress must be in (0, 1], got {u}")
    tp, jp = grid.shape
    ratio = mask_schedule(u)
    states = np.zeros((tp, jp), dtype=np.uint8)

    n_frames = min(tp, int(np.ceil(ratio * tp)))
    frames = rng.choice(tp, size=n_frames, replace=False)
    masked_frames = set(frames.tolist())
    states[frames, :] = MASK_STATE_MASK
    n_cells = min(jp, int(np.ceil(ratio * jp)))
    for t in range(tp):
        if t in masked_frames:
            continue
        cols = rng.choice(jp, size=n_cells, replace=False)
        states[t, cols] = MASK_STATE_MASK

    corrupted = grid.copy()
    sel = np.argwhere(states == MASK_STATE_MASK)
    for (t, j) in sel:
        r = rng.random()
        if r < 0.8:
            corrupted[t, j] = mask_token
        elif r < 0.9:
            states[t, j] = MASK_STATE_RANDOM
            corrupted[t, j] = int(rng.integers(0, codebook_size))
        else:
            states[t, j] = MASK_STATE_KEEP
    return MaskState(states=states, corrupted=corrupted, u=u)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def masked_loss(pt, cfg: GenTransformerConfig, mask_state: MaskState,
                target_grid: np.ndarray, conditions) -> ad.Tensor:
    """Cross-entropy summed over the selected (masked) cells only."""
    weights = mask_state.selected.ravel().astype(np.float64)
    if weights.sum() == 0:
        raise ValueError("masked loss needs at least one masked cell")
    logits = masked_forward(pt, cfg, mask_state.corrupted, conditions)
    return ad.cross_entropy(logits, target_grid.ravel(), weights=weights)


def residual_loss(pt, cfg: GenTransformerConfig, codebooks: np.ndarray,
                  token_levels: np.ndarray, level: int, condition) -> ad.Tensor:
    """Cross-entropy over all cells of one residual level.

    Input embedding is the sum of the code vectors of levels 0..level-1.
    """
    if level < 1:
        raise ValueError("level 0 belongs to the masked transformer")
    vecs = np.zeros(token_levels.shape[1:] + (codebooks.shape[-1],))
    for l in range(level):
        vecs += codebooks[l][token_levels[l]]
    logits = residual_forward(pt, cfg, vecs, level, condition)
    return ad.cross_entropy(logits, token_levels[level].ravel())


# ---------------------------------------------------------------------------
# guidance and decoding
# ---------------------------------------------------------------------------

def rag_cfg_logits(logits_con: np.ndarray, logits_un: np.ndarray, s: float) -> np.ndarray:
    """(1+s) * conditional - s * unconditional, elementwise."""
    if s < 0:
        raise ValueError("guidance scale must be >= 0")
    logits_con = np.asarray(logits_con)
    logits_un = np.asarray(logits_un)
    if logits_con.shape != logits_un.shape:
        raise ValueError(f"logit shapes differ: {logits_con.shape} vs {logits_un.shape}")
    if s == 0:
        return logits_con.copy()
    return (1.0 + s) * logits_con - s * logits_un


def _softmax_rows(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _sample_rows(logits, temp, rng):
    """Per-row categorical sample (gumbel trick) or argmax at temperature 0."""
    if temp <= 0.0:
        return np.argmax(logits, axis=-1)
    g = rng.gumbel(size=logits.shape)
    return np.argmax(logits / temp + g, axis=-1)


@dataclass
class DecodeTrace:
    kept_per_iter: list
    masked_per_iter: list


def iterative_decode(pt, cfg: GenTransformerConfig, shape, conditions, n_iters: int,
                     guidance_scale: float, rng: np.random.Generator,
                     temperature: float = 1.0, trace: DecodeTrace | None = None) -> np.ndarray:
    """Confidence-based iterative unmasking of the base token layer.

    Starts all-masked; at iteration n (u = n/N) the highest-confidence
    predictions are finalized until ceil((1 - ratio(1-u)) * cells) cells are
    kept. Finalized cells never change; after N iterations nothing is
    masked. Temperature anneals linearly to zero across iterations.
    """
    if n_iters < 1:
        raise ValueError("need at least one decoding iteration")
    tp, jp = shape
    total = tp * jp
    grid = np.full((tp, jp), cfg.mask_token, dtype=np.int64)
    finalized = np.zeros((tp, jp), dtype=bool)
    for n in range(1, n_iters + 1):
        u = n / n_iters
        target_keep = int(np.ceil((1.0 - mask_schedule(1.0 - u)) * total))
        target_keep = max(target_keep, int(finalized.sum()))
        logits_con = masked_forward(pt, cfg, grid, conditions).data
        if guidance_scale > 0:
            logits_un = masked_forward(pt, cfg, grid, None).data
            logits = rag_cfg_logits(logits_con, logits_un, guidance_scale)
        else:
            logits = logits_con
        temp = temperature * (n_iters - n) / (n_iters - 1) if n_iters > 1 else 0.0
        open_cells = np.argwhere(~finalized)
        rows = open_cells[:, 0] * jp + open_cells[:, 1]
        sampled = _sample_rows(logits[rows], temp, rng)
        conf = _softmax_rows(logits[rows])[np.arange(len(rows)), sampled]
        need = target_keep - int(finalized.sum())
        if need > 0:
            order = np.lexsort((rows, -conf))[:need]
            for o in order:
                t, j = open_cells[o]
                grid[t, j] = sampled[o]
                finalized[t, j] = True
        if trace is not None:
            trace.kept_per_iter.append(int(finalized.sum()))
            trace.masked_per_iter.append(int((grid == cfg.mask_token).sum()))
    if not finalized.all():
        raise AssertionError("decoding ended with unfinalized cells")
    return grid


def predict_residual_layers(pt, cfg: GenTransformerConfig, codebooks: np.ndarray,
                            base_grid: np.ndarray, condition) -> np.ndarray:
    """Greedy per-level argmax; each level sees the sum of all previous ones."""
    tp, jp = base_grid.shape
    levels = cfg.levels
    out = np.zeros((levels + 1, tp, jp), dtype=np.int64)
    out[0] = base_grid
    for l in range(1, levels + 1):
        vecs = np.zeros((tp, jp, codebooks.shape[-1]))
        for i in range(l):
            vecs += codebooks[i][out[i]]
        logits = residual_forward(pt, cfg, vecs, l, condition).data
        out[l] = np.argmax(logits, axis=-1).reshape(tp, jp)
    return out


# ---------------------------------------------------------------------------
# trainer states and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class GenModelState:
    cfg: GenTransformerConfig
    params: dict
    opt: ad.Adam
    rng: np.random.Generator
    step: int = 0
    loss_log: list = field(default_factory=list)
    upstream: dict = field(default_factory=dict)  # codec/retriever config hashes


def init_masked_model(cfg: GenTransformerConfig, seed=0, upstream=None) -> GenModelState:
    cfg.validate()
    if not cfg.with_retrieval:
        raise ValueError("the masked model uses retrieval conditioning")
    rng = np.random.default_rng(seed)
    params = init_masked_params(rng, cfg)
    return GenModelState(cfg=cfg, params=params, opt=ad.Adam(params, lr=cfg.lr),
                         rng=rng, upstream=upstream or {})


def init_residual_model(cfg: GenTransformerConfig, seed=0, upstream=None) -> GenModelState:
    cfg.validate()
    if cfg.with_retrieval:
        raise ValueError("the residual model conditions on text only")
    rng = np.random.default_rng(seed)
    params = init_residual_params(rng, cfg)
    return GenModelState(cfg=cfg, params=params, opt=ad.Adam(params, lr=cfg.lr),
                         rng=rng, upstream=upstream or {})


def train_masked_step(state: GenModelState, samples) -> float:
    """samples: list of (token_grid, (t, R_t, R_m)) tuples."""
    cfg = state.cfg
    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    total = 0.0
    for grid, conds in samples:
        u = float(state.rng.uniform(1e-6, 1.0))
        ms = mask_2d(grid, u, state.rng, cfg.mask_token, cfg.codebook_size)
        use_conds = None if state.rng.random() < cfg.cond_dropout else conds
        pt = nn.wrap(state.params, trainable=True)
        loss = masked_loss(pt, cfg, ms, grid, use_conds)
        ad.backward(loss)
        for k in grads:
            if pt[k].grad is not None:
                grads[k] += pt[k].grad
        total += loss.data.item()
    scale = 1.0 / len(samples)
    state.opt.step({k: g * scale for k, g in grads.items()})
    state.step += 1
    state.loss_log.append(total * scale)
    return total * scale


def train_residual_step(state: GenModelState, codebooks, samples) -> float:
    """samples: list of (token_levels (L+1, T', J'), t) tuples."""
    cfg = state.cfg
    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    total = 0.0
    for token_levels, t_vec in samples:
        l = int(state.rng.integers(1, cfg.levels + 1))
        use_cond = None if state.rng.random() < cfg.cond_dropout else t_vec
        pt = nn.wrap(state.params, trainable=True)
        loss = residual_loss(pt, cfg, codebooks, token_levels, l, use_cond)
        ad.backward(loss)
        for k in grads:
            if pt[k].grad is not None:
                grads[k] += pt[k].grad
        total += loss.data.item()
    scale = 1.0 / len(samples)
    state.opt.step({k: g * scale for k, g in grads.items()})
    state.step += 1
    state.loss_log.append(total * scale)
    return total * scale


def save_gen_model(state: GenModelState, path, kind):
    cfg_dict = asdict(state.cfg)
    header = {
        "kind": kind,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "upstream": state.upstream,
        "step": state.step,
        "rng": rng_state(state.rng),
        "adam_t": state.opt.t,
        "loss_log": state.loss_log[-200:],
    }
    blobs = {f"params/{k}": v for k, v in state.params.items()}
    blobs.update(state.opt.state_arrays())
    save_container(path, kind, header, blobs)


def load_gen_model(path, kind) -> GenModelState:
    header, blobs = load_container(path, kind)
    cfg = GenTransformerConfig(**header["config"])
    params = {k[len("params/"):]: np.array(v) for k, v in blobs.items() if k.startswith("params/")}
    opt = ad.Adam(params, lr=cfg.lr)
    opt.load_state_arrays(blobs, header["adam_t"])
    return GenModelState(
        cfg=cfg, params=params, opt=opt,
        rng=restore_rng(header["rng"]),
        step=header["step"],
        loss_log=list(header["loss_log"]),
        upstream=dict(header["upstream"]),
    )
