"""2D residual VQ-VAE over a (time x body-part) latent grid.

The encoder projects per-part joint features into a channel grid, applies
strided temporal convolutions (replicate padding keeps constant inputs
constant), and emits a T' x J' map of code-dim latents. Residual
quantization runs L+1 codebook levels: each level snaps the remaining
residual to its nearest code, and the quantized sum telescopes back to the
latent up to float addition. The decoder mirrors the encoder with
repeat-upsampling convolutions. Training is L1 reconstruction plus a
commitment term with the straight-through estimator; codebooks follow
batch assignments by EMA with dead-code reinitialization.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import nn
from .container import config_hash, load_container, rng_state, restore_rng, save_container
from .motion import FEATS_PER_JOINT, Skeleton

import json
import struct
import zlib

TOKEN_MAGIC = b"RMTOKN1"


@dataclass
class RvqConfig:
    levels: int = 5             # residual levels beyond the base layer
    codebook_size: int = 256
    code_dim: int = 32          # desk-scale (reference codebooks use 1024)
    temporal_stride: int = 4
    channels: int = 32
    gamma: float = 0.25         # commitment weight; desk-scale choice
    ema_decay: float = 0.99
    commit_base: bool = False   # include the level-0 term in the commitment
    quant_dropout: float = 0.0  # reserved; must stay 0
    lr: float = 2e-4
    batch_size: int = 8
    fps: float = 20.0           # frame rate; ties decoded velocities to positions
    derive_velocity: bool = True  # decoder emits velocities as position differences

    def validate(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        s = self.temporal_stride
        if s < 1 or (s & (s - 1)) != 0:
            raise ValueError("temporal_stride must be a power of two")
        if self.quant_dropout != 0.0:
            raise ValueError("quant_dropout is reserved and must be 0")
        return self


def _check_parts_contiguous(skeleton: Skeleton):
    flat = [j for p in skeleton.part_names() for j in skeleton.parts[p]]
    if flat != list(range(skeleton.n_joints)):
        raise ValueError("codec requires parts to tile the joint range in order")


# ---------------------------------------------------------------------------
# conv building blocks (composed from verified tape ops)
# ---------------------------------------------------------------------------

def _replicate_pad(x, pad_t, pad_j):
    """Edge-replicate padding on the (time, part) axes of a (T, J, C) tensor."""
    T = x.shape[0]
    pieces = [ad.tslice(x, (slice(0, 1),))] * pad_t[0] + [x] + \
             [ad.tslice(x, (slice(T - 1, T),))] * pad_t[1]
    x = ad.concat(pieces, axis=0) if pad_t != (0, 0) else x
    J = x.shape[1]
    pieces = [ad.tslice(x, (slice(None), slice(0, 1)))] * pad_j[0] + [x] + \
             [ad.tslice(x, (slice(None), slice(J - 1, J)))] * pad_j[1]
    return ad.concat(pieces, axis=1) if pad_j != (0, 0) else x


def init_conv(params, rng, name, kt, kj, c_in, c_out):
    std = np.sqrt(2.0 / (kt * kj * c_in + c_out))
    for a in range(kt):
        for b in range(kj):
            params[f"{name}/W{a}{b}"] = rng.normal(0.0, std, size=(c_in, c_out))
    params[f"{name}/b"] = np.zeros(c_out)


def conv2d(pt, name, x, kt, kj, stride_t):
    """(T, J, C_in) -> (T/stride_t, J, C_out); replicate 'same' padding."""
    T, J, C = x.shape
    pad_t = (kt - stride_t) // 2, kt - stride_t - (kt - stride_t) // 2
    pad_j = ((kj - 1) // 2, kj - 1 - (kj - 1) // 2)
    xp = _replicate_pad(x, pad_t, pad_j)
    out_t = T // stride_t
    out = None
    for a in range(kt):
        for b in range(kj):
            xs = ad.tslice(xp, (slice(a, a + stride_t * (out_t - 1) + 1, stride_t),
                                slice(b, b + J)))
            term = ad.matmul(ad.reshape(xs, (out_t * J, C)), pt[f"{name}/W{a}{b}"])
            out = term if out is None else ad.add(out, term)
    out = ad.add(out, pt[f"{name}/b"])
    c_out = pt[f"{name}/b"].shape[0]
    return ad.reshape(out, (out_t, J, c_out))


def upsample_time(x):
    """(T, J, C) -> (2T, J, C) by frame repetition."""
    T, J, C = x.shape
    x = ad.reshape(x, (T, 1, J, C))
    x = ad.concat([x, x], axis=1)
    return ad.reshape(x, (2 * T, J, C))


# ---------------------------------------------------------------------------
# codec parameters and forward passes
# ---------------------------------------------------------------------------

def _n_blocks(stride):
    return int(np.log2(stride)) if stride > 1 else 0


def init_codec_params(params, rng, cfg: RvqConfig, skeleton: Skeleton):
    _check_parts_contiguous(skeleton)
    C = cfg.channels
    for pname in skeleton.part_names():
        d_in = FEATS_PER_JOINT * skeleton.part_joint_count(pname)
        nn.init_linear(params, rng, f"enc/stem/{pname}", d_in, C)
    init_conv(params, rng, "enc/conv0", 3, 3, C, C)
    for i in range(_n_blocks(cfg.temporal_stride)):
        init_conv(params, rng, f"enc/block{i}", 4, 3, C, C)
    nn.init_linear(params, rng, f"enc/proj", C, cfg.code_dim)
    nn.init_linear(params, rng, f"dec/proj", cfg.code_dim, C)
    init_conv(params, rng, "dec/conv0", 3, 3, C, C)
    for i in range(_n_blocks(cfg.temporal_stride)):
        init_conv(params, rng, f"dec/block{i}", 3, 3, C, C)
    for pname in skeleton.part_names():
        d_out = FEATS_PER_JOINT * skeleton.part_joint_count(pname)
        nn.init_linear(params, rng, f"dec/head/{pname}", C, d_out)


def pad_frames(features: np.ndarray, stride: int) -> np.ndarray:
    """Repeat the last frame until T divides the temporal stride."""
    T = features.shape[0]
    if T < stride:
        raise ValueError(f"motion too short: {T} frames < stride {stride}")
    rem = T % stride
    if rem == 0:
        return features
    pad = np.repeat(features[-1:], stride - rem, axis=0)
    return np.concatenate([features, pad], axis=0)


def encode(pt, cfg: RvqConfig, skeleton: Skeleton, features: np.ndarray) -> ad.Tensor:
    """Motion features (T_padded, 12*J) -> latent grid (T', J', code_dim)."""
    T = features.shape[0]
    if T % cfg.temporal_stride != 0:
        raise ValueError("frame count must be a multiple of the temporal stride")
    cols = features.reshape(T, skeleton.n_joints, FEATS_PER_JOINT)
    stacks = []
    o = 0
    for pname in skeleton.part_names():
        nj = skeleton.part_joint_count(pname)
        xp = ad.constant(np.ascontiguousarray(cols[:, o:o + nj, :]).reshape(T, nj * FEATS_PER_JOINT))
        h = nn.linear(pt, f"enc/stem/{pname}", xp)
        stacks.append(ad.reshape(h, (T, 1, cfg.channels)))
        o += nj
    x = ad.gelu(ad.concat(stacks, axis=1))
    x = ad.gelu(conv2d(pt, "enc/conv0", x, 3, 3, 1))
    for i in range(_n_blocks(cfg.temporal_stride)):
        x = ad.gelu(conv2d(pt, f"enc/block{i}", x, 4, 3, 2))
    tp, jp = x.shape[0], x.shape[1]
    y = nn.linear(pt, "enc/proj", ad.reshape(x, (tp * jp, cfg.channels)))
    return ad.reshape(y, (tp, jp, cfg.code_dim))


def decode(pt, cfg: RvqConfig, skeleton: Skeleton, grid, vel=None) -> ad.Tensor:
    """Latent grid (T', J', code_dim) -> motion features (T'*stride, 12*J).

    With derive_velocity, the velocity columns are replaced by scaled first
    differences of the decoded positions (`vel` carries the per-joint scale
    and offset in the codec's working feature space).
    """
    grid = ad.constant(grid)
    tp, jp, dc = grid.shape
    if dc != cfg.code_dim:
        raise ValueError(f"grid code dim {dc} != configured {cfg.code_dim}")
    x = nn.linear(pt, "dec/proj", ad.reshape(grid, (tp * jp, dc)))
    x = ad.gelu(ad.reshape(x, (tp, jp, cfg.channels)))
    x = ad.gelu(conv2d(pt, "dec/conv0", x, 3, 3, 1))
    for i in range(_n_blocks(cfg.temporal_stride)):
        x = ad.gelu(conv2d(pt, f"dec/block{i}", upsample_time(x), 3, 3, 1))
    T = x.shape[0]
    outs = []
    for j, pname in enumerate(skeleton.part_names()):
        xs = ad.reshape(ad.tslice(x, (slice(None), slice(j, j + 1))), (T, cfg.channels))
        outs.append(nn.linear(pt, f"dec/head/{pname}", xs))
    out = ad.concat(outs, axis=1)
    if not cfg.derive_velocity:
        return out
    J = skeleton.n_joints
    if vel is None:
        scale, offset = np.full((J, 3), cfg.fps), np.zeros((J, 3))
    else:
        scale, offset = vel
    x3 = ad.reshape(out, (T, J, FEATS_PER_JOINT))
    pos = ad.tslice(x3, (slice(None), slice(None), slice(0, 3)))
    rot = ad.tslice(x3, (slice(None), slice(None), slice(6, 12)))
    dpos = ad.sub(ad.tslice(pos, (slice(1, T),)), ad.tslice(pos, (slice(0, T - 1),)))
    dpos = ad.concat([ad.constant(np.zeros((1, J, 3))), dpos], axis=0)
    vcols = ad.add(ad.mul(dpos, ad.constant(scale)), ad.constant(offset))
    merged = ad.concat([pos, vcols, rot], axis=2)
    return ad.reshape(merged, (T, J * FEATS_PER_JOINT))


# ---------------------------------------------------------------------------
# residual quantization
# ---------------------------------------------------------------------------

def nearest_codes(codebook: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Nearest code per row by squared distance; ties go to the lowest index."""
    d2 = (np.sum(vecs * vecs, axis=1, keepdims=True)
          - 2.0 * vecs @ codebook.T
          + np.sum(codebook * codebook, axis=1)[None, :])
    return np.argmin(d2, axis=1)


@dataclass
class QuantizeResult:
    indices: np.ndarray       # (L+1, T', J') int
    level_values: np.ndarray  # (L+1, T', J', d_c): y^l per level
    cumulative: np.ndarray    # (L+1, T', J', d_c): sum_{i<=l} y^i
    residuals_in: np.ndarray  # (L+1, T', J', d_c): r^l fed to each level
    final_residual: np.ndarray  # r^{L+1}

    @property
    def quantized_sum(self):
        return self.cumulative[-1]


def rvq_quantize(codebooks: np.ndarray, y_hat: np.ndarray) -> QuantizeResult:
    """Run the residual recurrence y^l = Q^l(r^l), r^{l+1} = r^l - y^l."""
    n_levels = codebooks.shape[0]
    tp, jp, dc = y_hat.shape
    flat = y_hat.reshape(tp * jp, dc)
    r = flat.copy()
    idx = np.zeros((n_levels, tp * jp), dtype=np.int64)
    vals = np.zeros((n_levels, tp * jp, dc))
    rins = np.zeros((n_levels, tp * jp, dc))
    for l in range(n_levels):
        rins[l] = r
        idx[l] = nearest_codes(codebooks[l], r)
        vals[l] = codebooks[l][idx[l]]
        r = r - vals[l]
    cum = np.cumsum(vals, axis=0)
    return QuantizeResult(
        indices=idx.reshape(n_levels, tp, jp),
        level_values=vals.reshape(n_levels, tp, jp, dc),
        cumulative=cum.reshape(n_levels, tp, jp, dc),
        residuals_in=rins.reshape(n_levels, tp, jp, dc),
        final_residual=r.reshape(tp, jp, dc),
    )


def rvq_loss_terms(pt, cfg: RvqConfig, skeleton: Skeleton, features: np.ndarray,
                   frozen: QuantizeResult | None = None, codebooks=None, vel=None):
    """Build the training objective for one motion.

    Returns (loss, y_hat tensor, QuantizeResult). With `frozen`, the code
    assignments are taken as given (the straight-through path is then a
    smooth function of the encoder parameters, which is what finite
    differences can check).
    """
    padded = pad_frames(features, cfg.temporal_stride)
    y_hat = encode(pt, cfg, skeleton, padded)
    q = frozen if frozen is not None else rvq_quantize(codebooks, y_hat.data)
    # straight-through: decode sees the quantized sum, gradients see y_hat
    delta = q.quantized_sum - y_hat.data if frozen is None else q.quantized_sum - q.residuals_in[0]
    dec_in = ad.add(y_hat, ad.constant(delta))
    recon = decode(pt, cfg, skeleton, dec_in, vel=vel)
    loss = ad.l1_distance(recon, ad.constant(padded))
    lo = 0 if cfg.commit_base else 1
    for l in range(lo, q.indices.shape[0]):
        # r^l - sg[y^l] == y_hat - cumulative_l with codes held constant
        loss = ad.add(loss, ad.scale(ad.squared_l2(y_hat, ad.constant(q.cumulative[l])), cfg.gamma))
    return loss, y_hat, q


# ---------------------------------------------------------------------------
# codebook maintenance (EMA + dead-code reinit)
# ---------------------------------------------------------------------------

def codebook_maintain(codebooks, counts_ema, sums_ema, quantize_results, decay, rng):
    """EMA update toward assigned latents; revive codes whose usage EMA < 1.

    `quantize_results` is a list of QuantizeResult from the current batch.
    decay >= 1 freezes everything. Mutates and returns the three arrays.
    """
    if decay >= 1.0 or not quantize_results:
        return codebooks, counts_ema, sums_ema
    n_levels, K, dc = codebooks.shape
    for l in range(n_levels):
        idx = np.concatenate([q.indices[l].ravel() for q in quantize_results])
        rin = np.concatenate([q.residuals_in[l].reshape(-1, dc) for q in quantize_results])
        counts = np.bincount(idx, minlength=K).astype(np.float64)
        sums = np.zeros((K, dc))
        np.add.at(sums, idx, rin)
        counts_ema[l] = decay * counts_ema[l] + (1.0 - decay) * counts
        sums_ema[l] = decay * sums_ema[l] + (1.0 - decay) * sums
        active = counts_ema[l] >= 1e-12
        codebooks[l][active] = sums_ema[l][active] / counts_ema[l][active, None]
        dead = counts_ema[l] < 1.0
        if np.any(dead):
            pick = rng.integers(0, rin.shape[0], size=int(dead.sum()))
            codebooks[l][dead] = rin[pick]
            counts_ema[l][dead] = 1.0
            sums_ema[l][dead] = codebooks[l][dead]
    return codebooks, counts_ema, sums_ema


# ---------------------------------------------------------------------------
# trainer state
# ---------------------------------------------------------------------------

@dataclass
class CodecState:
    cfg: RvqConfig
    skeleton: Skeleton
    params: dict
    codebooks: np.ndarray     # (L+1, K, d_c)
    counts_ema: np.ndarray
    sums_ema: np.ndarray
    opt: ad.Adam
    rng: np.random.Generator
    step: int = 0
    loss_log: list = field(default_factory=list)
    feat_mean: np.ndarray | None = None  # per-column normalization, fitted once
    feat_std: np.ndarray | None = None

    def normalize(self, feats):
        if self.feat_mean is None:
            raise ValueError("codec normalizer not fitted; call fit_normalizer first")
        return (feats - self.feat_mean) / self.feat_std

    def denormalize(self, feats):
        return feats * self.feat_std + self.feat_mean

    def vel_transform(self):
        """Per-joint velocity derivation constants in the working space."""
        J = self.skeleton.n_joints
        if self.feat_mean is None:
            return np.full((J, 3), self.cfg.fps), np.zeros((J, 3))
        gm = self.feat_mean.reshape(J, FEATS_PER_JOINT)
        gs = self.feat_std.reshape(J, FEATS_PER_JOINT)
        scale = self.cfg.fps * gs[:, 0:3] / gs[:, 3:6]
        offset = -gm[:, 3:6] / gs[:, 3:6]
        return scale, offset


def fit_normalizer(state: CodecState, corpus, split="train"):
    """Per-column mean/std over the split; zero-variance columns pass through."""
    rows = np.concatenate([corpus.records[i].features for i in corpus.splits[split]], axis=0)
    state.feat_mean = rows.mean(axis=0)
    state.feat_std = np.maximum(rows.std(axis=0), 1e-6)
    return state


def init_codec(skeleton: Skeleton, cfg: RvqConfig, seed=0) -> CodecState:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    init_codec_params(params, rng, cfg, skeleton)
    n_levels = cfg.levels + 1
    codebooks = rng.normal(0.0, 0.1, size=(n_levels, cfg.codebook_size, cfg.code_dim))
    return CodecState(
        cfg=cfg,
        skeleton=skeleton,
        params=params,
        codebooks=codebooks,
        counts_ema=np.zeros((n_levels, cfg.codebook_size)),
        sums_ema=np.zeros((n_levels, cfg.codebook_size, cfg.code_dim)),
        opt=ad.Adam(params, lr=cfg.lr),
        rng=rng,
        step=0,
    )


def train_rvq_step(state: CodecState, batch) -> float:
    """One optimizer step on encoder/decoder, then codebook maintenance."""
    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    q_results = []
    total = 0.0
    vel = state.vel_transform()
    for m in batch:
        feats = m.features if hasattr(m, "features") else m
        if state.feat_mean is not None:
            feats = state.normalize(feats)
        pt = nn.wrap(state.params, trainable=True)
        loss, _, q = rvq_loss_terms(pt, state.cfg, state.skeleton, feats,
                                    codebooks=state.codebooks, vel=vel)
        ad.backward(loss)
        for k in grads:
            if pt[k].grad is not None:
                grads[k] += pt[k].grad
        q_results.append(q)
        total += loss.data.item()
    scale = 1.0 / len(batch)
    state.opt.step({k: g * scale for k, g in grads.items()})
    codebook_maintain(state.codebooks, state.counts_ema, state.sums_ema,
                      q_results, state.cfg.ema_decay, state.rng)
    state.step += 1
    state.loss_log.append(total * scale)
    return total * scale


def train_codec(state: CodecState, corpus, steps) -> CodecState:
    if state.feat_mean is None:
        fit_normalizer(state, corpus)
    train_ids = list(corpus.splits["train"])
    for _ in range(steps):
        pick = state.rng.choice(len(train_ids), size=min(state.cfg.batch_size, len(train_ids)),
                                replace=False)
        batch = [corpus.records[train_ids[i]] for i in pick]
        train_rvq_step(state, batch)
    return state


# ---------------------------------------------------------------------------
# tokenize / detokenize
# ---------------------------------------------------------------------------

def tokenize_motion(state: CodecState, features: np.ndarray):
    """Motion features -> (indices (L+1, T', J'), original frame count)."""
    if state.feat_mean is not None:
        features = state.normalize(features)
    padded = pad_frames(features, state.cfg.temporal_stride)
    pt = nn.wrap(state.params, trainable=False)
    y_hat = encode(pt, state.cfg, state.skeleton, padded).data
    q = rvq_quantize(state.codebooks, y_hat)
    return q.indices, features.shape[0]


def grid_from_indices(state: CodecState, indices: np.ndarray) -> np.ndarray:
    """Sum of code vectors across levels for each cell."""
    n_levels, tp, jp = indices.shape
    out = np.zeros((tp, jp, state.cfg.code_dim))
    for l in range(n_levels):
        out += state.codebooks[l][indices[l]]
    return out


def detokenize(state: CodecState, indices: np.ndarray, orig_frames: int) -> np.ndarray:
    pt = nn.wrap(state.params, trainable=False)
    recon = decode(pt, state.cfg, state.skeleton, grid_from_indices(state, indices),
                   vel=state.vel_transform()).data
    if state.feat_mean is not None:
        recon = state.denormalize(recon)
    return recon[:orig_frames]


def reconstruct(state: CodecState, features: np.ndarray) -> np.ndarray:
    idx, T = tokenize_motion(state, features)
    return detokenize(state, idx, T)


# ---------------------------------------------------------------------------
# token files (.rmt): level-major u16 grids
# ---------------------------------------------------------------------------

def save_tokens(path, indices: np.ndarray, orig_frames: int, codec_hash: str, meta=None):
    if indices.max() > np.iinfo(np.uint16).max:
        raise ValueError("token index exceeds u16 range")
    header = {"levels": int(indices.shape[0]), "tp": int(indices.shape[1]),
              "jp": int(indices.shape[2]), "orig_frames": int(orig_frames),
              "codec_hash": codec_hash, "meta": meta or {}}
    hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = TOKEN_MAGIC + struct.pack("<Q", len(hj)) + hj + \
        indices.astype("<u2").tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_tokens(path):
    from .container import ContainerError

    raw = open(path, "rb").read()
    if len(raw) < len(TOKEN_MAGIC) + 12:
        raise ContainerError(f"{path}: truncated token file")
    payload, crc_bytes = raw[:-4], raw[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise ContainerError(f"{path}: checksum mismatch")
    if payload[:len(TOKEN_MAGIC)] != TOKEN_MAGIC:
        raise ContainerError(f"{path}: bad magic")
    off = len(TOKEN_MAGIC)
    (hlen,) = struct.unpack("<Q", payload[off:off + 8])
    off += 8
    header = json.loads(payload[off:off + hlen].decode())
    off += hlen
    shape = (header["levels"], header["tp"], header["jp"])
    idx = np.frombuffer(payload[off:], dtype="<u2").reshape(shape).astype(np.int64)
    return idx, header


# ---------------------------------------------------------------------------
# checkpointing (.rmq)
# ---------------------------------------------------------------------------

def save_codec(state: CodecState, path):
    cfg_dict = asdict(state.cfg)
    header = {
        "kind": "codec",
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "skeleton": state.skeleton.to_header(),
        "step": state.step,
        "rng": rng_state(state.rng),
        "adam_t": state.opt.t,
        "loss_log": state.loss_log[-200:],
    }
    blobs = {f"params/{k}": v for k, v in state.params.items()}
    blobs.update(state.opt.state_arrays())
    blobs["codebooks"] = state.codebooks
    blobs["counts_ema"] = state.counts_ema
    blobs["sums_ema"] = state.sums_ema
    if state.feat_mean is not None:
        blobs["feat_mean"] = state.feat_mean
        blobs["feat_std"] = state.feat_std
    save_container(path, "codec", header, blobs)


def load_codec(path) -> CodecState:
    header, blobs = load_container(path, "codec")
    cfg = RvqConfig(**header["config"])
    params = {k[len("params/"):]: np.array(v) for k, v in blobs.items() if k.startswith("params/")}
    opt = ad.Adam(params, lr=cfg.lr)
    opt.load_state_arrays(blobs, header["adam_t"])
    return CodecState(
        cfg=cfg,
        skeleton=Skeleton.from_header(header["skeleton"]),
        params=params,
        codebooks=np.array(blobs["codebooks"]),
        counts_ema=np.array(blobs["counts_ema"]),
        sums_ema=np.array(blobs["sums_ema"]),
        opt=opt,
        rng=restore_rng(header["rng"]),
        step=header["step"],
        loss_log=list(header["loss_log"]),
        feat_mean=blobs.get("feat_mean"),
        feat_std=blobs.get("feat_std"),
    )


def codec_hash(path_or_state) -> str:
    if isinstance(path_or_state, CodecState):
        return config_hash(asdict(path_or_state.cfg))
    header, _ = load_container(path_or_state, "codec")
    return header["config_hash"]
