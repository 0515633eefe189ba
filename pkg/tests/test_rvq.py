import numpy as np
import pytest

from remomask import autodiff as ad
from remomask import motion as md
from remomask import nn
from remomask import rvq
from remomask.container import ContainerError


def tiny_skeleton():
    joints = ("a", "b")
    parts = {"p0": (0,), "p1": (1,)}
    return md.Skeleton(joints, parts, ((0, 1),), (), np.zeros((2, 3)))


def tiny_cfg(**kw):
    base = dict(levels=1, codebook_size=3, code_dim=2, temporal_stride=2, channels=3,
                gamma=0.25, batch_size=2)
    base.update(kw)
    return rvq.RvqConfig(**base)


def bootstrap_codebooks(rng, n_levels, K, d, n_samples=4000):
    """Codebooks drawn from the residual distribution of each level."""
    data = rng.normal(size=(n_samples, d))
    books = []
    r = data
    for _ in range(n_levels):
        book = r[rng.choice(len(r), size=K, replace=False)]
        books.append(book)
        idx = rvq.nearest_codes(book, r)
        r = r - book[idx]
    return np.stack(books)


# ---------------------------------------------------------------------------
# quantizer
# ---------------------------------------------------------------------------

def test_exact_code_zero_residual():
    books = np.array([[[0.0], [4.0]]])
    q = rvq.rvq_quantize(books, np.full((1, 1, 1), 4.0))
    assert q.indices[0, 0, 0] == 1
    assert q.final_residual[0, 0, 0] == 0.0


def test_hand_enumerated_two_level_example():
    books = np.array([[[0.0], [4.0]], [[0.0], [1.0]]])
    q = rvq.rvq_quantize(books, np.full((1, 1, 1), 4.9))
    assert tuple(q.indices[:, 0, 0]) == (1, 1)
    assert q.quantized_sum[0, 0, 0] == 5.0
    assert abs(q.final_residual[0, 0, 0] - (-0.1)) < 1e-12


def test_tie_breaks_to_lowest_index():
    books = np.array([[[1.0], [-1.0], [1.0]]])
    q = rvq.rvq_quantize(books, np.zeros((1, 1, 1)))
    assert q.indices[0, 0, 0] == 0


def test_telescoping_identity_many_levels():
    rng = np.random.default_rng(0)
    for L in (1, 3, 5):
        books = rng.normal(size=(L + 1, 8, 4))
        y = rng.normal(size=(5, 3, 4)) * 3.0
        q = rvq.rvq_quantize(books, y)
        recon = q.quantized_sum + q.final_residual
        assert np.max(np.abs(y - recon)) < 1e-12


def test_quantization_idempotent_at_level_zero():
    rng = np.random.default_rng(1)
    books = rng.normal(size=(1, 6, 3))
    y = books[0][np.array([2, 5, 0])].reshape(3, 1, 3)
    q = rvq.rvq_quantize(books, y)
    assert np.array_equal(q.indices[0].ravel(), [2, 5, 0])
    assert np.max(np.abs(q.final_residual)) == 0.0


def test_nearest_code_matches_brute_force():
    rng = np.random.default_rng(2)
    book = rng.normal(size=(17, 5))
    vecs = rng.normal(size=(40, 5))
    fast = rvq.nearest_codes(book, vecs)
    for i, v in enumerate(vecs):
        d = [float(np.sum((v - c) ** 2)) for c in book]
        assert fast[i] == int(np.argmin(d))


def test_residual_energy_nonincreasing():
    rng = np.random.default_rng(3)
    books = bootstrap_codebooks(rng, 4, 64, 4)
    ok, total = 0, 0
    for _ in range(100):
        y = rng.normal(size=(4, 3, 4))
        q = rvq.rvq_quantize(books, y)
        e_prev = np.sum(q.residuals_in ** 2, axis=-1)     # energy entering each level
        e_next = np.concatenate([e_prev[1:], np.sum(q.final_residual ** 2, axis=-1)[None]])
        ok += int(np.sum(e_next <= e_prev + 1e-12))
        total += e_prev.size
    assert ok / total >= 0.99


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def test_encode_shape_and_stride_arithmetic():
    sk = md.default_skeleton()
    cfg = rvq.RvqConfig(levels=2, codebook_size=8, code_dim=6, temporal_stride=4, channels=8)
    state = rvq.init_codec(sk, cfg, seed=0)
    feats = np.random.default_rng(0).normal(size=(64, sk.n_joints * 12))
    pt = nn.wrap(state.params, trainable=False)
    y = rvq.encode(pt, cfg, sk, feats)
    assert y.shape == (16, 6, 6)


def test_constant_input_gives_temporally_constant_latents():
    sk = md.default_skeleton()
    cfg = rvq.RvqConfig(levels=1, codebook_size=8, code_dim=4, temporal_stride=4, channels=8)
    state = rvq.init_codec(sk, cfg, seed=1)
    row = np.random.default_rng(1).normal(size=(1, sk.n_joints * 12))
    feats = np.repeat(row, 32, axis=0)
    pt = nn.wrap(state.params, trainable=False)
    y = rvq.encode(pt, cfg, sk, feats).data
    assert np.max(np.abs(y - y[0:1])) == 0.0


def test_too_short_motion_rejected():
    sk = md.default_skeleton()
    with pytest.raises(ValueError, match="too short"):
        rvq.pad_frames(np.zeros((2, sk.n_joints * 12)), 4)


def test_decode_shape_and_determinism():
    sk = md.default_skeleton()
    cfg = rvq.RvqConfig(levels=1, codebook_size=8, code_dim=4, temporal_stride=4, channels=8)
    state = rvq.init_codec(sk, cfg, seed=2)
    grid = np.random.default_rng(3).normal(size=(6, 6, 4))
    pt = nn.wrap(state.params, trainable=False)
    a = rvq.decode(pt, cfg, sk, grid).data
    b = rvq.decode(pt, cfg, sk, grid).data
    assert a.shape == (24, sk.n_joints * 12)
    assert a.tobytes() == b.tobytes()


def test_decode_bad_grid_shape():
    sk = md.default_skeleton()
    cfg = rvq.RvqConfig(levels=1, codebook_size=8, code_dim=4, temporal_stride=4, channels=8)
    state = rvq.init_codec(sk, cfg, seed=2)
    pt = nn.wrap(state.params, trainable=False)
    with pytest.raises(ValueError):
        rvq.decode(pt, cfg, sk, np.zeros((6, 6, 9)))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_loss_value_matches_numpy_oracle():
    sk = tiny_skeleton()
    cfg = tiny_cfg(levels=2, gamma=0.37)
    state = rvq.init_codec(sk, cfg, seed=4)
    feats = np.random.default_rng(5).normal(size=(6, 24))
    pt = nn.wrap(state.params, trainable=False)
    loss, y_hat, q = rvq.rvq_loss_terms(pt, cfg, sk, feats, codebooks=state.codebooks)
    recon = rvq.decode(pt, cfg, sk, q.quantized_sum).data
    want = np.sum(np.abs(recon - rvq.pad_frames(feats, cfg.temporal_stride)))
    for l in range(1, 3):
        want += cfg.gamma * np.sum((y_hat.data - q.cumulative[l]) ** 2)
    assert abs(loss.data.item() - want) < 1e-9


def test_gamma_zero_loss_is_pure_l1():
    sk = tiny_skeleton()
    cfg = tiny_cfg(gamma=0.0)  # below init_codec's validated floor, fine for the formula
    rng = np.random.default_rng(6)
    params = {}
    rvq.init_codec_params(params, rng, cfg, sk)
    books = rng.normal(size=(2, 3, 2))
    feats = rng.normal(size=(4, 24))
    pt = nn.wrap(params, trainable=False)
    loss, _, q = rvq.rvq_loss_terms(pt, cfg, sk, feats, codebooks=books)
    recon = rvq.decode(pt, cfg, sk, q.quantized_sum).data
    assert loss.data.item() == np.sum(np.abs(recon - feats))


def test_perfect_reconstruction_zero_loss():
    # formula-level check: identical reconstruction and zero commitment gap
    a = ad.constant(np.ones((3, 4)))
    loss = ad.add(ad.l1_distance(a, ad.constant(np.ones((3, 4)))),
                  ad.scale(ad.squared_l2(a, ad.constant(np.ones((3, 4)))), 0.25))
    assert loss.data.item() == 0.0


def test_straight_through_gradient_matches_fd():
    sk = tiny_skeleton()
    # stride 1 with an odd frame count: the L1 sign sums per head-bias
    # coordinate cannot cancel to an exact zero, keeping FD meaningful
    cfg = tiny_cfg(levels=1, temporal_stride=1)
    state = rvq.init_codec(sk, cfg, seed=7)
    feats = np.random.default_rng(8).normal(size=(7, 24))
    # freeze assignments at the base point
    pt0 = nn.wrap(state.params, trainable=False)
    _, y0, q0 = rvq.rvq_loss_terms(pt0, cfg, sk, feats, codebooks=state.codebooks)

    def fn(pt, it):
        loss, _, _ = rvq.rvq_loss_terms(pt, cfg, sk, feats, frozen=q0)
        return {"loss": loss}

    g = ad.Graph(fn, state.params)
    assert g.finite_difference_check(eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# codebook maintenance
# ---------------------------------------------------------------------------

def fake_qresult(indices, rin):
    L, tp, jp = indices.shape
    d = rin.shape[-1]
    zeros = np.zeros((L, tp, jp, d))
    return rvq.QuantizeResult(indices=indices, level_values=zeros, cumulative=zeros,
                              residuals_in=rin, final_residual=np.zeros((tp, jp, d)))


def test_single_hot_code_starves_the_rest():
    rng = np.random.default_rng(9)
    K, d = 5, 2
    books = rng.normal(size=(1, K, d))
    counts = np.zeros((1, K))
    sums = np.zeros((1, K, d))
    target = np.array([3.0, -1.0])
    for _ in range(10):
        idx = np.zeros((1, 2, 2), dtype=np.int64)
        rin = np.tile(target, (1, 2, 2, 1))
        rvq.codebook_maintain(books, counts, sums, [fake_qresult(idx, rin)], 0.9, rng)
    # code 0 follows its assignments; the rest were revived from batch latents
    assert np.allclose(books[0][0], target, atol=1e-6)
    assert counts[0][0] > 1.0
    for k in range(1, K):
        assert np.allclose(books[0][k], target)  # reinit draws only batch latents


def test_decay_one_freezes_codes():
    rng = np.random.default_rng(10)
    books = rng.normal(size=(1, 4, 2))
    before = books.copy()
    counts = np.zeros((1, 4))
    sums = np.zeros((1, 4, 2))
    idx = np.zeros((1, 1, 1), dtype=np.int64)
    rin = rng.normal(size=(1, 1, 1, 2))
    rvq.codebook_maintain(books, counts, sums, [fake_qresult(idx, rin)], 1.0, rng)
    assert np.array_equal(books, before)


def test_empty_batch_is_noop():
    rng = np.random.default_rng(11)
    books = rng.normal(size=(1, 4, 2))
    before = books.copy()
    rvq.codebook_maintain(books, np.zeros((1, 4)), np.zeros((1, 4, 2)), [], 0.9, rng)
    assert np.array_equal(books, before)


# ---------------------------------------------------------------------------
# training and io
# ---------------------------------------------------------------------------

def test_training_reduces_loss_and_keeps_telescoping():
    corpus = md.generate_corpus(per_class=3, seed=0)
    cfg = rvq.RvqConfig(levels=2, codebook_size=32, code_dim=8, temporal_stride=4,
                        channels=12, lr=2e-3, batch_size=6)
    state = rvq.init_codec(corpus.skeleton, cfg, seed=1)
    rvq.train_codec(state, corpus, steps=60)
    assert np.mean(state.loss_log[-5:]) < 0.75 * np.mean(state.loss_log[:5])
    m = corpus.records[0]
    pt = nn.wrap(state.params, trainable=False)
    y = rvq.encode(pt, cfg, corpus.skeleton, rvq.pad_frames(m.features, 4)).data
    q = rvq.rvq_quantize(state.codebooks, y)
    assert np.max(np.abs(y - (q.quantized_sum + q.final_residual))) < 1e-12
    assert np.all(np.isfinite(state.loss_log))


def test_tokenize_detokenize_round_trip_shapes():
    corpus = md.generate_corpus(per_class=3, seed=0)
    cfg = rvq.RvqConfig(levels=2, codebook_size=16, code_dim=6, temporal_stride=4, channels=8)
    state = rvq.init_codec(corpus.skeleton, cfg, seed=2)
    m = corpus.records[1]
    idx, T = rvq.tokenize_motion(state, m.features)
    assert idx.shape[0] == cfg.levels + 1
    assert idx.shape[2] == 6
    assert np.all(idx < cfg.codebook_size)
    rec = rvq.detokenize(state, idx, T)
    assert rec.shape == m.features.shape
    assert np.all(np.isfinite(rec))


def test_token_file_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    idx = rng.integers(0, 64, size=(3, 7, 6))
    p = tmp_path / "t.rmt"
    rvq.save_tokens(p, idx, orig_frames=26, codec_hash="abc")
    back, header = rvq.load_tokens(p)
    assert np.array_equal(back, idx)
    assert header["orig_frames"] == 26
    raw = bytearray(p.read_bytes())
    raw[10] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        rvq.load_tokens(p)


def test_codec_checkpoint_round_trip(tmp_path):
    corpus = md.generate_corpus(per_class=3, seed=0)
    cfg = rvq.RvqConfig(levels=1, codebook_size=8, code_dim=4, temporal_stride=2, channels=6)
    state = rvq.init_codec(corpus.skeleton, cfg, seed=3)
    rvq.train_codec(state, corpus, steps=3)
    p = tmp_path / "c.rmq"
    rvq.save_codec(state, p)
    back = rvq.load_codec(p)
    assert np.array_equal(back.codebooks, state.codebooks)
    rvq.train_codec(state, corpus, steps=2)
    rvq.train_codec(back, corpus, steps=2)
    for k in state.params:
        assert np.array_equal(state.params[k], back.params[k])
    assert np.array_equal(state.codebooks, back.codebooks)
