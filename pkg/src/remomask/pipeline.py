"""End-to-end stages: data -> retriever -> index -> codec -> transformers -> generation.

Every stage reads and writes the shared container formats, validates the
config hashes of its upstream artifacts, and draws all randomness from the
pipeline seed so that identical config+seed reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from . import motion as md
from . import nn
from . import retrieval_index as ri
from . import retriever as rt
from . import rvq
from . import transformers as tr
from .config import PipelineConfig
from .container import config_hash


class StageError(RuntimeError):
    """Error tagged with the pipeline stage that raised it."""

    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        return f"[{self.stage}] {super().__str__()}"


def _wrap_stage(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as e:
        raise StageError(stage, str(e)) from e


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_data(cfg: PipelineConfig, out_path):
    corpus = md.generate_corpus(per_class=cfg.data.per_class, seed=cfg.seed,
                                t_range=(cfg.data.t_min, cfg.data.t_max), fps=cfg.data.fps)
    md.save_corpus(corpus, out_path)
    return corpus


def stage_train_retriever(cfg: PipelineConfig, corpus_path, out_path, steps=None,
                          resume=None, queue_mode=None):
    corpus = md.load_corpus(corpus_path)
    rcfg = cfg.retriever
    if queue_mode is not None:
        from dataclasses import replace
        rcfg = replace(rcfg, queue_mode=queue_mode)
    if resume:
        state = rt.load_retriever(resume)
    else:
        state = rt.init_retriever(corpus, rcfg, seed=cfg.seed + 1)
    rt.train_retriever(state, corpus, steps if steps is not None else cfg.train.retriever_steps)
    rt.save_retriever(state, out_path)
    return state


def stage_build_index(cfg: PipelineConfig, corpus_path, retriever_path, out_path, split="train"):
    corpus = md.load_corpus(corpus_path)
    state = rt.load_retriever(retriever_path)
    index = ri.build_index(corpus, state, split=split)
    ri.save_index(index, out_path)
    return index


def stage_train_rvq(cfg: PipelineConfig, corpus_path, out_path, steps=None, resume=None):
    corpus = md.load_corpus(corpus_path)
    if resume:
        state = rvq.load_codec(resume)
    else:
        state = rvq.init_codec(corpus.skeleton, cfg.rvq, seed=cfg.seed + 2)
    rvq.train_codec(state, corpus, steps if steps is not None else cfg.train.rvq_steps)
    rvq.save_codec(state, out_path)
    return state


def _prepare_token_conditions(corpus, codec, retr, index=None, split="train"):
    """Tokenize the split once and embed its captions (plus retrieval)."""
    samples = []
    for rid in corpus.splits[split]:
        m = corpus.records[rid]
        tokens, _ = rvq.tokenize_motion(codec, m.features)
        t_vec = rt.encode_text(retr.params, retr.cfg, retr.vocab_map, m.caption)
        if index is not None:
            rt_vec, rm_vec = ri.retrieved_features(index, t_vec, k=1)
            samples.append((tokens, (t_vec, rt_vec, rm_vec)))
        else:
            samples.append((tokens, t_vec))
    return samples


def stage_train_masked(cfg: PipelineConfig, corpus_path, codec_path, retriever_path,
                       index_path, out_path, steps=None, resume=None):
    corpus = md.load_corpus(corpus_path)
    codec = rvq.load_codec(codec_path)
    retr = rt.load_retriever(retriever_path)
    index = ri.load_index(index_path)
    if index.retriever_hash != rt.retriever_hash(retr):
        raise StageError("train-masked", "index was built with a different retriever config")
    prepared = _prepare_token_conditions(corpus, codec, retr, index)
    upstream = {"codec": rvq.codec_hash(codec), "retriever": rt.retriever_hash(retr)}
    if resume:
        state = tr.load_gen_model(resume, "masked")
    else:
        state = tr.init_masked_model(cfg.masked, seed=cfg.seed + 3, upstream=upstream)
    n_steps = steps if steps is not None else cfg.train.masked_steps
    batch = cfg.masked.batch_size
    for _ in range(n_steps):
        pick = state.rng.choice(len(prepared), size=min(batch, len(prepared)), replace=False)
        samples = [(prepared[i][0][0], prepared[i][1]) for i in pick]  # base layer + conds
        tr.train_masked_step(state, samples)
    tr.save_gen_model(state, out_path, "masked")
    return state


def stage_train_residual(cfg: PipelineConfig, corpus_path, codec_path, retriever_path,
                         out_path, steps=None, resume=None):
    corpus = md.load_corpus(corpus_path)
    codec = rvq.load_codec(codec_path)
    retr = rt.load_retriever(retriever_path)
    prepared = _prepare_token_conditions(corpus, codec, retr, index=None)
    upstream = {"codec": rvq.codec_hash(codec), "retriever": rt.retriever_hash(retr)}
    if resume:
        state = tr.load_gen_model(resume, "residual")
    else:
        state = tr.init_residual_model(cfg.residual, seed=cfg.seed + 4, upstream=upstream)
    n_steps = steps if steps is not None else cfg.train.residual_steps
    batch = cfg.residual.batch_size
    for _ in range(n_steps):
        pick = state.rng.choice(len(prepared), size=min(batch, len(prepared)), replace=False)
        samples = [prepared[i] for i in pick]
        tr.train_residual_step(state, codec.codebooks, samples)
    tr.save_gen_model(state, out_path, "residual")
    return state


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class GenerationPipeline:
    cfg: PipelineConfig
    retr: rt.RetrieverState
    index: ri.RetrievalIndex
    codec: rvq.CodecState
    masked: tr.GenModelState
    residual: tr.GenModelState

    @staticmethod
    def load(cfg: PipelineConfig, retriever_path, index_path, codec_path,
             masked_path, residual_path) -> "GenerationPipeline":
        retr = _wrap_stage("load-retriever", rt.load_retriever, retriever_path)
        index = _wrap_stage("load-index", ri.load_index, index_path)
        codec = _wrap_stage("load-codec", rvq.load_codec, codec_path)
        masked = _wrap_stage("load-masked", tr.load_gen_model, masked_path, "masked")
        residual = _wrap_stage("load-residual", tr.load_gen_model, residual_path, "residual")
        pipe = GenerationPipeline(cfg, retr, index, codec, masked, residual)
        pipe.check_hashes()
        return pipe

    def check_hashes(self):
        r_hash = rt.retriever_hash(self.retr)
        c_hash = rvq.codec_hash(self.codec)
        if self.index.retriever_hash != r_hash:
            raise StageError("generate", "retrieval index does not match the retriever config")
        for name, model in (("masked", self.masked), ("residual", self.residual)):
            if model.upstream.get("retriever") not in (None, r_hash):
                raise StageError("generate", f"{name} model was trained with a different retriever")
            if model.upstream.get("codec") not in (None, c_hash):
                raise StageError("generate", f"{name} model was trained with a different codec")

    def conditions(self, caption):
        t_vec = rt.encode_text(self.retr.params, self.retr.cfg, self.retr.vocab_map, caption)
        rt_vec, rm_vec = ri.retrieved_features(self.index, t_vec, k=self.cfg.decode.retrieval_k,
                                               score_mode=self.cfg.decode.score_mode)
        return t_vec, rt_vec, rm_vec

    def generate(self, caption, seed) -> md.MotionSequence:
        """Caption + seed -> motion; deterministic given both."""
        dcfg = self.cfg.decode
        rng = np.random.default_rng(seed)
        t_vec, rt_vec, rm_vec = _wrap_stage("retrieve", self.conditions, caption)
        duration = int(rng.integers(self.cfg.data.t_min, self.cfg.data.t_max + 1))
        stride = self.codec.cfg.temporal_stride
        tp = (duration + stride - 1) // stride
        jp = len(self.codec.skeleton.part_names())
        mpt = nn.wrap(self.masked.params, trainable=False)
        base = _wrap_stage("decode-base", tr.iterative_decode, mpt, self.masked.cfg, (tp, jp),
                           (t_vec, rt_vec, rm_vec), dcfg.iterations, dcfg.guidance_scale,
                           rng, dcfg.temperature)
        rpt = nn.wrap(self.residual.params, trainable=False)
        tokens = _wrap_stage("decode-residual", tr.predict_residual_layers, rpt,
                             self.residual.cfg, self.codec.codebooks, base, t_vec)
        feats = _wrap_stage("detokenize", rvq.detokenize, self.codec, tokens, duration)
        if not np.all(np.isfinite(feats)):
            raise StageError("detokenize", "non-finite values in generated motion")
        return md.MotionSequence(features=feats, caption=caption, class_id=-1,
                                 spec={"seed": int(seed), "tokens_shape": list(tokens.shape)})


def save_motion(m: md.MotionSequence, path):
    from .container import save_container

    header = {"kind": "motion", "caption": m.caption, "class_id": m.class_id,
              "mirrored": m.mirrored, "spec": m.spec}
    save_container(path, "motion", header, {"features": m.features})


def load_motion(path) -> md.MotionSequence:
    from .container import load_container

    header, blobs = load_container(path, "motion")
    return md.MotionSequence(features=blobs["features"], caption=header["caption"],
                             class_id=header["class_id"], mirrored=header["mirrored"],
                             spec=header["spec"])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def motion_features(retr: rt.RetrieverState, records) -> np.ndarray:
    return np.stack([rt.encode_motion(retr.params, retr.cfg, retr.skeleton, m) for m in records])


def text_features(retr: rt.RetrieverState, captions) -> np.ndarray:
    return np.stack([rt.encode_text(retr.params, retr.cfg, retr.vocab_map, c) for c in captions])


def evaluate_pipeline(pipe: GenerationPipeline, corpus: md.Corpus, seed=0) -> mt.MetricReport:
    """Generation + retrieval metrics on the held-out splits."""
    ecfg = pipe.cfg.eval
    held = corpus.split_records("val") + corpus.split_records("test")
    real_feats = motion_features(pipe.retr, held)

    captions = [m.caption for m in held]
    n_gen = min(ecfg.n_generate, max(ecfg.rprecision_pool, 1) * 4)
    gen_captions = [captions[i % len(captions)] for i in range(n_gen)]
    gens = [pipe.generate(c, seed=seed + i) for i, c in enumerate(gen_captions)]
    gen_feats = motion_features(pipe.retr, gens)
    gen_text_feats = text_features(pipe.retr, gen_captions)

    top1, top2, top3 = mt.r_precision(gen_text_feats, gen_feats,
                                      pool=min(ecfg.rprecision_pool, n_gen), seed=seed)
    rep_sets = []
    for i in range(ecfg.mm_texts):
        cap = captions[i % len(captions)]
        reps = [pipe.generate(cap, seed=seed + 1000 + i * ecfg.mm_repeats + r)
                for r in range(ecfg.mm_repeats)]
        rep_sets.append(motion_features(pipe.retr, reps))

    t_feats = text_features(pipe.retr, captions)
    m_feats = real_feats
    t2m, _ = mt.retrieval_metrics(t_feats, m_feats)
    m2t, _ = mt.retrieval_metrics(m_feats, t_feats)

    report = mt.MetricReport(
        fid=mt.fid(mt.FeatureBank(gen_feats), mt.FeatureBank(real_feats)),
        r_precision_top1=top1, r_precision_top2=top2, r_precision_top3=top3,
        mm_dist=mt.mm_dist(gen_text_feats, gen_feats),
        diversity=mt.diversity(gen_feats, subset=ecfg.diversity_subset, seed=seed),
        multimodality=mt.multimodality(rep_sets),
        retrieval_t2m=t2m, retrieval_m2t=m2t,
    )
    return report.validate()


# ---------------------------------------------------------------------------
# animation export
# ---------------------------------------------------------------------------

DEFAULT_BONES = (
    ("root", "spine"), ("spine", "head"),
    ("spine", "l_shoulder"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_hand"),
    ("spine", "r_shoulder"), ("r_shoulder", "r_elbow"), ("r_elbow", "r_hand"),
    ("root", "l_hip"), ("l_hip", "l_foot"),
    ("root", "r_hip"), ("r_hip", "r_foot"),
)


def export_anim(m: md.MotionSequence, out_path, fmt, skeleton=None, stride=8):
    sk = skeleton or md.default_skeleton()
    pos = m.positions()
    if fmt == "csv":
        cols = ["frame"] + [f"{j}_{ax}" for j in sk.joints for ax in "xyz"]
        lines = [",".join(cols)]
        for t in range(pos.shape[0]):
            row = [str(t)] + [repr(float(v)) for v in pos[t].ravel()]
            lines.append(",".join(row))
        with open(out_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return out_path
    if fmt == "svg-strip":
        jix = {name: i for i, name in enumerate(sk.joints)}
        frames = list(range(0, pos.shape[0], stride))
        width_per = 120
        svg = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{len(frames) * width_per}" '
               f'height="260" viewBox="0 0 {len(frames) * width_per} 260">']
        for fi, t in enumerate(frames):
            ox = fi * width_per + width_per / 2
            p = pos[t]
            cx, cy = p[jix["root"], 0], p[jix["root"], 1]
            for a, b in DEFAULT_BONES:
                if a not in jix or b not in jix:
                    continue
                x1 = ox + (p[jix[a], 0] - cx) * 60
                y1 = 200 - (p[jix[a], 1] - cy + 1.0) * 80
                x2 = ox + (p[jix[b], 0] - cx) * 60
                y2 = 200 - (p[jix[b], 1] - cy + 1.0) * 80
                svg.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                           f'stroke="black" stroke-width="2"/>')
            svg.append(f'<text x="{ox:.0f}" y="250" font-size="10" text-anchor="middle">t={t}</text>')
        svg.append("</svg>")
        with open(out_path, "w") as fh:
            fh.write("\n".join(svg) + "\n")
        return out_path
    raise ValueError(f"unknown export format '{fmt}' (use csv or svg-strip)")


def read_anim_csv(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    rows = [[float(v) for v in ln.split(",")[1:]] for ln in lines[1:]]
    arr = np.array(rows)
    return arr.reshape(arr.shape[0], -1, 3)


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

class SelfTestError(RuntimeError):
    pass


def _check(name, ok, results):
    results.append((name, bool(ok)))
    return ok


def run_selftest(verbose=True):
    """Fast cross-module invariant battery; raises SelfTestError on failure."""
    results = []
    rng = np.random.default_rng(0)

    g = ad.Graph(lambda p, i: {"loss": ad.squared_l2(p["x"], i["y"])},
                 {"x": rng.normal(size=(3, 2))})
    _check("autodiff.quadratic_fd", g.finite_difference_check({"y": rng.normal(size=(3, 2))}) < 1e-7, results)
    soft = ad.softmax(ad.constant(rng.normal(size=(8, 5)) * 3)).data
    _check("autodiff.softmax_rows", np.max(np.abs(soft.sum(-1) - 1)) < 1e-12, results)
    ln = ad.layer_norm(ad.constant(rng.normal(size=(8, 16)))).data
    _check("autodiff.layer_norm_moments",
           np.max(np.abs(ln.mean(-1))) < 1e-9 and np.max(np.abs(ln.var(-1) - 1)) < 1e-6, results)

    q = rt.NegativeQueue(7, 2)
    ref = []
    ok = True
    for _ in range(300):
        k = int(rng.integers(1, 8))
        keys = rng.normal(size=(k, 2))
        q.push(keys)
        ref.extend(keys)
        ref = ref[-7:]
        ok = ok and np.array_equal(q.as_matrix(), np.array(ref))
    _check("retriever.queue_fifo", ok, results)

    mom = {"w": np.array([1.0, -2.0])}
    online = {"w": np.zeros(2)}
    start = mom["w"].copy()
    ok = True
    for k in range(1, 6):
        mom = rt.momentum_update(online, mom, 0.5)
        ok = ok and np.array_equal(mom["w"], start * 0.5 ** k)
    _check("retriever.ema_decay", ok, results)

    ok = True
    for _ in range(5):
        qr = rng.normal(size=(3, 4))
        qr /= np.linalg.norm(qr, axis=1, keepdims=True)
        pos = qr[rng.permutation(3)]
        queue = rng.normal(size=(6, 4))
        fast = rt.loss_m2t(ad.constant(qr), pos, queue, 0.07).data.item()
        ok = ok and abs(fast - rt.brute_force_contrastive(qr, pos, queue, 0.07)) < 1e-10
    _check("retriever.loss_oracle", ok, results)

    books = np.array([[[0.0], [4.0]], [[0.0], [1.0]]])
    qz = rvq.rvq_quantize(books, np.full((1, 1, 1), 4.9))
    _check("rvq.toy_example", tuple(qz.indices[:, 0, 0]) == (1, 1)
           and qz.quantized_sum[0, 0, 0] == 5.0, results)
    y = rng.normal(size=(4, 3, 5))
    books = rng.normal(size=(4, 6, 5))
    qz = rvq.rvq_quantize(books, y)
    _check("rvq.telescoping", np.max(np.abs(y - (qz.quantized_sum + qz.final_residual))) < 1e-12, results)

    _check("schedule.endpoints", tr.mask_schedule(1.0) == 1.0 and abs(tr.mask_schedule(0.0)) < 1e-15
           and abs(tr.mask_schedule(0.5) - np.cos(np.pi / 4)) < 1e-15, results)
    con, un = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    _check("cfg.arithmetic", np.array_equal(tr.rag_cfg_logits(con, un, 4.0), [[5.0, -4.0]])
           and tr.rag_cfg_logits(con, un, 0.0).tobytes() == con.tobytes(), results)
    pe = tr.pos_encode_2d(16, 6, 8)
    _check("posenc.unique_cells", len({r.tobytes() for r in pe.reshape(-1, 8)}) == 96, results)

    x = rng.normal(size=(20, 4))
    _check("metrics.fid_self", mt.fid(mt.FeatureBank(x), mt.FeatureBank(x.copy())) <= 1e-8, results)
    qf = rng.normal(size=(20, 4))
    cf = rng.normal(size=(20, 4))
    _, ranks = mt.retrieval_metrics(qf, cf)
    scores = qf @ cf.T
    ok = all(int(np.where(np.argsort(-scores[i], kind="stable") == i)[0][0]) + 1 == ranks[i]
             for i in range(20))
    _check("metrics.rank_oracle", ok, results)

    m = md.generate_motion(md.MotionSpec("walk", 1.0, 1.2, 0.3, 40), seed=5)
    mm2 = md.mirror_augment(md.mirror_augment(m))
    _check("motion.mirror_involution", mm2.features.tobytes() == m.features.tobytes(), results)
    corpus = md.generate_corpus(per_class=3, seed=1)
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    _check("motion.split_exhaustive", sum(sizes.values()) == len(corpus.records), results)

    failures = [name for name, ok in results if not ok]
    if verbose:
        for name, ok in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}")
    if failures:
        raise SelfTestError(f"selftest failures: {failures}")
    return len(results)
