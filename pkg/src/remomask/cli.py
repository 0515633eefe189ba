"""Command-line interface for the full pipeline.

Exit codes: 0 success, 1 stage failure (one machine-parseable JSON line on
stderr), 2 usage errors. The REMOMASK_SEED environment variable overrides
--seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _load_cfg(args):
    from .config import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig().validate()
    seed = os.environ.get("REMOMASK_SEED")
    if seed is not None:
        cfg.seed = int(seed)
    elif getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _gen_seed(args):
    env = os.environ.get("REMOMASK_SEED")
    if env is not None:
        return int(env)
    return args.seed if args.seed is not None else 0


def build_parser():
    p = argparse.ArgumentParser(prog="remomask",
                                description="retrieval-augmented masked motion generation")
    p.add_argument("--config", help="pipeline config JSON", default=None)
    p.add_argument("--seed", type=int, default=None, help="pipeline seed (REMOMASK_SEED overrides)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the synthetic corpus")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-retriever", help="train the momentum contrastive retriever")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--resume", default=None)
    s.add_argument("--queue-mode", choices=["both", "none"], default=None)

    s = sub.add_parser("build-index", help="build the retrieval database")
    s.add_argument("--corpus", required=True)
    s.add_argument("--retriever", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")

    s = sub.add_parser("train-rvq", help="train the 2D residual VQ codec")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--resume", default=None)

    s = sub.add_parser("train-masked", help="train the masked base-layer transformer")
    s.add_argument("--corpus", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--retriever", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--resume", default=None)

    s = sub.add_parser("train-residual", help="train the residual-layer transformer")
    s.add_argument("--corpus", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--retriever", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--resume", default=None)

    s = sub.add_parser("generate", help="generate a motion from a caption")
    s.add_argument("--text", required=True)
    s.add_argument("--seed", type=int, default=None, help="generation seed")
    s.add_argument("--retriever", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--masked", required=True)
    s.add_argument("--residual", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("retrieve", help="query the retrieval database")
    s.add_argument("--index", required=True)
    s.add_argument("--retriever", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("-k", type=int, default=5)

    s = sub.add_parser("tokenize", help="motion file -> token file")
    s.add_argument("--codec", required=True)
    s.add_argument("--motion", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("detokenize", help="token file -> motion file")
    s.add_argument("--codec", required=True)
    s.add_argument("--tokens", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", help="generation + retrieval metrics on held-out data")
    s.add_argument("--corpus", required=True)
    s.add_argument("--retriever", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--masked", required=True)
    s.add_argument("--residual", required=True)
    s.add_argument("--out", default=None, help="write the JSON report here")

    s = sub.add_parser("export-anim", help="export a motion file to csv or svg-strip")
    s.add_argument("--motion", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "svg-strip"], required=True)

    sub.add_parser("selftest", help="run the cross-module invariant battery")
    return p


def _dispatch(args):
    from . import motion as md
    from . import pipeline as pl
    from . import retrieval_index as ri
    from . import retriever as rt
    from . import rvq

    cmd = args.command
    if cmd == "gen-data":
        cfg = _load_cfg(args)
        corpus = pl.stage_gen_data(cfg, args.out)
        print(f"wrote {args.out}: {len(corpus.records)} records "
              f"({ {k: len(v) for k, v in corpus.splits.items()} })")
        return 0
    if cmd == "train-retriever":
        cfg = _load_cfg(args)
        state = pl.stage_train_retriever(cfg, args.corpus, args.out, steps=args.steps,
                                         resume=args.resume, queue_mode=args.queue_mode)
        print(f"wrote {args.out}: step={state.step} loss={state.loss_log[-1]:.4f}")
        return 0
    if cmd == "build-index":
        cfg = _load_cfg(args)
        index = pl.stage_build_index(cfg, args.corpus, args.retriever, args.out, split=args.split)
        print(f"wrote {args.out}: {len(index)} records from split '{args.split}'")
        return 0
    if cmd == "train-rvq":
        cfg = _load_cfg(args)
        state = pl.stage_train_rvq(cfg, args.corpus, args.out, steps=args.steps, resume=args.resume)
        print(f"wrote {args.out}: step={state.step} loss={state.loss_log[-1]:.4f}")
        return 0
    if cmd == "train-masked":
        cfg = _load_cfg(args)
        state = pl.stage_train_masked(cfg, args.corpus, args.codec, args.retriever,
                                      args.index, args.out, steps=args.steps, resume=args.resume)
        print(f"wrote {args.out}: step={state.step} loss={state.loss_log[-1]:.4f}")
        return 0
    if cmd == "train-residual":
        cfg = _load_cfg(args)
        state = pl.stage_train_residual(cfg, args.corpus, args.codec, args.retriever,
                                        args.out, steps=args.steps, resume=args.resume)
        print(f"wrote {args.out}: step={state.step} loss={state.loss_log[-1]:.4f}")
        return 0
    if cmd == "generate":
        cfg = _load_cfg(args)
        pipe = pl.GenerationPipeline.load(cfg, args.retriever, args.index, args.codec,
                                          args.masked, args.residual)
        m = pipe.generate(args.text, seed=_gen_seed(args))
        pl.save_motion(m, args.out)
        print(f"wrote {args.out}: {m.n_frames} frames for '{args.text}'")
        return 0
    if cmd == "retrieve":
        retr = rt.load_retriever(args.retriever)
        index = ri.load_index(args.index)
        q = rt.encode_text(retr.params, retr.cfg, retr.vocab_map, args.text)
        for rank, (_, _, score, rid, caption) in enumerate(ri.retrieve(index, q, k=args.k), 1):
            print(f"{rank:3d}  {score:+.4f}  #{rid}  {caption}")
        return 0
    if cmd == "tokenize":
        codec = rvq.load_codec(args.codec)
        m = pl.load_motion(args.motion)
        idx, T = rvq.tokenize_motion(codec, m.features)
        rvq.save_tokens(args.out, idx, T, rvq.codec_hash(codec), meta={"caption": m.caption})
        print(f"wrote {args.out}: levels={idx.shape[0]} grid={idx.shape[1]}x{idx.shape[2]}")
        return 0
    if cmd == "detokenize":
        codec = rvq.load_codec(args.codec)
        idx, header = rvq.load_tokens(args.tokens)
        if header["codec_hash"] != rvq.codec_hash(codec):
            raise pl.StageError("detokenize", "token file was produced by a different codec config")
        feats = rvq.detokenize(codec, idx, header["orig_frames"])
        m = md.MotionSequence(features=feats, caption=header["meta"].get("caption", ""),
                              class_id=-1, spec={"from_tokens": True})
        pl.save_motion(m, args.out)
        print(f"wrote {args.out}: {m.n_frames} frames")
        return 0
    if cmd == "evaluate":
        cfg = _load_cfg(args)
        corpus = md.load_corpus(args.corpus)
        pipe = pl.GenerationPipeline.load(cfg, args.retriever, args.index, args.codec,
                                          args.masked, args.residual)
        report = pl.evaluate_pipeline(pipe, corpus, seed=cfg.seed)
        print(report.table())
        if args.out:
            with open(args.out, "w") as fh:
                json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            print(f"wrote {args.out}")
        return 0
    if cmd == "export-anim":
        m = pl.load_motion(args.motion)
        pl.export_anim(m, args.out, args.format)
        print(f"wrote {args.out}")
        return 0
    if cmd == "selftest":
        n = pl.run_selftest(verbose=True)
        print(f"selftest: {n} checks passed")
        return 0
    raise ValueError(f"unknown command {cmd}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as e:
        from .pipeline import StageError

        stage = e.stage if isinstance(e, StageError) else args.command
        msg = e.args[0] if e.args else str(e)
        print(json.dumps({"error": {"stage": stage, "message": msg}}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
