import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from remomask import cli
from remomask import config as cf
from remomask import motion as md
from remomask import pipeline as pl
from remomask import rvq


def smoke_config(tmp_path, **overrides):
    cfg = {
        "seed": 0,
        "data": {"per_class": 4, "t_min": 32, "t_max": 48},
        "retriever": {"dim": 12, "text_dim": 12, "text_layers": 1, "text_heads": 2,
                      "text_ffn": 24, "part_hidden": 6, "queue_capacity": 32,
                      "batch_size": 4, "lr": 2e-3},
        "rvq": {"levels": 2, "codebook_size": 16, "code_dim": 6, "temporal_stride": 4,
                "channels": 10, "lr": 2e-3, "batch_size": 4},
        "masked": {"layers": 1, "heads": 2, "dim": 16, "ffn": 32, "cond_dim": 12,
                   "codebook_size": 16, "code_dim": 6, "levels": 2, "lr": 3e-3,
                   "with_retrieval": True},
        "residual": {"layers": 1, "heads": 2, "dim": 16, "ffn": 32, "cond_dim": 12,
                     "codebook_size": 16, "code_dim": 6, "levels": 2, "lr": 3e-3,
                     "with_retrieval": False},
        "decode": {"iterations": 3},
        "train": {"retriever_steps": 6, "rvq_steps": 6, "masked_steps": 6, "residual_steps": 6},
        "eval": {"rprecision_pool": 4, "n_generate": 14, "mm_texts": 2, "mm_repeats": 2,
                 "diversity_subset": 6},
    }
    cfg.update(overrides)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    """Full tiny pipeline driven through the CLI entry point."""
    root = tmp_path_factory.mktemp("smoke")
    cfgp = smoke_config(root)
    paths = {k: str(root / f"x.{k}") for k in
             ("rmc", "rmr", "rmi", "rmq", "rmm", "rms")}
    assert cli.main(["--config", cfgp, "gen-data", "--out", paths["rmc"]]) == 0
    assert cli.main(["--config", cfgp, "train-retriever", "--corpus", paths["rmc"],
                     "--out", paths["rmr"]]) == 0
    assert cli.main(["--config", cfgp, "build-index", "--corpus", paths["rmc"],
                     "--retriever", paths["rmr"], "--out", paths["rmi"]]) == 0
    assert cli.main(["--config", cfgp, "train-rvq", "--corpus", paths["rmc"],
                     "--out", paths["rmq"]]) == 0
    assert cli.main(["--config", cfgp, "train-masked", "--corpus", paths["rmc"],
                     "--codec", paths["rmq"], "--retriever", paths["rmr"],
                     "--index", paths["rmi"], "--out", paths["rmm"]]) == 0
    assert cli.main(["--config", cfgp, "train-residual", "--corpus", paths["rmc"],
                     "--codec", paths["rmq"], "--retriever", paths["rmr"],
                     "--out", paths["rms"]]) == 0
    return root, cfgp, paths


def test_config_round_trip_and_strictness(tmp_path):
    cfg = cf.PipelineConfig().validate()
    p = tmp_path / "c.json"
    cf.save_config(cfg, p)
    back = cf.load_config(p)
    assert back.to_dict() == cfg.to_dict()
    bad = cfg.to_dict()
    bad["mystery"] = 1
    with pytest.raises(ValueError, match="unknown config keys"):
        cf.PipelineConfig.from_dict(bad)
    bad2 = cfg.to_dict()
    bad2["retriever"]["bogus_knob"] = 2
    with pytest.raises(ValueError, match="unknown keys in 'retriever'"):
        cf.PipelineConfig.from_dict(bad2)


def test_config_cross_stage_validation():
    cfg = cf.PipelineConfig()
    cfg.masked.codebook_size = 99
    with pytest.raises(ValueError, match="codebook_size"):
        cfg.validate()
    cfg2 = cf.PipelineConfig()
    cfg2.retriever.dim = 16
    with pytest.raises(ValueError, match="cond_dim"):
        cfg2.validate()


def test_generate_and_artifacts(smoke, tmp_path):
    root, cfgp, paths = smoke
    out = str(tmp_path / "g.rmo")
    rc = cli.main(["--config", cfgp, "generate", "--text", "a person jumps widely quickly",
                   "--seed", "5", "--retriever", paths["rmr"], "--index", paths["rmi"],
                   "--codec", paths["rmq"], "--masked", paths["rmm"],
                   "--residual", paths["rms"], "--out", out])
    assert rc == 0
    m = pl.load_motion(out)
    assert m.caption == "a person jumps widely quickly"
    assert np.all(np.isfinite(m.features))
    assert m.features.shape[1] == 13 * 12


def test_generate_missing_index_gives_stage_tagged_error(smoke, tmp_path, capsys):
    root, cfgp, paths = smoke
    rc = cli.main(["--config", cfgp, "generate", "--text", "x", "--seed", "1",
                   "--retriever", paths["rmr"], "--index", str(tmp_path / "nope.rmi"),
                   "--codec", paths["rmq"], "--masked", paths["rmm"],
                   "--residual", paths["rms"], "--out", str(tmp_path / "g.rmo")])
    assert rc == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    payload = json.loads(err)
    assert payload["error"]["stage"] == "load-index"


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.build_parser().parse_args(["gen-data", "--out", "x", "--nonsense"])
    assert e.value.code == 2


def test_tokenize_detokenize_cli(smoke, tmp_path):
    root, cfgp, paths = smoke
    corpus = md.load_corpus(paths["rmc"])
    motion_path = str(tmp_path / "m.rmo")
    pl.save_motion(corpus.records[0], motion_path)
    tok = str(tmp_path / "m.rmt")
    out = str(tmp_path / "m2.rmo")
    assert cli.main(["tokenize", "--codec", paths["rmq"], "--motion", motion_path,
                     "--out", tok]) == 0
    assert cli.main(["detokenize", "--codec", paths["rmq"], "--tokens", tok,
                     "--out", out]) == 0
    back = pl.load_motion(out)
    assert back.n_frames == corpus.records[0].n_frames


def test_retrieve_cli(smoke, capsys):
    root, cfgp, paths = smoke
    rc = cli.main(["retrieve", "--index", paths["rmi"], "--retriever", paths["rmr"],
                   "--text", "a person squats down slightly steadily", "-k", "3"])
    assert rc == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 3
    assert "#" in out[0]


def test_export_anim_csv_round_trip(smoke, tmp_path):
    root, cfgp, paths = smoke
    corpus = md.load_corpus(paths["rmc"])
    m = corpus.records[2]
    motion_path = str(tmp_path / "m.rmo")
    pl.save_motion(m, motion_path)
    csv_path = str(tmp_path / "m.csv")
    assert cli.main(["export-anim", "--motion", motion_path, "--out", csv_path,
                     "--format", "csv"]) == 0
    with open(csv_path) as fh:
        n_rows = sum(1 for _ in fh) - 1
    assert n_rows == m.n_frames
    back = pl.read_anim_csv(csv_path)
    assert np.array_equal(back, m.positions())


def test_export_anim_svg_well_formed(smoke, tmp_path):
    root, cfgp, paths = smoke
    corpus = md.load_corpus(paths["rmc"])
    motion_path = str(tmp_path / "m.rmo")
    pl.save_motion(corpus.records[1], motion_path)
    svg_path = str(tmp_path / "m.svg")
    assert cli.main(["export-anim", "--motion", motion_path, "--out", svg_path,
                     "--format", "svg-strip"]) == 0
    tree = ET.parse(svg_path)
    assert tree.getroot().tag.endswith("svg")
    with pytest.raises(SystemExit) as e:
        cli.build_parser().parse_args(["export-anim", "--motion", motion_path,
                                       "--out", "x", "--format", "gif"])
    assert e.value.code == 2


def test_selftest_cli():
    assert cli.main(["selftest"]) == 0


def test_env_seed_overrides_flag(smoke, tmp_path):
    root, cfgp, paths = smoke
    a = str(tmp_path / "a.rmo")
    b = str(tmp_path / "b.rmo")
    os.environ["REMOMASK_SEED"] = "77"
    try:
        cli.main(["--config", cfgp, "generate", "--text", "a person turns around to the left steadily",
                  "--seed", "5", "--retriever", paths["rmr"], "--index", paths["rmi"],
                  "--codec", paths["rmq"], "--masked", paths["rmm"],
                  "--residual", paths["rms"], "--out", a])
    finally:
        del os.environ["REMOMASK_SEED"]
    cli.main(["--config", cfgp, "generate", "--text", "a person turns around to the left steadily",
              "--seed", "77", "--retriever", paths["rmr"], "--index", paths["rmi"],
              "--codec", paths["rmq"], "--masked", paths["rmm"],
              "--residual", paths["rms"], "--out", b])
    assert open(a, "rb").read() == open(b, "rb").read()


def test_resume_training_bit_exact(smoke, tmp_path):
    root, cfgp, paths = smoke
    full = str(tmp_path / "full.rmq")
    half = str(tmp_path / "half.rmq")
    resumed = str(tmp_path / "resumed.rmq")
    assert cli.main(["--config", cfgp, "train-rvq", "--corpus", paths["rmc"],
                     "--out", full, "--steps", "8"]) == 0
    assert cli.main(["--config", cfgp, "train-rvq", "--corpus", paths["rmc"],
                     "--out", half, "--steps", "5"]) == 0
    assert cli.main(["--config", cfgp, "train-rvq", "--corpus", paths["rmc"],
                     "--out", resumed, "--steps", "3", "--resume", half]) == 0
    assert open(full, "rb").read() == open(resumed, "rb").read()


def test_detokenize_rejects_mismatched_codec(smoke, tmp_path, capsys):
    root, cfgp, paths = smoke
    corpus = md.load_corpus(paths["rmc"])
    codec = rvq.load_codec(paths["rmq"])
    idx, T = rvq.tokenize_motion(codec, corpus.records[0].features)
    tok = str(tmp_path / "bad.rmt")
    rvq.save_tokens(tok, idx, T, codec_hash="0000deadbeef0000")
    rc = cli.main(["detokenize", "--codec", paths["rmq"], "--tokens", tok,
                   "--out", str(tmp_path / "o.rmo")])
    assert rc == 1
    payload = json.loads(capsys.readouterr().err.strip())
    assert payload["error"]["stage"] == "detokenize"
