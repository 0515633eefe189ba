import numpy as np
import pytest

from remomask import motion as md
from remomask.container import ContainerError


def spec(cname="walk", amp=1.0, freq=1.2, heading=0.0, dur=48):
    return md.MotionSpec(cname, amp, freq, heading, dur)


def test_zero_amplitude_walk_is_static():
    m = md.generate_motion(spec(amp=0.0), seed=3)
    pos = m.positions()
    assert np.max(np.abs(pos - pos[0:1])) == 0.0


def test_generation_deterministic():
    a = md.generate_motion(spec("kick"), seed=11)
    b = md.generate_motion(spec("kick"), seed=11)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.caption == b.caption


def test_unknown_class_rejected():
    with pytest.raises(ValueError, match="unknown motion class"):
        md.generate_motion(md.MotionSpec("moonwalk", 1.0, 1.0, 0.0, 48), seed=0)


def test_wave_left_moves_only_left_arm():
    sk = md.default_skeleton()
    m = md.generate_motion(spec("wave-left", amp=1.0, freq=1.5), seed=5)
    var = m.features.var(axis=0)
    active = set(np.where(var > 1e-12)[0])
    left_cols = set(sk.part_columns("left_arm").tolist())
    assert active, "wave must move something"
    assert active <= left_cols


def test_velocities_are_first_differences():
    for cname in md.CLASS_NAMES:
        m = md.generate_motion(spec(cname, heading=0.3 if cname in ("walk", "run", "turn") else 0.0), seed=7)
        f = m.features.reshape(m.n_frames, m.n_joints, 12)
        pos, vel = f[:, :, 0:3], f[:, :, 3:6]
        fd = (pos[1:] - pos[:-1]) * 20.0
        assert np.max(np.abs(vel[1:] - fd)) < 1e-9
        assert np.all(vel[0] == 0.0)


def test_mirror_is_involution():
    for cname in md.CLASS_NAMES:
        m = md.generate_motion(spec(cname, heading=-0.4 if cname in ("walk", "run", "turn") else 0.0), seed=9)
        mm = md.mirror_augment(md.mirror_augment(m))
        assert np.array_equal(mm.features, m.features)
        assert mm.features.tobytes() == m.features.tobytes()
        assert mm.caption == m.caption
        assert mm.class_id == m.class_id
        assert mm.mirrored == m.mirrored


def test_mirror_swaps_wave_parts_and_class():
    sk = md.default_skeleton()
    m = md.generate_motion(spec("wave-left"), seed=13)
    mm = md.mirror_augment(m)
    assert mm.class_name == "wave-right"
    assert "right hand" in mm.caption
    v = mm.features.var(axis=0)
    active = set(np.where(v > 1e-12)[0])
    assert active <= set(sk.part_columns("right_arm").tolist())
    # variance profile swapped between the two arm parts
    vl = m.features.var(axis=0)[sk.part_columns("left_arm")]
    vr = mm.features.var(axis=0)[sk.part_columns("right_arm")]
    assert np.allclose(np.sort(vl), np.sort(vr), atol=1e-12)


def test_mirror_fixed_point_on_symmetric_squat():
    m = md.generate_motion(spec("squat"), seed=21)
    mm = md.mirror_augment(m)
    assert np.array_equal(mm.features, m.features)
    assert mm.mirrored != m.mirrored


def test_mirror_preserves_joint_distances():
    m = md.generate_motion(spec("run", heading=0.5, freq=2.0), seed=17)
    mm = md.mirror_augment(m)
    for t in range(0, m.n_frames, 7):
        p = m.positions()[t]
        q = mm.positions()[t]
        dp = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
        dq = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=-1)
        assert np.max(np.abs(np.sort(dp.ravel()) - np.sort(dq.ravel()))) < 1e-9


def test_unpaired_joint_rejected():
    sk = md.default_skeleton()
    broken = md.Skeleton(sk.joints, sk.parts, sk.pairs[:-1], sk.selfs, sk.base_pose)
    m = md.generate_motion(spec(), seed=1)
    with pytest.raises(ValueError, match="unpaired"):
        md.mirror_augment(m, broken)


def test_corpus_counts_and_split_ratios():
    corpus = md.generate_corpus(per_class=32, seed=0)
    assert len(corpus.records) == 512
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    assert abs(sizes["train"] - 409) <= 1
    assert abs(sizes["val"] - 77) <= 1
    assert abs(sizes["test"] - 26) <= 1
    assert sizes["train"] + sizes["val"] + sizes["test"] == 512
    # disjoint and exhaustive
    all_ids = sorted(i for v in corpus.splits.values() for i in v)
    assert all_ids == list(range(512))
    # every class in every split
    for name in ("train", "val", "test"):
        classes = {m.class_id for m in corpus.split_records(name)}
        assert classes == set(range(len(md.CLASS_NAMES)))


def test_corpus_deterministic():
    a = md.generate_corpus(per_class=4, seed=5)
    b = md.generate_corpus(per_class=4, seed=5)
    assert md.corpus_equal(a, b)


def test_captions_nonempty_and_class_consistent():
    corpus = md.generate_corpus(per_class=4, seed=2)
    keyword = {"walk": "walks", "run": "runs", "jump": "jumps", "wave-left": "waves",
               "wave-right": "waves", "turn": "turns", "squat": "squats", "kick": "kicks"}
    for m in corpus.records:
        assert m.caption
        assert keyword[m.class_name] in m.caption
        if m.class_name == "wave-left":
            assert "left hand" in m.caption
        if m.class_name == "wave-right":
            assert "right hand" in m.caption


def test_corpus_round_trip_bitwise(tmp_path):
    corpus = md.generate_corpus(per_class=3, seed=8)
    p = tmp_path / "toy.rmc"
    md.save_corpus(corpus, p)
    back = md.load_corpus(p)
    assert md.corpus_equal(corpus, back)
    # a second save of the loaded corpus is byte-identical
    p2 = tmp_path / "toy2.rmc"
    md.save_corpus(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_corrupted_magic_detected(tmp_path):
    corpus = md.generate_corpus(per_class=3, seed=8)
    p = tmp_path / "toy.rmc"
    md.save_corpus(corpus, p)
    raw = bytearray(p.read_bytes())
    raw[0:7] = b"XBADMAG"
    p.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        md.load_corpus(p)


def test_truncation_detected(tmp_path):
    corpus = md.generate_corpus(per_class=3, seed=8)
    p = tmp_path / "toy.rmc"
    md.save_corpus(corpus, p)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(ContainerError):
        md.load_corpus(p)


def test_empty_corpus_round_trips(tmp_path):
    sk = md.default_skeleton()
    empty = md.Corpus(records=[], splits={"train": [], "val": [], "test": []}, skeleton=sk)
    p = tmp_path / "empty.rmc"
    md.save_corpus(empty, p)
    back = md.load_corpus(p)
    assert md.corpus_equal(empty, back)


def test_centroid_classifier_train_accuracy():
    corpus = md.generate_corpus(per_class=16, seed=3)
    clf = md.CentroidClassifier().fit(corpus.split_records("train"))
    assert clf.accuracy(corpus.split_records("train")) > 0.90
