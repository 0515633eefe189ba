"""Synthetic labeled motion corpus.

Motions are T x (12*J) feature maps: per joint 3 positions (x lateral,
y up, z forward), 3 linear velocities (first differences / frame time), and
a 6D rotation representation (first two columns of the joint rotation
matrix). The default skeleton has 13 joints partitioned into six body
parts, with an explicit left/right pairing used for mirror augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import ContainerError, load_container, save_container

FEATS_PER_JOINT = 12
CORPUS_VERSION = 1

# identity rotation in the 6D representation (columns 1 and 2 of I)
ROT_ID = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
# feature sign flips under a lateral (x -> -x) reflection:
# pos(x,y,z), vel(x,y,z), rot columns conjugated by diag(-1,1,1)
MIRROR_SIGNS = np.array([-1, 1, 1, -1, 1, 1, 1, -1, -1, -1, 1, 1], dtype=np.float64)


@dataclass(frozen=True)
class Skeleton:
    joints: tuple
    parts: dict            # part name -> tuple of joint indices
    pairs: tuple           # ((left_idx, right_idx), ...)
    selfs: tuple           # midline joint indices
    base_pose: np.ndarray  # (J, 3)

    @property
    def n_joints(self):
        return len(self.joints)

    def part_names(self):
        return tuple(self.parts)

    def part_joint_count(self, part):
        return len(self.parts[part])

    def part_columns(self, part):
        cols = []
        for j in self.parts[part]:
            cols.extend(range(j * FEATS_PER_JOINT, (j + 1) * FEATS_PER_JOINT))
        return np.array(cols)

    def to_header(self):
        # parts serialize as an ordered list: canonical JSON sorts dict keys,
        # and part order is semantic (it fixes encoder feature layout)
        return {
            "joints": list(self.joints),
            "parts": [[k, list(v)] for k, v in self.parts.items()],
            "pairs": [list(p) for p in self.pairs],
            "selfs": list(self.selfs),
            "base_pose": self.base_pose.tolist(),
        }

    @staticmethod
    def from_header(h):
        return Skeleton(
            joints=tuple(h["joints"]),
            parts={k: tuple(v) for k, v in h["parts"]},
            pairs=tuple(tuple(p) for p in h["pairs"]),
            selfs=tuple(h["selfs"]),
            base_pose=np.array(h["base_pose"], dtype=np.float64),
        )


def default_skeleton() -> Skeleton:
    joints = ("root", "spine", "head",
              "l_shoulder", "l_elbow", "l_hand",
              "r_shoulder", "r_elbow", "r_hand",
              "l_hip", "l_foot", "r_hip", "r_foot")
    parts = {
        "root": (0,),
        "backbone": (1, 2),
        "left_arm": (3, 4, 5),
        "right_arm": (6, 7, 8),
        "left_leg": (9, 10),
        "right_leg": (11, 12),
    }
    pairs = ((3, 6), (4, 7), (5, 8), (9, 11), (10, 12))
    selfs = (0, 1, 2)
    base = np.array([
        [0.00, 1.00, 0.0], [0.00, 1.25, 0.0], [0.00, 1.55, 0.0],
        [-0.20, 1.45, 0.0], [-0.45, 1.20, 0.0], [-0.55, 0.95, 0.0],
        [0.20, 1.45, 0.0], [0.45, 1.20, 0.0], [0.55, 0.95, 0.0],
        [-0.12, 0.90, 0.0], [-0.12, 0.05, 0.0], [0.12, 0.90, 0.0], [0.12, 0.05, 0.0],
    ])
    return Skeleton(joints, parts, pairs, selfs, base)


# ---------------------------------------------------------------------------
# motion classes
# ---------------------------------------------------------------------------

CLASS_NAMES = ("walk", "run", "jump", "wave-left", "wave-right", "turn", "squat", "kick")
# chiral classes trade places under mirroring; the rest map to themselves
MIRROR_CLASS = {name: name for name in CLASS_NAMES}
MIRROR_CLASS["wave-left"] = "wave-right"
MIRROR_CLASS["wave-right"] = "wave-left"

# per-class parameter ranges (amplitude, frequency Hz, heading rad)
CLASS_RANGES = {
    "walk": ((0.6, 1.2), (0.8, 1.6), (-0.6, 0.6)),
    "run": ((0.8, 1.4), (1.8, 2.8), (-0.6, 0.6)),
    "jump": ((0.6, 1.3), (0.8, 1.5), (0.0, 0.0)),
    "wave-left": ((0.6, 1.4), (1.0, 2.2), (0.0, 0.0)),
    "wave-right": ((0.6, 1.4), (1.0, 2.2), (0.0, 0.0)),
    "turn": ((0.6, 1.3), (0.5, 1.1), (-1.0, 1.0)),
    "squat": ((0.6, 1.3), (0.7, 1.2), (0.0, 0.0)),
    "kick": ((0.7, 1.4), (0.9, 1.8), (0.0, 0.0)),
}


@dataclass(frozen=True)
class MotionSpec:
    class_name: str
    amplitude: float
    frequency: float
    heading: float
    duration: int

    @property
    def class_id(self):
        return CLASS_NAMES.index(self.class_name)


@dataclass
class MotionSequence:
    features: np.ndarray   # (T, 12*J)
    caption: str
    class_id: int
    mirrored: bool = False
    spec: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.features.shape[0]

    @property
    def n_joints(self):
        return self.features.shape[1] // FEATS_PER_JOINT

    @property
    def class_name(self):
        return CLASS_NAMES[self.class_id]

    def positions(self):
        T, J = self.n_frames, self.n_joints
        f = self.features.reshape(T, J, FEATS_PER_JOINT)
        return f[:, :, 0:3]


def _speed_word(freq, lo, hi):
    u = (freq - lo) / max(hi - lo, 1e-9)
    words = ("very slowly", "slowly", "steadily", "quickly", "very quickly")
    return words[min(int(u * len(words)), len(words) - 1)]


def _size_word(amp, lo, hi):
    u = (amp - lo) / max(hi - lo, 1e-9)
    words = ("slightly", "moderately", "widely", "energetically")
    return words[min(int(u * len(words)), len(words) - 1)]


def _heading_word(heading):
    if heading < -0.15:
        return "to the left"
    if heading > 0.15:
        return "to the right"
    return "straight ahead"


def make_caption(spec: MotionSpec) -> str:
    a_lo, a_hi = CLASS_RANGES[spec.class_name][0]
    f_lo, f_hi = CLASS_RANGES[spec.class_name][1]
    speed = _speed_word(spec.frequency, f_lo, f_hi)
    size = _size_word(spec.amplitude, a_lo, a_hi)
    c = spec.class_name
    if c in ("walk", "run"):
        verb = "walks" if c == "walk" else "runs"
        return f"a person {verb} {_heading_word(spec.heading)} {speed}"
    if c == "jump":
        return f"a person jumps {size} {speed}"
    if c == "wave-left":
        return f"a person waves the left hand {size} {speed}"
    if c == "wave-right":
        return f"a person waves the right hand {size} {speed}"
    if c == "turn":
        side = "left" if spec.heading < 0 else "right"
        return f"a person turns around to the {side} {speed}"
    if c == "squat":
        return f"a person squats down {size} {speed}"
    if c == "kick":
        return f"a person kicks with the right leg {size} {speed}"
    raise ValueError(f"unknown motion class '{c}'")


def _positions_to_features(pos, rot6, fps):
    """Assemble (T, 12*J) features; velocities are first differences of positions."""
    T, J, _ = pos.shape
    vel = np.zeros_like(pos)
    vel[1:] = (pos[1:] - pos[:-1]) * fps
    feats = np.concatenate([pos, vel, rot6], axis=2)
    return feats.reshape(T, J * FEATS_PER_JOINT)


def generate_motion(spec: MotionSpec, seed, skeleton: Skeleton | None = None, fps=20.0) -> MotionSequence:
    """Deterministic procedural motion for one spec; the seed sets the phase."""
    if spec.class_name not in CLASS_NAMES:
        raise ValueError(f"unknown motion class '{spec.class_name}'")
    sk = skeleton or default_skeleton()
    rng = np.random.default_rng(seed)
    # small jitter: enough to make seeds distinguishable, small enough that
    # same-class instances stay aligned for centroid-style probes
    phase = rng.uniform(0.0, 0.4)

    T, J = int(spec.duration), sk.n_joints
    a, f = spec.amplitude, spec.frequency
    t = np.arange(T) / fps
    phi = 2.0 * np.pi * f * t + phase
    s, cpos = np.sin(phi), np.cos(phi)
    lift = np.maximum(s, 0.0)

    pos = np.repeat(sk.base_pose[None, :, :], T, axis=0)
    rot6 = np.repeat(ROT_ID[None, None, :], T, axis=0).repeat(J, axis=1)
    jix = {name: i for i, name in enumerate(sk.joints)}
    c = spec.class_name

    if c in ("walk", "run"):
        speed = (0.6 if c == "walk" else 1.2) * a * f
        swing = (0.25 if c == "walk" else 0.40) * a
        bob = (0.02 if c == "walk" else 0.06) * a
        direction = np.array([np.sin(spec.heading), 0.0, np.cos(spec.heading)])
        pos += (speed * t)[:, None, None] * direction[None, None, :]
        for name, sign in (("l_hand", 1.0), ("l_elbow", 0.6), ("r_hand", -1.0), ("r_elbow", -0.6)):
            pos[:, jix[name], 0] += sign * swing * s * direction[0]
            pos[:, jix[name], 2] += sign * swing * s * direction[2]
        for name, sign in (("l_foot", -1.0), ("r_foot", 1.0)):
            pos[:, jix[name], 0] += sign * 0.3 * a * s * direction[0]
            pos[:, jix[name], 2] += sign * 0.3 * a * s * direction[2]
            pos[:, jix[name], 1] += 0.08 * a * np.maximum(sign * s, 0.0)
        pos[:, :, 1] += (bob * np.sin(2.0 * phi))[:, None]
    elif c == "jump":
        h = 0.45 * a * lift ** 2
        pos[:, :, 1] += h[:, None]
        for name in ("l_hand", "r_hand"):
            pos[:, jix[name], 1] += 0.30 * a * lift
        for name in ("l_elbow", "r_elbow"):
            pos[:, jix[name], 1] += 0.15 * a * lift
    elif c in ("wave-left", "wave-right"):
        hand = "l_hand" if c == "wave-left" else "r_hand"
        elbow = "l_elbow" if c == "wave-left" else "r_elbow"
        side = -1.0 if c == "wave-left" else 1.0
        pos[:, jix[hand], 0] += side * 0.18 * a * s
        pos[:, jix[hand], 1] += 0.60 * a + 0.12 * a * cpos
        pos[:, jix[elbow], 0] += side * 0.08 * a * s
        pos[:, jix[elbow], 1] += 0.30 * a + 0.05 * a * cpos
    elif c == "turn":
        # sweep rate kept nearly parameter-independent so the class stays compact
        omega = np.sign(spec.heading + 1e-12) * (0.7 + 0.25 * a * f)
        theta = omega * t
        ct, st = np.cos(theta), np.sin(theta)
        rel = pos - sk.base_pose[jix["root"]][None, None, :] * np.array([1.0, 0.0, 1.0])
        x, z = rel[:, :, 0].copy(), rel[:, :, 2].copy()
        pos[:, :, 0] = ct[:, None] * x + st[:, None] * z
        pos[:, :, 2] = -st[:, None] * x + ct[:, None] * z
        rot6[:, :, 0] = ct[:, None]
        rot6[:, :, 2] = -st[:, None]
        rot6[:, :, 3] = 0.0
        rot6[:, :, 4] = 1.0
        rot6[:, :, 5] = 0.0
        rot6[:, :, 1] = 0.0
    elif c == "squat":
        drop = 0.5 * a * (1.0 - np.cos(phi)) / 2.0
        for name in ("root", "spine", "head", "l_hip", "r_hip", "l_shoulder", "r_shoulder",
                     "l_elbow", "r_elbow", "l_hand", "r_hand"):
            pos[:, jix[name], 1] -= drop
    elif c == "kick":
        k = lift
        pos[:, jix["r_foot"], 2] += 0.5 * a * k
        pos[:, jix["r_foot"], 1] += 0.25 * a * k
        pos[:, jix["r_hip"], 2] += 0.08 * a * k
        pos[:, jix["spine"], 2] -= 0.05 * a * k

    feats = _positions_to_features(pos, rot6, fps)
    return MotionSequence(
        features=feats,
        caption=make_caption(spec),
        class_id=spec.class_id,
        mirrored=False,
        spec={"class_name": spec.class_name, "amplitude": spec.amplitude,
              "frequency": spec.frequency, "heading": spec.heading, "duration": spec.duration},
    )


def mirror_caption(caption: str) -> str:
    out = []
    for w in caption.split(" "):
        if w == "left":
            out.append("right")
        elif w == "right":
            out.append("left")
        else:
            out.append(w)
    return " ".join(out)


def mirror_augment(m: MotionSequence, skeleton: Skeleton | None = None) -> MotionSequence:
    """Reflect a motion laterally: swap paired joints, flip lateral signs.

    An involution on the features; chiral classes swap labels so captions
    stay truthful.
    """
    sk = skeleton or default_skeleton()
    J = m.n_joints
    covered = set(sk.selfs)
    for a, b in sk.pairs:
        covered.update((a, b))
    if covered != set(range(J)):
        missing = sorted(set(range(J)) - covered)
        raise ValueError(f"skeleton leaves joints unpaired: {missing}")

    f = m.features.reshape(m.n_frames, J, FEATS_PER_JOINT).copy()
    for a, b in sk.pairs:
        f[:, [a, b]] = f[:, [b, a]]
    f = f * MIRROR_SIGNS[None, None, :]
    new_class = MIRROR_CLASS[m.class_name]
    return MotionSequence(
        features=f.reshape(m.n_frames, J * FEATS_PER_JOINT),
        caption=mirror_caption(m.caption),
        class_id=CLASS_NAMES.index(new_class),
        mirrored=not m.mirrored,
        spec=dict(m.spec),
    )


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    records: list
    splits: dict            # name -> list of record indices
    skeleton: Skeleton
    fps: float = 20.0

    def split_records(self, name):
        return [self.records[i] for i in self.splits[name]]


SPLIT_RATIOS = (("train", 0.8), ("val", 0.15), ("test", 0.05))


def _stratified_split(class_ids, rng):
    """Per-class largest-remainder allocation hitting global ratio targets.

    Guarantees every class lands in every split (so each class needs at
    least as many records as there are splits).
    """
    n = len(class_ids)
    n_classes = len(set(class_ids))
    names = [name for name, _ in SPLIT_RATIOS]
    ratios = [r for _, r in SPLIT_RATIOS]
    targets = [round(n * ratios[0]), round(n * ratios[1])]
    targets.append(n - sum(targets))
    # class coverage binds at tiny corpus sizes: each split holds >= 1 record
    # per class, so lift small targets and pay out of the training share
    for i in (1, 2):
        if targets[i] < n_classes:
            targets[0] -= n_classes - targets[i]
            targets[i] = n_classes

    by_class = {}
    for idx, cid in enumerate(class_ids):
        by_class.setdefault(cid, []).append(idx)
    order = sorted(by_class)
    for cid in order:
        rng.shuffle(by_class[cid])

    plan = {}
    for cid in order:
        k = len(by_class[cid])
        if k < len(names):
            raise ValueError(f"class {cid} has {k} records; need one per split")
        raw = [k * r for r in ratios]
        cnt = [max(1, int(np.floor(x))) for x in raw]
        rem = [x - c for x, c in zip(raw, cnt)]
        while sum(cnt) < k:
            j = int(np.argmax(rem))
            cnt[j] += 1
            rem[j] -= 1.0
        while sum(cnt) > k:
            j = int(np.argmax([c - x for c, x in zip(cnt, raw)]))
            if cnt[j] <= 1:
                j = int(np.argmax(cnt))
            cnt[j] -= 1
        plan[cid] = cnt

    # repair global totals one record at a time, keeping >=1 per class/split
    totals = [sum(plan[cid][i] for cid in order) for i in range(len(names))]
    guard = 0
    while totals != targets and guard < 10_000:
        i = next(k for k in range(len(names)) if totals[k] > targets[k])
        j = next(k for k in range(len(names)) if totals[k] < targets[k])
        cid = next(c for c in order if plan[c][i] > 1)
        plan[cid][i] -= 1
        plan[cid][j] += 1
        totals[i] -= 1
        totals[j] += 1
        guard += 1

    splits = {name: [] for name in names}
    for cid in order:
        pool = by_class[cid]
        o = 0
        for si, name in enumerate(names):
            splits[name].extend(pool[o:o + plan[cid][si]])
            o += plan[cid][si]
    for name in splits:
        splits[name].sort()
    return splits


def generate_corpus(per_class=32, seed=0, skeleton=None, t_range=(48, 72), fps=20.0,
                    classes=CLASS_NAMES) -> Corpus:
    """Procedural corpus: per-class specs plus mirrored variants, then split."""
    if per_class < 2:
        raise ValueError("per_class must be >= 2")
    sk = skeleton or default_skeleton()
    rng = np.random.default_rng(seed)
    records = []
    for cname in classes:
        (a_lo, a_hi), (f_lo, f_hi), (h_lo, h_hi) = CLASS_RANGES[cname]
        for _ in range(per_class):
            spec = MotionSpec(
                class_name=cname,
                amplitude=float(rng.uniform(a_lo, a_hi)),
                frequency=float(rng.uniform(f_lo, f_hi)),
                heading=float(rng.uniform(h_lo, h_hi)),
                duration=int(rng.integers(t_range[0], t_range[1] + 1)),
            )
            m = generate_motion(spec, seed=int(rng.integers(0, 2**31)), skeleton=sk, fps=fps)
            records.append(m)
    mirrored = [mirror_augment(m, sk) for m in records]
    records.extend(mirrored)
    splits = _stratified_split([m.class_id for m in records], np.random.default_rng(seed + 1))
    return Corpus(records=records, splits=splits, skeleton=sk, fps=fps)


def save_corpus(corpus: Corpus, path):
    header = {
        "version": CORPUS_VERSION,
        "fps": corpus.fps,
        "skeleton": corpus.skeleton.to_header(),
        "splits": {k: list(v) for k, v in corpus.splits.items()},
        "records": [
            {"caption": m.caption, "class_id": m.class_id, "mirrored": m.mirrored, "spec": m.spec}
            for m in corpus.records
        ],
    }
    blobs = {f"rec/{i:05d}": m.features for i, m in enumerate(corpus.records)}
    save_container(path, "corpus", header, blobs)


def load_corpus(path) -> Corpus:
    header, blobs = load_container(path, "corpus")
    if header.get("version") != CORPUS_VERSION:
        raise ContainerError(f"{path}: unsupported corpus version {header.get('version')}")
    records = []
    for i, meta in enumerate(header["records"]):
        records.append(MotionSequence(
            features=blobs[f"rec/{i:05d}"],
            caption=meta["caption"],
            class_id=meta["class_id"],
            mirrored=meta["mirrored"],
            spec=meta["spec"],
        ))
    return Corpus(
        records=records,
        splits={k: list(v) for k, v in header["splits"].items()},
        skeleton=Skeleton.from_header(header["skeleton"]),
        fps=header["fps"],
    )


def corpus_equal(a: Corpus, b: Corpus) -> bool:
    if a.splits != b.splits or len(a.records) != len(b.records):
        return False
    for ma, mb in zip(a.records, b.records):
        if ma.features.tobytes() != mb.features.tobytes():
            return False
        if (ma.caption, ma.class_id, ma.mirrored, ma.spec) != (mb.caption, mb.class_id, mb.mirrored, mb.spec):
            return False
    return True


# ---------------------------------------------------------------------------
# nearest-centroid class probe
# ---------------------------------------------------------------------------

def resample_features(features: np.ndarray, n_frames: int) -> np.ndarray:
    """Linear time-resampling so variable-length motions flatten to one size."""
    T = features.shape[0]
    if T == n_frames:
        return features.copy()
    src = np.linspace(0.0, 1.0, T)
    dst = np.linspace(0.0, 1.0, n_frames)
    out = np.empty((n_frames, features.shape[1]))
    for c in range(features.shape[1]):
        out[:, c] = np.interp(dst, src, features[:, c])
    return out


class CentroidClassifier:
    """Per-class mean of time-resampled flattened features."""

    def __init__(self, n_frames=32):
        self.n_frames = n_frames
        self.centroids = None
        self.class_ids = None

    def _flat(self, m_or_feats):
        feats = m_or_feats.features if isinstance(m_or_feats, MotionSequence) else m_or_feats
        return resample_features(feats, self.n_frames).ravel()

    def fit(self, records):
        by_class = {}
        for m in records:
            by_class.setdefault(m.class_id, []).append(self._flat(m))
        self.class_ids = sorted(by_class)
        self.centroids = np.stack([np.mean(by_class[c], axis=0) for c in self.class_ids])
        return self

    def predict(self, m_or_feats) -> int:
        x = self._flat(m_or_feats)
        d = np.linalg.norm(self.centroids - x[None, :], axis=1)
        return self.class_ids[int(np.argmin(d))]

    def accuracy(self, records) -> float:
        hits = sum(1 for m in records if self.predict(m) == m.class_id)
        return hits / max(len(records), 1)
