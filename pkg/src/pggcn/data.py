"""NTU RGB+D skeleton ingestion, preprocessing, splits and synthetic data."""
from __future__ import annotations

import os
import re
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import (ConfigurationError, DataError, DegenerateSkeletonWarning,
                         MetadataError, ParseError)
from .tensor import load_tensor, save_tensor

MAX_FRAMES = 200
MAX_BODIES = 2
NTU_JOINTS = 25
# Kinect v2 color frame, used to map colorX/colorY to [-1, 1]
IMAGE_SIZE = (1920.0, 1080.0)

BODY_FIELDS = ("bodyID", "clipedEdges", "handLeftConfidence", "handLeftState",
               "handRightConfidence", "handRightState", "isResticted", "leanX",
               "leanY", "trackingState")
JOINT_FIELDS = ("x", "y", "z", "depthX", "depthY", "colorX", "colorY", "orientationW",
                "orientationX", "orientationY", "orientationZ", "trackingState")

NAME_PATTERN = re.compile(r"S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})")


@dataclass(frozen=True)
class ClipMeta:
    setup: int
    camera: int
    performer: int
    replication: int
    action: int

    @classmethod
    def from_name(cls, name) -> "ClipMeta":
        m = NAME_PATTERN.search(os.path.basename(str(name)))
        if m is None:
            raise MetadataError(f"{name!r} does not match SsssCcccPpppRrrrAaaa")
        return cls(*(int(g) for g in m.groups()))

    @property
    def stem(self):
        return (f"S{self.setup:03d}C{self.camera:03d}P{self.performer:03d}"
                f"R{self.replication:03d}A{self.action:03d}")


@dataclass
class Body:
    header: tuple                 # raw tokens of the body info line
    joints: np.ndarray            # [J, 12] per-joint record

    @property
    def body_id(self) -> str:
        return self.header[0]

    @property
    def xyz(self):
        return self.joints[:, 0:3]

    @property
    def color_xy(self):
        return self.joints[:, 5:7]

    def __eq__(self, other):
        return (isinstance(other, Body) and self.header == other.header
                and np.array_equal(self.joints, other.joints))


@dataclass
class RawClip:
    frames: list                  # list of frames, each a list of Body
    meta: ClipMeta | None = None
    name: str = ""

    @property
    def num_frames(self):
        return len(self.frames)

    def __eq__(self, other):
        return (isinstance(other, RawClip) and self.meta == other.meta
                and self.frames == other.frames)


@dataclass
class Sample:
    skeleton: np.ndarray          # [T, N, 3, M]
    pose: np.ndarray              # [T, N, 2, M]
    label: int
    name: str = ""
    length: int | None = None


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

class _Lines:
    def __init__(self, text, path):
        self.lines = text.splitlines()
        self.pos = 0
        self.path = path

    def next(self, what):
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file while reading {what}",
                             self.pos + 1, self.path)
        self.pos += 1
        return self.lines[self.pos - 1].split()

    def int(self, what):
        tok = self.next(what)
        if len(tok) != 1:
            raise ParseError(f"expected a single integer for {what}", self.pos, self.path)
        try:
            val = int(tok[0])
        except ValueError:
            raise ParseError(f"bad {what}: {tok[0]!r}", self.pos, self.path) from None
        if val < 0:
            raise ParseError(f"negative {what}", self.pos, self.path)
        return val


def parse_skeleton_text(text, path="<string>", require_meta=False) -> RawClip:
    src = _Lines(text, path)
    n_frames = src.int("frame count")
    frames = []
    for _ in range(n_frames):
        bodies = []
        for _ in range(src.int("body count")):
            header = tuple(src.next("body header"))
            if len(header) != len(BODY_FIELDS):
                raise ParseError(f"body header has {len(header)} fields, expected "
                                 f"{len(BODY_FIELDS)}", src.pos, path)
            n_joints = src.int("joint count")
            joints = np.empty((n_joints, len(JOINT_FIELDS)))
            for j in range(n_joints):
                tok = src.next("joint record")
                if len(tok) != len(JOINT_FIELDS):
                    raise ParseError(f"joint record has {len(tok)} fields, expected "
                                     f"{len(JOINT_FIELDS)}", src.pos, path)
                try:
                    joints[j] = [float(t) for t in tok]
                except ValueError:
                    raise ParseError("non-numeric joint field", src.pos, path) from None
            bodies.append(Body(header, joints))
        frames.append(bodies)
    if any(line.strip() for line in src.lines[src.pos:]):
        raise ParseError("trailing content after last frame", src.pos + 1, path)
    name = Path(str(path)).name
    meta = None
    try:
        meta = ClipMeta.from_name(name)
    except MetadataError:
        if require_meta:
            raise
    return RawClip(frames, meta, name)


def parse_skeleton_file(path, require_meta=True) -> RawClip:
    """Parse an NTU ``.skeleton`` text file; metadata comes from the filename."""
    with open(path) as fh:
        text = fh.read()
    return parse_skeleton_text(text, path, require_meta)


def _fmt(v):
    return repr(float(v))


def serialize_clip(clip: RawClip) -> str:
    out = [str(clip.num_frames)]
    for bodies in clip.frames:
        out.append(str(len(bodies)))
        for b in bodies:
            out.append(" ".join(b.header))
            out.append(str(len(b.joints)))
            out.extend(" ".join(_fmt(v) for v in row) for row in b.joints)
    return "\n".join(out) + "\n"


def write_skeleton_file(path, clip: RawClip) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_clip(clip))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def body_motion(clip: RawClip) -> dict:
    """Sum of frame-to-frame joint displacement per body id."""
    last, motion, order = {}, {}, []
    for bodies in clip.frames:
        for b in bodies:
            bid = b.body_id
            if bid not in motion:
                motion[bid] = 0.0
                order.append(bid)
            prev = last.get(bid)
            if prev is not None and prev.shape == b.xyz.shape:
                motion[bid] += float(np.linalg.norm(b.xyz - prev, axis=1).sum())
            last[bid] = b.xyz
    return {bid: motion[bid] for bid in order}


def pad_and_select(clip: RawClip, max_frames=MAX_FRAMES, max_bodies=MAX_BODIES,
                   num_joints=NTU_JOINTS, image_size=IMAGE_SIZE, label=None) -> Sample:
    """Fixed-size arrays from a parsed clip.

    Keeps the first ``max_frames`` frames, zero-pads the rest, and keeps the
    ``max_bodies`` bodies with the largest motion (ordered by motion, ties by
    first appearance).  Pose is colorX/colorY scaled to [-1, 1].
    """
    if clip.num_frames == 0:
        raise DataError(f"{clip.name or 'clip'} has no frames")
    motion = body_motion(clip)
    first_seen = {bid: i for i, bid in enumerate(motion)}
    ranked = sorted(motion, key=lambda b: (-motion[b], first_seen[b]))[:max_bodies]
    slot = {bid: m for m, bid in enumerate(ranked)}
    skel = np.zeros((max_frames, num_joints, 3, max_bodies))
    pose = np.zeros((max_frames, num_joints, 2, max_bodies))
    scale = np.array(image_size, dtype=float)
    length = min(clip.num_frames, max_frames)
    for t in range(length):
        for b in clip.frames[t]:
            m = slot.get(b.body_id)
            if m is None:
                continue
            if len(b.joints) != num_joints:
                raise DataError(f"{clip.name}: frame {t} body has {len(b.joints)} joints, "
                                f"expected {num_joints}")
            skel[t, :, :, m] = b.xyz
            pose[t, :, :, m] = 2.0 * b.color_xy / scale - 1.0
    if label is None:
        label = clip.meta.action - 1 if clip.meta is not None else -1
    return Sample(skel, pose, int(label), clip.name, length)


def _valid_mask(skeleton):
    # [T, M]: frame holds a tracked body
    return np.any(skeleton != 0, axis=(1, 2))


def alignment_transform(skeleton, hip=0, spine=1, left_shoulder=4, right_shoulder=8):
    """Origin and rotation taking body 1 of the first valid frame to the canonical view.

    Returns ``(origin, R, ok)``; ``ok`` is False when the hip-to-spine
    vector vanishes, in which case the identity is returned.
    """
    valid = _valid_mask(skeleton)[:, 0]
    if not valid.any():
        return np.zeros(3), np.eye(3), False
    t0 = int(np.argmax(valid))
    frame = skeleton[t0, :, :, 0]
    origin = frame[hip].copy()
    z = frame[spine] - origin
    nz = np.linalg.norm(z)
    if nz < 1e-8:
        return np.zeros(3), np.eye(3), False
    z = z / nz
    x = frame[right_shoulder] - frame[left_shoulder]
    x = x - (x @ z) * z
    nx = np.linalg.norm(x)
    if nx < 1e-8:
        # shoulders collinear with the spine: any perpendicular will do
        e = np.eye(3)[int(np.argmin(np.abs(z)))]
        x = e - (e @ z) * z
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    return origin, np.stack([x, y, z]), True


def view_align(sample: Sample, **joints) -> Sample:
    """Apply one rigid transform per clip: hip of body 1 to the origin,
    hip-to-spine along +z, shoulder line in the xz-plane.  Zero (padding)
    frames and absent bodies stay zero; pose is untouched.
    """
    skel = sample.skeleton
    origin, rot, ok = alignment_transform(skel, **joints)
    if not ok:
        warnings.warn(f"{sample.name or 'sample'}: degenerate spine, view alignment skipped",
                      DegenerateSkeletonWarning, stacklevel=2)
        return Sample(skel.copy(), sample.pose.copy(), sample.label, sample.name,
                      sample.length)
    valid = _valid_mask(skel)
    moved = np.einsum("tjcm,dc->tjdm", skel - origin[None, None, :, None], rot)
    out = np.where(valid[:, None, None, :], moved, 0.0)
    return Sample(out, sample.pose.copy(), sample.label, sample.name, sample.length)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

BENCHMARKS = {
    "xsub": ("performer", 60),
    "xview": ("camera", 60),
    "xsub120": ("performer", 120),
    "xset120": ("setup", 120),
}
_ALIASES = {"x-sub": "xsub", "x-view": "xview", "x-sub120": "xsub120",
            "x-setup120": "xset120", "x-set120": "xset120", "xsetup120": "xset120"}


def canonical_benchmark(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in BENCHMARKS:
        raise ConfigurationError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    return key


def load_id_list(path=None, benchmark="xsub") -> list:
    """Training performer ids: from ``path`` or the bundled list for ``benchmark``."""
    if path is None:
        fname = "xsub120_train_subjects.txt" if benchmark == "xsub120" else "xsub_train_subjects.txt"
        text = resources.files("pggcn").joinpath("splits", fname).read_text()
    else:
        text = Path(path).read_text()
    ids = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        ids.extend(int(tok) for tok in line.replace(",", " ").split())
    return ids


@dataclass
class SplitManifest:
    benchmark: str
    id_kind: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def to_text(self):
        lines = [f"benchmark = {self.benchmark}", f"id_kind = {self.id_kind}"]
        lines += [f"train {n}" for n in self.train]
        lines += [f"test {n}" for n in self.test]
        return "\n".join(lines) + "\n"


def make_split(names, benchmark, train_subjects=None, train_cameras=(2, 3),
               train_setup_parity="even") -> SplitManifest:
    """Partition clip names into train/test for one benchmark."""
    key = canonical_benchmark(benchmark)
    kind, _ = BENCHMARKS[key]
    if kind == "performer" and train_subjects is None:
        train_subjects = load_id_list(benchmark=key)
    if train_setup_parity not in ("even", "odd"):
        raise ConfigurationError("setup parity must be 'even' or 'odd'")
    subjects = set(train_subjects or ())
    cameras = set(train_cameras)
    want = 0 if train_setup_parity == "even" else 1
    train, test = [], []
    for name in sorted(set(names)):
        meta = ClipMeta.from_name(name)
        if kind == "performer":
            is_train = meta.performer in subjects
        elif kind == "camera":
            is_train = meta.camera in cameras
        else:
            is_train = meta.setup % 2 == want
        (train if is_train else test).append(name)
    return SplitManifest(key, kind, train, test)


# ---------------------------------------------------------------------------
# datasets and cache
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    skeleton: np.ndarray          # [S, T, N, 3, M]
    pose: np.ndarray              # [S, T, N, 2, M]
    labels: np.ndarray            # [S]
    names: list
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.skeleton[i], self.pose[i], int(self.labels[i]), self.names[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.skeleton[idx], self.pose[idx], self.labels[idx],
                       [self.names[i] for i in idx], self.num_classes)

    @classmethod
    def from_samples(cls, samples, num_classes) -> "Dataset":
        if not samples:
            raise DataError("no samples")
        return cls(np.stack([s.skeleton for s in samples]), np.stack([s.pose for s in samples]),
                   np.array([s.label for s in samples], dtype=np.int64),
                   [s.name for s in samples], int(num_classes))


def write_cache(directory, dataset: Dataset, extra: dict | None = None) -> None:
    """Directory of binary tensors plus ``manifest.txt`` in canonical text."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["format = pggcn-cache 1", f"num_classes = {dataset.num_classes}",
             f"num_samples = {len(dataset)}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k} = {v}")
    for name, label, sk, po in zip(dataset.names, dataset.labels, dataset.skeleton,
                                   dataset.pose):
        save_tensor(d / f"{name}.skeleton.bin", sk)
        save_tensor(d / f"{name}.pose.bin", po)
        lines.append(f"sample {name} {int(label)}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_cache(directory) -> Dataset:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"{d}: no manifest.txt")
    header, entries = {}, []
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("sample "):
            _, name, label = line.split()
            entries.append((name, int(label)))
        elif "=" in line:
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
        else:
            raise ParseError(f"bad manifest line {line!r}", n, manifest)
    if header.get("format") != "pggcn-cache 1":
        raise DataError(f"{manifest}: unsupported cache format")
    if not entries:
        raise DataError(f"{manifest}: empty dataset")
    samples = [Sample(load_tensor(d / f"{name}.skeleton.bin"),
                      load_tensor(d / f"{name}.pose.bin"), label, name)
               for name, label in entries]
    return Dataset.from_samples(samples, int(header["num_classes"]))


def scan_skeleton_files(data_dir):
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir()
                  if p.suffix == ".skeleton" and NAME_PATTERN.search(p.name))


def _load_one(args):
    path, align = args
    sample = pad_and_select(parse_skeleton_file(path))
    sample.name = Path(path).name[: -len(".skeleton")]
    if align:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateSkeletonWarning)
            sample = view_align(sample)
    return sample


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def load_ntu(data_dir, benchmark, train_subjects=None, align=None, workers=1):
    """Parse, preprocess and split a directory of NTU files.

    View alignment defaults to on for the cross-view benchmark only.
    """
    key = canonical_benchmark(benchmark)
    paths = scan_skeleton_files(data_dir)
    if not paths:
        raise DataError(f"no .skeleton files in {data_dir}")
    if align is None:
        align = key == "xview"
    split = make_split([p.name[: -len(".skeleton")] for p in paths], key, train_subjects)
    samples = _map(_load_one, [(p, align) for p in paths], workers)
    by_name = {s.name: s for s in samples}
    n_classes = BENCHMARKS[key][1]
    parts = []
    for names in (split.train, split.test):
        parts.append(Dataset.from_samples([by_name[n] for n in names], n_classes)
                     if names else None)
    return parts[0], parts[1], split


def check_directory(data_dir, workers=1):
    """Parse every ``.skeleton`` file; return ``[(name, error-or-None)]``."""
    paths = scan_skeleton_files(data_dir)
    return _map(_check_one, paths, workers)


def _check_one(path):
    try:
        pad_and_select(parse_skeleton_file(path))
        return path.name, None
    except (DataError, OSError) as exc:
        return path.name, str(exc)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def generate_synthetic(num_classes, samples_per_class, num_joints=11, num_frames=32, seed=0,
                       pose_noise=0.01, joint_noise=0.01, amplitude=0.5, num_bodies=1,
                       name_prefix="syn") -> Dataset:
    """Chain skeletons where the class decides which joint oscillates.

    The chain rests along +y with unit spacing.  In a sample of class ``c``
    joint ``j_c`` swings in the xz-plane with ``f_c`` whole cycles over the
    clip and a random phase, so every class has the same time-averaged
    skeleton.  Pose is the xy projection of the skeleton plus Gaussian noise.
    Additional bodies, if requested, are left empty.
    """
    if min(num_classes, samples_per_class, num_joints, num_frames, num_bodies) < 1:
        raise ConfigurationError("synthetic dataset parameters must be positive")
    rng = np.random.default_rng(seed)
    movers = np.round(np.linspace(1, num_joints - 1, num_classes)).astype(int) % num_joints
    freqs = 1 + np.arange(num_classes) % 3
    t = np.arange(num_frames) / num_frames
    rest = np.zeros((num_joints, 3))
    rest[:, 1] = np.arange(num_joints)
    n = num_classes * samples_per_class
    skel = np.zeros((n, num_frames, num_joints, 3, num_bodies))
    pose = np.zeros((n, num_frames, num_joints, 2, num_bodies))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    for i, c in enumerate(labels):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = amplitude * rng.uniform(0.8, 1.2)
        seq = np.broadcast_to(rest, (num_frames, num_joints, 3)).copy()
        angle = 2.0 * np.pi * freqs[c] * t + phase
        seq[:, movers[c], 0] += amp * np.sin(angle)
        seq[:, movers[c], 2] += 0.5 * amp * np.cos(angle)
        seq += joint_noise * rng.standard_normal(seq.shape)
        skel[i, ..., 0] = seq
        pose[i, ..., 0] = seq[..., :2] + pose_noise * rng.standard_normal((num_frames, num_joints, 2))
    names = [f"{name_prefix}{i:05d}" for i in range(n)]
    return Dataset(skel, pose, labels.astype(np.int64), names, int(num_classes))
