"""The full pose-guided GCN: input encodings, embedding towers, fusion, classifier."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from .attention import MODES, PoseGuidedAttention
from .blocks import BatchNorm, GCNBlock, Layer, Linear, Sequential, STGCNBlock
from .exceptions import ConfigurationError, DataError, DimensionError
from .graph import SkeletonGraph, build_ntu_graph, chain_graph, normalize_adjacency
from .tensor import as_tensor, read_tensor, write_tensor

STREAM_SETS = ("pose", "skeleton", "both")
SUBSTREAMS = ("joint", "velocity", "bone")
SUBSTREAM_CHANNELS = {"joint": 3, "velocity": 6, "bone": 6, "pose": 2}
BONE_EPS = 1e-8


@dataclass
class PGGCNConfig:
    num_classes: int
    num_joints: int = 25
    max_frames: int = 200
    embed_channels: tuple = (64, 64, 64)
    classifier_channels: tuple = (128, 256)
    temporal_kernel: int = 9
    attention: str = "dynamic"
    streams: str = "both"
    substreams: tuple = SUBSTREAMS
    partitions: int = 3
    center_joint: int | None = None
    graph_edges: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        self.embed_channels = tuple(int(c) for c in self.embed_channels)
        self.classifier_channels = tuple(int(c) for c in self.classifier_channels)
        self.substreams = tuple(self.substreams)
        if self.graph_edges is not None:
            self.graph_edges = tuple((int(i), int(j)) for i, j in self.graph_edges)
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.num_joints < 2:
            raise ConfigurationError("num_joints must be at least 2")
        if self.max_frames < 2:
            raise ConfigurationError("max_frames must be at least 2")
        if self.attention not in MODES:
            raise ConfigurationError(f"attention must be one of {MODES}")
        if self.streams not in STREAM_SETS:
            raise ConfigurationError(f"streams must be one of {STREAM_SETS}")
        if self.streams != "pose":
            if not self.substreams:
                raise ConfigurationError("at least one skeleton sub-stream is required")
            bad = set(self.substreams) - set(SUBSTREAMS)
            if bad:
                raise ConfigurationError(f"unknown sub-streams {sorted(bad)}")
        if len(self.embed_channels) != 3 or len(self.classifier_channels) != 2:
            raise ConfigurationError("embed_channels needs 3 widths, classifier_channels 2")

    def graph(self) -> SkeletonGraph:
        if self.graph_edges is not None:
            center = self.center_joint or 0
            return SkeletonGraph.from_edges(self.num_joints, self.graph_edges, center,
                                            self.partitions)
        if self.num_joints == 25:
            g = build_ntu_graph(self.partitions)
            if self.center_joint is not None and self.center_joint != g.center_joint:
                g = SkeletonGraph.from_edges(25, g.edges, self.center_joint, self.partitions)
            return g
        center = self.num_joints // 2 if self.center_joint is None else self.center_joint
        return chain_graph(self.num_joints, center, self.partitions)

    # canonical text: one ``key = value`` per line, field order
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                s = "none"
            elif f.name == "graph_edges":
                s = " ".join(f"{i}-{j}" for i, j in v)
            elif isinstance(v, tuple):
                s = ",".join(str(x) for x in v)
            else:
                s = str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PGGCNConfig":
        kv = parse_key_values(text)
        known = {f.name for f in fields(cls)}
        unknown = set(kv) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        out = {}
        for key, s in kv.items():
            if s == "none":
                out[key] = None
            elif key in ("embed_channels", "classifier_channels"):
                out[key] = tuple(int(x) for x in s.split(","))
            elif key == "substreams":
                out[key] = tuple(x for x in s.split(",") if x)
            elif key == "graph_edges":
                out[key] = tuple(tuple(int(y) for y in e.split("-")) for e in s.split())
            elif key in ("attention", "streams"):
                out[key] = s
            else:
                out[key] = int(s)
        return cls(**out)


def parse_key_values(text: str) -> dict:
    kv = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def preprocess_substreams(skeleton, graph: SkeletonGraph | None = None, parents=None) -> dict:
    """Joint, velocity and bone encodings of a ``[..., T, N, 3]`` sequence.

    velocity = concat(x[t+1] - x[t], x[t+2] - x[t]), zero where the later
    frame does not exist; bone = concat(b, b / (|b| + 1e-8)) with
    ``b[i] = x[i] - x[parent(i)]`` (zero for the center joint).
    """
    x = as_tensor(skeleton)
    if x.ndim < 3 or x.shape[-1] != 3:
        raise DimensionError(f"skeleton must be [..., T, N, 3], got {x.shape}")
    if parents is None:
        if graph is None:
            raise ConfigurationError("need a graph or a parent table")
        if graph.num_joints != x.shape[-2]:
            raise DimensionError(
                f"skeleton has {x.shape[-2]} joints, graph has {graph.num_joints}")
        parents = graph.parents()
    v1 = np.zeros_like(x)
    v2 = np.zeros_like(x)
    v1[..., :-1, :, :] = x[..., 1:, :, :] - x[..., :-1, :, :]
    v2[..., :-2, :, :] = x[..., 2:, :, :] - x[..., :-2, :, :]
    bone = x - x[..., parents, :]
    norm = np.sqrt((bone * bone).sum(axis=-1, keepdims=True))
    cos = bone / (norm + BONE_EPS)
    return {
        "joint": x.copy(),
        "velocity": np.concatenate([v1, v2], axis=-1),
        "bone": np.concatenate([bone, cos], axis=-1),
    }


def _fold_bodies(x, channels):
    """``[B, T, N, C(, M)]`` -> ``([B*M, T, N, C], M)``."""
    x = as_tensor(x)
    if x.ndim == 4:
        x = x[..., None]
    if x.ndim != 5 or x.shape[3] != channels:
        raise DimensionError(f"expected [B, T, N, {channels}, M] input, got {x.shape}")
    b, t, n, c, m = x.shape
    return np.ascontiguousarray(x.transpose(0, 4, 1, 2, 3)).reshape(b * m, t, n, c), m


class PGGCNModel(Layer):
    """Multi-stream skeleton/pose network with pose-guided attention fusion.

    Inputs are batches ``skeleton [B, T, N, 3, M]`` and ``pose [B, T, N, 2, M]``
    (``M`` bodies; the body axis may be omitted).  Bodies are folded into the
    batch, processed independently and averaged after global pooling.
    """

    def __init__(self, config: PGGCNConfig):
        self.config = config
        self.graph = config.graph()
        if self.graph.num_joints != config.num_joints:
            raise ConfigurationError("graph joint count differs from num_joints")
        self._parents = self.graph.parents()
        adj = normalize_adjacency(self.graph)
        rng = np.random.default_rng(config.seed)
        e0, e1, e2 = config.embed_channels
        kt = config.temporal_kernel

        def tower(cin):
            return Sequential(STGCNBlock(cin, e0, adj, kt, rng=rng),
                              GCNBlock(e0, e1, adj, rng), GCNBlock(e1, e2, adj, rng))

        self.use_pose = config.streams in ("pose", "both")
        self.skeleton_streams = list(config.substreams) if config.streams != "pose" else []
        self.input_bn = [BatchNorm(SUBSTREAM_CHANNELS[s]) for s in self.skeleton_streams]
        self.towers = [tower(SUBSTREAM_CHANNELS[s]) for s in self.skeleton_streams]
        if self.use_pose:
            self.pose_bn = BatchNorm(2)
            self.pose_tower = tower(2)
        self.fusion = None
        if config.streams == "both":
            if config.attention == "none":
                self.fusion = "concat"
                self.mixers = [Linear(2 * e2, e2, rng) for _ in self.skeleton_streams]
            else:
                self.fusion = "attention"
                self.attention = [PoseGuidedAttention(config.num_joints, config.attention)
                                  for _ in self.skeleton_streams]
        merged = e2 * max(1, len(self.skeleton_streams))
        c0, c1 = config.classifier_channels
        self.classifier = Sequential(GCNBlock(merged, c0, adj, rng), GCNBlock(c0, c1, adj, rng))
        self.fc = Linear(c1, config.num_classes, rng)
        self._cache = None

    # ------------------------------------------------------------------
    def forward(self, skeleton, pose=None, fuse_pose=True):
        """Return logits ``[B, num_classes]``.

        ``fuse_pose=False`` drops the pose contribution to the skeleton
        features (attention term, or the pose half of the concatenation)
        while leaving every parameter in place.
        """
        feats, fp, bodies, n_batch = [], None, 1, None
        if self.use_pose:
            if pose is None:
                raise DataError("this model configuration needs pose input")
            p, bodies = _fold_bodies(pose, 2)
            n_batch = p.shape[0] // bodies
            self._check_frames_joints(p)
            fp = self.pose_tower(self.pose_bn(p))
        if self.skeleton_streams:
            s, bodies = _fold_bodies(skeleton, 3)
            n_batch = s.shape[0] // bodies
            self._check_frames_joints(s)
            if fp is not None and fp.shape[0] != s.shape[0]:
                raise DimensionError("skeleton and pose batches differ")
            subs = preprocess_substreams(s, parents=self._parents)
            for i, name in enumerate(self.skeleton_streams):
                fs = self.towers[i](self.input_bn[i](subs[name]))
                if self.fusion == "attention":
                    fs = self.attention[i].forward(fs, fp) if fuse_pose else fs
                elif self.fusion == "concat":
                    guide = fp if fuse_pose else np.zeros_like(fp)
                    fs = self.mixers[i](np.concatenate([fs, guide], axis=-1))
                feats.append(fs)
            merged = np.concatenate(feats, axis=-1) if len(feats) > 1 else feats[0]
        else:
            merged = fp
        h = self.classifier(merged)
        pooled = h.mean(axis=(1, 2)).reshape(n_batch, bodies, -1).mean(axis=1)
        self._cache = (h.shape, bodies, fuse_pose)
        return self.fc(pooled)

    def _check_frames_joints(self, x):
        if x.shape[2] != self.config.num_joints:
            raise DimensionError(
                f"input has {x.shape[2]} joints, model expects {self.config.num_joints}")
        if x.shape[1] < 1:
            raise DimensionError("input has no frames")

    def backward(self, grad_logits):
        h_shape, bodies, fuse_pose = self._cache
        g_pooled = self.fc.backward(grad_logits)
        bm, t, n, c = h_shape
        g = np.repeat(g_pooled / bodies, bodies, axis=0) / (t * n)
        g_h = np.broadcast_to(g[:, None, None, :], h_shape).copy()
        g_merged = self.classifier.backward(g_h)
        if not self.skeleton_streams:
            self.pose_tower_backward(g_merged)
            return
        e2 = self.config.embed_channels[2]
        g_fp = None
        for i in reversed(range(len(self.skeleton_streams))):
            g_fs = g_merged[..., i * e2:(i + 1) * e2]
            if self.fusion == "attention" and fuse_pose:
                g_fs, gp = self.attention[i].backward(g_fs)
                g_fp = gp if g_fp is None else g_fp + gp
            elif self.fusion == "concat":
                g_cat = self.mixers[i].backward(g_fs)
                g_fs = g_cat[..., :e2]
                if fuse_pose:
                    gp = g_cat[..., e2:]
                    g_fp = gp if g_fp is None else g_fp + gp
            self.input_bn[i].backward(self.towers[i].backward(np.ascontiguousarray(g_fs)))
        if self.use_pose:
            if g_fp is None:
                g_fp = np.zeros((bm, t, n, e2))
            self.pose_tower_backward(g_fp)

    def pose_tower_backward(self, grad):
        self.pose_bn.backward(self.pose_tower.backward(grad))

    # ------------------------------------------------------------------
    def forward_sample(self, sample):
        return self.forward(sample.skeleton[None], sample.pose[None])[0]

    def predict(self, skeleton, pose=None):
        return np.argmax(self.forward(skeleton, pose), axis=-1)

    def attention_params(self):
        if self.fusion != "attention":
            return []
        return [p for a in self.attention for p in a.params()]

    def state_entries(self):
        """Every parameter and running statistic, in registry order."""
        return self.named_params() + self.named_buffers()

    def num_params(self):
        return int(sum(p.value.size for p in self.params()))


def predict_from_logits(logits):
    """Argmax with ties going to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def ablation_build(attention="dynamic", streams="both", **config_kwargs) -> PGGCNModel:
    """Build one of the ablation variants.

    ``streams="pose"`` or ``"skeleton"`` ignore ``attention`` (no fusion
    happens); ``streams="both"`` with ``attention="none"`` concatenates
    pose features onto every skeleton sub-stream.
    """
    if streams in ("pose", "skeleton"):
        attention = "none"
    return PGGCNModel(PGGCNConfig(attention=attention, streams=streams, **config_kwargs))


ABLATIONS = {
    "pose-only": dict(streams="pose", attention="none"),
    "skeleton-only": dict(streams="skeleton", attention="none"),
    "concat": dict(streams="both", attention="none"),
    "vanilla": dict(streams="both", attention="vanilla"),
    "dynamic": dict(streams="both", attention="dynamic"),
}


# ----------------------------------------------------------------------
# checkpoints: text header with the config, then named tensors
# ----------------------------------------------------------------------
_MAGIC = b"PGGCN-CHECKPOINT 1\n"


def save_checkpoint(path, model: PGGCNModel, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    header = model.config.to_text()
    if extra:
        header += "".join(f"# {k} = {v}\n" for k, v in sorted(extra.items()))
    raw = header.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    entries = model.state_entries()
    buf.write(struct.pack("<I", len(entries)))
    for name, val in entries:
        arr = val.value if hasattr(val, "value") else val
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        write_tensor(buf, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> PGGCNModel:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        config = PGGCNConfig.from_text(fh.read(hlen).decode())
        model = PGGCNModel(config)
        entries = dict(model.state_entries())
        (count,) = struct.unpack("<I", fh.read(4))
        if count != len(entries):
            raise DataError(f"{path}: {count} tensors stored, model has {len(entries)}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            arr = read_tensor(fh)
            target = entries.get(name)
            if target is None:
                raise DataError(f"{path}: unexpected tensor {name!r}")
            dest = target.value if hasattr(target, "value") else target
            if dest.shape != arr.shape:
                raise DataError(f"{path}: {name} has shape {arr.shape}, expected {dest.shape}")
            dest[...] = arr
    return model
