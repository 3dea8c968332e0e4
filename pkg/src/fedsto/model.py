"""Toy single-stage grid detector with a backbone / neck / head split.

Layout (NHWC activations, OIHW kernels)::

    backbone.conv1  3x3 stride 2, C -> w1, leaky-ReLU
    backbone.conv2  3x3 stride 2, w1 -> w2, leaky-ReLU
    neck.conv       3x3 stride 2, w2 -> w2, leaky-ReLU
    head.conv       1x1,          w2 -> 5 + K

so the image side must be ``8 * grid``. Output channels per cell are
``tx, ty, tw, th, objectness logit, K class logits``.
"""

from __future__ import annotations

import enum
import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Graph, Var, run
from .boxes import BoundingBox, iou_matrix

TX, TY, TW, TH, OBJ, CLS = 0, 1, 2, 3, 4, 5
OBJ_BIAS_INIT = -2.0
CKPT_MAGIC = b"FEDSTO-CKPT v1\n"


class Part(str, enum.Enum):
    BACKBONE = "backbone"
    NECK = "neck"
    HEAD = "head"


SCOPES: dict[str, frozenset] = {
    "backbone": frozenset({Part.BACKBONE}),
    "neck": frozenset({Part.NECK}),
    "head": frozenset({Part.HEAD}),
    "non_backbone": frozenset({Part.NECK, Part.HEAD}),
    "all": frozenset(Part),
    # billing preset: everything except the neck
    "model_minus_neck": frozenset({Part.BACKBONE, Part.HEAD}),
    # head-only freezing variant of selective training
    "backbone_neck": frozenset({Part.BACKBONE, Part.NECK}),
}


def scope_parts(scope: str) -> frozenset:
    key = scope.lower().replace("-", "_").replace("nonbackbone", "non_backbone")
    if key not in SCOPES:
        raise ValueError(f"unknown parameter scope {scope!r}; expected one of {sorted(SCOPES)}")
    return SCOPES[key]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    channels: int = 3
    grid: int = 4
    num_classes: int = 3
    width1: int = 8
    width2: int = 16
    slope: float = 0.1

    def __post_init__(self):
        for name in ("image_size", "channels", "grid", "num_classes", "width1", "width2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size != 8 * self.grid:
            raise ConfigError(f"image_size must equal 8 * grid ({8 * self.grid}), got {self.image_size}")

    @property
    def out_channels(self) -> int:
        return 5 + self.num_classes

    def layer_shapes(self) -> dict[str, tuple[Part, tuple[int, ...]]]:
        c, w1, w2 = self.channels, self.width1, self.width2
        return {
            "backbone.conv1.weight": (Part.BACKBONE, (w1, c, 3, 3)),
            "backbone.conv1.bias": (Part.BACKBONE, (w1,)),
            "backbone.conv2.weight": (Part.BACKBONE, (w2, w1, 3, 3)),
            "backbone.conv2.bias": (Part.BACKBONE, (w2,)),
            "neck.conv.weight": (Part.NECK, (w2, w2, 3, 3)),
            "neck.conv.bias": (Part.NECK, (w2,)),
            "head.conv.weight": (Part.HEAD, (self.out_channels, w2, 1, 1)),
            "head.conv.bias": (Part.HEAD, (self.out_channels,)),
        }


@dataclass(frozen=True)
class ParamSet:
    """Ordered, part-tagged float32 arrays. Arrays are read-only."""

    entries: Mapping[str, np.ndarray]
    part_of: Mapping[str, Part]

    def __post_init__(self):
        if list(self.entries) != list(self.part_of):
            raise ValueError("entries and part tags must list the same names in the same order")
        for arr in self.entries.values():
            arr.flags.writeable = False

    @classmethod
    def build(cls, items: Iterable[tuple[str, Part, np.ndarray]]) -> "ParamSet":
        entries, parts = {}, {}
        for name, part, arr in items:
            entries[name] = np.array(arr, dtype=np.float32)
            parts[name] = Part(part)
        return cls(entries, parts)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name) -> np.ndarray:
        return self.entries[name]

    def names(self, scope: str = "all") -> list[str]:
        parts = scope_parts(scope)
        return [n for n in self.entries if self.part_of[n] in parts]

    def byte_size(self, scope: str = "all") -> int:
        return sum(self.entries[n].nbytes for n in self.names(scope))

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        unknown = set(updates) - set(self.entries)
        if unknown:
            raise KeyError(f"unknown entries {sorted(unknown)}")
        if not updates:
            return self
        entries = {}
        for n, arr in self.entries.items():
            if n not in updates:
                entries[n] = arr
                continue
            new = np.array(updates[n], dtype=np.float32)
            if new.shape != arr.shape:
                raise ValueError(f"shape mismatch for {n}: {new.shape} vs {arr.shape}")
            entries[n] = new
        return ParamSet(entries, dict(self.part_of))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: a.shape for n, a in self.entries.items()}

    def equal(self, other: "ParamSet", scope: str = "all") -> bool:
        """Bit-exact equality over ``scope``."""
        names = self.names(scope)
        if names != other.names(scope):
            return False
        return all(self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes() for n in names)


def partition_view(params: ParamSet, part: str) -> ParamSet:
    names = params.names(part)
    return ParamSet({n: params.entries[n] for n in names}, {n: params.part_of[n] for n in names})


def init_model(arch: ArchConfig, seed: int) -> ParamSet:
    """He-normal kernels, zero biases except a negative objectness prior."""
    rng = np.random.default_rng([seed, 0x5EED])
    items = []
    for name, (part, shape) in arch.layer_shapes().items():
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            arr = np.zeros(shape)
            if name == "head.conv.bias":
                arr[OBJ] = OBJ_BIAS_INIT
        items.append((name, part, arr))
    return ParamSet.build(items)


def zero_model(arch: ArchConfig) -> ParamSet:
    return ParamSet.build((n, p, np.zeros(s)) for n, (p, s) in arch.layer_shapes().items())


def param_inputs(g: Graph, params: ParamSet, trainable: Iterable[str] | None = None) -> dict[str, Var]:
    train = set(params.entries if trainable is None else trainable)
    return {n: g.input(n, a.shape, grad=n in train) for n, a in params.entries.items()}


def build_forward(g: Graph, arch: ArchConfig, p: Mapping[str, Var], x: Var,
                  taps: dict | None = None) -> Var:
    """Append the detector forward pass to ``g``; returns (N, S, S, 5+K)."""
    slope = arch.slope
    h1 = g.leaky_relu(g.add(g.conv2d(x, p["backbone.conv1.weight"], 2, 1), p["backbone.conv1.bias"]), slope)
    h2 = g.leaky_relu(g.add(g.conv2d(h1, p["backbone.conv2.weight"], 2, 1), p["backbone.conv2.bias"]), slope)
    h3 = g.leaky_relu(g.add(g.conv2d(h2, p["neck.conv.weight"], 2, 1), p["neck.conv.bias"]), slope)
    out = g.add(g.conv2d(h3, p["head.conv.weight"], 1, 0), p["head.conv.bias"])
    if taps is not None:
        taps.update(backbone1=h1, backbone=h2, neck=h3, head=out)
    return out


def _as_batch(arch: ArchConfig, image) -> tuple[np.ndarray, bool]:
    img = np.asarray(image, dtype=np.float32)
    single = img.ndim == 3
    if single:
        img = img[None]
    want = (arch.image_size, arch.image_size, arch.channels)
    if img.ndim != 4 or img.shape[1:] != want:
        raise ConfigError(f"image shape {np.shape(image)} does not match architecture {want}")
    return img, single


def predict(params: ParamSet, image, arch: ArchConfig = ArchConfig(), return_taps=False):
    """Raw grid predictions for one image (H, W, C) or a batch (N, H, W, C)."""
    img, single = _as_batch(arch, image)
    g = Graph()
    p = param_inputs(g, params)
    x = g.input("image", img.shape, grad=False)
    taps: dict = {}
    out = build_forward(g, arch, p, x, taps)
    inputs = dict(params.entries)
    inputs["image"] = img
    tr = run(g, inputs, root=out, backward=False)
    preds = tr.value[0] if single else tr.value
    if return_taps:
        return preds, {k: (tr[v][0] if single else tr[v]) for k, v in taps.items()}
    return preds


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float
    objectness: float
    cell: tuple[int, int] | None = None
    class_probs: tuple[float, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0 and 0.0 <= self.objectness <= 1.0):
            raise ValueError(f"probabilities out of range: {self}")
        if self.score > self.objectness + 1e-12:
            raise ValueError("score cannot exceed objectness")


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_arrays(preds) -> dict[str, np.ndarray]:
    """Vectorised decode of (..., S, S, 5+K) predictions to per-cell probabilities and boxes."""
    p = np.asarray(preds, dtype=np.float64)
    s = p.shape[-2]
    cols = np.arange(s)[None, :]
    rows = np.arange(s)[:, None]
    cx = (cols + _sigmoid(p[..., TX])) / s
    cy = (rows + _sigmoid(p[..., TY])) / s
    w = _sigmoid(p[..., TW])
    h = _sigmoid(p[..., TH])
    obj = _sigmoid(p[..., OBJ])
    probs = _softmax(p[..., CLS:])
    cls = probs.argmax(axis=-1)
    score = obj * np.take_along_axis(probs, cls[..., None], -1)[..., 0]
    corners = np.stack([np.clip(cx - w / 2, 0, 1), np.clip(cy - h / 2, 0, 1),
                        np.clip(cx + w / 2, 0, 1), np.clip(cy + h / 2, 0, 1)], axis=-1)
    return {"cxcywh": np.stack([cx, cy, w, h], -1), "corners": corners, "objectness": obj,
            "probs": probs, "class_id": cls, "score": score}


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression; output sorted by descending score."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    dets = [detections[i] for i in order]
    if not dets:
        return []
    boxes = np.array([d.box.as_array() for d in dets])
    ious = iou_matrix(boxes, boxes)
    keep: list[int] = []
    for i, d in enumerate(dets):
        if all(not (dets[j].class_id == d.class_id and ious[i, j] > iou_threshold) for j in keep):
            keep.append(i)
    return [dets[i] for i in keep]


def decode(preds, conf_threshold: float = 0.1, nms_iou: float = 0.65) -> list[Detection]:
    """Detections of one image's (S, S, 5+K) predictions, after thresholding and NMS."""
    if not (0 <= conf_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    d = decode_arrays(preds)
    rows, cols = np.nonzero(d["score"] >= conf_threshold)
    dets = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        x0, y0, x1, y1 = d["corners"][r, c]
        if not (x0 < x1 and y0 < y1):
            continue
        dets.append(Detection(BoundingBox(x0, y0, x1, y1), int(d["class_id"][r, c]),
                              float(d["score"][r, c]), float(d["objectness"][r, c]), (r, c),
                              tuple(d["probs"][r, c].tolist())))
    return nms(dets, nms_iou)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def checkpoint_bytes(entries: Iterable[tuple[str, str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    for name, part, arr in entries:
        arr = np.asarray(arr, dtype="<f4")
        dims = ",".join(str(d) for d in arr.shape)
        buf.write(f"{name} {part} {dims}\n".encode("ascii"))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> list[tuple[str, str, np.ndarray]]:
    if not data.startswith(CKPT_MAGIC):
        raise ValueError("not a FEDSTO-CKPT v1 file")
    pos = len(CKPT_MAGIC)
    out = []
    while pos < len(data):
        end = data.index(b"\n", pos)
        name, part, dims = data[pos:end].decode("ascii").split(" ")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        pos = end + 1
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise ValueError(f"truncated checkpoint entry {name}")
        arr = np.frombuffer(data[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        out.append((name, part, arr))
        pos += nbytes
    return out


def atomic_write(path, data: bytes | str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    mode = "wb" if isinstance(data, bytes) else "w"
    try:
        with open(tmp, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_checkpoint(params: ParamSet, path) -> None:
    atomic_write(path, checkpoint_bytes((n, params.part_of[n].value, a) for n, a in params.entries.items()))


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        return ParamSet.build(parse_checkpoint(fh.read()))
