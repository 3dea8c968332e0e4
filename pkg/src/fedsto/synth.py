"""Synthetic rectangle scenes with per-domain Gaussian covariate shift.

A scene is rendered clean (textured grey background, 1-3 coloured
rectangles) and then shifted as ``contrast * x + brightness + eps`` with
``eps ~ N(0, F Fᵀ + diag(D))`` over the flattened pixels, then clamped.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoundingBox
from .model import atomic_write, checkpoint_bytes


class Domain(str, enum.Enum):
    CLOUDY = "cloudy"
    OVERCAST = "overcast"
    RAINY = "rainy"
    SNOWY = "snowy"


SERVER_DOMAIN = Domain.CLOUDY
CLIENT_DOMAINS = (Domain.OVERCAST, Domain.RAINY, Domain.SNOWY)

# per-class RGB fill and side-length range in pixels (small / medium / large)
CLASS_COLORS = np.array([[0.75, 0.35, 0.35], [0.35, 0.75, 0.35], [0.35, 0.35, 0.75]])
CLASS_SIZES = ((4, 7), (8, 11), (12, 15))
BACKGROUND_LEVEL = (0.22, 0.32)


@dataclass(frozen=True)
class DomainShift:
    """Affine intensity change plus correlated Gaussian pixel noise.

    ``diag`` has one variance per pixel feature (H*W*C), ``factor`` is an
    optional (H*W*C, r) low-rank term, so the covariance is PSD by construction.
    """

    diag: np.ndarray
    factor: np.ndarray | None = None
    brightness: float = 0.0
    contrast: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.diag) < 0):
            raise ValueError("noise variances must be >= 0")
        if self.factor is not None and self.factor.shape[0] != np.size(self.diag):
            raise ValueError("low-rank factor must have one row per pixel feature")

    @property
    def dim(self) -> int:
        return int(np.size(self.diag))

    def covariance(self) -> np.ndarray:
        cov = np.diag(np.asarray(self.diag, dtype=float))
        if self.factor is not None:
            cov = cov + self.factor @ self.factor.T
        return cov

    def sample_noise(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = (self.dim,) if n is None else (n, self.dim)
        eps = rng.standard_normal(shape) * np.sqrt(self.diag)
        if self.factor is not None:
            r = self.factor.shape[1]
            z = rng.standard_normal((r,) if n is None else (n, r))
            eps = eps + z @ self.factor.T
        return eps

    @classmethod
    def isotropic(cls, sigma: float, dim: int, brightness=0.0, contrast=1.0) -> "DomainShift":
        return cls(np.full(dim, sigma ** 2), None, brightness, contrast)

    @classmethod
    def identity(cls, dim: int) -> "DomainShift":
        return cls(np.zeros(dim))


def _stripes(size: int, channels: int, rank: int, seed: int) -> np.ndarray:
    """Low-rank factor of smooth vertical streak patterns (rain-like)."""
    rng = np.random.default_rng(seed)
    xs = np.arange(size)
    cols = []
    for _ in range(rank):
        freq = rng.uniform(0.5, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        pat = np.sin(2 * np.pi * freq * xs / size + phase)
        img = np.broadcast_to(pat[None, :, None], (size, size, channels))
        cols.append(img.reshape(-1))
    return np.stack(cols, axis=1)


def default_shift(domain: Domain, size: int = 32, channels: int = 3) -> DomainShift:
    dim = size * size * channels
    if domain == Domain.CLOUDY:
        return DomainShift.isotropic(0.02, dim)
    if domain == Domain.OVERCAST:
        return DomainShift.isotropic(0.05, dim, brightness=-0.08, contrast=0.75)
    if domain == Domain.RAINY:
        return DomainShift(np.full(dim, 0.07 ** 2), 0.06 * _stripes(size, channels, 4, 11),
                           brightness=-0.03, contrast=0.85)
    if domain == Domain.SNOWY:
        return DomainShift.isotropic(0.09, dim, brightness=0.12, contrast=0.7)
    raise ValueError(f"unknown domain {domain!r}")


@dataclass
class Scene:
    image: np.ndarray  # (H, W, C) in [0, 1]
    annotations: list[tuple[int, BoundingBox]]
    domain: Domain
    clean: np.ndarray | None = field(default=None, repr=False)
    pixel_boxes: list[tuple[int, int, int, int]] = field(default_factory=list, repr=False)

    def annotation_lines(self) -> list[str]:
        out = []
        for cls_id, box in self.annotations:
            cx, cy, w, h = box.cxcywh()
            out.append(f"{cls_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f} 1")
        return out

    def export(self, prefix) -> None:
        """Write ``<prefix>.bin`` (checkpoint layout, one ``image`` entry) and ``<prefix>.txt``."""
        atomic_write(f"{prefix}.bin", checkpoint_bytes([("image", self.domain.value, self.image)]))
        atomic_write(f"{prefix}.txt", "".join(line + "\n" for line in self.annotation_lines()))


def _place_objects(rng: np.random.Generator, size: int, grid: int, n_obj: int):
    cell = size // grid
    placed: list[tuple[int, int, int, int, int]] = []
    used_cells: set = set()
    tries = 0
    while len(placed) < n_obj and tries < 200:
        tries += 1
        cls_id = int(rng.integers(0, len(CLASS_SIZES)))
        lo, hi = CLASS_SIZES[cls_id]
        w, h = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        x0, y0 = int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1))
        ccell = (int((y0 + h / 2) // cell), int((x0 + w / 2) // cell))
        if ccell in used_cells:
            continue
        # one-pixel gap between rectangles keeps them separable
        if any(x0 < bx1 + 1 and bx0 < x0 + w + 1 and y0 < by1 + 1 and by0 < y0 + h + 1
               for _, bx0, by0, bx1, by1 in placed):
            continue
        placed.append((cls_id, x0, y0, x0 + w, y0 + h))
        used_cells.add(ccell)
    return placed


def render_clean(rng: np.random.Generator, size: int = 32, channels: int = 3, grid: int = 4):
    lo, hi = BACKGROUND_LEVEL
    base = rng.uniform(lo, hi)
    tex = base + 0.03 * rng.standard_normal((size // 4, size // 4))
    img = np.repeat(np.repeat(tex, 4, axis=0), 4, axis=1)[..., None].repeat(channels, axis=2)
    img = np.clip(img, lo - 0.05, hi + 0.05)
    objs = _place_objects(rng, size, grid, int(rng.integers(1, 4)))
    for cls_id, x0, y0, x1, y1 in objs:
        img[y0:y1, x0:x1, :] = CLASS_COLORS[cls_id][:channels]
    anns = [(c, BoundingBox(x0 / size, y0 / size, x1 / size, y1 / size)) for c, x0, y0, x1, y1 in objs]
    return img, anns, [o[1:] for o in objs]


def generate_scene(domain: Domain, shift: DomainShift, rng: np.random.Generator, size: int = 32,
                   channels: int = 3, grid: int = 4) -> Scene:
    clean, anns, pix = render_clean(rng, size, channels, grid)
    if shift.dim != clean.size:
        raise ValueError(f"shift has {shift.dim} features, image has {clean.size}")
    eps = shift.sample_noise(rng).reshape(clean.shape)
    img = np.clip(shift.contrast * clean + shift.brightness + eps, 0.0, 1.0)
    return Scene(img.astype(np.float32), anns, Domain(domain), clean.astype(np.float32), pix)


def scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xDA7A, scene_id])


def threshold_boxes(clean: np.ndarray, tol: float = 0.02) -> list[tuple[int, tuple[int, int, int, int]]]:
    """Oracle detector: recover (class, pixel box) from a clean render by colour matching."""
    from scipy import ndimage

    found = []
    for cls_id, color in enumerate(CLASS_COLORS):
        mask = np.all(np.abs(clean - color[:clean.shape[-1]]) < tol, axis=-1)
        labels, n = ndimage.label(mask)
        for sl in ndimage.find_objects(labels):
            ys, xs = sl
            found.append((cls_id, (xs.start, ys.start, xs.stop, ys.stop)))
    return found


# --------------------------------------------------------------------------
# partitioning and datasets
# --------------------------------------------------------------------------

@dataclass
class Partition:
    server: list[tuple[int, Domain]]           # (scene id, domain)
    clients: list[list[tuple[int, Domain]]]


def partition_clients(n_scenes: int, num_clients: int, mode: str, rng: np.random.Generator,
                      n_server: int | None = None) -> Partition:
    """Domain schedule per client (``n_scenes`` each) and for the labeled server set.

    NonIID: client k takes the k-th non-server domain, the server keeps Cloudy.
    IID: every scene's domain is drawn uniformly from all four.
    Scene ids are unique across the whole partition.
    """
    if num_clients < 1:
        raise ValueError("need at least one client")
    n_server = n_scenes if n_server is None else n_server
    mode = mode.lower().replace("-", "").replace("_", "")
    domains = list(Domain)
    server_ids = range(n_server)
    if mode == "noniid":
        if num_clients > len(CLIENT_DOMAINS):
            raise ValueError(f"non-IID mode supports at most {len(CLIENT_DOMAINS)} clients with unique domains")
        server = [(i, SERVER_DOMAIN) for i in server_ids]
        clients = [[(n_server + k * n_scenes + j, CLIENT_DOMAINS[k]) for j in range(n_scenes)]
                   for k in range(num_clients)]
    elif mode == "iid":
        draw = rng.integers(0, len(domains), size=n_server + num_clients * n_scenes)
        server = [(i, domains[draw[i]]) for i in server_ids]
        clients = [[(n_server + k * n_scenes + j, domains[draw[n_server + k * n_scenes + j]])
                    for j in range(n_scenes)] for k in range(num_clients)]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return Partition(server, clients)


@dataclass
class LabeledData:
    images: np.ndarray
    annotations: list[list[tuple[int, BoundingBox]]]
    domains: list[Domain]


@dataclass
class UnlabeledData:
    """Client-side data: images only, no annotation field by construction."""

    images: np.ndarray
    domains: list[Domain]
    scene_ids: list[int]


def materialize(schedule: list[tuple[int, Domain]], seed: int, shifts: dict[Domain, DomainShift],
                size=32, channels=3, grid=4) -> list[Scene]:
    return [generate_scene(d, shifts[d], scene_rng(seed, sid), size, channels, grid) for sid, d in schedule]


def labeled(scenes: list[Scene]) -> LabeledData:
    return LabeledData(np.stack([s.image for s in scenes]), [s.annotations for s in scenes],
                       [s.domain for s in scenes])


def unlabeled(scenes: list[Scene], ids: list[int]) -> UnlabeledData:
    return UnlabeledData(np.stack([s.image for s in scenes]), [s.domain for s in scenes], list(ids))
