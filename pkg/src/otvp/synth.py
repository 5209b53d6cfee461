"""Deterministic synthetic multi-domain image generator.

Seven shape classes rendered on styled backgrounds; domains differ by
style (palette, background, rotation range) or by post-render corruption
(gaussian_noise, blur, contrast, pixelate at severities 1..5, parameters
monotone in severity). All randomness flows through Philox, a 64-bit
counter-based generator, so the same (spec, n) is bitwise reproducible
across platforms. Images are quantized to 8-bit levels like real image
files; without that, linear layers could undo contrast loss exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .serialize import FormatError

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar", "diamond")

CORRUPTION_KINDS = ("gaussian_noise", "blur", "contrast", "pixelate")

# severity 1..5 parameter tables, strictly monotone
NOISE_STD = (0.04, 0.07, 0.10, 0.13, 0.17)
BLUR_SIGMA = (0.8, 1.3, 1.8, 2.2, 2.6)
CONTRAST_SCALE = (0.45, 0.34, 0.26, 0.20, 0.15)
PIXELATE_TILES = (24, 16, 12, 10, 8)  # cells per side; fewer = harsher

PALETTES = (
    ((0.90, 0.30, 0.20), (0.20, 0.80, 0.30), (0.25, 0.40, 0.95), (0.95, 0.85, 0.20)),
    ((0.80, 0.20, 0.80), (0.20, 0.85, 0.85), (0.95, 0.60, 0.15), (0.60, 0.90, 0.30)),
)

_SUPERSAMPLE = 2


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in [1, 5]")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    palette: int = 0
    background: int = 0
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    corruption: Corruption | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.palette < len(PALETTES):
            raise ValueError("unknown palette id")
        if not 0 <= self.background <= 2:
            raise ValueError("unknown background id")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError("rotation range must be (low, high)")


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    domain: str
    split: str = "all"

    @property
    def n(self) -> int:
        return self.images.shape[0]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def _background(bg_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    base = 0.25 + rng.uniform(-0.05, 0.05)
    if bg_id == 0:
        img = np.full((3, size, size), base)
    elif bg_id == 1:
        ramp = np.linspace(base - 0.05, base + 0.2, size)
        img = np.broadcast_to(ramp[None, :, None], (3, size, size)).copy()
    else:
        cell = size // 8
        yy, xx = np.indices((size, size))
        checker = ((yy // cell + xx // cell) % 2).astype(np.float64)
        img = np.broadcast_to(base + 0.12 * checker, (3, size, size)).copy()
    return img


def _shape_mask(cls: int, xr: np.ndarray, yr: np.ndarray, s: float) -> np.ndarray:
    name = SHAPES[cls]
    if name == "circle":
        return xr**2 + yr**2 <= (0.80 * s) ** 2
    if name == "square":
        return np.maximum(np.abs(xr), np.abs(yr)) <= 0.72 * s
    if name == "triangle":
        halfw = 0.90 * s * (yr + 0.80 * s) / (1.6 * s)
        return (yr >= -0.80 * s) & (yr <= 0.80 * s) & (np.abs(xr) <= halfw)
    if name == "cross":
        arm = 0.26 * s
        reach = 0.88 * s
        return ((np.abs(xr) <= arm) & (np.abs(yr) <= reach)) | \
               ((np.abs(yr) <= arm) & (np.abs(xr) <= reach))
    if name == "ring":
        r2 = xr**2 + yr**2
        return ((0.45 * s) ** 2 <= r2) & (r2 <= (0.82 * s) ** 2)
    if name == "bar":
        return (np.abs(yr) <= 0.26 * s) & (np.abs(xr) <= 0.92 * s)
    if name == "diamond":
        return np.abs(xr) + np.abs(yr) <= 0.95 * s
    raise ValueError(f"unknown class {cls}")


def _render(cls: int, spec: DomainSpec, image_size: int, rng: np.random.Generator) -> np.ndarray:
    ss = _SUPERSAMPLE * image_size
    img = _background(spec.background, ss, rng)
    cx, cy = rng.uniform(-0.12, 0.12, size=2)
    size = 0.55 + rng.uniform(-0.08, 0.08)
    theta = np.deg2rad(rng.uniform(*spec.rotation_range))
    palette = PALETTES[spec.palette]
    color = np.array(palette[rng.integers(len(palette))]) * rng.uniform(0.85, 1.0)

    lin = np.linspace(-1.0, 1.0, ss)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    x0, y0 = xx - cx, yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    xr = x0 * ct + y0 * st
    yr = -x0 * st + y0 * ct
    mask = _shape_mask(cls, xr, yr, size)
    img = np.where(mask[None], color[:, None, None], img)
    # average-pool the supersampled render: cheap anti-aliasing
    k = _SUPERSAMPLE
    img = img.reshape(3, image_size, k, image_size, k).mean(axis=(2, 4))
    return img


def _lin_upsample_matrix(h: int, t: int) -> np.ndarray:
    """(h, t) matrix interpolating t cell centers back to h pixel centers."""
    src = (np.arange(t) + 0.5) * h / t
    dst = np.arange(h) + 0.5
    W = np.zeros((h, t))
    j = np.clip(np.searchsorted(src, dst) - 1, 0, t - 2)
    w = np.clip((dst - src[j]) / (src[j + 1] - src[j]), 0.0, 1.0)
    W[np.arange(h), j] = 1.0 - w
    W[np.arange(h), j + 1] = w
    return W


def _pixelate(img: np.ndarray, tiles: int) -> np.ndarray:
    # box-average down to tiles x tiles, then linear upsample: removes detail
    # monotonically in tile coarseness without hard mosaic edges (nearest
    # upsampling creates grid artifacts far more alien to the model than the
    # information loss itself)
    c, h, w = img.shape
    t = min(tiles, h)
    edges = (np.arange(t + 1) * h) // t
    small = np.add.reduceat(np.add.reduceat(img, edges[:-1], axis=1), edges[:-1], axis=2)
    counts = np.outer(np.diff(edges), np.diff(edges)).astype(np.float64)
    small = small / counts[None]
    W = _lin_upsample_matrix(h, t)
    return np.einsum("ht,ctu,wu->chw", W, small, W, optimize=True)


def _corrupt(images: np.ndarray, corruption: Corruption, rng: np.random.Generator) -> np.ndarray:
    sev = corruption.severity - 1
    if corruption.kind == "gaussian_noise":
        return images + rng.normal(0.0, NOISE_STD[sev], size=images.shape)
    if corruption.kind == "blur":
        return np.stack([gaussian_filter(im, (0.0, BLUR_SIGMA[sev], BLUR_SIGMA[sev]),
                                         mode="reflect") for im in images])
    if corruption.kind == "contrast":
        means = images.mean(axis=(1, 2, 3), keepdims=True)
        return (images - means) * CONTRAST_SCALE[sev] + means
    if corruption.kind == "pixelate":
        return np.stack([_pixelate(im, PIXELATE_TILES[sev]) for im in images])
    raise ValueError(f"unknown corruption kind {corruption.kind!r}")


def generate(spec: DomainSpec, n: int, num_classes: int = 7,
             image_size: int = 32) -> SyntheticDataset:
    """Render n images with balanced labels (counts within +-1)."""
    if image_size < 16:
        raise ValueError("image_size below 16 px cannot render the shapes")
    if num_classes < 1 or num_classes > len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    if n < num_classes:
        raise ValueError("need at least one sample per class")

    style_rng = _rng(spec.seed, 0)
    corrupt_rng = _rng(spec.seed, 1)

    base = np.arange(n) % num_classes
    labels = base[style_rng.permutation(n)]
    images = np.stack([_render(int(y), spec, image_size, style_rng) for y in labels])
    if spec.corruption is not None:
        images = _corrupt(images, spec.corruption, corrupt_rng)
    images = np.clip(images, 0.0, 1.0)
    images = np.round(images * 255.0) / 255.0  # 8-bit levels, like real files
    return SyntheticDataset(images, labels.astype(np.int64), spec.name)


# ---------------------------------------------------------------------------
# dataset directory I/O
# ---------------------------------------------------------------------------

def _write_images(path: Path, images: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<4Q", *images.shape))
        f.write(np.ascontiguousarray(images, dtype="<f8").tobytes())


def _read_images(path: Path) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing images file: {path}")
    raw = path.read_bytes()
    if len(raw) < 32:
        raise FormatError(f"images file too short: {path}")
    dims = struct.unpack_from("<4Q", raw, 0)
    count = int(np.prod(dims))
    if len(raw) != 32 + 8 * count:
        raise FormatError(f"images payload size mismatch in {path}")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=32).reshape(dims).astype(np.float64)


def _write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", labels.shape[0]))
        f.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def _read_labels(path: Path) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing labels file: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise FormatError(f"labels file too short: {path}")
    (count,) = struct.unpack_from("<Q", raw, 0)
    if len(raw) != 8 + 4 * count:
        raise FormatError(f"labels payload size mismatch in {path}")
    return np.frombuffer(raw, dtype="<u4", count=count, offset=8).astype(np.int64)


def save_dataset(path, splits: dict[str, SyntheticDataset], num_classes: int = 7) -> None:
    """Write one domain's splits to a directory with a manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not splits:
        raise ValueError("no splits to save")
    domain = next(iter(splits.values())).domain
    entries = []
    for tag, ds in splits.items():
        images_file = f"images_{tag}.bin"
        labels_file = f"labels_{tag}.bin"
        _write_images(root / images_file, ds.images)
        _write_labels(root / labels_file, ds.labels)
        entries.append({"tag": tag, "count": int(ds.n),
                        "images_file": images_file, "labels_file": labels_file})
    manifest = {
        "name": domain,
        "num_classes": int(num_classes),
        "image_size": int(next(iter(splits.values())).images.shape[2]),
        "channels": int(next(iter(splits.values())).images.shape[1]),
        "splits": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path) -> dict[str, SyntheticDataset]:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    for key in ("name", "num_classes", "image_size", "channels", "splits"):
        if key not in manifest:
            raise FormatError(f"manifest lacks {key!r}")
    out = {}
    for entry in manifest["splits"]:
        images = _read_images(root / entry["images_file"])
        labels = _read_labels(root / entry["labels_file"])
        if images.shape[0] != entry["count"] or labels.shape[0] != entry["count"]:
            raise FormatError(f"split {entry['tag']!r} count mismatch")
        if images.shape[1] != manifest["channels"] or images.shape[2] != manifest["image_size"]:
            raise FormatError(f"split {entry['tag']!r} image shape mismatch")
        if labels.size and int(labels.max()) + 1 != manifest["num_classes"]:
            raise FormatError(f"split {entry['tag']!r}: max label + 1 != num_classes")
        out[entry["tag"]] = SyntheticDataset(images, labels, manifest["name"], entry["tag"])
    return out


def split(dataset: SyntheticDataset, train_fraction: float = 0.8,
          seed: int = 0) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Seeded stratified split; per class the train share is within +-1 of
    train_fraction * class count."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = _rng(seed, 2)
    train_idx = []
    val_idx = []
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        if idx.size < 2:
            raise ValueError(f"class {cls} has fewer than 2 samples")
        idx = rng.permutation(idx)
        k = int(round(train_fraction * idx.size))
        k = min(max(k, 1), idx.size - 1)  # both sides non-empty
        train_idx.append(idx[:k])
        val_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return (
        SyntheticDataset(dataset.images[train_idx], dataset.labels[train_idx],
                         dataset.domain, "train"),
        SyntheticDataset(dataset.images[val_idx], dataset.labels[val_idx],
                         dataset.domain, "val"),
    )


def benchmark_domains(seed: int = 0, severity: int = 5) -> dict[str, DomainSpec]:
    """The default desk-scale benchmark: one clean source domain plus one
    target domain per corruption kind, same style, given severity."""
    domains = {"source": DomainSpec(name="source", seed=seed)}
    for kind in CORRUPTION_KINDS:
        domains[kind] = DomainSpec(name=kind, seed=seed + 1,
                                   corruption=Corruption(kind, severity))
    return domains
