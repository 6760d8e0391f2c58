"""Datasets: a procedural spurious-correlation benchmark and image-folder loading.

Benchmark images are composed as ``x = psi(glyph, background)``: a class-
determined glyph (the invariant feature) pasted onto one of two background
textures (the environment). In the training split the background agrees with
the class with probability ``correlation``.

On disk a benchmark is ``manifest.json`` (text index) plus ``images.npz``
(uint8 arrays). Manifest rows follow ``MANIFEST_FIELDS``.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import InvalidSpec, MissingDirectory, UnreadableImage

MANIFEST_FORMAT_VERSION = 1
MANIFEST_FIELDS = ("id", "label", "env", "glyph")
SPLITS = ("train", "val_id", "test_id", "spurious_ood", "conventional_ood", "finegrained_ood")
ID_SPLITS = ("train", "val_id", "test_id")

# ID environments 0/1, held-out environments 2/3 (conventional OOD only)
ENV_NAMES = ("water", "land", "checker", "haze")
# ID glyphs by class; held-out families for conventional / fine-grained OOD
ID_GLYPHS = ("plus", "ring")
NOVEL_GLYPHS = ("triangle", "square")
NEAR_GLYPHS = ("plus_broken", "ring_broken")
GLYPH_COLOR = np.array([1.0, 0.92, 0.25])

NORM_MEAN = (0.5, 0.5, 0.5)
NORM_STD = (0.25, 0.25, 0.25)

IMG_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff", ".webp")


@dataclass
class SpuriousSpec:
    num_classes: int = 2
    correlation: float = 0.9
    image_size: tuple[int, int] = (32, 32)
    glyph_size: tuple[int, int] = (10, 15)
    # per-image blend weight of the glyph over the background, drawn uniformly
    # from this range; faint glyphs push a plain classifier towards the background
    glyph_contrast: tuple[float, float] = (1.0, 1.0)
    # fraction of glyph pixels hidden by a random straight cut, drawn uniformly
    glyph_occlusion: tuple[float, float] = (0.0, 0.0)
    # std of i.i.d. Gaussian noise added to every pixel after composition
    pixel_noise: float = 0.0
    counts: dict[str, int] = field(default_factory=lambda: {
        "train": 2000, "val_id": 200, "test_id": 1000,
        "spurious_ood": 500, "conventional_ood": 500, "finegrained_ood": 0,
    })

    def validate(self) -> None:
        if self.num_classes != 2:
            raise InvalidSpec("the synthetic benchmark has exactly 2 classes")
        if not 0.0 <= self.correlation <= 1.0:
            raise InvalidSpec(f"correlation must lie in [0, 1], got {self.correlation}")
        h, w = self.image_size
        lo, hi = self.glyph_size
        if not (3 <= lo <= hi <= min(h, w)):
            raise InvalidSpec(f"glyph_size {self.glyph_size} does not fit image {self.image_size}")
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise InvalidSpec(f"unknown splits {sorted(unknown)}")
        for split, n in self.counts.items():
            if n < 0:
                raise InvalidSpec(f"negative count for {split}")
        lo_c, hi_c = self.glyph_contrast
        if not 0.0 < lo_c <= hi_c <= 1.0:
            raise InvalidSpec(f"glyph_contrast must lie in (0, 1], got {self.glyph_contrast}")
        lo_o, hi_o = self.glyph_occlusion
        if not 0.0 <= lo_o <= hi_o < 1.0:
            raise InvalidSpec(f"glyph_occlusion must lie in [0, 1), got {self.glyph_occlusion}")
        if self.pixel_noise < 0:
            raise InvalidSpec(f"pixel_noise must be >= 0, got {self.pixel_noise}")
        if self.counts.get("train", 0) < 2:
            raise InvalidSpec("train split needs at least 2 samples")

    @classmethod
    def from_dict(cls, d: dict) -> "SpuriousSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown spec fields {sorted(unknown)}")
        for key in ("image_size", "glyph_size", "glyph_contrast", "glyph_occlusion"):
            if key in d:
                d[key] = tuple(d[key])
        if "counts" in d:
            counts = cls().counts
            counts.update(d["counts"])
            d["counts"] = counts
        spec = cls(**d)
        spec.validate()
        return spec


# --- procedural drawing ---------------------------------------------------

def _glyph_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    t = max(1, size // 5)
    if kind in ("plus", "plus_broken"):
        m = (np.abs(yy - c) <= t / 2 + 0.01) | (np.abs(xx - c) <= t / 2 + 0.01)
        if kind == "plus_broken":
            m &= ~((xx > c + t) & (np.abs(yy - c) <= t))
        return m
    if kind in ("ring", "ring_broken"):
        r = np.hypot(yy - c, xx - c)
        m = (r <= c + 0.01) & (r >= c - t)
        if kind == "ring_broken":
            m &= ~((xx > c) & (np.abs(yy - c) <= t))
        return m
    if kind == "triangle":
        return (yy >= np.abs(xx - c) * 2 - 0.01) & (yy < size)
    if kind == "square":
        return (np.maximum(np.abs(yy - c), np.abs(xx - c)) >= c - t)
    raise ValueError(kind)


def _background(env: int, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    noise = rng.normal(0.0, 0.03, size=(h, w, 3))
    if env == 0:  # water: blue with horizontal waves
        freq = rng.uniform(0.4, 0.8)
        wave = 0.08 * np.sin(freq * yy + rng.uniform(0, 2 * np.pi) + 0.3 * np.sin(0.3 * xx))
        base = np.array([0.15, 0.35, 0.70]) + rng.normal(0, 0.03, 3)
        img = base + wave[..., None] * np.array([0.5, 0.8, 1.0])
    elif env == 1:  # land: green-brown blotches
        coarse = rng.normal(0, 1, size=(h // 8 + 2, w // 8 + 2))
        blot = np.kron(coarse, np.ones((8, 8)))[:h, :w]
        base = np.array([0.40, 0.55, 0.22]) + rng.normal(0, 0.03, 3)
        img = base + 0.06 * blot[..., None] * np.array([1.0, 0.6, 0.4])
    elif env == 2:  # checker
        period = int(rng.integers(3, 6))
        chk = ((yy // period + xx // period) % 2)[..., None]
        img = np.array([0.55, 0.25, 0.45]) + 0.15 * chk
    elif env == 3:  # haze: gray diagonal stripes
        img = np.array([0.6, 0.6, 0.6]) + 0.1 * np.sin(0.6 * (xx + yy) + rng.uniform(0, 6))[..., None]
    else:
        raise ValueError(env)
    return np.clip(img + noise, 0.0, 1.0)


def _occlude(mask: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Drop roughly ``frac`` of the mask's pixels on one side of a random line."""
    if frac <= 0:
        return mask
    yy, xx = np.nonzero(mask)
    theta = rng.uniform(0, 2 * np.pi)
    proj = yy * np.cos(theta) + xx * np.sin(theta)
    cut = np.quantile(proj, frac)
    out = mask.copy()
    out[yy[proj < cut], xx[proj < cut]] = False
    return out


def compose(glyph: str | None, env: int, spec: SpuriousSpec,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Render one image; returns (uint8 HxWx3 image, boolean glyph mask)."""
    h, w = spec.image_size
    img = _background(env, (h, w), rng)
    full = np.zeros((h, w), dtype=bool)
    if glyph is not None:
        size = int(rng.integers(spec.glyph_size[0], spec.glyph_size[1] + 1))
        m = _occlude(_glyph_mask(glyph, size, rng), rng.uniform(*spec.glyph_occlusion), rng)
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        full[top:top + size, left:left + size] = m
        color = np.clip(GLYPH_COLOR + rng.normal(0, 0.04, 3), 0, 1)
        c = rng.uniform(*spec.glyph_contrast)
        img[full] = (1 - c) * img[full] + c * color
    if spec.pixel_noise > 0:
        img = np.clip(img + rng.normal(0.0, spec.pixel_noise, img.shape), 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8), full


def _aligned_flags(n: int, r: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly round(r*n) True entries at random positions."""
    flags = np.zeros(n, dtype=bool)
    flags[: int(round(r * n))] = True
    return rng.permutation(flags)


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % 2)


@dataclass
class Benchmark:
    """In-memory benchmark: per-split arrays plus the manifest dict."""

    images: dict[str, np.ndarray]
    glyph_masks: dict[str, np.ndarray]
    manifest: dict

    def records(self, split: str) -> list[dict]:
        rows = self.manifest["splits"][split]["rows"]
        return [dict(zip(MANIFEST_FIELDS, row)) for row in rows]

    def labels(self, split: str) -> np.ndarray:
        return np.array([row[1] for row in self.manifest["splits"][split]["rows"]], dtype=np.int64)

    def envs(self, split: str) -> np.ndarray:
        return np.array([row[2] for row in self.manifest["splits"][split]["rows"]], dtype=np.int64)

    def tensors(self, split: str) -> tuple[torch.Tensor, torch.Tensor]:
        return to_tensor(self.images[split]), torch.from_numpy(self.labels(split))


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def generate_spurious_benchmark(spec: SpuriousSpec, seed: int = 0) -> Benchmark:
    """Generate every split of the synthetic benchmark deterministically from ``seed``."""
    spec.validate()
    root = np.random.SeedSequence(seed)
    split_rngs = {s: np.random.default_rng(child)
                  for s, child in zip(SPLITS, root.spawn(len(SPLITS)))}
    images, masks, manifest_splits = {}, {}, {}
    for split in SPLITS:
        n = spec.counts.get(split, 0)
        if n == 0:
            continue
        rng = split_rngs[split]
        if split in ID_SPLITS:
            labels = _balanced_labels(n, rng)
            r = 0.5 if split == "test_id" else spec.correlation
            aligned = _aligned_flags(n, r, rng)
            envs = np.where(aligned, labels, 1 - labels)
            glyphs = [ID_GLYPHS[k] for k in labels]
        elif split == "spurious_ood":
            labels = np.full(n, -1)
            envs = _balanced_labels(n, rng)
            glyphs = [None] * n
        elif split == "conventional_ood":
            labels = np.full(n, -1)
            envs = 2 + _balanced_labels(n, rng)
            glyphs = [NOVEL_GLYPHS[k] for k in _balanced_labels(n, rng)]
        else:  # finegrained_ood: near-copies of ID glyphs on ID backgrounds
            labels = np.full(n, -1)
            envs = _balanced_labels(n, rng)
            glyphs = [NEAR_GLYPHS[k] for k in _balanced_labels(n, rng)]
        imgs = np.empty((n, *spec.image_size, 3), dtype=np.uint8)
        gm = np.empty((n, *spec.image_size), dtype=bool)
        for i in range(n):
            imgs[i], gm[i] = compose(glyphs[i], int(envs[i]), spec, rng)
        images[split], masks[split] = imgs, gm
        rows = [[f"{split}-{i:05d}", int(labels[i]), int(envs[i]), glyphs[i] or ""]
                for i in range(n)]
        manifest_splits[split] = {"count": n, "sha256": _digest(imgs), "rows": rows}
    spec_dict = asdict(spec)
    spec_dict["image_size"] = list(spec.image_size)
    spec_dict["glyph_size"] = list(spec.glyph_size)
    spec_dict["glyph_contrast"] = list(spec.glyph_contrast)
    spec_dict["glyph_occlusion"] = list(spec.glyph_occlusion)
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "fields": list(MANIFEST_FIELDS),
        "seed": seed,
        "spec": spec_dict,
        "env_names": list(ENV_NAMES),
        "splits": manifest_splits,
    }
    return Benchmark(images=images, glyph_masks=masks, manifest=manifest)


def manifest_text(manifest: dict) -> str:
    return json.dumps(manifest, sort_keys=True, indent=1) + "\n"


def save_benchmark(bench: Benchmark, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = dict(bench.images)
    arrays.update({f"{k}__glyph_mask": v for k, v in bench.glyph_masks.items()})
    np.savez_compressed(out / "images.npz", **arrays)
    (out / "manifest.json").write_text(manifest_text(bench.manifest))
    return out


def load_benchmark(root: str | Path) -> Benchmark:
    root = Path(root)
    if not (root / "manifest.json").is_file() or not (root / "images.npz").is_file():
        raise MissingDirectory(f"{root} is not a benchmark directory (manifest.json + images.npz)")
    manifest = json.loads((root / "manifest.json").read_text())
    with np.load(root / "images.npz") as z:
        images = {s: z[s] for s in manifest["splits"]}
        masks = {s: z[f"{s}__glyph_mask"] for s in manifest["splits"]}
    for split, arr in images.items():
        if _digest(arr) != manifest["splits"][split]["sha256"]:
            raise UnreadableImage(f"array digest mismatch for split {split}")
    return Benchmark(images=images, glyph_masks=masks, manifest=manifest)


def export_image_folders(bench: Benchmark, out_dir: str | Path) -> Path:
    """Write each split as PNGs: ID splits as class subfolders, OOD splits flat."""
    out = Path(out_dir)
    for split, imgs in bench.images.items():
        for rec, img in zip(bench.records(split), imgs):
            sub = out / split / (str(rec["label"]) if split in ID_SPLITS else "")
            sub.mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(sub / f"{rec['id']}.png")
    return out


# --- tensors and loaders ---------------------------------------------------

def to_tensor(images: np.ndarray, mean: Sequence[float] = NORM_MEAN,
              std: Sequence[float] = NORM_STD) -> torch.Tensor:
    """uint8 [N, H, W, C] -> normalized float32 [N, C, H, W]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float() / 255.0
    m = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    return (x - m) / s


def from_tensor(x: torch.Tensor, mean: Sequence[float] = NORM_MEAN,
                std: Sequence[float] = NORM_STD) -> np.ndarray:
    """Inverse of :func:`to_tensor`, clipped to the displayable range."""
    m = torch.tensor(mean, dtype=x.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, -1, 1, 1)
    img = (x * s + m).clamp(0, 1).permute(0, 2, 3, 1)
    return (img.numpy() * 255).round().astype(np.uint8)


class TensorBatches:
    """Minibatch iterator over in-memory tensors.

    Shuffling and flips draw only from ``generator``, so iteration order is a
    pure function of the generator state.
    """

    def __init__(self, x: torch.Tensor, y: torch.Tensor, batch_size: int, shuffle: bool = False,
                 generator: torch.Generator | None = None, hflip: bool = False):
        self.x, self.y = x, y
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.generator = generator
        self.hflip = hflip

    def __len__(self) -> int:
        return (len(self.x) + self.batch_size - 1) // self.batch_size

    def __iter__(self) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        n = len(self.x)
        order = torch.randperm(n, generator=self.generator) if self.shuffle else torch.arange(n)
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            xb = self.x[idx]
            if self.hflip:
                flip = torch.rand(len(idx), generator=self.generator) < 0.5
                xb = torch.where(flip.view(-1, 1, 1, 1), xb.flip(-1), xb)
            yield xb, self.y[idx]


# --- image folders ---------------------------------------------------------

@dataclass
class TransformSpec:
    """Preprocessing for folder images; ``crop`` is one of
    None, "center", "random", "random_resized"."""

    size: int | None = None
    crop: str | None = None
    hflip: bool = False
    mean: tuple[float, ...] = NORM_MEAN
    std: tuple[float, ...] = NORM_STD

    def build(self):
        from torchvision import transforms as T

        ops = []
        if self.crop == "random_resized":
            ops.append(T.RandomResizedCrop(self.size))
        elif self.size is not None:
            ops.append(T.Resize(self.size))
            if self.crop == "center":
                ops.append(T.CenterCrop(self.size))
            elif self.crop == "random":
                ops.append(T.RandomCrop(self.size, padding=max(1, self.size // 8)))
        if self.hflip:
            ops.append(T.RandomHorizontalFlip())
        ops += [T.ToTensor(), T.Normalize(self.mean, self.std)]
        return T.Compose(ops)


class ImageFolderDataset(torch.utils.data.Dataset):
    """Either class subfolders (labelled) or a flat folder of images (label -1)."""

    def __init__(self, root: str | Path, transform_spec: TransformSpec | None = None):
        root = Path(root)
        if not root.is_dir():
            raise MissingDirectory(f"no such directory: {root}")
        self.root = root
        self.transform = (transform_spec or TransformSpec()).build()
        subdirs = sorted(p for p in root.iterdir() if p.is_dir())
        if subdirs:
            self.classes = [p.name for p in subdirs]
            self.samples = [(f, i) for i, d in enumerate(subdirs) for f in _image_files(d)]
        else:
            self.classes = []
            self.samples = [(f, -1) for f in _image_files(root)]
        if not self.samples:
            raise MissingDirectory(f"no images found under {root}")

    @property
    def labelled(self) -> bool:
        return bool(self.classes)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int):
        path, label = self.samples[i]
        try:
            with Image.open(path) as im:
                img = im.convert("RGB")
        except (UnidentifiedImageError, OSError) as e:
            raise UnreadableImage(f"cannot read {path}: {e}") from e
        return self.transform(img), label

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        xs, ys = zip(*(self[i] for i in range(len(self))))
        return torch.stack(xs), torch.tensor(ys, dtype=torch.int64)


def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMG_EXTENSIONS)


def load_image_folder(root: str | Path, transform_spec: TransformSpec | None = None) -> ImageFolderDataset:
    return ImageFolderDataset(root, transform_spec)


def load_split(ref: str | os.PathLike, transform_spec: TransformSpec | None = None
               ) -> tuple[torch.Tensor, torch.Tensor]:
    """Resolve ``<benchmark_dir>:<split>`` or an image folder into tensors."""
    ref = str(ref)
    if ":" in ref and not Path(ref).exists():
        root, split = ref.rsplit(":", 1)
        bench = load_benchmark(root)
        if split not in bench.images:
            raise MissingDirectory(f"benchmark {root} has no split {split!r}")
        return bench.tensors(split)
    return load_image_folder(ref, transform_spec).tensors()
