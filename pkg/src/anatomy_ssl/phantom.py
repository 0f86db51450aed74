"""Procedural pseudo-radiographs and on-disk datasets.

Every phantom shares one layout (two dark lung fields crossed by bright rib
bands, a bright central mediastinum column, a mid-grey body outline) with small
per-seed jitter, so that the same patch position shows the same structure
across images.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, IntegrityError, PersistenceError

MANIFEST_NAME = "manifest.jsonl"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    patch: int = 8
    position_jitter: float = 0.05  # fraction of width, max absolute shift
    intensity_jitter: float = 0.05  # max relative intensity change
    noise: float = 0.02
    blur: float = 1.5

    def validate(self) -> None:
        if self.size <= 0 or self.patch <= 0:
            raise ConfigurationError(f"size and patch must be positive, got {self.size}, {self.patch}")
        if self.size % self.patch:
            raise ConfigurationError(f"size {self.size} not divisible by patch {self.patch}")
        if not 0 <= self.position_jitter <= 0.05:
            raise ConfigurationError("position_jitter must lie in [0, 0.05]")
        if not 0 <= self.intensity_jitter <= 0.05:
            raise ConfigurationError("intensity_jitter must lie in [0, 0.05]")
        if self.noise < 0 or self.blur < 0:
            raise ConfigurationError("noise and blur must be non-negative")

    @property
    def num_tokens(self) -> int:
        return (self.size // self.patch) ** 2


def check_image(image: np.ndarray, patch: int | None = None) -> np.ndarray:
    """Validate the image invariants and return the array as float64."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise IntegrityError(f"image must be 2-D, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise IntegrityError("image values must lie in [0, 1]")
    if patch is not None and (image.shape[0] % patch or image.shape[1] % patch):
        raise IntegrityError(f"image shape {image.shape} not divisible by patch {patch}")
    return image


def _ellipse(u, v, cu, cv, ru, rv):
    return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0


def generate_phantom(seed: int, cfg: PhantomConfig = PhantomConfig()) -> np.ndarray:
    """Render one phantom; the result is a pure function of ``(seed, cfg)``."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9E37]))
    n = cfg.size
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n
    v, u = np.meshgrid(coords, coords, indexing="ij")

    pj, ij = cfg.position_jitter, cfg.intensity_jitter
    # global shift plus a smaller per-structure shift; total stays within pj
    du, dv = rng.uniform(-pj / 2, pj / 2, size=2)

    def shift():
        return du + rng.uniform(-pj / 2, pj / 2), dv + rng.uniform(-pj / 2, pj / 2)

    def level(x):
        return x * (1.0 + rng.uniform(-ij, ij))

    img = np.full((n, n), level(0.06))
    su, sv = shift()
    img[_ellipse(u, v, 0.5 + su, 0.55 + sv, 0.47, 0.52)] = level(0.42)

    lungs = np.zeros((n, n), dtype=bool)
    for cu in (0.29, 0.71):
        su, sv = shift()
        lungs |= _ellipse(u, v, cu + su, 0.5 + sv, 0.17, 0.31)
    img[lungs] = level(0.14)

    rib_level = level(0.30)
    su, sv = shift()
    for i in range(6):
        band = np.abs(v - (0.27 + 0.095 * i + sv)) <= 0.018
        img[band & lungs] += rib_level

    su, sv = shift()
    column = (np.abs(u - (0.5 + su)) <= 0.065) & (v >= 0.12 + sv) & (v <= 0.9 + sv)
    img[column] = level(0.85)

    if cfg.blur > 0:
        img = gaussian_filter(img, cfg.blur, mode="nearest")
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float64) / 255.0


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    file: str
    split: str
    label: str  # "normal" or "abnormal"

    @property
    def is_abnormal(self) -> bool:
        return self.label == "abnormal"


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    seed: int
    height: int
    width: int
    format_version: int = FORMAT_VERSION
    generator: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "count": len(self.entries),
            "generator": self.generator,
        }


class Dataset:
    """A loaded manifest plus lazy image decoding."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.manifest.entries)

    @property
    def entries(self) -> list[ManifestEntry]:
        return self.manifest.entries

    def path(self, index: int) -> Path:
        return self.manifest.root / self.manifest.entries[index].file

    def image(self, index: int) -> np.ndarray:
        path = self.path(index)
        try:
            with PILImage.open(path) as im:
                data = np.asarray(im.convert("L"))
        except OSError as exc:
            raise PersistenceError(f"cannot decode {path}: {exc}") from exc
        if data.shape != (self.manifest.height, self.manifest.width):
            raise IntegrityError(
                f"{path}: decoded shape {data.shape} != manifest "
                f"({self.manifest.height}, {self.manifest.width})"
            )
        return from_uint8(data)

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(len(self)):
            yield self.image(i)

    def labels(self) -> np.ndarray:
        """Boolean array, True where the entry is abnormal."""
        return np.array([e.is_abnormal for e in self.entries], dtype=bool)

    def subset(self, split: str) -> "Dataset":
        entries = [e for e in self.entries if e.split == split]
        m = self.manifest
        return Dataset(DatasetManifest(m.root, entries, m.seed, m.height, m.width, m.format_version, m.generator))

    def stack(self) -> np.ndarray:
        return np.stack([self.image(i) for i in range(len(self))])


def write_png(path: Path, image: np.ndarray) -> None:
    try:
        PILImage.fromarray(to_uint8(image), mode="L").save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def write_manifest(manifest: DatasetManifest) -> Path:
    path = manifest.root / MANIFEST_NAME
    lines = [json.dumps(manifest.header(), sort_keys=True)]
    lines += [json.dumps(asdict(e), sort_keys=True) for e in manifest.entries]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc
    return path


def build_dataset(
    count: int,
    seed: int,
    out_dir: str | os.PathLike,
    cfg: PhantomConfig = PhantomConfig(),
    split: str = "train",
    abnormal_count: int = 0,
    slm_cfg=None,
) -> DatasetManifest:
    """Write ``count`` normal phantoms (and optionally SLM-abnormal ones) plus a manifest.

    Abnormal entries are fresh phantoms with one synthetic lesion mask applied;
    they never share a base image with a normal entry.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    if abnormal_count < 0:
        raise ConfigurationError("abnormal_count must be >= 0")
    cfg.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create {root}: {exc}") from exc

    entries = []
    for i in range(count):
        name = f"n{i:05d}"
        write_png(root / f"{name}.png", generate_phantom(_image_seed(seed, i), cfg))
        entries.append(ManifestEntry(name, f"{name}.png", split, "normal"))
    if abnormal_count:
        from .slm import SLMConfig, draw_slm, apply_slm

        slm_cfg = slm_cfg or SLMConfig()
        for i in range(abnormal_count):
            name = f"a{i:05d}"
            base = generate_phantom(_image_seed(seed, count + i), cfg)
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), count + i, 0xAB]))
            abnormal = apply_slm(base, draw_slm(base, rng, slm_cfg))
            write_png(root / f"{name}.png", abnormal)
            entries.append(ManifestEntry(name, f"{name}.png", split, "abnormal"))

    generator = {"phantom": asdict(cfg)}
    if abnormal_count:
        generator["slm"] = asdict(slm_cfg)
    manifest = DatasetManifest(root, entries, int(seed), cfg.size, cfg.size, FORMAT_VERSION, generator)
    write_manifest(manifest)
    return manifest


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def load_dataset(directory: str | os.PathLike) -> Dataset:
    root = Path(directory)
    path = root / MANIFEST_NAME
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise PersistenceError(f"cannot read manifest {path}: {exc}") from exc
    try:
        header = json.loads(lines[0])
        entries = [ManifestEntry(**json.loads(ln)) for ln in lines[1:]]
        manifest = DatasetManifest(
            root,
            entries,
            int(header["seed"]),
            int(header["height"]),
            int(header["width"]),
            int(header["format_version"]),
            header.get("generator", {}),
        )
    except (IndexError, KeyError, TypeError, ValueError) as exc:
        raise PersistenceError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.format_version != FORMAT_VERSION:
        raise PersistenceError(
            f"manifest format {manifest.format_version} unsupported (expected {FORMAT_VERSION})"
        )
    if not entries:
        raise PersistenceError(f"manifest {path} has no entries")
    if len({e.id for e in entries}) != len(entries):
        raise IntegrityError(f"manifest {path} has duplicate ids")
    for e in entries:
        f = root / e.file
        if not f.is_file():
            raise PersistenceError(f"missing image file {f}")
        with PILImage.open(f) as im:
            w, h = im.size
        if (h, w) != (manifest.height, manifest.width):
            raise IntegrityError(f"{f}: size {h}x{w} != manifest {manifest.height}x{manifest.width}")
    return Dataset(manifest)
