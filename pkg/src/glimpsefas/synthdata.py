"""Synthetic bona fide / attack images with planted local artifacts.

Backgrounds are smooth low-frequency colour fields with mild sensor noise.
Attack images carry exactly one small high-frequency artifact (a moire-like
grating by default) and, optionally, a global tint cue.  Everything is a pure
function of the config and its seed so datasets are byte reproducible.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

BONA_FIDE = "bona_fide"
ATTACK = "attack"
LABELS = (BONA_FIDE, ATTACK)
ARTIFACT_KINDS = ("sinusoid_grating", "checker", "blur_patch")
MANIFEST_HEADER = ["id", "path", "label", "pai_type", "group_id"]

_TINT = np.array([0.45, 0.5, 0.62])


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    image_size: int = 64
    n_genuine: int = 100
    n_attack: int = 100
    artifact_size: int = 9
    artifact_amplitude: float = 0.15
    global_cue_strength: float = 0.0
    artifact_kind: str = "sinusoid_grating"
    seed: int = 0
    # background process knobs
    noise_std: float = 0.04
    background_cells: int = 4
    # per-attack amplitude is drawn from amplitude * (1 +/- spread)
    amplitude_spread: float = 0.0

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if not 1 <= self.artifact_size < self.image_size:
            raise ConfigError(
                f"artifact_size must be in [1, image_size), got {self.artifact_size}"
            )
        if self.n_genuine < 0 or self.n_attack < 0:
            raise ConfigError("sample counts must be non-negative")
        for name in ("artifact_amplitude", "global_cue_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.artifact_kind not in ARTIFACT_KINDS:
            raise ConfigError(f"unknown artifact_kind {self.artifact_kind!r}")
        if not 0.0 <= self.amplitude_spread <= 1.0:
            raise ConfigError(f"amplitude_spread must lie in [0, 1], got {self.amplitude_spread}")
        if self.artifact_amplitude * (1 + self.amplitude_spread) > 1.0:
            raise ConfigError("artifact_amplitude * (1 + amplitude_spread) must not exceed 1")
        if self.noise_std < 0 or self.background_cells < 1:
            raise ConfigError("invalid background process parameters")


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x 3, float64 in [0, 1]
    label: str
    pai_type: str | None = None
    group_id: str | None = None
    # ground-truth artifact square (top, left, size); synthetic attacks only
    artifact_box: tuple[int, int, int] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass
class DatasetSplit:
    train: list[Sample]
    dev: list[Sample]
    test: list[Sample]


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth random colour field plus white noise, quantized to 8 bits."""
    n = cfg.image_size
    cells = cfg.background_cells
    coarse = rng.normal(0.5, 0.12, size=(cells + 1, cells + 1, 3))
    # bilinear upsampling of the coarse lattice
    t = np.linspace(0.0, cells, n)
    i0 = np.minimum(np.floor(t).astype(int), cells - 1)
    w = (t - i0)[:, None]
    rows = coarse[i0] * (1 - w)[:, :, None] + coarse[i0 + 1] * w[:, :, None]
    w = (t - i0)[None, :, None]
    img = rows[:, i0] * (1 - w) + rows[:, i0 + 1] * w
    img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    return _quantize(img)


def _pattern(kind: str, size: int, region: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    if kind == "sinusoid_grating":
        theta = rng.uniform(0.0, np.pi)
        period = rng.uniform(2.5, 3.5)
        phase = rng.uniform(0.0, 2 * np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        return np.repeat(np.sin(2 * np.pi * u / period + phase)[:, :, None], 3, axis=2)
    if kind == "checker":
        cell = int(rng.integers(1, 3))
        sign = ((yy // cell + xx // cell) % 2) * 2 - 1
        return np.repeat(sign[:, :, None], 3, axis=2)
    if kind == "blur_patch":
        # pattern is the difference to a 3x3 box blur of the region
        padded = np.pad(region, ((1, 1), (1, 1), (0, 0)), mode="edge")
        blurred = sum(
            padded[dy : dy + size, dx : dx + size] for dy in range(3) for dx in range(3)
        ) / 9.0
        return (blurred - region) * 4.0
    raise ConfigError(f"unknown artifact kind {kind!r}")


def plant_local_artifact(
    image: np.ndarray,
    center: tuple[int, int],
    size: int,
    amplitude: float,
    kind: str,
    rng: np.random.Generator,
) -> np.ndarray:
    """Add an artifact pattern inside the ``size`` square centred at ``center``.

    ``center`` is (row, col); the square spans ``center - size // 2`` onwards.
    Pixels outside the square are returned untouched.
    """
    h, w = image.shape[:2]
    top, left = center[0] - size // 2, center[1] - size // 2
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise IndexError(
            f"artifact of size {size} at {center} exceeds image bounds {h}x{w}"
        )
    out = image.copy()
    region = image[top : top + size, left : left + size]
    pattern = _pattern(kind, size, region, rng)
    if amplitude == 0:
        return out
    out[top : top + size, left : left + size] = np.clip(region + amplitude * pattern, 0.0, 1.0)
    return out


def apply_global_cue(image: np.ndarray, strength: float) -> np.ndarray:
    if strength == 0:
        return image.copy()
    return np.clip((1 - strength) * image + strength * _TINT, 0.0, 1.0)


def _sample_rngs(cfg: SynthConfig) -> list[np.random.Generator]:
    seq = np.random.SeedSequence(cfg.seed)
    return [np.random.default_rng(s) for s in seq.spawn(cfg.n_genuine + cfg.n_attack)]


def generate_dataset(cfg: SynthConfig) -> list[Sample]:
    """Generate ``n_genuine`` bona fide then ``n_attack`` attack samples.

    Sample ``k`` draws its background from the k-th spawned child of the seed,
    so an attack image with zero amplitude and no cue equals a bona fide draw
    from the same background stream.
    """
    cfg.validate()
    rngs = _sample_rngs(cfg)
    samples: list[Sample] = []
    for k, rng in enumerate(rngs):
        img = background(cfg, rng)
        if k < cfg.n_genuine:
            samples.append(Sample(f"g{k:05d}", img, BONA_FIDE))
            continue
        j = k - cfg.n_genuine
        s, n = cfg.artifact_size, cfg.image_size
        top = int(rng.integers(0, n - s + 1))
        left = int(rng.integers(0, n - s + 1))
        amp = cfg.artifact_amplitude
        if cfg.amplitude_spread > 0:
            amp *= 1 + cfg.amplitude_spread * rng.uniform(-1, 1)
        img = plant_local_artifact(img, (top + s // 2, left + s // 2), s, amp, cfg.artifact_kind, rng)
        img = _quantize(apply_global_cue(img, cfg.global_cue_strength))
        samples.append(
            Sample(f"a{j:05d}", img, ATTACK, pai_type=cfg.artifact_kind, artifact_box=(top, left, s))
        )
    return samples


def split_protocol(
    samples: Sequence[Sample], ratios: tuple[float, float, float], seed: int
) -> DatasetSplit:
    """Seeded stratified partition into train/dev/test."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: list[list[Sample]] = [[], [], []]
    for label in LABELS:
        pool = [s for s in samples if s.label == label]
        order = rng.permutation(len(pool))
        n = len(pool)
        n_train = int(round(ratios[0] * n))
        n_dev = int(round(ratios[1] * n))
        n_train = min(n_train, n)
        n_dev = min(n_dev, n - n_train)
        bounds = [0, n_train, n_train + n_dev, n]
        for i in range(3):
            chunk = [pool[j] for j in order[bounds[i] : bounds[i + 1]]]
            if not chunk:
                name = ("train", "dev", "test")[i]
                raise ConfigError(f"split {name!r} would receive no {label} samples")
            parts[i].extend(chunk)
    return DatasetSplit(*parts)


def _read_png(path: Path, image_size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_image_folder(
    path: str | Path, label_map: dict[str, str], image_size: int = 64
) -> list[Sample]:
    """Load ``<root>/<label_dir>/[<group_id>/]<frame>.png`` into samples.

    ``label_map`` maps directory names to ``bona_fide`` / ``attack``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    samples: list[Sample] = []
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if label_dir.name not in label_map:
            raise ConfigError(f"unknown label directory {label_dir.name!r} in {root}")
        label = label_map[label_dir.name]
        for f in sorted(label_dir.rglob("*.png")):
            rel = f.relative_to(label_dir)
            group = rel.parts[0] if len(rel.parts) > 1 else None
            try:
                img = _read_png(f, image_size)
            except (OSError, UnidentifiedImageError) as exc:
                log.warning("skipping unreadable image %s: %s", f, exc)
                continue
            sid = "/".join((label_dir.name,) + rel.with_suffix("").parts)
            samples.append(Sample(sid, img, label, pai_type=None, group_id=group))
    if not samples:
        raise ConfigError(f"no images found under {root}")
    return samples


def write_dataset(samples: Iterable[Sample], out_dir: str | Path) -> Path:
    """Write PNGs under ``out_dir/images`` and a CSV manifest; returns its path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            rel = Path("images") / f"{s.id}.png"
            arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            # fixed PNG settings keep files byte identical across runs
            Image.fromarray(arr, "RGB").save(out / rel, optimize=False, compress_level=6)
            writer.writerow([s.id, rel.as_posix(), s.label, s.pai_type or "", s.group_id or ""])
    return manifest


def read_manifest(path: str | Path, image_size: int | None = None) -> list[Sample]:
    manifest = Path(path)
    samples = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ConfigError(f"bad manifest header {reader.fieldnames}, expected {MANIFEST_HEADER}")
        for row in reader:
            f = manifest.parent / row["path"]
            with Image.open(f) as im:
                size = image_size or im.size[0]
            img = _read_png(f, size)
            samples.append(
                Sample(row["id"], img, row["label"], row["pai_type"] or None, row["group_id"] or None)
            )
    if not samples:
        raise ConfigError(f"manifest {manifest} lists no samples")
    return samples


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
