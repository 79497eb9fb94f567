"""Dataset handling: synthetic layered phantoms, augmentation, disk I/O.

A phantom is a stratified stack of nine tissue bands over background with a
central parabolic disc wedge interrupting the stack from the top of band 1
down toward the choroid.  Outside the disc every column carries the bands in
strict anatomical order; inside, the disc label forms one contiguous
vertical run.  Images are per-band mean intensities with smoothed
boundaries and Gaussian noise, quantized to the 16-bit grid so the PNG
round-trip is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

__all__ = [
    "LabeledSample", "PhantomSpec", "SplitSpec", "gen_phantom", "augment",
    "flip_sample", "add_noise", "adjust_contrast", "save_dataset",
    "load_dataset", "make_split",
]

DIVISOR = 16


@dataclass
class LabeledSample:
    image: np.ndarray        # [H,W] float64 in [0,1]
    label: np.ndarray        # [H,W] int64 in 0..10
    sample_id: str
    subject_id: str

    def validate(self):
        if self.image.shape != self.label.shape:
            raise DataError(f"sample {self.sample_id}: image {self.image.shape} "
                            f"vs label {self.label.shape}")
        h, w = self.image.shape
        if h % DIVISOR or w % DIVISOR:
            raise DataError(f"sample {self.sample_id}: {h}x{w} not divisible by {DIVISOR}")
        if self.label.min() < 0 or self.label.max() > 10:
            raise DataError(f"sample {self.sample_id}: labels outside 0..10")


@dataclass
class PhantomSpec:
    """Geometry/intensity ranges for the synthetic generator.

    Thickness ranges are per-band pixel intervals (bands 1..9 top to
    bottom); the disc is parameterized by a horizontal center and half-width
    (fractions of the image width) and a depth fraction of the band-1..8
    stack.  Per-band thickness fields wiggle sinusoidally by at most 15%.
    """

    height: int = 128
    width: int = 256
    seed: int = 0
    scans_per_subject: int = 2
    top_margin: tuple = (6.0, 12.0)
    thickness_ranges: tuple = ((9, 13), (6, 9), (6, 9), (6, 9), (6, 9),
                               (10, 14), (6, 8), (6, 8), (12, 18))
    disc_center: tuple = (0.35, 0.65)
    disc_halfwidth: tuple = (0.12, 0.20)
    disc_depth: tuple = (0.9, 1.0)
    background_intensity: float = 0.05
    layer_intensities: tuple = (0.90, 0.30, 0.70, 0.20, 0.60, 0.12, 0.80, 0.96, 0.42)
    disc_intensity: float = 0.50
    noise_sigma: float = 0.02
    wiggle_amplitude: float = 3.0
    wiggle_cycles: tuple = (0.5, 2.5)

    def validate(self):
        if self.height % DIVISOR or self.width % DIVISOR:
            raise ConfigError(f"phantom size {self.height}x{self.width} "
                              f"must be divisible by {DIVISOR}")
        if len(self.thickness_ranges) != 9 or len(self.layer_intensities) != 9:
            raise ConfigError("need exactly 9 thickness ranges and intensities")
        for lo, hi in self.thickness_ranges:
            if not (2 <= lo <= hi):
                raise ConfigError(f"bad thickness range ({lo}, {hi})")
        max_stack = (self.top_margin[1] + self.wiggle_amplitude
                     + 1.15 * sum(hi for _, hi in self.thickness_ranges))
        if max_stack >= self.height - 1:
            raise ConfigError(f"max stack {max_stack:.0f}px does not fit in H={self.height}")
        if not (0.0 < self.disc_center[0] <= self.disc_center[1] < 1.0):
            raise ConfigError(f"disc center range {self.disc_center} not interior")
        if self.disc_center[0] - self.disc_halfwidth[1] <= 0.0 or \
           self.disc_center[1] + self.disc_halfwidth[1] >= 1.0:
            raise ConfigError("disc can extend outside the image")
        if not (0.0 < self.disc_depth[0] <= self.disc_depth[1] <= 1.0):
            raise ConfigError(f"bad disc depth range {self.disc_depth}")
        if self.scans_per_subject < 1:
            raise ConfigError("scans_per_subject must be >= 1")

    # flat key=value serialization -----------------------------------------
    def to_file(self, path):
        lines = []
        for key, val in self.__dict__.items():
            if isinstance(val, tuple):
                flat = []
                for v in val:
                    flat.extend(v) if isinstance(v, (tuple, list)) else flat.append(v)
                lines.append(f"{key}={','.join(repr(float(v)) for v in flat)}")
            else:
                lines.append(f"{key}={val}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "PhantomSpec":
        spec = cls()
        text = Path(path).read_text()
        for line_no, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if not hasattr(spec, key):
                raise DataError(f"{path}:{line_no}: unknown key {key!r}")
            default = getattr(spec, key)
            vals = [v.strip() for v in raw.split(",")]
            if isinstance(default, tuple):
                nums = [float(v) for v in vals]
                if key == "thickness_ranges":
                    parsed = tuple((nums[i], nums[i + 1]) for i in range(0, len(nums), 2))
                else:
                    parsed = tuple(nums)
                spec = replace(spec, **{key: parsed})
            elif isinstance(default, int):
                spec = replace(spec, **{key: int(float(raw))})
            else:
                spec = replace(spec, **{key: float(raw)})
        return spec


def _sinusoid(rng, width, amplitude, cycles_range):
    amp = rng.uniform(0.0, amplitude)
    cycles = rng.uniform(*cycles_range)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    x = np.arange(width)
    return amp * np.sin(2.0 * np.pi * cycles * x / width + phase)


def _smooth3(img):
    """Separable [1/4, 1/2, 1/4] blur with edge replication."""
    k = np.array([0.25, 0.5, 0.25])
    pad = np.pad(img, ((1, 1), (0, 0)), mode="edge")
    img = k[0] * pad[:-2] + k[1] * pad[1:-1] + k[2] * pad[2:]
    pad = np.pad(img, ((0, 0), (1, 1)), mode="edge")
    return k[0] * pad[:, :-2] + k[1] * pad[:, 1:-1] + k[2] * pad[:, 2:]


def quantize16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0


def _gen_one(spec: PhantomSpec, rng: np.random.Generator):
    h, w = spec.height, spec.width
    x = np.arange(w)

    top = rng.uniform(*spec.top_margin) + _sinusoid(
        rng, w, spec.wiggle_amplitude, spec.wiggle_cycles)
    top = np.clip(top, 1.0, None)

    # boundaries[k] = top of band k+1; bands keep strict vertical order
    boundaries = np.empty((10, w))
    boundaries[0] = top
    for k, (lo, hi) in enumerate(spec.thickness_ranges):
        base = rng.uniform(lo, hi)
        wig = _sinusoid(rng, w, 0.15 * base, spec.wiggle_cycles)
        boundaries[k + 1] = boundaries[k] + np.maximum(base + wig, 2.0)
    rows = np.round(boundaries).astype(np.int64)
    rows = np.clip(rows, 0, h - 1)

    yy = np.arange(h)[:, None]
    label = np.zeros((h, w), dtype=np.int64)
    for k in range(1, 10):
        label[(yy >= rows[k - 1]) & (yy < rows[k])] = k

    # parabolic disc wedge from the stack top toward the choroid
    cx = rng.uniform(*spec.disc_center) * w
    hw = rng.uniform(*spec.disc_halfwidth) * w
    depth = rng.uniform(*spec.disc_depth)
    taper = ((x - cx) / hw) ** 2
    in_disc = taper < 1.0
    disc_bot = boundaries[0] + depth * (1.0 - taper) * (boundaries[8] - boundaries[0])
    disc_rows = np.round(np.where(in_disc, disc_bot, boundaries[0])).astype(np.int64)
    disc_mask = in_disc[None, :] & (yy >= rows[0]) & (yy < disc_rows[None, :])
    label[disc_mask] = 10

    lut = np.array([spec.background_intensity, *spec.layer_intensities,
                    spec.disc_intensity])
    img = _smooth3(lut[label])
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return quantize16(img), label


def gen_phantom(spec: PhantomSpec, n: int) -> list:
    """Generate ``n`` samples, ``spec.scans_per_subject`` scans per subject.

    Each sample derives its own rng from (spec.seed, sample index), so
    generation is deterministic and order-independent.
    """
    spec.validate()
    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed,
                                                           spawn_key=(i,)))
        img, label = _gen_one(spec, rng)
        subject = f"s{i // spec.scans_per_subject:03d}"
        scan = i % spec.scans_per_subject
        samples.append(LabeledSample(image=img, label=label,
                                     sample_id=f"{subject}_{scan}",
                                     subject_id=subject))
    return samples


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def flip_sample(sample: LabeledSample) -> LabeledSample:
    return LabeledSample(image=sample.image[:, ::-1].copy(),
                         label=sample.label[:, ::-1].copy(),
                         sample_id=sample.sample_id, subject_id=sample.subject_id)


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0.0:
        return image
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def adjust_contrast(image: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return image
    mean = image.mean()
    return np.clip(mean + scale * (image - mean), 0.0, 1.0)


def augment(sample: LabeledSample, rng: np.random.Generator) -> LabeledSample:
    """Random horizontal flip, additive Gaussian noise, contrast jitter.

    Labels are only ever transformed spatially (by the flip); noise sigma is
    drawn from [0, 0.03] and the contrast factor from [0.8, 1.2].
    """
    out = flip_sample(sample) if rng.random() < 0.5 else sample
    img = add_noise(out.image, rng.uniform(0.0, 0.03), rng)
    img = adjust_contrast(img, rng.uniform(0.8, 1.2))
    return LabeledSample(image=img, label=out.label.copy(),
                         sample_id=sample.sample_id, subject_id=sample.subject_id)


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------

def save_dataset(root, samples, split_of: dict | None = None):
    """Write images/ (16-bit PNG), labels/ (8-bit PNG) and manifest.tsv."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = ["id\tsubject\tsplit"]
    for s in samples:
        s.validate()
        img16 = np.round(s.image * 65535.0).astype(np.uint16)
        Image.fromarray(img16).save(root / "images" / f"{s.sample_id}.png")
        Image.fromarray(s.label.astype(np.uint8)).save(root / "labels" / f"{s.sample_id}.png")
        split = (split_of or {}).get(s.subject_id, "")
        lines.append(f"{s.sample_id}\t{s.subject_id}\t{split}")
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n")


def load_dataset(root):
    """Read a dataset directory; returns (samples, split_of_subject dict).

    An empty/missing images directory yields an empty dataset.  Any broken
    pair is reported with the offending file name.
    """
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        return [], {}

    manifest_rows = []
    manifest = root / "manifest.tsv"
    if manifest.is_file():
        rows = manifest.read_text().splitlines()
        for row in rows[1:]:
            if not row.strip():
                continue
            parts = row.split("\t")
            if len(parts) != 3:
                raise DataError(f"{manifest}: malformed row {row!r}")
            manifest_rows.append(parts)
    else:
        for p in sorted(img_dir.glob("*.png")):
            sid = p.stem
            manifest_rows.append([sid, sid.rsplit("_", 1)[0], ""])

    samples, split_of = [], {}
    for sid, subject, split in manifest_rows:
        img_path = img_dir / f"{sid}.png"
        lab_path = root / "labels" / f"{sid}.png"
        if not img_path.is_file():
            raise DataError(f"missing image file {img_path}")
        if not lab_path.is_file():
            raise DataError(f"missing label file {lab_path}")
        img_raw = np.array(Image.open(img_path))
        lab = np.array(Image.open(lab_path)).astype(np.int64)
        if img_raw.dtype != np.uint16:
            raise DataError(f"{img_path}: expected 16-bit grayscale, got {img_raw.dtype}")
        if img_raw.shape != lab.shape:
            raise DataError(f"{lab_path}: label shape {lab.shape} != image {img_raw.shape}")
        if lab.min() < 0 or lab.max() > 10:
            raise DataError(f"{lab_path}: label values outside 0..10 (max {lab.max()})")
        samples.append(LabeledSample(image=img_raw.astype(np.float64) / 65535.0,
                                     label=lab, sample_id=sid, subject_id=subject))
        if split:
            split_of[subject] = split
    return samples, split_of


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int = 0

    def split_of(self) -> dict:
        out = {}
        for name in ("train", "val", "test"):
            for subject in getattr(self, name):
                out[subject] = name
        return out

    def select(self, samples, part: str) -> list:
        wanted = set(getattr(self, part))
        return [s for s in samples if s.subject_id in wanted]


def make_split(samples, seed: int) -> SplitSpec:
    """Subject-level 6:2:2 partition (remainder rounds toward train)."""
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < 5:
        raise ConfigError(f"need at least 5 subjects to split 6:2:2, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    n = len(subjects)
    n_val = n * 2 // 10
    n_test = n * 2 // 10
    n_train = n - n_val - n_test
    return SplitSpec(train=sorted(shuffled[:n_train]),
                     val=sorted(shuffled[n_train:n_train + n_val]),
                     test=sorted(shuffled[n_train + n_val:]),
                     seed=seed)
