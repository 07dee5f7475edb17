"""Manifests, preprocessing, augmentation, batching and synthetic paragraphs.

Manifest format: UTF-8 text, one ``relative_image_path<TAB>transcription``
record per line, ``#`` lines are comments. Line breaks inside a
transcription are written as the two characters ``\\n`` and become single
spaces when loaded.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import font
from .ctc import Charset
from .metrics import strip_line_breaks

logger = logging.getLogger(__name__)

HEIGHT_MULTIPLE = 32
WIDTH_MULTIPLE = 8
MIN_RAW_HEIGHT = 64
MIN_RAW_WIDTH = 16
MANIFEST_NAME = "manifest.tsv"
SPEC_NAME = "synthetic_spec.json"


class ManifestError(ValueError):
    """Raised with every problem found in a manifest, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid manifest:\n" + "\n".join(f"  - {p}" for p in problems))


# ---------------------------------------------------------------------------
# manifests and image files
# ---------------------------------------------------------------------------

def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"n": "\n", "t": "\t", "\\": "\\"}.get(nxt, "\\" + nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def write_manifest(path, records: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image_path, text in records:
            fh.write(f"{image_path}\t{_escape(text)}\n")


def read_manifest(path) -> list[tuple[str, str]]:
    """Raw (relative path, transcription) records, no validation."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            rel, sep, text = line.partition("\t")
            if not sep:
                raise ManifestError([f"line without a tab separator: {line!r}"])
            records.append((rel, _unescape(text)))
    return records


def load_manifest(path, charset: Charset | None = None) -> list[tuple[Path, str]]:
    """Resolve and validate a manifest.

    Returns (absolute image path, line-break-free transcription) pairs.
    Missing images and characters outside ``charset`` are collected and
    raised together as a :class:`ManifestError`.
    """
    path = Path(path)
    root = path.parent
    problems = []
    out = []
    for rel, text in read_manifest(path):
        image_path = (root / rel).resolve()
        text = strip_line_breaks(text)
        if not image_path.is_file():
            problems.append(f"missing image file: {image_path}")
        if charset is not None:
            bad = charset.unknown(text)
            if bad:
                problems.append(f"{rel}: characters outside the charset: {bad}")
        out.append((image_path, text))
    if problems:
        raise ManifestError(problems)
    return out


def load_image(path) -> np.ndarray:
    """8-bit array, (H, W) for gray images or (H, W, 3) for colour ones."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("1", "I", "I;16", "F"):
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.astype(np.uint8))


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    """Per-channel statistics of the downscaled training images (0..255 scale)."""

    mean: tuple[float, float, float] = (127.5, 127.5, 127.5)
    std: tuple[float, float, float] = (127.5, 127.5, 127.5)
    background: float = 255.0

    def normalize(self, rgb: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return ((rgb.astype(np.float32) - mean) / std).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return x * std + mean

    def fill_values(self) -> np.ndarray:
        """Normalized value of blank paper, per channel."""
        return ((self.background - np.asarray(self.mean)) / np.asarray(self.std)).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "background": self.background}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["mean"]), tuple(d["std"]), d.get("background", 255.0))


def downscale_half(raw: np.ndarray) -> np.ndarray:
    """Bilinear downscaling by 2 with half-pixel centres.

    At exactly half resolution every output pixel sits midway between two
    input rows and two input columns, so the bilinear weights are all 1/4:
    the result is the mean of each 2x2 block (an odd last row/column is
    dropped).
    """
    img = raw.astype(np.float32)
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    img = img[: 2 * h2, : 2 * w2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def to_rgb_planes(img: np.ndarray) -> np.ndarray:
    """(H, W) or (H, W, 3) -> (3, H, W); gray values are repeated on all channels."""
    if img.ndim == 2:
        return np.repeat(img[None], 3, axis=0)
    if img.ndim == 3 and img.shape[2] == 3:
        return np.ascontiguousarray(img.transpose(2, 0, 1))
    raise ValueError(f"expected a gray or RGB image, got shape {img.shape}")


def padded_extent(size: int, multiple: int) -> int:
    return max(multiple, -(-size // multiple) * multiple)


def pad_to_multiple(x: np.ndarray, fill, hm: int = HEIGHT_MULTIPLE, wm: int = WIDTH_MULTIPLE) -> np.ndarray:
    """Pad (c, H, W) at the bottom and right up to multiples of (hm, wm)."""
    c, h, w = x.shape
    H, W = padded_extent(h, hm), padded_extent(w, wm)
    if (H, W) == (h, w):
        return x
    fill = np.broadcast_to(np.asarray(fill, dtype=x.dtype).reshape(-1, 1, 1), (c, 1, 1))
    out = np.empty((c, H, W), dtype=x.dtype)
    out[...] = fill
    out[:, :h, :w] = x
    return out


def scaled_rgb(raw: np.ndarray) -> np.ndarray:
    """Downscale by 2 and expand to three planes, values still on the 0..255 scale."""
    if raw.shape[0] < MIN_RAW_HEIGHT or raw.shape[1] < MIN_RAW_WIDTH:
        raise ValueError(
            f"image {raw.shape[0]}x{raw.shape[1]} is smaller than the minimum "
            f"{MIN_RAW_HEIGHT}x{MIN_RAW_WIDTH}")
    return to_rgb_planes(downscale_half(raw))


def preprocess(raw: np.ndarray, stats: NormStats | None = None) -> np.ndarray:
    """Raw 8-bit gray/RGB image -> normalized float32 (3, H', W').

    Downscale by 2 (bilinear), repeat gray values over 3 channels, pad with
    the background value to multiples of (32, 8), standardize per channel
    with dataset-level statistics.
    """
    stats = stats or NormStats()
    rgb = scaled_rgb(raw)
    rgb = pad_to_multiple(rgb, stats.background)
    return stats.normalize(rgb)


def compute_stats(raw_images: Iterable[np.ndarray], background: float = 255.0) -> NormStats:
    """Per-channel mean/std over every pixel of the downscaled images."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for raw in raw_images:
        rgb = scaled_rgb(raw).astype(np.float64)
        total += rgb.sum(axis=(1, 2))
        total_sq += (rgb * rgb).sum(axis=(1, 2))
        count += rgb.shape[1] * rgb.shape[2]
    if count == 0:
        return NormStats(background=background)
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 0.0))
    std = np.where(std < 1e-6, 1.0, std)
    return NormStats(tuple(float(v) for v in mean), tuple(float(v) for v in std), background)


# ---------------------------------------------------------------------------
# samples and batches
# ---------------------------------------------------------------------------

@dataclass
class ParagraphSample:
    image: np.ndarray  # (3, H, W) normalized float32
    transcription: str
    source_id: str = ""

    def __post_init__(self):
        if any(ch in self.transcription for ch in "\r\n"):
            self.transcription = strip_line_breaks(self.transcription)


@dataclass
class Batch:
    images: np.ndarray
    labels: list[list[int]]
    valid_lengths: list[int]
    texts: list[str]
    source_ids: list[str]


def make_batch(samples: Sequence[ParagraphSample], charset: Charset, fill=None,
               max_batch: int | None = None) -> Batch:
    """Pad images to the batch-wide maximum extents and encode labels.

    Every sample's valid lattice length is the full flattened length of the
    padded batch grid; padding regions are expected to be predicted blank.
    """
    if not samples:
        raise ValueError("cannot build an empty batch")
    if max_batch is not None and len(samples) > max_batch:
        raise ValueError(f"{len(samples)} samples exceed the batch size {max_batch}")
    c = samples[0].image.shape[0]
    H = max(s.image.shape[1] for s in samples)
    W = max(s.image.shape[2] for s in samples)
    if fill is None:
        fill = np.zeros(c, dtype=np.float32)
    fill = np.asarray(fill, dtype=np.float32).reshape(-1, 1, 1)
    images = np.empty((len(samples), c, H, W), dtype=np.float32)
    images[...] = fill[None]
    for i, s in enumerate(samples):
        _, h, w = s.image.shape
        images[i, :, :h, :w] = s.image
    length = (H // HEIGHT_MULTIPLE) * (W // WIDTH_MULTIPLE)
    return Batch(images, [charset.encode(s.transcription) for s in samples],
                 [length] * len(samples), [s.transcription for s in samples],
                 [s.source_id for s in samples])


class Dataset:
    """Preprocessed samples of one manifest, held in memory."""

    def __init__(self, samples: list[ParagraphSample], stats: NormStats, charset: Charset):
        self.samples = samples
        self.stats = stats
        self.charset = charset

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> ParagraphSample:
        return self.samples[i]

    @classmethod
    def from_manifest(cls, path, charset: Charset | None = None, stats: NormStats | None = None,
                      background: float = 255.0) -> "Dataset":
        """Load a manifest; infers charset and statistics when not given."""
        raw_records = load_manifest(path, charset)
        if charset is None:
            charset = Charset.from_texts(t for _, t in raw_records)
        raws = [load_image(p) for p, _ in raw_records]
        if stats is None:
            stats = compute_stats(raws, background)
        samples = [ParagraphSample(preprocess(raw, stats), text, str(p.name))
                   for raw, (p, text) in zip(raws, raw_records)]
        return cls(samples, stats, charset)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

TECHNIQUES = ("resolution", "perspective", "elastic", "projective",
              "dilation_erosion", "brightness", "contrast", "sign_flip")
EXCLUSIVE = ("perspective", "elastic", "projective")


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.2
    resolution_range: tuple[float, float] = (0.75, 1.25)
    perspective_ratio: float = 0.05
    elastic_alpha: tuple[float, float] = (0.0, 8.0)
    elastic_sigma: tuple[float, float] = (4.0, 10.0)
    projective_rotation_deg: float = 3.0
    projective_shear: float = 0.15
    projective_perspective: float = 2e-4
    morphology_size: int = 3
    brightness_range: tuple[float, float] = (0.8, 1.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)


@dataclass
class AugmentationPlan:
    """Which techniques fire for one sample, and with which parameters."""

    active: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(TECHNIQUES, False))
    params: dict[str, object] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not any(self.active.values())


def draw_plan(rng: np.random.Generator, config: AugmentConfig | None = None) -> AugmentationPlan:
    """Draw flags with the configured probability each.

    The three geometric warps share one uniform draw split into disjoint
    intervals, so each keeps its marginal probability and no two can fire
    together.
    """
    config = config or AugmentConfig()
    p = config.probability
    if not 0 <= 3 * p <= 1:
        raise ValueError("exclusive group needs 3 * probability <= 1")
    u = rng.random(6)
    plan = AugmentationPlan()
    plan.active["resolution"] = u[0] < p
    slot = int(u[1] // p) if p > 0 else 3
    for i, name in enumerate(EXCLUSIVE):
        plan.active[name] = slot == i
    plan.active["dilation_erosion"] = u[2] < p
    plan.active["brightness"] = u[3] < p
    plan.active["contrast"] = u[4] < p
    plan.active["sign_flip"] = u[5] < p

    if plan.active["resolution"]:
        plan.params["resolution"] = float(rng.uniform(*config.resolution_range))
    if plan.active["perspective"]:
        plan.params["perspective"] = rng.uniform(-1, 1, size=(4, 2)) * config.perspective_ratio
    if plan.active["elastic"]:
        plan.params["elastic"] = (float(rng.uniform(*config.elastic_alpha)),
                                  float(rng.uniform(*config.elastic_sigma)),
                                  int(rng.integers(2**31)))
    if plan.active["projective"]:
        plan.params["projective"] = (
            float(rng.uniform(-1, 1) * config.projective_rotation_deg),
            float(rng.uniform(-1, 1) * config.projective_shear),
            rng.uniform(-1, 1, size=2) * config.projective_perspective)
    if plan.active["dilation_erosion"]:
        plan.params["dilation_erosion"] = "dilate" if rng.random() < 0.5 else "erode"
    if plan.active["brightness"]:
        plan.params["brightness"] = float(rng.uniform(*config.brightness_range))
    if plan.active["contrast"]:
        plan.params["contrast"] = float(rng.uniform(*config.contrast_range))
    return plan


def _warp_homography(x: np.ndarray, H: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Apply homography ``H`` (output pixel -> input pixel, (col,row,1) coords)."""
    c, h, w = x.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([cols.ravel(), rows.ravel(), np.ones(h * w)])
    src = H @ pts
    src_c = (src[0] / src[2]).reshape(h, w)
    src_r = (src[1] / src[2]).reshape(h, w)
    out = np.empty_like(x)
    for k in range(c):
        out[k] = ndimage.map_coordinates(x[k], [src_r, src_c], order=1, mode="constant",
                                         cval=float(fill[k]))
    return out


def _corner_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Homography mapping 4 ``dst`` points onto 4 ``src`` points (DLT)."""
    A, b = [], []
    for (x, y), (u, v) in zip(dst, src):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.asarray(A, float), np.asarray(b, float))
    return np.append(h, 1.0).reshape(3, 3)


def _perspective(x, jitter, fill):
    _, h, w = x.shape
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=float)
    moved = corners + jitter * np.array([w, h])
    return _warp_homography(x, _corner_homography(corners, moved), fill)


def _projective(x, params, fill):
    rot_deg, shear, persp = params
    _, h, w = x.shape
    cx, cy = (w - 1) / 2, (h - 1) / 2
    a = math.radians(rot_deg)
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    rot = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    sh = np.array([[1, shear, 0], [0, 1, 0], [0, 0, 1.0]])
    pp = np.array([[1, 0, 0], [0, 1, 0], [persp[0], persp[1], 1.0]])
    forward = back @ pp @ sh @ rot @ to_center
    return _warp_homography(x, np.linalg.inv(forward), fill)


def _elastic(x, params, fill):
    alpha, sigma, seed = params
    c, h, w = x.shape
    rng = np.random.default_rng(seed)
    fields_ = []
    for _ in range(2):
        d = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), sigma, mode="constant")
        peak = np.abs(d).max()
        fields_.append(d / peak * alpha if peak > 0 else d)
    dy, dx = fields_
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty_like(x)
    for k in range(c):
        out[k] = ndimage.map_coordinates(x[k], [rows + dy, cols + dx], order=1,
                                         mode="constant", cval=float(fill[k]))
    return out


def _resize(x, factor, fill):
    c, h, w = x.shape
    nh = max(HEIGHT_MULTIPLE, int(round(h * factor)))
    nw = max(WIDTH_MULTIPLE, int(round(w * factor)))
    out = np.stack([ndimage.zoom(x[k], (nh / h, nw / w), order=1, mode="nearest",
                                 grid_mode=True) for k in range(c)])
    return out.astype(x.dtype)


def apply_plan(image: np.ndarray, plan: AugmentationPlan, stats: NormStats,
               config: AugmentConfig | None = None) -> np.ndarray:
    """Run the active techniques, in the fixed order, on a normalized image."""
    if plan.empty:
        return image
    config = config or AugmentConfig()
    fill = stats.fill_values()
    x = image.astype(np.float32, copy=True)
    a, prm = plan.active, plan.params
    if a["resolution"]:
        x = _resize(x, prm["resolution"], fill)
    if a["perspective"]:
        x = _perspective(x, prm["perspective"], fill)
    if a["elastic"]:
        x = _elastic(x, prm["elastic"], fill)
    if a["projective"]:
        x = _projective(x, prm["projective"], fill)
    if a["dilation_erosion"]:
        size = config.morphology_size
        # ink is dark: growing strokes means taking local minima
        op = ndimage.grey_erosion if prm["dilation_erosion"] == "dilate" else ndimage.grey_dilation
        x = np.stack([op(x[k], size=(size, size), mode="nearest") for k in range(x.shape[0])])
    if a["brightness"] or a["contrast"]:
        raw = stats.denormalize(x)
        if a["brightness"]:
            raw = raw * prm["brightness"]
        if a["contrast"]:
            m = raw.mean(axis=(1, 2), keepdims=True)
            raw = (raw - m) * prm["contrast"] + m
        x = stats.normalize(np.clip(raw, 0, 255))
    if a["sign_flip"]:
        x = -x
    x = pad_to_multiple(x.astype(np.float32), fill if not a["sign_flip"] else -fill)
    return x


def augment(sample: ParagraphSample, rng: np.random.Generator, stats: NormStats | None = None,
            config: AugmentConfig | None = None) -> ParagraphSample:
    """Training-time augmentation; the transcription is never touched."""
    stats = stats or NormStats()
    plan = draw_plan(rng, config)
    if plan.empty:
        return sample
    return ParagraphSample(apply_plan(sample.image, plan, stats, config),
                           sample.transcription, sample.source_id)


# ---------------------------------------------------------------------------
# synthetic paragraphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Layout of generated paragraphs. All lengths are raw pixels.

    Keys of the JSON configuration file are the field names.
    """

    glyphs: str = "abcdefghi "
    line_count: tuple[int, int] = (2, 4)
    chars_per_line: tuple[int, int] = (5, 8)
    glyph_scale: int = 4
    char_spacing: int = 4
    line_spacing: tuple[int, int] = (100, 100)
    skew_deg: tuple[float, float] = (0.0, 0.0)
    noise: float = 8.0
    background: int = 255
    ink: int = 0
    margin: tuple[int, int] = (12, 12)
    fixed_width_chars: int | None = 8

    def __post_init__(self):
        for name in ("line_count", "chars_per_line", "line_spacing", "skew_deg", "margin"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if min(self.line_spacing) < 1:
            raise ValueError("line spacing must be at least 1 px")
        if min(self.skew_deg) < 0:
            raise ValueError("skew must be >= 0 (downward only)")
        if self.line_count[0] < 1 or self.line_count[0] > self.line_count[1]:
            raise ValueError(f"bad line_count range {self.line_count}")
        if self.chars_per_line[0] < 1 or self.chars_per_line[0] > self.chars_per_line[1]:
            raise ValueError(f"bad chars_per_line range {self.chars_per_line}")
        missing = font.unsupported(self.glyphs)
        if missing:
            raise ValueError(f"unsupported glyph(s) for the embedded font: "
                             f"{', '.join(repr(m) for m in missing)}")
        if not self.glyphs.strip():
            raise ValueError("glyph set needs at least one visible character")

    @property
    def glyph_size(self) -> tuple[int, int]:
        return font.GLYPH_HEIGHT * self.glyph_scale, font.GLYPH_WIDTH * self.glyph_scale

    @property
    def char_pitch(self) -> int:
        return self.glyph_size[1] + self.char_spacing

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")


def random_line(spec: SyntheticSpec, length: int, rng: np.random.Generator) -> str:
    """Random text without leading, trailing or doubled spaces."""
    visible = [g for g in spec.glyphs if g != " "]
    has_space = " " in spec.glyphs
    out = []
    for i in range(length):
        edge = i == 0 or i == length - 1
        if has_space and not edge and out[-1] != " ":
            out.append(spec.glyphs[int(rng.integers(len(spec.glyphs)))])
        else:
            out.append(visible[int(rng.integers(len(visible)))])
    return "".join(out)


@dataclass
class RenderedParagraph:
    image: np.ndarray  # uint8 (H, W)
    lines: list[str]
    line_tops: list[int]  # raw row of each line's top at its left end

    @property
    def transcription(self) -> str:
        return " ".join(self.lines)


def render_paragraph(lines: Sequence[str], spec: SyntheticSpec, rng: np.random.Generator,
                     skews: Sequence[float] | None = None,
                     gaps: Sequence[int] | None = None) -> RenderedParagraph:
    """Draw ``lines`` top to bottom with the embedded font."""
    missing = font.unsupported("".join(lines))
    if missing:
        raise ValueError(f"unsupported glyph(s) for the embedded font: {missing}")
    gh, gw = spec.glyph_size
    pitch = spec.char_pitch
    top, left = spec.margin
    if skews is None:
        skews = [float(rng.uniform(*spec.skew_deg)) for _ in lines]
    if gaps is None:
        gaps = [int(rng.integers(spec.line_spacing[0], spec.line_spacing[1] + 1))
                for _ in lines[1:]]
    n_chars = max(len(line) for line in lines)
    if spec.fixed_width_chars:
        n_chars = max(n_chars, spec.fixed_width_chars)
    text_width = n_chars * pitch - spec.char_spacing
    drops = [int(math.ceil((text_width - gw) * math.tan(math.radians(s)))) for s in skews]
    tops = []
    y = top
    for i in range(len(lines)):
        tops.append(y)
        if i < len(lines) - 1:
            y += gh + drops[i] + gaps[i]
    height = y + gh + drops[-1] + top
    width = left + text_width + left
    canvas = np.zeros((height, width), dtype=bool)
    for line, y0, skew in zip(lines, tops, skews):
        slope = math.tan(math.radians(skew))
        for j, ch in enumerate(line):
            x0 = left + j * pitch
            dy = int(round((x0 - left) * slope))
            canvas[y0 + dy : y0 + dy + gh, x0 : x0 + gw] |= font.glyph(ch, spec.glyph_scale)
    img = np.where(canvas, float(spec.ink), float(spec.background))
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return RenderedParagraph(img, list(lines), tops)


def synthesize(spec: SyntheticSpec, rng: np.random.Generator) -> RenderedParagraph:
    n_lines = int(rng.integers(spec.line_count[0], spec.line_count[1] + 1))
    lines = [random_line(spec, int(rng.integers(spec.chars_per_line[0], spec.chars_per_line[1] + 1)), rng)
             for _ in range(n_lines)]
    return render_paragraph(lines, spec, rng)


def line_crops(para: RenderedParagraph, spec: SyntheticSpec,
               rng: np.random.Generator) -> list[tuple[np.ndarray, str]]:
    """Cut a rendered paragraph into single-line images.

    Each crop is one line pitch tall (glyph height plus the smallest line
    gap) and starts ``margin`` rows above its line, so a line sits at the
    same offset and on the same lattice-row boundaries as inside the
    paragraph. Rows past the bottom edge are filled with noisy background.
    """
    band = spec.glyph_size[0] + spec.line_spacing[0]
    top_margin = spec.margin[0]
    out = []
    for text, y in zip(para.lines, para.line_tops):
        y0 = y - top_margin
        crop = para.image[y0 : y0 + band]
        if crop.shape[0] < band:
            extra = np.full((band - crop.shape[0], crop.shape[1]), float(spec.background))
            if spec.noise > 0:
                extra = extra + rng.normal(0.0, spec.noise, size=extra.shape)
            crop = np.concatenate([crop, np.clip(np.rint(extra), 0, 255).astype(np.uint8)])
        out.append((np.ascontiguousarray(crop), text))
    return out


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def generate_synthetic(spec: SyntheticSpec, count: int, out_dir, seed: int = 0,
                       prefix: str = "img", lines: bool = False) -> Path:
    """Write ``count`` paragraph images, a manifest and a copy of ``spec``.

    With ``lines=True`` the paragraphs are cut by :func:`line_crops` and
    ``count`` single-line images are written instead, for line-level
    pretraining. Returns the manifest path. Output is a pure function of
    (spec, count, seed, lines).
    """
    if lines:
        return _generate_lines(spec, count, out_dir, seed, prefix)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    width = max(5, len(str(count)))
    for i in range(count):
        para = synthesize(spec, sample_rng(seed, i))
        name = f"{prefix}_{i:0{width}d}.png"
        save_png(out / name, para.image)
        records.append((name, para.transcription))
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, records)
    spec.save(out / SPEC_NAME)
    return manifest


def _generate_lines(spec: SyntheticSpec, count: int, out_dir, seed: int, prefix: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    width = max(5, len(str(count)))
    i = 0
    while len(records) < count:
        rng = sample_rng(seed, i)
        for image, text in line_crops(synthesize(spec, rng), spec, rng):
            if len(records) == count:
                break
            name = f"{prefix}_{len(records):0{width}d}.png"
            save_png(out / name, image)
            records.append((name, text))
        i += 1
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, records)
    spec.save(out / SPEC_NAME)
    return manifest
