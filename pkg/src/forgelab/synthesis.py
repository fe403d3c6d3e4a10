"""Training-data factory: self-blended fake synthesis, the training-time
augmentations, a procedural toy-face generator, and dataset file IO."""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image, ImageDraw
from scipy import ndimage


class DegenerateRecipeError(ValueError):
    """Raised when a blend recipe cannot produce a usable forgery."""


@dataclass
class ImageSample:
    """One image with its authenticity label and mask bookkeeping.

    ``outer_face_mask`` marks unmanipulated pixels with 1. Real samples carry
    an all-ones mask; fakes carry zeros exactly where blending happened.
    ``pair_id`` on a fake points back at its source real sample.
    """

    pixels: np.ndarray                 # (H, W, 3) float32 in [0, 1]
    label: int                         # 0 real, 1 fake
    outer_face_mask: np.ndarray        # (H, W) uint8 in {0, 1}
    sample_id: str
    group_id: str | None = None
    pair_id: str | None = None
    landmarks: np.ndarray | None = None   # (K, 2) float (x, y) points

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.outer_face_mask = np.asarray(self.outer_face_mask, dtype=np.uint8)
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.pixels.shape[:2] != self.outer_face_mask.shape:
            raise ValueError("mask shape does not match image shape")


@dataclass
class BlendRecipe:
    """Deterministic description of one self-blending operation.

    ``source_transforms`` is an ordered list of (kind, magnitude) pairs drawn
    from: brightness, contrast, hue, saturation, shift, warp. The same recipe
    applied to the same source image reproduces the fake bit for bit.
    """

    seed: int
    mask_shape: str = "landmark-hull"          # landmark-hull | ellipse
    source_transforms: list[tuple[str, float]] = field(default_factory=list)
    blend_feather: float = 1.5

    TRANSFORM_KINDS = ("brightness", "contrast", "hue", "saturation", "shift", "warp")

    PHOTOMETRIC_KINDS = ("brightness", "contrast", "hue", "saturation")
    GEOMETRIC_KINDS = ("shift", "warp")
    MAGNITUDE_RANGES = {
        "brightness": (0.12, 0.28),
        "contrast": (0.20, 0.45),
        "hue": (0.05, 0.10),
        "saturation": (0.30, 0.60),
        "shift": (0.01, 0.03),
        "warp": (0.01, 0.03),
    }

    @classmethod
    def sample(cls, rng: np.random.Generator, has_landmarks: bool = True) -> "BlendRecipe":
        """Draw a random but bounded recipe; magnitudes keep fakes subtle.

        Always includes one or two photometric transforms (a purely geometric
        copy of a smooth region can blend back invisibly) plus at most one
        geometric one.
        """
        def draw(kind):
            lo, hi = cls.MAGNITUDE_RANGES[kind]
            magnitude = float(rng.uniform(lo, hi))
            if kind in cls.PHOTOMETRIC_KINDS and rng.random() < 0.5:
                magnitude = -magnitude
            return (kind, magnitude)

        photo = list(cls.PHOTOMETRIC_KINDS)
        picks = rng.choice(len(photo), size=int(rng.integers(1, 3)), replace=False)
        transforms = [draw(photo[int(i)]) for i in picks]
        if rng.random() < 0.4:
            transforms.append(draw(cls.GEOMETRIC_KINDS[int(rng.integers(0, 2))]))
        return cls(
            seed=int(rng.integers(0, 2 ** 31 - 1)),
            mask_shape="landmark-hull" if has_landmarks else "ellipse",
            source_transforms=transforms,
            blend_feather=float(rng.uniform(0.8, 2.0)),
        )


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns hull vertices in order."""
    pts = sorted({(float(x), float(y)) for x, y in points})
    if len(pts) < 3:
        raise ValueError("need at least 3 distinct landmark points")

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _fill_polygon(vertices: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    img = Image.new("L", (shape[1], shape[0]), 0)
    ImageDraw.Draw(img).polygon([(float(x), float(y)) for x, y in vertices], fill=1)
    return np.asarray(img, dtype=np.float64)

def _ellipse_mask(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    cy = h * (0.50 + rng.uniform(-0.04, 0.04))
    cx = w * (0.50 + rng.uniform(-0.04, 0.04))
    ry = h * rng.uniform(0.30, 0.40)
    rx = w * rng.uniform(0.24, 0.34)
    yy, xx = np.mgrid[0:h, 0:w]
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)


def build_blend_mask(sample: ImageSample, recipe: BlendRecipe) -> np.ndarray:
    """Feathered float blend mask in [0, 1] for a recipe applied to a sample."""
    rng = np.random.default_rng(recipe.seed)
    h, w = sample.pixels.shape[:2]
    if recipe.mask_shape == "landmark-hull":
        if sample.landmarks is None:
            raise ValueError("landmark-hull mask requested but sample has no landmarks")
        region = _fill_polygon(_convex_hull(sample.landmarks), (h, w))
    elif recipe.mask_shape == "ellipse":
        region = _ellipse_mask((h, w), rng)
    else:
        raise ValueError(f"unknown mask shape {recipe.mask_shape!r}")
    if recipe.blend_feather > 0:
        region = ndimage.gaussian_filter(region, sigma=recipe.blend_feather)
    return np.clip(region, 0.0, 1.0)


def _apply_brightness(img, m):
    return np.clip(img + m, 0.0, 1.0)


def _apply_contrast(img, m):
    mean = img.mean()
    return np.clip(mean + (img - mean) * (1.0 + m), 0.0, 1.0)


def _apply_hue(img, m):
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + m) % 1.0
    return hsv_to_rgb(hsv)


def _apply_saturation(img, m):
    hsv = rgb_to_hsv(img)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + m), 0.0, 1.0)
    return hsv_to_rgb(hsv)


def _apply_shift(img, m, rng):
    h, w = img.shape[:2]
    angle = rng.uniform(0, 2 * np.pi)
    dy, dx = m * h * np.sin(angle), m * w * np.cos(angle)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.shift(img[..., c], (dy, dx), order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def _apply_warp(img, m, rng):
    h, w = img.shape[:2]
    amp = m * min(h, w)
    dy = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=6.0)
    dx = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=6.0)
    for d in (dy, dx):
        peak = np.abs(d).max()
        if peak > 0:
            d *= amp / peak
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + dy, xx + dx])
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(img[..., c], coords, order=1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def _transform_source(img: np.ndarray, recipe: BlendRecipe, rng: np.random.Generator) -> np.ndarray:
    out = img.astype(np.float64)
    for kind, magnitude in recipe.source_transforms:
        if kind == "brightness":
            out = _apply_brightness(out, magnitude)
        elif kind == "contrast":
            out = _apply_contrast(out, magnitude)
        elif kind == "hue":
            out = _apply_hue(out, magnitude)
        elif kind == "saturation":
            out = _apply_saturation(out, magnitude)
        elif kind == "shift":
            out = _apply_shift(out, abs(magnitude), rng)
        elif kind == "warp":
            out = _apply_warp(out, abs(magnitude), rng)
        else:
            raise ValueError(f"unknown source transform {kind!r}")
    return out


def self_blend(real: ImageSample, recipe: BlendRecipe) -> ImageSample:
    """Blend a transformed copy of an image back into itself inside a face mask.

    The result is a fake paired with its source: label 1, an outer-face mask
    that is 0 exactly where blending happened (feather binarized at 0.5), and
    ``pair_id`` naming the source sample. Rejects degenerate recipes: blends
    covering under 1% or over 99% of the image, and identity transforms that
    leave every pixel unchanged.
    """
    if real.label != 0:
        raise ValueError("self_blend expects a real source sample")
    mask = build_blend_mask(real, recipe)
    inner = mask >= 0.5
    area = inner.mean()
    if area < 0.01 or area > 0.99:
        raise DegenerateRecipeError(f"blend mask covers {area:.1%} of the image")
    rng = np.random.default_rng(recipe.seed)
    source = _transform_source(real.pixels, recipe, rng)
    blended = real.pixels.astype(np.float64) * (1.0 - mask[..., None]) + source * mask[..., None]
    blended = np.clip(blended, 0.0, 1.0).astype(np.float32)
    if np.array_equal(blended, real.pixels):
        raise DegenerateRecipeError("identity blend: fake equals the source image")
    return ImageSample(
        pixels=blended,
        label=1,
        outer_face_mask=(~inner).astype(np.uint8),
        sample_id=f"{real.sample_id}:fake:{recipe.seed}",
        group_id=real.group_id,
        pair_id=real.sample_id,
        landmarks=None if real.landmarks is None else real.landmarks.copy(),
    )


def jpeg_roundtrip(pixels: np.ndarray, quality: int) -> np.ndarray:
    """Encode to JPEG at the given quality and decode back to float [0, 1]."""
    img = Image.fromarray(np.clip(pixels * 255.0 + 0.5, 0, 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf), dtype=np.float32) / 255.0


def augment(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Randomized training augmentation: horizontal flip, hue/saturation jitter,
    brightness/contrast jitter, JPEG compression, and blur.

    The mask follows geometric changes (flip); photometric changes leave it
    untouched.
    """
    pixels = sample.pixels.astype(np.float64)
    mask = sample.outer_face_mask.copy()
    landmarks = None if sample.landmarks is None else sample.landmarks.copy()
    if rng.random() < 0.5:
        pixels = pixels[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
        if landmarks is not None:
            landmarks[:, 0] = pixels.shape[1] - 1 - landmarks[:, 0]
    if rng.random() < 0.5:
        pixels = _apply_hue(pixels, rng.uniform(-0.05, 0.05))
        pixels = _apply_saturation(pixels, rng.uniform(-0.2, 0.25))
    if rng.random() < 0.5:
        pixels = _apply_brightness(pixels, rng.uniform(-0.1, 0.1))
        pixels = _apply_contrast(pixels, rng.uniform(-0.15, 0.2))
    if rng.random() < 0.3:
        pixels = jpeg_roundtrip(pixels.astype(np.float32), int(rng.integers(55, 96)))
    if rng.random() < 0.3:
        sigma = rng.uniform(0.3, 1.0)
        pixels = np.stack(
            [ndimage.gaussian_filter(pixels[..., c], sigma) for c in range(3)], axis=-1
        )
    return dataclasses.replace(
        sample,
        pixels=np.clip(pixels, 0.0, 1.0).astype(np.float32),
        outer_face_mask=mask,
        landmarks=landmarks,
    )


def toy_face_dataset(n: int, rng, image_size: int = 64) -> list[ImageSample]:
    """Procedural face-like real images so the pipeline runs with no data.

    Skin colors are drawn from a tight natural manifold (a narrow hue band
    with shared channel ratios) so that photometric blending pushes pixels
    visibly off that manifold, the same cue real forgeries leave behind.
    Backgrounds vary freely. Deterministic per seed; all samples are labeled
    real with all-ones masks and carry synthetic landmarks.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    samples = []
    for i in range(n):
        top = rng.uniform(0.05, 0.95, size=3)
        bottom = rng.uniform(0.05, 0.95, size=3)
        grad = (yy / (s - 1))[..., None]
        img = top * (1 - grad) + bottom * grad

        # faces fill most of the frame, the way cropped detector inputs do
        cy = s * (0.50 + rng.uniform(-0.04, 0.04))
        cx = s * (0.50 + rng.uniform(-0.04, 0.04))
        ry = s * rng.uniform(0.38, 0.46)
        rx = s * rng.uniform(0.30, 0.38)
        head = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

        # skin tone: narrow hue band around orange, moderate saturation
        hue = rng.uniform(0.05, 0.09)
        sat = rng.uniform(0.32, 0.46)
        val = rng.uniform(0.72, 0.92)
        skin = hsv_to_rgb(np.array([hue, sat, val])[None, None, :])[0, 0]
        # radial shading gives every face patch some internal structure
        r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        shade = 1.0 - 0.18 * np.clip(r2, 0.0, 1.0)
        img = np.where(head[..., None], skin[None, None, :] * shade[..., None], img)

        eye_dy, eye_dx = 0.13 * s, 0.15 * s
        eye_r = rng.uniform(0.03, 0.05) * s
        for side in (-1.0, 1.0):
            ey, ex = cy - eye_dy, cx + side * eye_dx
            eye = (yy - ey) ** 2 + (xx - ex) ** 2 <= eye_r ** 2
            img[eye] = rng.uniform(0.05, 0.2)

        my = cy + 0.20 * s
        mw, mh = rng.uniform(0.10, 0.16) * s, rng.uniform(0.025, 0.05) * s
        mouth = ((yy - my) / mh) ** 2 + ((xx - cx) / mw) ** 2 <= 1.0
        mouth_color = hsv_to_rgb(np.array([rng.uniform(0.97, 1.0) % 1.0,
                                           rng.uniform(0.5, 0.7),
                                           rng.uniform(0.5, 0.7)])[None, None, :])[0, 0]
        img[mouth] = mouth_color

        angles = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        outline = np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)
        features = np.array([
            [cx - eye_dx, cy - eye_dy],
            [cx + eye_dx, cy - eye_dy],
            [cx, my],
        ])
        landmarks = np.clip(np.vstack([outline, features]), 0, s - 1)

        samples.append(
            ImageSample(
                pixels=np.clip(img, 0.0, 1.0).astype(np.float32),
                label=0,
                outer_face_mask=np.ones((s, s), dtype=np.uint8),
                sample_id=f"toy{i:05d}",
                landmarks=landmarks,
            )
        )
    return samples


# --- dataset file IO ----------------------------------------------------------


def _save_png(path: Path, array: np.ndarray) -> None:
    if array.ndim == 2:
        data = (array * 255).astype(np.uint8)
    else:
        data = np.clip(array * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def _load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_real_dataset(root: str | Path) -> list[ImageSample]:
    """Read the on-disk real layout: <root>/real/<group_id>/<frame>.png with
    optional <frame>.landmarks.json point lists."""
    root = Path(root)
    real_dir = root / "real"
    if not real_dir.is_dir():
        raise FileNotFoundError(f"no 'real' directory under {root}")
    samples = []
    for group_dir in sorted(p for p in real_dir.iterdir() if p.is_dir()):
        for frame in sorted(group_dir.glob("*.png")):
            landmarks = None
            lm_path = frame.with_suffix(".landmarks.json")
            if lm_path.exists():
                landmarks = np.asarray(json.loads(lm_path.read_text()), dtype=np.float64)
            pixels = _load_png(frame)
            samples.append(
                ImageSample(
                    pixels=pixels,
                    label=0,
                    outer_face_mask=np.ones(pixels.shape[:2], dtype=np.uint8),
                    sample_id=f"{group_dir.name}/{frame.stem}",
                    group_id=group_dir.name,
                    landmarks=landmarks,
                )
            )
    if not samples:
        raise FileNotFoundError(f"no PNG frames found under {real_dir}")
    return samples


def write_manifest_dataset(samples, out_dir: str | Path) -> Path:
    """Write samples as PNGs plus a line-delimited manifest; returns its path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for sample in samples:
            stem = sample.sample_id.replace("/", "_").replace(":", "_")
            img_path = out_dir / "images" / f"{stem}.png"
            mask_path = out_dir / "masks" / f"{stem}.png"
            _save_png(img_path, sample.pixels)
            _save_png(mask_path, sample.outer_face_mask)
            fh.write(json.dumps({
                "path": str(img_path.relative_to(out_dir)),
                "label": sample.label,
                "pair_id": sample.pair_id,
                "mask_path": str(mask_path.relative_to(out_dir)),
                "group_id": sample.group_id,
                "sample_id": sample.sample_id,
            }) + "\n")
    return manifest


def load_manifest_dataset(manifest_path: str | Path) -> list[ImageSample]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        pixels = _load_png(base / rec["path"])
        mask = np.asarray(Image.open(base / rec["mask_path"]).convert("L"))
        samples.append(
            ImageSample(
                pixels=pixels,
                label=int(rec["label"]),
                outer_face_mask=(mask > 127).astype(np.uint8),
                sample_id=rec["sample_id"],
                group_id=rec.get("group_id"),
                pair_id=rec.get("pair_id"),
            )
        )
    return samples
