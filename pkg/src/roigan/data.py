"""Phantom corpus, masking primitives and dataset I/O.

Images are single-channel float32 matrices normalized to [-1, 1]. Masks are
{0, 1} uint8 matrices of the same shape. The phantom generator renders one
shared anatomy per sample id in every modality, so exact cross-modality
ground truth is available for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# Normalized intensity of empty space; foreground threshold sits just above it.
BACKGROUND = -1.0
FOREGROUND_EPS = 0.02

# Base-space intensity every target organ is painted with, before the
# per-modality transfer map is applied. Transfer maps are anchored here.
ORGAN_ANCHOR = 0.6


class InvalidRangeError(ValueError):
    """Raised when an intensity range is degenerate (hi <= lo)."""


class ShapeMismatchError(ValueError):
    """Raised when an image and mask (or two images) disagree in shape."""


class DatasetError(RuntimeError):
    """Raised for malformed manifests, corrupt files or invariant violations."""


@dataclass(frozen=True)
class Modality:
    id: int
    name: str


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (H, W) float32 in [-1, 1]
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    modality: int
    sample_id: str
    split: str = "train"


# ---------------------------------------------------------------------------
# intensity primitives


def normalize_intensity(raw: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine-map raw values from [lo, hi] to [-1, 1], clamping outliers."""
    if hi <= lo:
        raise InvalidRangeError(f"invalid intensity range: lo={lo} hi={hi}")
    arr = np.asarray(raw, dtype=np.float64)
    out = (arr - lo) / (hi - lo) * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def denormalize_intensity(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Inverse of :func:`normalize_intensity` on [-1, 1]."""
    if hi <= lo:
        raise InvalidRangeError(f"invalid intensity range: lo={lo} hi={hi}")
    arr = np.asarray(img, dtype=np.float64)
    return ((arr + 1.0) / 2.0 * (hi - lo) + lo).astype(np.float64)


def extract_target_area(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep image values under the mask, set everything else to background.

    The masking happens in [0, 1] intensity space so that masked-out pixels
    land exactly on the background level (-1) rather than on mid-gray.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ShapeMismatchError(
            f"image shape {image.shape} != mask shape {mask.shape}"
        )
    return np.where(mask > 0, image, BACKGROUND).astype(np.float32)


def foreground_binarize(image: np.ndarray, eps: float = FOREGROUND_EPS) -> np.ndarray:
    """Binary foreground stencil: 1 where the pixel sits above background."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return (np.asarray(image) > BACKGROUND + eps).astype(np.uint8)


# ---------------------------------------------------------------------------
# phantom specification


@dataclass(frozen=True)
class TransferMap:
    """Monotone piecewise-linear bijection of [0, 1] base intensities.

    Knots must be strictly increasing on both axes and pinned at (0, 0) and
    (1, 1) so that background stays background and the map stays invertible.
    """

    x_knots: tuple[float, ...]
    y_knots: tuple[float, ...]

    def __post_init__(self):
        x = np.asarray(self.x_knots, dtype=np.float64)
        y = np.asarray(self.y_knots, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1 or x.size < 2:
            raise ValueError("knot arrays must be 1-D and of equal length >= 2")
        if not (np.all(np.diff(x) > 0) and np.all(np.diff(y) > 0)):
            raise ValueError("transfer map knots must be strictly increasing")
        if x[0] != 0.0 or x[-1] != 1.0 or y[0] != 0.0 or y[-1] != 1.0:
            raise ValueError("transfer map must fix the endpoints (0,0) and (1,1)")

    def forward(self, v: np.ndarray) -> np.ndarray:
        return np.interp(v, self.x_knots, self.y_knots)

    def inverse(self, v: np.ndarray) -> np.ndarray:
        return np.interp(v, self.y_knots, self.x_knots)


def default_transfer_maps(n_modalities: int) -> tuple[TransferMap, ...]:
    """Built-in contrast profiles: one easy, one medium, one low-contrast.

    All maps carry a knot at ORGAN_ANCHOR so the target organ gets a
    controlled per-modality rendering. The third profile is deliberately flat
    around the anchor: its target organ barely separates from bright body
    tissue, which makes single-modality segmentation genuinely ambiguous
    there (the property the image-enrichment experiment needs). Additional
    modalities cycle through the base profiles with a small deterministic
    shift.
    """
    base = [
        ((0.0, 0.3, ORGAN_ANCHOR, 0.82, 1.0), (0.0, 0.33, 0.80, 0.90, 1.0)),
        ((0.0, 0.3, ORGAN_ANCHOR, 0.82, 1.0), (0.0, 0.22, 0.45, 0.78, 1.0)),
        ((0.0, 0.4, ORGAN_ANCHOR, 0.82, 1.0), (0.0, 0.37, 0.44, 0.80, 1.0)),
    ]
    maps = []
    for m in range(n_modalities):
        x, y = base[m % len(base)]
        if m >= len(base):
            # deterministic variation for extra modalities
            shift = 0.04 * (m // len(base))
            y = (y[0], min(y[1] + shift, y[2] - 0.05), y[2],
                 min(y[3] + shift, 0.95), y[4])
        maps.append(TransferMap(x, y))
    return tuple(maps)


@dataclass(frozen=True)
class PhantomSpec:
    resolution: int = 64
    n_modalities: int = 3
    n_anatomies: int = 60
    organ_count_range: tuple[int, int] = (2, 5)
    target_organ_intensity: tuple[float, ...] = ()
    modality_transfer: tuple[TransferMap, ...] = ()
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.n_modalities < 2:
            raise ValueError("need at least 2 modalities")
        if self.resolution < 8:
            raise ValueError("resolution too small")
        if not (0.0 <= self.noise_sigma < 0.1):
            raise ValueError("noise_sigma must lie in [0, 0.1)")
        lo, hi = self.organ_count_range
        if not (1 <= lo <= hi):
            raise ValueError("organ_count_range must be a nonempty interval >= 1")
        if not self.modality_transfer:
            object.__setattr__(
                self, "modality_transfer", default_transfer_maps(self.n_modalities)
            )
        if len(self.modality_transfer) != self.n_modalities:
            raise ValueError("need one transfer map per modality")
        if not self.target_organ_intensity:
            anchors = tuple(
                float(t.forward(ORGAN_ANCHOR)) for t in self.modality_transfer
            )
            object.__setattr__(self, "target_organ_intensity", anchors)

    @property
    def modalities(self) -> list[Modality]:
        return [Modality(i, f"M{i}") for i in range(self.n_modalities)]


# ---------------------------------------------------------------------------
# phantom rendering


def _ellipse_stencil(res, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _correlated_field(res: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-std spatially correlated noise (white Gaussian, box-blurred twice).

    Correlated texture matters: its rendered amplitude scales with the local
    slope of each modality's transfer map, so tissue texture that is crisp in
    a high-contrast modality washes out in a low-contrast one.
    """
    field = rng.normal(0.0, 1.0, (res, res))
    for _ in range(2):
        padded = np.pad(field, 1, mode="edge")
        field = sum(
            padded[1 + dy : res + 1 + dy, 1 + dx : res + 1 + dx]
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
        ) / 9.0
    return field / field.std()


def _render_anatomy(spec: PhantomSpec, rng: np.random.Generator):
    """Draw one shared anatomy: base-intensity field plus target/body stencils.

    The target organ is painted last with the anchor intensity; distractor
    organs stay below 0.5 so the target is the brightest structure in every
    modality (monotone maps preserve the ordering).
    """
    res = spec.resolution
    cy, cx = res / 2 + rng.uniform(-res / 16, res / 16, size=2)
    ry, rx = rng.uniform(0.30 * res, 0.42 * res, size=2)
    theta = rng.uniform(0, np.pi)
    body = _ellipse_stencil(res, cy, cx, ry, rx, theta)

    def organ_center():
        oy, ox = rng.uniform(-0.55, 0.55, size=2)
        dy, dx = oy * ry, ox * rx
        return (
            cy + dx * np.sin(theta) + dy * np.cos(theta),
            cx + dx * np.cos(theta) - dy * np.sin(theta),
        )

    min_area = max(16, int(0.002 * res * res))
    while True:
        ty, tx = organ_center()
        t_ry, t_rx = rng.uniform(0.10 * res, 0.18 * res, size=2)
        target = _ellipse_stencil(res, ty, tx, t_ry, t_rx, rng.uniform(0, np.pi))
        target &= body
        if target.sum() >= min_area:
            break

    base = np.zeros((res, res), dtype=np.float64)
    base[body] = rng.uniform(0.25, 0.45)

    n_organs = int(rng.integers(spec.organ_count_range[0], spec.organ_count_range[1] + 1))
    for _ in range(max(0, n_organs - 1)):
        oy, ox = organ_center()
        o_ry, o_rx = rng.uniform(0.05 * res, 0.13 * res, size=2)
        organ = _ellipse_stencil(res, oy, ox, o_ry, o_rx, rng.uniform(0, np.pi))
        # distractors stay below the anchor: the target remains the brightest
        # structure, but in the low-contrast modality the margin is thin
        base[organ & body] = rng.uniform(0.15, 0.55)

    base[target] = ORGAN_ANCHOR
    if spec.noise_sigma > 0:
        texture = _correlated_field(res, rng)
        base[body] += spec.noise_sigma * texture[body]
    base[body] = np.clip(base[body], 0.05, 1.0)
    return base, target.astype(np.uint8), body.astype(np.uint8)


# ---------------------------------------------------------------------------
# PNG codecs (16-bit images, 8-bit masks)


def encode_image_png(img: np.ndarray, path: Path) -> None:
    """Store a [-1, 1] image as 16-bit grayscale PNG: v -> (v+1)/2 * 65535."""
    arr = np.asarray(img, dtype=np.float64)
    q = np.clip(np.round((arr + 1.0) / 2.0 * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)  # uint16 -> 16-bit grayscale PNG


def decode_image_png(path: Path) -> np.ndarray:
    q = np.asarray(Image.open(path), dtype=np.float64)
    return (q / 65535.0 * 2.0 - 1.0).astype(np.float32)


def encode_mask_png(mask: np.ndarray, path: Path) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def decode_mask_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    return (arr > 127).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset generation and loading


def generate_phantom_dataset(spec: PhantomSpec, root: Path, seed: int) -> Path:
    """Write a phantom dataset under `root` and return the manifest path.

    Every anatomy is rendered once per modality through that modality's
    transfer map, so samples sharing an id are exact cross-modality pairs.
    Deterministic given (spec, seed). Splits are disjoint by anatomy, half
    train / half test.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    names = [m.name for m in spec.modalities]
    for name in names:
        (root / "images" / name).mkdir(parents=True, exist_ok=True)
        (root / "masks" / name).mkdir(parents=True, exist_ok=True)

    order = rng.permutation(spec.n_anatomies)
    train_ids = set(order[: spec.n_anatomies // 2].tolist())

    records = []
    for idx in range(spec.n_anatomies):
        base, target_mask, _body = _render_anatomy(spec, rng)
        sample_id = f"a{idx:04d}"
        split = "train" if idx in train_ids else "test"
        for m, tmap in zip(spec.modalities, spec.modality_transfer):
            img = (tmap.forward(base) * 2.0 - 1.0).astype(np.float32)
            image_rel = f"images/{m.name}/{sample_id}.png"
            mask_rel = f"masks/{m.name}/{sample_id}.png"
            encode_image_png(img, root / image_rel)
            encode_mask_png(target_mask, root / mask_rel)
            records.append(
                {
                    "id": sample_id,
                    "modality": m.name,
                    "image": image_rel,
                    "mask": mask_rel,
                    "split": split,
                }
            )

    manifest = {"modalities": names, "samples": records}
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


@dataclass
class PhantomDataset:
    root: Path
    modalities: list[Modality]
    samples: list[Sample]
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for s in self.samples:
            self._index[(s.sample_id, s.modality)] = s

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def train_samples(self) -> list[Sample]:
        return [s for s in self.samples if s.split == "train"]

    @property
    def test_samples(self) -> list[Sample]:
        return [s for s in self.samples if s.split == "test"]

    def of_modality(self, modality: int, split: str | None = None) -> list[Sample]:
        out = [s for s in self.samples if s.modality == modality]
        if split is not None:
            out = [s for s in out if s.split == split]
        return out

    def get(self, sample_id: str, modality: int) -> Sample:
        key = (sample_id, modality)
        if key not in self._index:
            raise KeyError(f"no sample {sample_id!r} for modality {modality}")
        return self._index[key]

    @property
    def resolution(self) -> int:
        return self.samples[0].image.shape[0]


def load_dataset(manifest_path: Path) -> PhantomDataset:
    """Load and validate a dataset previously written by the generator."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text())
        names = list(manifest["modalities"])
        records = list(manifest["samples"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc

    root = manifest_path.parent
    modalities = [Modality(i, n) for i, n in enumerate(names)]
    mod_ids = {n: i for i, n in enumerate(names)}

    samples = []
    for rec in records:
        image_path = root / rec["image"]
        mask_path = root / rec["mask"]
        for p in (image_path, mask_path):
            if not p.exists():
                raise FileNotFoundError(str(p))
        try:
            image = decode_image_png(image_path)
            mask = decode_mask_png(mask_path)
        except Exception as exc:
            raise DatasetError(f"corrupt sample file under {root}: {exc}") from exc
        if image.shape != mask.shape:
            raise ShapeMismatchError(
                f"{rec['id']}: image {image.shape} vs mask {mask.shape}"
            )
        split = rec["split"]
        if split not in ("train", "test"):
            raise DatasetError(f"{rec['id']}: unknown split {split!r}")
        if split == "train" and mask.sum() == 0:
            raise DatasetError(f"{rec['id']}: training sample has an empty mask")
        samples.append(
            Sample(
                image=image,
                mask=mask,
                modality=mod_ids[rec["modality"]],
                sample_id=rec["id"],
                split=split,
            )
        )
    if not samples:
        raise DatasetError(f"empty dataset: {manifest_path}")
    return PhantomDataset(root=root, modalities=modalities, samples=samples)


def sample_training_batch(
    dataset: PhantomDataset, batch_size: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray, int, int]]:
    """Draw (image, mask, source, target) tuples with uniform random targets.

    The target modality is drawn over all modalities, the identity direction
    included.
    """
    train = dataset.train_samples
    if not train:
        raise DatasetError("dataset has no training samples")
    n = dataset.n_modalities
    batch = []
    for _ in range(batch_size):
        s = train[int(rng.integers(len(train)))]
        t = int(rng.integers(n))
        batch.append((s.image, s.mask, s.modality, t))
    return batch
