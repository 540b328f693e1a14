"""Synthetic shapes dataset and segmentation metrics.

Images are small RGB canvases with a textured background and one or two
colored shape instances (class 1 = disk, 2 = square, 3 = triangle, each with
its own color family).  Every image has at least one salient object; a
configurable fraction of images additionally carries an object whose
saliency is deliberately withheld, so the mining stage has something real to
recover.  Generation is fully determined by the seed.

Metrics treat the value 255 as ignore: such pixels are excluded from both
intersection and union (a strict mode that counts them as errors is
available), and classes absent from both prediction and ground truth drop
out of the mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SHAPE_FOR_CLASS = {1: "disk", 2: "square", 3: "triangle"}
BASE_COLORS = {1: (0.85, 0.25, 0.25), 2: (0.25, 0.8, 0.3), 3: (0.3, 0.4, 0.9)}


@dataclass
class ShapeInstance:
    class_id: int
    geometry: str
    color: tuple[float, float, float]
    center: tuple[float, float]
    radius: float
    salient: bool


@dataclass
class SceneSpec:
    canvas: int
    shapes: list[ShapeInstance]
    texture_seed: int


@dataclass
class Sample:
    image: np.ndarray      # [3, H, W] in [0, 1]
    labels: set[int]
    gt_mask: np.ndarray    # [H, W] ints in 0..C
    saliency: np.ndarray   # [H, W] in {0, 1}
    image_id: str = ""
    spec: SceneSpec | None = None

    @property
    def withheld_classes(self) -> set[int]:
        if self.spec is None:
            return set()
        return {s.class_id for s in self.spec.shapes if not s.salient}


def _shape_mask(geometry: str, center, radius: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    cy, cx = center
    if geometry == "disk":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
    if geometry == "square":
        return (np.abs(ys - cy) <= radius) & (np.abs(xs - cx) <= radius)
    if geometry == "triangle":
        # upward triangle inscribed in the radius box, via half-plane tests
        v = [(cy - radius, cx), (cy + radius, cx - radius), (cy + radius, cx + radius)]

        def side(p, q):
            return (q[1] - p[1]) * (ys - p[0]) - (q[0] - p[0]) * (xs - p[1])

        s1, s2, s3 = side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])
        return (s1 <= 0) & (s2 <= 0) & (s3 <= 0) | (s1 >= 0) & (s2 >= 0) & (s3 >= 0)
    raise ValueError(f"unknown geometry {geometry!r}")


def _place(rng: np.random.Generator, size: int, extent: float,
           taken: list[tuple[float, float, float]]) -> tuple[float, float] | None:
    """Find a center keeping ``extent`` inside the canvas and off other shapes."""
    for _ in range(40):
        cy = rng.uniform(extent + 1, size - extent - 1)
        cx = rng.uniform(extent + 1, size - extent - 1)
        if all((cy - ty) ** 2 + (cx - tx) ** 2 > (extent + te + 1) ** 2
               for ty, tx, te in taken):
            return cy, cx
    return None


def generate_dataset(n_images: int, C: int, seed: int,
                     nonsalient_fraction: float = 0.0,
                     image_size: int = 32,
                     extra_object_fraction: float = 0.35) -> list[Sample]:
    """Deterministically generate ``n_images`` samples with ``C`` shape classes.

    Classes rotate through the images, so with n_images >= a few dozen every
    class appears in a healthy share of them.  ``nonsalient_fraction`` of the
    images carry one extra object whose saliency is withheld;
    ``extra_object_fraction`` of the rest carry a second salient object.
    """
    if not 1 <= C <= 3:
        raise ValueError(f"supported class counts are 1..3, got {C}")
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    n_withheld = int(round(n_images * nonsalient_fraction))
    withheld_flags = np.zeros(n_images, dtype=bool)
    withheld_flags[:n_withheld] = True
    rng.shuffle(withheld_flags)

    samples = []
    for i in range(n_images):
        main_class = i % C + 1
        shapes: list[ShapeInstance] = []
        taken: list[tuple[float, float, float]] = []

        def add_shape(class_id: int, salient: bool, rmin=0.14, rmax=0.2) -> bool:
            pos = None
            for attempt in range(6):  # shrink until the shape fits
                radius = rng.uniform(rmin, rmax) * image_size * 0.88 ** attempt
                extent = radius * 1.45  # corner reach of squares/triangles
                pos = _place(rng, image_size, extent, taken)
                if pos is not None:
                    break
            if pos is None:
                return False
            jitter = rng.uniform(-0.08, 0.08, size=3)
            color = tuple(np.clip(np.asarray(BASE_COLORS[class_id]) + jitter, 0, 1))
            shapes.append(ShapeInstance(class_id, SHAPE_FOR_CLASS[class_id],
                                        color, pos, radius, salient))
            taken.append((pos[0], pos[1], extent))
            return True

        if withheld_flags[i] and C > 1:
            # Withheld objects go first and large, so the scene keeps a
            # substantial non-salient object for the mining stage to find.
            other = int(rng.choice([c for c in range(1, C + 1) if c != main_class]))
            for squeeze in (1.0, 0.92, 0.85, 0.78):
                add_shape(other, salient=False,
                          rmin=0.18 * squeeze, rmax=0.24 * squeeze)
                if add_shape(main_class, salient=True):
                    break
                shapes.clear()
                taken.clear()
            else:  # never ship an image without a salient shape
                shapes.clear()
                taken.clear()
                add_shape(main_class, salient=True)
        elif rng.random() < extra_object_fraction and C > 1:
            add_shape(main_class, salient=True)
            others = [c for c in range(1, C + 1) if c != main_class]
            add_shape(int(rng.choice(others)), salient=True)
        else:
            add_shape(main_class, salient=True)

        texture_seed = int(rng.integers(0, 2 ** 31))
        spec = SceneSpec(canvas=image_size, shapes=shapes, texture_seed=texture_seed)
        samples.append(_render(spec, image_id=f"img{i:04d}"))
    return samples


def _render(spec: SceneSpec, image_id: str) -> Sample:
    size = spec.canvas
    trng = np.random.default_rng(spec.texture_seed)
    base = trng.uniform(0.35, 0.65)
    image = np.full((3, size, size), base)
    image += trng.normal(0.0, 0.02, size=(3, size, size))

    gt = np.zeros((size, size), dtype=np.int64)
    saliency = np.zeros((size, size), dtype=np.int64)
    for inst in spec.shapes:
        mask = _shape_mask(inst.geometry, inst.center, inst.radius, size)
        gt[mask] = inst.class_id
        if inst.salient:
            saliency[mask] = 1
        for ch in range(3):
            image[ch][mask] = inst.color[ch]
    image = np.clip(image, 0.0, 1.0)
    labels = {int(c) for c in np.unique(gt) if c != 0}
    return Sample(image=image, labels=labels, gt_mask=gt, saliency=saliency,
                  image_id=image_id, spec=spec)


# -- directory layout ---------------------------------------------------------

def save_dataset(samples: list[Sample], directory: str | Path) -> None:
    """Write images/, masks/, saliency/ PNG trees plus labels.csv (atomically)."""
    import io

    from .gtt import atomic_write_bytes

    def png_bytes(arr, mode):
        buf = io.BytesIO()
        Image.fromarray(arr, mode=mode).save(buf, format="PNG")
        return buf.getvalue()

    directory = Path(directory)
    for sub in ("images", "masks", "saliency"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        rgb = np.round(np.moveaxis(s.image, 0, -1) * 255).astype(np.uint8)
        atomic_write_bytes(directory / "images" / f"{s.image_id}.png",
                           png_bytes(rgb, "RGB"))
        atomic_write_bytes(directory / "masks" / f"{s.image_id}.png",
                           png_bytes(s.gt_mask.astype(np.uint8), "L"))
        atomic_write_bytes(directory / "saliency" / f"{s.image_id}.png",
                           png_bytes((s.saliency * 255).astype(np.uint8), "L"))
        rows.append((s.image_id, ",".join(str(c) for c in sorted(s.labels))))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "classes"])
    writer.writerows(rows)
    atomic_write_bytes(directory / "labels.csv", buf.getvalue().encode())


def load_dataset(directory: str | Path) -> list[Sample]:
    directory = Path(directory)
    labels_path = directory / "labels.csv"
    if not labels_path.exists():
        raise FileNotFoundError(f"dataset index missing: {labels_path}")
    samples = []
    with open(labels_path, newline="") as fh:
        for row in csv.DictReader(fh):
            image_id = row["image_id"]
            classes = {int(c) for c in row["classes"].split(",") if c} \
                if row["classes"] else set()
            img_path = directory / "images" / f"{image_id}.png"
            if not img_path.exists():
                raise FileNotFoundError(f"dataset image missing: {img_path}")
            rgb = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64)
            image = np.moveaxis(rgb, -1, 0) / 255.0
            gt = np.asarray(Image.open(directory / "masks" / f"{image_id}.png")
                            .convert("L"), dtype=np.int64)
            sal = np.asarray(Image.open(directory / "saliency" / f"{image_id}.png")
                             .convert("L"))
            samples.append(Sample(image=image, labels=classes, gt_mask=gt,
                                  saliency=(sal >= 128).astype(np.int64),
                                  image_id=image_id))
    return samples


# -- metrics --------------------------------------------------------------

@dataclass
class IoUReport:
    per_class: dict[int, float]
    mean: float
    defined: bool = True


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int,
         count_unknown_as_error: bool = False) -> IoUReport:
    """Per-class IoU and its mean over classes present in either map.

    ``n_classes`` counts all channels including background (class 0).  Pixels
    predicted 255 are dropped from both intersection and union unless
    ``count_unknown_as_error`` is set, in which case they count against the
    ground-truth class.  With every class undefined the mean is reported as 0
    with ``defined=False``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = np.ones_like(pred, dtype=bool) if count_unknown_as_error \
        else pred != 255
    per_class: dict[int, float] = {}
    for k in range(n_classes):
        pk = (pred == k) & valid
        gk = (gt == k) & valid
        union = int((pk | gk).sum())
        if union == 0:
            continue
        per_class[k] = float((pk & gk).sum() / union)
    if not per_class:
        return IoUReport(per_class={}, mean=0.0, defined=False)
    return IoUReport(per_class=per_class,
                     mean=float(np.mean(list(per_class.values()))))


def dataset_miou(preds: list[np.ndarray], gts: list[np.ndarray],
                 n_classes: int) -> IoUReport:
    """Set-level mIoU: intersections and unions pooled over all images first."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    inter = np.zeros(n_classes, dtype=np.int64)
    union = np.zeros(n_classes, dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
        valid = pred != 255
        for k in range(n_classes):
            pk = (pred == k) & valid
            gk = (gt == k) & valid
            inter[k] += (pk & gk).sum()
            union[k] += (pk | gk).sum()
    per_class = {k: float(inter[k] / union[k])
                 for k in range(n_classes) if union[k] > 0}
    if not per_class:
        return IoUReport(per_class={}, mean=0.0, defined=False)
    return IoUReport(per_class=per_class,
                     mean=float(np.mean(list(per_class.values()))))


@dataclass
class QualityReport:
    miou: IoUReport
    precision: dict[int, float]
    recall: dict[int, float]
    unknown_fraction: float


def pseudo_quality_report(pseudo: np.ndarray, gt: np.ndarray,
                          n_classes: int) -> QualityReport:
    """mIoU plus per-class precision/recall, ignoring 255 pixels throughout."""
    pseudo = np.asarray(pseudo)
    gt = np.asarray(gt)
    if pseudo.shape != gt.shape:
        raise ValueError(f"shape mismatch: pseudo {pseudo.shape} vs gt {gt.shape}")
    valid = pseudo != 255
    precision: dict[int, float] = {}
    recall: dict[int, float] = {}
    for k in range(n_classes):
        pk = (pseudo == k) & valid
        gk = (gt == k) & valid
        tp = int((pk & gk).sum())
        if pk.sum():
            precision[k] = tp / int(pk.sum())
        if gk.sum():
            recall[k] = tp / int(gk.sum())
    return QualityReport(
        miou=miou(pseudo, gt, n_classes),
        precision=precision, recall=recall,
        unknown_fraction=float((pseudo == 255).mean()),
    )
