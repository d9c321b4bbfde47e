"""Desk-scale evaluation: SSIM, palette segmentation, mask agreement.

The toy corpus renders every region as one exact palette color, so nearest-
palette-color classification is an exact segmenter for ground-truth images
and a meaningful probe for generated ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import toydata
from .errors import InputError
from .latentcodec import float_to_image, make_codec
from .objectives import make_linear_schedule
from .samplers import GuidanceConfig, SamplerConfig, sample
from .trainer import Checkpoint, PreparedData

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def _windowed_mean(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    size = window.shape[0]
    views = np.lib.stride_tricks.sliding_window_view(x, (size, size))
    return np.einsum("ijkl,kl->ij", views, window)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed structural similarity, Gaussian 11x11 sigma 1.5, range [0, 1].

    Accepts (H, W) or (C, H, W) / (H, W, C) arrays with values in [0, 1];
    channels are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    elif a.ndim == 3 and a.shape[-1] in (1, 3) and a.shape[0] not in (1, 3):
        a = np.moveaxis(a, -1, 0)
        b = np.moveaxis(b, -1, 0)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise InputError(f"image smaller than the {SSIM_WINDOW}px SSIM window")

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    window = _gaussian_window()
    values = []
    for ch_a, ch_b in zip(a, b):
        mu_a = _windowed_mean(ch_a, window)
        mu_b = _windowed_mean(ch_b, window)
        var_a = _windowed_mean(ch_a**2, window) - mu_a**2
        var_b = _windowed_mean(ch_b**2, window) - mu_b**2
        cov = _windowed_mean(ch_a * ch_b, window) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def segment_toy(image: np.ndarray) -> np.ndarray:
    """Assign each pixel the class of its nearest palette color.

    Squared-distance over the full (class, attribute) palette; ties resolve
    to the lowest class index because the palette is ordered by class.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise InputError(f"expected an (H, W, 3) image, got {image.shape}")
    pixels = image.reshape(-1, 1, 3).astype(np.int64)
    palette = toydata.PALETTE_COLORS.astype(np.int64)[None, :, :]
    dist = ((pixels - palette) ** 2).sum(axis=-1)
    nearest = np.argmin(dist, axis=1)
    return toydata.PALETTE_CLASSES[nearest].reshape(image.shape[:2])


def nearest_palette_entry(image: np.ndarray) -> np.ndarray:
    """Index of the nearest palette entry per pixel (not collapsed to class)."""
    image = np.asarray(image)
    pixels = image.reshape(-1, 1, 3).astype(np.int64)
    palette = toydata.PALETTE_COLORS.astype(np.int64)[None, :, :]
    dist = ((pixels - palette) ** 2).sum(axis=-1)
    return np.argmin(dist, axis=1).reshape(image.shape[:2])


def mask_agreement(
    pred: np.ndarray, gt: np.ndarray, num_classes: int = toydata.NUM_CLASSES
) -> tuple[float, np.ndarray, float]:
    """Pixel accuracy, per-class IoU, and mean IoU of two label rasters.

    Classes absent from both rasters get IoU NaN and are excluded from the
    mean.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputError(f"shapes differ: {pred.shape} vs {gt.shape}")
    if pred.max(initial=0) >= num_classes or gt.max(initial=0) >= num_classes:
        raise InputError(f"labels must be < {num_classes}")

    acc = float(np.mean(pred == gt))
    iou = np.full(num_classes, np.nan)
    for k in range(num_classes):
        p = pred == k
        g = gt == k
        union = np.logical_or(p, g).sum()
        if union:
            iou[k] = np.logical_and(p, g).sum() / union
    present = ~np.isnan(iou)
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    return acc, iou, miou


@dataclass
class EvalReport:
    ssim: float
    pixel_accuracy: float
    miou: float
    n_samples: int
    per_class_iou: list[float]

    def save(self, path) -> None:
        lines = [
            f"n_samples={self.n_samples}",
            f"ssim={self.ssim:.6f}",
            f"pixel_accuracy={self.pixel_accuracy:.6f}",
            f"miou={self.miou:.6f}",
        ]
        for name, value in zip(toydata.CLASS_NAMES, self.per_class_iou):
            lines.append(f"iou_{name}={value:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def _load_eval_context(checkpoint: Checkpoint, dataset_dir):
    model = checkpoint.build_model(use_ema=True)
    model.eval()
    codec = make_codec(checkpoint.codec_cfg)
    data = PreparedData(dataset_dir, checkpoint.codec_cfg)
    return model, codec, data


def _generate_batch(model, checkpoint, codec, z_cond, captions, sampler_cfg, omega,
                    null_spatial=False):
    guidance = GuidanceConfig.for_model(model, omega, null_spatial=null_spatial)
    enc = model.encode_caption(captions)
    modality = torch.zeros(z_cond.shape[0], dtype=torch.long)
    sched = make_linear_schedule(
        checkpoint.train_cfg.timesteps,
        checkpoint.train_cfg.beta_start,
        checkpoint.train_cfg.beta_end,
    )
    with torch.no_grad():
        latents = sample(
            model, z_cond, enc, modality, guidance, sampler_cfg,
            sched=sched, objective=checkpoint.train_cfg.objective,
        )
        images = codec.decode(latents)
    return [float_to_image(img) for img in images]


def evaluate(
    checkpoint: Checkpoint,
    dataset_dir,
    sampler_cfg: SamplerConfig,
    n: int,
    omega: float = 4.0,
    null_spatial: bool = False,
    sample_fn=None,
    csv_path=None,
) -> EvalReport:
    """Generate from held-out (mask, caption) pairs and score against ground truth.

    sample_fn, when given, replaces the generation pipeline: it receives the
    list of held-out samples and returns one uint8 image per sample (used by
    tests to score oracle inputs).
    """
    model, codec, data = _load_eval_context(checkpoint, dataset_dir)
    if n > len(data.holdout_ids):
        raise InputError(f"requested {n} samples but only {len(data.holdout_ids)} are held out")
    ids = data.holdout_ids[:n]
    samples = [data.samples[i] for i in ids]

    if sample_fn is not None:
        images = sample_fn(samples)
    else:
        z_cond = data.z_mask[ids]
        captions = data.captions[ids]
        images = _generate_batch(model, checkpoint, codec, z_cond, captions, sampler_cfg,
                                 omega, null_spatial)

    rows = []
    ssims, accs, ious = [], [], []
    for sample_rec, image in zip(samples, images):
        s = ssim(image.astype(np.float64) / 255.0, sample_rec.image.astype(np.float64) / 255.0)
        acc, iou, miou = mask_agreement(segment_toy(image), sample_rec.mask)
        ssims.append(s)
        accs.append(acc)
        ious.append(iou)
        rows.append((sample_rec.sample_id, s, acc, miou))

    iou_matrix = np.stack(ious)
    with np.errstate(invalid="ignore"):
        per_class = np.nanmean(iou_matrix, axis=0)
    present = ~np.isnan(per_class)
    report = EvalReport(
        ssim=float(np.mean(ssims)),
        pixel_accuracy=float(np.mean(accs)),
        miou=float(np.mean(per_class[present])),
        n_samples=n,
        per_class_iou=[float(v) for v in per_class],
    )
    if csv_path is not None:
        with open(csv_path, "w") as f:
            f.write("id,ssim,pixel_accuracy,miou\n")
            for sid, s, acc, miou in rows:
                f.write(f"{sid},{s:.6f},{acc:.6f},{miou:.6f}\n")
    return report


@dataclass
class ProbeReport:
    """Conditioning-effectiveness measurements over held-out pairs."""

    matched_accuracy: float
    mismatched_accuracy: float
    flip_rate: float
    flipped_field: str
    n_samples: int

    @property
    def accuracy_gap(self) -> float:
        return self.matched_accuracy - self.mismatched_accuracy


def _flip_caption(caption: tuple[int, ...], field: str) -> tuple[tuple[int, ...], int]:
    """Advance one attribute token to the next vocabulary value; returns new target value."""
    attrs = toydata.tokens_to_attributes(caption)
    value = getattr(attrs, field)
    flipped = (int(value) + 1) % toydata.ATTRIBUTE_SIZES[field]
    values = {f: getattr(attrs, f) for f in toydata.ATTRIBUTE_FIELDS}
    values[field] = bool(flipped) if field == "accessory" else flipped
    new_attrs = toydata.ToyAttributes(**values)
    return toydata.attributes_to_tokens(new_attrs), flipped


def conditioning_probe(
    checkpoint: Checkpoint,
    dataset_dir,
    sampler_cfg: SamplerConfig,
    n: int = 64,
    omega: float = 4.0,
    flip_field: str = "hair",
    null_spatial: bool = False,
) -> ProbeReport:
    """Measure mask adherence and caption control on held-out samples.

    Matched vs mismatched: pixel accuracy against each sample's own mask,
    conditioning on the correct mask vs a shuffled one.  Flip: change one
    caption attribute token and check the majority palette entry inside the
    ground-truth region of that attribute now renders the new value.
    """
    model, codec, data = _load_eval_context(checkpoint, dataset_dir)
    if n > len(data.holdout_ids):
        raise InputError(f"requested {n} samples but only {len(data.holdout_ids)} are held out")
    ids = data.holdout_ids[:n]
    samples = [data.samples[i] for i in ids]
    captions = data.captions[ids]

    matched = _generate_batch(model, checkpoint, codec, data.z_mask[ids], captions,
                              sampler_cfg, omega, null_spatial)
    shuffled = ids[1:] + ids[:1]
    mismatched = _generate_batch(
        model, checkpoint, codec, data.z_mask[shuffled], captions, sampler_cfg, omega,
        null_spatial,
    )

    flip_tokens = []
    targets = []
    for sample_rec in samples:
        tokens, target = _flip_caption(sample_rec.caption, flip_field)
        flip_tokens.append(tokens)
        targets.append(target)
    flipped_imgs = _generate_batch(
        model, checkpoint, codec, data.z_mask[ids],
        torch.tensor(flip_tokens, dtype=torch.long), sampler_cfg, omega, null_spatial,
    )

    region_class = {"background": toydata.BACKGROUND, "face": toydata.SKIN,
                    "hair": toydata.HAIR, "eyes": toydata.EYES,
                    "accessory": toydata.ACCESSORY}[flip_field]
    matched_accs, mismatched_accs, flips = [], [], []
    for sample_rec, gen_m, gen_x, gen_f, target in zip(
        samples, matched, mismatched, flipped_imgs, targets
    ):
        matched_accs.append(float(np.mean(segment_toy(gen_m) == sample_rec.mask)))
        mismatched_accs.append(float(np.mean(segment_toy(gen_x) == sample_rec.mask)))
        region = sample_rec.mask == region_class
        if not region.any():
            continue
        entries = nearest_palette_entry(gen_f)[region]
        majority = int(np.bincount(entries, minlength=len(toydata.PALETTE)).argmax())
        cls, value = toydata.PALETTE[majority][0], toydata.PALETTE[majority][1]
        flips.append(cls == region_class and value == target)

    return ProbeReport(
        matched_accuracy=float(np.mean(matched_accs)),
        mismatched_accuracy=float(np.mean(mismatched_accs)),
        flip_rate=float(np.mean(flips)) if flips else float("nan"),
        flipped_field=flip_field,
        n_samples=n,
    )
