"""Quantitative evaluation.

Image-set realism is scored by a Frechet distance between Gaussian fits of
feature embeddings from a fixed, seeded convolutional embedder (no pretrained
weights involved, so absolute values are not comparable to published FID
numbers but orderings are). Target-area integrity is scored by segmentation:
a small U-Net trained on real images of the target modality is run on
translated images and its prediction compared against the source ground-truth
mask (S-score = mean DICE x 100). Phantoms additionally provide exact
cross-modality renderings, enabling direct L1 translation error.
"""

from __future__ import annotations

import csv as csv_module
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import PhantomDataset
from .networks import (
    ConfigError,
    Generator,
    SmallUNet,
    load_param_file,
    restore_module,
    save_param_file,
    flatten_module,
)


# ---------------------------------------------------------------------------
# feature embedding + Frechet distance


class FeatureEmbedder(nn.Module):
    """Fixed random conv features for distribution distances.

    Weights are drawn once from the given seed and never trained; the same
    embedder instance must be used for both image sets of one comparison.
    """

    def __init__(self, seed: int = 0, dim: int = 64):
        super().__init__()
        self.seed = seed
        self.dim = dim
        widths = [1, dim // 4, dim // 2, dim]
        gen = torch.Generator().manual_seed(seed)
        convs = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                std = (2.0 / (c_in * 9)) ** 0.5
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            convs += [conv, nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*convs)
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def embed(self, images: np.ndarray) -> np.ndarray:
        """(N, H, W) images in [-1, 1] -> (N, dim) float64 embeddings."""
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).unsqueeze(1)
        feats = self.net(x).mean(dim=(2, 3))
        return feats.double().numpy()


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    # symmetrize, then clip tiny negative eigenvalues introduced by roundoff
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1-mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2)), floored at zero."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape[0] != mu1.shape[0]:
        raise ValueError("moment dimensions disagree")
    s1 = _sqrtm_psd(cov1)
    cross = _sqrtm_psd(s1 @ cov2 @ s1)
    val = float(((mu1 - mu2) ** 2).sum() + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def compute_fid(embedder: FeatureEmbedder, real_images, fake_images) -> float:
    """Frechet distance between Gaussian fits of the two embedded image sets."""
    e_real = embedder.embed(np.asarray(real_images))
    e_fake = embedder.embed(np.asarray(fake_images))
    if len(e_real) < 2 or len(e_fake) < 2:
        raise ValueError("need at least two images per side")

    def moments(e):
        mu = e.mean(axis=0)
        cov = np.cov(e, rowvar=False)
        if len(e) < embedder.dim + 1:
            cov = cov + 1e-6 * np.eye(embedder.dim)  # keep the fit nonsingular
        return mu, cov

    mu_r, cov_r = moments(e_real)
    mu_f, cov_f = moments(e_fake)
    return frechet_distance(mu_r, cov_r, mu_f, cov_f)


# ---------------------------------------------------------------------------
# segmentation metrics


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap coefficient in [0, 1]; both-empty counts as perfect (1.0)."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError("mask shapes differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def ravd(reference: np.ndarray, prediction: np.ndarray) -> float:
    """Relative absolute volume difference in percent; asymmetric."""
    ref = int((np.asarray(reference) > 0).sum())
    pred = int((np.asarray(prediction) > 0).sum())
    if ref == 0:
        raise ValueError("reference mask is empty; RAVD undefined")
    return abs(pred - ref) / ref * 100.0


# ---------------------------------------------------------------------------
# reference segmenter


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    p = torch.sigmoid(logits)
    num = 2.0 * (p * target).sum(dim=(1, 2, 3)) + eps
    den = p.sum(dim=(1, 2, 3)) + target.sum(dim=(1, 2, 3)) + eps
    return (1.0 - num / den).mean()


@dataclass
class Segmenter:
    net: SmallUNet
    in_channels: int
    modality: int

    @torch.no_grad()
    def predict(self, images: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        """(N, C, H, W) or (N, H, W) inputs -> (N, H, W) binary masks."""
        x = torch.from_numpy(np.asarray(images, dtype=np.float32))
        if x.dim() == 3:
            x = x.unsqueeze(1)
        prob = torch.sigmoid(self.net(x))
        return (prob.squeeze(1).numpy() > threshold).astype(np.uint8)

    def save(self, path: Path) -> None:
        meta = {"in_channels": self.in_channels, "modality": self.modality,
                "kind": "segmenter"}
        save_param_file(path, meta, flatten_module("seg", self.net))


def load_segmenter(path: Path) -> Segmenter:
    meta, arrays = load_param_file(path)
    if meta.get("kind") != "segmenter":
        raise ConfigError(f"{path} is not a segmenter parameter file")
    net = SmallUNet(in_channels=meta["in_channels"], base_channels=16)
    restore_module("seg", net, arrays)
    net.eval()
    return Segmenter(net=net, in_channels=meta["in_channels"], modality=meta["modality"])


def train_segmenter(
    train_images: np.ndarray,
    train_masks: np.ndarray,
    heldout_images: np.ndarray,
    heldout_masks: np.ndarray,
    seed: int = 0,
    dice_target: float = 0.85,
    step_cap: int = 2000,
    batch_size: int = 8,
    modality: int = -1,
) -> tuple[Segmenter, float]:
    """Supervised soft-dice training; stops at the dice target or step cap.

    Returns the segmenter and its final held-out DICE.
    """
    images = np.asarray(train_images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    masks = np.asarray(train_masks, dtype=np.float32)[:, None]
    torch.manual_seed(seed)
    net = SmallUNet(in_channels=images.shape[1], base_channels=16)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    rng = np.random.default_rng(seed)
    seg = Segmenter(net=net, in_channels=images.shape[1], modality=modality)

    def heldout_dice():
        preds = seg.predict(heldout_images)
        return float(np.mean([dice(p, m) for p, m in zip(preds, heldout_masks)]))

    best = 0.0
    for step in range(1, step_cap + 1):
        idx = rng.integers(len(images), size=batch_size)
        x = torch.from_numpy(images[idx])
        y = torch.from_numpy(masks[idx])
        opt.zero_grad(set_to_none=True)
        loss = soft_dice_loss(net(x), y)
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == step_cap:
            best = heldout_dice()
            if best >= dice_target:
                break
    net.eval()
    return seg, best


def train_reference_segmenter(
    dataset: PhantomDataset, modality: int, seed: int = 0,
    dice_target: float = 0.85, step_cap: int = 2000,
) -> tuple[Segmenter, float]:
    """Single-channel segmenter on the real train split of one modality."""
    train = dataset.of_modality(modality, "train")
    test = dataset.of_modality(modality, "test")
    if not train or not test:
        raise ValueError(f"modality {modality} lacks train or test samples")
    return train_segmenter(
        np.stack([s.image for s in train]),
        np.stack([s.mask for s in train]),
        np.stack([s.image for s in test]),
        np.stack([s.mask for s in test]),
        seed=seed, dice_target=dice_target, step_cap=step_cap, modality=modality,
    )


def compute_s_score(segmenter: Segmenter, translated_images, source_masks) -> float:
    """Mean DICE (x100) of segmenter predictions on translated images."""
    preds = segmenter.predict(np.asarray(translated_images, dtype=np.float32))
    scores = [dice(p, m) for p, m in zip(preds, source_masks)]
    return float(np.mean(scores)) * 100.0


# ---------------------------------------------------------------------------
# translation helpers and phantom ground-truth error


@torch.no_grad()
def translate_images(gen: Generator, images: np.ndarray, target: int, batch: int = 16) -> np.ndarray:
    """Translate (N, H, W) images to the target modality with the x-stream."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for i in range(0, len(images), batch):
        x = torch.from_numpy(images[i : i + batch]).unsqueeze(1)
        out.append(gen.translate(x, target).squeeze(1).numpy())
    return np.concatenate(out, axis=0)


def phantom_translation_error(
    gen: Generator, dataset: PhantomDataset, source: int, target: int, split: str = "test"
) -> dict[str, float]:
    """L1 error of translated images against ground-truth renderings.

    Possible only on phantom data where each sample id exists in every
    modality; reports whole-image and within-mask means separately.
    """
    samples = dataset.of_modality(source, split)
    if not samples:
        raise ValueError(f"no {split} samples for modality {source}")
    fakes = translate_images(gen, np.stack([s.image for s in samples]), target)
    whole, targeted = [], []
    for s, fake in zip(samples, fakes):
        gt = dataset.get(s.sample_id, target)
        diff = np.abs(fake - gt.image)
        whole.append(float(diff.mean()))
        fg = s.mask > 0
        targeted.append(float(diff[fg].mean()))
    return {"whole_l1": float(np.mean(whole)), "target_l1": float(np.mean(targeted))}


def enrichment_concat(real: np.ndarray, synthetic_others: list[np.ndarray]) -> np.ndarray:
    """Stack [real, synthetic...] as channels; callers order the synthetics
    by modality id."""
    real = np.asarray(real, dtype=np.float32)
    for s in synthetic_others:
        if np.asarray(s).shape != real.shape:
            raise ValueError("synthetic channel shape differs from the real image")
    return np.stack([real] + [np.asarray(s, dtype=np.float32) for s in synthetic_others], axis=0)


def build_enriched_set(gen: Generator, dataset: PhantomDataset, modality: int, split: str):
    """(N, n_modalities, H, W) enriched inputs plus (N, H, W) masks."""
    samples = dataset.of_modality(modality, split)
    images = np.stack([s.image for s in samples])
    synth = {
        m.id: translate_images(gen, images, m.id)
        for m in dataset.modalities
        if m.id != modality
    }
    stacked = np.stack(
        [
            enrichment_concat(img, [synth[m][i] for m in sorted(synth)])
            for i, img in enumerate(images)
        ]
    )
    masks = np.stack([s.mask for s in samples])
    return stacked, masks


def run_enrichment_experiment(
    gen: Generator, dataset: PhantomDataset, modality: int, seeds=(0, 1, 2),
    dice_target: float = 0.999, step_cap: int = 600,
) -> dict[str, list[float]]:
    """Held-out DICE of single-channel vs enriched segmenters, per seed."""
    train = dataset.of_modality(modality, "train")
    test = dataset.of_modality(modality, "test")
    single_train = np.stack([s.image for s in train])
    single_test = np.stack([s.image for s in test])
    masks_train = np.stack([s.mask for s in train])
    masks_test = np.stack([s.mask for s in test])
    enr_train, _ = build_enriched_set(gen, dataset, modality, "train")
    enr_test, _ = build_enriched_set(gen, dataset, modality, "test")

    out = {"single": [], "enriched": []}
    for seed in seeds:
        _, d_single = train_segmenter(
            single_train, masks_train, single_test, masks_test,
            seed=seed, dice_target=dice_target, step_cap=step_cap, modality=modality,
        )
        _, d_enr = train_segmenter(
            enr_train, masks_train, enr_test, masks_test,
            seed=seed, dice_target=dice_target, step_cap=step_cap, modality=modality,
        )
        out["single"].append(d_single)
        out["enriched"].append(d_enr)
    return out


# ---------------------------------------------------------------------------
# checkpoint-level evaluation


def translated_pool(gen: Generator, dataset: PhantomDataset, target: int, split: str = "test"):
    """Translate every split sample of the other modalities to `target`.

    Returns (images, source_masks) aligned lists.
    """
    images, masks = [], []
    for m in dataset.modalities:
        if m.id == target:
            continue
        samples = dataset.of_modality(m.id, split)
        if not samples:
            continue
        fakes = translate_images(gen, np.stack([s.image for s in samples]), target)
        images.extend(fakes)
        masks.extend(s.mask for s in samples)
    return np.stack(images), np.stack(masks)


def evaluate_generator(
    gen: Generator,
    dataset: PhantomDataset,
    metrics: tuple[str, ...] = ("fid", "s_score", "seg", "l1"),
    segmenters: dict[int, Segmenter] | None = None,
    embedder: FeatureEmbedder | None = None,
) -> dict:
    """Per-modality metric report; `mean` aggregates over modalities."""
    if ("s_score" in metrics or "seg" in metrics) and not segmenters:
        raise ConfigError(
            "s_score/seg metrics need reference segmenters; run the "
            "train-segmenter command first"
        )
    embedder = embedder or FeatureEmbedder()
    per_modality: dict[str, dict[str, float]] = {}
    for m in dataset.modalities:
        entry: dict[str, float] = {}
        real_test = dataset.of_modality(m.id, "test")
        real_images = np.stack([s.image for s in real_test])
        if "fid" in metrics or "s_score" in metrics:
            fake_images, fake_masks = translated_pool(gen, dataset, m.id)
        if "fid" in metrics:
            entry["fid"] = compute_fid(embedder, real_images, fake_images)
        if "s_score" in metrics:
            entry["s_score"] = compute_s_score(segmenters[m.id], fake_images, fake_masks)
        if "seg" in metrics:
            preds = segmenters[m.id].predict(real_images)
            entry["dice"] = float(np.mean([dice(p, s.mask) for p, s in zip(preds, real_test)])) * 100.0
            entry["ravd"] = float(np.mean([ravd(s.mask, p) for p, s in zip(preds, real_test)]))
        if "l1" in metrics:
            errs = [
                phantom_translation_error(gen, dataset, src.id, m.id)
                for src in dataset.modalities
                if src.id != m.id
            ]
            entry["whole_l1"] = float(np.mean([e["whole_l1"] for e in errs]))
            entry["target_l1"] = float(np.mean([e["target_l1"] for e in errs]))
        per_modality[m.name] = entry
    keys = sorted({k for v in per_modality.values() for k in v})
    mean = {k: float(np.mean([v[k] for v in per_modality.values()])) for k in keys}
    return {"per_modality": per_modality, "mean": mean}


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationVariant:
    use_shape_controller: bool = True
    use_target_stream: bool = True
    use_crossing: bool = True

    def __post_init__(self):
        if self.use_crossing and not self.use_target_stream:
            raise ConfigError(
                "invalid ablation variant: the crossing loss requires the target stream"
            )

    @property
    def name(self) -> str:
        dropped = [
            letter
            for flag, letter in (
                (self.use_shape_controller, "S"),
                (self.use_target_stream, "T"),
                (self.use_crossing, "C"),
            )
            if not flag
        ]
        return "full" if not dropped else "wo_" + "_".join(dropped)

    def trainer_kwargs(self) -> dict:
        return {
            "use_shape_controller": self.use_shape_controller,
            "use_target_stream": self.use_target_stream,
            "use_crossing": self.use_crossing,
        }


# the six variants that exist (crossing requires the target stream)
STANDARD_VARIANTS = (
    AblationVariant(False, False, False),
    AblationVariant(False, True, False),
    AblationVariant(True, False, False),
    AblationVariant(True, True, False),
    AblationVariant(False, True, True),
    AblationVariant(True, True, True),
)


def run_ablation(
    variants,
    dataset: PhantomDataset,
    seeds,
    gen_cfg,
    critic_cfg,
    train_cfg,
    out_dir: Path,
    segmenter_seed: int = 0,
) -> Path:
    """Train every variant for every seed and tabulate S-scores.

    Output CSV rows are variants, columns the per-modality S-scores plus
    their mean, averaged over seeds. Invalid variants are rejected before any
    training starts (AblationVariant validates on construction).
    """
    from dataclasses import replace
    from .training import Trainer

    variants = list(variants)  # construction already validated each one
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    segmenters = {}
    for m in dataset.modalities:
        segmenters[m.id], _ = train_reference_segmenter(dataset, m.id, seed=segmenter_seed)

    rows = []
    for variant in variants:
        scores = {m.name: [] for m in dataset.modalities}
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            trainer = Trainer(gen_cfg, critic_cfg, cfg, **variant.trainer_kwargs())
            run_dir = out_dir / variant.name / f"seed_{seed}"
            trainer.train(dataset, run_dir)
            gen = trainer.ema_generator()
            for m in dataset.modalities:
                fake_images, fake_masks = translated_pool(gen, dataset, m.id)
                scores[m.name].append(compute_s_score(segmenters[m.id], fake_images, fake_masks))
        row = {"variant": variant.name}
        row.update({k: float(np.mean(v)) for k, v in scores.items()})
        row["mean"] = float(np.mean([row[m.name] for m in dataset.modalities]))
        rows.append(row)

    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv_module.DictWriter(
            fh, fieldnames=["variant"] + [m.name for m in dataset.modalities] + ["mean"]
        )
        writer.writeheader()
        writer.writerows(rows)
    return csv_path
