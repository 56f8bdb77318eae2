"""Desk-scale classification model: a small strided conv backbone, optional
anatomy attention on the last stages, configurable pooling heads, and a
concatenating sigmoid classifier. Includes training, ten-crop inference,
and Grad-CAM extraction."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .attention import AaaParams, AnatomyMasks, PwapParams, aaa_forward, pwap
from .ops import LinearParams, conv3x3, fully_connected, resize
from .serialize import load_tensors, save_tensors
from .tensor import NonFiniteError, Tensor, concat

ATTENTION_LEVELS = ("L0", "L1", "L2", "L3")
POOLING_TYPES = ("pwap", "average", "max", "gem")
FUSION_TYPES = ("aaa", "hardmask", "none")

# head stages (0-based into the 4 backbone stages) per attention level;
# L0 is the no-attention baseline reading only the final stage
_HEAD_STAGES = {"L0": (3,), "L1": (3,), "L2": (2, 3), "L3": (1, 2, 3)}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class ModelConfig:
    image_size: int = 64
    mask_size: int = 16
    attention_level: str = "L2"
    pooling: str = "pwap"
    r: float = 0.5
    backbone_widths: tuple = (8, 16, 16, 32)
    n_classes: int = 3
    fusion: str = "aaa"

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)
        if self.attention_level not in ATTENTION_LEVELS:
            raise ValueError(f"unknown attention_level {self.attention_level!r}")
        if self.pooling not in POOLING_TYPES:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.fusion not in FUSION_TYPES:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if len(self.backbone_widths) != 4:
            raise ValueError("backbone_widths must list 4 stage widths")
        if self.r <= 0:
            raise ValueError("reduction ratio must be > 0")

    @property
    def head_stages(self) -> tuple:
        return _HEAD_STAGES[self.attention_level]

    @property
    def uses_masks(self) -> bool:
        return self.attention_level != "L0" and self.fusion != "none"


class ToyModel:
    """Backbone + per-head fusion/pooling + concatenating classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        widths = (1,) + config.backbone_widths
        self.stages = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(cin * 9)
            w = Tensor(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)),
                       requires_grad=True)
            b = Tensor(np.zeros(cout), requires_grad=True)
            self.stages.append((w, b))

        self.aaa = {}
        self.pool_pwap = {}
        self.pool_gem_p = {}
        head_dims = []
        for si in config.head_stages:
            c = config.backbone_widths[si]
            head_dims.append(c)
            if config.attention_level != "L0" and config.fusion == "aaa":
                self.aaa[si] = AaaParams.init(c, config.r, rng)
            if config.pooling == "pwap":
                self.pool_pwap[si] = PwapParams.init(c)
            elif config.pooling == "gem":
                self.pool_gem_p[si] = Tensor(np.array([3.0]), requires_grad=True)
        self.classifier = LinearParams.init(sum(head_dims), config.n_classes, rng)
        self.set_mode("train")

    # -- parameter plumbing ---------------------------------------------------

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        for bn in self.bn_states():
            bn.mode = mode

    def bn_states(self):
        out = []
        for p in self.aaa.values():
            out += p.bn_states()
        return out

    def parameters(self):
        out = []
        for i, (w, b) in enumerate(self.stages):
            out += [(f"stage{i}.weight", w), (f"stage{i}.bias", b)]
        for si, p in sorted(self.aaa.items()):
            out += p.tensors(f"aaa{si}")
        for si, p in sorted(self.pool_pwap.items()):
            out += p.tensors(f"pool{si}")
        for si, p in sorted(self.pool_gem_p.items()):
            out.append((f"pool{si}.gem_p", p))
        out += self.classifier.tensors("classifier")
        return out

    def state_arrays(self):
        """Learnable tensors plus BN running statistics, fixed order."""
        out = [(name, t.data) for name, t in self.parameters()]
        for si, p in sorted(self.aaa.items()):
            for j, bn in enumerate(p.bn_states()):
                out += bn.state_arrays(f"aaa{si}.bnstate{j}")
        return out

    def load_state(self, arrays: dict) -> None:
        for name, t in self.parameters():
            t.data = np.array(arrays[name], dtype=np.float64)
        for si, p in sorted(self.aaa.items()):
            for j, bn in enumerate(p.bn_states()):
                bn.running_mean = np.array(arrays[f"aaa{si}.bnstate{j}.running_mean"])
                bn.running_var = np.array(arrays[f"aaa{si}.bnstate{j}.running_var"])

    def snapshot(self) -> dict:
        return {name: arr.copy() for name, arr in self.state_arrays()}

    # -- forward --------------------------------------------------------------

    def _pool(self, feat: Tensor, si: int) -> Tensor:
        kind = self.config.pooling
        if kind == "average":
            return feat.mean(axis=(2, 3))
        if kind == "max":
            return feat.max(axis=(2, 3))
        if kind == "pwap":
            return pwap(feat, self.pool_pwap[si])[0]
        # generalized-mean pooling with learnable exponent, on positively
        # clamped features
        p = self.pool_gem_p[si]
        x = feat.clamp(lo=1e-6)
        powed = (x.log() * p).exp()
        return (powed.mean(axis=(2, 3)).log() / p).exp()

    def forward(self, image: Tensor, masks: AnatomyMasks | None,
                cache: dict | None = None) -> Tensor:
        """image[N,1,H,W] -> class probabilities [N,n] in (0,1).

        `cache`, when given, receives pre-sigmoid scores and the per-head
        post-fusion feature maps (for Grad-CAM).
        """
        cfg = self.config
        if image.shape[2] != cfg.image_size or image.shape[3] != cfg.image_size:
            raise ValueError(f"image spatial {image.shape[2:]} != configured "
                             f"size {cfg.image_size}")
        if cfg.uses_masks:
            if masks is None:
                raise ValueError("this configuration requires anatomy masks")
            masks = masks.resized((cfg.mask_size, cfg.mask_size))

        feats = []
        x = image
        for w, b in self.stages:
            x = conv3x3(x, w, b, stride=2).relu()
            feats.append(x)

        pooled = []
        for si in cfg.head_stages:
            f = resize(feats[si], (cfg.mask_size, cfg.mask_size), "bilinear")
            if cfg.attention_level != "L0":
                if cfg.fusion == "aaa":
                    f = aaa_forward(f, masks, self.aaa[si])
                elif cfg.fusion == "hardmask":
                    f = f * masks.union()
            if cache is not None:
                cache.setdefault("head_feats", {})[si] = f
            pooled.append(self._pool(f, si))
        scores = fully_connected(concat(pooled, axis=1), self.classifier)
        if cache is not None:
            cache["scores"] = scores
        return scores.sigmoid()


def bce_loss(p_s: Tensor, labels) -> Tensor:
    """Multi-label binary cross-entropy, averaged over classes and batch."""
    if not isinstance(labels, Tensor):
        labels = Tensor(np.asarray(labels, dtype=np.float64))
    if labels.shape != p_s.shape:
        raise ValueError("bce_loss shape mismatch")
    p = p_s.clamp(lo=1e-12, hi=1.0 - 1e-12)
    terms = labels * p.log() + (1.0 - labels) * (1.0 - p).log()
    return -terms.mean()


# -- training -----------------------------------------------------------------

HISTORY_HEADER = ["epoch", "loss", "val_auc"]


def predict(model: ToyModel, images: np.ndarray, lung: np.ndarray | None,
            heart: np.ndarray | None, batch: int = 32) -> np.ndarray:
    """Eval-mode probabilities for a stack of images."""
    model.set_mode("eval")
    outs = []
    for lo in range(0, len(images), batch):
        hi = lo + batch
        masks = None
        if model.config.uses_masks:
            masks = AnatomyMasks(Tensor(lung[lo:hi]), Tensor(heart[lo:hi]))
        outs.append(model.forward(Tensor(images[lo:hi]), masks).data)
    return np.concatenate(outs, axis=0)


def _mean_val_auc(model: ToyModel, data: dict) -> float:
    from .harness import auc

    probs = predict(model, data["val_images"], data.get("val_lung"),
                    data.get("val_heart"))
    labels = data["val_labels"]
    scores = []
    for k in range(labels.shape[1]):
        pos = labels[:, k].sum()
        if pos == 0 or pos == len(labels):
            continue
        scores.append(auc(probs[:, k], labels[:, k]))
    return float(np.mean(scores)) if scores else 50.0


def train(model: ToyModel, data: dict, epochs: int, lr: float,
          batch: int, seed: int):
    """Adam training with best-validation-AUC checkpointing.

    `data` holds train_/val_ images, (noisy) lung/heart masks, and binary
    label matrices. Returns (model-with-best-weights, history rows).
    """
    from .optim import Adam

    rng = np.random.default_rng(seed)
    opt = Adam([t for _, t in model.parameters()], lr)
    n = len(data["train_images"])
    history = []
    best = (-1.0, model.snapshot())
    for epoch in range(epochs):
        model.set_mode("train")
        perm = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch):
            idx = perm[lo:lo + batch]
            if len(idx) < 2:
                continue  # train-mode BN needs >= 2 samples
            images = Tensor(data["train_images"][idx])
            masks = None
            if model.config.uses_masks:
                masks = AnatomyMasks(Tensor(data["train_lung"][idx]),
                                     Tensor(data["train_heart"][idx]))
            try:
                loss = bce_loss(model.forward(images, masks),
                                data["train_labels"][idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite loss in epoch {epoch}: {exc}") from exc
            losses.append(float(loss.data))
        val_auc = _mean_val_auc(model, data)
        history.append([epoch, float(np.mean(losses)), val_auc])
        if val_auc > best[0]:
            best = (val_auc, model.snapshot())
    model.load_state(best[1])
    model.set_mode("eval")
    return model, history


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_HEADER)
        for epoch, loss, val_auc in history:
            writer.writerow([epoch, f"{loss:.9f}", f"{val_auc:.6f}"])


# -- inference helpers --------------------------------------------------------


def ten_crop_predict(model: ToyModel, image: Tensor, masks: AnatomyMasks | None,
                     crop_size: int) -> np.ndarray:
    """Mean probability over 4 corner + 1 center crops and their horizontal
    flips. Masks (at image resolution) are cropped and flipped identically.
    """
    n, _, h, w = image.shape
    c = crop_size
    if c > h or c > w:
        raise ValueError("crop_size exceeds image size")
    origins = [(0, 0), (0, w - c), (h - c, 0), (h - c, w - c),
               ((h - c) // 2, (w - c) // 2)]
    if model.config.uses_masks and masks is None:
        raise ValueError("this configuration requires anatomy masks")

    crop_model = model
    if c != model.config.image_size:
        crop_model = clone_for_image_size(model, c)

    acc = None
    for i0, j0 in origins:
        for flip in (False, True):
            img = image.data[:, :, i0:i0 + c, j0:j0 + c]
            if flip:
                img = img[:, :, :, ::-1]
            m = None
            if masks is not None:
                lung = masks.lung.data[:, :, i0:i0 + c, j0:j0 + c]
                heart = masks.heart.data[:, :, i0:i0 + c, j0:j0 + c]
                if flip:
                    lung, heart = lung[:, :, :, ::-1], heart[:, :, :, ::-1]
                m = AnatomyMasks(Tensor(lung.copy()), Tensor(heart.copy()))
            probs = crop_model.forward(Tensor(img.copy()), m).data
            acc = probs if acc is None else acc + probs
    return acc / 10.0


def clone_for_image_size(model: ToyModel, image_size: int) -> ToyModel:
    """Same weights, different input resolution (pooling makes heads
    resolution-agnostic)."""
    clone = ToyModel(replace(model.config, image_size=image_size))
    clone.load_state(dict(model.state_arrays()))
    clone.set_mode(model.mode)
    return clone


def gradcam(model: ToyModel, image: Tensor, masks: AnatomyMasks | None,
            class_index: int, stage: str = "last") -> Tensor:
    """Gradient-weighted class activation map from a head feature map.

    Channel weights are the spatial means of the pre-sigmoid class-score
    gradients; the map is ReLU(weighted sum), bilinearly upsampled to the
    image size and min-max normalized to [0,1] (constant maps go to 0).
    """
    cfg = model.config
    if not 0 <= class_index < cfg.n_classes:
        raise ValueError(f"class_index {class_index} out of range")
    if stage == "last":
        si = cfg.head_stages[-1]
    else:
        si = int(stage)
        if si not in cfg.head_stages:
            raise ValueError(f"stage {si} has no head in this configuration")
    model.set_mode("eval")
    cache = {}
    model.forward(image, masks, cache=cache)
    feat = cache["head_feats"][si]
    feat.requires_grad = True
    onehot = np.zeros(cache["scores"].shape)
    onehot[:, class_index] = 1.0
    (cache["scores"] * Tensor(onehot)).sum().backward()
    weights = feat.grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * feat.data).sum(axis=1, keepdims=True), 0.0)
    cam = resize(Tensor(cam), (image.shape[2], image.shape[3]),
                 "bilinear").data
    lo, hi = cam.min(), cam.max()
    if hi - lo > 0:
        cam = (cam - lo) / (hi - lo)
    else:
        cam = np.zeros_like(cam)
    return Tensor(cam)


def gradcam_overlay(heatmaps) -> Tensor:
    """Multi-label overlay: elementwise max of per-class heatmaps."""
    stacked = np.stack([h.data for h in heatmaps], axis=0)
    return Tensor(stacked.max(axis=0))


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model: ToyModel, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config)
    cfg["backbone_widths"] = list(cfg["backbone_widths"])
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=1) + "\n")
    save_tensors(out_dir / "weights.bin", model.state_arrays())


def load_checkpoint(out_dir) -> ToyModel:
    out_dir = Path(out_dir)
    cfg = json.loads((out_dir / "config.json").read_text())
    model = ToyModel(ModelConfig(**cfg))
    model.load_state(load_tensors(out_dir / "weights.bin"))
    model.set_mode("eval")
    return model
