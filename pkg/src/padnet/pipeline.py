"""Three-stage training, patch-grid inference and evaluation."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autoencoder import Autoencoder, reconstruction_loss
from .data_io import StereoSample
from .errors import NumericError, UsageError
from .metrics import EvalReport, evaluate_scores
from .network import GROUP_PREFIXES, PADNet
from .regressor import Regressor, score_loss
from .tensor_core import Adam, Module, Tensor, no_grad


@dataclass(frozen=True)
class Profile:
    patch: int
    stride_w: int
    stride_h: int
    batch_size: int


# The 64 profile shrinks patch and strides by the same factor of four.
PROFILES = {
    256: Profile(patch=256, stride_w=192, stride_h=104, batch_size=2),
    64: Profile(patch=64, stride_w=48, stride_h=26, batch_size=8),
}


@dataclass
class TrainConfig:
    """Every knob of a training run; printing it is enough to reproduce the run.

    ``schedule_scale`` maps the loop's epoch counter onto schedule epochs
    (``schedule epoch = floor(epoch * schedule_scale)``) so that short
    desk-scale runs can traverse the full decay schedule.
    """

    stage: int = 3
    epochs: int = 300
    batch_size: Optional[int] = None
    lr: float = 1e-4
    lr_w1: float = 1e-5
    lr_w3: float = 1e-3
    pretrain_divisor: float = 10.0
    joint_decay: float = 0.25
    decay_every: int = 50
    joint_freeze_after: int = 200
    schedule_scale: float = 1.0
    seed: int = 0
    profile: int = 256
    stride_w: Optional[int] = None
    stride_h: Optional[int] = None
    crop: bool = True
    hflip: bool = True
    vflip: bool = True
    val_fraction: float = 0.0
    backbone: str = "resnet18"
    max_steps: Optional[int] = None
    trace_path: Optional[str] = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise UsageError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.profile not in PROFILES:
            raise UsageError(f"profile must be one of {sorted(PROFILES)}, got {self.profile}")
        if self.epochs < 1:
            raise UsageError("epochs must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise UsageError("batch size must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise UsageError("val_fraction must lie in [0, 1)")
        if self.decay_every < 1 or self.schedule_scale <= 0:
            raise UsageError("decay_every and schedule_scale must be positive")

    @property
    def patch(self) -> int:
        return PROFILES[self.profile].patch

    @property
    def batch(self) -> int:
        return self.batch_size or PROFILES[self.profile].batch_size

    @property
    def strides(self) -> Tuple[int, int]:
        prof = PROFILES[self.profile]
        return (self.stride_w or prof.stride_w, self.stride_h or prof.stride_h)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(patch=self.patch, batch_size=self.batch, stride_w=self.strides[0], stride_h=self.strides[1])
        return d


# ----------------------------------------------------------------------------
# Schedules
# ----------------------------------------------------------------------------


def schedule_epoch(epoch: int, config: TrainConfig) -> int:
    return int(math.floor(epoch * config.schedule_scale))


def pretrain_lr(epoch: int, config: TrainConfig) -> float:
    """Stage 1/2 rate: ``lr`` divided by ten every ``decay_every`` epochs."""
    # Division keeps 1e-4 / 10**k equal to the decimal literal 1e-5, 1e-6, ...
    return config.lr / config.pretrain_divisor ** (epoch // config.decay_every)


def joint_lrs(epoch: int, config: TrainConfig) -> Dict[str, float]:
    """Stage 3 rates per group; w3 decays by 0.25 per period until it freezes."""
    periods = min(epoch // config.decay_every, config.joint_freeze_after // config.decay_every)
    w3 = config.lr_w3 * config.joint_decay ** periods
    return {"w1": config.lr_w1, "w2": w3 / 2.0, "w3": w3}


# ----------------------------------------------------------------------------
# Patch geometry and augmentation
# ----------------------------------------------------------------------------


def axis_offsets(extent: int, patch: int, stride: int) -> List[int]:
    if extent < patch:
        raise UsageError(f"image extent {extent} is smaller than patch size {patch}")
    if stride < 1:
        raise UsageError("stride must be positive")
    offsets = list(range(0, extent - patch + 1, stride))
    if offsets[-1] != extent - patch:
        offsets.append(extent - patch)
    return offsets


@dataclass(frozen=True)
class PatchGrid:
    """Top-left offsets (row, col) of overlapping square patches covering an image."""

    height: int
    width: int
    patch: int
    stride_w: int
    stride_h: int

    @property
    def rows(self) -> List[int]:
        return axis_offsets(self.height, self.patch, self.stride_h)

    @property
    def cols(self) -> List[int]:
        return axis_offsets(self.width, self.patch, self.stride_w)

    @property
    def offsets(self) -> List[Tuple[int, int]]:
        return [(r, c) for r in self.rows for c in self.cols]

    def __len__(self) -> int:
        return len(self.rows) * len(self.cols)

    @classmethod
    def for_image(cls, shape: Sequence[int], config: TrainConfig) -> "PatchGrid":
        sw, sh = config.strides
        return cls(int(shape[-2]), int(shape[-1]), config.patch, sw, sh)


def crop(img: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    return img[..., row : row + size, col : col + size]


def extract_patches(sample: StereoSample, grid: PatchGrid) -> List[StereoSample]:
    """Aligned sub-image pairs at every grid offset, each carrying the full label."""
    if sample.left.shape != sample.right.shape:
        raise UsageError(f"views differ in shape: {sample.left.shape} vs {sample.right.shape}")
    if tuple(sample.left.shape[-2:]) != (grid.height, grid.width):
        raise UsageError("grid was built for a different image size")
    return [
        StereoSample(crop(sample.left, r, c, grid.patch), crop(sample.right, r, c, grid.patch),
                     sample.score, sample.observers, f"{sample.tag}@{r},{c}")
        for r, c in grid.offsets
    ]


def augment(views: Sequence[np.ndarray], rng: np.random.Generator, patch: Optional[int] = None,
            crop_enabled: bool = True, hflip: bool = True, vflip: bool = True) -> Tuple[np.ndarray, ...]:
    """Apply one random crop and one pair of flip decisions to every view alike.

    The random draws happen in a fixed order (crop row, crop col, h, v) so a
    seeded generator reproduces the same transform.
    """
    shape = views[0].shape
    if any(v.shape != shape for v in views):
        raise UsageError("all views must share one shape")
    h, w = shape[-2:]
    size = patch if patch is not None else min(h, w)
    if size > h or size > w:
        raise UsageError(f"patch {size} exceeds source region {h}x{w}")
    row = int(rng.integers(0, h - size + 1)) if crop_enabled else 0
    col = int(rng.integers(0, w - size + 1)) if crop_enabled else 0
    flip_h = hflip and bool(rng.integers(0, 2))
    flip_v = vflip and bool(rng.integers(0, 2))
    out = []
    for v in views:
        v = crop(v, row, col, size)
        if flip_h:
            v = v[..., :, ::-1]
        if flip_v:
            v = v[..., ::-1, :]
        out.append(np.ascontiguousarray(v))
    return tuple(out)


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


class Trace:
    """Training records kept in memory and optionally appended as JSON lines."""

    def __init__(self, path: Optional[str] = None):
        self.records: List[dict] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.write_text("")

    def log(self, **record) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]


@dataclass
class TrainResult:
    model: Module
    trace: Trace
    train_indices: List[int] = field(default_factory=list)
    test_indices: List[int] = field(default_factory=list)


def _run(items: list, config: TrainConfig, optimizer: Adam, lrs: Callable[[int], Dict[str, float]],
         loss_fn: Callable[[list], Tensor], stage: int, trace: Trace, rng: np.random.Generator) -> None:
    step = 0
    for epoch in range(config.epochs):
        rates = lrs(schedule_epoch(epoch, config))
        for group, rate in rates.items():
            optimizer.set_lr(group, rate)
        order = rng.permutation(len(items))
        for start in range(0, len(order), config.batch):
            batch = [items[i] for i in order[start : start + config.batch]]
            optimizer.zero_grad()
            loss = loss_fn(batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"stage {stage}: loss became {value} at step {step}")
            loss.backward()
            optimizer.step()
            trace.log(stage=stage, epoch=epoch, step=step, loss=value, lr=rates)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                return


def _image_patches(images: Sequence[np.ndarray], config: TrainConfig) -> List[np.ndarray]:
    patches = []
    for img in images:
        grid = PatchGrid.for_image(img.shape, config)
        patches += [crop(img, r, c, grid.patch) for r, c in grid.offsets]
    return patches


def _augmenter(config: TrainConfig, rng: np.random.Generator):
    def apply(*views):
        return augment(views, rng, config.patch, config.crop, config.hflip, config.vflip)
    return apply


def pretrain_autoencoder(images: Sequence[np.ndarray], config: Optional[TrainConfig] = None,
                         autoencoder: Optional[Autoencoder] = None) -> TrainResult:
    """Stage 1: fit the encoder-decoder to reconstruct single views."""
    config = config or TrainConfig(stage=1)
    if len(images) == 0:
        raise UsageError("stage 1 needs at least one training image")
    rng = np.random.default_rng(config.seed)
    model = copy.deepcopy(autoencoder) if autoencoder is not None else Autoencoder(np.random.default_rng(config.seed))
    model.train()
    items = _image_patches(images, config)
    aug = _augmenter(config, rng)
    trace = Trace(config.trace_path)
    optimizer = Adam({"w1": model.parameters()}, lr=config.lr)

    def loss_fn(batch):
        x = Tensor(np.stack([aug(p)[0] for p in batch]))
        return reconstruction_loss(x, model(x))

    _run(items, config, optimizer, lambda e: {"w1": pretrain_lr(e, config)}, loss_fn, 1, trace, rng)
    return TrainResult(model.eval(), trace)


def pretrain_regressor_2d(dataset2d: Sequence[Tuple[np.ndarray, float]], config: Optional[TrainConfig] = None,
                          regressor: Optional[Regressor] = None) -> TrainResult:
    """Stage 2: fit the backbone and head to single-image scores (no fusion layer)."""
    config = config or TrainConfig(stage=2)
    if len(dataset2d) == 0:
        raise UsageError("stage 2 needs at least one scored image")
    rng = np.random.default_rng(config.seed)
    if regressor is not None:
        model = copy.deepcopy(regressor)
    else:
        model = Regressor(np.random.default_rng(config.seed), config.backbone)
    model.train()
    items = []
    for img, score in dataset2d:
        items += [(p, float(score)) for p in _image_patches([img], config)]
    aug = _augmenter(config, rng)
    trace = Trace(config.trace_path)
    optimizer = Adam({"w2": model.parameters()}, lr=config.lr)

    def loss_fn(batch):
        x = Tensor(np.stack([aug(p)[0] for p, _ in batch]))
        return score_loss(model(x), [s for _, s in batch])

    _run(items, config, optimizer, lambda e: {"w2": pretrain_lr(e, config)}, loss_fn, 2, trace, rng)
    return TrainResult(model.eval(), trace)


def split_indices(n: int, fraction: float, rng: np.random.Generator) -> Tuple[List[int], List[int]]:
    """Random (train, test) split holding out ``round(n * fraction)`` samples."""
    order = rng.permutation(n)
    n_test = int(round(n * fraction))
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def train_joint(dataset3d: Sequence[StereoSample], config: Optional[TrainConfig] = None,
                autoencoder: Optional[Autoencoder] = None, regressor: Optional[Regressor] = None,
                from_scratch: bool = False) -> TrainResult:
    """Stage 3: optimise the whole network end to end on stereo scores.

    Pretrained stage-1/2 weights are required unless ``from_scratch`` asks for
    a random start explicitly. Inputs are copied, never modified.
    """
    config = config or TrainConfig(stage=3)
    if len(dataset3d) == 0:
        raise UsageError("stage 3 needs at least one stereo sample")
    if not from_scratch and (autoencoder is None or regressor is None):
        raise UsageError("joint training needs pretrained auto-encoder and regressor weights "
                         "(pass from_scratch=True for a random start)")
    rng = np.random.default_rng(config.seed)
    init_rng = np.random.default_rng(config.seed)
    model = PADNet(
        init_rng,
        config.backbone,
        autoencoder=copy.deepcopy(autoencoder) if autoencoder is not None else None,
        regressor=copy.deepcopy(regressor) if regressor is not None else None,
    )
    model.train()
    train_idx, test_idx = split_indices(len(dataset3d), config.val_fraction, rng)
    items = []
    for i in train_idx:
        s = dataset3d[i]
        items += extract_patches(s, PatchGrid.for_image(s.left.shape, config))
    aug = _augmenter(config, rng)
    trace = Trace(config.trace_path)
    optimizer = Adam({g: model.group(g) for g in GROUP_PREFIXES}, lr=config.lr_w3)

    def loss_fn(batch):
        pairs = [aug(s.left, s.right) for s in batch]
        left = Tensor(np.stack([p[0] for p in pairs]))
        right = Tensor(np.stack([p[1] for p in pairs]))
        scores, _ = model(left, right)
        return score_loss(scores, [s.score for s in batch])

    _run(items, config, optimizer, lambda e: joint_lrs(e, config), loss_fn, 3, trace, rng)
    return TrainResult(model.eval(), trace, train_idx, test_idx)


# ----------------------------------------------------------------------------
# Inference and evaluation
# ----------------------------------------------------------------------------


def patch_scores(sample: StereoSample, model: PADNet, grid: PatchGrid) -> List[float]:
    model.eval()
    scores = []
    with no_grad():
        for patch in extract_patches(sample, grid):
            score, _ = model(patch.left, patch.right)
            scores.append(float(score.data[0]))
    return scores


def predict_quality(sample: StereoSample, model: PADNet, grid: Optional[PatchGrid] = None,
                    config: Optional[TrainConfig] = None) -> float:
    """Mean of the per-patch scores over the grid (exact, order-independent sum)."""
    if grid is None:
        grid = PatchGrid.for_image(sample.left.shape, config or TrainConfig())
    scores = patch_scores(sample, model, grid)
    return math.fsum(scores) / len(scores)


def evaluate(samples: Sequence[StereoSample], model: PADNet, config: Optional[TrainConfig] = None,
             krasula: bool = False, higher_is_better: bool = True) -> Tuple[EvalReport, List[float]]:
    """Predict every sample and score the predictions against the labels."""
    config = config or TrainConfig()
    preds = [predict_quality(s, model, config=config) for s in samples]
    observers = None
    if krasula and all(len(s.observers) >= 2 for s in samples):
        observers = [s.observers for s in samples]
    report = evaluate_scores(preds, [s.score for s in samples], observers, higher_is_better)
    return report, preds


def load_model(weights: Dict[str, np.ndarray], backbone: str = "resnet18") -> PADNet:
    model = PADNet(np.random.default_rng(0), backbone)
    model.load_state_dict(weights, strict=True)
    return model.eval()
