"""Dual-stream network: per-stream pre-training, assembly, fine-tuning, CAM.

A *stream* is a small ResNet trunk over either whole coded slices or the
cardiac ROI patches, topped during stage one by its own two-way linear head.
Stage two drops those heads, concatenates the two pooled feature vectors
and trains a fresh linear head together with both trunks.

Class index 0 is "deceased", class 1 "survived"; every probability this
module returns is the survival probability p^s.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .dataset import augment, center_input, resize_bilinear, crop_box
from .hu_coding import ChannelStats, compute_channel_stats, normalize
from .nn import Linear, Module, ResNetTrunk

logger = logging.getLogger(__name__)

DECEASED, SURVIVED = 0, 1


@dataclass
class StreamConfig:
    kind: str = "slice"                 # "slice" or "patch"
    input_size: int = 64
    widths: tuple = (32, 64, 128)
    blocks: tuple = (2, 2, 2)

    def __post_init__(self):
        self.widths, self.blocks = tuple(self.widths), tuple(self.blocks)
        if self.kind not in ("slice", "patch"):
            raise ValueError(f"stream kind must be 'slice' or 'patch', got {self.kind!r}")
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must be non-empty and of equal length")
        if self.input_size < 8:
            raise ValueError("input_size must be at least 8")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


def default_slice_config():
    return StreamConfig("slice", 64, (32, 64, 128), (2, 2, 2))


def default_patch_config():
    return StreamConfig("patch", 64, (16, 32, 64), (2, 2, 2))


@dataclass
class TrainConfig:
    lr: float = 1e-5
    decay_factor: float = 0.9
    decay_every: int = 5
    max_epochs: int = 200
    batch_size: int = 16
    patience: int | None = None        # stop after this many epochs without a new best
    augment: bool = True
    crop_range: tuple = (0.6, 0.8)
    eval_crop: float = 0.7

    def __post_init__(self):
        self.crop_range = tuple(self.crop_range)
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")


@dataclass
class TrainRecord:
    stage: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    def epochs_to_reach(self, target: float):
        """First epoch whose validation loss is <= target, or None."""
        for e, v in enumerate(self.val_loss):
            if v <= target:
                return e
        return None

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------- models

class StreamNet(Module):
    """Stage-one network: one trunk plus its own two-way head."""

    def __init__(self, config: StreamConfig, rng):
        super().__init__()
        self.config = config
        self.trunk = self.add_module("trunk", ResNetTrunk(3, config.widths, config.blocks, rng))
        self.head = self.add_module("head", Linear(config.feature_dim, 2, rng))

    def forward(self, x):
        return self.head(self.trunk(x))


class DsnModel(Module):
    """Slice trunk + patch trunk, pooled features concatenated into one head."""

    def __init__(self, slice_config: StreamConfig, patch_config: StreamConfig, rng):
        super().__init__()
        if slice_config.kind != "slice" or patch_config.kind != "patch":
            raise ValueError("DSN needs one slice stream and one patch stream")
        self.slice_config, self.patch_config = slice_config, patch_config
        self.slice_trunk = self.add_module("slice_trunk", ResNetTrunk(3, slice_config.widths, slice_config.blocks, rng))
        self.patch_trunk = self.add_module("patch_trunk", ResNetTrunk(3, patch_config.widths, patch_config.blocks, rng))
        self.head = self.add_module("head", Linear(self.head_width, 2, rng))

    @property
    def head_width(self) -> int:
        return self.slice_config.feature_dim + self.patch_config.feature_dim

    def features(self, xs, xp):
        return ad.concat([self.slice_trunk(xs), self.patch_trunk(xp)], axis=1)

    def forward(self, xs, xp):
        return self.head(self.features(xs, xp))


def build_stream(config: StreamConfig, seed) -> StreamNet:
    return StreamNet(config, np.random.default_rng(np.random.SeedSequence([_seed(seed), 11])))


def assemble_dsn(slice_trunk: ResNetTrunk, patch_trunk: ResNetTrunk, slice_config: StreamConfig,
                 patch_config: StreamConfig, seed) -> DsnModel:
    """Copy two trunks bit-exactly into a DSN with a freshly initialized head."""
    model = DsnModel(slice_config, patch_config, np.random.default_rng(np.random.SeedSequence([_seed(seed), 23])))
    for name, trunk, cfg in (("slice", slice_trunk, slice_config), ("patch", patch_trunk, patch_config)):
        if trunk.out_channels != cfg.feature_dim:
            raise ValueError(f"{name} trunk yields {trunk.out_channels} features but config says {cfg.feature_dim}")
    if model.head.in_features != slice_trunk.out_channels + patch_trunk.out_channels:
        raise ValueError("head width does not match the concatenated feature dimension")
    model.slice_trunk.load_state_dict(slice_trunk.state_dict())
    model.patch_trunk.load_state_dict(patch_trunk.state_dict())
    return model


def _seed(seed) -> int:
    return int(seed) & 0xFFFFFFFF


# ------------------------------------------------------------------- inputs

@dataclass
class InputStats:
    slice: ChannelStats
    patch: ChannelStats

    def to_dict(self):
        return {"slice": self.slice.to_dict(), "patch": self.patch.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(ChannelStats.from_dict(d["slice"]), ChannelStats.from_dict(d["patch"]))


def fit_input_stats(subjects) -> InputStats:
    """Channel statistics of the training subjects' coded slices and patches."""
    return InputStats(
        slice=compute_channel_stats(img for s in subjects for img in s.slices),
        patch=compute_channel_stats(img for s in subjects for img in s.patches),
    )


def _images(subject, kind):
    return subject.slices if kind == "slice" else subject.patches


def eval_inputs(subjects, kind, size, stats: ChannelStats, crop=0.7):
    """Deterministic (centre crop) inputs, three per subject, subject-major."""
    out = np.empty((3 * len(subjects), 3, size, size), dtype=np.float32)
    for i, s in enumerate(subjects):
        for k, img in enumerate(_images(s, kind)):
            out[3 * i + k] = normalize(center_input(img, size, crop), stats)
    return out


def train_inputs(subjects, samples, kind, size, stats, rng, cfg: TrainConfig):
    out = np.empty((len(samples), 3, size, size), dtype=np.float32)
    for j, (si, k) in enumerate(samples):
        img = _images(subjects[si], kind)[k]
        if cfg.augment:
            arr, _ = augment(img, rng, size, cfg.crop_range)
        else:
            arr = center_input(img, size, cfg.eval_crop)
        out[j] = normalize(arr, stats)
    return out


def _labels_per_image(subjects):
    return np.repeat(np.array([s.label for s in subjects]), 3)


# ----------------------------------------------------------------- training

def _check_sets(train, val):
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    if len({s.label for s in train}) < 2:
        raise ValueError("training set contains a single class")
    if {s.subject_id for s in train} & {s.subject_id for s in val}:
        raise ValueError("training and validation subjects overlap")


def _batched_probs(model, inputs, batch=64):
    model.eval()
    outs = []
    n = inputs[0].shape[0]
    for lo in range(0, n, batch):
        logits = model(*(ad.Tensor(x[lo:lo + batch]) for x in inputs))
        outs.append(ad.softmax(logits).data)
    return np.concatenate(outs, axis=0)


def _loss_value(probs, labels) -> float:
    return float(ad.cross_entropy(ad.Tensor(probs.astype(np.float64), dtype=np.float64), labels).data)


def _fit(model, kinds, train, val, stats: InputStats, sizes, cfg: TrainConfig, seed, stage):
    _check_sets(train, val)
    rng = np.random.default_rng(np.random.SeedSequence([_seed(seed), 31 + stage]))
    samples = [(i, k) for i in range(len(train)) for k in range(3)]
    labels = _labels_per_image(train)
    val_x = [eval_inputs(val, kind, sizes[kind], getattr(stats, kind), cfg.eval_crop) for kind in kinds]
    val_y = _labels_per_image(val)
    opt = ad.Adam(model.named_parameters(), lr=cfg.lr, decay_factor=cfg.decay_factor, decay_every=cfg.decay_every)
    record = TrainRecord(stage=stage)
    best_state, best_loss, since_best = None, np.inf, 0
    for epoch in range(cfg.max_epochs):
        opt.set_epoch(epoch)
        model.train()
        order = rng.permutation(len(samples))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = [samples[i] for i in idx]
            xs = [ad.Tensor(train_inputs(train, batch, kind, sizes[kind], getattr(stats, kind), rng, cfg))
                  for kind in kinds]
            loss = ad.cross_entropy(ad.softmax(model(*xs)), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        val_loss = _loss_value(_batched_probs(model, val_x), val_y)
        record.train_loss.append(total / len(samples))
        record.val_loss.append(val_loss)
        record.lr.append(opt.effective_lr(epoch))
        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, model.state_dict(), 0
            record.best_epoch = epoch
        else:
            since_best += 1
        logger.debug("stage %d epoch %d train %.4f val %.4f", stage, epoch, record.train_loss[-1], val_loss)
        if cfg.patience is not None and since_best >= cfg.patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return record


def train_stream(config: StreamConfig, train, val, seed, cfg: TrainConfig, stats: InputStats | None = None):
    """Stage one: train one stream with its own head; best-validation snapshot."""
    stats = stats or fit_input_stats(train)
    net = build_stream(config, seed)
    record = _fit(net, [config.kind], train, val, stats, {config.kind: config.input_size}, cfg, seed, stage=1)
    return net, record


def train_dsn(model: DsnModel, train, val, seed, cfg: TrainConfig, stats: InputStats | None = None):
    """Stage two: fine-tune the whole DSN (nothing frozen)."""
    stats = stats or fit_input_stats(train)
    sizes = {"slice": model.slice_config.input_size, "patch": model.patch_config.input_size}
    record = _fit(model, ["slice", "patch"], train, val, stats, sizes, cfg, seed, stage=2)
    return model, record


# --------------------------------------------------------------- inference

def stream_probabilities(net: StreamNet, subjects, stats: InputStats, crop=0.7):
    """(n_subjects, 3) survival probabilities of a single stream."""
    kind = net.config.kind
    x = eval_inputs(subjects, kind, net.config.input_size, getattr(stats, kind), crop)
    return _batched_probs(net, [x])[:, SURVIVED].reshape(len(subjects), 3)


def dsn_probabilities(model: DsnModel, subjects, stats: InputStats, crop=0.7):
    """(n_subjects, 3) survival probabilities, same-index slice/patch pairs."""
    xs = eval_inputs(subjects, "slice", model.slice_config.input_size, stats.slice, crop)
    xp = eval_inputs(subjects, "patch", model.patch_config.input_size, stats.patch, crop)
    return _batched_probs(model, [xs, xp])[:, SURVIVED].reshape(len(subjects), 3)


def subject_probability(per_slice) -> np.ndarray:
    """Subject score: mean survival probability over its three slices."""
    return np.asarray(per_slice, dtype=np.float64).mean(axis=-1)


def predict_subject(model, subject, stats: InputStats, crop=0.7) -> float:
    if isinstance(model, DsnModel):
        probs = dsn_probabilities(model, [subject], stats, crop)
    else:
        probs = stream_probabilities(model, [subject], stats, crop)
    return float(subject_probability(probs)[0])


# --------------------------------------------------------------------- CAM

def compute_cam(model, patch_input, class_index=DECEASED, upsample=True):
    """Class activation map over the patch stream's final feature maps.

    ``patch_input`` is one normalized (3, H, W) network input. Returns the
    min-max normalized map, bilinearly upsampled to (H, W) unless
    ``upsample`` is False.
    """
    if class_index not in (0, 1):
        raise ValueError("class_index must be 0 or 1")
    if isinstance(model, DsnModel):
        trunk = model.patch_trunk
        d_s = model.slice_config.feature_dim
        weights = model.head.weight.data[class_index, d_s:]
    elif isinstance(model, StreamNet) and model.config.kind == "patch":
        trunk, weights = model.trunk, model.head.weight.data[class_index]
    else:
        raise ValueError("CAM needs a DSN or a patch stream")
    model.eval()
    x = np.asarray(patch_input, dtype=np.float32)[None]
    fmap = trunk.features(ad.Tensor(x)).data[0].astype(np.float64)
    if not np.any(weights):
        warnings.warn("head weights are all zero (untrained model?); CAM is constant", RuntimeWarning)
    cam = np.tensordot(weights.astype(np.float64), fmap, axes=(0, 0))
    lo, hi = cam.min(), cam.max()
    cam = (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)
    if upsample:
        cam = resize_bilinear(cam, x.shape[2], x.shape[3])
    return cam


def input_mask(mask, size, crop=0.7):
    """Map a patch-frame boolean mask into the centre-cropped network input frame."""
    h, w = mask.shape
    y, x, side = crop_box(h, w, crop)
    resized = resize_bilinear(mask[y:y + side, x:x + side].astype(np.float64), size, size)
    return resized >= 0.5


# -------------------------------------------------------------- checkpoints

def save_model(model, path, stats: InputStats, stage: int, extra=None) -> None:
    meta = {"stage": stage, "stats": stats.to_dict(), "extra": extra or {}}
    if isinstance(model, DsnModel):
        meta.update(model="dsn", slice_config=asdict(model.slice_config), patch_config=asdict(model.patch_config))
    else:
        meta.update(model="stream", config=asdict(model.config))
    checkpoint.save(path, model.state_dict(), meta)


def load_model(path):
    """Returns ``(model, stats, meta)``."""
    tensors, meta = checkpoint.load(path)
    rng = np.random.default_rng(0)
    if meta.get("model") == "dsn":
        model = DsnModel(StreamConfig(**meta["slice_config"]), StreamConfig(**meta["patch_config"]), rng)
    elif meta.get("model") == "stream":
        model = StreamNet(StreamConfig(**meta["config"]), rng)
    else:
        raise checkpoint.CheckpointError(f"unknown model type {meta.get('model')!r}")
    model.load_state_dict(tensors)
    model.eval()
    return model, InputStats.from_dict(meta["stats"]), meta


def cam_contrast(model, subject, stats: InputStats, slice_index=1, class_index=DECEASED, crop=0.7):
    """Mean CAM inside and outside the planted calcification of one subject's patch.

    Returns ``(inside, outside)``, or None when no calcification survives
    the evaluation crop.
    """
    size = model.patch_config.input_size if isinstance(model, DsnModel) else model.config.input_size
    mask = input_mask(subject.calc_masks[slice_index], size, crop)
    if not mask.any() or mask.all():
        return None
    x = normalize(center_input(subject.patches[slice_index], size, crop), stats.patch)
    cam = compute_cam(model, x, class_index)
    return float(cam[mask].mean()), float(cam[~mask].mean())
