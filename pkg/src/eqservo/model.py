"""The Siamese representation: image feature extractor, pose-conditioned
feature transformer, equivariance and geodesic-preservation losses, and the
training loop.

The extractor maps an image to an n-dimensional feature.  The transformer
takes a feature together with a 7-vector pose encoding (translation +
quaternion, the over-parametrized form of the reduced transform) and
predicts the feature of the transformed view as a residual update, so a
freshly initialized transformer is the identity map on features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np

from . import autodiff as ad
from .autodiff import AdamConfig, Tensor
from .geom import RelTransform, UnitQuaternion, transform_norm
from .imaging import Image


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the desk-scale encoder.

    Three stride-2 convolutions followed by a 3-layer MLP head; the
    transformer is a 2-layer MLP applied to [feature ; pose7].
    """

    image_size: int = 64
    conv_channels: tuple = (16, 32, 64)
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    head_widths: tuple = (256, 128)
    feature_dim: int = 64
    transformer_widths: tuple = (192, 192)

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature dimension must be at least 8")
        if len(self.conv_channels) != 3:
            raise ValueError("encoder uses exactly three convolution layers")
        if self.spatial_after_convs() < 1:
            raise ValueError(f"image size {self.image_size} too small for the conv stack")

    def spatial_after_convs(self) -> int:
        s = self.image_size
        for _ in self.conv_channels:
            s = (s + 2 * self.padding - self.kernel) // self.stride + 1
        return s

    def flat_width(self) -> int:
        return self.conv_channels[-1] * self.spatial_after_convs() ** 2

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "head_widths": list(self.head_widths),
            "feature_dim": self.feature_dim,
            "transformer_widths": list(self.transformer_widths),
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(
            image_size=int(d["image_size"]),
            conv_channels=tuple(d["conv_channels"]),
            kernel=int(d["kernel"]),
            stride=int(d["stride"]),
            padding=int(d["padding"]),
            head_widths=tuple(d["head_widths"]),
            feature_dim=int(d["feature_dim"]),
            transformer_widths=tuple(d["transformer_widths"]),
        )


@dataclass
class Model:
    """Extractor parameters (prefix "f.") and transformer parameters ("h.")."""

    config: EncoderConfig
    params: dict

    def extractor_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("f.")}

    def transformer_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("h.")}


@dataclass(frozen=True)
class LossWeights:
    """lam balances equivariance vs geodesic terms; c is feature units per radian."""

    lam: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.c <= 0:
            raise ValueError("geodesic scale c must be positive")


@dataclass
class TrainBatch:
    """Aligned source/target image stacks with their relative transforms."""

    src: np.ndarray  # (B, 3, H, W) float32
    tar: np.ndarray  # (B, 3, H, W) float32
    pose: np.ndarray  # (B, 7) pose encodings
    norm: np.ndarray  # (B,) transform magnitudes

    def __post_init__(self):
        if not (len(self.src) == len(self.tar) == len(self.pose) == len(self.norm)):
            raise ValueError("batch arrays must have matching lengths")


@dataclass
class EpochStats:
    epoch: int
    loss_equi: float
    loss_geo: float
    loss_total: float


def _he(rng, fan_in, shape, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_model(config: EncoderConfig, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    k, cc = config.kernel, config.conv_channels
    p: dict = {}
    in_ch = 3
    for i, out_ch in enumerate(cc, start=1):
        p[f"f.conv{i}_w"] = _he(rng, in_ch * k * k, (out_ch, in_ch, k, k))
        p[f"f.conv{i}_b"] = np.zeros(out_ch, dtype=np.float32)
        in_ch = out_ch
    widths = (config.flat_width(),) + tuple(config.head_widths) + (config.feature_dim,)
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        p[f"f.fc{i}_w"] = _he(rng, w_in, (w_in, w_out))
        p[f"f.fc{i}_b"] = np.zeros(w_out, dtype=np.float32)
    n = config.feature_dim
    t_widths = (n + 7,) + tuple(config.transformer_widths) + (n,)
    last = len(t_widths) - 1
    for i, (w_in, w_out) in enumerate(zip(t_widths[:-1], t_widths[1:]), start=1):
        if i == last:
            # Zero-initialized output layer: the residual starts as the identity map.
            p[f"h.fc{i}_w"] = np.zeros((w_in, w_out), dtype=np.float32)
        else:
            p[f"h.fc{i}_w"] = _he(rng, w_in, (w_in, w_out))
        p[f"h.fc{i}_b"] = np.zeros(w_out, dtype=np.float32)
    return Model(config, p)


def _tensors(params: dict, requires_grad: bool) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def calibrate_feature_scale(model: Model, images: np.ndarray, target_spread: float) -> float:
    """Scale the final extractor layer so features start at a useful spread.

    The geodesic target distances are c * angle; a freshly initialized encoder
    maps all views to nearly the same feature, which leaves both losses
    without a usable gradient.  Scaling the last layer so that the mean
    pairwise feature distance over `images` matches `target_spread` puts the
    two losses on the same footing from step one.  Returns the applied gain.
    """
    if target_spread <= 0:
        raise ValueError("target spread must be positive")
    sample = images[: min(len(images), 128)]
    z = extract_batch(model, sample)
    diffs = z[:, None, :] - z[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=2))
    spread = float(dist[np.triu_indices(len(z), 1)].mean())
    if spread <= 1e-9:
        raise ValueError("degenerate initial features; cannot calibrate")
    gain = target_spread / spread
    n_fc = len(model.config.head_widths) + 1
    model.params[f"f.fc{n_fc}_w"] = model.params[f"f.fc{n_fc}_w"] * np.float32(gain)
    model.params[f"f.fc{n_fc}_b"] = model.params[f"f.fc{n_fc}_b"] * np.float32(gain)
    return gain


def _extractor_forward(t: dict, x: Tensor, config: EncoderConfig) -> Tensor:
    s, pad = config.stride, config.padding
    h = x
    for i in range(1, 4):
        h = ad.conv2d(h, t[f"f.conv{i}_w"], stride=s, padding=pad)
        b = ad.reshape(t[f"f.conv{i}_b"], (1, t[f"f.conv{i}_b"].shape[0], 1, 1))
        h = ad.relu(ad.add(h, b))
    h = ad.reshape(h, (h.shape[0], config.flat_width()))
    n_fc = len(config.head_widths) + 1
    for i in range(1, n_fc + 1):
        h = ad.add(ad.matmul(h, t[f"f.fc{i}_w"]), t[f"f.fc{i}_b"])
        if i < n_fc:
            h = ad.relu(h)
    return h


def _transformer_forward(t: dict, z: Tensor, pose: Tensor) -> Tensor:
    n_layers = sum(1 for k in t if k.startswith("h.fc") and k.endswith("_w"))
    h = ad.concat([z, pose], axis=1)
    for i in range(1, n_layers + 1):
        h = ad.add(ad.matmul(h, t[f"h.fc{i}_w"]), t[f"h.fc{i}_b"])
        if i < n_layers:
            h = ad.relu(h)
    return ad.add(z, h)


def _check_image_batch(model: Model, arr: np.ndarray) -> np.ndarray:
    size = model.config.image_size
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != size or arr.shape[3] != size:
        raise ValueError(f"expected image batch (B, 3, {size}, {size}), got {arr.shape}")
    return arr.astype(np.float32, copy=False)


def image_to_input(img: Image) -> np.ndarray:
    """(H, W, 3) image to a (3, H, W) network input."""
    return np.ascontiguousarray(img.data.transpose(2, 0, 1), dtype=np.float32)


def extract_batch(model: Model, images: np.ndarray) -> np.ndarray:
    x = Tensor(_check_image_batch(model, images))
    t = _tensors(model.params, requires_grad=False)
    return _extractor_forward(t, x, model.config).data


def extract(model: Model, img: Image) -> np.ndarray:
    """Feature vector of a single image."""
    if img.height != model.config.image_size or img.width != model.config.image_size:
        raise ValueError(
            f"image is {img.width}x{img.height}, model expects {model.config.image_size}"
        )
    return extract_batch(model, image_to_input(img)[None])[0]


def pose_to_vec(p: RelTransform) -> np.ndarray:
    """(tx, ty, tz, qw, qx, qy, qz); the quaternion sign is canonical (w >= 0)."""
    return np.concatenate([p.t, p.q.as_array()]).astype(np.float64)


def vec_to_pose(v, reduced: bool) -> RelTransform:
    v = np.asarray(v, dtype=np.float64).reshape(7)
    n = float(np.linalg.norm(v[3:]))
    if n < 1e-12:
        raise ValueError("zero quaternion in pose vector")
    q = UnitQuaternion(v[3] / n, v[4] / n, v[5] / n, v[6] / n)
    return RelTransform(q, v[:3], reduced)


def transform_feature(model: Model, feat: np.ndarray, p: RelTransform) -> np.ndarray:
    """Predicted feature of the view reached by applying p."""
    z = Tensor(np.asarray(feat, dtype=np.float32).reshape(1, -1))
    pose = Tensor(pose_to_vec(p).astype(np.float32).reshape(1, 7))
    t = _tensors(model.params, requires_grad=False)
    return _transformer_forward(t, z, pose).data[0]


def _loss_graph(
    t: dict,
    batch: TrainBatch,
    weights: LossWeights,
    config: EncoderConfig,
    extra_pose: np.ndarray | None = None,
    extra_norm: np.ndarray | None = None,
):
    """Equivariance + geodesic losses.

    The geodesic term needs only a source feature and a transform, so it can
    additionally be evaluated at `extra_pose` transforms (applied to the batch
    source features cyclically).  That pins the displacement-magnitude field
    over the whole rotation space instead of only at the data pairs, which
    keeps the inference objective free of spurious far-from-truth minima.
    """
    z_src = _extractor_forward(t, Tensor(batch.src), config)
    z_tar = _extractor_forward(t, Tensor(batch.tar), config)
    z_pred = _transformer_forward(t, z_src, Tensor(batch.pose.astype(np.float32)))
    B = len(batch.src)

    diff = ad.sub(z_tar, z_pred)
    l_equi = ad.scale(ad.reduce_sum(ad.mul(diff, diff)), 1.0 / B)

    disp = ad.sub(z_pred, z_src)
    dist = ad.sqrt(ad.reduce_sum(ad.mul(disp, disp), axis=1))
    target = Tensor((weights.c * batch.norm).astype(np.float32))
    geo_sum = ad.reduce_sum(ad.absolute(ad.sub(dist, target)))
    geo_count = B
    if extra_pose is not None and len(extra_pose):
        rows = np.arange(len(extra_pose)) % B
        # Detached: the extras pin the transformer's displacement field only;
        # gradients into the extractor would fight the pair supervision.
        z_rows = Tensor(z_src.data[rows])
        z_extra = _transformer_forward(t, z_rows, Tensor(extra_pose.astype(np.float32)))
        disp_x = ad.sub(z_extra, z_rows)
        dist_x = ad.sqrt(ad.reduce_sum(ad.mul(disp_x, disp_x), axis=1))
        target_x = Tensor((weights.c * extra_norm).astype(np.float32))
        geo_sum = ad.add(geo_sum, ad.reduce_sum(ad.absolute(ad.sub(dist_x, target_x))))
        geo_count += len(extra_pose)
    l_geo = ad.scale(geo_sum, 1.0 / geo_count)

    total = ad.add(l_equi, ad.scale(l_geo, weights.lam))
    return total, l_equi, l_geo


def _selection_matrix(rows: np.ndarray, n: int) -> np.ndarray:
    sel = np.zeros((len(rows), n), dtype=np.float32)
    sel[np.arange(len(rows)), rows] = 1.0
    return sel


def random_reduced_transforms(rng: np.random.Generator, count: int):
    """Rotations with axis uniform on the sphere and angle uniform on [0, pi]."""
    poses = np.zeros((count, 7))
    norms = np.zeros(count)
    for i in range(count):
        axis = _random_axis(rng)
        angle = float(rng.uniform(0.0, math.pi))
        q = UnitQuaternion.from_axis_angle(axis, angle)
        poses[i] = np.concatenate([np.zeros(3), q.as_array()])
        norms[i] = angle
    return poses, norms


def _random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    while n < 1e-9:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
    return v / n


def equivariance_loss(model: Model, batch: TrainBatch) -> float:
    """Mean over the batch of || f(I_tar) - h(f(I_src), p) ||^2."""
    t = _tensors(model.params, requires_grad=False)
    _, l_equi, _ = _loss_graph(t, batch, LossWeights(), model.config)
    return l_equi.item()


def geodesic_loss(model: Model, batch: TrainBatch, c: float) -> float:
    """Mean over the batch of | ||h(f(I), p) - f(I)|| - c * ||p|| |."""
    if c <= 0:
        raise ValueError("geodesic scale c must be positive")
    t = _tensors(model.params, requires_grad=False)
    _, _, l_geo = _loss_graph(t, batch, LossWeights(c=c), model.config)
    return l_geo.item()


def total_loss(model: Model, batch: TrainBatch, weights: LossWeights) -> float:
    t = _tensors(model.params, requires_grad=False)
    total, _, _ = _loss_graph(t, batch, weights, model.config)
    return total.item()


@dataclass
class TrainingData:
    """In-memory pair dataset: image stack plus (src, tar) index pairs."""

    images: np.ndarray  # (N, 3, H, W) float32
    pair_indices: np.ndarray  # (M, 2) int
    pose_vecs: np.ndarray  # (M, 7)
    norms: np.ndarray  # (M,)
    intrinsics: np.ndarray | None = None  # (fx, fy, cx, cy), needed for roll augmentation

    def __len__(self) -> int:
        return len(self.pair_indices)

    def batch(self, idx) -> TrainBatch:
        sel = self.pair_indices[idx]
        return TrainBatch(
            src=self.images[sel[:, 0]],
            tar=self.images[sel[:, 1]],
            pose=self.pose_vecs[idx],
            norm=self.norms[idx],
        )


def _roll_image(chw: np.ndarray, delta: float, intr: np.ndarray) -> np.ndarray:
    """Image seen by the same camera rolled by delta about its optical axis.

    For centered views this is an exact 2D rotation about the principal
    point (bilinear resampling aside), so it manufactures new supervised
    pairs without rendering.
    """
    fx, fy, cx, cy = intr
    c, s = math.cos(delta), math.sin(delta)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    Kinv = np.array([[1 / fx, 0, -cx / fx], [0, 1 / fy, -cy / fy], [0, 0, 1.0]])
    from .imaging import Image, warp

    rotated = warp(Image(chw.transpose(1, 2, 0)), K @ Rz @ Kinv)
    return np.ascontiguousarray(rotated.data.transpose(2, 0, 1), dtype=np.float32)


def _invert_pose_vec(v: np.ndarray) -> np.ndarray:
    q = UnitQuaternion(v[3], v[4], v[5], v[6]).conjugate()
    R_inv = q.to_matrix()
    return np.concatenate([-(R_inv @ v[:3]), q.as_array()])


def _roll_quat(delta: float) -> UnitQuaternion:
    return UnitQuaternion.from_axis_angle([0.0, 0.0, 1.0], delta)


def augmented_batch(data: TrainingData, idx, rng: np.random.Generator) -> TrainBatch:
    """Pair reversal plus camera-roll augmentation on both branch images.

    Rolling the target camera by d maps p to Rz(d) * p; rolling the source by
    d maps p to p * Rz(d)^-1.  Both rolled images come from exact in-plane
    rotations of the stored centered views.
    """
    if data.intrinsics is None:
        raise ValueError("roll augmentation needs camera intrinsics in TrainingData")
    sel = data.pair_indices[idx]
    src = data.images[sel[:, 0]].copy()
    tar = data.images[sel[:, 1]].copy()
    poses = data.pose_vecs[idx].copy()
    flips = rng.uniform(size=len(idx)) < 0.5
    deltas = rng.uniform(-math.pi, math.pi, size=(len(idx), 2))
    do_roll = rng.uniform(size=len(idx)) < 0.5
    norms = np.empty(len(idx))
    for k in range(len(idx)):
        if flips[k]:
            src[k], tar[k] = tar[k].copy(), src[k].copy()
            poses[k] = _invert_pose_vec(poses[k])
        q = UnitQuaternion(*poses[k][3:])
        t = poses[k][:3]
        if do_roll[k]:
            d_src, d_tar = deltas[k]
            src[k] = _roll_image(src[k], d_src, data.intrinsics)
            tar[k] = _roll_image(tar[k], d_tar, data.intrinsics)
            roll_tar = _roll_quat(d_tar)
            q = roll_tar * q * _roll_quat(d_src).conjugate()
            t = roll_tar.to_matrix() @ t
        poses[k] = np.concatenate([t, q.as_array()])
        norms[k] = q.angle() + float(np.linalg.norm(t))
    return TrainBatch(src, tar, poses, norms)


def batch_from_pairs(pairs, reduced: bool = True) -> TrainBatch:
    """Assemble a batch from (src Image, tar Image, RelTransform) triples."""
    src = np.stack([image_to_input(s) for s, _, _ in pairs])
    tar = np.stack([image_to_input(t) for _, t, _ in pairs])
    pose = np.stack([pose_to_vec(p) for _, _, p in pairs])
    norm = np.array([transform_norm(p) for _, _, p in pairs])
    return TrainBatch(src, tar, pose, norm)


def train(
    model: Model,
    dataset: TrainingData,
    epochs: int,
    weights: LossWeights,
    optimizer_config=None,
    seed: int = 0,
    batch_size: int = 32,
    pairs_per_epoch: int | None = None,
    geodesic_extras: int = 0,
    augment: bool = False,
    log=None,
) -> list[EpochStats]:
    """Train the shared-extractor Siamese model in place.

    Both branches use the same extractor parameters by construction.  With a
    fixed seed and single-threaded math the run is reproducible bit for bit.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    opt = optimizer_config or AdamConfig(lr=1e-3)
    state = ad.init_optimizer_state(model.params, opt)
    rng = np.random.default_rng(seed)
    stats: list[EpochStats] = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        if pairs_per_epoch is not None:
            order = order[:pairs_per_epoch]
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) == 0:
                continue
            extra_pose = extra_norm = None
            if geodesic_extras > 0:
                extra_pose, extra_norm = random_reduced_transforms(rng, geodesic_extras)
            batch = augmented_batch(dataset, idx, rng) if augment else dataset.batch(idx)
            t = _tensors(model.params, requires_grad=True)
            total, l_equi, l_geo = _loss_graph(
                t, batch, weights, model.config, extra_pose, extra_norm
            )
            grads = ad.gradients(total, t)
            ad.optimizer_step(model.params, grads, state, opt)
            sums += (l_equi.item(), l_geo.item(), total.item())
            n_batches += 1
        ep = EpochStats(epoch, *(sums / max(n_batches, 1)))
        stats.append(ep)
        if log is not None:
            log(ep)
    return stats
