"""Pairwise-relationship embedding network, trained from scratch in numpy.

Architecture: three 3x3 stride-1 convolutions (ReLU + batch norm after
each, 2x max-pool between the second and third), three pointwise 1x1
projections (ReLU + batch norm), then a linear map to the embedding
dimension followed by global average pooling ("gap" head) or a dense
layer on the flattened grid ("fc" head). Pair distance is the L1 norm
between the two embeddings; training minimizes the contrastive margin
loss with plain SGD + momentum and exact hand-derived gradients.

Batch norm is degenerate at batch size 1, so both training and inference
normalize with exponential running statistics (momentum 0.9); training
updates them from each sample's spatial statistics and treats them as
constants in the gradient, inference freezes them. Training and inference
therefore see the same normalization once the statistics settle.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import RoiFeature, iou_matrix
from .scene import Scene

BN_EPS = 1e-2
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class EmbedConfig:
    in_channels: int = 8
    width: int = 32  # paper-scale would be 512
    embedding_dim: int = 50
    roi_size: int = 14
    head: str = "gap"  # "gap" or "fc"

    def __post_init__(self):
        if self.roi_size % 2 != 0:
            raise ValueError("roi_size must be even (one 2x pool)")
        if self.head not in ("gap", "fc"):
            raise ValueError(f"head must be 'gap' or 'fc', got {self.head!r}")

    @property
    def pooled_size(self) -> int:
        return self.roi_size // 2


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 1
    margin: float = 1.0
    epochs: int = 10
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if min(self.learning_rate, self.momentum, self.weight_decay) < 0 or self.margin <= 0:
            raise ValueError("training hyperparameters must be non-negative, margin positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


@dataclass
class DistanceMatrix:
    """Sparse symmetric pair distances for one image, keyed (i, j) with i < j."""

    image_id: str
    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    def put(self, i: int, j: int, dist: float) -> None:
        if i == j:
            raise ValueError("diagonal entries are not stored")
        if not np.isfinite(dist) or dist < 0:
            raise ValueError(f"distance must be finite and >= 0, got {dist}")
        self.entries[(min(i, j), max(i, j))] = float(dist)

    def get(self, i: int, j: int) -> float | None:
        return self.entries.get((min(i, j), max(i, j)))

    def dense(self, n: int) -> np.ndarray:
        """(n, n) matrix with NaN where no entry exists."""
        out = np.full((n, n), np.nan)
        for (i, j), d in self.entries.items():
            out[i, j] = d
            out[j, i] = d
        return out


# ---------------------------------------------------------------------------
# layer primitives (single sample, C x H x W)

def _conv3x3_forward(x, w, b):
    cout, cin, _, _ = w.shape
    _, hh, ww = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(hh * ww, cin * 9)
    out = cols @ w.reshape(cout, cin * 9).T + b
    return out.reshape(hh, ww, cout).transpose(2, 0, 1), cols


def _conv3x3_backward(dout, cols, w, x_shape):
    cout, cin, _, _ = w.shape
    cc, hh, ww = x_shape
    dflat = dout.transpose(1, 2, 0).reshape(hh * ww, cout)
    dw = (dflat.T @ cols).reshape(cout, cin, 3, 3)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(cout, cin * 9)).reshape(hh, ww, cin, 3, 3)
    dxp = np.zeros((cc, hh + 2, ww + 2))
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + hh, dx : dx + ww] += dcols[:, :, :, dy, dx].transpose(2, 0, 1)
    return dxp[:, 1:-1, 1:-1], dw, db


def _pointwise_forward(x, w, b):
    # 1x1 convolution: (Cout, Cin) weight applied at every spatial location
    out = np.einsum("oc,chw->ohw", w, x) + b[:, None, None]
    return out


def _pointwise_backward(dout, x, w):
    dw = np.einsum("ohw,chw->oc", dout, x)
    db = dout.sum(axis=(1, 2))
    dx = np.einsum("oc,ohw->chw", w, dout)
    return dx, dw, db


def _bn_forward(x, gamma, beta, rmean, rvar):
    """Normalize with running statistics (constants w.r.t. the gradient)."""
    inv = 1.0 / np.sqrt(rvar + BN_EPS)
    xhat = (x - rmean[:, None, None]) * inv[:, None, None]
    return gamma[:, None, None] * xhat + beta[:, None, None], (xhat, inv)


def _bn_backward(dout, cache, gamma):
    xhat, inv = cache
    dgamma = (dout * xhat).sum(axis=(1, 2))
    dbeta = dout.sum(axis=(1, 2))
    dx = dout * (gamma * inv)[:, None, None]
    return dx, dgamma, dbeta


def _maxpool2_forward(x):
    c, h, w = x.shape
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    am = win.argmax(axis=-1)  # tie -> first element
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    return out, am


def _maxpool2_backward(dout, am, x_shape):
    c, h, w = x_shape
    dwin = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, am[..., None], dout[..., None], axis=-1)
    return dwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


# ---------------------------------------------------------------------------
# model

_BN_LAYERS = ("bn1", "bn2", "bn3", "bn4", "bn5", "bn6")


class EmbeddingModel:
    """Holds all parameters and running batch-norm statistics.

    ``param_names`` fixes the declaration order used by checkpoints and by
    the gradient structures returned from :func:`backward`.
    """

    def __init__(self, config: EmbedConfig = EmbedConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c_in, w = config.in_channels, config.width
        emb = config.embedding_dim
        p = config.pooled_size

        self.params: dict[str, np.ndarray] = {}

        def uniform(shape, fan_in):
            # He-style bound; keeps activation scale roughly constant through
            # the relu stack so embedding distances start at a usable size
            limit = np.sqrt(6.0 / fan_in)
            return rng.uniform(-limit, limit, size=shape)

        def add_conv(name, cout, cin, k):
            self.params[f"{name}_w"] = uniform((cout, cin, k, k) if k > 1 else (cout, cin), cin * k * k)
            self.params[f"{name}_b"] = np.zeros(cout)

        add_conv("conv1", w, c_in, 3)
        self._add_bn("bn1", w)
        add_conv("conv2", w, w, 3)
        self._add_bn("bn2", w)
        add_conv("conv3", w, w, 3)
        self._add_bn("bn3", w)
        add_conv("fc1", w, w, 1)
        self._add_bn("bn4", w)
        add_conv("fc2", w, w, 1)
        self._add_bn("bn5", w)
        add_conv("fc3", w, w, 1)
        self._add_bn("bn6", w)
        # the head starts at a tenth of the usual bound so initial pair
        # distances sit inside the contrastive margin; with everything beyond
        # the margin the hinge is silent and similar pairs drag the whole
        # embedding into collapse before any push-apart gradient appears
        if config.head == "gap":
            self.params["head_w"] = 0.1 * uniform((emb, w), w)
        else:
            self.params["head_w"] = 0.1 * uniform((emb, w * p * p), w * p * p)
        self.params["head_b"] = np.zeros(emb)

        self.param_names = list(self.params.keys())
        self.stat_names = [f"{bn}_{k}" for bn in _BN_LAYERS for k in ("mean", "var")]

    def _add_bn(self, name, c):
        self.params[f"{name}_gamma"] = np.ones(c)
        self.params[f"{name}_beta"] = np.zeros(c)
        if not hasattr(self, "stats"):
            self.stats: dict[str, np.ndarray] = {}
        self.stats[f"{name}_mean"] = np.zeros(c)
        self.stats[f"{name}_var"] = np.ones(c)

    # -- forward ------------------------------------------------------------

    def _check_input(self, roi) -> np.ndarray:
        x = roi.grid if isinstance(roi, RoiFeature) else np.asarray(roi, dtype=np.float64)
        cfg = self.config
        if x.shape != (cfg.in_channels, cfg.roi_size, cfg.roi_size):
            raise ValueError(
                f"roi shape {x.shape} does not match model input "
                f"({cfg.in_channels}, {cfg.roi_size}, {cfg.roi_size})"
            )
        return x

    def forward(self, roi, train: bool = False, update_stats: bool = False):
        """Map one ROI feature to the embedding vector.

        Returns (z, cache); the cache feeds :meth:`backward_from` and is None
        in inference mode.
        """
        x = self._check_input(roi)
        p = self.params
        cache = {"x": x} if train else None

        def bn(name, h):
            out, bc = _bn_forward(
                h, p[f"{name}_gamma"], p[f"{name}_beta"],
                self.stats[f"{name}_mean"], self.stats[f"{name}_var"],
            )
            if train:
                cache[name] = bc
            if update_stats:
                self.stats[f"{name}_mean"] = (
                    BN_MOMENTUM * self.stats[f"{name}_mean"] + (1 - BN_MOMENTUM) * h.mean(axis=(1, 2))
                )
                self.stats[f"{name}_var"] = (
                    BN_MOMENTUM * self.stats[f"{name}_var"] + (1 - BN_MOMENTUM) * h.var(axis=(1, 2))
                )
            return out

        h = x
        for conv, bname in (("conv1", "bn1"), ("conv2", "bn2")):
            pre, cols = _conv3x3_forward(h, p[f"{conv}_w"], p[f"{conv}_b"])
            act = np.maximum(pre, 0.0)
            if train:
                cache[f"{conv}_in_shape"] = h.shape
                cache[f"{conv}_cols"] = cols
                cache[f"{conv}_pre"] = pre
            h = bn(bname, act)

        pooled, am = _maxpool2_forward(h)
        if train:
            cache["pool_in_shape"] = h.shape
            cache["pool_am"] = am
        h = pooled

        pre, cols = _conv3x3_forward(h, p["conv3_w"], p["conv3_b"])
        act = np.maximum(pre, 0.0)
        if train:
            cache["conv3_in_shape"] = h.shape
            cache["conv3_cols"] = cols
            cache["conv3_pre"] = pre
        h = bn("bn3", act)

        for fc, bname in (("fc1", "bn4"), ("fc2", "bn5"), ("fc3", "bn6")):
            pre = _pointwise_forward(h, p[f"{fc}_w"], p[f"{fc}_b"])
            act = np.maximum(pre, 0.0)
            if train:
                cache[f"{fc}_in"] = h
                cache[f"{fc}_pre"] = pre
            h = bn(bname, act)

        if train:
            cache["head_in"] = h
        if self.config.head == "gap":
            u = _pointwise_forward(h, p["head_w"], p["head_b"])
            z = u.mean(axis=(1, 2))
        else:
            z = p["head_w"] @ h.reshape(-1) + p["head_b"]
        return z, cache

    def embed(self, roi) -> np.ndarray:
        z, _ = self.forward(roi, train=False)
        return z

    _PRE_TO_BN = (
        ("conv1_pre", "bn1"), ("conv2_pre", "bn2"), ("conv3_pre", "bn3"),
        ("fc1_pre", "bn4"), ("fc2_pre", "bn5"), ("fc3_pre", "bn6"),
    )

    def update_running_stats(self, cache):
        """Fold one cached forward pass into the exponential running stats."""
        for pre_key, name in self._PRE_TO_BN:
            act = np.maximum(cache[pre_key], 0.0)
            self.stats[f"{name}_mean"] = (
                BN_MOMENTUM * self.stats[f"{name}_mean"] + (1 - BN_MOMENTUM) * act.mean(axis=(1, 2))
            )
            self.stats[f"{name}_var"] = (
                BN_MOMENTUM * self.stats[f"{name}_var"] + (1 - BN_MOMENTUM) * act.var(axis=(1, 2))
            )

    # -- backward -----------------------------------------------------------

    def backward_from(self, cache, dz, grads):
        """Accumulate gradients of (dz . z) into ``grads`` for one branch."""
        p = self.params
        h = cache["head_in"]
        if self.config.head == "gap":
            n = h.shape[1] * h.shape[2]
            du = np.broadcast_to(dz[:, None, None] / n, (dz.shape[0],) + h.shape[1:])
            dh, dw, db = _pointwise_backward(du, h, p["head_w"])
            grads["head_b"] += db
        else:
            grads["head_b"] += dz
            dw = np.outer(dz, h.reshape(-1))
            dh = (p["head_w"].T @ dz).reshape(h.shape)
        grads["head_w"] += dw

        def bn_back(name, d):
            dx, dgamma, dbeta = _bn_backward(d, cache[name], p[f"{name}_gamma"])
            grads[f"{name}_gamma"] += dgamma
            grads[f"{name}_beta"] += dbeta
            return dx

        for fc, bname in (("fc3", "bn6"), ("fc2", "bn5"), ("fc1", "bn4")):
            dact = bn_back(bname, dh)
            dpre = dact * (cache[f"{fc}_pre"] > 0)
            dh, dw, db = _pointwise_backward(dpre, cache[f"{fc}_in"], p[f"{fc}_w"])
            grads[f"{fc}_w"] += dw
            grads[f"{fc}_b"] += db

        dact = bn_back("bn3", dh)
        dpre = dact * (cache["conv3_pre"] > 0)
        dh, dw, db = _conv3x3_backward(dpre, cache["conv3_cols"], p["conv3_w"], cache["conv3_in_shape"])
        grads["conv3_w"] += dw
        grads["conv3_b"] += db

        dh = _maxpool2_backward(dh, cache["pool_am"], cache["pool_in_shape"])

        for conv, bname in (("conv2", "bn2"), ("conv1", "bn1")):
            dact = bn_back(bname, dh)
            dpre = dact * (cache[f"{conv}_pre"] > 0)
            dh, dw, db = _conv3x3_backward(
                dpre, cache[f"{conv}_cols"], p[f"{conv}_w"], cache[f"{conv}_in_shape"]
            )
            grads[f"{conv}_w"] += dw
            grads[f"{conv}_b"] += db

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def pair_distance(model: EmbeddingModel, roi_i, roi_j) -> float:
    """L1 distance between the two ROI embeddings (inference mode)."""
    return float(np.abs(model.embed(roi_i) - model.embed(roi_j)).sum())


def contrastive_loss(d: float, y: int, margin: float = 1.0) -> float:
    """Margin loss on a pair distance: pull similar pairs to 0, push
    dissimilar pairs beyond the margin."""
    if d < 0 or margin <= 0:
        raise ValueError("require d >= 0 and margin > 0")
    return y * d + (1 - y) * max(0.0, margin - d)


def backward(model: EmbeddingModel, sample, margin: float = 1.0, update_stats: bool = False):
    """Loss, pair distance, and exact parameter gradients for one pair.

    Subgradient 0 is used at the hinge kink (d == margin) and at L1 kinks
    (equal embedding coordinates).
    """
    # both forwards see the same frozen statistics; updating between them
    # would make identical inputs embed differently within one pair
    z_i, cache_i = model.forward(sample.roi_i, train=True)
    z_j, cache_j = model.forward(sample.roi_j, train=True)
    if update_stats:
        model.update_running_stats(cache_i)
        model.update_running_stats(cache_j)
    diff = z_i - z_j
    d = float(np.abs(diff).sum())
    y = sample.label.y
    loss = contrastive_loss(d, y, margin)

    g = float(y) - (1.0 - y) * (1.0 if d < margin else 0.0)
    grads = model.zero_grads()
    if g != 0.0:
        dz_i = g * np.sign(diff)
        model.backward_from(cache_i, dz_i, grads)
        model.backward_from(cache_j, -dz_i, grads)
    return loss, d, grads


def train(model: EmbeddingModel, samples, cfg: TrainConfig = TrainConfig()) -> list[float]:
    """SGD with momentum and L2 weight decay; returns per-epoch mean loss.

    Weight decay skips batch-norm scale/shift. Deterministic for a fixed
    seed and sample order.
    """
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    velocity = model.zero_grads()
    decay_mask = {
        k: not (k.startswith("bn") and (k.endswith("_gamma") or k.endswith("_beta")))
        for k in model.param_names
    }
    trace = []
    order = np.arange(len(samples))
    for epoch in range(cfg.epochs):
        if cfg.shuffle:
            rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grads = model.zero_grads()
            batch_loss = 0.0
            for k in batch:
                loss, _, g = backward(model, samples[k], cfg.margin, update_stats=True)
                batch_loss += loss
                for name in model.param_names:
                    grads[name] += g[name]
            if not np.isfinite(batch_loss):
                raise RuntimeError(
                    f"NaN/inf loss at epoch {epoch}, step {start // cfg.batch_size}"
                )
            epoch_loss += batch_loss
            scale = 1.0 / len(batch)
            for name in model.param_names:
                g = grads[name] * scale
                if decay_mask[name]:
                    g = g + cfg.weight_decay * model.params[name]
                velocity[name] = cfg.momentum * velocity[name] - cfg.learning_rate * g
                model.params[name] += velocity[name]
        trace.append(epoch_loss / len(order))
    return trace


def infer_distance_matrix(
    model: EmbeddingModel, scene: Scene, nms_thr: float, roi_size: int | None = None
) -> DistanceMatrix:
    """Embed every proposal once; store L1 distances for pairs with
    IoU >= nms_thr."""
    from .geometry import roi_align

    size = roi_size if roi_size is not None else model.config.roi_size
    dm = DistanceMatrix(image_id=scene.image_id)
    n = len(scene.proposals)
    if n < 2:
        return dm
    ious = iou_matrix(scene.proposals)
    need = np.argwhere(np.triu(ious >= nms_thr, k=1))
    if len(need) == 0:
        return dm
    embeddings: dict[int, np.ndarray] = {}

    def emb(idx: int) -> np.ndarray:
        if idx not in embeddings:
            roi = roi_align(scene.features, scene.proposals[idx].box, size)
            embeddings[idx] = model.embed(roi)
        return embeddings[idx]

    for i, j in need:
        dm.put(int(i), int(j), float(np.abs(emb(int(i)) - emb(int(j))).sum()))
    return dm
