"""Channel-attention convolutional regressor and its training pipeline.

The model weights every input channel (temporal sample) with an
attention score computed from max- and average-pooled channel
statistics passed through a shared two-layer bottleneck MLP:

    alpha = sigmoid(mlp(maxpool(x)) + mlp(avgpool(x)))

The attention-weighted patch then runs through four 3x3 convolutions
(32, 64, 128, 64 filters, ReLU) and a dense head predicting the two
normalized relaxation times for the patch anchor pixel. Mean attention
scores over a patch set drive channel selection; PCA and random
selection are provided for comparison sweeps.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from mrfica import autodiff
from mrfica.errors import DomainError, TrainingDivergedError
from mrfica.metrics import TissueMaps

CONV_WIDTHS = (32, 64, 128, 64)
DEFAULT_T1_SCALE = 4000.0
DEFAULT_T2_SCALE = 500.0
SIGNAL_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and early-stopping settings."""

    lr: float = 15e-4
    batch: int = 512
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch <= 0 or self.max_epochs <= 0 \
                or self.patience <= 0:
            raise DomainError("TrainConfig values must be positive")


@dataclass
class PatchSet:
    """Overlapping patches with normalized targets and anchor pixels."""

    patches: np.ndarray           # (M, p, p, C) float32
    targets: np.ndarray           # (M, 2) float32, in [0, 1]
    anchors: np.ndarray           # (M, 2) int32 (row, col)

    def __len__(self):
        return self.patches.shape[0]

    @property
    def patch(self):
        return self.patches.shape[1]

    @property
    def channels(self):
        return self.patches.shape[3]


@dataclass
class ConvIcaModel:
    """Graph plus the handles and metadata needed to run it."""

    graph: autodiff.Graph
    channels: int
    patch: int
    ratio: int
    t1_scale: float = DEFAULT_T1_SCALE
    t2_scale: float = DEFAULT_T2_SCALE
    scores_node: autodiff.Node = None
    output_node: autodiff.Node = None
    loss_node: autodiff.Node = None

    @property
    def params(self):
        return self.graph.params

    def parameter_count(self):
        return sum(p.size for p in self.graph.params.values())


def attention_hidden(channels, ratio):
    return max(1, channels // ratio)


def parameter_count(channels, patch, ratio=4):
    """Closed-form parameter count of the model."""
    hidden = attention_hidden(channels, ratio)
    total = channels * hidden + hidden + hidden * channels + channels
    cin = channels
    for width in CONV_WIDTHS:
        total += 9 * cin * width + width
        cin = width
    total += patch * patch * CONV_WIDTHS[-1] * 2 + 2
    return total


def build_conv_ica(channels, patch, ratio=4, seed=0,
                   t1_scale=DEFAULT_T1_SCALE, t2_scale=DEFAULT_T2_SCALE,
                   with_attention=True):
    """Wire the attention module and convolutional head into a graph.

    Initialization is He-style uniform with fan-in scaling, fully
    determined by ``seed``; biases start at zero. With
    ``with_attention=False`` the attention module is replaced by the
    identity (ablation baseline); the conv stack initialization draws
    stay aligned with the attentive model.
    """
    channels = int(channels)
    patch = int(patch)
    if channels < 1 or patch < 1:
        raise DomainError("channels and patch must be >= 1")
    hidden = attention_hidden(channels, ratio)
    rng = np.random.default_rng(seed)

    def he(fan_in, shape):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    g = autodiff.Graph()
    x = g.input("x")
    att_w1_arr = he(channels, (channels, hidden))
    att_w2_arr = he(hidden, (hidden, channels))
    scores = None
    if with_attention:
        att_w1 = g.param("att_w1", att_w1_arr)
        att_b1 = g.param("att_b1", np.zeros(hidden, dtype=np.float32))
        att_w2 = g.param("att_w2", att_w2_arr)
        att_b2 = g.param("att_b2", np.zeros(channels, dtype=np.float32))

        pooled_max = g.max_pool_all(x)
        pooled_avg = g.avg_pool_all(x)
        branch_max = g.dense(g.relu(g.dense(pooled_max, att_w1, att_b1)),
                             att_w2, att_b2)
        branch_avg = g.dense(g.relu(g.dense(pooled_avg, att_w1, att_b1)),
                             att_w2, att_b2)
        scores = g.sigmoid(g.add(branch_max, branch_avg))
        feat = g.scale_channels(x, scores)
    else:
        feat = x

    cin = channels
    for li, width in enumerate(CONV_WIDTHS, start=1):
        w = g.param(f"conv{li}_w", he(9 * cin, (3, 3, cin, width)))
        b = g.param(f"conv{li}_b", np.zeros(width, dtype=np.float32))
        feat = g.relu(g.conv2d(feat, w, b))
        cin = width
    flat = g.flatten(feat)
    head_in = patch * patch * CONV_WIDTHS[-1]
    head_w = g.param("head_w", he(head_in, (head_in, 2)))
    head_b = g.param("head_b", np.zeros(2, dtype=np.float32))
    out = g.relu(g.dense(flat, head_w, head_b))
    target = g.input("target")
    loss = g.mse(out, target)

    return ConvIcaModel(graph=g, channels=channels, patch=patch,
                        ratio=int(ratio), t1_scale=float(t1_scale),
                        t2_scale=float(t2_scale), scores_node=scores,
                        output_node=out, loss_node=loss)


def channel_attention_forward(patches, model):
    """Attention-weighted patches and their per-channel scores.

    ``patches`` is (M, p, p, C) or a single (p, p, C) patch; returns
    (weighted, scores) with matching leading dimensions.
    """
    if model.scores_node is None:
        raise DomainError("model was built without the attention module")
    arr = np.asarray(patches, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    scores, _ = autodiff.forward(model.graph, {"x": arr},
                                 output=model.scores_node)
    weighted = arr * scores[:, None, None, :]
    if single:
        return weighted[0], scores[0]
    return weighted, scores


# --- patch extraction ------------------------------------------------------

def anchor_offset(patch):
    """Anchor pixel of a patch window (its center, biased low-left for
    even sizes is avoided by using patch//2)."""
    return patch // 2


def _image_data(image):
    if isinstance(image, np.ndarray):
        return image
    return image.data if hasattr(image, "data") else np.asarray(image)


def _valid_positions(valid_mask, patch, stride):
    h, w = valid_mask.shape
    if patch > h or patch > w:
        raise DomainError(f"patch {patch} exceeds image {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(
        valid_mask.astype(np.uint8), (patch, patch))
    full = win.reshape(win.shape[0], win.shape[1], -1).all(axis=2)
    rows, cols = np.nonzero(full)
    if stride > 1:
        keep = (rows % stride == 0) & (cols % stride == 0)
        rows, cols = rows[keep], cols[keep]
    return rows, cols


def _gather_patches(data, rows, cols, patch):
    win = np.lib.stride_tricks.sliding_window_view(data, (patch, patch),
                                                   axis=(0, 1))
    # window view is (H-p+1, W-p+1, C, p, p)
    got = win[rows, cols]
    return np.ascontiguousarray(np.moveaxis(got, 1, 3), dtype=np.float32)


def extract_patches(image, phantom, patch=4, stride=1,
                    t1_scale=DEFAULT_T1_SCALE, t2_scale=DEFAULT_T2_SCALE):
    """Training patches: windows fully inside the phantom foreground,
    labeled with the anchor pixel's normalized (t1, t2)."""
    data = _image_data(image)
    if patch < 1 or stride < 1:
        raise DomainError("patch and stride must be >= 1")
    rows, cols = _valid_positions(phantom.foreground, patch, stride)
    if rows.size == 0:
        raise DomainError("no patch window fits inside the foreground")
    patches = _gather_patches(data, rows, cols, patch)
    off = anchor_offset(patch)
    ar = rows + off
    ac = cols + off
    targets = np.stack([phantom.t1_map[ar, ac] / t1_scale,
                        phantom.t2_map[ar, ac] / t2_scale],
                       axis=1).astype(np.float32)
    if targets.min() < 0.0 or targets.max() > 1.0:
        raise DomainError("normalized targets fall outside [0, 1]; "
                          "check t1_scale/t2_scale")
    anchors = np.stack([ar, ac], axis=1).astype(np.int32)
    return PatchSet(patches=patches, targets=targets, anchors=anchors)


def extract_image_patches(image, patch=4, stride=1):
    """Prediction patches: windows whose pixels all carry signal."""
    data = _image_data(image)
    norms = np.linalg.norm(data.astype(np.float64), axis=2)
    fg = norms >= SIGNAL_EPS
    rows, cols = _valid_positions(fg, patch, stride)
    if rows.size == 0:
        raise DomainError("no patch window fits inside the signal region")
    patches = _gather_patches(data, rows, cols, patch)
    off = anchor_offset(patch)
    anchors = np.stack([rows + off, cols + off], axis=1).astype(np.int32)
    return patches, anchors, fg


def split_patchset(patchset, val_fraction=0.1, seed=0):
    """Seeded train/validation split over patches."""
    m = len(patchset)
    n_val = max(1, int(round(m * val_fraction))) if m > 1 else 0
    perm = np.random.default_rng(seed).permutation(m)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return _subset(patchset, train_idx), _subset(patchset, val_idx)


def _subset(ps, idx):
    return PatchSet(patches=ps.patches[idx], targets=ps.targets[idx],
                    anchors=ps.anchors[idx])


# --- training --------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False


def _eval_loss(model, patches, targets, batch):
    total = 0.0
    for s in range(0, patches.shape[0], batch):
        feeds = {"x": patches[s:s + batch], "target": targets[s:s + batch]}
        loss, _ = autodiff.forward(model.graph, feeds,
                                   output=model.loss_node)
        total += float(loss) * (min(s + batch, patches.shape[0]) - s)
    return total / patches.shape[0]


def train(model, trainset, valset, cfg):
    """Minimize MSE with Adam; early-stop on the validation loss.

    Training stops after ``cfg.patience`` epochs without improvement
    (or at ``cfg.max_epochs``) and the parameters of the best
    validation epoch are restored. Single-threaded and bit-reproducible
    for a fixed seed.
    """
    if len(trainset) == 0 or len(valset) == 0:
        raise DomainError("train and validation sets must be non-empty")
    graph = model.graph
    state = autodiff.AdamState.for_params(graph.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_params = {k: v.copy() for k, v in graph.params.items()}
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(trainset))
        epoch_loss = 0.0
        for s in range(0, perm.size, cfg.batch):
            sel = perm[s:s + cfg.batch]
            feeds = {"x": trainset.patches[sel],
                     "target": trainset.targets[sel]}
            loss, values = autodiff.forward(graph, feeds,
                                            output=model.loss_node)
            loss_f = float(loss)
            if not np.isfinite(loss_f):
                raise TrainingDivergedError(epoch)
            grads = autodiff.backward(graph, values, model.loss_node)
            autodiff.adam_step(graph.params, grads, state)
            epoch_loss += loss_f * sel.size
        train_loss = epoch_loss / perm.size
        val_loss = _eval_loss(model, valset.patches, valset.targets,
                              cfg.batch)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        history.epochs.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                         val_loss=val_loss))
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_params = {k: v.copy() for k, v in graph.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                history.stopped_early = True
                break

    graph.params.update(best_params)
    return history


def predict_patches(model, patches, batch=512):
    """Raw normalized (t1, t2) model outputs for a patch array."""
    out = np.empty((patches.shape[0], 2), dtype=np.float64)
    for s in range(0, patches.shape[0], batch):
        pred, _ = autodiff.forward(model.graph, {"x": patches[s:s + batch]},
                                   output=model.output_node)
        out[s:s + batch] = pred
    return out


def predict_maps(model, image, stride=1, batch=512):
    """Assemble per-patch predictions into full T1/T2 maps.

    Predictions are un-normalized and accumulated at their anchor
    pixels (anchors hit more than once are averaged); foreground
    pixels never covered by an anchor take the value of the nearest
    covered pixel.
    """
    patches, anchors, fg = extract_image_patches(image, model.patch, stride)
    preds = predict_patches(model, patches, batch=batch)
    preds[:, 0] *= model.t1_scale
    preds[:, 1] *= model.t2_scale

    h, w = fg.shape
    sums = np.zeros((h, w, 2), dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.int64)
    np.add.at(sums, (anchors[:, 0], anchors[:, 1]), preds)
    np.add.at(counts, (anchors[:, 0], anchors[:, 1]), 1)
    covered = counts > 0
    avg = np.zeros_like(sums)
    avg[covered] = sums[covered] / counts[covered, None]

    uncovered = fg & ~covered
    if uncovered.any():
        _, (ni, nj) = ndimage.distance_transform_edt(~covered,
                                                     return_indices=True)
        avg[uncovered] = avg[ni[uncovered], nj[uncovered]]

    t1 = np.where(fg, avg[:, :, 0], 0.0)
    t2 = np.where(fg, avg[:, :, 1], 0.0)
    return TissueMaps(t1_map=t1, t2_map=t2, mask=fg)


# --- channel analysis ------------------------------------------------------

def mean_attention_scores(model, patches, batch=512):
    """Per-channel attention scores averaged over all patches."""
    if model.scores_node is None:
        raise DomainError("model was built without the attention module")
    arr = patches.patches if isinstance(patches, PatchSet) else \
        np.asarray(patches, dtype=np.float32)
    if arr.shape[0] == 0:
        raise DomainError("patch set is empty")
    acc = np.zeros(arr.shape[3], dtype=np.float64)
    for s in range(0, arr.shape[0], batch):
        scores, _ = autodiff.forward(model.graph, {"x": arr[s:s + batch]},
                                     output=model.scores_node)
        acc += scores.astype(np.float64).sum(axis=0)
    return acc / arr.shape[0]


def select_channels_attention(scores, n):
    """Indices of the ``n`` highest scores, ascending; ties prefer the
    lower channel index."""
    scores = np.asarray(scores)
    n = int(n)
    if not 1 <= n <= scores.shape[0]:
        raise DomainError(f"n must lie in [1, {scores.shape[0]}], got {n}")
    order = np.argsort(-scores, kind="stable")[:n]
    return np.sort(order)


def select_channels_random(channels, n, seed):
    """Uniform channel sample without replacement, ascending."""
    channels = int(channels)
    n = int(n)
    if not 1 <= n <= channels:
        raise DomainError(f"n must lie in [1, {channels}], got {n}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(channels, size=n, replace=False))


@dataclass
class PcaBasis:
    """Channel-mean and orthonormal principal directions."""

    mean: np.ndarray              # (C,)
    components: np.ndarray        # (C, n)
    variance_fractions: np.ndarray = None

    def transform(self, signals):
        arr = np.asarray(signals, dtype=np.float64)
        return (arr - self.mean) @ self.components


def pca_reduce(signals, n):
    """Top-``n`` principal components of training signals.

    Returns (basis, projected signals). Components are orthonormal
    with a deterministic sign (first nonzero entry positive).
    """
    arr = np.asarray(signals, dtype=np.float64)
    if arr.ndim != 2:
        raise DomainError("signals must be (M, C)")
    m, c = arr.shape
    n = int(n)
    if not 1 <= n <= c:
        raise DomainError(f"n must lie in [1, {c}], got {n}")
    mean = arr.mean(axis=0)
    centered = arr - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.ascontiguousarray(vt[:n].T)
    for j in range(comps.shape[1]):
        col = comps[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0.0:
            comps[:, j] = -col
    var = svals ** 2
    total = float(var.sum())
    fractions = var[:n] / total if total > 0 else np.zeros(n)
    basis = PcaBasis(mean=mean, components=comps,
                     variance_fractions=fractions)
    return basis, centered @ comps


def select_image_channels(image, indices):
    """Channel subset of a fingerprint image, as an (H, W, n) array."""
    return np.ascontiguousarray(_image_data(image)[:, :, indices])


def pca_transform_image(image, basis):
    """Per-pixel PCA projection of an image, as an (H, W, n) array.

    Background (all-zero) pixels are kept at exactly zero so the
    foreground detection downstream still works.
    """
    data = _image_data(image)
    h, w, _ = data.shape
    flat = data.reshape(h * w, -1).astype(np.float64)
    fg = np.linalg.norm(flat, axis=1) >= SIGNAL_EPS
    out = np.zeros((h * w, basis.components.shape[1]), dtype=np.float64)
    out[fg] = basis.transform(flat[fg])
    return out.reshape(h, w, -1).astype(np.float32)


# --- persistence -----------------------------------------------------------

def save_model(model, checkpoint_path, sidecar_path, reduction=None):
    """MRFW checkpoint plus a JSON sidecar with the model geometry.

    ``reduction`` describes how raw images must be reduced before
    inference: {"method": "attention"|"random", "indices": [...]} or
    {"method": "pca", "mean": [...], "components": [[...], ...]}.
    """
    autodiff.save_params(checkpoint_path, model.graph.params)
    meta = {
        "channels": model.channels,
        "patch": model.patch,
        "ratio": model.ratio,
        "t1_scale": model.t1_scale,
        "t2_scale": model.t2_scale,
        "with_attention": model.scores_node is not None,
        "reduction": reduction,
    }
    with open(sidecar_path, "w", encoding="ascii") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(checkpoint_path, sidecar_path):
    """Rebuild a model from its checkpoint and sidecar.

    Returns (model, reduction dict or None).
    """
    with open(sidecar_path, "r", encoding="ascii") as fh:
        meta = json.load(fh)
    model = build_conv_ica(meta["channels"], meta["patch"],
                           ratio=meta["ratio"], seed=0,
                           t1_scale=meta["t1_scale"],
                           t2_scale=meta["t2_scale"],
                           with_attention=meta.get("with_attention", True))
    params = autodiff.load_params(checkpoint_path)
    for name, arr in model.graph.params.items():
        if name not in params:
            raise DomainError(f"checkpoint is missing tensor {name!r}")
        if params[name].shape != arr.shape:
            raise DomainError(
                f"checkpoint tensor {name!r} has shape "
                f"{params[name].shape}, expected {arr.shape}")
    model.graph.params.update(params)
    return model, meta.get("reduction")


def apply_reduction(image, reduction):
    """Reduce a raw image per a sidecar ``reduction`` description."""
    if reduction is None:
        return _image_data(image)
    method = reduction["method"]
    if method in ("attention", "random"):
        return select_image_channels(image,
                                     np.asarray(reduction["indices"],
                                                dtype=np.int64))
    if method == "pca":
        basis = PcaBasis(mean=np.asarray(reduction["mean"]),
                         components=np.asarray(reduction["components"]))
        return pca_transform_image(image, basis)
    raise DomainError(f"unknown reduction method {method!r}")


def save_attention_scores_csv(path, scores):
    """Two-column CSV (channel index, mean attention score)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("channel,mean_score\n")
        for i, v in enumerate(np.asarray(scores)):
            fh.write(f"{i},{v:.9f}\n")


def save_selected_channels_csv(path, indices):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("channel\n")
        for i in np.asarray(indices):
            fh.write(f"{int(i)}\n")
