"""Desk-scale model assembly and training on spectral traversal orders.

Per cloud the pipeline patchifies, computes the canonical spectrum, derives
traversal orders, and embeds each patch from rigid-invariant local distance
descriptors (distances to patch center, centroid and best-fit plane, mean
pairwise distance) so that, combined with spectral positional codes,
classification logits are invariant to rigid motions of the input.

Each encoder block materializes the token sequence once per traversal order,
concatenates the ordered copies along the sequence axis, runs an
input-dependent (selective) state-space scan over the long sequence, and
scatter-averages the per-occurrence features back to token identity.

Masked-autoencoder pretraining shares one mask of token identities across
all traversal orders; the decoder sees learnable placeholder tokens restored
at their recorded per-order positions (or appended at the tail, as an
ablation) before an order-sensitive decoder block and a per-token point head.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    concat_rows,
    cross_entropy,
    parameter,
    rms_norm,
    selective_scan_op,
)
from .errors import CheckpointError, InvalidArgumentError
from .geometry import PointCloud, patchify
from .mae import MaskPlan, make_mask
from .spectral import (
    GraphParams,
    build_graph,
    canonicalize,
    eigensolve_with_gap,
    random_walk_laplacian,
)
from .traversal import axis_order, hlt_codes, hlt_orders, random_order, sast_orders

ORDERINGS = ("sast", "hlt", "axis", "random")
CHECKPOINT_VERSION = 1
N_POINT_FEATURES = 4


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    learning_rate: float = 0.01
    batch_size: int = 8
    s: int = 4
    k_neighbors: int = 20
    mask_ratio: float = 0.6
    ordering: str = "sast"
    n_centers: int = 64
    n_neighbors: int = 16
    d_model: int = 32
    n_blocks: int = 2
    state_size: int = 8
    n_classes: int = 3
    pos_mode: str = "spectral"  # spectral | xyz
    restore_mode: str = "tar"  # tar | append (ablation)
    hlt_within: str = "eigvec"  # eigvec | random
    grad_clip: float = 5.0  # global gradient-norm ceiling for optimizer steps
    freeze_encoder: bool = False  # linear-evaluation mode: train the head only

    def __post_init__(self):
        for name in (
            "epochs",
            "batch_size",
            "s",
            "k_neighbors",
            "n_centers",
            "n_neighbors",
            "d_model",
            "n_blocks",
            "state_size",
            "n_classes",
        ):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise InvalidArgumentError("mask_ratio must be in [0, 1)")
        if self.ordering not in ORDERINGS:
            raise InvalidArgumentError(f"ordering must be one of {ORDERINGS}")
        if self.pos_mode not in ("spectral", "xyz"):
            raise InvalidArgumentError("pos_mode must be spectral or xyz")
        if self.restore_mode not in ("tar", "append"):
            raise InvalidArgumentError("restore_mode must be tar or append")

    @property
    def pos_dim(self) -> int:
        return self.s if self.pos_mode == "spectral" else 3


@dataclass(frozen=True)
class CloudTokens:
    """Cached per-cloud preprocessing: descriptors, positions, orders."""

    features: np.ndarray  # (N_c, N_n, 4) rigid-invariant point descriptors
    pos_input: np.ndarray  # (N_c, pos_dim)
    patch_points: np.ndarray  # (N_c, N_n, 3) absolute coordinates
    centers: np.ndarray  # (N_c, 3)
    orders: tuple  # permutations, each (N_c,)
    eigengap: float
    label: int | None = None

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]


def patch_descriptors(patch_points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Rigid-invariant per-point features.

    Per point: distance to the patch center, distance to the patch centroid,
    mean pairwise distance within the patch, and unsigned distance to the
    patch's best-fit plane (curvature signal: flat faces give ~0). All four
    depend only on pairwise geometry, so rigid motions leave them unchanged.
    """
    centered = patch_points - centers[:, None, :]
    r_center = np.linalg.norm(centered, axis=2)
    centroid = patch_points.mean(axis=1, keepdims=True)
    offsets = patch_points - centroid
    r_centroid = np.linalg.norm(offsets, axis=2)
    diffs = patch_points[:, :, None, :] - patch_points[:, None, :, :]
    pair_mean = np.linalg.norm(diffs, axis=3).mean(axis=2)
    cov = np.einsum("pni,pnj->pij", offsets, offsets) / patch_points.shape[1]
    _, eigvecs = np.linalg.eigh(cov)  # ascending; column 0 is the plane normal
    d_plane = np.abs(np.einsum("pni,pi->pn", offsets, eigvecs[:, :, 0]))
    return np.stack([r_center, r_centroid, pair_mean, d_plane], axis=2)


def preprocess(
    cloud: PointCloud, config: TrainConfig, label: int | None = None, order_seed: int = 0
) -> CloudTokens:
    """Patchify, compute the canonical spectrum and the traversal orders."""
    patches = patchify(cloud, config.n_centers, config.n_neighbors)
    centers = patches.centers()
    graph = build_graph(centers, GraphParams(k_neighbors=config.k_neighbors))
    lap = random_walk_laplacian(graph)
    raw, gap = eigensolve_with_gap(lap, config.s)
    emb = canonicalize(raw)

    if config.ordering == "sast":
        orders = [o.permutation for o in sast_orders(emb, config.s)]
    elif config.ordering == "hlt":
        codes = hlt_codes(emb, config.s)
        if config.hlt_within == "eigvec":
            pair = hlt_orders(codes, embedding=emb)
        else:
            pair = hlt_orders(codes, seed=order_seed)
        orders = [pair[0].permutation, pair[1].permutation]
    elif config.ordering == "axis":
        fwd = axis_order(centers, "x").permutation
        orders = [fwd, fwd[::-1].copy()]
    else:  # random
        fwd = random_order(config.n_centers, seed=order_seed).permutation
        orders = [fwd, fwd[::-1].copy()]

    pos = emb.eigenvectors.T.copy() if config.pos_mode == "spectral" else centers
    return CloudTokens(
        features=patch_descriptors(patches.patch_points(), centers),
        pos_input=pos,
        patch_points=patches.patch_points(),
        centers=centers,
        orders=tuple(orders),
        eigengap=gap,
        label=label,
    )


class MambaLiteModel:
    """Parameter container plus forward passes for classification and MAE."""

    def __init__(self, config: TrainConfig, seed: int | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        # frozen input scaler for the classifier head, fitted once from the
        # training split before optimization (see train_classifier)
        self.buffers: dict[str, np.ndarray] = {
            "feat_mean": np.zeros(config.d_model),
            "feat_scale": np.ones(config.d_model),
        }
        self._init_params(np.random.default_rng(config.seed if seed is None else seed))

    def _init_params(self, rng):
        c = self.config
        d, n_state = c.d_model, c.state_size
        hidden = 2 * d

        def mat(name, rows, cols, scale=None):
            scale = scale if scale is not None else 1.0 / np.sqrt(rows)
            self.params[name] = parameter(rng.normal(scale=scale, size=(rows, cols)))

        def vec(name, size, value=0.0):
            self.params[name] = parameter(np.full(size, value, dtype=np.float64))

        mat("embed.w1", N_POINT_FEATURES, hidden)
        vec("embed.b1", hidden)
        mat("embed.w2", hidden, d)
        vec("embed.b2", d)
        mat("pos.w", c.pos_dim, d)
        vec("pos.b", d)
        for i in range(c.n_blocks + 1):  # final slot is the decoder block
            prefix = f"enc{i}" if i < c.n_blocks else "dec"
            vec(f"{prefix}.norm", d, 1.0)
            mat(f"{prefix}.in_proj", d, 2 * d)
            mat(f"{prefix}.dt_w", d, d, scale=0.1 / np.sqrt(d))
            vec(f"{prefix}.dt_b", d, float(np.log(np.expm1(0.3))))
            mat(f"{prefix}.b_proj", d, n_state)
            mat(f"{prefix}.c_proj", d, n_state)
            self.params[f"{prefix}.log_a"] = parameter(
                np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float64)), (d, 1))
            )
            # small residual-branch init keeps blocks near identity at start,
            # so the scan refines rather than buries the token signal
            mat(f"{prefix}.out_proj", d, d, scale=0.1 / np.sqrt(d))
        self.params["head.w"] = parameter(np.zeros((d, c.n_classes)))
        vec("head.b", c.n_classes)
        mat("dec_head.w1", d, hidden)
        vec("dec_head.b1", hidden)
        mat("dec_head.w2", hidden, c.n_neighbors * 3)
        # spread the initial point predictions: identical offsets make the
        # Chamfer assignment collapse onto one point and stall early training
        self.params["dec_head.b2"] = parameter(
            rng.normal(scale=0.05, size=c.n_neighbors * 3)
        )
        self.params["mask_token"] = parameter(rng.normal(scale=0.02, size=d))

    # -- forward pieces -----------------------------------------------------

    def embed(self, features: np.ndarray) -> Tensor:
        """Per-point affine + tanh, max-pooled over the patch, then projected."""
        p = self.params
        h = (Tensor(features) @ p["embed.w1"] + p["embed.b1"]).tanh()
        return h.max(axis=1) @ p["embed.w2"] + p["embed.b2"]

    def positional(self, pos_input: np.ndarray) -> Tensor:
        return Tensor(pos_input) @ self.params["pos.w"] + self.params["pos.b"]

    def _block(self, x: Tensor, orders, prefix: str) -> Tensor:
        p = self.config
        n_tokens = x.shape[0]
        w = self.params
        idx = np.concatenate(orders)
        seq = rms_norm(x, w[f"{prefix}.norm"]).gather_rows(idx)
        proj = seq @ w[f"{prefix}.in_proj"]
        xs = proj.narrow(1, 0, p.d_model)
        gate = proj.narrow(1, p.d_model, p.d_model)

        dt = (xs @ w[f"{prefix}.dt_w"] + w[f"{prefix}.dt_b"]).softplus()
        b_sel = xs @ w[f"{prefix}.b_proj"]
        c_sel = xs @ w[f"{prefix}.c_proj"]
        a = -w[f"{prefix}.log_a"].exp()  # (d, N), strictly negative

        y = selective_scan_op(dt, b_sel, c_sel, a, xs)
        y = (y * gate.silu()) @ w[f"{prefix}.out_proj"]
        return x + y.segment_mean(idx, n_tokens)

    def encode(self, tokens: Tensor, orders) -> Tensor:
        x = tokens
        for i in range(self.config.n_blocks):
            x = self._block(x, orders, f"enc{i}")
        return x

    def token_features(self, sample: CloudTokens) -> Tensor:
        tokens = self.embed(sample.features) + self.positional(sample.pos_input)
        return self.encode(tokens, sample.orders)

    def classify(self, sample: CloudTokens) -> Tensor:
        pooled = self.token_features(sample).mean(axis=0, keepdims=True)
        scaled = (pooled - self.buffers["feat_mean"]) * (1.0 / self.buffers["feat_scale"])
        logits = scaled @ self.params["head.w"] + self.params["head.b"]
        return logits.reshape(self.config.n_classes)

    def fit_feature_scaler(self, samples, indices) -> None:
        """Freeze head-input standardization from the given samples' pooled
        features under the current parameters."""
        pooled = np.stack(
            [self.token_features(samples[i]).data.mean(axis=0) for i in indices]
        )
        self.buffers["feat_mean"] = pooled.mean(axis=0)
        self.buffers["feat_scale"] = pooled.std(axis=0) + 1e-6

    def classifier_loss(self, sample: CloudTokens) -> Tensor:
        return cross_entropy(self.classify(sample), int(sample.label))

    def mae_loss(self, sample: CloudTokens, plan: MaskPlan) -> Tensor:
        """Mean Chamfer distance of the decoded masked patches (0 if none)."""
        if plan.n_tokens != sample.n_tokens:
            raise InvalidArgumentError("mask plan does not match token count")
        if plan.n_masked == 0:
            return Tensor(0.0)
        cfg = self.config
        masked = plan.masked
        visible = plan.visible
        pos_codes = self.positional(sample.pos_input)
        tokens = self.embed(sample.features) + pos_codes

        row_of = np.full(sample.n_tokens, -1, dtype=np.int64)
        row_of[visible] = np.arange(visible.shape[0])
        enc_orders = [row_of[perm[np.isin(perm, visible)]] for perm in sample.orders]
        encoded = self.encode(tokens.gather_rows(visible), enc_orders)

        # restore: full-length feature table with learnable payloads (plus the
        # masked patch's positional code) at masked identities
        learn = self.params["mask_token"].reshape(1, cfg.d_model) + pos_codes.gather_rows(masked)
        table = concat_rows([encoded, learn])
        remap = np.empty(sample.n_tokens, dtype=np.int64)
        remap[visible] = np.arange(visible.shape[0])
        remap[masked] = visible.shape[0] + np.arange(masked.shape[0])
        full = table.gather_rows(remap)

        if cfg.restore_mode == "tar":
            dec_orders = list(sample.orders)
        else:  # ablation: visible tokens first, masked appended at the tail
            dec_orders = [
                np.concatenate([perm[np.isin(perm, visible)], perm[np.isin(perm, masked)]])
                for perm in sample.orders
            ]
        decoded = self._block(full, dec_orders, "dec")

        w = self.params
        feats = decoded.gather_rows(masked)
        hidden = (feats @ w["dec_head.w1"] + w["dec_head.b1"]).tanh()
        offsets = (hidden @ w["dec_head.w2"] + w["dec_head.b2"]).reshape(
            masked.shape[0], cfg.n_neighbors, 3
        )
        pred = offsets + sample.centers[masked][:, None, :]
        target = sample.patch_points[masked]

        n_m, n_n = masked.shape[0], cfg.n_neighbors
        diff = pred.reshape(n_m, n_n, 1, 3) - target[:, None, :, :]
        d2 = (diff * diff).sum(axis=3)
        per_patch = d2.min(axis=2).sum(axis=1) + d2.min(axis=1).sum(axis=1)
        return per_patch.sum() * (1.0 / n_m)

    # -- optimization ----------------------------------------------------------

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def sgd_step(self, lr: float, grad_clip: float | None = None) -> None:
        """One plain gradient step (used by tests; training uses AdamOptimizer)."""
        if grad_clip is not None:
            total = np.sqrt(
                sum(
                    float(np.sum(t.grad**2))
                    for t in self.params.values()
                    if t.grad is not None
                )
            )
            if total > grad_clip:
                lr = lr * (grad_clip / total)
        for t in self.params.values():
            if t.grad is not None:
                t.data -= lr * t.grad
        self.zero_grads()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name.startswith("buffer:"):
                key = name[len("buffer:"):]
                if key not in self.buffers:
                    raise CheckpointError(f"unexpected buffer {key!r}")
                if tuple(self.buffers[key].shape) != tuple(value.shape):
                    raise CheckpointError(
                        f"buffer {key!r}: checkpoint shape {tuple(value.shape)} != "
                        f"model shape {tuple(self.buffers[key].shape)}"
                    )
                self.buffers[key] = np.array(value, dtype=np.float64)
                continue
            if name not in self.params:
                raise CheckpointError(f"unexpected tensor {name!r}")
            if tuple(self.params[name].data.shape) != tuple(value.shape):
                raise CheckpointError(
                    f"tensor {name!r}: checkpoint shape {tuple(value.shape)} != "
                    f"model shape {tuple(self.params[name].data.shape)}"
                )
            self.params[name].data = np.array(value, dtype=np.float64)


class AdamOptimizer:
    """Deterministic fixed-rate Adam with a global-norm gradient ceiling.

    Plain fixed-rate SGD reliably mode-collapses on this architecture (the
    pooled features carry a large common component and a small class signal),
    so training uses Adam; no schedules, fully reproducible.
    """

    def __init__(self, model: MambaLiteModel, lr: float, grad_clip: float | None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-3):
        self.model = model
        self.lr = lr
        self.grad_clip = grad_clip
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in model.params.items()}

    def step(self, grad_scale: float = 1.0, only: tuple | None = None) -> None:
        params = self.model.params
        scale = grad_scale
        if self.grad_clip is not None:
            total = grad_scale * np.sqrt(
                sum(float(np.sum(t.grad**2)) for t in params.values() if t.grad is not None)
            )
            if total > self.grad_clip:
                scale = scale * (self.grad_clip / total)
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for k, t in params.items():
            if t.grad is None or (only is not None and not k.startswith(only)):
                continue
            g = t.grad * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            t.data -= self.lr * (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)
        self.model.zero_grads()


def _mask_seed(base: int, epoch: int, index: int) -> int:
    return (base * 1_000_003 + epoch * 10_007 + index) % (2**31 - 1)


@dataclass
class TrainResult:
    model: MambaLiteModel
    metrics: list = field(default_factory=list)  # (epoch, split, loss, accuracy)
    loss_trace: list = field(default_factory=list)
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")


def pretrain_mae(samples: list[CloudTokens], config: TrainConfig) -> TrainResult:
    """MAE pretraining: one optimizer step per cloud visit; returns the loss trace."""
    model = MambaLiteModel(config)
    opt = AdamOptimizer(model, config.learning_rate, config.grad_clip)
    result = TrainResult(model=model)
    order_rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        for idx in order_rng.permutation(len(samples)):
            sample = samples[idx]
            plan = make_mask(
                sample.n_tokens, config.mask_ratio, _mask_seed(config.seed, epoch, int(idx))
            )
            loss = model.mae_loss(sample, plan)
            if loss.requires_grad:
                loss.backward()
                opt.step()
            result.loss_trace.append(loss.item())
        epoch_losses = result.loss_trace[-len(samples) :]
        result.metrics.append((epoch, "pretrain", float(np.mean(epoch_losses)), ""))
    return result


def split_dataset(samples: list[CloudTokens], config: TrainConfig, test_fraction=0.25):
    """Deterministic stratified train/test split by label."""
    rng = np.random.default_rng(config.seed + 7919)
    by_label: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_label.setdefault(int(s.label), []).append(i)
    train_idx, test_idx = [], []
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        idx = idx[rng.permutation(idx.shape[0])]
        n_test = max(1, int(round(test_fraction * idx.shape[0])))
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return sorted(train_idx), sorted(test_idx)


def _evaluate(model: MambaLiteModel, samples, indices):
    losses, correct = [], 0
    for i in indices:
        sample = samples[i]
        logits = model.classify(sample)
        losses.append(cross_entropy(logits, int(sample.label)).item())
        correct += int(np.argmax(logits.data) == int(sample.label))
    return float(np.mean(losses)), correct / len(indices)


def train_classifier(
    samples: list[CloudTokens],
    config: TrainConfig,
    init_state: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Cross-entropy training of the mean-pooled encoder + linear head."""
    labels = {int(s.label) for s in samples if s.label is not None}
    if len(labels) > config.n_classes:
        raise InvalidArgumentError(
            f"dataset has {len(labels)} classes, model expects {config.n_classes}"
        )
    model = MambaLiteModel(config)
    if init_state is not None:
        model.load_state_dict(init_state)
    opt = AdamOptimizer(model, config.learning_rate, config.grad_clip)
    result = TrainResult(model=model)
    train_idx, test_idx = split_dataset(samples, config)
    model.fit_feature_scaler(samples, train_idx)
    if config.freeze_encoder:
        return _train_head_on_frozen(model, samples, config, train_idx, test_idx, result)
    shuffle_rng = np.random.default_rng(config.seed + 13)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_idx))
        pending = 0
        for j in order:
            sample = samples[train_idx[j]]
            loss = model.classifier_loss(sample)
            loss.backward()
            result.loss_trace.append(loss.item())
            pending += 1
            if pending == config.batch_size:
                opt.step(grad_scale=1.0 / pending)
                pending = 0
        if pending:
            opt.step(grad_scale=1.0 / pending)
        train_loss, train_acc = _evaluate(model, samples, train_idx)
        test_loss, test_acc = _evaluate(model, samples, test_idx)
        result.metrics.append((epoch, "train", train_loss, train_acc))
        result.metrics.append((epoch, "test", test_loss, test_acc))
        result.train_accuracy, result.test_accuracy = train_acc, test_acc
    return result


def _train_head_on_frozen(model, samples, config, train_idx, test_idx, result):
    """Linear-evaluation path: cache pooled features once, fit the head.

    The frozen-encoder problem is convex, so full-batch gradient steps on the
    cached features converge deterministically; this mirrors the usual
    linear-probe protocol for judging pretrained representations.
    """
    feats = {}
    for i in set(train_idx) | set(test_idx):
        pooled = model.token_features(samples[i]).data.mean(axis=0)
        feats[i] = (pooled - model.buffers["feat_mean"]) / model.buffers["feat_scale"]
    labels = {i: int(samples[i].label) for i in feats}

    w = model.params["head.w"]
    b = model.params["head.b"]
    x_train = np.stack([feats[i] for i in train_idx])
    y_train = np.array([labels[i] for i in train_idx])
    onehot = np.zeros((len(train_idx), config.n_classes))
    onehot[np.arange(len(train_idx)), y_train] = 1.0
    opt = AdamOptimizer(model, config.learning_rate, grad_clip=None)

    def eval_split(indices):
        x = np.stack([feats[i] for i in indices])
        logits = x @ w.data + b.data
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        y = np.array([labels[i] for i in indices])
        loss = float(-np.log(probs[np.arange(len(indices)), y] + 1e-300).mean())
        acc = float((logits.argmax(axis=1) == y).mean())
        return loss, acc

    for epoch in range(config.epochs):
        logits = x_train @ w.data + b.data
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        delta = (probs - onehot) / len(train_idx)
        w.grad = x_train.T @ delta
        b.grad = delta.sum(axis=0)
        opt.step(only=("head.",))
        train_loss, train_acc = eval_split(train_idx)
        test_loss, test_acc = eval_split(test_idx)
        result.loss_trace.append(train_loss)
        result.metrics.append((epoch, "train", train_loss, train_acc))
        result.metrics.append((epoch, "test", test_loss, test_acc))
        result.train_accuracy, result.test_accuracy = train_acc, test_acc
    return result


def grad_check(model: MambaLiteModel, sample: CloudTokens, kind: str = "classifier",
               plan: MaskPlan | None = None, step: float = 1e-5) -> dict:
    """Central finite differences over every parameter vs analytic gradients."""

    def loss_fn() -> Tensor:
        if kind == "classifier":
            return model.classifier_loss(sample)
        if kind == "mae":
            return model.mae_loss(sample, plan)
        raise InvalidArgumentError("kind must be classifier or mae")

    model.zero_grads()
    loss_fn().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in model.params.items()}
    report = {}
    for name, tensor in model.params.items():
        worst = 0.0
        data = tensor.data
        it = np.nditer(data, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = data[ix]
            data[ix] = orig + step
            up = loss_fn().item()
            data[ix] = orig - step
            down = loss_fn().item()
            data[ix] = orig
            fd = (up - down) / (2 * step)
            got = analytic[name][ix]
            denom = max(abs(fd), abs(got), 1e-6)
            worst = max(worst, abs(fd - got) / denom)
            it.iternext()
        report[name] = worst
    model.zero_grads()
    report["worst"] = max(v for k, v in report.items() if k != "worst")
    return report


# -- persistence ---------------------------------------------------------------


def save_checkpoint(path, model: MambaLiteModel, extra: dict | None = None) -> None:
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "meta": extra or {},
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in model.params.items()
        },
        "buffers": {
            name: {"shape": list(b.shape), "data": b.ravel().tolist()}
            for name, b in model.buffers.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {blob.get('format_version')!r}"
        )
    state = {}
    for section, prefix in (("params", ""), ("buffers", "buffer:")):
        for name, entry in blob.get(section, {}).items():
            shape = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise CheckpointError(f"tensor {name!r}: data does not match shape {shape}")
            state[prefix + name] = data.reshape(shape)
    return state


def write_metrics(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy"])
        for row in rows:
            writer.writerow(row)
