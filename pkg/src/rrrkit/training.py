"""Desk-scale training: decoupled-weight-decay adaptive moments, parameter
EMA, naive-ensemble branch training with a frozen stump, and greedy forward
block selection over the template's phase-fill order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream as rng_stream

from . import layers
from .archspec import ArchSpec, enumerate_blocks, fill_order, make_arch
from .engine import Model, ensemble_average
from .weightstore import RESERVED, TensorStore, block_tensor_names, extract_reduced


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 300
    ema_window_epochs: int = 60
    loss: str = "cross_entropy"
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.ema_window_epochs <= max(self.epochs, 0):
            raise ValueError("ema_window_epochs must lie in [0, epochs]")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss: {self.loss}")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer: {self.optimizer}")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, side, side) f32 in [0, 1]
    labels: np.ndarray  # (N,) integer class ids
    split: str = "train"
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree")
        if self.num_classes == 0:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def examples(self):
        from .engine import Image

        return [(Image(img), int(lab)) for img, lab in zip(self.images, self.labels)]


EMA_DECAY = 0.9  # per-epoch decay over the final window


class AdamW:
    """Adaptive moments with decoupled weight decay.

    With zero gradients a step multiplies each parameter by exactly
    (1 - lr * weight_decay): the moment term is 0 / (0 + eps) = 0.
    """

    def __init__(self, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            p = params[name].astype(np.float32, copy=False)
            g = g.astype(np.float32, copy=False)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * (g * g)
            self.m[name], self.v[name] = m, v
            p = p * (1.0 - self.lr * self.wd)
            params[name] = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def trainable_names(store_or_params, frozen=()) -> list[str]:
    names = store_or_params.names() if hasattr(store_or_params, "names") else list(store_or_params)
    frozen = set(frozen)
    out = []
    for name in names:
        if name in RESERVED or name.endswith(("running_mean", "running_var")):
            continue
        if name in frozen:
            continue
        out.append(name)
    return out


def stump_tensor_names(spec: ArchSpec) -> list[str]:
    """Tensors of the shared prefix feeding the branches (stem through the
    last unbranched phase), plus the reserved normalization constants."""
    names = list(RESERVED)
    for desc in enumerate_blocks(spec):
        if desc.branch_index is None:
            names.extend(block_tensor_names(desc))
    return names


def _block_learnables(blk) -> list[str]:
    if blk.is_stem:
        units = [("conv", "bn")]
    else:
        units = [("conv1", "bn1"), ("conv2", "bn2"), ("conv3", "bn3")]
        if blk.has_projection:
            units.append(("downsample.conv", "downsample.bn"))
    names = []
    for conv, bn in units:
        names += [f"{blk.name}.{conv}.weight", f"{blk.name}.{bn}.weight", f"{blk.name}.{bn}.bias"]
    return names


def _frozen_blocks(model: Model, frozen) -> frozenset[str]:
    """Blocks whose every learnable tensor is frozen run in inference mode
    (running statistics, no updates), matching the frozen-stump contract."""
    frozen = set(frozen)
    blocks = list(model.stump_blocks)
    for branch in model.branch_blocks:
        blocks.extend(branch)
    return frozenset(
        blk.name for blk in blocks if all(n in frozen for n in _block_learnables(blk))
    )


def _loss_and_dlogits(logits_list, labels):
    """Summed per-branch cross entropy and the per-branch logit gradients."""
    total = 0.0
    dlogits = []
    probs = []
    for logits in logits_list:
        loss, p, dl = layers.softmax_cross_entropy(logits, labels)
        total += loss
        dlogits.append(dl)
        probs.append(p)
    return total, dlogits, probs


def grad(spec: ArchSpec, store: TensorStore, batch, frozen=()) -> tuple[float, dict]:
    """Exact reverse-mode gradients of the summed per-branch mean cross
    entropy on one batch (train-mode batch norm).  The input store is not
    modified; frozen tensors are dropped from the result."""
    x, y = batch
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty (N, 3, H, W) array")
    params = store.arrays() if hasattr(store, "arrays") else dict(store)
    model = Model(spec, params)
    caches: dict = {}
    eval_blocks = _frozen_blocks(model, frozen)
    logits_list = model.forward_batch(x, train=True, caches=caches, eval_blocks=eval_blocks)
    loss, dlogits, _ = _loss_and_dlogits(logits_list, y)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss: {loss}")
    grads: dict[str, np.ndarray] = {}
    dstump = model.backward_tail(dlogits, caches, grads)
    model.backward_stump(dstump, caches, grads)
    for name in set(grads) - set(trainable_names(params, frozen)):
        grads.pop(name)
    return loss, grads


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo : lo + batch_size]


def _ensemble_correct(probs_list, labels) -> int:
    mean = np.mean(np.stack(probs_list), axis=0)
    return int((mean.argmax(axis=1) == labels).sum())


def evaluate(spec: ArchSpec, store, dataset: Dataset, batch_size: int = 64) -> float:
    """Ensemble-averaged prediction accuracy in inference mode."""
    acc, _ = branch_accuracies(spec, store, dataset, batch_size)
    return acc


def branch_accuracies(spec, store, dataset, batch_size: int = 64):
    """(ensemble accuracy, per-branch accuracies) in inference mode."""
    params = store.arrays() if hasattr(store, "arrays") else dict(store)
    model = Model(spec, params)
    n = len(dataset)
    correct = 0
    branch_correct = np.zeros(model.num_branches, dtype=np.int64)
    for lo in range(0, n, batch_size):
        x = dataset.images[lo : lo + batch_size]
        y = dataset.labels[lo : lo + batch_size]
        logits_list = model.forward_batch(x, train=False)
        probs = [layers.softmax(l) for l in logits_list]
        correct += _ensemble_correct(probs, y)
        for j, p in enumerate(probs):
            branch_correct[j] += int((p.argmax(axis=1) == y).sum())
    return correct / n, (branch_correct / n).tolist()


def _run_training(
    spec,
    params,
    dataset,
    config,
    *,
    seed,
    frozen,
    eval_dataset,
    augment,
    stump_cache=False,
):
    """Shared loop behind train and train_branches.

    With stump_cache=True the frozen prefix runs once in inference mode and
    its activations are reused every epoch; gradients then stop at the stump
    output, which is exact because frozen batch norms use running statistics.
    """
    model = Model(spec, params)
    opt = AdamW(config.learning_rate, config.weight_decay)
    allowed = set(trainable_names(params, frozen))
    eval_blocks = _frozen_blocks(model, frozen)
    rng = rng_stream(seed, 9)
    n = len(dataset)
    curve = []
    ema: dict[str, np.ndarray] | None = None
    ema_start = config.epochs - config.ema_window_epochs

    inputs = dataset.images
    if stump_cache:
        feats = []
        for lo in range(0, n, config.batch_size):
            feats.append(model.forward_stump(inputs[lo : lo + config.batch_size], train=False))
        inputs = np.concatenate(feats) if feats else inputs

    for epoch in range(config.epochs):
        total_loss = 0.0
        correct = 0
        for idx in _batches(n, config.batch_size, rng):
            x = inputs[idx]
            if augment is not None and not stump_cache:
                x = np.stack([augment(img) for img in x])
            y = dataset.labels[idx]
            caches: dict = {}
            if stump_cache:
                logits_list = model.forward_tail(x, train=True, caches=caches,
                                                 eval_blocks=eval_blocks)
            else:
                logits_list = model.forward_batch(x, train=True, caches=caches,
                                                  eval_blocks=eval_blocks)
            loss, dlogits, probs = _loss_and_dlogits(logits_list, y)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            total_loss += loss * len(idx)
            correct += _ensemble_correct(probs, y)
            grads: dict[str, np.ndarray] = {}
            dstump = model.backward_tail(dlogits, caches, grads)
            if not stump_cache:
                model.backward_stump(dstump, caches, grads)
            opt.step(params, {k: v for k, v in grads.items() if k in allowed})
        if config.ema_window_epochs > 0 and epoch >= ema_start:
            if ema is None:
                ema = {k: params[k].copy() for k in allowed}
            else:
                for k in allowed:
                    ema[k] = ema[k] + (1 - EMA_DECAY) * (params[k] - ema[k])
        test_acc = math.nan
        if eval_dataset is not None:
            test_acc = evaluate(spec, params, eval_dataset)
        curve.append((epoch, correct / n, test_acc, total_loss / n))
    if ema is not None:
        params.update(ema)
    return curve


def _params_to_store(params) -> TensorStore:
    store = TensorStore()
    for name, arr in params.items():
        store.add(name, arr)
    return store


def train(
    spec: ArchSpec,
    store: TensorStore,
    dataset: Dataset,
    config: TrainConfig,
    *,
    seed: int = 0,
    eval_dataset: Dataset | None = None,
    frozen=(),
    head_only: bool = False,
    augment=None,
):
    """Train all non-frozen tensors; returns (store', accuracy curve).

    head_only freezes everything except the classification heads and caches
    backbone features once, which is exact because the frozen backbone runs
    in inference mode.  With ema_window_epochs > 0 the returned parameters
    are the EMA over the final window.
    """
    params = store.arrays()
    if head_only:
        curve = _run_head_only(spec, params, dataset, config, seed, eval_dataset)
        return _params_to_store(params), curve
    curve = _run_training(
        spec,
        params,
        dataset,
        config,
        seed=seed,
        frozen=frozen,
        eval_dataset=eval_dataset,
        augment=augment,
    )
    return _params_to_store(params), curve


def _run_head_only(spec, params, dataset, config, seed, eval_dataset):
    """Affine-head training on cached backbone features."""
    model = Model(spec, params)
    feats_by_branch = _cached_features(model, dataset.images, config.batch_size)
    eval_feats = (
        _cached_features(model, eval_dataset.images, config.batch_size)
        if eval_dataset is not None
        else None
    )
    opt = AdamW(config.learning_rate, config.weight_decay)
    rng = rng_stream(seed, 9)
    n = len(dataset)
    curve = []
    ema = None
    ema_start = config.epochs - config.ema_window_epochs
    head_names = [name for pair in model.heads for name in pair]
    for epoch in range(config.epochs):
        total_loss = 0.0
        correct = 0
        for idx in _batches(n, config.batch_size, rng):
            y = dataset.labels[idx]
            grads = {}
            probs = []
            loss = 0.0
            for (w_name, b_name), feats in zip(model.heads, feats_by_branch):
                logits = layers.affine(feats[idx], params[w_name], params[b_name])
                l, p, dl = layers.softmax_cross_entropy(logits, y)
                loss += l
                probs.append(p)
                _, dw, db = layers.affine_bwd(dl, feats[idx], params[w_name])
                grads[w_name] = dw
                grads[b_name] = db
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            total_loss += loss * len(idx)
            correct += _ensemble_correct(probs, y)
            opt.step(params, grads)
        if config.ema_window_epochs > 0 and epoch >= ema_start:
            if ema is None:
                ema = {k: params[k].copy() for k in head_names}
            else:
                for k in head_names:
                    ema[k] = ema[k] + (1 - EMA_DECAY) * (params[k] - ema[k])
        test_acc = math.nan
        if eval_feats is not None:
            eprobs = [
                layers.softmax(layers.affine(f, params[w], params[b]))
                for (w, b), f in zip(model.heads, eval_feats)
            ]
            test_acc = _ensemble_correct(eprobs, eval_dataset.labels) / len(eval_dataset)
        curve.append((epoch, correct / n, test_acc, total_loss / n))
    if ema is not None:
        params.update(ema)
    return curve


def _cached_features(model: Model, images, batch_size):
    """Per-branch GAP features of the frozen network, inference mode."""
    feats = [[] for _ in model.heads]
    for lo in range(0, len(images), batch_size):
        h = model.forward_stump(images[lo : lo + batch_size], train=False)
        for j, blocks in enumerate(model.branch_blocks):
            hb = h
            for blk in blocks:
                hb = model._block_forward(blk, hb, False)
            feats[j].append(layers.global_avg_pool(hb))
    return [np.concatenate(f) for f in feats]


def train_branches(
    spec: ArchSpec,
    store: TensorStore,
    dataset: Dataset,
    config: TrainConfig,
    *,
    seed: int = 0,
    eval_dataset: Dataset | None = None,
    augment=None,
):
    """Naive-ensemble training: branches learn as individual models on their
    own heads (losses summed; branches share no trainable tensors) while the
    stump stays bit-frozen and its activations are computed once."""
    if spec.branch_plan is None:
        raise ValueError("train_branches expects a branched spec")
    if augment is not None:
        raise ValueError("augmentation is incompatible with the cached frozen stump")
    params = store.arrays()
    frozen = stump_tensor_names(spec)
    curve = _run_training(
        spec,
        params,
        dataset,
        config,
        seed=seed,
        frozen=frozen,
        eval_dataset=eval_dataset,
        augment=None,
        stump_cache=True,
    )
    return _params_to_store(params), curve


# Forward block selection ------------------------------------------------------


@dataclass
class SelectionRecord:
    step: int
    spec_name: str
    accuracy: float
    relative_gain: float
    accepted: bool


@dataclass
class SelectionState:
    current_spec: ArchSpec
    best_reference_accuracy: float
    previous_accuracy: float
    epsilon: float
    history: list[SelectionRecord] = field(default_factory=list)
    store: TensorStore | None = None


def _add_block_tensors(store: TensorStore, full_store: TensorStore, spec: ArchSpec, phase: int, index: int):
    for desc in enumerate_blocks(spec):
        if desc.phase_index == phase and desc.block_index_in_phase == index:
            for name in block_tensor_names(desc):
                if name not in store:
                    store.add(name, full_store[name])
            return
    raise ValueError(f"conv{phase}_{index} not in spec {spec.name}")


def forward_block_selection(
    full_store: TensorStore | None,
    task,
    config: TrainConfig,
    epsilon: float,
    *,
    seed: int = 0,
    train_and_eval=None,
) -> SelectionState:
    """Grow from the minimal network one pretrained block at a time.

    Starts at the minimal spec with a fresh head, trains, and records the
    reference accuracy; then fills phases in order, training on after every
    addition without re-initialization, and stops when the relative gain
    (accuracy - previous) / reference drops below epsilon.  The spec before
    the failing addition is returned; the full template if nothing fails.

    ``train_and_eval(spec, store) -> accuracy`` may be injected (e.g. a
    scripted oracle); the default trains on ``task = (train_set, test_set)``
    with the given config and evaluates on the test set.
    """
    train_ds, test_ds = task
    num_classes = train_ds.num_classes
    side = train_ds.images.shape[-1]
    spec = make_arch(1, 1, 1, 1, num_classes, input_side=side)
    work = extract_reduced(full_store, spec, seed=seed) if full_store is not None else None

    if train_and_eval is None:
        if work is None:
            raise ValueError("full_store is required without an injected trainer")

        def train_and_eval(cur_spec, cur_store):
            nonlocal work
            work, _ = train(cur_spec, cur_store, train_ds, config, seed=seed)
            return evaluate(cur_spec, work, test_ds)

    accuracy = train_and_eval(spec, work)
    state = SelectionState(spec, accuracy, accuracy, epsilon)
    state.history.append(SelectionRecord(0, spec.name, accuracy, math.nan, True))
    reference = accuracy

    for step, (phase, index) in enumerate(fill_order(), start=1):
        counts = list(spec.blocks_per_phase)
        counts[phase - 2] += 1
        candidate = make_arch(*counts, num_classes, input_side=side)
        if work is not None:
            _add_block_tensors(work, full_store, candidate, phase, index)
        accuracy = train_and_eval(candidate, work)
        if reference != 0:
            gain = (accuracy - state.previous_accuracy) / reference
        else:
            gain = math.inf if accuracy > state.previous_accuracy else -math.inf
        accepted = gain >= epsilon
        state.history.append(SelectionRecord(step, candidate.name, accuracy, gain, accepted))
        if not accepted:
            break
        spec = candidate
        state.current_spec = spec
        state.previous_accuracy = accuracy

    if work is not None:
        keep = set(RESERVED) | {"head.weight", "head.bias"}
        for desc in enumerate_blocks(state.current_spec):
            keep.update(block_tensor_names(desc))
        final = TensorStore()
        for name, arr in work.items():
            if name in keep:
                final.add(name, arr)
        state.store = final
    return state


# Synthetic data ----------------------------------------------------------------


def synth_dataset(num_classes: int, per_class: int, side: int, seed: int, split: str = "train") -> Dataset:
    """Deterministic class-conditional textures: an oriented grating plus a
    class-anchored bright blob, per-class color tint, and seeded noise."""
    if side < 32:
        raise ValueError(f"side must be >= 32 for the downsampling chain, got {side}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split}")
    rng = rng_stream(seed, 10, 0 if split == "train" else 1)
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float32) / side
    images = np.empty((num_classes * per_class, 3, side, side), dtype=np.float32)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    k = 0
    for c in range(num_classes):
        theta = math.pi * c / num_classes
        u = xs * math.cos(theta) + ys * math.sin(theta)
        cx, cy = 0.25 + 0.5 * ((c * 2654435761) % 97) / 97.0, 0.25 + 0.5 * ((c * 40503) % 89) / 89.0
        tint = np.array(
            [0.6 + 0.4 * math.sin(2.1 * c), 0.6 + 0.4 * math.sin(2.1 * c + 2.1), 0.6 + 0.4 * math.sin(2.1 * c + 4.2)],
            dtype=np.float32,
        )
        for _ in range(per_class):
            freq = (4.0 + 2.0 * (c % 3)) * rng.uniform(0.9, 1.1)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            grating = 0.5 + 0.5 * np.sin(2.0 * math.pi * freq * u + phase)
            jx, jy = rng.uniform(-0.05, 0.05, size=2)
            blob = np.exp(-(((xs - cx - jx) ** 2 + (ys - cy - jy) ** 2) / 0.02))
            base = 0.6 * grating + 0.4 * blob
            noise = rng.normal(0.0, 0.08, size=(3, side, side))
            img = np.clip(base[None] * tint[:, None, None] + noise, 0.0, 1.0)
            images[k] = img.astype(np.float32)
            labels[k] = c
            k += 1
    return Dataset(images, labels, split=split, num_classes=num_classes)
