"""CPU forward-inference engine plus the pruning modes and latency benchmark.

The executable model is assembled from an ArchSpec (structure: block order,
strides, branching) and a tensor mapping (widths: taken from the actual tensor
shapes, so channel-slimmed stores run under their original spec).  All
reductions are in fixed order, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .rng import stream as rng_stream

from . import analyzer, layers
from .archspec import ArchSpec, OUT_WIDTHS, enumerate_blocks
from .weightstore import (
    NORM_MEAN,
    NORM_STD,
    RESERVED,
    TensorStore,
    block_tensor_names,
)


@dataclass
class Image:
    """A single C x H x W float image with values in [0, 1] pre-normalization."""

    data: np.ndarray


@dataclass
class Prediction:
    probs: np.ndarray
    per_branch_probs: np.ndarray | None = None


@dataclass(frozen=True)
class PruneSpec:
    granularity: str  # "element" | "channel" | "block"
    sparsity: float
    seed: int = 0

    def __post_init__(self):
        if self.granularity not in ("element", "channel", "block"):
            raise ValueError(f"unknown granularity: {self.granularity}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must be in [0, 1], got {self.sparsity}")


@dataclass(frozen=True)
class LatencyRow:
    granularity: str
    sparsity: float
    mean_s: float
    ci95_s: float
    n: int


def _image_array(image) -> np.ndarray:
    arr = image.data if isinstance(image, Image) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
    return arr


class _BlockExec:
    """Name bindings and stride metadata for one bottleneck block."""

    __slots__ = ("name", "stride", "has_projection", "is_stem")

    def __init__(self, desc):
        self.name = desc.name
        self.stride = desc.stride
        self.has_projection = desc.has_projection
        self.is_stem = desc.phase_index == 1

    def tensor(self, leaf: str) -> str:
        return f"{self.name}.{leaf}"


def _require(params, name, expect_shape=None):
    if name not in params:
        raise ValueError(f"missing tensor: {name}")
    arr = params[name]
    if expect_shape is not None and tuple(arr.shape) != tuple(expect_shape):
        raise ValueError(
            f"shape mismatch for {name}: got {tuple(arr.shape)}, expected {tuple(expect_shape)}"
        )
    return arr


class Model:
    """Executable network bound to a parameter dict.

    Training-mode forwards update batch-norm running statistics in place, so
    one trainer must own the dict; inference is read-only and reentrant.
    """

    def __init__(self, spec: ArchSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.num_branches = spec.branch_plan.num_branches if spec.branch_plan else 1
        self.stump_blocks: list[_BlockExec] = []
        self.branch_blocks: list[list[_BlockExec]] = [[] for _ in range(self.num_branches)]
        for desc in enumerate_blocks(spec):
            blk = _BlockExec(desc)
            if desc.branch_index is None:
                self.stump_blocks.append(blk)
            else:
                self.branch_blocks[desc.branch_index - 1].append(blk)
        if spec.branch_plan is None:
            self.heads = [("head.weight", "head.bias")]
        else:
            self.heads = [
                (f"head.branch{j}.weight", f"head.branch{j}.bias")
                for j in range(1, self.num_branches + 1)
            ]
        self._validate()

    def _validate(self):
        p = self.params
        _require(p, NORM_MEAN, (3,))
        _require(p, NORM_STD, (3,))
        chans = self._check_chain(self.stump_blocks, 3)
        for blocks, (w_name, b_name) in zip(self.branch_blocks, self.heads):
            out = self._check_chain(blocks, chans)
            head_w = _require(p, w_name)
            if head_w.ndim != 2 or head_w.shape[1] != out:
                raise ValueError(
                    f"shape mismatch for {w_name}: got {tuple(head_w.shape)}, "
                    f"expected ({self.spec.num_classes}, {out})"
                )
            if head_w.shape[0] != self.spec.num_classes:
                raise ValueError(
                    f"shape mismatch for {w_name}: {head_w.shape[0]} classes, "
                    f"spec has {self.spec.num_classes}"
                )
            _require(p, b_name, (self.spec.num_classes,))

    def _check_chain(self, blocks: list[_BlockExec], cin: int) -> int:
        p = self.params
        for blk in blocks:
            if blk.is_stem:
                w = _require(p, blk.tensor("conv.weight"))
                self._check_bn(blk.tensor("bn"), w.shape[0])
                cin = w.shape[0]
                continue
            w1 = _require(p, blk.tensor("conv1.weight"))
            w2 = _require(p, blk.tensor("conv2.weight"))
            w3 = _require(p, blk.tensor("conv3.weight"))
            for name, w, expect_in in (
                ("conv1.weight", w1, cin),
                ("conv2.weight", w2, w1.shape[0]),
                ("conv3.weight", w3, w2.shape[0]),
            ):
                if w.ndim != 4 or w.shape[1] != expect_in:
                    raise ValueError(
                        f"shape mismatch for {blk.tensor(name)}: got {tuple(w.shape)}, "
                        f"expected input width {expect_in}"
                    )
            self._check_bn(blk.tensor("bn1"), w1.shape[0])
            self._check_bn(blk.tensor("bn2"), w2.shape[0])
            self._check_bn(blk.tensor("bn3"), w3.shape[0])
            out = w3.shape[0]
            if blk.has_projection:
                wp = _require(p, blk.tensor("downsample.conv.weight"), (out, cin, 1, 1))
                self._check_bn(blk.tensor("downsample.bn"), wp.shape[0])
            elif out != cin:
                raise ValueError(
                    f"shape mismatch for {blk.tensor('conv3.weight')}: residual add "
                    f"needs {cin} output channels, got {out}"
                )
            cin = out
        return cin

    def _check_bn(self, prefix: str, width: int):
        for part in ("weight", "bias", "running_mean", "running_var"):
            _require(self.params, f"{prefix}.{part}", (width,))

    # Execution ---------------------------------------------------------

    def _bn(self, x, prefix, mode, caches=None):
        p = self.params
        gamma, beta = p[f"{prefix}.weight"], p[f"{prefix}.bias"]
        mean, var = p[f"{prefix}.running_mean"], p[f"{prefix}.running_var"]
        if mode == "infer":
            return layers.batchnorm_infer(x, gamma, beta, mean, var)
        if mode == "frozen":
            y, cache = layers.batchnorm_frozen_fwd(x, gamma, beta, mean, var)
            caches[prefix] = cache
            return y
        y, cache, mu, var_unbiased = layers.batchnorm_fwd(x, gamma, beta)
        m = layers.BN_MOMENTUM
        p[f"{prefix}.running_mean"] = ((1 - m) * mean + m * mu).astype(mean.dtype)
        p[f"{prefix}.running_var"] = ((1 - m) * var + m * var_unbiased).astype(var.dtype)
        caches[prefix] = cache
        return y

    def _block_mode(self, blk: _BlockExec, train, eval_blocks):
        if not train:
            return "infer"
        return "frozen" if blk.name in eval_blocks else "train"

    def _block_forward(self, blk: _BlockExec, x, train, caches=None, eval_blocks=frozenset()):
        p = self.params
        mode = self._block_mode(blk, train, eval_blocks)
        c = {} if mode != "infer" else None
        if blk.is_stem:
            if mode != "infer":
                h, c["conv"] = layers.conv2d_fwd(x, p[blk.tensor("conv.weight")], 2, 3)
            else:
                h = layers.conv2d(x, p[blk.tensor("conv.weight")], 2, 3)
            h = self._bn(h, blk.tensor("bn"), mode, c)
            if mode != "infer":
                h, c["relu"] = layers.relu_fwd(h)
                h, c["pool"] = layers.maxpool_fwd(h)
                caches[blk.name] = c
            else:
                h = layers.maxpool(layers.relu(h))
            return h
        stride = blk.stride
        if mode != "infer":
            h, c["conv1"] = layers.conv2d_fwd(x, p[blk.tensor("conv1.weight")], 1, 0)
            h = self._bn(h, blk.tensor("bn1"), mode, c)
            h, c["relu1"] = layers.relu_fwd(h)
            h, c["conv2"] = layers.conv2d_fwd(h, p[blk.tensor("conv2.weight")], stride, 1)
            h = self._bn(h, blk.tensor("bn2"), mode, c)
            h, c["relu2"] = layers.relu_fwd(h)
            h, c["conv3"] = layers.conv2d_fwd(h, p[blk.tensor("conv3.weight")], 1, 0)
            h = self._bn(h, blk.tensor("bn3"), mode, c)
            if blk.has_projection:
                s, c["convp"] = layers.conv2d_fwd(x, p[blk.tensor("downsample.conv.weight")], stride, 0)
                s = self._bn(s, blk.tensor("downsample.bn"), mode, c)
            else:
                s = x
            y = h + s
            y, c["relu_out"] = layers.relu_fwd(y)
            caches[blk.name] = c
            return y
        h = layers.conv2d(x, p[blk.tensor("conv1.weight")], 1, 0)
        h = layers.relu(self._bn(h, blk.tensor("bn1"), "infer"))
        h = layers.conv2d(h, p[blk.tensor("conv2.weight")], stride, 1)
        h = layers.relu(self._bn(h, blk.tensor("bn2"), "infer"))
        h = layers.conv2d(h, p[blk.tensor("conv3.weight")], 1, 0)
        h = self._bn(h, blk.tensor("bn3"), "infer")
        if blk.has_projection:
            s = layers.conv2d(x, p[blk.tensor("downsample.conv.weight")], stride, 0)
            s = self._bn(s, blk.tensor("downsample.bn"), "infer")
        else:
            s = x
        return layers.relu(h + s)

    def _normalize(self, x):
        mean = self.params[NORM_MEAN].astype(x.dtype)
        std = self.params[NORM_STD].astype(x.dtype)
        return (x - mean[None, :, None, None]) / std[None, :, None, None]

    def forward_stump(self, x, train=False, caches=None, eval_blocks=frozenset()):
        h = self._normalize(x)
        for blk in self.stump_blocks:
            h = self._block_forward(blk, h, train, caches, eval_blocks)
        return h

    def forward_tail(self, stump_out, train=False, caches=None, eval_blocks=frozenset()):
        """Per-branch logits from the shared stump activation."""
        logits = []
        for blocks, (w_name, b_name) in zip(self.branch_blocks, self.heads):
            h = stump_out
            for blk in blocks:
                h = self._block_forward(blk, h, train, caches, eval_blocks)
            feats = layers.global_avg_pool(h)
            if train:
                caches[w_name] = (feats, h.shape)
            logits.append(layers.affine(feats, self.params[w_name], self.params[b_name]))
        return logits

    def forward_batch(self, x, train=False, caches=None, eval_blocks=frozenset()):
        h = self.forward_stump(x, train, caches, eval_blocks)
        return self.forward_tail(h, train, caches, eval_blocks)

    def predict(self, image) -> Prediction:
        x = _image_array(image)[None].astype(np.float32, copy=False)
        logits = self.forward_batch(x)
        branch_probs = np.stack([layers.softmax(l)[0] for l in logits])
        if not np.all(np.isfinite(branch_probs)):
            raise FloatingPointError("non-finite activations in forward pass")
        probs = ensemble_average(branch_probs)
        return Prediction(probs=probs, per_branch_probs=branch_probs)

    # Backward ----------------------------------------------------------

    @staticmethod
    def _store_bn_grads(grads, prefix, dg, db):
        if dg is not None:
            grads[f"{prefix}.weight"] = dg
            grads[f"{prefix}.bias"] = db

    def _block_backward(self, blk: _BlockExec, dy, caches, grads):
        c = caches[blk.name]
        t = blk.tensor
        if blk.is_stem:
            dh = layers.maxpool_bwd(dy, c["pool"])
            dh = layers.relu_bwd(dh, c["relu"])
            dh, dg, db = layers.batchnorm_bwd(dh, c[t("bn")])
            self._store_bn_grads(grads, t("bn"), dg, db)
            dx, dw = layers.conv2d_bwd(dh, c["conv"])
            grads[t("conv.weight")] = dw
            return dx
        dz = layers.relu_bwd(dy, c["relu_out"])
        ds = dz
        dh, dg, db = layers.batchnorm_bwd(dz, c[t("bn3")])
        self._store_bn_grads(grads, t("bn3"), dg, db)
        dh, dw = layers.conv2d_bwd(dh, c["conv3"])
        grads[t("conv3.weight")] = dw
        dh = layers.relu_bwd(dh, c["relu2"])
        dh, dg, db = layers.batchnorm_bwd(dh, c[t("bn2")])
        self._store_bn_grads(grads, t("bn2"), dg, db)
        dh, dw = layers.conv2d_bwd(dh, c["conv2"])
        grads[t("conv2.weight")] = dw
        dh = layers.relu_bwd(dh, c["relu1"])
        dh, dg, db = layers.batchnorm_bwd(dh, c[t("bn1")])
        self._store_bn_grads(grads, t("bn1"), dg, db)
        dx, dw = layers.conv2d_bwd(dh, c["conv1"])
        grads[t("conv1.weight")] = dw
        if blk.has_projection:
            dsp, dg, db = layers.batchnorm_bwd(ds, c[t("downsample.bn")])
            self._store_bn_grads(grads, t("downsample.bn"), dg, db)
            dsx, dw = layers.conv2d_bwd(dsp, c["convp"])
            grads[t("downsample.conv.weight")] = dw
            dx = dx + dsx
        else:
            dx = dx + ds
        return dx

    def backward_tail(self, dlogits, caches, grads):
        """Accumulate tail gradients; returns the gradient at the stump output."""
        dstump = None
        for blocks, (w_name, b_name), dl in zip(self.branch_blocks, self.heads, dlogits):
            feats, h_shape = caches[w_name]
            dfeat, dw, db = layers.affine_bwd(dl, feats, self.params[w_name])
            grads[w_name] = dw
            grads[b_name] = db
            dh = layers.gap_bwd(dfeat, h_shape)
            for blk in reversed(blocks):
                dh = self._block_backward(blk, dh, caches, grads)
            dstump = dh if dstump is None else dstump + dh
        return dstump

    def backward_stump(self, dstump, caches, grads):
        dh = dstump
        for blk in reversed(self.stump_blocks):
            dh = self._block_backward(blk, dh, caches, grads)
        return dh


def forward(spec: ArchSpec, store: TensorStore, image) -> Prediction:
    """Single-image inference: stem, phases, per-branch heads, mean of softmax."""
    return Model(spec, store.arrays()).predict(image)


def ensemble_average(per_branch: np.ndarray) -> np.ndarray:
    """Arithmetic mean over branch probability rows, in branch order."""
    per_branch = np.asarray(per_branch)
    sums = per_branch.sum(axis=-1)
    if np.any(per_branch < -1e-6) or not np.allclose(sums, 1.0, atol=1e-4):
        raise ValueError("branch probabilities are not on the simplex")
    return per_branch.mean(axis=0)


# Pruning ---------------------------------------------------------------------


def _conv_weight_names(spec: ArchSpec) -> list[str]:
    names = []
    for desc in enumerate_blocks(spec):
        for name in block_tensor_names(desc):
            if ".conv" in name and name.endswith(".weight") and ".bn" not in name:
                names.append(name)
    return names


def _channel_fraction(sparsity: float) -> float:
    # Conv parameters scale with both in and out widths, so removing a
    # fraction f of channels removes ~1 - (1-f)^2 of the parameters.
    return 1.0 - math.sqrt(1.0 - sparsity) if sparsity < 1.0 else 1.0


def _keep_count(width: int, fraction: float) -> int:
    return max(1, width - round(fraction * width))


def _channel_keep_widths(spec: ArchSpec, sparsity: float) -> dict[str, int]:
    """Kept width per channel group; groups cover the stem stream, each
    phase's residual stream, and each block's two internal widths."""
    f = _channel_fraction(sparsity)
    keep = {"stem": _keep_count(64, f)}
    for phase in (2, 3, 4, 5):
        keep[f"stream{phase}"] = _keep_count(OUT_WIDTHS[phase], f)
    for desc in enumerate_blocks(spec):
        if desc.phase_index == 1:
            continue
        keep[f"{desc.name}.mid1"] = _keep_count(desc.mid_channels, f)
        keep[f"{desc.name}.mid2"] = _keep_count(desc.mid_channels, f)
    return keep


def pruned_param_count(spec: ArchSpec, prune: PruneSpec) -> int:
    """Learnable parameters remaining after pruning (element mode counts its
    zeroed weights as removed).  Pure arithmetic, seed-independent."""
    total = analyzer.total_params(spec)
    if prune.granularity == "element":
        return total - int(prune.sparsity * analyzer.conv_weight_count(spec))
    if prune.granularity == "block":
        k = _block_removal_count(spec, prune.sparsity)
        return analyzer.total_params(analyzer.reduced_spec_after_removals(spec, k))
    keep = _channel_keep_widths(spec, prune.sparsity)
    count = keep["stem"] * 3 * 49 + 2 * keep["stem"]
    prev_stream = keep["stem"]
    for desc in enumerate_blocks(spec):
        if desc.phase_index == 1:
            continue
        stream = keep[f"stream{desc.phase_index}"]
        cin = prev_stream if desc.block_index_in_phase == 1 else stream
        mid1 = keep[f"{desc.name}.mid1"]
        mid2 = keep[f"{desc.name}.mid2"]
        count += mid1 * cin + 2 * mid1
        count += mid2 * mid1 * 9 + 2 * mid2
        count += stream * mid2 + 2 * stream
        if desc.has_projection:
            count += stream * cin + 2 * stream
        if desc.block_index_in_phase == spec.blocks_in_phase(desc.phase_index):
            prev_stream = stream
    count += spec.num_classes * keep["stream5"] + spec.num_classes
    return count


def _block_removal_count(spec: ArchSpec, sparsity: float) -> int:
    """Number of blocks whose removal lands nearest the requested sparsity."""
    total = analyzer.total_params(spec)
    order = analyzer.block_removal_order(spec)
    best_k, best_err = 0, abs(sparsity)
    for k in range(1, len(order) + 1):
        reduced = analyzer.reduced_spec_after_removals(spec, k)
        realized = 1.0 - analyzer.total_params(reduced) / total
        err = abs(realized - sparsity)
        if err < best_err:
            best_k, best_err = k, err
    return best_k


def apply_prune(
    spec: ArchSpec, store: TensorStore, prune: PruneSpec
) -> tuple[ArchSpec, TensorStore, float]:
    """Materialize one pruning granularity; returns (spec', store', realized).

    element: zeroes an exact count of conv weights, shapes unchanged.
    channel: slims random output channels per group with downstream inputs
             re-dimensioned to match (residual streams share one index set
             per phase so skip additions stay aligned).
    block:   drops whole blocks, last-added first, never a phase opener.
    """
    if spec.branch_plan is not None:
        raise ValueError("pruning targets unbranched specs")
    base_params = store.param_count()

    if prune.granularity == "element":
        names = _conv_weight_names(spec)
        sizes = [store[n].size for n in names]
        k = int(prune.sparsity * sum(sizes))
        quotas = _largest_remainder(sizes, prune.sparsity, k)
        out = TensorStore()
        for name, arr in store.items():
            out.add(name, arr)
        zeroed = 0
        for i, name in enumerate(names):
            if quotas[i] == 0:
                continue
            rng = rng_stream(prune.seed, 6, i)
            flat = out[name].copy().reshape(-1)
            idx = rng.permutation(flat.size)[: quotas[i]]
            flat[idx] = 0.0
            out.replace(name, flat.reshape(store[name].shape))
            zeroed += quotas[i]
        return spec, out, zeroed / base_params

    if prune.granularity == "block":
        k = _block_removal_count(spec, prune.sparsity)
        reduced = analyzer.reduced_spec_after_removals(spec, k)
        keep_names = set()
        for desc in enumerate_blocks(reduced):
            keep_names.update(block_tensor_names(desc))
        out = TensorStore()
        for name, arr in store.items():
            if name in RESERVED or name.startswith("head.") or name in keep_names:
                out.add(name, arr)
        return reduced, out, 1.0 - out.param_count() / base_params

    # channel
    keep = _channel_keep_widths(spec, prune.sparsity)
    indices: dict[str, np.ndarray] = {}
    for i, (group, width) in enumerate(sorted(keep.items())):
        full = _group_full_width(spec, group)
        rng = rng_stream(prune.seed, 7, i)
        indices[group] = np.sort(rng.choice(full, size=width, replace=False))
    out = TensorStore()
    for name in RESERVED:
        if name in store:
            out.add(name, store[name])
    stem_keep = indices["stem"]
    out.add("conv1.conv.weight", np.ascontiguousarray(store["conv1.conv.weight"][stem_keep]))
    for part in ("weight", "bias", "running_mean", "running_var"):
        out.add(f"conv1.bn.{part}", store[f"conv1.bn.{part}"][stem_keep])
    prev_stream = stem_keep
    for desc in enumerate_blocks(spec)[1:]:
        stream = indices[f"stream{desc.phase_index}"]
        cin = prev_stream if desc.block_index_in_phase == 1 else stream
        mid1 = indices[f"{desc.name}.mid1"]
        mid2 = indices[f"{desc.name}.mid2"]
        for conv, bn, rows, cols in (
            ("conv1", "bn1", mid1, cin),
            ("conv2", "bn2", mid2, mid1),
            ("conv3", "bn3", stream, mid2),
        ):
            w = store[f"{desc.name}.{conv}.weight"]
            out.add(
                f"{desc.name}.{conv}.weight",
                np.ascontiguousarray(w[np.ix_(rows, cols)]),
            )
            for part in ("weight", "bias", "running_mean", "running_var"):
                out.add(f"{desc.name}.{bn}.{part}", store[f"{desc.name}.{bn}.{part}"][rows])
        if desc.has_projection:
            w = store[f"{desc.name}.downsample.conv.weight"]
            out.add(
                f"{desc.name}.downsample.conv.weight",
                np.ascontiguousarray(w[np.ix_(stream, cin)]),
            )
            for part in ("weight", "bias", "running_mean", "running_var"):
                out.add(
                    f"{desc.name}.downsample.bn.{part}",
                    store[f"{desc.name}.downsample.bn.{part}"][stream],
                )
        if desc.block_index_in_phase == spec.blocks_in_phase(desc.phase_index):
            prev_stream = stream
    out.add("head.weight", np.ascontiguousarray(store["head.weight"][:, indices["stream5"]]))
    out.add("head.bias", store["head.bias"])
    return spec, out, 1.0 - out.param_count() / base_params


def _group_full_width(spec: ArchSpec, group: str) -> int:
    if group == "stem":
        return 64
    if group.startswith("stream"):
        return OUT_WIDTHS[int(group[len("stream") :])]
    name, which = group.rsplit(".", 1)
    for desc in enumerate_blocks(spec):
        if desc.name == name:
            return desc.mid_channels
    raise KeyError(group)


def _largest_remainder(sizes: list[int], fraction: float, k: int) -> list[int]:
    """Integer quotas per layer summing exactly to k, proportional to size."""
    raw = [fraction * s for s in sizes]
    base = [min(int(r), s) for r, s in zip(raw, sizes)]
    shortfall = k - sum(base)
    order = sorted(range(len(sizes)), key=lambda i: raw[i] - int(raw[i]), reverse=True)
    quotas = list(base)
    i = 0
    while shortfall > 0 and i < len(order):
        j = order[i]
        if quotas[j] < sizes[j]:
            quotas[j] += 1
            shortfall -= 1
        i += 1
    return quotas


# Latency benchmark -----------------------------------------------------------


def bench_latency(
    spec: ArchSpec,
    store: TensorStore,
    prune_sweep: list[PruneSpec],
    repeats: int,
    warmup: int = 5,
) -> list[LatencyRow]:
    """Wall-clock seconds per single-image forward pass, with 95% t-CIs.

    Every sweep point shares the same kernel code and the same input image;
    only the pruned weights differ.  The timed section runs on one thread.
    """
    from scipy import stats

    if repeats < 30:
        raise ValueError(f"repeats must be >= 30, got {repeats}")
    if warmup < 5:
        raise ValueError(f"warmup must be >= 5, got {warmup}")
    rng = rng_stream(0, 8)
    image = rng.uniform(0.0, 1.0, size=(3, spec.input_side, spec.input_side)).astype(np.float32)
    resolution = time.get_clock_info("perf_counter").resolution
    rows = []
    for prune in prune_sweep:
        pruned_spec, pruned_store, _ = apply_prune(spec, store, prune)
        model = Model(pruned_spec, pruned_store.arrays())
        for _ in range(warmup):
            model.predict(image)
        samples = np.empty(repeats)
        for r in range(repeats):
            t0 = time.perf_counter()
            model.predict(image)
            samples[r] = time.perf_counter() - t0
        mean = float(samples.mean())
        if resolution > 0.01 * mean:
            raise RuntimeError(
                f"timer resolution {resolution:g}s too coarse for mean {mean:g}s"
            )
        sd = float(samples.std(ddof=1))
        ci = float(stats.t.ppf(0.975, repeats - 1) * sd / math.sqrt(repeats))
        rows.append(LatencyRow(prune.granularity, prune.sparsity, mean, ci, repeats))
    return rows
