"""Named-tensor container, the RRRW binary format, and model surgery.

Surgery covers three operations: extracting the tensors of a reduced spec
from a full template store, solving the branch budget offset, and splitting
pretrained kernels into parallel branches by partitioning output channels.

RRRW format (bit-exact, little-endian, no padding):

    magic  b"RRRW"
    u32    version (1)
    u32    tensor count
    per tensor:
        u16    name length, then UTF-8 name
        u8     rank, then rank x u32 dims
        u8     dtype code (0 = f32)
        data   prod(dims) x 4 bytes IEEE-754 f32, row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream as rng_stream

from . import analyzer
from .archspec import (
    ArchSpec,
    BlockDescriptor,
    BranchPlan,
    MID_WIDTHS,
    compute_branch_width,
    enumerate_blocks,
)

MAGIC = b"RRRW"
VERSION = 1
DTYPE_F32 = 0

# Reserved names holding the input normalization constants of the
# pretraining corpus; always carried along, never trained or counted.
NORM_MEAN = "normalize.mean"
NORM_STD = "normalize.std"
RESERVED = (NORM_MEAN, NORM_STD)


class FormatError(ValueError):
    """Raised for malformed RRRW files."""


class TensorStore:
    """Ordered map of unique tensor names to f32 arrays."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self._entries: dict[str, np.ndarray] = {}
        if entries:
            for name, data in entries.items():
                self.add(name, data)

    def add(self, name: str, data: np.ndarray) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate tensor name: {name}")
        arr = np.ascontiguousarray(data, dtype=np.float32)
        self._entries[name] = arr

    def replace(self, name: str, data: np.ndarray) -> None:
        if name not in self._entries:
            raise KeyError(f"missing tensor: {name}")
        self._entries[name] = np.ascontiguousarray(data, dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"missing tensor: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def arrays(self) -> dict[str, np.ndarray]:
        """Name -> array view of the underlying storage (not copied)."""
        return dict(self._entries)

    def equal(self, other: "TensorStore") -> bool:
        """Bit-for-bit equality including entry order."""
        if self.names() != other.names():
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for (_, a), (_, b) in zip(self.items(), other.items())
        )

    def param_count(self) -> int:
        """Learnable scalars: everything except running stats and reserved names."""
        total = 0
        for name, arr in self._entries.items():
            if name in RESERVED or name.endswith(("running_mean", "running_var")):
                continue
            total += arr.size
        return total


def save(store: TensorStore, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(store)))
        for name, arr in store.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<B", DTYPE_F32))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load(path: str | Path) -> TensorStore:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    if view[:4].tobytes() != MAGIC:
        raise FormatError(f"bad magic in {path}: {view[:4].tobytes()!r}")
    if len(view) < 12:
        raise FormatError(f"truncated header in {path}")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} in {path}")
    offset = 12
    store = TensorStore()
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", view, offset)
            offset += 2
            name = view[offset : offset + name_len].tobytes().decode("utf-8")
            if len(view) < offset + name_len:
                raise FormatError(f"truncated name in {path}")
            offset += name_len
            (rank,) = struct.unpack_from("<B", view, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", view, offset)
            offset += 4 * rank
            (dtype_code,) = struct.unpack_from("<B", view, offset)
            offset += 1
        except struct.error:
            raise FormatError(f"truncated tensor header in {path}") from None
        if dtype_code != DTYPE_F32:
            raise FormatError(f"unknown dtype code {dtype_code} for {name}")
        size = math.prod(dims)
        nbytes = 4 * size
        if len(view) < offset + nbytes:
            raise FormatError(f"truncated data for {name} in {path}")
        data = np.frombuffer(view, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += nbytes
        if name in store:
            raise FormatError(f"duplicate tensor name in {path}: {name}")
        store.add(name, data.copy())
    if offset != len(view):
        raise FormatError(f"{len(view) - offset} trailing bytes in {path}")
    return store


# Tensor naming --------------------------------------------------------------

def block_tensor_names(desc: BlockDescriptor) -> list[str]:
    """All tensor names of one block, in layer order."""
    prefix = desc.name
    if desc.phase_index == 1:
        units = [("conv", "bn")]
    else:
        units = [("conv1", "bn1"), ("conv2", "bn2"), ("conv3", "bn3")]
        if desc.has_projection:
            units.append(("downsample.conv", "downsample.bn"))
    names = []
    for conv, bn in units:
        names.append(f"{prefix}.{conv}.weight")
        for part in ("weight", "bias", "running_mean", "running_var"):
            names.append(f"{prefix}.{bn}.{part}")
    return names


def head_names(spec: ArchSpec) -> list[str]:
    if spec.branch_plan is None:
        return ["head.weight", "head.bias"]
    return [
        f"head.branch{j}.{part}"
        for j in range(1, spec.branch_plan.num_branches + 1)
        for part in ("weight", "bias")
    ]


def _block_conv_shapes(desc: BlockDescriptor) -> list[tuple[str, tuple[int, ...], int]]:
    """(conv name, weight shape, out channels) for each unit of a block."""
    prefix = desc.name
    if desc.phase_index == 1:
        return [(f"{prefix}.conv", (64, 3, 7, 7), 64)]
    cin, mid, out = desc.in_channels, desc.mid_channels, desc.out_channels
    shapes = [
        (f"{prefix}.conv1", (mid, cin, 1, 1), mid),
        (f"{prefix}.conv2", (mid, mid, 3, 3), mid),
        (f"{prefix}.conv3", (out, mid, 1, 1), out),
    ]
    if desc.has_projection:
        shapes.append((f"{prefix}.downsample.conv", (out, cin, 1, 1), out))
    return shapes


def _bn_name(conv_name: str) -> str:
    stem, _, leaf = conv_name.rpartition(".")
    bn_leaf = {"conv": "bn", "conv1": "bn1", "conv2": "bn2", "conv3": "bn3"}[leaf]
    return f"{stem}.{bn_leaf}"


def _head_init(features: int, classes: int, rng: np.random.Generator):
    bound = 1.0 / math.sqrt(features)
    weight = rng.uniform(-bound, bound, size=(classes, features)).astype(np.float32)
    bias = np.zeros(classes, dtype=np.float32)
    return weight, bias


def init_store(spec: ArchSpec, seed: int = 0) -> TensorStore:
    """Fresh randomly-initialized store matching the spec.

    He-scaled convolution weights, identity batch norm with unit running
    variance, and mid-gray normalization constants.  Used for synthetic
    experiments and benchmarks where pretrained weights are not needed.
    """
    store = TensorStore()
    store.add(NORM_MEAN, np.full(3, 0.5, dtype=np.float32))
    store.add(NORM_STD, np.full(3, 0.5, dtype=np.float32))
    for k, desc in enumerate(enumerate_blocks(spec)):
        rng = rng_stream(seed, 0, 0, k)
        for conv_name, shape, cout in _block_conv_shapes(desc):
            fan_in = shape[1] * shape[2] * shape[3]
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
            store.add(f"{conv_name}.weight", w)
            bn = _bn_name(conv_name)
            store.add(f"{bn}.weight", np.ones(cout, dtype=np.float32))
            store.add(f"{bn}.bias", np.zeros(cout, dtype=np.float32))
            store.add(f"{bn}.running_mean", np.zeros(cout, dtype=np.float32))
            store.add(f"{bn}.running_var", np.ones(cout, dtype=np.float32))
    head_rng = rng_stream(seed, 1)
    features = spec.feature_dim()
    for j, _ in enumerate(head_names(spec)[::2], start=1):
        weight, bias = _head_init(features, spec.num_classes, head_rng)
        prefix = "head" if spec.branch_plan is None else f"head.branch{j}"
        store.add(f"{prefix}.weight", weight)
        store.add(f"{prefix}.bias", bias)
    return store


# Surgery --------------------------------------------------------------------

def extract_reduced(store: TensorStore, spec: ArchSpec, seed: int = 0) -> TensorStore:
    """Keep the stem and the first x_i template blocks per phase; new head.

    The input must hold the full template tensor set; the output carries the
    reduced spec's blocks untouched plus a freshly initialized head sized for
    ``spec.num_classes`` (the pretraining head never fits the target task).
    """
    if spec.branch_plan is not None:
        raise ValueError("extract_reduced expects an unbranched spec")
    reduced = TensorStore()
    for name in RESERVED:
        if name in store:
            reduced.add(name, store[name])
    for desc in enumerate_blocks(spec):
        for name in block_tensor_names(desc):
            if name not in store:
                raise KeyError(f"template store is missing {name}")
            reduced.add(name, store[name])
    rng = rng_stream(seed, 2)
    weight, bias = _head_init(spec.feature_dim(), spec.num_classes, rng)
    reduced.add("head.weight", weight)
    reduced.add("head.bias", bias)
    return reduced


def solve_budget_offset(spec: ArchSpec, b: int) -> int:
    """Smallest a >= 0 with params(spec + BranchPlan(b, a)) <= params(spec).

    Scans ascending from a = 0; raises if widths fall below one channel
    before the parameter budget is met.
    """
    if spec.branch_plan is not None:
        raise ValueError("budget solve expects an unbranched spec")
    if b < 1:
        raise ValueError(f"branch count must be >= 1, got {b}")
    budget = analyzer.total_params(spec)
    a = 0
    while True:
        try:
            plan = BranchPlan(num_branches=b, budget_offset=a)
        except ValueError:
            raise ValueError(
                f"no feasible budget offset for b={b} on {spec.name}"
            ) from None
        if analyzer.total_params(spec.with_plan(plan)) <= budget:
            return a
        a += 1


@dataclass(frozen=True)
class SplitLayerIndices:
    """Output-channel index list of one split layer, shared by its BN."""

    layer: str
    pretrained_out: int
    branch_out: int
    indices: tuple[int, ...]  # length branch_out * num_branches

    def branch_slice(self, branch: int) -> tuple[int, ...]:
        lo = (branch - 1) * self.branch_out
        return self.indices[lo : lo + self.branch_out]


@dataclass(frozen=True)
class SplitPlan:
    num_branches: int
    rng_seed: int
    layers: tuple[SplitLayerIndices, ...] = field(default_factory=tuple)

    def layer(self, name: str) -> SplitLayerIndices:
        for entry in self.layers:
            if entry.layer == name:
                return entry
        raise KeyError(f"no split indices for layer {name}")


def _index_list(c_out: int, want: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Algorithm: identity prefix when the pretrained layer is wide enough,
    otherwise identity followed by whole shuffled permutations, truncated."""
    if c_out >= want:
        return tuple(range(want))
    indices = list(range(c_out))
    while len(indices) < want:
        indices.extend(rng.permutation(c_out).tolist())
    return tuple(indices[:want])


def make_split_plan(spec: ArchSpec, seed: int) -> SplitPlan:
    """Deterministic per-layer channel index lists for a branched spec.

    Three index lists per block position: the two internal bottleneck widths
    and the residual stream (conv3 and the projection share the stream list so
    the skip addition keeps pairing the same pretrained channels).  Each list
    draws from a counter-based generator keyed by (seed, layer counter), so
    adding later layers never perturbs earlier shuffles.
    """
    plan = spec.branch_plan
    if plan is None:
        raise ValueError("make_split_plan expects a branched spec")
    n = plan.num_branches
    layers = []
    counter = 0
    seen = set()
    for desc in enumerate_blocks(spec):
        if desc.branch_index is None:
            continue
        position = (desc.phase_index, desc.block_index_in_phase)
        if position in seen:
            continue  # identical index lists serve every branch of a position
        seen.add(position)
        template_mid = MID_WIDTHS[desc.phase_index]
        template_out = 4 * template_mid
        for slot, (c_out, want) in enumerate(
            [
                (template_mid, desc.mid_channels * n),
                (template_mid, desc.mid_channels * n),
                (template_out, desc.out_channels * n),
            ]
        ):
            rng = rng_stream(seed, 3, counter)
            counter += 1
            name = f"conv{desc.phase_index}_{desc.block_index_in_phase}.s{slot}"
            layers.append(
                SplitLayerIndices(name, c_out, want // n, _index_list(c_out, want, rng))
            )
    return SplitPlan(n, seed, tuple(layers))


def split_kernels(store: TensorStore, spec: ArchSpec, seed: int = 0) -> TensorStore:
    """Split pretrained tail kernels into branches per the spec's plan.

    Stump tensors pass through untouched.  Every split convolution takes the
    output-channel rows its branch was assigned and the input-channel columns
    that the previous layer assigned to the same branch, so consecutive
    pretrained kernels stay paired.  Batch norm parameters and statistics
    follow their convolution's output indices.  Each branch gets a fresh
    classification head.
    """
    plan = spec.branch_plan
    if plan is None:
        raise ValueError("split_kernels expects a spec with a branch plan")
    split_plan = make_split_plan(spec, seed)
    n = plan.num_branches
    out = TensorStore()
    for name in RESERVED:
        if name in store:
            out.add(name, store[name])

    # Per branch, the pretrained input indices feeding the next split layer;
    # None means the full (unsplit) input from the stump.
    stream_in: list[tuple[int, ...] | None] = [None] * (n + 1)
    for desc in enumerate_blocks(spec):
        if desc.branch_index is None:
            for name in block_tensor_names(desc):
                if name not in store:
                    raise KeyError(f"store is missing {name}")
                out.add(name, store[name])
            continue
        j = desc.branch_index
        src_prefix = f"conv{desc.phase_index}_{desc.block_index_in_phase}"
        key = f"{src_prefix}.s"
        l1 = split_plan.layer(key + "0")
        l2 = split_plan.layer(key + "1")
        l3 = split_plan.layer(key + "2")
        block_in = stream_in[j]
        units = [
            (f"{src_prefix}.conv1", f"{desc.name}.conv1", l1, block_in),
            (f"{src_prefix}.conv2", f"{desc.name}.conv2", l2, l1.branch_slice(j)),
            (f"{src_prefix}.conv3", f"{desc.name}.conv3", l3, l2.branch_slice(j)),
        ]
        if desc.has_projection:
            units.append(
                (f"{src_prefix}.downsample.conv", f"{desc.name}.downsample.conv", l3, block_in)
            )
        for src_conv, dst_conv, layer_idx, in_idx in units:
            weight = store[f"{src_conv}.weight"]
            rows = np.asarray(layer_idx.branch_slice(j), dtype=np.intp)
            sliced = weight[rows]
            if in_idx is not None:
                sliced = sliced[:, np.asarray(in_idx, dtype=np.intp)]
            out.add(f"{dst_conv}.weight", np.ascontiguousarray(sliced))
            src_bn, dst_bn = _bn_name(src_conv), _bn_name(dst_conv)
            for part in ("weight", "bias", "running_mean", "running_var"):
                out.add(f"{dst_bn}.{part}", np.ascontiguousarray(store[f"{src_bn}.{part}"][rows]))
        stream_in[j] = l3.branch_slice(j)

    features = spec.feature_dim()
    for j in range(1, n + 1):
        rng = rng_stream(seed, 4, j)
        weight, bias = _head_init(features, spec.num_classes, rng)
        out.add(f"head.branch{j}.weight", weight)
        out.add(f"head.branch{j}.bias", bias)
    return out
