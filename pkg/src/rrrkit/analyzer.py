"""Exact parameter and FLOP accounting as a pure function of the spec.

Conventions (chosen so the table-style numbers are reproducible and every
count is a plain integer):

* FLOPs are multiply-adds of convolutions and the affine heads, for a single
  image at ``spec.input_side``.  Batch norm, ReLU, pooling, residual adds and
  softmax are excluded.
* ``total_params`` is the full learnable inventory: convolution weights, batch
  norm scale/shift, and head weight + bias (running statistics are buffers,
  not parameters).
* Per-phase report rows show the cost of one representative block at
  convolution-weight granularity: ``params``/``flops`` describe a non-first
  block of the phase (the stem for conv1), ``first_block_*`` the phase opener
  with its projection.  For branched phases the row describes one branch.
"""

from __future__ import annotations

from dataclasses import dataclass

from .archspec import (
    ArchSpec,
    BlockDescriptor,
    POOL_KERNEL,
    POOL_PAD,
    POOL_STRIDE,
    STEM_KERNEL,
    STEM_OUT,
    STEM_PAD,
    STEM_STRIDE,
    enumerate_blocks,
    fill_order,
    make_arch,
)


def _conv_out(side: int, kernel: int, stride: int, pad: int) -> int:
    return (side + 2 * pad - kernel) // stride + 1


def shape_chain(spec: ArchSpec) -> list[tuple[str, int, int]]:
    """(phase name, channels, spatial side) after each phase.

    conv1's entry is taken after its max-pool, so for input 128 the sides run
    32, 32, 16, 8, 4.  Channels of a branched phase are per branch.
    """
    side = _conv_out(spec.input_side, STEM_KERNEL, STEM_STRIDE, STEM_PAD)
    side = _conv_out(side, POOL_KERNEL, POOL_STRIDE, POOL_PAD)
    chain = [("conv1", STEM_OUT, side)]
    for phase in (2, 3, 4, 5):
        if phase >= 3:
            side = _conv_out(side, 3, 2, 1)
        chain.append((f"conv{phase}_x", spec.phase_widths(phase)[1], side))
    return chain


@dataclass(frozen=True)
class PhaseRow:
    phase: str
    params: int
    flops: int
    first_block_params: int
    first_block_flops: int


@dataclass(frozen=True)
class CostReport:
    name: str
    per_phase: tuple[PhaseRow, ...]
    total_params: int
    total_flops: int


def _block_layers(desc: BlockDescriptor, in_side: int) -> list[tuple[int, int, int, int]]:
    """(kernel, c_in, c_out, out_side) per convolution of one block.

    The stride of a downsampling bottleneck rides on the 3x3 convolution; the
    skip projection applies the full block stride.
    """
    if desc.phase_index == 1:
        out_side = _conv_out(in_side, STEM_KERNEL, STEM_STRIDE, STEM_PAD)
        return [(STEM_KERNEL, 3, STEM_OUT, out_side)]
    out_side = _conv_out(in_side, 3, desc.stride, 1)
    layers = [
        (1, desc.in_channels, desc.mid_channels, in_side),
        (3, desc.mid_channels, desc.mid_channels, out_side),
        (1, desc.mid_channels, desc.out_channels, out_side),
    ]
    if desc.has_projection:
        layers.append((1, desc.in_channels, desc.out_channels, out_side))
    return layers


def block_conv_params(desc: BlockDescriptor) -> int:
    """Convolution weights only (the table-row convention)."""
    return sum(k * k * ci * co for k, ci, co, _ in _block_layers(desc, in_side=1))


def block_params(desc: BlockDescriptor) -> int:
    """Full learnable count of one block: conv weights + BN scale/shift."""
    layers = _block_layers(desc, in_side=1)
    return sum(k * k * ci * co + 2 * co for k, ci, co, _ in layers)


def block_flops(desc: BlockDescriptor, in_side: int) -> int:
    """Convolution multiply-adds of one block at the given input side."""
    return sum(k * k * ci * co * s * s for k, ci, co, s in _block_layers(desc, in_side))


def _walk(spec: ArchSpec):
    """Yield (descriptor, input spatial side) over enumerate_blocks order."""
    side = spec.input_side
    num_branches = spec.branch_plan.num_branches if spec.branch_plan else 1
    for desc in enumerate_blocks(spec):
        if desc.phase_index == 1:
            yield desc, side
            side = _conv_out(side, STEM_KERNEL, STEM_STRIDE, STEM_PAD)
            side = _conv_out(side, POOL_KERNEL, POOL_STRIDE, POOL_PAD)
            continue
        yield desc, side
        if desc.branch_index is None or desc.branch_index == num_branches:
            # Advance the spatial chain once per block position.
            side = _conv_out(side, 3, desc.stride, 1)


def analyze(spec: ArchSpec) -> CostReport:
    """Full cost report; see the module docstring for conventions."""
    total_params = 0
    total_flops = 0
    rows: dict[int, dict[str, int]] = {}
    for desc, in_side in _walk(spec):
        total_params += block_params(desc)
        total_flops += block_flops(desc, in_side)
        row = rows.setdefault(desc.phase_index, {})
        key = "first" if desc.block_index_in_phase == 1 else "rest"
        if key not in row:
            row[key] = block_conv_params(desc)
            row[key + "_flops"] = block_flops(desc, in_side)
        if desc.phase_index == 1:
            row.setdefault("rest", row["first"])
            row.setdefault("rest_flops", row["first_flops"])

    # Phases with a single block have no realized non-first block; report the
    # hypothetical one (the table does the same for branched phases).
    chain = {name: side for name, _, side in shape_chain(spec)}
    for phase in (2, 3, 4, 5):
        row = rows[phase]
        if "rest" not in row:
            mid, out = spec.phase_widths(phase)
            branch = 1 if spec.branch_plan and phase in spec.branch_plan.branched_phases() else None
            hypo = BlockDescriptor(phase, 2, False, out, mid, out, 1, branch_index=branch)
            row["rest"] = block_conv_params(hypo)
            row["rest_flops"] = block_flops(hypo, chain[f"conv{phase}_x"])

    num_heads = spec.branch_plan.num_branches if spec.branch_plan else 1
    features = spec.feature_dim()
    total_params += num_heads * (features * spec.num_classes + spec.num_classes)
    total_flops += num_heads * features * spec.num_classes

    per_phase = tuple(
        PhaseRow(
            phase=name,
            params=rows[p]["rest"],
            flops=rows[p]["rest_flops"],
            first_block_params=rows[p]["first"],
            first_block_flops=rows[p]["first_flops"],
        )
        for p, name in zip((1, 2, 3, 4, 5), ("conv1", "conv2_x", "conv3_x", "conv4_x", "conv5_x"))
    )
    return CostReport(spec.name, per_phase, total_params, total_flops)


def count_params(spec: ArchSpec) -> CostReport:
    return analyze(spec)


def count_flops(spec: ArchSpec) -> CostReport:
    return analyze(spec)


def total_params(spec: ArchSpec) -> int:
    return analyze(spec).total_params


def total_flops(spec: ArchSpec) -> int:
    return analyze(spec).total_flops


def conv_weight_count(spec: ArchSpec) -> int:
    """Convolution weights over the whole network (prunable in element mode)."""
    return sum(block_conv_params(d) for d in enumerate_blocks(spec))


def sparsity_of(variant, baseline: ArchSpec) -> float:
    """Fraction of baseline parameters removed by a variant spec or pruning.

    For an ArchSpec variant: 1 - params(variant) / params(baseline).
    For a PruneSpec (duck-typed on .granularity/.sparsity), the realized
    parameter fraction the pruning removes from the baseline; seed-independent
    because only how many channels/blocks/weights go, not which, matters.
    """
    base = total_params(baseline)
    if base <= 0:
        raise ValueError("baseline has no parameters")
    if isinstance(variant, ArchSpec):
        var = total_params(variant)
        if var > base:
            raise ValueError(
                f"variant {variant.name} ({var}) larger than baseline {baseline.name} ({base})"
            )
        return 1.0 - var / base
    if hasattr(variant, "granularity"):
        from .engine import pruned_param_count  # deferred: engine owns PruneSpec

        remaining = pruned_param_count(baseline, variant)
        if remaining > base:
            raise ValueError("pruned variant larger than baseline")
        return 1.0 - remaining / base
    raise TypeError(f"expected ArchSpec or PruneSpec, got {type(variant).__name__}")


def block_removal_order(spec: ArchSpec) -> list[tuple[int, int]]:
    """Blocks in the order the benchmark removes them: reverse fill order.

    Phase openers (and the stem) are structurally required and never listed.
    """
    return list(reversed(fill_order(spec)))


def reduced_spec_after_removals(spec: ArchSpec, k: int) -> ArchSpec:
    """Spec after removing the first k blocks of block_removal_order."""
    order = block_removal_order(spec)
    if not 0 <= k <= len(order):
        raise ValueError(f"can remove between 0 and {len(order)} blocks, got {k}")
    counts = list(spec.blocks_per_phase)
    for phase, _ in order[:k]:
        counts[phase - 2] -= 1
    return make_arch(*counts, spec.num_classes, input_side=spec.input_side)
