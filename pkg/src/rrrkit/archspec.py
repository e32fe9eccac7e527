"""The ResNet bottleneck family as data: phases, blocks, and branch plans.

Every architecture in the family is a reduction of the 51-block template
(named ResNet_3_8_36_3 here): four phases of bottleneck blocks sitting on a
fixed stem.  A spec may additionally carry a branch plan that splits the tail
phases into parallel sub-networks, each ending in its own classification head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

PHASE_NAMES = ("conv1", "conv2_x", "conv3_x", "conv4_x", "conv5_x")

# Template budgets and widths for phases conv2_x..conv5_x.
MAX_BLOCKS = (3, 8, 36, 3)
MID_WIDTHS = {2: 64, 3: 128, 4: 256, 5: 512}
OUT_WIDTHS = {2: 256, 3: 512, 4: 1024, 5: 2048}
EXPANSION = 4

# Fixed stem: 7x7/64 convolution stride 2 (pad 3) + 3x3 max-pool stride 2 (pad 1).
STEM_OUT = 64
STEM_KERNEL = 7
STEM_STRIDE = 2
STEM_PAD = 3
POOL_KERNEL = 3
POOL_STRIDE = 2
POOL_PAD = 1


def compute_branch_width(c_o: int, b: int, a: int) -> int:
    """Per-branch bottleneck width: floor(c_o / sqrt(b)) - a.

    Computed in exact integer arithmetic (floor(c/sqrt(b)) == isqrt(c*c // b)),
    so no float rounding can flip a boundary case.
    """
    if c_o < 1 or b < 1 or a < 0:
        raise ValueError(f"invalid width inputs c_o={c_o} b={b} a={a}")
    w = math.isqrt(c_o * c_o // b) - a
    if w < 1:
        raise ValueError(f"branch width {w} < 1 for c_o={c_o} b={b} a={a}")
    return w


@dataclass(frozen=True)
class BranchPlan:
    """How the tail of a network is split into parallel branches.

    The phases at and after ``split_phase`` are replicated ``num_branches``
    times at reduced width; the reduced bottleneck width of a branched phase
    is ``floor(template_width / sqrt(num_branches)) - budget_offset``.
    """

    num_branches: int
    budget_offset: int = 0
    split_phase: int = 4

    def __post_init__(self):
        if self.num_branches < 1:
            raise ValueError(f"num_branches must be >= 1, got {self.num_branches}")
        if self.budget_offset < 0:
            raise ValueError(f"budget_offset must be >= 0, got {self.budget_offset}")
        if self.split_phase not in (4, 5):
            raise ValueError(f"split_phase must be 4 or 5, got {self.split_phase}")
        # Raises if any branched phase would drop below one channel.
        for phase in self.branched_phases():
            compute_branch_width(MID_WIDTHS[phase], self.num_branches, self.budget_offset)

    def branched_phases(self) -> tuple[int, ...]:
        return tuple(p for p in (4, 5) if p >= self.split_phase)

    @property
    def branch_widths(self) -> dict[int, tuple[int, int]]:
        """Per branched phase: (bottleneck width, expansion width)."""
        out = {}
        for phase in self.branched_phases():
            mid = compute_branch_width(MID_WIDTHS[phase], self.num_branches, self.budget_offset)
            out[phase] = (mid, EXPANSION * mid)
        return out


@dataclass(frozen=True)
class ArchSpec:
    """A member of the reduced-ResNet family, optionally branched."""

    blocks_per_phase: tuple[int, int, int, int]
    num_classes: int
    input_side: int = 128
    branch_plan: BranchPlan | None = None

    def __post_init__(self):
        bp = tuple(int(x) for x in self.blocks_per_phase)
        if len(bp) != 4:
            raise ValueError("blocks_per_phase must have four entries")
        object.__setattr__(self, "blocks_per_phase", bp)
        for x, bound, phase in zip(bp, MAX_BLOCKS, (2, 3, 4, 5)):
            if not 1 <= x <= bound:
                raise ValueError(
                    f"conv{phase}_x block count {x} outside template bounds 1..{bound}"
                )
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_side < 1:
            raise ValueError(f"input_side must be >= 1, got {self.input_side}")

    @property
    def name(self) -> str:
        base = "ResNet_" + "_".join(str(x) for x in self.blocks_per_phase)
        if self.branch_plan is not None:
            base += f"-{self.branch_plan.num_branches}_branch"
        return base

    def blocks_in_phase(self, phase: int) -> int:
        return self.blocks_per_phase[phase - 2]

    @property
    def total_blocks(self) -> int:
        """Block count including the stem, which acts as a special block."""
        return 1 + sum(self.blocks_per_phase)

    def phase_widths(self, phase: int) -> tuple[int, int]:
        """(bottleneck width, output width) of a phase under this spec."""
        plan = self.branch_plan
        if plan is not None and phase in plan.branched_phases():
            return plan.branch_widths[phase]
        return MID_WIDTHS[phase], OUT_WIDTHS[phase]

    def feature_dim(self) -> int:
        """Channel count entering each classification head."""
        return self.phase_widths(5)[1]

    def with_plan(self, plan: BranchPlan | None) -> "ArchSpec":
        return ArchSpec(self.blocks_per_phase, self.num_classes, self.input_side, plan)


@dataclass(frozen=True)
class BlockDescriptor:
    """One concrete block instance in forward order.

    The stem descriptor uses phase_index 1 and carries equal mid/out widths;
    bottleneck descriptors (phases 2..5) satisfy out = 4 * mid.  For branched
    phases there is one descriptor per (position, branch) pair.
    """

    phase_index: int
    block_index_in_phase: int
    is_downsampling: bool
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int
    branch_index: int | None = None

    def __post_init__(self):
        if self.phase_index >= 2 and self.out_channels != EXPANSION * self.mid_channels:
            raise ValueError(
                f"{self.name}: out_channels {self.out_channels} != "
                f"{EXPANSION} * mid_channels {self.mid_channels}"
            )
        if self.stride not in (1, 2):
            raise ValueError(f"{self.name}: stride must be 1 or 2")

    @property
    def name(self) -> str:
        base = "conv1" if self.phase_index == 1 else f"conv{self.phase_index}_{self.block_index_in_phase}"
        if self.branch_index is not None:
            base += f".branch{self.branch_index}"
        return base

    @property
    def has_projection(self) -> bool:
        """Bottleneck blocks carry a skip-path projection iff they open a phase."""
        return self.phase_index >= 2 and self.block_index_in_phase == 1


def make_arch(
    x1: int,
    x2: int,
    x3: int,
    x4: int,
    num_classes: int,
    branch_plan: BranchPlan | None = None,
    input_side: int = 128,
) -> ArchSpec:
    """Validate and build a spec named ResNet_x1_x2_x3_x4[-{b}_branch]."""
    return ArchSpec((x1, x2, x3, x4), num_classes, input_side, branch_plan)


def template_spec(num_classes: int = 20, input_side: int = 128) -> ArchSpec:
    """The full 51-block template, ResNet_3_8_36_3."""
    return make_arch(3, 8, 36, 3, num_classes, input_side=input_side)


def minimal_spec(num_classes: int = 20, input_side: int = 128) -> ArchSpec:
    """The smallest member, ResNet_1_1_1_1 (5 blocks including the stem)."""
    return make_arch(1, 1, 1, 1, num_classes, input_side=input_side)


def enumerate_blocks(spec: ArchSpec) -> list[BlockDescriptor]:
    """All blocks in deterministic forward order.

    Stem first, then phases 2..5 position by position; at a branched position
    the b parallel descriptors appear consecutively in branch order 1..b.
    """
    blocks = [
        BlockDescriptor(1, 1, True, 3, STEM_OUT, STEM_OUT, STEM_STRIDE)
    ]
    plan = spec.branch_plan
    branched = plan.branched_phases() if plan is not None else ()
    prev_out = STEM_OUT  # after the stem max-pool
    prev_branch_out: int | None = None
    for phase in (2, 3, 4, 5):
        mid, out = spec.phase_widths(phase)
        stride_first = 1 if phase == 2 else 2
        for i in range(1, spec.blocks_in_phase(phase) + 1):
            first = i == 1
            stride = stride_first if first else 1
            if phase in branched:
                # In-width of the first branched block is the (shared) stump
                # or unbranched-phase output; later widths are per-branch.
                if first:
                    cin = prev_out if prev_branch_out is None else prev_branch_out
                else:
                    cin = out
                for j in range(1, plan.num_branches + 1):
                    blocks.append(
                        BlockDescriptor(phase, i, first, cin, mid, out, stride, branch_index=j)
                    )
            else:
                cin = prev_out if first else out
                blocks.append(BlockDescriptor(phase, i, first, cin, mid, out, stride))
        if phase in branched:
            prev_branch_out = out
        else:
            prev_out = out
    return blocks


def search_space_size() -> int:
    """Number of distinct unbranched members of the family."""
    n = 1
    for bound in MAX_BLOCKS:
        n *= bound
    return n


def fill_order(spec: ArchSpec | None = None) -> list[tuple[int, int]]:
    """The greedy growth order: fill each phase before moving to the next.

    Returns (phase, block_index) pairs for every non-first block position,
    bounded by ``spec`` block counts (template bounds when spec is None).
    """
    counts = spec.blocks_per_phase if spec is not None else MAX_BLOCKS
    order = []
    for phase, top in zip((2, 3, 4, 5), counts):
        for i in range(2, top + 1):
            order.append((phase, i))
    return order


# Text serialization: one "key = value" line per field, UTF-8.  The canonical
# name is the file stem, not a stored field.

def to_text(spec: ArchSpec) -> str:
    lines = [
        "blocks_per_phase = " + ",".join(str(x) for x in spec.blocks_per_phase),
        f"num_classes = {spec.num_classes}",
        f"input_side = {spec.input_side}",
    ]
    plan = spec.branch_plan
    if plan is not None:
        lines += [
            f"branches = {plan.num_branches}",
            f"budget_offset = {plan.budget_offset}",
            f"split_phase = {plan.split_phase}",
        ]
    return "\n".join(lines) + "\n"


def from_text(text: str) -> ArchSpec:
    fields: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed line in arch text: {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in fields:
            raise ValueError(f"duplicate key in arch text: {key}")
        fields[key] = value.strip()
    known = {"blocks_per_phase", "num_classes", "input_side",
             "branches", "budget_offset", "split_phase"}
    unknown = set(fields) - known
    if unknown:
        raise ValueError(f"unknown keys in arch text: {sorted(unknown)}")
    try:
        bp = tuple(int(x) for x in fields["blocks_per_phase"].split(","))
        num_classes = int(fields["num_classes"])
        input_side = int(fields.get("input_side", "128"))
    except KeyError as e:
        raise ValueError(f"missing required key: {e.args[0]}") from None
    plan = None
    if "branches" in fields:
        plan = BranchPlan(
            num_branches=int(fields["branches"]),
            budget_offset=int(fields.get("budget_offset", "0")),
            split_phase=int(fields.get("split_phase", "4")),
        )
    return ArchSpec(bp, num_classes, input_side, plan)


def save_arch(spec: ArchSpec, directory: str | Path) -> Path:
    """Write ``<directory>/<canonical name>.arch`` and return its path."""
    path = Path(directory) / f"{spec.name}.arch"
    path.write_text(to_text(spec), encoding="utf-8")
    return path


def load_arch(path: str | Path) -> ArchSpec:
    return from_text(Path(path).read_text(encoding="utf-8"))
