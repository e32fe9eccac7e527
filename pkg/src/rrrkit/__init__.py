"""Toolkit for carving small networks out of a bottleneck-ResNet template:
reduction to configurable block counts, budget-preserving branch splitting,
exact cost accounting, CPU inference with pruning benchmarks, and desk-scale
training with greedy block selection."""

__version__ = "0.1.0"

from .archspec import (
    ArchSpec,
    BlockDescriptor,
    BranchPlan,
    compute_branch_width,
    enumerate_blocks,
    from_text,
    load_arch,
    make_arch,
    minimal_spec,
    save_arch,
    search_space_size,
    template_spec,
    to_text,
)
from .analyzer import (
    CostReport,
    analyze,
    count_flops,
    count_params,
    shape_chain,
    sparsity_of,
    total_flops,
    total_params,
)
from .weightstore import (
    FormatError,
    SplitPlan,
    TensorStore,
    extract_reduced,
    init_store,
    load,
    make_split_plan,
    save,
    solve_budget_offset,
    split_kernels,
)
from .engine import (
    Image,
    LatencyRow,
    Model,
    Prediction,
    PruneSpec,
    apply_prune,
    bench_latency,
    ensemble_average,
    forward,
)
from .training import (
    Dataset,
    SelectionState,
    TrainConfig,
    branch_accuracies,
    evaluate,
    forward_block_selection,
    grad,
    synth_dataset,
    train,
    train_branches,
)
