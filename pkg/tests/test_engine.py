import numpy as np
import pytest

import oracles
import rrrkit as rk
from rrrkit.engine import Model, pruned_param_count

GOLDEN_PROBS = np.array([0.41815233, 0.41184062, 0.03996312, 0.13004394], dtype=np.float32)


def golden_image():
    return rk.synth_dataset(4, 1, 32, seed=9).images[2]


def test_forward_matches_frozen_golden_vector(small_spec, small_store):
    pred = rk.forward(small_spec, small_store, golden_image())
    assert oracles.rel_err(pred.probs, GOLDEN_PROBS) < 1e-5


def test_golden_vector_reproduced_by_oracle(small_spec, small_store):
    probs = oracles.forward_bottleneck_net(small_spec, small_store.arrays(), golden_image())
    assert oracles.rel_err(probs[0], GOLDEN_PROBS) < 1e-6


def test_forward_deterministic_bitwise(small_spec, small_store):
    img = golden_image()
    a = rk.forward(small_spec, small_store, img)
    b = rk.forward(small_spec, small_store, img)
    assert a.probs.tobytes() == b.probs.tobytes()


def test_forward_simplex_property(small_spec):
    for seed in range(5):
        store = rk.init_store(small_spec, seed=seed)
        img = rk.synth_dataset(4, 1, 32, seed=seed).images[0]
        pred = rk.forward(small_spec, store, img)
        assert pred.probs.min() >= 0
        assert abs(pred.probs.sum() - 1.0) < 1e-5


def test_branched_forward_equals_manual_branch_mean(template_store_64):
    minimal = rk.minimal_spec(4, 64)
    reduced = rk.extract_reduced(template_store_64, minimal)
    spec = minimal.with_plan(rk.BranchPlan(4, 30))
    split = rk.split_kernels(reduced, spec, seed=0)
    img = rk.synth_dataset(4, 1, 64, seed=1).images[0]
    pred = rk.forward(spec, split, img)
    assert pred.per_branch_probs.shape == (4, 4)
    assert oracles.rel_err(pred.probs, pred.per_branch_probs.mean(axis=0)) < 1e-7
    for row in pred.per_branch_probs:
        assert abs(row.sum() - 1.0) < 1e-5


def test_single_branch_prediction_is_branch_output(template_store_64):
    minimal = rk.minimal_spec(4, 64)
    reduced = rk.extract_reduced(template_store_64, minimal)
    spec = minimal.with_plan(rk.BranchPlan(1, 0))
    split = rk.split_kernels(reduced, spec, seed=0)
    img = rk.synth_dataset(4, 1, 64, seed=2).images[3]
    pred = rk.forward(spec, split, img)
    assert np.array_equal(pred.probs, pred.per_branch_probs[0])


def test_engine_blocks_match_oracle_on_random_small_nets(small_spec):
    # Whole-net comparison across random stores and images.
    for seed in range(8):
        store = rk.init_store(small_spec, seed=100 + seed)
        img = rk.synth_dataset(4, 1, 32, seed=seed).images[0]
        got = rk.forward(small_spec, store, img).probs
        want = oracles.forward_bottleneck_net(small_spec, store.arrays(), img)[0]
        assert oracles.rel_err(got, want) < 1e-5


def test_ensemble_average_examples():
    row = np.array([[0.2, 0.5, 0.3]])
    assert np.allclose(rk.ensemble_average(row), row[0])
    e = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert np.allclose(rk.ensemble_average(e), [0.5, 0.5, 0.0])
    crafted = np.array([[0.6, 0.4], [0.1, 0.9]])
    mean = rk.ensemble_average(crafted)
    assert np.allclose(mean, [0.35, 0.65])
    assert mean.argmax() == 1


def test_ensemble_average_rejects_off_simplex():
    with pytest.raises(ValueError):
        rk.ensemble_average(np.array([[0.7, 0.7]]))


def test_shape_mismatch_reports_tensor_name(small_spec, small_store):
    broken = rk.TensorStore(small_store.arrays())
    broken.replace("conv3_1.conv2.weight", np.zeros((128, 99, 3, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="conv3_1.conv2.weight"):
        rk.forward(small_spec, broken, golden_image())


def test_missing_tensor_reported(small_spec, small_store):
    arrays = small_store.arrays()
    del arrays["conv4_1.bn2.bias"]
    with pytest.raises(ValueError, match="conv4_1.bn2.bias"):
        Model(small_spec, arrays)


def test_analyzer_shape_chain_agrees_with_engine(small_spec, small_store):
    model = Model(small_spec, small_store.arrays())
    x = golden_image()[None]
    h = model.forward_stump(x)
    chain = rk.shape_chain(small_spec)
    sides = {name: side for name, _, side in chain}
    # Stump of an unbranched spec is the whole backbone; walk block by block.
    h = model._normalize(x)
    for blk, (name, channels, side) in zip(model.stump_blocks, chain):
        h = model._block_forward(blk, h, False)
        assert h.shape[1] == channels
        assert h.shape[2] == h.shape[3] == side
    del sides


# Pruning ----------------------------------------------------------------------


def test_prune_zero_sparsity_is_identity(small_spec, small_store):
    for granularity in ("element", "channel", "block"):
        spec2, store2, realized = rk.apply_prune(
            small_spec, small_store, rk.PruneSpec(granularity, 0.0, seed=1)
        )
        assert realized == 0.0
        assert spec2 == small_spec
        assert store2.param_count() == small_store.param_count()
        if granularity == "element":
            assert store2.equal(small_store)


def test_element_prune_exact_zero_count(small_spec, small_store):
    from rrrkit.engine import _conv_weight_names

    prune = rk.PruneSpec("element", 0.9, seed=3)
    _, store2, realized = rk.apply_prune(small_spec, small_store, prune)
    names = _conv_weight_names(small_spec)
    n = sum(small_store[m].size for m in names)
    zeros = sum(int((store2[m] == 0).sum()) for m in names)
    assert zeros == int(0.9 * n)
    assert realized == pytest.approx(zeros / small_store.param_count())
    # Analyzer predicts the same realized sparsity without touching weights.
    assert rk.sparsity_of(prune, small_spec) == pytest.approx(realized)


def test_element_prune_keeps_shapes_and_runs(small_spec, small_store):
    _, store2, _ = rk.apply_prune(small_spec, small_store, rk.PruneSpec("element", 0.5, 7))
    for name in small_store.names():
        assert store2[name].shape == small_store[name].shape
    pred = rk.forward(small_spec, store2, golden_image())
    assert abs(pred.probs.sum() - 1.0) < 1e-5


@pytest.mark.parametrize("sparsity", [0.3, 0.6, 0.9])
@pytest.mark.parametrize("seed", [0, 4])
def test_channel_prune_soundness(small_spec, small_store, sparsity, seed):
    spec2, store2, realized = rk.apply_prune(
        small_spec, small_store, rk.PruneSpec("channel", sparsity, seed)
    )
    assert spec2 == small_spec
    pred = rk.forward(spec2, store2, golden_image())
    assert pred.probs.shape == (4,)
    assert abs(pred.probs.sum() - 1.0) < 1e-5
    assert realized == pytest.approx(sparsity, rel=0.15)
    assert store2.param_count() == pruned_param_count(small_spec, rk.PruneSpec("channel", sparsity, seed))


def test_channel_prune_on_template_hits_requested_sparsity(template_store_64):
    spec = rk.template_spec(4, 64)
    for sparsity in (0.3, 0.6, 0.9):
        prune = rk.PruneSpec("channel", sparsity, seed=2)
        _, store2, realized = rk.apply_prune(spec, template_store_64, prune)
        assert abs(realized - sparsity) <= 0.02 * sparsity
        assert realized == pytest.approx(rk.sparsity_of(prune, spec))


def test_block_prune_semantics_match_reduced_spec(template_store_64):
    spec = rk.template_spec(4, 64)
    prune = rk.PruneSpec("block", 0.5, seed=0)
    spec2, store2, realized = rk.apply_prune(spec, template_store_64, prune)
    assert spec2.blocks_per_phase != spec.blocks_per_phase
    # Equivalent store built independently: reduced extraction plus the
    # original head (block pruning keeps the trained head).
    rebuilt = rk.extract_reduced(template_store_64, spec2)
    img = rk.synth_dataset(4, 1, 64, seed=3).images[0]
    a = rk.forward(spec2, store2, img)
    params = rebuilt.arrays()
    params["head.weight"] = template_store_64["head.weight"]
    params["head.bias"] = template_store_64["head.bias"]
    b = Model(spec2, params).predict(img)
    assert np.array_equal(a.probs, b.probs)
    assert realized == pytest.approx(1.0 - rk.total_params(spec2) / rk.total_params(spec))


def test_block_prune_at_max_reaches_minimal(template_store_64):
    spec = rk.template_spec(4, 64)
    spec2, _, realized = rk.apply_prune(spec, template_store_64, rk.PruneSpec("block", 0.9, 0))
    assert spec2.blocks_per_phase == (1, 1, 1, 1)
    assert realized == pytest.approx(rk.sparsity_of(rk.minimal_spec(4, 64), spec))


def test_block_prune_never_removes_phase_openers(template_store_64):
    spec = rk.template_spec(4, 64)
    for sparsity in (0.2, 0.5, 0.8):
        spec2, store2, _ = rk.apply_prune(spec, template_store_64, rk.PruneSpec("block", sparsity, 0))
        assert all(x >= 1 for x in spec2.blocks_per_phase)
        for opener in ("conv2_1", "conv3_1", "conv4_1", "conv5_1"):
            assert f"{opener}.conv1.weight" in store2


def test_prune_rejects_branched_spec(template_store_64):
    spec = rk.minimal_spec(4, 64).with_plan(rk.BranchPlan(2, 0))
    with pytest.raises(ValueError):
        rk.apply_prune(spec, template_store_64, rk.PruneSpec("block", 0.5, 0))


def test_bench_latency_row_structure(small_spec, small_store):
    sweep = [rk.PruneSpec("block", 0.0, 0), rk.PruneSpec("element", 0.0, 0)]
    rows = rk.bench_latency(small_spec, small_store, sweep, repeats=30)
    assert len(rows) == 2
    for row in rows:
        assert row.n == 30
        assert row.mean_s > 0
        assert row.ci95_s >= 0
    # Same computation at sparsity 0: means fall within each other's CIs.
    a, b = rows
    assert abs(a.mean_s - b.mean_s) <= (a.ci95_s + b.ci95_s) * 3


def test_bench_latency_validates_repeats(small_spec, small_store):
    with pytest.raises(ValueError):
        rk.bench_latency(small_spec, small_store, [rk.PruneSpec("block", 0.0, 0)], repeats=5)
