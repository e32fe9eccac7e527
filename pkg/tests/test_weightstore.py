import numpy as np
import pytest

import rrrkit as rk
from rrrkit.weightstore import FormatError, make_split_plan


def test_save_load_round_trip(tmp_path, small_store):
    path = tmp_path / "model.rrrw"
    rk.save(small_store, path)
    again = rk.load(path)
    assert small_store.equal(again)
    rk.save(again, tmp_path / "model2.rrrw")
    assert (tmp_path / "model.rrrw").read_bytes() == (tmp_path / "model2.rrrw").read_bytes()


def test_load_rejects_bad_magic(tmp_path, small_store):
    path = tmp_path / "model.rrrw"
    rk.save(small_store, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        rk.load(path)


def test_load_rejects_truncation(tmp_path, small_store):
    path = tmp_path / "model.rrrw"
    rk.save(small_store, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        rk.load(path)


def test_load_rejects_trailing_garbage(tmp_path, small_store):
    path = tmp_path / "model.rrrw"
    rk.save(small_store, path)
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(FormatError):
        rk.load(path)


def test_duplicate_names_rejected():
    store = rk.TensorStore()
    store.add("a", np.zeros(3, dtype=np.float32))
    with pytest.raises(ValueError):
        store.add("a", np.zeros(3, dtype=np.float32))


def test_extract_reduced_minimal_keeps_five_blocks(template_store_64):
    minimal = rk.minimal_spec(4, 64)
    reduced = rk.extract_reduced(template_store_64, minimal)
    prefixes = {name.split(".")[0] for name in reduced.names()}
    assert prefixes == {"conv1", "conv2_1", "conv3_1", "conv4_1", "conv5_1", "head", "normalize"}
    assert reduced.param_count() == rk.total_params(minimal)


def test_extract_reduced_full_template_changes_only_head(template_store_64):
    template = rk.template_spec(4, 64)
    out = rk.extract_reduced(template_store_64, template)
    for name in template_store_64.names():
        if name.startswith("head."):
            continue
        assert np.array_equal(out[name], template_store_64[name])
    assert not np.array_equal(out["head.weight"], template_store_64["head.weight"])
    assert np.all(out["head.bias"] == 0.0)


def test_extract_reduced_keeps_first_template_blocks(template_store_64):
    spec = rk.make_arch(2, 3, 2, 1, 4, input_side=64)
    reduced = rk.extract_reduced(template_store_64, spec)
    assert "conv3_3.conv1.weight" in reduced
    assert "conv3_4.conv1.weight" not in reduced
    assert np.array_equal(
        reduced["conv3_3.conv2.weight"], template_store_64["conv3_3.conv2.weight"]
    )


def test_extract_reduced_missing_tensor(template_store_64, small_store):
    with pytest.raises(KeyError):
        rk.extract_reduced(small_store, rk.make_arch(2, 1, 1, 1, 4, input_side=32))


def test_solve_budget_offset_examples():
    base = rk.minimal_spec()  # 20 classes
    assert rk.solve_budget_offset(base, 1) == 0
    # Frozen fixture from the ascending scan; minimality re-verified below.
    assert rk.solve_budget_offset(base, 8) == 11


@pytest.mark.parametrize("b", [2, 4, 8, 16])
def test_solve_budget_offset_minimality(b):
    base = rk.minimal_spec()
    budget = rk.total_params(base)
    a = rk.solve_budget_offset(base, b)
    assert rk.total_params(base.with_plan(rk.BranchPlan(b, a))) <= budget
    if a > 0:
        assert rk.total_params(base.with_plan(rk.BranchPlan(b, a - 1))) > budget
    # Independent scan oracle.
    scan = 0
    while rk.total_params(base.with_plan(rk.BranchPlan(b, scan))) > budget:
        scan += 1
    assert scan == a


def test_solve_budget_offset_infeasible():
    with pytest.raises(ValueError):
        rk.solve_budget_offset(rk.minimal_spec(num_classes=20000), 4096)


def test_split_plan_exact_partition_uses_each_channel_once():
    # conv4_x mid width 256, b=4, a=64 -> per-branch 64; 64*4 = 256 exactly.
    plan = make_split_plan(
        rk.make_arch(1, 1, 1, 1, 4, rk.BranchPlan(4, 64)), seed=0
    )
    entry = plan.layers[0]
    assert entry.branch_out * 4 == entry.pretrained_out == 256
    assert entry.indices == tuple(range(256))
    assert len(set(entry.indices)) == len(entry.indices)
    taken = [entry.branch_slice(j) for j in range(1, 5)]
    assert sorted(i for sl in taken for i in sl) == list(range(256))


def test_split_plan_recycling_multiplicities_balanced():
    # conv5_x stream: pretrained width 2048, want 4*180*8 = 5760 > 2048.
    spec = rk.make_arch(1, 1, 1, 1, 4, rk.BranchPlan(8, 1))
    plan = make_split_plan(spec, seed=3)
    stream5 = plan.layer("conv5_1.s2")
    length = stream5.branch_out * 8
    assert len(stream5.indices) == length
    counts = np.bincount(stream5.indices, minlength=stream5.pretrained_out)
    assert counts.max() - counts.min() <= 1
    assert list(stream5.indices[: stream5.pretrained_out]) == list(range(stream5.pretrained_out))


def test_split_plan_randomized_coverage_suite():
    # Index-list properties across many random (width, branches, offset) cases.
    from rrrkit.weightstore import _index_list
    from rrrkit.rng import stream

    rng = np.random.default_rng(11)
    for case in range(1000):
        c_out = int(rng.integers(1, 96))
        n = int(rng.integers(1, 9))
        c_b = int(rng.integers(1, max(2, c_out // n + 2)))
        want = c_b * n
        indices = _index_list(c_out, want, stream(int(rng.integers(0, 2**31)), 3, case % 1024))
        assert len(indices) == want
        if c_out >= want:
            assert indices == tuple(range(want))
        else:
            counts = np.bincount(indices, minlength=c_out)
            assert counts.max() - counts.min() <= 1
            assert indices[:c_out] == tuple(range(c_out))


def test_split_kernels_deterministic(template_store_64):
    minimal = rk.minimal_spec(4, 64)
    reduced = rk.extract_reduced(template_store_64, minimal)
    spec = minimal.with_plan(rk.BranchPlan(8, rk.solve_budget_offset(minimal, 8)))
    one = rk.split_kernels(reduced, spec, seed=7)
    two = rk.split_kernels(reduced, spec, seed=7)
    assert one.equal(two)
    other = rk.split_kernels(reduced, spec, seed=8)
    assert not one.equal(other)


def test_split_kernels_budget_and_stump(template_store_64):
    minimal = rk.minimal_spec(4, 64)
    reduced = rk.extract_reduced(template_store_64, minimal)
    a = rk.solve_budget_offset(minimal, 8)
    spec = minimal.with_plan(rk.BranchPlan(8, a))
    split = rk.split_kernels(reduced, spec, seed=0)
    assert split.param_count() <= reduced.param_count()
    assert split.param_count() == rk.total_params(spec)
    for name in ("conv1.conv.weight", "conv2_1.conv2.weight", "conv3_1.bn3.running_var"):
        assert np.array_equal(split[name], reduced[name])


def test_split_kernels_slices_follow_plan(template_store_64):
    minimal = rk.minimal_spec(4, 64)
    reduced = rk.extract_reduced(template_store_64, minimal)
    spec = minimal.with_plan(rk.BranchPlan(4, 2))
    seed = 5
    split = rk.split_kernels(reduced, spec, seed=seed)
    plan = make_split_plan(spec, seed=seed)
    l1 = plan.layer("conv4_1.s0")
    for branch in (1, 4):
        rows = np.asarray(l1.branch_slice(branch))
        expect = reduced["conv4_1.conv1.weight"][rows]
        assert np.array_equal(split[f"conv4_1.branch{branch}.conv1.weight"], expect)
        assert np.array_equal(
            split[f"conv4_1.branch{branch}.bn1.running_mean"],
            reduced["conv4_1.bn1.running_mean"][rows],
        )
    # conv5 input columns align with the conv4 output stream rows of the branch.
    s4 = plan.layer("conv4_1.s2")
    rows5 = np.asarray(plan.layer("conv5_1.s0").branch_slice(2))
    cols = np.asarray(s4.branch_slice(2))
    expect = reduced["conv5_1.conv1.weight"][np.ix_(rows5, cols)]
    assert np.array_equal(split["conv5_1.branch2.conv1.weight"], expect)


def test_split_single_branch_is_value_identical(template_store_64):
    minimal = rk.minimal_spec(4, 64)
    reduced = rk.extract_reduced(template_store_64, minimal)
    spec = minimal.with_plan(rk.BranchPlan(1, 0))
    split = rk.split_kernels(reduced, spec, seed=0)
    for block in ("conv4_1", "conv5_1"):
        for leaf in ("conv1.weight", "conv2.weight", "conv3.weight",
                     "downsample.conv.weight", "bn2.weight", "bn3.running_var"):
            assert np.array_equal(split[f"{block}.branch1.{leaf}"], reduced[f"{block}.{leaf}"])


def test_split_shapes_satisfy_bottleneck_relations(template_store_64):
    minimal = rk.minimal_spec(4, 64)
    reduced = rk.extract_reduced(template_store_64, minimal)
    spec = minimal.with_plan(rk.BranchPlan(8, 11))
    split = rk.split_kernels(reduced, spec, seed=0)
    for j in range(1, 9):
        w1 = split[f"conv4_1.branch{j}.conv1.weight"]
        w3 = split[f"conv4_1.branch{j}.conv3.weight"]
        wp = split[f"conv4_1.branch{j}.downsample.conv.weight"]
        assert w1.shape == (79, 512, 1, 1)
        assert w3.shape == (4 * 79, 79, 1, 1)
        assert wp.shape == (4 * 79, 512, 1, 1)
        head = split[f"head.branch{j}.weight"]
        assert head.shape == (4, 4 * 170)
