"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
complete.  The desk-scale trainings (criteria 5-8) share module-scoped
fixtures, so the whole file performs four 60-epoch runs plus two short
temporal-kernel runs and one transfer fit.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from spatiodec import Conv4DConfig, Conv4DKernel, conv4d, conv4d_oracle
from spatiodec.attention import attention_module, init_attention_module, res_unit
from spatiodec.checks import GRADCHECK_TOLERANCE, run_gradcheck
from spatiodec.data import (
    PhantomSpec,
    _sphere_mask,
    desk_phantom_spec,
    make_splits,
    phantom_generate,
)
from spatiodec.masks import extract_masks
from spatiodec.model import ModelConfig, build, forward, load, named_tensors, save
from spatiodec.ops import Conv3DParams, conv3d
from spatiodec.tensor import value_of
from spatiodec.training import (
    LrSchedule,
    TrainConfig,
    evaluate,
    schedule_update,
    spearman,
    train,
    transfer_fit,
)

DESK_MODEL = ModelConfig(seed=0)
DESK_TRAIN = TrainConfig(epochs=60, lr=1e-3, seed=0)


def report(criterion, ok, detail):
    print(f"\n[criterion {criterion:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# Shared heavy fixtures (desk-scale runs)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    spec = desk_phantom_spec(num_subjects=20, blocks_per_subject_per_class=2, snr=2.0, seed=11)
    manifest = phantom_generate(spec, tmp_path_factory.mktemp("desk"))
    return spec, manifest, make_splits(manifest, 5, 0, seed=0)


@pytest.fixture(scope="module")
def att_run(desk_data, tmp_path_factory):
    _, manifest, split = desk_data
    t0 = time.time()
    best, history = train(build(DESK_MODEL), manifest, split, DESK_TRAIN)
    rep = evaluate(best, manifest, split, DESK_TRAIN)
    runtime = time.time() - t0
    ckpt = tmp_path_factory.mktemp("ckpt") / "desk_att.ckpt"
    save(best, ckpt)
    return {"model": best, "report": rep, "runtime": runtime, "history": history, "ckpt": ckpt}


@pytest.fixture(scope="module")
def plain_run(desk_data):
    _, manifest, split = desk_data
    cfg = dataclasses.replace(DESK_MODEL, variant="resnet4d")
    best, _ = train(build(cfg), manifest, split, DESK_TRAIN)
    return evaluate(best, manifest, split, DESK_TRAIN)


@pytest.fixture(scope="module")
def snr0_run(tmp_path_factory):
    spec = desk_phantom_spec(num_subjects=20, blocks_per_subject_per_class=2, snr=0.0, seed=11)
    manifest = phantom_generate(spec, tmp_path_factory.mktemp("desk0"))
    split = make_splits(manifest, 5, 0, seed=0)
    best, _ = train(build(DESK_MODEL), manifest, split, DESK_TRAIN)
    return evaluate(best, manifest, split, DESK_TRAIN)


@pytest.fixture(scope="module")
def temporal_runs(tmp_path_factory):
    """Classes share one region and differ only in response timing."""
    center = (8, 10, 9)
    spec = PhantomSpec(
        num_classes=3,
        num_subjects=10,
        blocks_per_subject_per_class=2,
        extents=(16, 20, 18),
        block_length=(26, 26, 26),
        regions=[(center, 3.0)] * 3,
        snr=3.0,
        subject_jitter=0,
        class_peak_times=(1.0, 4.0, 8.0),
        zero_mean_response=True,
        seed=23,
    )
    manifest = phantom_generate(spec, tmp_path_factory.mktemp("temporal"))
    split = make_splits(manifest, 5, 0, seed=0)
    cfg = TrainConfig(epochs=30, lr=1e-3, seed=0)
    accs = {}
    for k_t in (5, 1):
        mc = dataclasses.replace(DESK_MODEL, temporal_kernel=k_t, num_classes=3)
        best, _ = train(build(mc), manifest, split, cfg)
        accs[k_t] = evaluate(best, manifest, split, cfg).accuracy
    return accs


@pytest.fixture(scope="module")
def trait_data(tmp_path_factory):
    spec = PhantomSpec(
        num_classes=1,
        num_subjects=25,
        blocks_per_subject_per_class=4,
        extents=(16, 20, 18),
        block_length=26,
        regions=[((5, 5, 5), 2.5)],
        snr=2.0,
        subject_jitter=1,
        trait_coupling=0.5,
        trait_class=0,
        seed=31,
    )
    return spec, phantom_generate(spec, tmp_path_factory.mktemp("trait"))


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_1_oracle_equivalence(rng):
    t0 = time.time()
    grid = [(k_t, s_t, s_s) for k_t in (1, 3, 5) for s_t in (1, 2) for s_s in (1, 2)]
    configs = grid + [tuple(int(v) for v in rng.choice([1, 3, 5], 1)) + tuple(rng.integers(1, 3, 2)) for _ in range(8)]
    worst = 0.0
    for k_t, s_t, s_s in configs:
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        l = int(rng.integers(k_t, 9))
        extents = tuple(int(e) for e in rng.integers(4, 9, 3))
        x = rng.standard_normal((1, c_in, l) + extents)
        k = Conv4DKernel(rng.standard_normal((c_out, c_in, k_t, 3, 3, 3)), rng.standard_normal(c_out))
        cfg = Conv4DConfig(s_t, s_s)
        worst = max(worst, float(np.abs(conv4d(x, k, cfg) - conv4d_oracle(x, k, cfg)).max()))
    elapsed = time.time() - t0
    report(
        1,
        worst <= 1e-10 and elapsed < 30.0,
        f"{len(configs)} configs, worst |conv4d - oracle| = {worst:.2e} (<= 1e-10), {elapsed:.1f} s (< 30 s)",
    )


def test_criterion_2_degenerate_identities(rng):
    # (a) k_t = 1: frame-wise conv3d equivalence, bitwise
    x = rng.standard_normal((2, 2, 5, 7, 6, 7))
    k = Conv4DKernel(rng.standard_normal((3, 2, 1, 3, 3, 3)), rng.standard_normal(3))
    out = conv4d(x, k, Conv4DConfig(s_t=2, s_s=2))
    p3 = Conv3DParams(k.weights[:, :, 0], k.bias, 2, "same_zero")
    framewise_ok = all(np.array_equal(out[:, :, j], value_of(conv3d(x[:, :, 2 * j], p3))) for j in range(out.shape[2]))

    # (b) identity kernel reproduces the (strided) input
    w = np.zeros((1, 1, 1, 3, 3, 3))
    w[0, 0, 0, 1, 1, 1] = 1.0
    ident = Conv4DKernel(w, np.zeros(1))
    x1 = rng.standard_normal((1, 1, 3, 6, 6, 6))
    same = conv4d(x1, ident, Conv4DConfig(1, 1))
    identity_ok = np.array_equal(same[0, 0], x1[0, 0])
    x2 = rng.standard_normal((1, 1, 3, 7, 7, 7))
    strided = conv4d(x2, ident, Conv4DConfig(1, 2))
    strided_ok = np.array_equal(strided[0, 0], x2[0, 0, :, ::2, ::2, ::2])

    # (c) zero kernel yields bias constants
    zk = Conv4DKernel(np.zeros((2, 1, 3, 3, 3, 3)), np.array([2.5, -1.0]))
    zout = conv4d(rng.standard_normal((1, 1, 5, 5, 5, 5)), zk, Conv4DConfig(1, 1))
    zero_ok = np.array_equal(zout[0, 0], np.full(zout.shape[2:], 2.5)) and np.array_equal(
        zout[0, 1], np.full(zout.shape[2:], -1.0)
    )
    report(
        2,
        framewise_ok and identity_ok and strided_ok and zero_ok,
        f"framewise={framewise_ok}, identity={identity_ok}, strided={strided_ok}, zero-bias={zero_ok} (all bitwise)",
    )


def test_criterion_3_gradient_suite():
    t0 = time.time()
    results = run_gradcheck()
    elapsed = time.time() - t0
    worst_name = max(results, key=results.get)
    ok = all(err <= GRADCHECK_TOLERANCE for err in results.values()) and elapsed < 300.0
    detail = ", ".join(f"{name} {err:.1e}" for name, err in results.items())
    report(3, ok, f"worst {worst_name} = {results[worst_name]:.2e} (<= 1e-4), {elapsed:.0f} s (< 5 min); {detail}")


def test_criterion_4_attention_invariants(rng):
    params = init_attention_module(rng, 1, 3, 4, 2, 1, precision="double")
    x = rng.standard_normal((2, 3, 8, 8, 8))

    out = value_of(attention_module(x, params, "infer"))
    m = x
    for ru in params.main:
        m = res_unit(m, ru, "infer")
    m = value_of(m)

    from spatiodec.attention import attention_branch

    a, _ = attention_branch(x, params, "infer")
    av = value_of(a)
    strict = (av > 0).all() and (av < 1).all()

    hooked = value_of(attention_module(x, params, "infer", attention_hook=lambda s: np.zeros(s)))
    hook_bitwise = np.array_equal(hooked, m)

    nz = m != 0
    ratio = out[nz] / m[nz]
    ratio_ok = (ratio > 1).all() and (ratio < 2).all()

    sink = []
    recorded = value_of(attention_module(x, params, "infer", record_sink=sink))
    record_bitwise = np.array_equal(recorded, out) and len(sink) == 1

    report(
        4,
        strict and hook_bitwise and ratio_ok and record_bitwise,
        f"A in (0,1)={strict}, zero-hook bitwise={hook_bitwise}, out/M in (1,2)={ratio_ok}, "
        f"recording bitwise-neutral={record_bitwise}",
    )


def test_criterion_5_desk_learnability(att_run, snr0_run):
    acc = att_run["report"].accuracy
    chance = snr0_run.accuracy
    ok = acc >= 0.95 and (1 / 7 - 0.1) <= chance <= (1 / 7 + 0.1)
    report(
        5,
        ok,
        f"snr=2 instance accuracy {acc:.3f} (>= 0.95) in {att_run['runtime'] / 60:.1f} min "
        f"(target < 20 min); snr=0 control {chance:.3f} (chance 0.143 +/- 0.1)",
    )


def test_criterion_6_variant_ordering(att_run, plain_run, temporal_runs):
    att_acc, plain_acc = att_run["report"].accuracy, plain_run.accuracy
    attention_ok = att_acc >= plain_acc - 0.02
    kernel_ok = temporal_runs[5] >= temporal_runs[1]
    report(
        6,
        attention_ok and kernel_ok,
        f"attention {att_acc:.3f} vs plain {plain_acc:.3f} (>= -0.02); temporal-only phantoms: "
        f"k_t=5 {temporal_runs[5]:.3f} >= k_t=1 {temporal_runs[1]:.3f}",
    )


def test_criterion_7_mask_concentration(att_run, desk_data):
    spec, manifest, split = desk_data
    volumes = extract_masks(att_run["model"], manifest, split, DESK_TRAIN, stage_filter=3)
    wins, details = 0, []
    for cls in range(7):
        mean_mask = np.mean([v.A_mean for v in volumes if v.class_label == cls], axis=0)
        region = _sphere_mask(spec.extents, spec.regions[cls][0], spec.regions[cls][1])
        inside, outside = mean_mask[region].mean(), mean_mask[~region].mean()
        wins += inside > outside
        details.append(f"c{cls} {inside:.3f}/{outside:.3f}")
    report(7, wins >= 6, f"stage-3 mask inside > outside for {wins}/7 classes (need >= 6): " + ", ".join(details))


def test_criterion_8_transfer(att_run, trait_data):
    _, manifest = trait_data
    cfg = TrainConfig(epochs=40, lr=1e-3, seed=0, num_permutations=10000)

    # body bitwise equal, head differs, immediately after load
    src_tensors = dict(named_tensors(att_run["model"]))
    moved = load(att_run["ckpt"], head_kind="regress", allow_head_reinit=True, seed=cfg.seed)
    body_ok, head_differs = True, False
    for name, tensor in named_tensors(moved):
        if name.startswith("head."):
            head_differs = head_differs or tensor.shape != src_tensors[name].shape or not np.array_equal(tensor, src_tensors[name])
        else:
            body_ok = body_ok and np.array_equal(tensor, src_tensors[name])

    model, result = transfer_fit(att_run["ckpt"], manifest, "regress", cfg)
    ok = body_ok and head_differs and result.r_s > 0 and result.p_perm < 0.05
    report(
        8,
        ok,
        f"body bitwise={body_ok}, head reinitialized={head_differs}; held-out spearman "
        f"r_s = {result.r_s:.3f} (> 0), p_perm = {result.p_perm:.4f} (< 0.05), n = {result.n}",
    )


def test_criterion_9_protocol_conformance(desk_data, att_run):
    # (a) synthetic loss sequence: exact /5 decays after 15-epoch plateaus
    sched = LrSchedule()
    trace = []
    losses = [1.0] + [1.0] * 15 + [0.5] + [0.5] * 15 + [0.4]
    for loss in losses:
        trace.append(schedule_update(sched, loss))
    lr_ok = (
        trace[0] == 1e-4
        and trace[15] == pytest.approx(2e-5)
        and trace[16] == pytest.approx(2e-5)
        and trace[31] == pytest.approx(4e-6)
        and all(a >= b for a, b in zip(trace, trace[1:]))
    )

    # (b) subject-disjoint 70/10/20 (+/- 1 subject) splits across all folds
    _, manifest, _ = desk_data
    split_ok, all_test = True, []
    for fold in range(5):
        plan = make_splits(manifest, 5, fold, seed=0)
        sizes = (len(plan.train), len(plan.val), len(plan.test))
        split_ok = split_ok and sizes == (14, 2, 4)
        split_ok = split_ok and not (set(plan.train) | set(plan.val)) & set(plan.test)
        all_test.extend(plan.test)
    split_ok = split_ok and sorted(all_test) == manifest.subjects()

    # (c) fixed seed reproduces the loss history bitwise (short desk run)
    _, manifest, split = desk_data
    short = dataclasses.replace(DESK_TRAIN, epochs=3)
    h1 = train(build(DESK_MODEL), manifest, split, short)[1]
    h2 = train(build(DESK_MODEL), manifest, split, short)[1]
    history_ok = h1 == h2

    # (d) checkpoint round trip preserves forward outputs bitwise
    restored = load(att_run["ckpt"])
    x = np.random.default_rng(5).standard_normal((4, 1) + DESK_MODEL.input_extents).astype(np.float32)
    out_a, _ = forward(att_run["model"], x, "infer")
    out_b, _ = forward(restored, x, "infer")
    ckpt_ok = np.array_equal(value_of(out_a), value_of(out_b))

    report(
        9,
        lr_ok and split_ok and history_ok and ckpt_ok,
        f"lr trace /5 decays={lr_ok}, splits 14/2/4 disjoint all folds={split_ok}, "
        f"seeded history bitwise={history_ok}, checkpoint round trip bitwise={ckpt_ok}",
    )


def test_criterion_10_spearman_oracle(rng):
    def rank_avg(v):
        order = np.argsort(v, kind="stable")
        ranks = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                ranks[order[k]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return ranks

    def oracle(a, b):
        ra, rb = rank_avg(a), rank_avg(b)
        ca, cb = ra - ra.mean(), rb - rb.mean()
        return float((ca * cb).sum() / math.sqrt((ca * ca).sum() * (cb * cb).sum()))

    worst, checked = 0.0, 0
    while checked < 50:
        n = int(rng.integers(3, 40))
        if checked % 2:
            a = rng.integers(0, 6, n).astype(float)  # forces ties
            b = rng.integers(0, 6, n).astype(float)
            if np.ptp(a) == 0 or np.ptp(b) == 0:
                continue
        else:
            a, b = rng.standard_normal(n), rng.standard_normal(n)
        r = spearman(a, b, num_permutations=10)
        worst = max(worst, abs(r.r_s - oracle(a, b)))
        checked += 1

    a, b = rng.standard_normal(25), rng.standard_normal(25)
    base = spearman(a, b, num_permutations=10).r_s
    transformed = spearman(a**3, b, num_permutations=10).r_s
    invariant = abs(base - transformed) <= 1e-14

    report(
        10,
        worst <= 1e-12 and invariant,
        f"50 vectors (with ties) worst |diff| = {worst:.2e} (<= 1e-12); monotone-transform invariant={invariant}",
    )
