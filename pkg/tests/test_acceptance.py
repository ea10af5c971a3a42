"""Acceptance suite: thirteen end-to-end checks, one test per criterion.

Each test appends a PASS/FAIL line to the summary block printed after the
run. The toy segmentation run (criteria 7-11) trains once per session;
its noise level was calibrated so a plain two-block baseline (same width,
same decoder, no recurrence) lands near 0.85 mean foreground Dice, which
is what makes the 0.90 bound on the recurrent model meaningful.
"""
import json
import math
import os
import time

import numpy as np
import pytest

import rdvit.tensor as T
from rdvit.cli import (
    boundary_token_mask,
    main,
    run_model_gradcheck,
    token_majority_class,
)
from rdvit.clustering import ClusterParams, cluster, cluster_oracle
from rdvit.config import parse_run_config
from rdvit.data import Sample, sample_from_bytes, sample_to_bytes
from rdvit.errors import ConfigError
from rdvit.model import (
    build,
    load_checkpoint_arrays,
    save_checkpoint,
)
from rdvit.moe import MoELayer, expert_utilization, moe_param_count
from rdvit.nn import SwiGLU
from rdvit.recurrent import LTIInjection, fixed_point, lti_step, recurrent_loop
from rdvit.rng import RngState
from rdvit.tensor import Tensor
from rdvit.training import evaluate, split_train_val, stack_batch, train_run

from conftest import ACCEPTANCE_LINES


def report(criterion: int, ok: bool, detail: str):
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# Calibration (frozen): at noise 0.25 the two-block baseline reaches 0.85-0.88
# mean foreground Dice under this exact recipe, leaving the 0.90 bound as a
# real architecture margin for the recurrent model.
TOY_CONFIG = """
seed = 42
variant = custom
image_size = 64, 64
patch_size = 8
dim = 96
heads = 3
loops = 4
prelude_layers = 1
coda_layers = 1
lora_rank = 4
moe = true
moe_experts = 4
moe_top_k = 2
moe_expert_dim = 64
seg_head_channels = 48
num_classes = 4
data_kind = cardiac2d
n_samples = 500
val_fraction = 0.2
noise_sigma = 0.25
edge_blur = 1.0
epochs = 20
batch_size = 8
lr = 0.0015
weight_decay = 0.05
dropout = 0.0
drop_path = 0.05
ponder_lambda = 0.01
augment = hflip
"""


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    cfg = parse_run_config(TOY_CONFIG)
    out = tmp_path_factory.mktemp("toy")
    t0 = time.monotonic()
    result = train_run(cfg, out, quiet=True)
    seconds = time.monotonic() - t0
    val = split_train_val(cfg.data_fraction and __import__("rdvit.data", fromlist=["generate"]).generate(cfg.synth_spec()), cfg.val_fraction)[1]
    return cfg, result, val, out, seconds


def test_criterion_1_stable_transition():
    t0 = time.monotonic()
    rng = np.random.default_rng(202)
    ok = True
    for _ in range(100):
        inj = LTIInjection(100)
        inj.log_dt.data = np.array(rng.uniform(-20.0, 20.0))
        inj.log_a.data = rng.uniform(-20.0, 20.0, size=100)
        a = inj.transition().data
        ok &= bool(np.all(a > 0.0) and np.all(a < 1.0))
    zero = LTIInjection(64)
    rho = zero.spectral_radius()
    ok &= abs(rho - math.exp(-1.0)) <= 1e-12
    elapsed = time.monotonic() - t0
    ok &= elapsed < 1.0
    report(1, ok, f"A in (0,1) over 10^4 draws; rho(A)_init={rho:.10f} (e^-1 +- 1e-12); {elapsed:.2f}s")


def test_criterion_2_contraction_fixed_point():
    t0 = time.monotonic()
    rng = np.random.default_rng(77)
    with T.using_dtype(np.float64):
        inj = LTIInjection(32)
        inj.log_a.data = rng.normal(size=32)
        a = inj.transition()
        rho = inj.spectral_radius()
        e = T.constant(rng.normal(size=(2, 6, 32)))
        target = fixed_point(a, inj.gain, e).data
        h = e
        bound0 = np.abs(h.data - target)
        ok = True
        for t in range(1, 101):
            h = lti_step(a, inj.gain, h, e, T.zeros(e.shape))
            err = np.abs(h.data - target)
            ok &= bool(np.all(err <= rho**t * bound0 + 1e-13))
    elapsed = time.monotonic() - t0
    ok &= elapsed < 1.0
    report(2, ok, f"zero-block error <= rho^t bound for all t<=100; rho={rho:.4f}; {elapsed:.2f}s")


def test_criterion_3_act_normalization():
    t0 = time.monotonic()
    rng = np.random.default_rng(31)
    dim, loops, b, n = 8, 6, 100, 100

    class RandomHalt:
        def __call__(self, h):
            p = rng.uniform(size=h.shape[:2])
            p[0, 0] = 0.0  # a patch that never halts on its own
            p[0, 1] = 1.0  # a patch that halts at the first step
            return T.constant(p, like=h)

    class ZeroBlock:
        def __call__(self, x, train=False, rng=None):
            return x

    e = T.constant(rng.normal(size=(b, n, dim)))
    _, _, _, weights = recurrent_loop(
        ZeroBlock(), LTIInjection(dim), RandomHalt(), None, e, loops, 0.95, dim
    )
    total = np.stack([w.data for w in weights]).sum(axis=0)
    ok = bool(np.all(np.abs(total - 1.0) <= 1e-6))
    elapsed = time.monotonic() - t0
    ok &= elapsed < 1.0
    report(3, ok, f"sum_t w_t = 1 +- 1e-6 over {b * n} traces (max dev {np.abs(total - 1).max():.2e}); {elapsed:.2f}s")


def test_criterion_4_gradient_correctness():
    t0 = time.monotonic()
    rep = run_model_gradcheck(eps=1e-5)
    worst = max(err for _, _, err in rep)
    elapsed = time.monotonic() - t0
    ok = worst < 1e-4 and elapsed < 120.0
    report(4, ok, f"max rel err {worst:.2e} over {len(rep)} parameter groups (< 1e-4); {elapsed:.0f}s")


def test_criterion_5_moe_properties():
    t0 = time.monotonic()
    rng = np.random.default_rng(9)
    ok = True

    # degenerate single-expert layer collapses onto its one SwiGLU
    layer = MoELayer(12, 1, 1, 8, RngState(5))
    layer.shared.down.weight.data[:] = 0.0
    x = T.constant(rng.normal(size=(2, 6, 12)))
    ok &= bool(np.max(np.abs(layer(x).data - layer.experts[0](x).data)) <= 1e-12)

    # weights sum to one for arbitrary logits
    wide = MoELayer(16, 6, 3, 8, RngState(6))
    xw = T.constant(rng.normal(size=(2, 50, 16)) * 5.0)
    _, weights, weights_full = wide.route(xw)
    ok &= bool(np.max(np.abs(weights.sum(-1) - 1.0)) <= 1e-12)
    ok &= bool(np.max(np.abs(weights_full.data.sum(-1) - 1.0)) <= 1e-12)

    # worked example against the scalar oracle
    probe = MoELayer(4, 4, 2, 8, RngState(7))
    probe.router.weight.data = np.eye(4)
    _, w, _ = probe.route(T.constant(np.array([[[2.0, 1.0, 0.0, -1.0]]])))
    e2, e1 = math.exp(2.0), math.exp(1.0)
    oracle = np.array([e2, e1]) / (e2 + e1)
    ok &= bool(np.max(np.abs(w[0, 0] - oracle)) <= 1e-3)
    ok &= bool(np.max(np.abs(w[0, 0] - [0.731, 0.269])) <= 1e-3)

    counts = moe_param_count(256, 8, 2, 96)
    ok &= counts["routed"] == 589_824
    ok &= counts["shared"] == 147_456
    ok &= counts["total"] == 737_280

    elapsed = time.monotonic() - t0
    ok &= elapsed < 10.0
    report(5, ok, f"degeneracy <=1e-12, weights sum 1, worked example +-1e-3, counts exact; {elapsed:.1f}s")


def test_criterion_6_clustering_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(1001)
    params = ClusterParams(seed_threshold=0.6, grid_cell=3.0, min_cluster_size=2)
    agree = 0
    for trial in range(200):
        shape = tuple(rng.integers(8, 15, size=3))
        seed = rng.uniform(size=shape)
        offsets = rng.normal(size=(3,) + shape) * 2.0
        fdi = rng.normal(size=(int(rng.integers(3, 8)),) + shape)
        fast = cluster(seed, offsets, fdi, params)
        slow = cluster_oracle(seed, offsets, fdi, params)
        same = len(fast) == len(slow) and all(
            np.array_equal(a.voxels, b.voxels) and a.fdi_label == b.fdi_label
            for a, b in zip(fast, slow)
        )
        agree += same
    ok = agree == 200

    # the discard rule is strict: a 50-voxel group dies, 51 survives
    shape = (10, 10, 60)
    for size, expected in ((50, 0), (51, 1)):
        seed = np.zeros(shape)
        offsets = np.zeros((3,) + shape)
        fdi = np.zeros((4,) + shape)
        fdi[0] = 1.0
        for i in range(size):
            seed[2, 2, i] = 0.9
            offsets[:, 2, 2, i] = (0, 0, -i)
            fdi[0, 2, 2, i] = 0.0
            fdi[1, 2, 2, i] = 2.0
        got = cluster(seed, offsets, fdi, ClusterParams())
        ok &= len(got) == expected

    # majority vote with a background-dominated group dropped
    seed = np.zeros((8, 8, 8))
    offsets = np.zeros((3, 8, 8, 8))
    fdi = np.zeros((4, 8, 8, 8))
    fdi[0] = 1.0
    votes = [2, 2, 3, 2, 3]  # majority class 2
    for i, cls in enumerate(votes):
        seed[1, 1, 1 + i] = 0.9
        offsets[:, 1, 1, 1 + i] = (0, 0, -i)
        fdi[0, 1, 1, 1 + i] = 0.0
        fdi[cls, 1, 1, 1 + i] = 2.0
    got = cluster(seed, offsets, fdi, ClusterParams(min_cluster_size=3))
    ok &= len(got) == 1 and got[0].fdi_label == 2

    elapsed = time.monotonic() - t0
    ok &= elapsed < 60.0
    report(6, ok, f"cluster == oracle on {agree}/200 random fields; discard/vote fixtures hold; {elapsed:.0f}s")


def test_criterion_7_toy_training(toy_run):
    cfg, result, _, _, seconds = toy_run
    dice = result.final_dice
    ok = dice >= 0.90 and seconds < 900.0
    report(
        7,
        ok,
        f"toy cardiac2d (noise {cfg.noise_sigma}): mean foreground Dice {dice:.4f} "
        f">= 0.90 in {seconds:.0f}s (< 900s; two-block baseline calibrated to ~0.85)",
    )


def test_criterion_8_depth_extrapolation(toy_run):
    cfg, result, val, _, _ = toy_run
    t0 = time.monotonic()
    model = result.model
    trained_t = cfg.loops
    dices = {}
    for t_eval in (trained_t // 2, trained_t, 2 * trained_t, 4 * trained_t):
        ev = evaluate(model, val, cfg.num_classes, cfg.batch_size, loops=t_eval)
        dices[t_eval] = ev.mean_dice
    ok = all(np.isfinite(v) for v in dices.values())
    base = dices[trained_t]
    ok &= abs(dices[2 * trained_t] - base) <= 0.02
    ok &= abs(dices[4 * trained_t] - base) <= 0.02
    ok &= dices[trained_t // 2] <= base + 0.02
    elapsed = time.monotonic() - t0
    ok &= elapsed < 120.0
    detail = ", ".join(f"T={t}: {v:.4f}" for t, v in sorted(dices.items()))
    report(8, ok, f"{detail} (plateau within 0.02); {elapsed:.0f}s")


def test_criterion_9_ponder_dynamics(toy_run):
    _, _, _, out, _ = toy_run
    lines = (out / "metrics.csv").read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("mean_ponder")
    series = [float(row.split(",")[col]) for row in lines[1:]]
    final, peak = series[-1], max(series)
    ok = final < peak
    report(
        9,
        ok,
        f"mean ponder final {final:.3f} vs max {peak:.3f} "
        f"(requires a fall below the peak; series {'varies' if len(set(series)) > 1 else 'is flat'})",
    )


def test_criterion_10_boundary_allocation(toy_run):
    cfg, result, val, _, _ = toy_run
    grid = cfg.model_config().grid()
    model = result.model
    boundary_tn = []
    interior_tn = []
    for lo in range(0, len(val), cfg.batch_size):
        chunk = val[lo : lo + cfg.batch_size]
        images, labels, _, _ = stack_batch(chunk)
        _, stats = model.forward(Tensor(images), train=False)
        for i, sample in enumerate(chunk):
            mask = boundary_token_mask(sample.label, grid, width=2)
            tn = stats.iters_per_token[i]
            boundary_tn.extend(tn[mask])
            interior_tn.extend(tn[~mask])
    b_mean = float(np.mean(boundary_tn))
    i_mean = float(np.mean(interior_tn))
    ok = b_mean >= i_mean - 1e-6
    report(
        10,
        ok,
        f"mean T_n boundary {b_mean:.4f} vs interior {i_mean:.4f} (gap {b_mean - i_mean:+.4f})",
    )


def _routing_table(model, val, cfg):
    grid = cfg.model_config().grid()
    indices_list, labels_list = [], []
    for lo in range(0, len(val), cfg.batch_size):
        chunk = val[lo : lo + cfg.batch_size]
        images, _, _, _ = stack_batch(chunk)
        model.forward(Tensor(images), train=False)
        idx = model.core.ffn.last_indices
        indices_list.append(idx)
        labels_list.append(
            np.stack([token_majority_class(s.label, grid) for s in chunk])
        )
    return expert_utilization(
        indices_list, labels_list, cfg.moe_experts, cfg.num_classes
    )


def test_criterion_11_moe_specialization(toy_run):
    cfg, result, val, _, _ = toy_run
    assert isinstance(result.model.core.ffn, MoELayer)
    stats = _routing_table(result.model, val, cfg)
    _, dof, p_trained = stats.chi_squared_independence()
    fresh = build(cfg.model_config(), cfg.variant, RngState(987).spawn("init"))
    _, _, p_fresh = _routing_table(fresh, val, cfg)
    ok = p_trained < 0.01 and p_fresh >= 0.01
    report(
        11,
        ok,
        f"class x expert dependence: trained p={p_trained:.3g} (< 0.01), "
        f"untrained p={p_fresh:.3g} (dof {dof})",
    )


MICRO_CONFIG = (
    "seed = 6\nimage_size = 32, 32\npatch_size = 8\ndim = 24\nheads = 2\n"
    "loops = 2\nprelude_layers = 1\ncoda_layers = 1\nlora_rank = 2\n"
    "dropout = 0.1\ndrop_path = 0.1\nseg_head_channels = 8\nn_samples = 12\n"
    "val_fraction = 0.25\nepochs = 2\nbatch_size = 4\nlr = 0.001\naugment = hflip\n"
)


def test_criterion_12_determinism(tmp_path):
    cfg = tmp_path / "micro.cfg"
    cfg.write_text(MICRO_CONFIG)
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = main(["train", "--config", str(cfg), "--out", str(out), "--quiet"])
        assert code == 0
        outs.append(out)
    ok = True
    compared = []
    for name in ("metrics.csv", "ckpt_best.rdvt", "ckpt_last.rdvt"):
        same = (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        ok &= same
        compared.append(f"{name}={'identical' if same else 'DIFFERS'}")
    report(12, ok, "; ".join(compared))


def test_criterion_13_format_round_trips(tmp_path):
    rng = np.random.default_rng(55)
    ok = True
    for trial in range(100):
        ndim = int(rng.integers(2, 4))
        dims = tuple(rng.integers(2, 9, size=ndim))
        with_fields = ndim == 3 and trial % 2 == 0
        sample = Sample(
            kind="cardiac2d" if ndim == 2 else "teeth3d",
            image=rng.normal(size=dims).astype(np.float32),
            label=rng.integers(0, 33, size=dims).astype(np.uint8),
            offsets=rng.normal(size=(3,) + dims).astype(np.float32) if with_fields else None,
            instance_ids=rng.integers(0, 9, size=dims).astype(np.uint16) if with_fields else None,
        )
        blob = sample_to_bytes(sample)
        back = sample_from_bytes(blob, kind=sample.kind)
        ok &= sample_to_bytes(back) == blob
        ok &= np.array_equal(back.image, sample.image)
        ok &= np.array_equal(back.label, sample.label)

    path = tmp_path / "t.rdvt"
    for trial in range(100):
        state = {}
        for k in range(int(rng.integers(1, 6))):
            shape = tuple(rng.integers(1, 5, size=int(rng.integers(0, 4))))
            state[f"g{trial}.p{k}"] = rng.normal(size=shape).astype(np.float32)
        save_checkpoint(path, state)
        back = load_checkpoint_arrays(path)
        ok &= set(back) == set(state)
        ok &= all(
            np.array_equal(back[k], state[k]) and back[k].shape == state[k].shape
            for k in state
        )
    report(13, ok, "100 sample and 100 checkpoint round-trips bitwise lossless")
