"""Acceptance gate: ten end-to-end checks, one printed verdict line each.

Run ``pytest -s tests/test_acceptance.py`` to see every verdict as it
completes; each line states the measured quantities next to the threshold they
are held to. The long-tailed training checks (06-08) share one module-scoped
batch of twenty-two desk-scale runs so the whole gate stays fast on a laptop
CPU. Checks 06-09 are directional/statistical claims about the default desk
experiment; the rest are exact contracts.
"""

import math
import time

import numpy as np
import pytest

import gnmlab.models as models_mod
from gnmlab.autodiff import backward, finite_diff_gradient, softmax_cross_entropy
from gnmlab.checkpoint import load_checkpoint, save_checkpoint
from gnmlab.config import RunConfig, apply_overrides
from gnmlab.data import split_classes
from gnmlab.estimator import (
    STREAM_INIT,
    STREAM_PERTURB,
    STREAM_SHUFFLE,
    evaluate_model,
    stream,
)
from gnmlab.harness import (
    balanced_train_subset,
    dataset_from_config,
    eval_loss_fn,
    execute_run,
    initial_state,
    run_experiment,
    run_landscape,
)
from gnmlab.landscape import flatness_score
from gnmlab.models import (
    MLPConfig,
    PromptedNetConfig,
    init_mlp,
    init_prompted,
    model_logits,
)
from gnmlab.optim import (
    OptimizerConfig,
    gnm_step,
    gradient_group_norms,
    learning_rate,
    neighborhood_loss_stats,
    sample_gaussian_perturbation,
)

DESK_SEEDS = tuple(range(11))


def _verdict(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n:02d}] {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 01: autodiff gradients vs central finite differences on randomized models.


class _ReluMarginRecorder:
    """Wraps relu to record the smallest |preactivation| it ever sees.

    Central differences are only trustworthy when no relu input sits within
    the probe distance of its kink, so models whose margin is too small are
    resampled rather than checked against a half-crossed kink.
    """

    def __init__(self, real):
        self.real = real
        self.min_abs = math.inf

    def reset(self) -> None:
        self.min_abs = math.inf

    def __call__(self, a):
        data = a.data if hasattr(a, "data") else np.asarray(a)
        if data.size:
            self.min_abs = min(self.min_abs, float(np.abs(data).min()))
        return self.real(a)


def _random_mlp(rng: np.random.Generator):
    cfg = MLPConfig(
        input_dim=int(rng.integers(2, 9)),
        hidden_dims=tuple(int(rng.integers(2, 7)) for _ in range(int(rng.integers(0, 3)))),
        n_classes=int(rng.integers(2, 6)),
    )
    state = init_mlp(cfg, rng)
    x = rng.standard_normal((3, cfg.input_dim))
    y = rng.integers(0, cfg.n_classes, size=3)
    return state, x, y


def _random_prompted(rng: np.random.Generator):
    cfg = PromptedNetConfig(
        input_dim=int(rng.integers(2, 7)),
        token_dim=int(rng.integers(3, 7)),
        n_patch_tokens=int(rng.integers(1, 4)),
        n_layers=int(rng.integers(1, 3)),
        n_prompts=int(rng.integers(0, 3)),
        n_classes=int(rng.integers(2, 5)),
    )
    state = init_prompted(cfg, rng)
    x = rng.standard_normal((2, cfg.input_dim))
    y = rng.integers(0, cfg.n_classes, size=2)
    return state, x, y


def test_01_autodiff_matches_finite_differences(monkeypatch):
    t0 = time.perf_counter()
    recorder = _ReluMarginRecorder(models_mod.relu)
    monkeypatch.setattr(models_mod, "relu", recorder)

    checked = {"mlp": 0, "prompted": 0}
    resampled = 0
    worst_ratio = 0.0
    for i in range(52):
        for kind, maker in (("mlp", _random_mlp), ("prompted", _random_prompted)):
            for attempt in range(8):
                rng = np.random.default_rng([1, i, attempt, 0 if kind == "mlp" else 1])
                state, x, y = maker(rng)
                params = state.trainable

                def f(p):
                    return softmax_cross_entropy(model_logits(state, x, p), y).item()

                recorder.reset()
                params.zero_grads()
                loss = softmax_cross_entropy(model_logits(state, x, params), y)
                if recorder.min_abs < 1e-4:  # a relu input too close to its kink
                    resampled += 1
                    continue
                backward(loss)
                grads = params.grads()
                analytic = np.concatenate([grads[name].ravel() for name in params.names()])
                fd = finite_diff_gradient(f, params, h=1e-6)
                if recorder.min_abs < 1e-5:  # a probe point grazed a kink after all
                    resampled += 1
                    continue
                err = np.abs(analytic - fd)
                tol = np.maximum(1e-7, 1e-4 * np.maximum(np.abs(analytic), np.abs(fd)))
                worst_ratio = max(worst_ratio, float((err / tol).max()))
                checked[kind] += 1
                break
            else:
                pytest.fail(f"no kink-safe {kind} model found in 8 attempts (case {i})")

    elapsed = time.perf_counter() - t0
    total = sum(checked.values())
    ok = total >= 100 and worst_ratio < 1.0 and elapsed < 60.0
    _verdict(
        1,
        ok,
        f"{total} random models ({checked['mlp']} mlp + {checked['prompted']} prompted) "
        f"match central differences at h=1e-6 within rel 1e-4 / abs 1e-7: "
        f"worst err/tol {worst_ratio:.3f} (need <1), {resampled} kink resamples, "
        f"{elapsed:.1f}s (need <60s)",
    )


# ---------------------------------------------------------------------------
# 02: exact pass accounting and per-step wall-time cost on a 10-epoch run.


def test_02_pass_accounting_and_step_cost():
    def run(opt: str):
        cfg = apply_overrides(
            RunConfig(),
            {"optim.kind": opt, "run.seed": 0, "train.t1": 5, "train.t2": 10},
        )
        return run_experiment(cfg)

    run("sgd")  # warm caches before timing anything
    medians = {"sgd": [], "sam": [], "gnm": []}
    reports = {}
    for _ in range(3):
        for opt in medians:
            rep = run(opt)
            reports[opt] = rep
            medians[opt].append(rep.summary["step_wall_median_ns"])

    counts_ok = True
    for opt, per_step in (("sgd", 1), ("gnm", 1), ("sam", 2)):
        s = reports[opt].summary
        counts_ok &= s["steps"] == 100
        counts_ok &= s["forwards"] == s["backwards"] == per_step * s["steps"]
        for rec in reports[opt].epochs():
            counts_ok &= rec["forwards"] == rec["backwards"] == per_step * rec["steps"]

    med = {opt: sorted(vals)[1] for opt, vals in medians.items()}  # median of 3 rounds
    sam_ratio = med["sam"] / med["sgd"]
    gnm_ratio = med["gnm"] / med["sgd"]
    ok = counts_ok and sam_ratio >= 1.5 and gnm_ratio <= 1.10
    _verdict(
        2,
        ok,
        f"pass counts over 100 steps exact: {'yes' if counts_ok else 'NO'} "
        f"(sgd/gnm 1F+1B per step, sam 2F+2B); median step wall sam/sgd={sam_ratio:.2f} "
        f"(need >=1.5), gnm/sgd={gnm_ratio:.2f} (need <=1.10)",
    )


# ---------------------------------------------------------------------------
# 03: zero-radius GNM and SAM runs collapse to the SGD run bitwise.


def test_03_zero_radius_runs_collapse_to_sgd():
    base = {"run.seed": 3, "train.t1": 2, "train.t2": 3}
    sgd = run_experiment(apply_overrides(RunConfig(), {**base, "optim.kind": "sgd"}))
    gnm0 = run_experiment(
        apply_overrides(RunConfig(), {**base, "optim.kind": "gnm", "optim.amplitude": 0.0})
    )
    sam0 = run_experiment(
        apply_overrides(RunConfig(), {**base, "optim.kind": "sam", "optim.rho_sam": 0.0})
    )
    ref = sgd.canonical(mask_ns=True, mask_identity=True)
    gnm_same = gnm0.canonical(mask_ns=True, mask_identity=True) == ref
    sam_same = sam0.canonical(mask_ns=True, mask_identity=True) == ref
    ok = gnm_same and sam_same
    _verdict(
        3,
        ok,
        f"zero-radius reports identical to sgd modulo time fields: "
        f"gnm(amplitude=0) {'yes' if gnm_same else 'NO'}, sam(rho=0) {'yes' if sam_same else 'NO'}",
    )


# ---------------------------------------------------------------------------
# 04: perturbation contract — hard bound, clamped std, batch independence.


def test_04_perturbation_bound_std_and_batch_independence():
    cfg = OptimizerConfig(kind="gnm")  # rho_sam 0.05, amplitude 0.1, sigma 1/3, clamp 1

    eps = sample_gaussian_perturbation(cfg, {"draws": (1000, 1000)}, stream(4, STREAM_PERTURB))
    arr = eps.entries["draws"]
    max_abs = float(np.abs(arr).max())
    bound_ok = max_abs <= cfg.rho_gnm

    # Analytic std of a N(0, sigma^2) draw clamped to [-c, c], via erf.
    z = cfg.clamp / cfg.sigma
    phi = math.exp(-z * z / 2.0) / math.sqrt(2.0 * math.pi)
    tail = 0.5 * math.erfc(z / math.sqrt(2.0))  # P(N(0,1) > z)
    second_moment = cfg.sigma**2 * ((1.0 - 2.0 * tail) - 2.0 * z * phi) + cfg.clamp**2 * 2.0 * tail
    oracle_std = math.sqrt(second_moment)
    emp_std = float(arr.std()) / cfg.rho_gnm
    std_err = abs(emp_std / oracle_std - 1.0)
    std_ok = std_err < 0.02

    # Same-seed draws must reproduce the step on two different batches bitwise.
    state = init_mlp(MLPConfig(input_dim=6, hidden_dims=(8,), n_classes=3), stream(40, STREAM_INIT))
    params = state.trainable
    data_rng = np.random.default_rng(44)
    batches = [
        (data_rng.standard_normal((16, 6)), data_rng.integers(0, 3, 16)),
        (data_rng.standard_normal((16, 6)) * 5.0 + 1.0, data_rng.integers(0, 3, 16)),
    ]
    loss_fn = eval_loss_fn(state)
    eps_ref = sample_gaussian_perturbation(cfg, params, stream(7, STREAM_PERTURB))
    lr = learning_rate(cfg, 0, 10)
    indep_ok = True
    for batch in batches:
        result = gnm_step(params, loss_fn, batch, cfg, 0, total_steps=10,
                          noise=stream(7, STREAM_PERTURB))
        probe = eps_ref.apply_to(params)
        probe.zero_grads()
        backward(loss_fn(probe, batch))
        grads = probe.grads()
        for name, t in params.items():
            indep_ok &= np.array_equal(result.params[name].data, t.data - lr * grads[name])

    ok = bound_ok and std_ok and indep_ok
    _verdict(
        4,
        ok,
        f"1e6 entries: max|eps| {max_abs:.6f} <= rho*clamp {cfg.rho_gnm:.6f}; "
        f"std(eps/rho) {emp_std:.5f} vs clamped-gaussian oracle {oracle_std:.5f} "
        f"(err {std_err:.2%}, need <2%); fixed-seed draw reproduces steps on two "
        f"different batches bitwise: {'yes' if indep_ok else 'NO'}",
    )


# ---------------------------------------------------------------------------
# 05: sampled neighborhood mean never exceeds the sampled max.


def test_05_neighborhood_mean_never_exceeds_max():
    wins = 0
    for i in range(50):
        rng = np.random.default_rng([5, i])
        cfg = MLPConfig(
            input_dim=int(rng.integers(2, 9)),
            hidden_dims=tuple(int(rng.integers(2, 9)) for _ in range(int(rng.integers(0, 3)))),
            n_classes=int(rng.integers(2, 6)),
        )
        state = init_mlp(cfg, rng)
        x = rng.standard_normal((8, cfg.input_dim))
        y = rng.integers(0, cfg.n_classes, size=8)
        rho = float(10.0 ** rng.uniform(-4.0, -0.5))
        stats = neighborhood_loss_stats(state.trainable, eval_loss_fn(state), (x, y),
                                        rho, 32, rng)
        if stats.n_excluded == 0 and stats.mean <= stats.max:
            wins += 1
    ok = wins == 50
    _verdict(5, ok, f"neighborhood mean <= max with 32 samples in {wins}/50 random "
                    f"(model, batch, radius) configurations (need 50/50)")


# ---------------------------------------------------------------------------
# 06-08 share one batch of full desk-scale runs: 11 seeds x {sgd, gnm}.


@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.perf_counter()
    runs = {}
    for seed in DESK_SEEDS:
        for opt in ("sgd", "gnm"):
            cfg = apply_overrides(
                RunConfig(),
                {
                    "optim.kind": opt,
                    "run.seed": seed,
                    "landscape.range": 0.1,
                    "landscape.resolution": 21,
                },
            )
            runs[(opt, seed)] = (cfg, *execute_run(cfg))
    return runs, time.perf_counter() - t0


def test_06_longtail_directional_gains(desk_runs):
    runs, wall = desk_runs
    gnm_tail = [runs[("gnm", s)][1].summary["test_acc_tail"] for s in DESK_SEEDS]
    sgd_tail = [runs[("sgd", s)][1].summary["test_acc_tail"] for s in DESK_SEEDS]
    med_gnm = float(np.median(gnm_tail))
    med_sgd = float(np.median(sgd_tail))
    overall_wins = sum(
        runs[("gnm", s)][1].summary["test_acc"] >= runs[("sgd", s)][1].summary["test_acc"]
        for s in DESK_SEEDS
    )
    ok = med_gnm >= med_sgd and overall_wins >= 7 and wall < 600.0
    _verdict(
        6,
        ok,
        f"median tail accuracy gnm {med_gnm:.3f} >= sgd {med_sgd:.3f}; overall accuracy "
        f"gnm >= sgd in {overall_wins}/11 seeds (need >=7); 22 desk runs took "
        f"{wall:.0f}s (need <600s)",
    )


def test_07_rebalance_stage_lifts_tail_accuracy(desk_runs):
    runs, _ = desk_runs
    wins = 0
    for s in DESK_SEEDS:
        cfg, report = runs[("gnm", s)][0], runs[("gnm", s)][1]
        by_epoch = {rec["epoch"]: rec for rec in report.epochs()}
        if by_epoch[cfg.train.t2]["test_acc_tail"] >= by_epoch[cfg.train.t1]["test_acc_tail"]:
            wins += 1
    ok = wins >= 8
    _verdict(7, ok, f"tail accuracy at the final epoch >= tail accuracy at the stage "
                    f"boundary in {wins}/11 gnm runs (need >=8)")


def test_08_gnm_runs_sit_in_flatter_regions(desk_runs):
    runs, _ = desk_runs
    flat_wins = 0
    centers_ok = True
    batches_ok = True
    for s in DESK_SEEDS:
        scores = {}
        batches = {}
        for opt in ("sgd", "gnm"):
            cfg, _, clf, ds = runs[(opt, s)]
            grid = run_landscape(cfg, clf.model_state_, clf.params_, ds)
            batch = balanced_train_subset(ds, cfg.landscape.batch)
            batches[opt] = batch
            direct = eval_loss_fn(clf.model_state_)(clf.params_, batch).item()
            centers_ok &= grid.center == direct
            scores[opt] = flatness_score(grid)
        batches_ok &= np.array_equal(batches["sgd"][0], batches["gnm"][0])
        batches_ok &= np.array_equal(batches["sgd"][1], batches["gnm"][1])
        if scores["gnm"] <= scores["sgd"]:
            flat_wins += 1
    ok = flat_wins >= 7 and centers_ok and batches_ok
    _verdict(
        8,
        ok,
        f"flatness(gnm) <= flatness(sgd) in {flat_wins}/11 matched-seed pairs (need >=7) "
        f"at radius 0.1, resolution 21; grid centers equal the evaluation-batch loss "
        f"bitwise in all 22 runs: {'yes' if centers_ok else 'NO'}; per-pair evaluation "
        f"batches bitwise identical: {'yes' if batches_ok else 'NO'}",
    )


# ---------------------------------------------------------------------------
# 09: head-group gradient norm dominates tail at initialization.


def test_09_head_gradient_dominates_at_init():
    wins = 0
    empty_tail = 0
    for s in range(50):
        cfg = apply_overrides(RunConfig(), {"run.seed": s})
        ds = dataset_from_config(cfg)
        state = initial_state(cfg)
        idx = stream(s, STREAM_SHUFFLE).permutation(ds.n_train)[:128]
        batch = (ds.train_x[idx], ds.train_y[idx])
        split = split_classes(ds.counts, cfg.data.head_threshold, cfg.data.tail_threshold)
        norms = gradient_group_norms(state.trainable, eval_loss_fn(state), batch,
                                     split.groups())
        if "tail" in norms.empty_groups:
            empty_tail += 1
        if norms.group_norms["head"] > norms.group_norms["tail"]:
            wins += 1
    ok = wins >= 45
    _verdict(9, ok, f"head-group gradient norm > tail-group norm in {wins}/50 fresh-init "
                    f"trials on imbalanced 128-sample batches (need >=45; {empty_tail} "
                    f"batches drew no tail sample)")


# ---------------------------------------------------------------------------
# 10: rerun determinism and checkpoint round-trip.


def test_10_determinism_and_checkpoint_round_trip(tmp_path):
    cfg = apply_overrides(
        RunConfig(),
        {"optim.kind": "gnm", "run.seed": 6, "train.t1": 2, "train.t2": 3},
    )
    rep1, clf1, ds = execute_run(cfg)
    rep2, _, _ = execute_run(cfg)
    determinism_ok = rep1.canonical(mask_ns=True) == rep2.canonical(mask_ns=True)

    path = tmp_path / "model.ckpt"
    save_checkpoint(clf1.params_, path)
    loaded = load_checkpoint(path)
    rebuilt = initial_state(cfg).with_trainable(loaded)
    acc_direct = evaluate_model(clf1.model_state_, clf1.params_, ds.test_x, ds.test_y)["test_acc"]
    acc_loaded = evaluate_model(rebuilt, loaded, ds.test_x, ds.test_y)["test_acc"]
    roundtrip_ok = acc_loaded == acc_direct

    ok = determinism_ok and roundtrip_ok
    _verdict(
        10,
        ok,
        f"same-config rerun byte-identical modulo time fields: "
        f"{'yes' if determinism_ok else 'NO'}; checkpoint save->load->evaluate "
        f"reproduces test accuracy bitwise ({acc_loaded:.4f} == {acc_direct:.4f}): "
        f"{'yes' if roundtrip_ok else 'NO'}",
    )
