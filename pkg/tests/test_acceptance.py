"""Acceptance suite: one test per shipped acceptance item.

Each test prints the quantities it judges, so `pytest -v` doubles as the
acceptance report (one pass/fail line per item). The federated fixtures are
session-scoped because they carry real multi-seed training runs; expect the
whole suite to take several minutes on one core.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from spikefed.bptt import backward_loss, loss_value
from spikefed.data import TaskSpec, generate, split_dataset
from spikefed.dp import (
    DpConfig,
    calibrate_sigma,
    clip_to_norm,
    dp_sgd_step,
    rdp_epsilon,
)
from spikefed.experiments import (
    ExperimentSpec,
    _build_simulation,
    _find_run_dir,
    _manifest,
    paired_metrics,
    run_experiment,
    run_grid,
    spec_from_dict,
    summary_csv,
)
from spikefed.federation import delta_r_select, fedavg, local_train, rate_weight
from spikefed.lif import LifConfig, NetworkArch, forward
from spikefed.params import ModelParams
from spikefed.rates import evaluate
from spikefed.rng import substream
from spikefed.runlog import PairedRuns, kendall_tau, load_run, rmse_metric
from spikefed.sensitivity import (
    forecast_rate_shift,
    monte_carlo_rate,
    operating_point_sensitivity,
)

from .oracles import finite_diff_grad, gaussian_analytic_epsilon

SEEDS = (0, 1, 2, 3, 4)
CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def _shipped(name: str) -> ExperimentSpec:
    return spec_from_dict(json.loads((CONFIG_DIR / f"{name}.json").read_text()))


# --------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def fed_runs(tmp_path_factory):
    """Per-seed trios on the shipped default task: non-DP reference plus DP
    at target epsilon 1 and 8 (clip 0.5), FedAvg over all clients."""
    sink = tmp_path_factory.mktemp("accept_fed")
    a0, a3, a1 = _shipped("a0"), _shipped("a3"), _shipped("a1")
    specs = {}
    ref_time = {}
    for seed in SEEDS:
        ref = replace(a0, experiment_id=f"fr{seed}-ref", master_seed=seed)
        t0 = time.time()
        run_experiment(ref, sink)
        ref_time[seed] = time.time() - t0
        specs[seed, "ref"] = ref
        for name, base in (("e1", a3), ("e8", a1)):
            spec = replace(
                base,
                experiment_id=f"fr{seed}-{name}",
                master_seed=seed,
                reference_id=f"fr{seed}-ref",
            )
            run_experiment(spec, sink)
            specs[seed, name] = spec
    return {"sink": sink, "specs": specs, "ref_time": ref_time}


@pytest.fixture(scope="session")
def ratew_runs(tmp_path_factory):
    """Per-seed rate-weighted trios probing the clipping bound: non-DP
    reference plus DP at epsilon 1 with clip 0.5 and clip 2.

    Single full-batch local step per round (batch_size above any shard) so
    the only DP distortions are clipping bias and injected noise; that keeps
    the clip-norm comparison clean of batch-resampling effects.
    """
    sink = tmp_path_factory.mktemp("accept_ratew")
    base = dict(
        task=TaskSpec(n_classes=10, n_channels=20, t_steps=100, samples_per_class=600),
        hidden_sizes=(64,),
        n_clients=10,
        rounds=10,
        local_epochs=1,
        batch_size=1024,
        lr=3e-3,
        partition_alpha=1.0,
        w_scale=0.6,
        aggregator="rate_weight",
        selection="delta_r",
        select_p=5,
        staleness_exponent=0.5,
        kappa=0.01,
    )
    specs = {}
    for seed in SEEDS:
        ref = ExperimentSpec(experiment_id=f"rw{seed}-ref", master_seed=seed, **base)
        run_experiment(ref, sink)
        specs[seed, "ref"] = ref
        for name, clip in (("c05", 0.5), ("c2", 2.0)):
            spec = ExperimentSpec(
                experiment_id=f"rw{seed}-{name}",
                master_seed=seed,
                reference_id=f"rw{seed}-ref",
                dp=DpConfig(enabled=True, target_epsilon=1.0, clip_norm=clip),
                **base,
            )
            run_experiment(spec, sink)
            specs[seed, name] = spec
    return {"sink": sink, "specs": specs}


def _tiny_pair_specs():
    base = dict(
        task=TaskSpec(n_classes=3, n_channels=8, t_steps=20, samples_per_class=40),
        hidden_sizes=(12,),
        n_clients=4,
        rounds=3,
        batch_size=16,
        lr=3e-3,
        w_scale=0.6,
    )
    ref = ExperimentSpec(experiment_id="tp-ref", master_seed=11, **base)
    dp = ExperimentSpec(
        experiment_id="tp-dp",
        master_seed=11,
        reference_id="tp-ref",
        dp=DpConfig(enabled=True, target_epsilon=8.0, clip_norm=1.0),
        **base,
    )
    return ref, dp


@pytest.fixture(scope="session")
def tiny_pair(tmp_path_factory):
    sink = tmp_path_factory.mktemp("accept_tiny")
    ref, dp = _tiny_pair_specs()
    ref_dir = run_experiment(ref, sink)
    dp_dir = run_experiment(dp, sink)
    return {"sink": sink, "ref": ref, "dp": dp, "ref_dir": ref_dir, "dp_dir": dp_dir}


# ------------------------------------------------------------------- tests


def _live_toy_net(case: int):
    """Random net plus batch with activity in every layer.

    Saturated draws (a layer whose soft rate collapses to ~0) make the loss
    flat to beyond float resolution, so the relative-error comparison would
    be 0/0; those are redrawn. Liveness is judged from the forward pass
    alone, independent of either gradient route.
    """
    for attempt in range(20):
        rng = substream(777, "fd", case, attempt)
        n_in = int(rng.integers(3, 7))
        n_hidden = int(rng.integers(4, 11))
        n_out = int(rng.integers(2, 6))
        reset = "subtractive" if rng.random() < 0.5 else "hard"
        lif = LifConfig(
            beta_init=float(rng.uniform(0.6, 0.95)),
            reset_mode=reset,
            surrogate_slope=float(rng.uniform(6.0, 12.0)),
        )
        arch = NetworkArch((n_in, n_hidden, n_out), lif)
        params = ModelParams.init(arch, rng, w_scale=1.2)
        assert params.dim <= 200
        t_steps = int(rng.integers(3, 11))
        b = int(rng.integers(2, 5))
        spikes = (rng.random((b, t_steps, n_in)) < 0.35).astype(np.float64)
        labels = rng.integers(0, n_out, size=b)
        traces, _ = forward(params, spikes, arch, mode="soft")
        if min(float(tr.spikes.mean()) for tr in traces) > 0.01:
            return params, spikes, labels
    raise AssertionError(f"no live net within 20 draws for case {case}")


def test_01_soft_gradients_match_central_differences():
    t0 = time.time()
    worst = 0.0
    for i in range(20):
        params, spikes, labels = _live_toy_net(i)
        out = backward_loss(params, spikes, labels, mode="soft")

        def f(vec, p=params, s=spikes, y=labels):
            return loss_value(p.with_vector(vec), s, y, mode="soft")

        fd = finite_diff_grad(f, params.vector, eps=1e-5)
        rel = float(np.abs(out.batch_grad - fd).max() / np.abs(fd).max())
        worst = max(worst, rel)
    elapsed = time.time() - t0
    print(f"\n  20 nets: worst max-relative gradient error {worst:.2e} "
          f"({elapsed:.1f}s)")
    assert worst < 1e-4
    assert elapsed < 30.0


def test_02_noise_and_clip_statistics():
    grads = np.full((1, 8), 0.6)  # norm > 1 so the clip engages
    base, _ = clip_to_norm(grads, 1.0)
    base = base[0]
    rng = substream(0, "noise-stats")
    draws = np.empty((100_000, 8))
    for i in range(draws.shape[0]):
        noisy, info = dp_sgd_step(grads, 1.0, 1.0, rng)
        draws[i] = noisy - base
    assert info.noise_std == 1.0
    stds = draws.std(axis=0, ddof=1)
    worst = float(np.abs(stds - 1.0).max())
    print(f"\n  per-coordinate noise std on 1e5 draws: "
          f"[{stds.min():.4f}, {stds.max():.4f}] (target 1 +- 3%)")
    assert worst < 0.03

    vec_rng = substream(1, "clip-stats")
    vectors = vec_rng.normal(size=(10_000, 8))
    vectors *= vec_rng.lognormal(0.0, 1.0, size=(10_000, 1))
    clipped, norms = clip_to_norm(vectors, 1.0)
    out_norms = np.linalg.norm(clipped, axis=1)
    print(f"  clipped max norm {out_norms.max():.15f} over 1e4 vectors "
          f"({float((norms > 1.0).mean()):.0%} engaged)")
    assert out_norms.max() <= 1.0 + 1e-12
    small = norms <= 1.0
    assert np.array_equal(clipped[small], vectors[small])


def test_03_accountant_bounds_and_calibration():
    delta = 1e-5
    lines = []
    for sigma in (2.0, 5.0, 10.0):
        exact = gaussian_analytic_epsilon(sigma, delta)
        acct = rdp_epsilon(sigma, 1.0, 1, delta)
        lines.append(f"sigma={sigma:>4}: accountant {acct:.6f} vs exact "
                     f"{exact:.6f} (ratio {acct / exact:.5f})")
        assert acct >= exact - 1e-9
        assert acct <= 1.10 * exact
    print("\n  " + "\n  ".join(lines))

    for target, q, steps, d in (
        (8.0, 0.05, 500, 1e-5),
        (1.0, 0.3, 80, 1.0 / 210),
        (2.0, 1.0, 10, 1e-4),
    ):
        sigma = calibrate_sigma(target, d, q, steps)
        back = rdp_epsilon(sigma, q, steps, d)
        print(f"  roundtrip eps={target} q={q} steps={steps}: sigma={sigma:.4f} "
              f"accounted={back:.6f}")
        assert back <= target <= 1.01 * back

    grid = {}
    for q in (0.05, 0.3, 1.0):
        for sigma in (1.0, 2.0, 4.0):
            for steps in (5, 50, 500):
                grid[q, sigma, steps] = rdp_epsilon(sigma, q, steps, delta)
    tol = 1e-12
    for (q, sigma, steps), eps in grid.items():
        if (q, sigma, steps * 10) in grid:
            assert grid[q, sigma, steps * 10] >= eps - tol, "steps monotonicity"
        if sigma > 1.0:
            smaller = {4.0: 2.0, 2.0: 1.0}[sigma]
            assert grid[q, smaller, steps] >= eps - tol, "sigma monotonicity"
        bigger_q = {0.05: 0.3, 0.3: 1.0}.get(q)
        if bigger_q is not None:
            assert grid[bigger_q, sigma, steps] >= eps - tol, \
                "sampling-rate monotonicity"
    print(f"  27-point monotonicity grid ok "
          f"(eps range {min(grid.values()):.4f}..{max(grid.values()):.1f})")


def test_04_rate_variance_forecast_vs_monte_carlo():
    t0 = time.time()
    lif = LifConfig(surrogate_slope=10.0)
    arch = NetworkArch((20, 40, 8), lif)
    params = ModelParams.init(arch, substream(0, "init"), w_scale=1.0)
    rng = substream(0, "data")
    probe = (rng.random((64, 100, 20)) < 0.25).astype(np.float64)
    labels = rng.integers(0, 8, size=64)
    eval_batch = (rng.random((384, 100, 20)) < 0.25).astype(np.float64)
    schedule = [0.1]

    fc = forecast_rate_shift(
        params, probe, labels, clip_norm=0.5, sigma=1.0, lr_schedule=schedule
    )
    assert fc.small_perturbation
    mc = monte_carlo_rate(
        params, probe, labels, eval_batch,
        clip_norm=0.5, sigma=1.0, lr_schedule=schedule, draws=500, seed=1,
    )
    assert mc.n_divergent == 0
    rel = abs(fc.variance - mc.variance) / mc.variance
    elapsed = time.time() - t0
    print(f"\n  forecast var {fc.variance:.3e} vs Monte-Carlo {mc.variance:.3e} "
          f"over 500 draws: rel err {rel:.3f} ({elapsed:.0f}s)")
    assert rel < 0.30

    quiet = forecast_rate_shift(
        params, probe, labels, clip_norm=1e6, sigma=0.0, lr_schedule=schedule
    )
    print(f"  sigma=0, clip inactive: variance {quiet.variance}, "
          f"clip-gap shift {quiet.mean_shift}")
    assert quiet.variance == 0.0
    assert quiet.mean_shift == 0.0
    assert quiet.clip_gap_projection == 0.0
    assert elapsed < 120.0


def test_05_unit_rate_partial_signs():
    cfg = LifConfig()  # v_th 1, beta 0.9: steady-state drive gain ~10x
    checked = 0
    for mu in np.linspace(0.02, 0.18, 5):
        for var in np.linspace(0.005, 0.08, 5):
            s = operating_point_sensitivity(
                cfg, float(mu), float(var), trials=400, seed=17
            )
            assert s.d_rate_d_mu >= -2.0 * s.se_d_mu, (mu, var, s)
            assert s.d_rate_d_vth <= 2.0 * s.se_d_vth, (mu, var, s)
            checked += 1
    print(f"\n  rate partials keep their signs within 2 SE on {checked} "
          f"(mu, var) operating points")

    silent = operating_point_sensitivity(cfg, 0.05, 0.0, trials=200, seed=3)
    noisy = operating_point_sensitivity(cfg, 0.05, 0.04, trials=400, seed=3)
    print(f"  subthreshold mu=0.05: rate {silent.rate} without noise, "
          f"{noisy.rate:.4f} with drive variance 0.04")
    assert silent.rate == 0.0
    assert noisy.rate > 0.0


def _brute_top_p(scores: dict, top_p: int):
    remaining = dict(scores)
    out = []
    for _ in range(min(top_p, len(remaining))):
        best = None
        for cid, sc in remaining.items():
            if (
                best is None
                or sc > remaining[best]
                or (sc == remaining[best] and cid < best)
            ):
                best = cid
        out.append(best)
        remaining.pop(best)
    return out


def test_06_selection_and_aggregation_oracles(tmp_path):
    rng = substream(3, "oracles")
    ties = 0
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        ids = rng.choice(100, size=n, replace=False)
        # quantized scores force frequent score ties
        scores = {int(c): float(s) for c, s in zip(ids, rng.integers(0, 5, n) / 4.0)}
        p = int(rng.integers(1, n + 1))
        got, tie_broken = delta_r_select(scores, p)
        assert got == _brute_top_p(scores, p)
        ties += int(tie_broken)
    assert ties > 100  # the instance family must actually exercise ties

    for _ in range(200):
        k = int(rng.integers(1, 8))
        d = int(rng.integers(1, 20))
        vecs = rng.normal(size=(k, d))
        sizes = rng.integers(1, 50, size=k).astype(float)
        direct = np.average(vecs, axis=0, weights=sizes)
        assert np.abs(fedavg(list(vecs), sizes) - direct).max() < 1e-12

    for _ in range(1000):
        n = int(rng.integers(2, 12))
        rates = rng.random(n) * 0.3
        zetas, mu, _ = rate_weight(rates)
        best = int(np.argmax(zetas))
        assert abs(rates[best] - mu) <= np.abs(rates - mu).min() + 1e-15

    # a real aggregation round stays inside the coordinatewise envelope of
    # the previous global model and the absorbed client updates
    spec = ExperimentSpec(
        experiment_id="conv",
        task=TaskSpec(n_classes=3, n_channels=8, t_steps=20, samples_per_class=30),
        hidden_sizes=(12,),
        n_clients=3,
        rounds=1,
        batch_size=16,
        lr=3e-3,
        w_scale=0.6,
        aggregator="rate_weight",
        selection="delta_r",
        select_p=2,
        kappa=0.5,
        master_seed=5,
    )
    harvest, _ = _build_simulation(spec)
    updates = {}
    for client in harvest.clients:
        train_sub, val_sub = harvest._client_subsets(client)
        before, _ = evaluate(
            harvest.global_params, val_sub.spikes, val_sub.labels,
            val_sub.n_classes, chunk=harvest.eval_chunk,
        )
        updates[client.client_id] = local_train(
            harvest.global_params, client, train_sub, before.per_class,
            batch_size=harvest.batch_size, epochs=harvest.epochs, lr=harvest.lr,
            dp=harvest.dp, master_seed=harvest.master_seed, round_idx=0,
            val_data=val_sub, detach_reset=harvest.detach_reset,
            eval_chunk=harvest.eval_chunk,
        )
    sim, _ = _build_simulation(spec)
    g0 = sim.global_params.vector.copy()
    record = sim.run_round()
    selected = [c["client_id"] for c in record["clients"] if c["selected"]]
    assert 0 < len(selected) <= 2
    for entry in record["clients"]:
        if entry["trained"]:
            assert entry["rates"]["network"] == updates[entry["client_id"]].report.network
    columns = np.stack([g0] + [updates[cid].params.vector for cid in selected])
    lo, hi = columns.min(axis=0), columns.max(axis=0)
    g1 = sim.global_params.vector
    assert np.all(g1 >= lo - 1e-12) and np.all(g1 <= hi + 1e-12)
    print(f"\n  selection ties exercised {ties}x; aggregate of {len(selected)} "
          f"updates stayed in the coordinatewise envelope")


def _records_in_memory(spec: ExperimentSpec):
    sim, train = _build_simulation(spec)
    manifest = _manifest(spec, sim, train)
    return manifest, [sim.run_round() for _ in range(spec.rounds)]


def test_07_rank_and_rmse_metrics(tiny_pair):
    assert kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    one_swap = kendall_tau([1, 2, 3, 4], [2, 1, 3, 4])
    assert one_swap == pytest.approx(2.0 / 3.0, abs=1e-12)

    self_pair = PairedRuns.load(tiny_pair["ref_dir"], tiny_pair["ref_dir"])
    assert rmse_metric(self_pair, "network_rate").rmse == 0.0

    ref_m, ref_r = _records_in_memory(tiny_pair["ref"])
    dp_m, dp_r = _records_in_memory(tiny_pair["dp"])
    live = PairedRuns(ref_m, ref_r, dp_m, dp_r)
    disk = PairedRuns.load(tiny_pair["ref_dir"], tiny_pair["dp_dir"])
    live_rmse = rmse_metric(live, "network_rate").rmse
    disk_rmse = rmse_metric(disk, "network_rate").rmse
    print(f"\n  tau fixtures exact; self-pair rmse 0; disk recompute "
          f"{disk_rmse!r} == in-memory {live_rmse!r}")
    assert disk_rmse == live_rmse
    for selector in ("layer_rates", "activation_sparsity", "footprint_bytes"):
        assert rmse_metric(disk, selector).rmse == rmse_metric(live, selector).rmse


def test_08_default_task_learns(fed_runs):
    sink = fed_runs["sink"]
    _, records = load_run(_find_run_dir(sink, "fr0-ref"))
    acc = records[-1]["global"]["test_accuracy"]
    elapsed = fed_runs["ref_time"][0]

    task = _shipped("a0").task
    data = generate(task)
    train, _, test = split_dataset(data, (0.7, 0.15, 0.15), substream(0, "sep"))
    counts = train.spikes.sum(axis=1)
    centroids = np.stack(
        [counts[train.labels == c].mean(axis=0) for c in range(task.n_classes)]
    )
    test_counts = test.spikes.sum(axis=1)
    dists = ((test_counts[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    separability = float((np.argmin(dists, axis=1) == test.labels).mean())

    print(f"\n  default-task accuracy {acc:.3f} after 10 rounds "
          f"({elapsed:.0f}s); count-classifier separability {separability:.3f}")
    assert separability > 0.95
    assert acc > 0.80
    assert elapsed < 300.0


def _hidden_rate_stats(sink, experiment_id):
    _, records = load_run(_find_run_dir(sink, experiment_id))
    round_means, round_stds = [], []
    for rec in records:
        vals = [
            c["rates"]["per_layer"][0] for c in rec["clients"] if c.get("trained")
        ]
        round_means.append(float(np.mean(vals)))
        round_stds.append(float(np.std(vals)))
    return float(np.mean(round_means)), round_stds


def test_09a_dp_suppresses_hidden_rates(fed_runs):
    sink = fed_runs["sink"]
    diffs, disp = [], []
    for seed in SEEDS:
        m_ref, stds_ref = _hidden_rate_stats(sink, f"fr{seed}-ref")
        m_dp, stds_dp = _hidden_rate_stats(sink, f"fr{seed}-e1")
        diffs.append(m_dp - m_ref)
        disp.append((float(np.mean(stds_ref)), float(np.mean(stds_dp))))
        print(f"\n  seed {seed}: hidden rate {m_ref:.4f} -> {m_dp:.4f} under "
              f"eps=1 clip=0.5; client dispersion {disp[-1][0]:.5f} -> "
              f"{disp[-1][1]:.5f}", end="")
    print()
    assert all(d < 0 for d in diffs), diffs
    mean_disp_ref = float(np.mean([a for a, _ in disp]))
    mean_disp_dp = float(np.mean([b for _, b in disp]))
    assert mean_disp_dp <= mean_disp_ref, disp


def test_09b_dp_destabilizes_rankings(fed_runs):
    sink = fed_runs["sink"]
    specs = fed_runs["specs"]
    for name in ("e1", "e8"):
        taus = [paired_metrics(specs[seed, name], sink)["kendall_tau"]
                for seed in SEEDS]
        mean_tau = float(np.mean(taus))
        eps = specs[SEEDS[0], name].dp.target_epsilon
        print(f"\n  eps={eps}: per-seed tau {['%+.3f' % t for t in taus]} "
              f"mean {mean_tau:+.3f}", end="")
        assert mean_tau < 0.5
        assert all(t < 0.5 for t in taus), taus
    print()


def test_09c_clip_norm_tradeoff(ratew_runs):
    sink = ratew_runs["sink"]
    specs = ratew_runs["specs"]
    lam = {name: [] for name in ("c05", "c2")}
    rmse = {name: [] for name in ("c05", "c2")}
    for seed in SEEDS:
        row = {}
        for name in ("c05", "c2"):
            metrics = paired_metrics(specs[seed, name], sink)
            lam[name].append(metrics["lambda_dev_mean"])
            rmse[name].append(metrics["rmse_network_rate"])
            row[name] = metrics
        print(f"\n  seed {seed}: |dlambda| {row['c05']['lambda_dev_mean']:.4f} -> "
              f"{row['c2']['lambda_dev_mean']:.4f}, rate rmse "
              f"{row['c05']['rmse_network_rate']:.5f} -> "
              f"{row['c2']['rmse_network_rate']:.5f}", end="")
    lam05, lam2 = float(np.mean(lam["c05"])), float(np.mean(lam["c2"]))
    rmse05, rmse2 = float(np.mean(rmse["c05"])), float(np.mean(rmse["c2"]))
    print(f"\n  means over {len(SEEDS)} seeds: |dlambda| {lam05:.4f} -> {lam2:.4f}; "
          f"rate rmse {rmse05:.5f} -> {rmse2:.5f}")
    assert lam2 < lam05
    assert rmse2 >= rmse05


def test_10_reruns_byte_identical(tiny_pair, tmp_path_factory):
    ref, dp = _tiny_pair_specs()
    sink1 = tmp_path_factory.mktemp("accept_rerun1")
    sink2 = tmp_path_factory.mktemp("accept_rerun2")
    rows1 = run_grid([ref, dp], sink1, workers=1)
    rows2 = run_grid([ref, dp], sink2, workers=2)
    assert summary_csv(rows1) == summary_csv(rows2)

    files = ("manifest.json", "rounds.ndjson", "summary.json")
    for spec, orig_dir in ((ref, tiny_pair["ref_dir"]), (dp, tiny_pair["dp_dir"])):
        d1 = _find_run_dir(sink1, spec.experiment_id)
        d2 = _find_run_dir(sink2, spec.experiment_id)
        assert d1.name == d2.name == orig_dir.name
        for fname in files:
            blob = (d1 / fname).read_bytes()
            assert blob == (d2 / fname).read_bytes()
            assert blob == (orig_dir / fname).read_bytes()

    before = {
        (spec.experiment_id, fname): (_find_run_dir(sink1, spec.experiment_id) / fname).read_bytes()
        for spec in (ref, dp)
        for fname in files
    }
    rows_again = run_grid([ref, dp], sink1, workers=2, force=True)
    assert summary_csv(rows_again) == summary_csv(rows1)
    for (exp_id, fname), blob in before.items():
        assert (_find_run_dir(sink1, exp_id) / fname).read_bytes() == blob
    print("\n  reruns with 1 and 2 workers, plus a forced in-place rerun, "
          "produced byte-identical logs and summaries")
