"""Acceptance suite: one test and one PASS/FAIL line per criterion.

The two transfer experiments (majority and antisymmetric tasks) are trained
once per session with the default configuration.  Thresholds are fixed
here; run ``pytest tests/test_acceptance.py -v`` and read the summary block
at the end of the output.
"""

import os
import time

import numpy as np
import pytest

from incline import eval as ev
from incline.align import load_alignment, load_reps, save_alignment, save_reps
from incline.cli import dispatch
from incline.corpus import gen_parallel, load_corpus, load_parallel, save_corpus, save_parallel
from incline.experiment import (
    EXPERIMENT_RIDGE_REL,
    ExperimentConfig,
    build,
    intervention,
    run_transfer,
    steering_relative_norms,
)
from incline.intervene import InterventionConfig, load_steering, make_interventor, save_steering
from incline.linalg import fit_linear_map
from incline.model import SiteId, SiteKind, load_checkpoint, save_checkpoint

pytestmark = pytest.mark.acceptance


def report(log, k, checks, detail, seconds, limit):
    ok = all(checks.values()) and seconds < limit
    failed = [name for name, good in checks.items() if not good]
    if seconds >= limit:
        failed.append("runtime")
    line = f"CRITERION {k} {'PASS' if ok else 'FAIL'} | {detail} | runtime {seconds:.1f}s (limit {limit}s)"
    if failed:
        line += " | failed: " + ", ".join(failed)
    log.append(line)
    print(line)
    assert ok, line


class Experiment:
    def __init__(self, task):
        t0 = time.perf_counter()
        self.cfg = ExperimentConfig(task=task)
        self.data, self.model, self.losses = build(self.cfg)
        self.result = run_transfer(self.cfg, self.data, self.model)
        self.seconds = time.perf_counter() - t0

    def incline(self, alpha=None, sites=None):
        alpha = self.result.grid_incline.best_alpha if alpha is None else alpha
        cfg = intervention(self.cfg, alpha)
        if sites is not None:
            cfg = InterventionConfig(alpha=alpha, sites=frozenset(sites))
        return make_interventor(self.result.alignment, cfg, self.model.config.n_layers)


@pytest.fixture(scope="session")
def majority():
    return Experiment("majority")


@pytest.fixture(scope="session")
def antisymmetric():
    return Experiment("antisymmetric")


# --- 1 ---------------------------------------------------------------------------------------


def gd_oracle(S, T, steps=20000):
    """Plain gradient descent on sum ||W s - T||^2 from W = 0."""
    G = S.T @ S
    C = T.T @ S
    lr = 1.0 / np.linalg.eigvalsh(G)[-1]
    W = np.zeros((T.shape[1], S.shape[1]))
    for _ in range(steps):
        W -= lr * (W @ G - C)
    return W


def test_criterion_1_least_squares_optimality(acceptance_log):
    t0 = time.perf_counter()
    r = np.random.default_rng(1)
    worst_gap = -np.inf
    worst_recovery = 0.0
    for _ in range(20):
        S, T = r.standard_normal((2, 40, 16))
        W = fit_linear_map(S, T)
        Wg = gd_oracle(S, T)
        res = np.sum((S @ W.T - T) ** 2)
        res_g = np.sum((S @ Wg.T - T) ** 2)
        worst_gap = max(worst_gap, res - res_g)
        A = r.standard_normal((16, 16))
        worst_recovery = max(worst_recovery, np.linalg.norm(fit_linear_map(S, S @ A.T) - A))
    report(
        acceptance_log,
        1,
        {"residual": worst_gap <= 1e-6, "recovery": worst_recovery <= 1e-8},
        f"max(res - res_gd) {worst_gap:.3e} <= 1e-6; max ||W-A||_F {worst_recovery:.3e} <= 1e-8",
        time.perf_counter() - t0,
        5,
    )


# --- 2 ---------------------------------------------------------------------------------------


def test_criterion_2_alpha_zero_no_op(acceptance_log, majority):
    t0 = time.perf_counter()
    model = majority.model
    iv = majority.incline(alpha=0.0, sites=set(SiteKind))
    r = np.random.default_rng(2)
    identical = 0
    for _ in range(100):
        toks = r.integers(0, model.config.vocab_size, int(r.integers(1, model.config.max_seq_len + 1)))
        identical += np.array_equal(model.forward(toks)[0], model.forward(toks, iv)[0])
    base = ev.eval_task(model, majority.data.b_test)
    zero = ev.eval_task(model, majority.data.b_test, iv)

    def metrics(res):
        return ev.report_text({"accuracy": res.accuracy, "n_items": res.n}) + ev.items_csv(res)

    same_files = metrics(base) == metrics(zero)
    report(
        acceptance_log,
        2,
        {"logits": identical == 100, "metrics": same_files},
        f"bit-identical logits {identical}/100; metrics identical {same_files}",
        time.perf_counter() - t0,
        10,
    )


# --- 3 ---------------------------------------------------------------------------------------


def test_criterion_3_single_intervention(acceptance_log, majority):
    t0 = time.perf_counter()
    model = majority.model
    configs = [
        dict(sites={"hidden"}, layers=None),
        dict(sites={"hidden"}, layers={1}),
        dict(sites={"attn", "ffn"}, layers={0}),
        dict(sites=set(SiteKind), layers=None),
    ]
    bad = 0
    checked = 0
    for kw in configs:
        iv = make_interventor(majority.result.alignment, InterventionConfig(alpha=0.4, **kw), model.config.n_layers)
        expected = len(iv.config.active_sites(model.config.n_layers))
        for item in majority.data.b_test.items[:25]:
            prompt = list(item.tokens[: item.answer_position + 1])
            iv.reset()
            model.forward(prompt, iv)
            bad += iv.invocations != expected
            iv.reset()
            model.greedy_decode(prompt, 16, iv)
            bad += iv.invocations != expected
            checked += 2
    report(
        acceptance_log,
        3,
        {"counter": bad == 0},
        f"counter == |sites x layers| in {checked - bad}/{checked} forward/16-token-decode runs",
        time.perf_counter() - t0,
        5,
    )


# --- 4 ---------------------------------------------------------------------------------------


def test_criterion_4_transfer(acceptance_log, majority):
    res = majority.result
    acc_a = res.a_test.accuracy
    base = res.b_base_test.accuracy
    inc = res.b_incline_test.accuracy
    report(
        acceptance_log,
        4,
        {"a_test": acc_a >= 0.95, "b_baseline": base <= 0.60, "gain": inc >= base + 0.20},
        f"acc_A {acc_a:.3f} >= 0.95; acc_B baseline {base:.3f} <= 0.60; "
        f"INCLINE hidden/ALL alpha={res.grid_incline.best_alpha:g} acc_B {inc:.3f} (gain {inc - base:+.3f} >= 0.20)",
        majority.seconds,
        300,
    )


# --- 5 ---------------------------------------------------------------------------------------


def test_criterion_5_cpc(acceptance_log, majority, antisymmetric):
    t0 = time.perf_counter()
    res = majority.result
    lift = res.cpc("incline") - res.cpc("baseline")
    bound_ok = True
    for exp in (majority, antisymmetric):
        r = exp.result
        for which, b in (("baseline", r.b_base_test), ("incline", r.b_incline_test), ("caa", r.b_caa_test)):
            bound_ok &= r.cpc(which) <= min(r.a_test.accuracy, b.accuracy)
    report(
        acceptance_log,
        5,
        {"lift": lift >= 0.10, "bound": bound_ok},
        f"CPC baseline {res.cpc('baseline'):.3f} -> INCLINE {res.cpc('incline'):.3f} (lift {lift:+.3f} >= 0.10); "
        f"CPC <= min(acc) on all 6 runs {bound_ok}",
        majority.seconds + time.perf_counter() - t0,
        300,
    )


# --- 6 ---------------------------------------------------------------------------------------


def test_criterion_6_static_vs_dynamic(acceptance_log, antisymmetric):
    t0 = time.perf_counter()
    res = antisymmetric.result
    rs, rt = res.reps
    n = len(antisymmetric.data.parallel)
    bound = 3 / np.sqrt(n)
    norms = steering_relative_norms(rs, rt, res.steering.vectors)
    hidden = {str(s): v for s, v in norms.items() if s.kind is SiteKind.HIDDEN}
    worst = max(hidden.values())
    base = res.b_base_test.accuracy
    inc = res.b_incline_test.accuracy
    caa = res.b_caa_test.accuracy
    checks = {
        "caa_norm": worst <= bound,
        "caa_gain": caa - base <= 0.05,
        "incline_gain": inc - base >= 0.15,
        "incline_vs_caa": inc >= caa + 0.10,
    }
    norm_text = ", ".join(f"{k} {v:.3f}" for k, v in hidden.items())
    report(
        acceptance_log,
        6,
        checks,
        f"relative CAA norms ({norm_text}) <= 3/sqrt({n}) = {bound:.3f}; baseline {base:.3f}; "
        f"CAA alpha={res.grid_caa.best_alpha:g} {caa:.3f} (gain {caa - base:+.3f} <= 0.05); "
        f"INCLINE alpha={res.grid_incline.best_alpha:g} {inc:.3f} (gain {inc - base:+.3f} >= 0.15, vs CAA {inc - caa:+.3f} >= 0.10)",
        antisymmetric.seconds + time.perf_counter() - t0,
        300,
    )


# --- 7 ---------------------------------------------------------------------------------------


def _median_ratio(run_base, run_iv, rounds=3):
    # interleave the two arms so drift in machine load hits both equally
    base, steered = [], []
    for _ in range(rounds):
        base.append(run_base().median_latency())
        steered.append(run_iv().median_latency())
    return min(steered) / min(base)


def test_criterion_7_overhead(acceptance_log, majority):
    t0 = time.perf_counter()
    model = majority.model
    iv = majority.incline(alpha=majority.result.grid_incline.best_alpha or 0.5)
    test = majority.data.b_test
    ratio = _median_ratio(lambda: ev.eval_task(model, test), lambda: ev.eval_task(model, test, iv))
    prompts = [list(it.tokens[: it.answer_position + 1]) for it in test.items[:100]]
    golds = [()] * len(prompts)

    def gen(n, with_iv):
        return lambda: ev.eval_generation(model, prompts, golds, iv if with_iv else None, max_new=n)

    r4 = _median_ratio(gen(4, False), gen(4, True))
    r16 = _median_ratio(gen(16, False), gen(16, True))
    report(
        acceptance_log,
        7,
        {"ratio": ratio <= 1.25, "length": abs(r4 - r16) <= 0.10},
        f"median latency ratio {ratio:.3f} <= 1.25 over {len(test)} items; "
        f"generation ratio 4 tokens {r4:.3f} vs 16 tokens {r16:.3f} (diff {abs(r4 - r16):.3f} <= 0.10)",
        time.perf_counter() - t0,
        120,
    )


# --- 8 ---------------------------------------------------------------------------------------


def test_criterion_8_site_ablation(acceptance_log, majority):
    t0 = time.perf_counter()
    table = ev.ablate(
        majority.model, majority.result.alignment, majority.data.b_test, ev.Axis.SITE, val=majority.data.b_val
    )
    rows = ", ".join(f"{r.setting} {r.accuracy:.3f} (alpha={r.alpha:g})" for r in table.rows)
    report(
        acceptance_log,
        8,
        {"variants": table.settings == ["hidden", "attn", "ffn", "emb"]},
        f"rows {rows}; baseline {table.baseline:.3f}; hidden_is_argmax {table.argmax() == 'hidden'} (recorded, not gated)",
        time.perf_counter() - t0,
        600,
    )


# --- 9 ---------------------------------------------------------------------------------------


def test_criterion_9_data_size(acceptance_log, majority):
    t0 = time.perf_counter()
    parallel = gen_parallel(majority.data.spec, 2000)
    table = ev.ablate(
        majority.model,
        None,
        majority.data.b_test,
        ev.Axis.DATA_SIZE,
        val=majority.data.b_val,
        parallel=parallel,
        sizes=ev.DATA_SIZES,
        ridge_rel=EXPERIMENT_RIDGE_REL,
    )
    sizes = [int(s) for s in table.settings]
    times = [r.extra["fit_seconds"] for r in table.rows]
    slope = (times[1] - times[0]) / (sizes[1] - sizes[0])
    predicted = [times[0] + slope * (n - sizes[0]) for n in sizes]
    ratios = [t / p for t, p in zip(times, predicted)]
    monotone = all(b >= a for a, b in zip(times, times[1:]))
    within = all(0.5 <= q <= 2.0 for q in ratios)
    curve = ", ".join(f"N={n}: {t * 1e3:.1f}ms acc {r.accuracy:.3f}" for n, t, r in zip(sizes, times, table.rows))
    report(
        acceptance_log,
        9,
        {"monotone": monotone, "linear": within, "curve": len(table.rows) == 6},
        f"{curve}; time/linear-extrapolation {', '.join(f'{q:.2f}' for q in ratios)} within [0.5, 2]",
        time.perf_counter() - t0,
        300,
    )


# --- 10 --------------------------------------------------------------------------------------


def test_criterion_10_probes(acceptance_log, majority):
    t0 = time.perf_counter()
    model = majority.model
    last = SiteId(SiteKind.HIDDEN, model.config.n_layers - 1)
    rs, rt = majority.result.reps
    src, tgt = rs.sites[last], rt.sites[last]
    X = np.vstack([src, tgt])
    y = np.r_[np.zeros(len(src)), np.ones(len(tgt))]
    probes = ev.fit_probe_pair(X, y)
    alpha = majority.result.grid_incline.best_alpha
    moved = ev.intervened_reps(
        model, majority.data.parallel.sources(), majority.result.alignment, intervention(majority.cfg, alpha), last
    )
    c_src = ev.centroid(ev.project2d(src, probes))
    c_tgt = ev.centroid(ev.project2d(tgt, probes))
    c_new = ev.centroid(ev.project2d(moved, probes))
    before = float(np.linalg.norm(c_src - c_tgt))
    after = float(np.linalg.norm(c_new - c_tgt))
    # informational: the projected state W h on its own, before blending
    W = majority.result.alignment.matrices[last]
    projected = float(np.linalg.norm(ev.centroid(ev.project2d(src @ W.T, probes)) - c_tgt))
    dot = float(probes.w1 @ probes.w2)
    report(
        acceptance_log,
        10,
        {"orthogonal": abs(dot) <= 1e-8, "accuracy": probes.acc1 >= 0.95, "closer": after < before},
        f"|w1.w2| {abs(dot):.1e} <= 1e-8; probe-1 held-out acc {probes.acc1:.3f} >= 0.95; "
        f"centroid distance to target {before:.4f} -> {after:.4f} with INCLINE alpha={alpha:g} "
        f"(W h alone: {projected:.2e}, not gated)",
        time.perf_counter() - t0,
        60,
    )


# --- 11 --------------------------------------------------------------------------------------


def _cli_pipeline():
    j = os.path.join
    ckpt = j("model", "model.ckpt")
    steps = [
        ["gen-data", "--out", "data"],
        ["train-model", "--out", "model", "--data", "data"],
        ["extract", "--out", "reps", "--model", ckpt, "--parallel", j("data", "parallel.txt")],
        ["fit-align", "--out", "align", "--reps", "reps", "--model", ckpt, "--ridge-rel", "1e-4"],
        ["fit-caa", "--out", "caa", "--reps", "reps"],
        ["eval", "--out", "eval", "--model", ckpt, "--data", j("data", "b_test.txt"),
         "--alignment", j("align", "alignment.txt"), "--alpha", "0.5"],
        ["grid-alpha", "--out", "grid", "--model", ckpt, "--data", j("data", "b_val.txt"),
         "--alignment", j("align", "alignment.txt"), "--grid", "-1:1:0.1"],
    ]
    for argv in steps:
        code = dispatch(argv + ["--no-timestamp"])
        assert code == 0, argv
    out = {}
    for stage in ("data", "model", "reps", "align", "caa", "eval", "grid"):
        for name in sorted(os.listdir(stage)):
            with open(j(stage, name), "rb") as fh:
                out[f"{stage}/{name}"] = fh.read()
    return out


def _roundtrips(tmp, majority):
    ok = {}
    m = majority.model
    save_checkpoint(m, tmp / "m.ckpt")
    back = load_checkpoint(tmp / "m.ckpt")
    ok["checkpoint"] = all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
    aset = majority.result.alignment
    save_alignment(tmp / "a.txt", aset)
    a2 = load_alignment(tmp / "a.txt")
    ok["alignment"] = all(np.array_equal(a2.matrices[s], aset.matrices[s]) for s in aset.matrices)
    st = majority.result.steering
    save_steering(tmp / "s.txt", st)
    s2 = load_steering(tmp / "s.txt")
    ok["steering"] = all(np.array_equal(s2.vectors[s], st.vectors[s]) for s in st.vectors)
    rs = majority.result.reps[0]
    save_reps(tmp / "r.txt", rs)
    r2 = load_reps(tmp / "r.txt")
    ok["reps"] = all(np.array_equal(r2.sites[s], rs.sites[s]) for s in rs.sites)
    save_corpus(tmp / "c.txt", majority.data.b_test)
    ok["corpus"] = load_corpus(tmp / "c.txt").items == majority.data.b_test.items
    save_parallel(tmp / "p.txt", majority.data.parallel)
    ok["parallel"] = load_parallel(tmp / "p.txt").pairs == majority.data.parallel.pairs
    return ok


def test_criterion_11_determinism(acceptance_log, majority, tmp_path, monkeypatch):
    t0 = time.perf_counter()
    runs = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        runs.append(_cli_pipeline())
    monkeypatch.chdir(tmp_path)
    differing = sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k)) + sorted(set(runs[1]) - set(runs[0]))
    # the library path must reproduce the CLI's checkpoint bit for bit
    same_as_library = runs[0]["model/model.ckpt"] == _checkpoint_bytes(majority, tmp_path)
    rt = _roundtrips(tmp_path, majority)
    report(
        acceptance_log,
        11,
        {"rerun": not differing, "library": same_as_library, **{f"roundtrip_{k}": v for k, v in rt.items()}},
        f"{len(runs[0])} output files byte-identical across reruns (differing: {differing or 'none'}); "
        f"CLI checkpoint equals library checkpoint {same_as_library}; "
        f"bit-exact roundtrips {', '.join(k for k, v in rt.items() if v)}",
        time.perf_counter() - t0,
        600,
    )


def _checkpoint_bytes(majority, tmp):
    save_checkpoint(majority.model, tmp / "lib.ckpt")
    return (tmp / "lib.ckpt").read_bytes()
