"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from fusioncast import autodiff as ad
from fusioncast import oracles
from fusioncast.autodiff import Tensor
from fusioncast.baselines import FlowField, advect, estimate_flow, generate_prior
from fusioncast.data import (FrameSequence, StationRecord, load_grid, load_station_csv, save_grid,
                             write_station_csv)
from fusioncast.layers import BranchState
from fusioncast.metrics import ContingencyTable, csi, evaluate, read_categorical, write_report
from fusioncast.model import VARIANTS, FusionCast, ModelConfig, load_checkpoint
from fusioncast.rpf import RPFGates, channel_attention, gated_fuse, rpf_fuse, spatial_attention
from fusioncast.trainer import (CorpusConfig, TrainConfig, build_corpus, default_plan, evaluate_model,
                                gradcheck_suite, run_ablation, train)


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"criterion {number}: {detail}"
    return emit


def test_criterion_1_gradient_correctness(report):
    t0 = time.time()
    results = gradcheck_suite()
    elapsed = time.time() - t0
    bad = [f"{r.name}={r.error:.1e}" for r in results if not r.passed]
    worst_layer = max(r.error for r in results if not r.name.startswith("model"))
    worst_model = max(r.error for r in results if r.name.startswith("model"))
    ok = not bad and elapsed < 60
    report(1, ok, f"layers max {worst_layer:.1e} (<1e-4), model max {worst_model:.1e} (<1e-3), "
                  f"{elapsed:.1f}s (<60s){' failing: ' + ', '.join(bad) if bad else ''}")


def test_criterion_2_shape_contract(report, rng):
    problems = []
    for v in VARIANTS:
        cfg = ModelConfig(variant=v)
        model = FusionCast(cfg)
        x = rng.random((1, 4, 64, 64))
        prior = rng.random((1, 12, 64, 64))
        pwv, hist, pr = model.encode(Tensor(x) if model.enc_pwv else None, Tensor(x),
                                     Tensor(prior) if model.enc_prior else None)
        states = [s for s in (pwv, hist, pr) if s is not None]
        if any(s.h.shape[-2:] != (16, 16) or s.c.shape[-2:] != (16, 16) for s in states):
            problems.append(f"{v}: encoder state {[s.h.shape for s in states]}")
        out = model.decode(model.fuse(pwv, hist, pr), Tensor(x[:, -1:]))
        if out.shape != (1, 12, 64, 64):
            problems.append(f"{v}: output {out.shape}")
    report(2, not problems, "64x64 -> 16x16 states -> 64x64 outputs for all five variants"
           + (f"; {problems}" if problems else ""))


def test_criterion_3_rpf_identities(report, rng):
    f = rng.normal(size=(8, 6, 6))
    passthrough = np.array_equal(gated_fuse(Tensor(np.zeros((1, 6, 6))), Tensor(rng.normal(size=(8, 6, 6))),
                                            Tensor(f)).data, f)
    gates = RPFGates(8)
    for p in gates.parameters():
        p.data[...] = 0.0
    radar = BranchState(Tensor(rng.normal(size=(8, 6, 6))), Tensor(rng.normal(size=(8, 6, 6))))
    pwv = BranchState(Tensor(rng.normal(size=(5, 6, 6))), Tensor(rng.normal(size=(5, 6, 6))))
    fused = rpf_fuse(pwv, radar, gates)
    factor = max(np.abs(fused.h.data - 1.25 * radar.h.data).max(), np.abs(fused.c.data - 1.25 * radar.c.data).max())
    live = RPFGates(8, rng=rng)
    inside = True
    for scale in (1.0, 1e3):
        for p in live.parameters():
            p.data[...] = scale * rng.normal(size=p.shape)
        x = Tensor(scale * rng.normal(size=(8, 6, 6)))
        m = spatial_attention(x, live.spatial_h).data
        w = channel_attention(x, live.channel_h).data
        inside &= bool(np.all(m > 0) and np.all(m < 1) and np.all(w > 0) and np.all(w < 1))
    ok = passthrough and factor < 1e-14 and inside
    report(3, ok, f"M=0 passthrough bit-exact={passthrough}, |fused-1.25H|={factor:.1e}, gates in (0,1)={inside}")


def test_criterion_4_metric_oracles(report):
    passed, worst = oracles.metrics_suite(trials=200, tol=1e-12)
    hand = csi(ContingencyTable(1, 0, 0, 0)) == 1.0 and csi(ContingencyTable(2, 1, 1, 0)) == 0.5
    report(4, passed and hand, f"200 random instances max diff {worst:.1e} (<1e-12), hand cases {hand}")


def test_criterion_5_conv_pool_oracles(report, rng):
    passed, worst = oracles.conv_pool_suite(trials=20, tol=1e-12)
    adj = 0.0
    for _ in range(10):
        w = rng.normal(size=(3, 2, 4, 4))
        y = rng.normal(size=(2, 8, 8))
        cy = ad.conv2d(Tensor(y), Tensor(w), None, 2, 1).data
        x = rng.normal(size=cy.shape)
        dx = ad.conv_transpose2d(Tensor(x), Tensor(w), None, 2, 1).data
        adj = max(adj, abs(np.vdot(dx, y) - np.vdot(x, cy)))
    ok = passed and adj < 1e-10
    report(5, ok, f"loop oracles max diff {worst:.1e} (<1e-12), adjoint gap {adj:.1e} (<1e-10)")


def _blob(n, cx, cy, sigma=4.0, amp=10.0):
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    return amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))


def test_criterion_6_optical_flow(report, rng):
    f0, f1 = _blob(48, 20, 24), _blob(48, 22, 24)
    flow = estimate_flow(f0, f1)
    support = f0 > 0.1 * f0.max()
    u_err = float(np.abs(flow.u[support] - 2.0).max())

    f = rng.random((12, 12))
    shifted = advect(f, FlowField(np.ones_like(f), np.zeros_like(f)), 1)[0]
    exact = np.array_equal(shifted[:, 1:], f[:, :-1]) and np.all(shifted[:, 0] == 0)

    vx, vy = 1.5, 0.5
    hist = FrameSequence(np.array([_blob(64, 14 + vx * t, 20 + vy * t) for t in range(4)]),
                         1_677_628_800 + 600 * np.arange(4))
    prior = generate_prior(hist, 6)
    yy, xx = np.mgrid[0:64, 0:64]
    track = 0.0
    for k, frame in enumerate(prior.frames, start=1):
        cx, cy = (frame * xx).sum() / frame.sum(), (frame * yy).sum() / frame.sum()
        track = max(track, np.hypot(cx - (14 + vx * (3 + k)), cy - (20 + vy * (3 + k))) / k)
    ok = u_err < 0.5 and exact and track < 1.0
    report(6, ok, f"|u-2| max {u_err:.3f} px (<0.5), integer advection exact={exact}, "
                  f"prior drift {track:.3f} px/step (<1)")


@pytest.mark.slow
def test_criterion_7_ablation_directionality(report, tmp_path):
    t0 = time.time()
    plan = default_plan(seeds=(0, 1, 2, 3, 4))
    res = run_ablation(plan, tmp_path)
    elapsed = time.time() - t0
    lines, ok = [], True
    full_m, full_se = res.mean_se("full", 1.0, 12)
    for other in ("no_pwv", "no_prior"):
        m, se = res.mean_se(other, 1.0, 12)
        d, d_se = res.paired_diff("full", other, 1.0, 12)
        bar = max(full_se, se, d_se)
        ok &= d > bar
        lines.append(f"full-{other}={d:.4f} vs SE {bar:.4f}")
    gate, _ = res.mean_se("full", 4.0, 12)
    concat, _ = res.mean_se("rpf_concat_fusion", 4.0, 12)
    ok &= gate >= concat
    lines.append(f"gate {gate:.4f} >= concat {concat:.4f} at tau=4")
    ok &= elapsed < 45 * 60
    lines.append(f"{elapsed / 60:.1f} min on 1 core (<45)")
    report(7, ok, f"CSI(1.0,t120) full {full_m:.4f}+/-{full_se:.4f}; " + "; ".join(lines))


def test_criterion_8_determinism_and_persistence(report, tmp_path, rng):
    corpus_cfg = CorpusConfig(train_scenes=2, val_scenes=1, test_scenes=1)
    c1, c2 = build_corpus(7, corpus_cfg), build_corpus(7, corpus_cfg)
    same_corpus = all(np.array_equal(a.target, b.target) and np.array_equal(a.pwv, b.pwv)
                      for a, b in zip(c1["train"], c2["train"]))
    plan = default_plan(seeds=(7,))
    mcfg = plan.model
    tcfg = TrainConfig(epochs=2, batch_size=4, lr=3e-3, dtype="float32", seed=7)
    runs = []
    for tag in ("a", "b"):
        res = train(mcfg, tcfg, c1["train"], c1["val"], tmp_path / tag)
        rep = evaluate_model(res.model, c1["test"])
        write_report(rep, tmp_path / tag, "full")
        runs.append((res, rep))
    files = ("train_log.csv", "checkpoint.fckp", "categorical.csv", "continuous.csv")
    same_files = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    with ad.default_dtype(tcfg.dtype):
        fresh = FusionCast(mcfg)
    load_checkpoint(tmp_path / "a" / "checkpoint.fckp", fresh)
    reloaded = evaluate_model(fresh, c1["test"])
    before = runs[0][1]
    same_eval = reloaded.tables == before.tables and reloaded.mae == before.mae and reloaded.rmse == before.rmse

    g = rng.random((16, 16))
    save_grid(tmp_path / "g.fgrid", g, 1_677_628_800, "mm")
    back, epoch, _ = load_grid(tmp_path / "g.fgrid")
    grid_ok = back.tobytes() == g.tobytes() and epoch == 1_677_628_800
    recs = [StationRecord(f"S{i}", float(rng.uniform(32, 42)), float(rng.uniform(-93, -84)), 1_677_628_800 + i,
                          float(rng.uniform(0, 150))) for i in range(20)]
    write_station_csv(tmp_path / "s.csv", recs)
    csv_ok = load_station_csv(tmp_path / "s.csv") == (recs, 0)
    ok = same_corpus and same_files and same_eval and grid_ok and csv_ok
    report(8, ok, f"corpus={same_corpus}, logs/reports/checkpoints byte-identical={same_files}, "
                  f"checkpoint round-trip eval={same_eval}, fgrid={grid_ok}, csv={csv_ok}")


def test_criterion_9_report_layout(report, tmp_path, rng):
    preds = [rng.gamma(0.6, 3.0, size=(12, 8, 8)) for _ in range(2)]
    truths = [rng.gamma(0.6, 3.0, size=(12, 8, 8)) for _ in range(2)]
    write_report(evaluate(preds, truths), tmp_path, "full")
    lines = (tmp_path / "categorical.csv").read_text().splitlines()
    header_ok = lines[0] == "threshold,variant,csi_t10,csi_t40,csi_t80,csi_t120"
    taus = sorted({tau for _, tau in read_categorical(tmp_path / "categorical.csv")})
    ok = header_ok and taus == [0.1, 1.0, 4.0] and len(lines) == 4
    report(9, ok, f"header {lines[0]!r}, thresholds {taus}")
