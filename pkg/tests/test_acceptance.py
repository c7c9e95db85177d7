"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``REPORT`` and printed in the terminal summary
(see ``conftest.py``), so they appear even when output capture is on.
"""

import io
import time
import warnings
from contextlib import redirect_stdout
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from oracles import average_precision_direct, conv2d_loops, matmul_loops, maxpool_loops
from semi3net import tensor as T
from semi3net.attention import attention_mask, build_attention, co_mask
from semi3net.cli import main as cli_main
from semi3net.config import load_config
from semi3net.data import generate_dataset, network_input, synthesize
from semi3net.gradcheck import run_suite
from semi3net.losses import LossWeights, combine
from semi3net.model import build_model, forward_triple, load_checkpoint, save_checkpoint
from semi3net.params import ParameterStore, assert_tied, encode
from semi3net.retrieval import MissingCategoryWarning, RetrievalIndex, evaluate, mean_average_precision, rank
from semi3net.trainer import pretrain, train_joint

DESK_CFG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
REPORT: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    REPORT.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")


def desk_config(seed: int = 0, ablation: bool = False):
    cfg = load_config(DESK_CFG)
    cfg.train = replace(cfg.train, seed=seed)
    cfg.data = replace(cfg.data, seed=seed)
    if ablation:
        cfg.use_co_attention = False
        cfg.weights = replace(cfg.weights, beta=0.0, gamma=0.0)
    return cfg


def build(cfg):
    return build_model(cfg.backbone, cfg.share_plan, seed=cfg.train.seed, reduction=cfg.reduction,
                       use_co_attention=cfg.use_co_attention, weights=cfg.weights)


@lru_cache(maxsize=None)
def desk_run(seed: int, ablation: bool):
    """Full two-stage run; cached because several criteria read the same run."""
    cfg = desk_config(seed, ablation)
    t0 = time.perf_counter()
    data = synthesize(cfg.data)
    model = build(cfg)
    pretrain(model, data, cfg.train)
    log = train_joint(model, data, cfg.train)
    elapsed = time.perf_counter() - t0
    return model, data, log, elapsed, evaluate(model, data, "image")


def test_criterion_1_full_scale_not_reproduced():
    # Informational: full-scale MAP needs ImageNet-pretrained VGG19 and the full
    # benchmarks; criteria 2-9 are the substituted acceptance.
    report(1, True, "full-scale benchmark MAP not attempted at desk scale (informational)")


def test_criterion_2_gradient_suite():
    results, elapsed = run_suite(seed=0)
    worst_op = max(r.max_error for r in results[:-1])
    e2e = results[-1]
    ok = all(r.ok for r in results) and elapsed <= 60.0
    report(2, ok, f"{len(results) - 1} op checks worst {worst_op:.2e} (<=1e-5), end-to-end {e2e.max_error:.2e} "
                  f"(<=1e-4), {elapsed:.1f}s (<=60s)")
    assert ok, [r.line() for r in results if not r.ok]


def test_criterion_3_oracles():
    rng = np.random.default_rng(2024)
    worst = {"conv2d": 0.0, "maxpool2d": 0.0, "linear": 0.0, "MAP": 0.0}
    for _ in range(100):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k, stride, pad = rng.integers(1, 4), rng.integers(1, 3), rng.integers(0, 2)
        h, w = rng.integers(k, 8), rng.integers(k, 8)
        x, kern, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        got = T.conv2d(T.constant(x), T.constant(kern), T.constant(b), int(stride), int(pad)).data
        worst["conv2d"] = max(worst["conv2d"], np.abs(got - conv2d_loops(x, kern, b, stride, pad)).max())

        pk, ps = rng.integers(1, 3), rng.integers(1, 3)
        x = rng.normal(size=(n, c, rng.integers(pk, 9), rng.integers(pk, 9)))
        got = T.maxpool2d(T.constant(x), int(pk), int(ps)).data
        worst["maxpool2d"] = max(worst["maxpool2d"], np.abs(got - maxpool_loops(x, pk, ps)).max())

        d, m = rng.integers(1, 7), rng.integers(1, 6)
        x, wt, b = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=m)
        got = T.linear(T.constant(x), T.constant(wt), T.constant(b)).data
        worst["linear"] = max(worst["linear"], np.abs(got - matmul_loops(x, wt, b)).max())

        g, q, kc = rng.integers(1, 21), rng.integers(1, 6), rng.integers(1, 5)
        feats = rng.normal(size=(g, 4))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        cats = rng.integers(0, kc, size=g)
        index = RetrievalIndex(feats, cats, np.arange(g), "image")
        queries = rng.normal(size=(q, 4))
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        qcats = rng.integers(0, kc, size=q)
        rankings = [rank(index, v) for v in queries]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MissingCategoryWarning)
            got = mean_average_precision(rankings, qcats)
        expect = np.mean([average_precision_direct(list(r.categories == c)) for r, c in zip(rankings, qcats)])
        worst["MAP"] = max(worst["MAP"], abs(got - expect))
    ok = all(v <= 1e-12 for v in worst.values())
    report(3, ok, "100 instances each, max abs diff " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + " (<=1e-12)")
    assert ok, worst


def test_criterion_4_tying_invariants():
    cfg = desk_config(0)
    # 200 training samples / batch 20 = exactly 10 joint steps
    cfg.train = replace(cfg.train, pretrain_epochs=1, joint_epochs=1, batch_size=20)
    data = synthesize(cfg.data)
    model = build(cfg)
    pretrain(model, data, cfg.train)
    log = train_joint(model, data, cfg.train)
    tied = assert_tied(model.store, model.plan)
    s = model.store
    convs = [n for n in s.names() if n.startswith("image.conv")]
    image_free = any(not np.array_equal(s[n].data, s[n.replace("image", "sketch", 1)].data) for n in convs)
    ok = len(log) == 10 and tied.groups == {"SE-conv": True, "FC-all": True} and image_free
    report(4, ok, f"after {len(log)} joint steps: SE-conv/FC-all bitwise tied={tied.ok}, "
                  f"image convs differ from shared convs={image_free}")
    assert ok


def test_criterion_5_hybrid_identity():
    model, _, log, _, _ = desk_run(0, False)
    w = model.weights
    defaults = (w.alpha, w.beta, w.gamma, w.m1, w.m2) == (10.0, 100.0, 10.0, 0.3, 0.3)
    worst = 0.0
    for row in log.rows:
        recomputed = combine(row[1:4], row[4], row[5], row[6], LossWeights())
        worst = max(worst, abs(row[7] - recomputed))
    ok = defaults and worst <= 1e-12
    report(5, ok, f"{len(log)} logged steps, max |total - weighted components| {worst:.1e} (<=1e-12), "
                  f"default weights={defaults}")
    assert ok


def test_criterion_6_co_attention_invariants():
    rng = np.random.default_rng(6)
    store = ParameterStore(6)
    ai = build_attention(store, "image.attn", 16, 4)
    ae = build_attention(store, "edgemap.attn", 16, 4)
    in_range = bounded = commutes = True
    for _ in range(1000):
        scale = 10.0 ** rng.uniform(-2, 2)
        for t in store.entries.values():
            t.data = rng.normal(0.0, scale, size=t.shape)
        xi = T.constant(rng.normal(0.0, scale, size=(2, 16, 2, 2)))
        xe = T.constant(rng.normal(0.0, scale, size=(2, 16, 2, 2)))
        mi, me = attention_mask(ai, xi).data, attention_mask(ae, xe).data
        m = co_mask(T.constant(mi), T.constant(me)).data
        in_range &= bool(((mi > 0) & (mi < 1) & (me > 0) & (me < 1) & (m > 0) & (m < 1)).all())
        bounded &= bool((m <= np.minimum(mi, me)).all())
        commutes &= m.tobytes() == co_mask(T.constant(me), T.constant(mi)).data.tobytes()

    trained, data, *_ = desk_run(0, False)
    idx = data.split_indices("test")[:8]
    S, I, E = (T.constant(network_input(a[idx])) for a in (data.sketches, data.images, data.edgemaps))
    E2 = T.constant(network_input(data.edgemaps[np.roll(idx, 1)]))
    moved = {}
    for co in (True, False):
        model = replace(trained, use_co_attention=co)
        moved[co] = forward_triple(model, S, I, E).f_I.data.tobytes() != forward_triple(model, S, I, E2).f_I.data.tobytes()
    iff = moved[True] and not moved[False]
    ok = in_range and bounded and commutes and iff
    report(6, ok, f"1000 inputs: masks in (0,1)={in_range}, co-mask<=min={bounded}, commutative={commutes}; "
                  f"edgemap perturbation moves image embedding iff co-attention={iff}")
    assert ok


def test_criterion_7_end_to_end_desk_run():
    _, data, log, elapsed, map_image = desk_run(0, False)
    total = log.column("total")
    queries = int((data.splits == "test").sum())
    ok = elapsed <= 300.0 and total[-1] < 0.5 * total[0] and map_image >= 0.90 and queries == 40
    report(7, ok, f"{elapsed:.0f}s (<=300s), final loss {total[-1]:.3f} vs step 0 {total[0]:.3f} "
                  f"(ratio {total[-1] / total[0]:.2f} < 0.5), MAP {map_image:.4f} (>=0.90) on {queries} queries")
    assert ok


def test_criterion_8_ablation_trend():
    full = [desk_run(s, False)[4] for s in range(3)]
    ablation = [desk_run(s, True)[4] for s in range(3)]
    ok = float(np.median(full)) >= float(np.median(ablation))
    report(8, ok, f"median MAP full {np.median(full):.4f} {[round(v, 4) for v in full]} >= "
                  f"ablation {np.median(ablation):.4f} {[round(v, 4) for v in ablation]}")
    assert ok


def test_criterion_9_determinism_and_persistence(tmp_path):
    cfg = desk_config(3)
    cfg.train = replace(cfg.train, pretrain_epochs=1, joint_epochs=2)
    data = synthesize(cfg.data)
    blobs = []
    for _ in range(2):
        model = build(cfg)
        pretrain(model, data, cfg.train)
        train_joint(model, data, cfg.train)
        blobs.append(encode(model.store))
    deterministic = blobs[0] == blobs[1]

    ckpt = tmp_path / "run.ckpt"
    save_checkpoint(model, ckpt)
    reloaded = load_checkpoint(ckpt)
    round_trip = encode(reloaded.store) == blobs[1] and reloaded.check_tied().ok

    data_dir = generate_dataset(cfg.data, tmp_path / "data")
    expect = f"MAP={evaluate(model, data, 'image'):.6f}"
    lines = []
    for _ in range(2):
        buf = io.StringIO()
        with redirect_stdout(buf):
            status = cli_main(["eval", "--data", str(data_dir), "--ckpt", str(ckpt), "--source", "image"])
        lines.append((status, buf.getvalue().strip()))
    same_eval = lines[0] == lines[1] == (0, expect)
    ok = deterministic and round_trip and same_eval
    report(9, ok, f"bitwise-identical checkpoints={deterministic}, save/load bitwise={round_trip}, "
                  f"eval after reload prints {lines[0][1]!r} matching in-memory={same_eval}")
    assert ok
