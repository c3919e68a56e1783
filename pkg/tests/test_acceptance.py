"""Acceptance criteria 1-8; each test records one pass/fail line (see the terminal summary)."""
import inspect
import math
import time

import numpy as np
import pytest
from scipy.optimize import nnls

from helpers import flat_loss, toy_config
from scenemotion import autodiff as ad
from scenemotion import body
from scenemotion.autodiff import Tensor, grad_check
from scenemotion.config import RunConfig
from scenemotion.dataset import Dataset, generate_dataset, make_scene, split_scenes
from scenemotion.evaluate import (apd, apd_markers, evaluated_frame, goal_distance, motion_goal_distance,
                                  reconstruction_metrics, run_ablation, walk_benchmark_config)
from scenemotion.geometry import farthest_point_sample, fuse_multiview, knn_pool, project_points
from scenemotion.model import CVAE, kl_divergence
from scenemotion.text import FrozenTextEncoder, Vocabulary
from scenemotion.train import (SceneCache, checkpoint_bytes, label_accuracy, log_text, make_batch, new_state,
                               pretrain, start_phase, state_from_bytes, train)
from scenemotion.world import MotionSeq, generate_scene, instance_names, render_views

pytestmark = pytest.mark.slow


# ---------------------------------------------------------------- 1. gradients

def _primitive_cases(rng):
    x = lambda *s: rng.normal(size=s)                      # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)         # noqa: E731
    away = lambda *s: rng.choice([-1, 1], size=s) * rng.uniform(0.2, 1.5, size=s)  # noqa: E731
    mask = rng.random((3, 4)) > 0.5
    idx = rng.integers(0, 5, size=(2, 3))
    bidx = rng.integers(0, 5, size=(2, 3, 2))
    return {
        "add": (lambda a, b: ad.add(a, b), [x(3, 4), x(4)]),
        "sub": (lambda a, b: ad.sub(a, b), [x(3, 4), x(3, 1)]),
        "mul": (lambda a, b: ad.mul(a, b), [x(3, 4), x(3, 4)]),
        "div": (lambda a, b: ad.div(a, b), [x(3, 4), pos(3, 4)]),
        "scale": (lambda a: ad.scale(a, -1.7), [x(3, 4)]),
        "power": (lambda a: ad.power(a, 1.5), [pos(3, 4)]),
        "relu": (ad.relu, [away(3, 4)]),
        "abs": (ad.abs_, [away(3, 4)]),
        "exp": (ad.exp, [x(3, 4)]),
        "log": (ad.log, [pos(3, 4)]),
        "sqrt": (ad.sqrt, [pos(3, 4)]),
        "sigmoid": (ad.sigmoid, [x(3, 4)]),
        "tanh": (ad.tanh, [x(3, 4)]),
        "sin": (ad.sin, [x(3, 4)]),
        "cos": (ad.cos, [x(3, 4)]),
        "square": (ad.square, [x(3, 4)]),
        "where": (lambda a, b: ad.where(mask, a, b), [x(3, 4), x(3, 4)]),
        "masked_select": (lambda a: ad.masked_select(a, mask), [x(3, 4)]),
        "matmul": (ad.matmul, [x(2, 3, 4), x(4, 5)]),
        "sum": (lambda a: ad.sum_(a, axis=1), [x(3, 4)]),
        "mean": (lambda a: ad.mean(a, axis=0, keepdims=True), [x(3, 4)]),
        "max": (lambda a: ad.max_(a, axis=1), [np.arange(12.0).reshape(3, 4) * 0.3 + x(3, 4) * 0.01]),
        "min": (lambda a: ad.minimum_reduce(a, axis=0), [np.arange(12.0).reshape(3, 4) * 0.3 + x(3, 4) * 0.01]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [x(3, 4)]),
        "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), [x(3, 4)]),
        "l2_norm": (lambda a: ad.l2_norm(a, axis=-1), [x(3, 4)]),
        "normalize": (lambda a: ad.normalize(a, axis=-1), [x(3, 4)]),
        "cosine_similarity": (lambda a, b: ad.cosine_similarity(a, b, axis=-1), [x(3, 4), x(3, 4)]),
        "clip01": (ad.clip01, [rng.choice([0.2, 0.5, 0.8, -0.4, 1.3], size=(3, 4)) + x(3, 4) * 0.01]),
        "reshape": (lambda a: ad.reshape(a, (2, 6)), [x(3, 4)]),
        "transpose": (lambda a: ad.transpose(a, (1, 0, 2)), [x(2, 3, 4)]),
        "swapaxes": (lambda a: ad.swapaxes(a, 0, 2), [x(2, 3, 4)]),
        "slice": (lambda a: ad.slice_(a, (slice(None), slice(1, 3))), [x(3, 4)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [x(3, 2), x(3, 4)]),
        "stack": (lambda a, b: ad.stack([a, b], axis=0), [x(3, 4), x(3, 4)]),
        "gather": (lambda a: ad.gather(a, idx), [x(5, 4)]),
        "gather_batched": (lambda a: ad.gather(a, bidx), [x(2, 5, 4)]),
        "index_select": (lambda a: ad.index_select(a, idx), [x(5, 4)]),
    }


def _scalarize(op, rng):
    """Contract an op's output with fixed random weights so every output entry matters."""
    def f(*args):
        out = op(*args)
        w = np.random.default_rng(len(out.shape) + out.size).normal(size=out.shape)
        return ad.sum_(ad.mul(out, Tensor(w)))
    return f


def test_criterion_1_gradient_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_prim, worst_name = 0.0, ""
    for name, (op, inputs) in _primitive_cases(rng).items():
        err = grad_check(_scalarize(op, rng), [Tensor(v) for v in inputs])
        if err >= worst_prim:
            worst_prim, worst_name = err, name

    cfg = toy_config()
    ds = generate_dataset(cfg.data, 0)
    text = FrozenTextEncoder(Vocabulary(), cfg.model.feature_dim)
    cache = SceneCache(cfg.model)
    train_samples = ds.split_samples("train")
    worst_loss = 0.0
    for restart in range(10):
        r = np.random.default_rng([7, restart])
        chosen = [train_samples[i] for i in r.choice(len(train_samples), size=2, replace=False)]
        batch = make_batch(chosen, [cache.geom(ds.scene(s.scene_index)) for s in chosen])
        model = CVAE(cfg.model, text, seed=restart)
        eps = r.standard_normal((2, cfg.model.latent_dim))
        f, x0 = flat_loss(model, batch, cfg.lambdas, eps)
        worst_loss = max(worst_loss, grad_check(f, Tensor(x0), n_coords=40, seed=restart))
    secs = time.perf_counter() - t0
    ok = worst_prim < 1e-6 and worst_loss < 1e-4 and secs < 120
    criterion(1, ok, f"primitives max rel err {worst_prim:.2e} ({worst_name}), loss_total max rel err "
                     f"{worst_loss:.2e} over 10 restarts, {secs:.0f} s")
    assert ok


# ---------------------------------------------------------------- 2. closed-form oracles

def _surface_samples(start, end, radius, n, rng):
    """Points on the cylinder wall and on both end spheres of one capsule, density ~ area."""
    axis = end - start
    length = np.linalg.norm(axis)
    cyl_area, sph_area = 2 * np.pi * radius * length, 4 * np.pi * radius ** 2
    n_cyl = int(round(n * cyl_area / (cyl_area + 2 * sph_area)))
    n_sph = (n - n_cyl) // 2
    pts = []
    for center in (start, end):
        d = rng.normal(size=(n_sph, 3))
        pts.append(center + radius * d / np.linalg.norm(d, axis=1, keepdims=True))
    if n_cyl and length > 1e-9:
        u = axis / length
        a = np.cross(u, [1.0, 0.0, 0.0] if abs(u[0]) < 0.9 else [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(u, a)
        t = rng.uniform(0, length, n_cyl)[:, None]
        phi = rng.uniform(0, 2 * np.pi, n_cyl)[:, None]
        pts.append(start + t * u + radius * (np.cos(phi) * a + np.sin(phi) * b))
    return np.concatenate(pts)


def _kl_monte_carlo(mu, logvar, n, rng):
    std = np.exp(0.5 * logvar)
    z = mu + std * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * np.sum(((z - mu) / std) ** 2 + logvar + np.log(2 * np.pi), axis=1)
    log_p = -0.5 * np.sum(z ** 2 + np.log(2 * np.pi), axis=1)
    return float(np.mean(log_q - log_p))


def test_criterion_2_closed_form_oracles(criterion):
    rng = np.random.default_rng(1)
    kl_err = 0.0
    for _ in range(20):
        mu, logvar = rng.normal(size=4), rng.uniform(-1, 1, size=4)
        exact = float(kl_divergence(mu[None], logvar[None]).data)
        kl_err = max(kl_err, abs(_kl_monte_carlo(mu, logvar, 100_000, rng) - exact) / exact)

    sdf_err = 0.0
    for _ in range(20):
        beta = rng.normal(scale=0.5, size=10)
        frame = body.rest_frame(beta, (rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0))
        frame[9:] = rng.normal(scale=0.3, size=63)
        start, end, radii, _ = body.capsules(frame[None], beta[None])
        start, end, radii = start.data[0], end.data[0], radii.data[0]
        lengths = np.linalg.norm(end - start, axis=1)
        areas = 2 * np.pi * radii * lengths + 8 * np.pi * radii ** 2
        counts = np.floor(100_000 * areas / areas.sum()).astype(int)
        surface = np.concatenate([_surface_samples(s, e, r, c, rng) for s, e, r, c in zip(start, end, radii, counts)])
        center = 0.5 * (start.min(axis=0) + end.max(axis=0))
        d = rng.normal(size=3)
        query = center + rng.uniform(0.7, 1.5) * d / np.linalg.norm(d)
        got = float(body.body_sdf(frame, beta, query[None]).data)
        oracle = float(np.min(np.linalg.norm(surface - query, axis=1)))
        assert got > 0.0
        sdf_err = max(sdf_err, abs(got - oracle))

    # APD: two constant sequences offset so each frame's marker distances sum to sqrt(m) d
    m, dist, frames = 21, 0.25, 7
    a = np.zeros((1, frames, m, 3))
    b = a + np.array([dist / math.sqrt(m), 0.0, 0.0])
    apd_val = apd_markers(np.concatenate([a, b]))
    # MPVPE: a 1 cm translation everywhere reads as exactly 10 mm
    gt = np.stack([body.rest_frame(np.zeros(10), (0.2 * t, 0.0, 0.0)) for t in range(5)])
    pred = gt.copy()
    pred[:, 1] += 0.01
    mask = np.ones(5, bool)
    r = reconstruction_metrics(MotionSeq(gt, mask, 0), MotionSeq(pred, mask, 0), np.zeros(10))
    ok = (kl_err < 0.02 and sdf_err < 0.002 and math.isclose(apd_val, math.sqrt(m) * dist, rel_tol=1e-12)
          and math.isclose(r.mpvpe, 10.0, rel_tol=1e-9) and math.isclose(r.mpjpe, 10.0, rel_tol=1e-9))
    criterion(2, ok, f"KL max rel err {kl_err:.4f}, body_sdf max err {1000 * sdf_err:.3f} mm, "
                     f"APD {apd_val:.12f} vs {math.sqrt(m) * dist:.12f}, MPVPE {r.mpvpe:.9f} mm")
    assert ok


# ---------------------------------------------------------------- 3. geometry properties

def _fps_greedy_ok(coords, chosen):
    for i in range(1, len(chosen)):
        d = np.min(np.linalg.norm(coords[:, None] - coords[chosen[:i]][None], axis=-1), axis=1)
        best = np.flatnonzero(d == d.max())[0]
        if chosen[i] != best:
            return False
    return len(set(chosen.tolist())) == len(chosen)


def test_criterion_3_geometry_properties(criterion):
    rng = np.random.default_rng(3)
    fps_ok = all(_fps_greedy_ok(c, farthest_point_sample(c, 16))
                 for c in (rng.uniform(size=(int(rng.integers(20, 80)), 3)) for _ in range(100)))

    pool_ok = True
    for _ in range(20):
        coords, feats, centers = rng.normal(size=(60, 3)), rng.normal(size=(60, 5)), rng.normal(size=(8, 3))
        perm = rng.permutation(60)
        pool_ok &= np.allclose(knn_pool(coords, feats, centers, 6), knn_pool(coords[perm], feats[perm], centers, 6),
                               rtol=0, atol=1e-12)

    enc = FrozenTextEncoder(Vocabulary(), 64)
    hull_ok, hull_points = True, 0
    for seed in range(3):
        spec, cloud = generate_scene(40 + seed)
        views = render_views(spec, 4, seed, 0.05, enc, 64)
        targets, covered = fuse_multiview(cloud, views)
        contrib = [[] for _ in range(len(cloud))]
        for v in views.views:
            pix, valid = project_points(cloud.coords, v.projection)
            for i in np.flatnonzero(valid):
                if v.instance_map[pix[i, 0], pix[i, 1]] == cloud.instance_id[i]:
                    contrib[i].append(v.features[pix[i, 0], pix[i, 1]])
        for i in np.flatnonzero(covered)[::7]:
            f = np.array(contrib[i])
            lhs = np.vstack([f.T, np.ones(len(f))])
            _, resid = nnls(lhs, np.concatenate([targets[i], [1.0]]))
            hull_ok &= resid < 1e-9
            hull_points += 1
        hull_ok &= bool(np.all(targets[~covered] == 0))

    spec, cloud = generate_scene(7)
    targets, covered = fuse_multiview(cloud, render_views(spec, 4, 0, 0.0, enc, 96))
    names = instance_names(spec)
    trip_ok = covered.any() and all(np.array_equal(targets[i], enc.class_embedding(names[int(cloud.instance_id[i])]))
                                    for i in np.flatnonzero(covered))
    ok = bool(fps_ok and pool_ok and hull_ok and trip_ok)
    criterion(3, ok, f"FPS greedy on 100 clouds {fps_ok}, knn_pool permutation invariant {pool_ok}, "
                     f"fusion in convex hull ({hull_points} points) {hull_ok}, sigma=0 round trip {trip_ok}")
    assert ok


# ---------------------------------------------------------------- 4. pretraining efficacy

def test_criterion_4_pretraining_efficacy(criterion):
    t0 = time.perf_counter()
    base = RunConfig()
    data_cfg = base.data.__class__(n_scenes=100, test_fraction=0.2, world=base.world)
    enc = FrozenTextEncoder(Vocabulary(), base.world.feature_dim)
    scenes = [make_scene(i, 0, data_cfg, enc)[1] for i in range(100)]
    ds = Dataset(data_cfg, scenes, [], split_scenes(100, 0.2, 0))
    held_out = [ds.scene(i) for i in ds.scene_ids("test")]
    assert len(held_out) == 20 and base.model.feature_dim == 64 and base.model.ratio == 4
    losses, accs, reached = [], [], []
    cache = SceneCache(base.model)
    for seed in range(3):
        cfg = base.with_overrides(train={"seed": seed, "pretrain_epochs": 20})
        state = new_state(cfg, "pretrain")
        pretrain(state, ds, cache=cache)
        curve = [row["total"] for row in state.log]
        below = [e for e, v in enumerate(curve) if v < 0.10]
        reached.append(below[0] + 1 if below else None)
        losses.append(curve[-1])
        accs.append(label_accuracy(state, held_out, cache))
    secs = time.perf_counter() - t0
    med_loss, med_acc = float(np.median(losses)), float(np.median(accs))
    ok = med_loss < 0.10 and med_acc >= 0.95 and all(r is not None for r in reached) and secs < 600
    criterion(4, ok, f"median final distill loss {med_loss:.4f} (below 0.10 after epochs {reached}), "
                     f"median held-out labeling accuracy {100 * med_acc:.2f}% over 3 seeds, {secs:.0f} s")
    assert ok


# ---------------------------------------------------------------- 5 and 6. walk benchmark

@pytest.fixture(scope="module")
def walk():
    t0 = time.perf_counter()
    cfg = walk_benchmark_config()
    ds = generate_dataset(cfg.data, 0)
    return {"config": cfg, "ds": ds, "encoders": {}, "reports": {}, "data_secs": time.perf_counter() - t0}


def _run_variants(walk, seeds, variants):
    res = run_ablation(walk["config"], walk["ds"], seeds=seeds, variants=variants, encoders=walk["encoders"])
    for v, reps in res.reports.items():
        for seed, rep in zip(seeds, reps):
            walk["reports"][(v, seed)] = rep.row("all")["goal_dist_median"]


def _median_over(walk, variant, seeds):
    return float(np.median([walk["reports"][(variant, s)] for s in seeds]))


def test_criterion_5_full_beats_closed_vocabulary(criterion, walk):
    t0 = time.perf_counter()
    _run_variants(walk, (0, 1, 2), ("full", "closed_vocab"))
    secs = time.perf_counter() - t0 + walk["data_secs"]
    full, closed = _median_over(walk, "full", (0, 1, 2)), _median_over(walk, "closed_vocab", (0, 1, 2))
    gain = 1.0 - full / closed
    ok = gain >= 0.15 and secs < 1800
    criterion(5, ok, f"median goal distance full {full:.3f} m vs closed-vocab {closed:.3f} m "
                     f"({100 * gain:.1f}% lower), {secs / 60:.1f} min")
    assert ok


def test_criterion_6_ablation_ordering(criterion, walk):
    seeds = (0, 1, 2, 3, 4)
    missing = ("bbox_off", "class_off", "unaligned_text")
    _run_variants(walk, (0, 1, 2), missing)
    _run_variants(walk, (3, 4), ("full", "closed_vocab") + missing)
    med = {v: _median_over(walk, v, seeds) for v in ("full",) + missing + ("closed_vocab",)}
    full_lowest = all(med["full"] < v for k, v in med.items() if k != "full")
    unaligned_worst = all(med["unaligned_text"] > v for k, v in med.items() if k != "unaligned_text")
    ok = full_lowest and unaligned_worst
    order = " < ".join(f"{k} {v:.3f}" for k, v in sorted(med.items(), key=lambda kv: kv[1]))
    criterion(6, ok, f"medians over 5 seeds: {order}; full lowest {full_lowest}, unaligned strictly worst "
                     f"{unaligned_worst}")
    assert ok


# ---------------------------------------------------------------- 7. determinism and persistence

def test_criterion_7_determinism_and_persistence(criterion):
    cfg = toy_config(train={"pretrain_epochs": 2, "epochs": 2})
    ds_a, ds_b = generate_dataset(cfg.data, 0), generate_dataset(cfg.data, 0)
    data_same = all(np.array_equal(a.cloud.coords, b.cloud.coords) and np.array_equal(a.targets, b.targets)
                    for a, b in zip(ds_a.scenes, ds_b.scenes))

    def run(ds, stop_pretrain=None, stop_train=None):
        state = new_state(cfg, "pretrain")
        pretrain(state, ds, epochs=stop_pretrain)
        if stop_pretrain is not None:
            state = state_from_bytes(checkpoint_bytes(state))
            pretrain(state, ds)
        start_phase(state, "train")
        train(state, ds, epochs=stop_train)
        if stop_train is not None:
            state = state_from_bytes(checkpoint_bytes(state))
            train(state, ds)
        return state

    a, b = run(ds_a), run(ds_b)
    same_run = log_text(a) == log_text(b) and checkpoint_bytes(a) == checkpoint_bytes(b)
    data = checkpoint_bytes(a)
    round_trip = checkpoint_bytes(state_from_bytes(data)) == data
    resumed = run(ds_a, stop_pretrain=1, stop_train=1)
    resume_ok = checkpoint_bytes(resumed) == data and log_text(resumed) == log_text(a)
    ok = data_same and same_run and round_trip and resume_ok
    criterion(7, ok, f"identical data {data_same}, identical logs and checkpoints {same_run}, "
                     f"save-load-save byte identical {round_trip}, resume bit-exact {resume_ok}")
    assert ok


# ---------------------------------------------------------------- 8. protocol conformance

def test_criterion_8_protocol_conformance(criterion):
    beta = np.zeros(10)
    mask = np.array([1, 1, 1, 1, 0, 0], bool)
    xs = (0.0, 0.5, 1.0, 3.0, 9.0, 9.0)
    frames = np.stack([body.rest_frame(beta, (x, 0.0, 0.0)) for x in xs])
    goal = np.array([[3.0, 0.0, 0.0]])   # touched only at the last valid frame
    start = np.array([[0.0, 0.0, 0.0]])  # touched only at the first frame
    sdf = lambda t, g: float(body.body_sdf(frames[t], beta, g).data)  # noqa: E731
    checks = {
        "walk uses last valid frame": motion_goal_distance(frames[None], "walk", mask, beta, goal) == sdf(3, goal),
        "walk ignores padded frames": sdf(5, goal) > 1.0 and sdf(3, goal) == 0.0,
        "sit uses last valid frame": evaluated_frame("sit", mask) == 3,
        "lie uses last valid frame": evaluated_frame("lie", mask) == 3,
        "stand up uses first frame": motion_goal_distance(frames[None], "stand up", mask, beta, start) == 0.0
        and sdf(3, start) > 1.0,
        "goal distance averages K samples": math.isclose(
            motion_goal_distance(np.stack([frames, frames + np.r_[0.5, 0.0, 0.0, np.zeros(69)]]), "walk", mask,
                                 beta, goal), 0.5 * (sdf(3, goal) + 0.0) + 0.5 * float(
                body.body_sdf(frames[3] + np.r_[0.5, 0.0, 0.0, np.zeros(69)], beta, goal).data), rel_tol=1e-12),
        "K defaults to 10": inspect.signature(goal_distance).parameters["k"].default == 10,
        "K' defaults to 20": inspect.signature(apd).parameters["k"].default == 20,
    }
    # APD: Q = K'(K'-1)T counts ordered pairs and valid frames only
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 6, 3, 3))
    pairs = sum(np.linalg.norm(x[i] - x[j], axis=-1).sum() for i in range(4) for j in range(4) if i != j)
    checks["APD over ordered pairs"] = math.isclose(apd_markers(x), pairs / (4 * 3 * 6), rel_tol=1e-12)
    checks["APD differs from unordered normalization"] = not math.isclose(apd_markers(x), pairs / (6 * 6))
    y = x.copy()
    y[:, 4:] += 50.0 * rng.normal(size=y[:, 4:].shape)
    checks["APD ignores padded frames"] = apd_markers(x, mask) == apd_markers(y, mask)
    checks["padding would change APD"] = apd_markers(x) != apd_markers(y)
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion(8, ok, f"{len(checks) - len(failed)}/{len(checks)} constructed cases hold" +
              (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok
