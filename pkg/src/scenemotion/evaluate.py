"""Metrics, the benchmark runner and the ablation runner."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import body
from .config import RunConfig
from .dataset import Dataset
from .model import sample_motion
from .text import ACTIONS
from .train import (FeatureCache, SceneCache, TrainState, new_state, pretrain, start_phase, train)
from .world import DatasetSample, MotionSeq

log = logging.getLogger(__name__)

# reference trend of the original large-scale experiments, printed as a footer only
REFERENCE_BENCHMARK = ("reference (real data): goal distance, all actions 1.008 m baseline vs 0.732 m "
                       "aligned open-vocabulary model; walk 1.370 m vs 0.952 m")
REFERENCE_ABLATION = ("reference (real data, walk): full 0.952 < class-off 0.982 < bbox-off 1.011 "
                      "< closed-vocab 1.021 < unaligned text 1.425")


def evaluated_frame(action: str, mask: np.ndarray) -> int:
    """Last valid frame for walk/sit/lie, first frame for stand up."""
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    if action == "stand up":
        return 0
    return int(np.flatnonzero(mask)[-1])


def motion_goal_distance(motions: np.ndarray, action: str, mask: np.ndarray, beta, goal_points) -> float:
    """Mean over K motions (K, T, 72) of body_sdf at the evaluated frame against the goal points."""
    goal_points = np.asarray(goal_points, dtype=np.float64)
    if len(goal_points) == 0:
        raise ValueError("goal distance needs a non-empty goal point set")
    t = evaluated_frame(action, mask)
    frames = np.asarray(motions)[:, t, :]
    d = body.body_sdf(frames, np.broadcast_to(beta, (len(frames), body.N_BETAS)), goal_points).data
    return float(np.mean(d))


def generate(state: TrainState, sample: DatasetSample, geometry, k: int, seed: int) -> np.ndarray:
    c = sample.cloud
    return sample_motion(state.model, sample.text.tokens, c.coords, c.colors, sample.beta, geometry, k, seed)


def goal_distance(state: TrainState, sample: DatasetSample, geometry, k: int = 10, seed: int = 0) -> float:
    if not sample.cloud.goal_mask.any():
        raise ValueError("goal distance needs a non-empty goal mask")
    motions = generate(state, sample, geometry, k, seed)
    return motion_goal_distance(motions, sample.text.action, sample.motion.valid_mask, sample.beta,
                                sample.goal_points)


def apd_markers(markers: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Average pairwise distance of K' marker sequences (K', T, m, 3), Q = K'(K'-1)T."""
    markers = np.asarray(markers, dtype=np.float64)
    k = len(markers)
    if k < 2:
        raise ValueError("APD needs at least two samples")
    if mask is not None:
        markers = markers[:, np.asarray(mask, dtype=bool)]
    t = markers.shape[1]
    total = 0.0
    for i in range(k):
        diff = markers[i][None] - markers                      # (K', T, m, 3)
        total += np.sqrt(np.sum(diff ** 2, axis=-1)).sum(axis=-1).sum()
    return total / (k * (k - 1) * t)


def apd(state: TrainState, sample: DatasetSample, geometry, k: int = 20, seed: int = 0) -> float:
    if k < 2:
        raise ValueError("APD needs K' >= 2")
    motions = generate(state, sample, geometry, k, seed)
    markers = body.marker_positions(motions, np.broadcast_to(sample.beta, motions.shape[:2] + (body.N_BETAS,))).data
    return apd_markers(markers, sample.motion.valid_mask)


@dataclass(frozen=True)
class Reconstruction:
    mae_t: float
    mae_r: float
    mae_theta: float
    mpvpe: float
    mpjpe: float


def reconstruction_metrics(gt: MotionSeq, pred: MotionSeq, beta) -> Reconstruction:
    """MAE x100 per parameter block, MPVPE / MPJPE in millimetres, over valid frames."""
    if not np.array_equal(gt.valid_mask, pred.valid_mask):
        raise ValueError("ground truth and prediction have different valid masks")
    m = gt.valid_mask
    a, b = gt.params[m], pred.params[m]
    beta = np.broadcast_to(beta, (len(a), body.N_BETAS))
    va, vb = body.skin_mesh(a, beta).data, body.skin_mesh(b, beta).data
    ja, jb = body.forward_kinematics(a, beta).data[:, 1:], body.forward_kinematics(b, beta).data[:, 1:]
    return Reconstruction(
        100.0 * float(np.mean(np.abs(a[:, 0:3] - b[:, 0:3]))),
        100.0 * float(np.mean(np.abs(a[:, 3:9] - b[:, 3:9]))),
        100.0 * float(np.mean(np.abs(a[:, 9:] - b[:, 9:]))),
        1000.0 * float(np.mean(np.linalg.norm(va - vb, axis=-1))),
        1000.0 * float(np.mean(np.linalg.norm(ja - jb, axis=-1))),
    )


def reconstruct(state: TrainState, sample: DatasetSample, geometry) -> MotionSeq:
    """Decode the posterior mean of the ground-truth motion (z = mu)."""
    from .train import make_batch
    model = state.model
    batch = make_batch([sample], [geometry])
    cond = model.cond(batch.tokens, batch.coords, batch.colors, batch.beta, batch.geometry)
    mu, _ = model.encoder(batch.params, batch.mask, cond.z_c)
    pred = model.decoder(mu, cond.z_c).data[0]
    return MotionSeq(pred, sample.motion.valid_mask, sample.motion.action_id)


def condition_metrics(state: TrainState, sample: DatasetSample, geometry) -> tuple[float, float]:
    """(cosine of pooled text vs. the downsampled point nearest the goal center, center MSE)."""
    from .model import stack_geometry
    c = sample.cloud
    cond = state.model.cond(sample.text.tokens[None], c.coords[None], c.colors[None], sample.beta[None],
                            stack_geometry([geometry]))
    pts = cond.point_feats.data[0]
    near = int(np.argmin(np.linalg.norm(cond.point_coords[0] - sample.goal_center, axis=1)))
    text = cond.text_pooled.data[0]
    cos = float(pts[near] @ text / max(np.linalg.norm(pts[near]) * np.linalg.norm(text), 1e-12))
    mse = float(np.mean((cond.center.data[0] - sample.goal_center) ** 2))
    return cos, mse


# ---------------------------------------------------------------- reports

COLUMNS = ("model", "action", "n", "goal_dist_mean", "goal_dist_std", "goal_dist_median", "apd",
           "mpvpe_mm", "mpjpe_mm", "mae_t", "mae_r", "mae_theta", "cond_cos", "center_mse")


@dataclass
class EvalReport:
    name: str
    rows: list[dict]
    seeds: tuple
    config_echo: str = ""
    per_sample: dict = field(default_factory=dict)   # action -> list of goal distances

    def row(self, action: str) -> dict:
        for r in self.rows:
            if r["action"] == action:
                return r
        raise KeyError(action)


def _aggregate(name: str, action: str, rows: list[dict]) -> dict:
    n = sum(r["n"] for r in rows)
    out = {"model": name, "action": action, "n": n}
    for col in COLUMNS[3:]:
        vals = [r[col] for r in rows if r["n"]]
        wts = [r["n"] for r in rows if r["n"]]
        out[col] = float(np.average(vals, weights=wts)) if vals else float("nan")
    return out


def evaluate_model(state: TrainState, name: str, samples: list[DatasetSample], ds: Dataset,
                   seeds=(0,), k: int = 10, k_apd: int = 20, full: bool = True,
                   cache: SceneCache | None = None) -> EvalReport:
    """Per-action rows plus an ``all`` row weighted by sample count."""
    cache = cache or SceneCache(state.config.model)
    per_action: dict[str, list[dict]] = {}
    per_sample: dict[str, list[float]] = {}
    for j, s in enumerate(samples):
        geom = cache.geom(ds.scene(s.scene_index))
        dists = [goal_distance(state, s, geom, k, seed=int(sd) * 100003 + j) for sd in seeds]
        rec = {"goal": float(np.mean(dists))}
        if full:
            rec["apd"] = apd(state, s, geom, k_apd, seed=int(seeds[0]) * 100003 + j + 7)
            r = reconstruction_metrics(s.motion, reconstruct(state, s, geom), s.beta)
            rec.update(mpvpe=r.mpvpe, mpjpe=r.mpjpe, mae_t=r.mae_t, mae_r=r.mae_r, mae_theta=r.mae_theta)
            rec["cos"], rec["mse"] = condition_metrics(state, s, geom)
        per_action.setdefault(s.text.action, []).append(rec)
        per_sample.setdefault(s.text.action, []).append(rec["goal"])
    rows = []
    for action in ACTIONS:
        recs = per_action.get(action, [])
        if not recs:
            continue
        g = np.array([r["goal"] for r in recs])
        row = {"model": name, "action": action, "n": len(recs), "goal_dist_mean": float(g.mean()),
               "goal_dist_std": float(g.std()), "goal_dist_median": float(np.median(g))}
        for col, key in (("apd", "apd"), ("mpvpe_mm", "mpvpe"), ("mpjpe_mm", "mpjpe"), ("mae_t", "mae_t"),
                         ("mae_r", "mae_r"), ("mae_theta", "mae_theta"), ("cond_cos", "cos"), ("center_mse", "mse")):
            row[col] = float(np.mean([r[key] for r in recs])) if full else float("nan")
        rows.append(row)
    overall = _aggregate(name, "all", rows)
    allg = np.concatenate([np.array(v) for v in per_sample.values()]) if per_sample else np.zeros(0)
    if len(allg):
        overall["goal_dist_std"] = float(allg.std())
        overall["goal_dist_median"] = float(np.median(allg))
    rows.append(overall)
    return EvalReport(name, rows, tuple(seeds), state.config.to_text(), per_sample)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.4f}"
    return str(v)


def report_tsv(reports: list[EvalReport]) -> str:
    lines = ["\t".join(COLUMNS)]
    for rep in reports:
        for r in rep.rows:
            lines.append("\t".join(_fmt(r[c]) for c in COLUMNS))
    return "\n".join(lines) + "\n"


def report_text(reports: list[EvalReport], footer: str = REFERENCE_BENCHMARK) -> str:
    table = [list(COLUMNS)] + [[_fmt(r[c]) for c in COLUMNS] for rep in reports for r in rep.rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(COLUMNS))]
    lines = ["  ".join(cell.rjust(w) if i > 1 else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in table]
    seeds = sorted({s for rep in reports for s in rep.seeds})
    lines += ["", f"seeds: {', '.join(map(str, seeds))}"]
    lines += [f"{rep.name}: missing checkpoint" for rep in reports if rep.config_echo == "missing checkpoint"]
    lines.append(footer)
    return "\n".join(lines) + "\n"


def write_reports(reports: list[EvalReport], out, stem: str = "report", footer: str = REFERENCE_BENCHMARK
                  ) -> tuple[Path, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tsv, txt = out / f"{stem}.tsv", out / f"{stem}.txt"
    tsv.write_text(report_tsv(reports))
    txt.write_text(report_text(reports, footer))
    return tsv, txt


def run_benchmark(models: dict[str, TrainState | None], ds: Dataset, seeds=(0,), k: int = 10,
                  full: bool = True, split: str = "test") -> list[EvalReport]:
    """Evaluate named models on a split; a ``None`` entry marks a missing checkpoint and is reported."""
    samples = ds.split_samples(split)
    reports = []
    for name, state in models.items():
        if state is None:
            rows = [{c: (name if c == "model" else "all" if c == "action" else 0 if c == "n" else float("nan"))
                     for c in COLUMNS}]
            reports.append(EvalReport(name, rows, tuple(seeds), "missing checkpoint"))
            continue
        reports.append(evaluate_model(state, name, samples, ds, seeds, k, full=full))
    return reports


# ---------------------------------------------------------------- ablation

def walk_benchmark_config(seed: int = 0) -> RunConfig:
    """The 200-scene walk benchmark at desk budget: frozen encoder after a short pretraining."""
    base = RunConfig()
    return base.with_overrides(
        data={"n_scenes": 200, "actions": "walk", "samples_per_action": 3},
        train={"seed": seed, "pretrain_epochs": 8, "epochs": 12, "lr": 1e-3, "scene_lr": 0.0})


VARIANTS = ("full", "bbox_off", "class_off", "unaligned_text", "closed_vocab")


def variant_config(config: RunConfig, variant: str) -> RunConfig:
    if variant == "full":
        return config
    if variant == "bbox_off":
        return config.with_overrides(**{"lambda": {"bbox": 0.0}})
    if variant == "class_off":
        return config.with_overrides(**{"lambda": {"class": 0.0}})
    if variant == "unaligned_text":
        return config.with_overrides(train={"text_mode": "trainable"})
    if variant == "closed_vocab":
        return config.with_overrides(train={"pretrain_mode": "ce"})
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class AblationResult:
    reports: dict[str, list[EvalReport]]        # variant -> one report per seed
    states: dict[tuple, TrainState] = field(default_factory=dict)

    def medians(self, action: str = "all") -> dict[str, list[float]]:
        """Per variant, the per-seed median goal distance."""
        return {v: [rep.row(action)["goal_dist_median"] for rep in reps] for v, reps in self.reports.items()}

    def summary(self, action: str = "all") -> dict[str, float]:
        return {v: float(np.median(m)) for v, m in self.medians(action).items()}


def run_ablation(config: RunConfig, ds: Dataset, seeds=(0, 1, 2, 3, 4), variants=VARIANTS, k: int = 10,
                 full_metrics: bool = False, keep_states: bool = False, on_result=None,
                 encoders: dict | None = None) -> AblationResult:
    """Train and evaluate each variant once per seed.  Pretrained encoders are shared between
    variants that pretrain identically within a seed; pass ``encoders`` to share them across calls."""
    cache = SceneCache(config.model)
    reports: dict[str, list[EvalReport]] = {v: [] for v in variants}
    states = {}
    test = ds.split_samples("test")
    encoders = {} if encoders is None else encoders
    for seed in seeds:
        pretrained = encoders.setdefault(seed, {})
        for variant in variants:
            cfg = variant_config(config, variant).with_overrides(train={"seed": seed})
            key = cfg.train.pretrain_mode   # pretraining never touches the text table
            state = new_state(cfg, "pretrain")
            if key in pretrained:
                state.model.set_parameters(pretrained[key])
                state.epoch = cfg.train.pretrain_epochs
            else:
                pretrain(state, ds, cache=cache)
                pretrained[key] = {k: v.data for k, v in state.model.parameters().items()
                                   if k.startswith("cond.scene.")}
            start_phase(state, "train")
            train(state, ds, cache=cache)
            rep = evaluate_model(state, variant, test, ds, (seed,), k, full=full_metrics, cache=cache)
            reports[variant].append(rep)
            log.info("ablation seed %d %s: median goal distance %.4f", seed, variant, rep.row("all")["goal_dist_median"])
            if keep_states:
                states[(variant, seed)] = state
            if on_result:
                on_result(variant, seed, rep)
    return AblationResult(reports, states)
