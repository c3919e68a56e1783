"""Adam, the two training phases and checkpoints.

Randomness is derived from ``(seed, epoch, step)`` tuples rather than a
running generator, so a run resumed from an epoch-boundary checkpoint replays
the remaining epochs bit-exactly.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .config import RunConfig, parse_config
from .dataset import Dataset, SceneRecord
from .model import (CVAE, LOSS_TERMS, Batch, ModelConfig, SceneGeometry, build_geometry, combine, loss_distill,
                    loss_terms, reparameterize, stack_geometry)
from .nn import Linear, Module
from .text import BACKGROUND_NAMES, CLASS_NAMES, FrozenTextEncoder, Vocabulary
from .world import DatasetSample, augment

log = logging.getLogger(__name__)

SCENE_PREFIX = "cond.scene."
CKPT_MAGIC = b"SMCKPT"
CKPT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lrs: dict[str, float]                       # per-parameter learning rate
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def param_groups(names, lr: float, scene_lr: float) -> dict[str, float]:
    """Scene-encoder parameters get the fine-tune rate, everything else the base rate."""
    return {n: (scene_lr if n.startswith(SCENE_PREFIX) else lr) for n in names}


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
              ) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update.  Rejects the whole step if any gradient is non-finite."""
    bad = [n for n, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradients for {', '.join(sorted(bad))}; step rejected")
    for n, g in grads.items():
        if g.shape != params[n].shape:
            raise ad.ShapeError(f"gradient for {n} has shape {g.shape}, parameter {params[n].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = dict(params)
    for n in sorted(grads):
        lr = state.lrs.get(n, 0.0)
        if lr == 0.0:
            continue
        g = grads[n]
        m = b1 * state.m.get(n, np.zeros_like(g)) + (1.0 - b1) * g
        v = b2 * state.v.get(n, np.zeros_like(g)) + (1.0 - b2) * g * g
        state.m[n], state.v[n] = m, v
        out[n] = params[n] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------- model construction

def make_text_encoder(config: RunConfig, vocab: Vocabulary | None = None) -> FrozenTextEncoder:
    vocab = vocab or Vocabulary()
    if config.train.text_mode == "trainable":
        # a fresh random table: same shape, but not the space the teacher features live in
        return FrozenTextEncoder(vocab, config.model.feature_dim, seed=config.train.text_seed + 7919, trainable=True)
    return FrozenTextEncoder(vocab, config.model.feature_dim, seed=config.train.text_seed)


class ClassHead(Module):
    """Per-point classifier used only for closed-vocabulary pretraining; discarded afterwards."""

    def __init__(self, rng, dim: int):
        self.lin = Linear(rng, dim, len(CLASS_NAMES) + 1)

    def __call__(self, x):
        return self.lin(x)


@dataclass
class TrainState:
    config: RunConfig
    model: CVAE
    adam: AdamState
    phase: str = "pretrain"
    epoch: int = 0
    log: list[dict] = field(default_factory=list)
    head: ClassHead | None = None

    def trainable(self) -> dict[str, ad.Tensor]:
        params = dict(self.model.parameters())
        if self.head is not None:
            params.update(self.head.parameters("head."))
        return params

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        self.model.set_parameters({k: v for k, v in values.items() if not k.startswith("head.")})
        if self.head is not None:
            self.head.set_parameters({k: v for k, v in values.items() if k.startswith("head.")}, "head.")


def new_state(config: RunConfig, phase: str = "pretrain", vocab: Vocabulary | None = None) -> TrainState:
    text = make_text_encoder(config, vocab)
    model = CVAE(config.model, text, seed=config.train.seed)
    state = TrainState(config, model, AdamState({}), phase)
    start_phase(state, phase)
    return state


def start_phase(state: TrainState, phase: str) -> None:
    """Reset the optimizer for ``phase`` with that phase's parameter groups."""
    cfg = state.config.train
    state.phase, state.epoch = phase, 0
    if phase == "pretrain":
        if cfg.pretrain_mode == "ce" and state.head is None:
            state.head = ClassHead(np.random.default_rng([cfg.seed, 17]), state.config.model.feature_dim)
        names = [n for n in state.trainable() if n.startswith(SCENE_PREFIX) or n.startswith("head.")]
        state.adam = AdamState({n: cfg.pretrain_lr for n in names})
    elif phase == "train":
        state.head = None
        state.adam = AdamState(param_groups(state.model.parameters(), cfg.lr, cfg.scene_lr))
    else:
        raise ValueError(f"unknown phase {phase!r}")


# ---------------------------------------------------------------- geometry / feature caches

class SceneCache:
    """Geometry plans (and frozen scene features) per scene index, computed on demand."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.geometry: dict[int, SceneGeometry] = {}

    def geom(self, scene: SceneRecord) -> SceneGeometry:
        g = self.geometry.get(scene.index)
        if g is None:
            g = self.geometry[scene.index] = build_geometry(scene.cloud.coords, self.config)
        return g


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng([int(p) for p in parts])


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _apply(state: TrainState, grads: ad.Gradients) -> None:
    params = state.trainable()
    names = [n for n in params if n in state.adam.lrs]
    g = {n: grads.get(params[n], np.zeros(params[n].shape)) for n in names}
    new = adam_step(state.adam, {n: params[n].data for n in names}, g)
    state.set_params(new)


def format_log(row: dict) -> str:
    parts = [f"epoch {row['epoch']}", f"phase {row['phase']}", f"total {row['total']:.10g}"]
    parts += [f"{k} {row[k]:.10g}" for k in LOSS_TERMS if k in row]
    return "  ".join(parts)


# ---------------------------------------------------------------- pretraining

def pretrain_scenes(ds: Dataset) -> list[SceneRecord]:
    scenes = [ds.scene(i) for i in ds.scene_ids("train")]
    if not scenes:
        raise ValueError("no training scenes")
    return scenes


def _pretrain_loss(state: TrainState, scenes: list[SceneRecord], cache: SceneCache) -> ad.Tensor:
    coords = np.stack([s.cloud.coords for s in scenes])
    colors = np.stack([s.cloud.colors for s in scenes])
    feats = state.model.scene(coords, colors, stack_geometry([cache.geom(s) for s in scenes]))
    if state.config.train.pretrain_mode == "ce":
        labels = np.stack([s.point_labels() for s in scenes])
        # background (floor, wall) shares one closed-vocabulary label
        labels = np.where(labels >= len(CLASS_NAMES), len(CLASS_NAMES), labels)
        logits = state.head(feats)
        onehot = np.eye(len(CLASS_NAMES) + 1)[labels]
        return ad.scale(ad.sum_(ad.mul(ad.log_softmax(logits, axis=-1), ad.Tensor(onehot))), -1.0 / labels.size)
    if any(s.targets is None for s in scenes):
        raise ValueError("distillation needs scenes with teacher targets")
    targets = np.stack([s.targets.astype(np.float64) for s in scenes])
    covered = np.stack([s.covered for s in scenes])
    return loss_distill(feats, targets, covered)


def pretrain(state: TrainState, ds: Dataset, epochs: int | None = None, cache: SceneCache | None = None,
             on_epoch=None) -> TrainState:
    """Run pretraining epochs ``state.epoch .. epochs-1`` on the training scenes."""
    cfg = state.config.train
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    if state.phase != "pretrain":
        raise ValueError("state is not in the pretraining phase")
    if cfg.pretrain_mode == "none":
        return state
    cache = cache or SceneCache(state.config.model)
    scenes = pretrain_scenes(ds)
    while state.epoch < epochs:
        t0 = time.perf_counter()
        total = 0.0
        for idx in _batches(len(scenes), cfg.pretrain_batch, _rng(cfg.seed, 1, state.epoch)):
            with ad.Tape() as tape:
                loss = _pretrain_loss(state, [scenes[i] for i in idx], cache)
            _apply(state, tape.backward(loss))
            total += float(loss.data) * len(idx)
        row = {"epoch": state.epoch, "phase": "pretrain", "total": total / len(scenes)}
        state.log.append(row)
        state.epoch += 1
        log.info("%s  seconds %.2f", format_log(row), time.perf_counter() - t0)
        if on_epoch:
            on_epoch(state)
    return state


def distill_loss(state: TrainState, scenes: list[SceneRecord], cache: SceneCache | None = None) -> float:
    """Distillation loss of the current encoder on ``scenes`` (no gradient)."""
    cache = cache or SceneCache(state.config.model)
    vals = []
    for s in scenes:
        f = state.model.scene(s.cloud.coords[None], s.cloud.colors[None], stack_geometry([cache.geom(s)]))
        vals.append(float(loss_distill(f, s.targets[None].astype(np.float64), s.covered[None]).data))
    return float(np.mean(vals))


def label_accuracy(state: TrainState, scenes: list[SceneRecord], cache: SceneCache | None = None) -> float:
    """Nearest-class-embedding labeling accuracy of per-point features over all points."""
    cache = cache or SceneCache(state.config.model)
    names = CLASS_NAMES + BACKGROUND_NAMES
    emb = state.model.cond.text.class_matrix(names) if not state.model.cond.text.trainable else \
        FrozenTextEncoder(state.model.cond.text.vocab, state.config.model.feature_dim,
                          seed=state.config.train.text_seed).class_matrix(names)
    hits = total = 0
    for s in scenes:
        f = state.model.scene(s.cloud.coords[None], s.cloud.colors[None], stack_geometry([cache.geom(s)])).data[0]
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
        pred = np.argmax(f @ emb.T, axis=1)
        hits += int((pred == s.point_labels()).sum())
        total += len(pred)
    return hits / total


# ---------------------------------------------------------------- cVAE training

def make_batch(samples: list[DatasetSample], geoms: list[SceneGeometry]) -> Batch:
    return Batch(
        coords=np.stack([s.cloud.coords for s in samples]),
        colors=np.stack([s.cloud.colors for s in samples]),
        geometry=stack_geometry(geoms),
        tokens=np.stack([s.text.tokens for s in samples]),
        beta=np.stack([s.beta for s in samples]),
        params=np.stack([s.motion.params for s in samples]),
        mask=np.stack([s.motion.valid_mask for s in samples]),
        action=np.array([s.motion.action_id for s in samples]),
        goal_class=np.array([s.goal_class for s in samples]),
        center=np.stack([s.goal_center for s in samples]),
        bbox=np.stack([s.goal_aabb.as_vector() for s in samples]),
    )


class FeatureCache:
    """Scene-encoder outputs for a frozen encoder, keyed by scene index (untransformed clouds)."""

    def __init__(self):
        self.feats: dict[int, np.ndarray] = {}

    def get(self, model: CVAE, scene: SceneRecord, geom: SceneGeometry) -> np.ndarray:
        f = self.feats.get(scene.index)
        if f is None:
            f = self.feats[scene.index] = model.scene(scene.cloud.coords[None], scene.cloud.colors[None],
                                                      stack_geometry([geom])).data[0]
        return f


def batch_loss(state: TrainState, batch: Batch, eps: np.ndarray, scene_feats: np.ndarray | None = None):
    model = state.model
    sf = None if scene_feats is None else ad.Tensor(scene_feats)
    cond = model.cond(batch.tokens, batch.coords, batch.colors, batch.beta, batch.geometry, scene_feats=sf)
    mu, logvar = model.encoder(batch.params, batch.mask, cond.z_c)
    z = reparameterize(mu, logvar, eps=eps)
    pred = model.decoder(z, cond.z_c)
    terms = loss_terms(pred, mu, logvar, cond, batch)
    return combine(terms, state.config.lambdas), terms


def train(state: TrainState, ds: Dataset, epochs: int | None = None, cache: SceneCache | None = None,
          on_epoch=None) -> TrainState:
    """cVAE training epochs ``state.epoch .. epochs-1`` on the training samples."""
    cfg = state.config.train
    epochs = cfg.epochs if epochs is None else epochs
    if state.phase != "train":
        raise ValueError("state is not in the training phase; call start_phase(state, 'train')")
    cache = cache or SceneCache(state.config.model)
    frozen = cfg.scene_lr == 0.0
    feats = FeatureCache()
    samples = ds.split_samples("train")
    if not samples:
        raise ValueError("no training samples")
    zdim = state.config.model.latent_dim
    while state.epoch < epochs:
        t0 = time.perf_counter()
        sums = dict.fromkeys(("total",) + LOSS_TERMS, 0.0)
        for step, idx in enumerate(_batches(len(samples), cfg.batch_size, _rng(cfg.seed, 2, state.epoch))):
            chosen = [samples[i] for i in idx]
            scenes = [ds.scene(s.scene_index) for s in chosen]
            geoms = [cache.geom(sc) for sc in scenes]
            if cfg.augment:
                chosen = [augment(s, int(_rng(cfg.seed, 3, state.epoch, i).integers(2**31)))
                          for s, i in zip(chosen, idx)]
            batch = make_batch(chosen, geoms)
            sf = np.stack([feats.get(state.model, sc, g) for sc, g in zip(scenes, geoms)]) if frozen else None
            eps = _rng(cfg.seed, 4, state.epoch, step).standard_normal((len(idx), zdim))
            with ad.Tape() as tape:
                total, terms = batch_loss(state, batch, eps, sf)
            _apply(state, tape.backward(total))
            sums["total"] += float(total.data) * len(idx)
            for k, v in terms.items():
                sums[k] += float(v.data) * len(idx)
        row = {"epoch": state.epoch, "phase": "train"} | {k: v / len(samples) for k, v in sums.items()}
        state.log.append(row)
        state.epoch += 1
        log.info("%s  seconds %.2f", format_log(row), time.perf_counter() - t0)
        if on_epoch:
            on_epoch(state)
    return state


def run_pipeline(config: RunConfig, ds: Dataset, cache: SceneCache | None = None,
                 pretrained: TrainState | None = None) -> TrainState:
    """Pretraining (unless disabled or supplied) followed by cVAE training."""
    cache = cache or SceneCache(config.model)
    if pretrained is None:
        state = new_state(config, "pretrain")
        pretrain(state, ds, cache=cache)
    else:
        state = TrainState(config, pretrained.model, pretrained.adam, "pretrain", pretrained.epoch,
                           list(pretrained.log))
    start_phase(state, "train")
    return train(state, ds, cache=cache)


# ---------------------------------------------------------------- checkpoints

def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": v.data for k, v in state.trainable().items()}
    arrays["text/table"] = state.model.cond.text.table.data
    for n in sorted(state.adam.m):
        arrays[f"adam_m/{n}"] = state.adam.m[n]
        arrays[f"adam_v/{n}"] = state.adam.v[n]
    return arrays


def checkpoint_bytes(state: TrainState) -> bytes:
    text = state.model.cond.text
    meta = {
        "phase": state.phase, "epoch": state.epoch, "config": state.config.to_text(),
        "vocab": text.vocab.tokens, "text_trainable": text.trainable, "text_seed": text.seed,
        "adam": {"step": state.adam.step, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps, "lrs": state.adam.lrs},
        "rng": {"seed": state.config.train.seed, "rule": "default_rng([seed, stream, epoch, step])"},
        "log": state.log, "has_head": state.head is not None,
    }
    return container.encode(CKPT_MAGIC, CKPT_VERSION, "checkpoint", meta, _state_arrays(state))


def save_checkpoint(state: TrainState, path) -> bytes:
    data = checkpoint_bytes(state)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise container.ContainerError(path, f"cannot write checkpoint ({exc.strerror})") from None
    return data


def state_from_bytes(data: bytes, path="<memory>") -> TrainState:
    kind, meta, arrays = container.decode(data, CKPT_MAGIC, CKPT_VERSION, path)
    if kind != "checkpoint":
        raise container.CorruptHeaderError(path, f"record kind {kind!r} is not a checkpoint")
    config = parse_config(meta["config"])
    vocab = Vocabulary(meta["vocab"][4:])
    text = FrozenTextEncoder(vocab, config.model.feature_dim, seed=meta["text_seed"],
                             trainable=meta["text_trainable"], table=arrays["text/table"])
    model = CVAE(config.model, text, seed=config.train.seed)
    a = meta["adam"]
    adam = AdamState(dict(a["lrs"]), step=a["step"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    adam.m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    adam.v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    state = TrainState(config, model, adam, meta["phase"], meta["epoch"], list(meta["log"]))
    if meta["has_head"]:
        state.head = ClassHead(np.random.default_rng(0), config.model.feature_dim)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    expected = set(state.trainable())
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        raise container.CorruptHeaderError(path, f"parameter set mismatch (missing e.g. {missing})")
    state.set_params(params)
    return state


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise container.ContainerError(path, f"cannot read checkpoint ({exc.strerror})") from None
    return state_from_bytes(data, path)


def log_text(state: TrainState) -> str:
    return "".join(format_log(r) + "\n" for r in state.log)


def loss_is_finite(row: dict) -> bool:
    return all(math.isfinite(v) for k, v in row.items() if isinstance(v, float))
