"""On-disk dataset: self-describing binary records plus a plain-text split manifest.

Records use the :mod:`scenemotion.container` layout with magic ``SMREC``.
Scene records hold the cloud and the fused teacher targets; sample records hold
text, motion, shape and goal annotations and point at their scene by index.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import body, container
from .container import ContainerError
from .geometry import AABB, SceneCloud, fuse_multiview
from .text import ACTIONS, CLASS_NAMES, FrozenTextEncoder, Vocabulary
from .world import (ACTION_CLASSES, DatasetSample, MotionSeq, MotionSynthesisError, SceneGenerationError,
                    TextAnnotation, WorldConfig, generate_scene, instance_names, make_sample, render_views)

MAGIC = b"SMREC\0"
FORMAT_VERSION = 1


class ManifestError(ContainerError):
    pass


def encode_record(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    return container.encode(MAGIC, FORMAT_VERSION, kind, meta, arrays)


def decode_record(data: bytes, path="<memory>") -> tuple[str, dict, dict[str, np.ndarray]]:
    return container.decode(data, MAGIC, FORMAT_VERSION, path)


def write_record(path, kind: str, meta: dict, arrays: dict) -> None:
    container.write(path, MAGIC, FORMAT_VERSION, kind, meta, arrays)


def read_record(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    return container.read(path, MAGIC, FORMAT_VERSION)


# ---------------------------------------------------------------- records

@dataclass
class SceneRecord:
    index: int
    seed: int
    cloud: SceneCloud
    targets: np.ndarray | None = None   # (N, F) float32 fused teacher features
    covered: np.ndarray | None = None   # (N,) bool
    names: dict = field(default_factory=dict)  # instance id -> class name

    def point_labels(self) -> np.ndarray:
        """Per-point class name index into CLASS_NAMES + ("floor", "wall")."""
        lookup = {n: i for i, n in enumerate(CLASS_NAMES + ("floor", "wall"))}
        return np.array([lookup[self.names[int(i)]] for i in self.cloud.instance_id])


def scene_to_record(rec: SceneRecord, config: WorldConfig) -> tuple[dict, dict]:
    meta = {"index": rec.index, "seed": rec.seed, "N": len(rec.cloud), "F": config.feature_dim,
            "palette": list(CLASS_NAMES), "names": {str(k): v for k, v in sorted(rec.names.items())}}
    arrays = {"coords": rec.cloud.coords, "colors": rec.cloud.colors,
              "instance_id": rec.cloud.instance_id, "class_id": rec.cloud.class_id}
    if rec.targets is not None:
        arrays["targets"] = rec.targets.astype(np.float32)
        arrays["covered"] = rec.covered.astype(np.uint8)
    return meta, arrays


def scene_from_record(meta: dict, arrays: dict) -> SceneRecord:
    cloud = SceneCloud(arrays["coords"], arrays["colors"], arrays["instance_id"], arrays["class_id"])
    covered = arrays["covered"].astype(bool) if "covered" in arrays else None
    return SceneRecord(meta["index"], meta["seed"], cloud, arrays.get("targets"), covered,
                       {int(k): v for k, v in meta["names"].items()})


def sample_to_record(s: DatasetSample) -> tuple[dict, dict]:
    t = s.text
    meta = {"scene": s.scene_index, "T": len(s.motion.params), "action": t.action, "text": t.text,
            "goal_class_name": t.goal_class, "goal_instance": t.goal_instance, "relation": t.relation,
            "anchors": list(t.anchors), "length": t.length, "ambiguous": t.ambiguous,
            "goal_class": s.goal_class, "palette": list(CLASS_NAMES)}
    arrays = {"tokens": t.tokens, "params": s.motion.params, "valid_mask": s.motion.valid_mask.astype(np.uint8),
              "beta": s.beta, "goal_min": s.goal_aabb.min_corner, "goal_max": s.goal_aabb.max_corner,
              "goal_center": s.goal_center}
    return meta, arrays


def sample_from_record(meta: dict, arrays: dict, scene: SceneRecord) -> DatasetSample:
    text = TextAnnotation(meta["action"], meta["goal_class_name"], meta["goal_instance"], meta["relation"],
                          tuple(meta["anchors"]), meta["text"], arrays["tokens"], meta["length"], meta["ambiguous"])
    motion = MotionSeq(arrays["params"], arrays["valid_mask"].astype(bool), ACTIONS.index(meta["action"]))
    cloud = scene.cloud.with_goal(meta["goal_instance"])
    return DatasetSample(cloud, text, motion, arrays["beta"], AABB(arrays["goal_min"], arrays["goal_max"]),
                         arrays["goal_center"], meta["goal_class"], meta["scene"])


# ---------------------------------------------------------------- building

@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 100
    actions: tuple = ACTIONS
    samples_per_action: int = 1
    test_fraction: float = 0.2
    teacher: bool = True
    world: WorldConfig = WorldConfig()

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        for a in self.actions:
            if a not in ACTIONS:
                raise ValueError(f"unknown action {a!r}")


@dataclass
class Dataset:
    config: DataConfig
    scenes: list[SceneRecord]
    samples: list[DatasetSample]
    split: dict[int, str]          # scene index -> "train" | "test"

    def scene_ids(self, split: str) -> list[int]:
        return [s.index for s in self.scenes if self.split[s.index] == split]

    def split_samples(self, split: str) -> list[DatasetSample]:
        return [s for s in self.samples if self.split[s.scene_index] == split]

    def scene(self, index: int) -> SceneRecord:
        return self.scenes[index]


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def make_scene(index: int, seed: int, config: DataConfig, encoder: FrozenTextEncoder):
    """Scene ``index`` of a dataset; layouts that cannot be placed are re-drawn deterministically."""
    for attempt in range(100):
        scene_seed = _derived_seed(seed, index, attempt)
        try:
            spec, cloud = generate_scene(scene_seed, config.world)
            break
        except SceneGenerationError:
            continue
    else:
        raise SceneGenerationError(f"scene {index}: no feasible layout in 100 draws (dataset seed {seed})")
    rec = SceneRecord(index, scene_seed, cloud, names=instance_names(spec))
    if config.teacher:
        views = render_views(spec, config.world.n_views, _derived_seed(scene_seed, 1),
                             config.world.teacher_noise, encoder, config.world.image_size)
        targets, covered = fuse_multiview(cloud, views)
        rec.targets, rec.covered = targets.astype(np.float32), covered
    return spec, rec


def scene_samples(spec, rec: SceneRecord, seed: int, config: DataConfig, vocab: Vocabulary) -> list[DatasetSample]:
    rng = np.random.default_rng(_derived_seed(seed, rec.index, 7))
    out = []
    for a_i, action in enumerate(config.actions):
        goals = [o for o in spec.objects if o.class_name in ACTION_CLASSES[action]]
        picked = 0
        for gi in rng.permutation(len(goals)):
            if picked == config.samples_per_action:
                break
            goal = goals[gi]
            try:
                s = make_sample(spec, rec.cloud, goal.instance_id, action,
                                _derived_seed(seed, rec.index, a_i, goal.instance_id), vocab, config.world, rec.index)
            except MotionSynthesisError:
                continue
            if s.text.ambiguous:
                continue
            out.append(s)
            picked += 1
    return out


def split_scenes(n: int, test_fraction: float, seed: int) -> dict[int, str]:
    perm = np.random.default_rng(_derived_seed(seed, 99)).permutation(n)
    n_test = int(round(n * test_fraction))
    test = set(perm[:n_test].tolist())
    return {i: ("test" if i in test else "train") for i in range(n)}


def generate_dataset(config: DataConfig, seed: int, vocab: Vocabulary | None = None,
                     encoder: FrozenTextEncoder | None = None) -> Dataset:
    vocab = vocab or Vocabulary()
    encoder = encoder or FrozenTextEncoder(vocab, config.world.feature_dim)
    scenes, samples = [], []
    for i in range(config.n_scenes):
        spec, rec = make_scene(i, seed, config, encoder)
        scenes.append(rec)
        samples += scene_samples(spec, rec, seed, config, vocab)
    return Dataset(config, scenes, samples, split_scenes(config.n_scenes, config.test_fraction, seed))


def save_dataset(ds: Dataset, out) -> Path:
    """Write scene and sample records plus ``manifest.txt``; returns the manifest path."""
    out = Path(out)
    lines = ["# kind\tsplit\tscene\tpath"]
    for rec in ds.scenes:
        rel = f"scenes/scene_{rec.index:05d}.rec"
        meta, arrays = scene_to_record(rec, ds.config.world)
        write_record(out / rel, "scene", meta, arrays)
        lines.append(f"scene\t{ds.split[rec.index]}\t{rec.index}\t{rel}")
    for j, s in enumerate(ds.samples):
        rel = f"samples/sample_{j:06d}.rec"
        meta, arrays = sample_to_record(s)
        write_record(out / rel, "sample", meta, arrays)
        lines.append(f"sample\t{ds.split[s.scene_index]}\t{s.scene_index}\t{rel}")
    write_record(out / "config.rec", "config", {"data": _config_json(ds.config)}, {})
    manifest = out / "manifest.txt"
    try:
        manifest.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise ContainerError(manifest, f"cannot write manifest ({exc.strerror})") from None
    return manifest


def build_dataset(config: DataConfig, seed: int, out) -> Dataset:
    ds = generate_dataset(config, seed)
    save_dataset(ds, out)
    return ds


def _config_json(config: DataConfig) -> dict:
    d = asdict(config)
    d["actions"] = list(config.actions)
    return d


def _config_from_json(d: dict) -> DataConfig:
    d = dict(d)
    d["actions"] = tuple(d["actions"])
    d["world"] = WorldConfig(**d["world"])
    return DataConfig(**d)


def read_manifest(path) -> list[tuple[str, str, int, str]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(path, f"cannot read manifest ({exc.strerror})") from None
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[0] not in ("scene", "sample") or parts[1] not in ("train", "test"):
            raise ManifestError(path, f"line {n} is malformed")
        rows.append((parts[0], parts[1], int(parts[2]), parts[3]))
    return rows


def load_dataset(root) -> Dataset:
    root = Path(root)
    if root.is_file():
        root = root.parent
    rows = read_manifest(root / "manifest.txt")
    _, meta, _ = read_record(root / "config.rec")
    config = _config_from_json(meta["data"])
    scenes: dict[int, SceneRecord] = {}
    split = {}
    for kind, sp, idx, rel in rows:
        if kind == "scene":
            k, m, a = read_record(root / rel)
            scenes[idx] = scene_from_record(m, a)
            split[idx] = sp
    samples = []
    for kind, sp, idx, rel in rows:
        if kind == "sample":
            if idx not in scenes:
                raise ManifestError(root / "manifest.txt", f"sample {rel} refers to missing scene {idx}")
            _, m, a = read_record(root / rel)
            samples.append(sample_from_record(m, a, scenes[idx]))
    ordered = [scenes[i] for i in sorted(scenes)]
    return Dataset(config, ordered, samples, split)


def target_vertices(sample: DatasetSample) -> np.ndarray:
    """Canonical mesh of the ground-truth motion, (T, V, 3)."""
    return body.canonical_mesh(sample.motion.params, sample.beta).data
