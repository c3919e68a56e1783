"""``scenemotion`` command line: gen-data, pretrain, train, sample, eval, ablate.

Every command writes its outputs plus one ``run_manifest.json`` under ``--out``.
The default output root is ``$SCENEMOTION_OUT`` (else ``./runs``), one
subdirectory per command.  Failures print a single ``error[category]: ...``
line and exit with the category's code.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .container import ContainerError, CorruptHeaderError, TruncatedError, VersionMismatchError
from .dataset import build_dataset, load_dataset, write_record
from .evaluate import REFERENCE_ABLATION, VARIANTS, run_ablation, run_benchmark, write_reports
from .model import sample_motion
from .train import SceneCache, load_checkpoint, log_text, new_state, pretrain, run_pipeline, save_checkpoint

ENV_OUT = "SCENEMOTION_OUT"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_VERSION = 5
EXIT_CORRUPT = 6


class CliError(Exception):
    def __init__(self, code: int, category: str, message: str):
        super().__init__(message)
        self.code, self.category = code, category


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_echo: str
    seeds: list
    out: str
    artifacts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(man: RunManifest, out: Path, skip=("run_manifest.json",)) -> Path:
    """Hash every file under ``out`` and write the manifest last."""
    man.artifacts = {str(p.relative_to(out)): sha256_file(p)
                     for p in sorted(out.rglob("*")) if p.is_file() and p.name not in skip}
    path = out / "run_manifest.json"
    path.write_text(man.to_json())
    return path


def _config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    return load_config(args.config)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such file or directory")
    return p


def _out(args, command: str) -> Path:
    root = Path(args.out) if args.out else Path(os.environ.get(ENV_OUT, "runs")) / command
    root.mkdir(parents=True, exist_ok=True)
    return root


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> RunManifest:
    cfg = _config(args)
    out = _out(args, "gen-data")
    build_dataset(cfg.data, args.seed, out)
    return RunManifest("gen-data", args.config, cfg.to_text(), [args.seed], str(out))


def cmd_pretrain(args) -> RunManifest:
    cfg = _config(args)
    ds = load_dataset(_require(args.data))
    out = _out(args, "pretrain")
    state = new_state(cfg, "pretrain")
    pretrain(state, ds)
    save_checkpoint(state, out / "pretrain.ckpt")
    (out / "pretrain.log").write_text(log_text(state))
    return RunManifest("pretrain", args.config, cfg.to_text(), [cfg.train.seed], str(out))


def cmd_train(args) -> RunManifest:
    cfg = _config(args)
    ds = load_dataset(_require(args.data))
    out = _out(args, "train")
    pre = None
    if args.pretrained:
        pre = load_checkpoint(_require(args.pretrained))
        if pre.config.model != cfg.model:
            raise ConfigError("model section differs from the pretrained checkpoint's")
    state = run_pipeline(cfg, ds, pretrained=pre)
    save_checkpoint(state, out / "model.ckpt")
    (out / "train.log").write_text(log_text(state))
    return RunManifest("train", args.config, cfg.to_text(), [cfg.train.seed], str(out))


def cmd_sample(args) -> RunManifest:
    state = load_checkpoint(_require(args.checkpoint))
    ds = load_dataset(_require(args.data))
    if not 0 <= args.scene < len(ds.scenes):
        raise ConfigError(f"--scene {args.scene} out of range (dataset has {len(ds.scenes)} scenes)")
    out = _out(args, "sample")
    scene = ds.scene(args.scene)
    vocab = state.model.cond.text.vocab
    tokens, _ = vocab.tokenize(args.text, state.config.world.token_width)
    beta = np.zeros(10)
    geom = SceneCache(state.config.model).geom(scene)
    motions = sample_motion(state.model, tokens, scene.cloud.coords, scene.cloud.colors, beta, geom, args.k, args.seed)
    for i, m in enumerate(motions):
        write_record(out / f"motion_{i:02d}.rec", "motion",
                     {"text": args.text, "scene": args.scene, "seed": args.seed, "index": i}, {"params": m})
    if args.plot:
        plot_trajectories(scene, motions, out / "trajectories.png", args.text)
    return RunManifest("sample", None, state.config.to_text(), [args.seed], str(out))


def plot_trajectories(scene, motions: np.ndarray, path: Path, title: str = "") -> None:
    """Top-down scene footprint with the pelvis path of every sample."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    c = scene.cloud
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    ax.scatter(c.coords[:, 0], c.coords[:, 1], s=1, c=c.colors)
    for m in motions:
        ax.plot(m[:, 0], m[:, 1], lw=1)
        ax.plot(m[-1, 0], m[-1, 1], "k.", ms=4)
    ax.set_aspect("equal")
    ax.set_title(title, fontsize=8)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(args) -> RunManifest:
    ds = load_dataset(_require(args.data))
    out = _out(args, "eval")
    seeds = _seeds(args.seeds)
    models = {}
    for ck in args.checkpoints:
        name = Path(ck).stem
        models[name if name not in models else ck] = load_checkpoint(ck) if Path(ck).exists() else None
    reports = run_benchmark(models, ds, seeds, args.k, full=not args.quick)
    write_reports(reports, out, "benchmark")
    echo = "".join(f"# {name}\n{r.config_echo}" for name, r in zip(models, reports))
    return RunManifest("eval", None, echo, seeds, str(out))


def cmd_ablate(args) -> RunManifest:
    cfg = _config(args)
    seeds = _seeds(args.seeds)
    out = _out(args, "ablate")
    ds = load_dataset(_require(args.data)) if args.data else build_dataset(cfg.data, args.data_seed, out / "data")
    res = run_ablation(cfg, ds, seeds, full_metrics=not args.quick)
    for variant, reps in res.reports.items():
        write_reports(reps, out, f"ablation_{variant}", REFERENCE_ABLATION)
    lines = ["variant\tper_seed_median_goal_distance\tmedian_over_seeds"]
    for variant, vals in res.medians().items():
        lines.append(f"{variant}\t{','.join(f'{v:.4f}' for v in vals)}\t{np.median(vals):.4f}")
    (out / "ablation_summary.tsv").write_text("\n".join(lines) + "\n")
    return RunManifest("ablate", args.config, cfg.to_text(), seeds, str(out))


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenemotion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, data=False):
        if config:
            sp.add_argument("--config", help="key = value config file (defaults if omitted)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory (with manifest.txt)")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command> or runs/<command>)")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="distill (or closed-vocabulary pretrain) the scene encoder")
    common(sp, data=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="train the cVAE (pretraining first unless --pretrained)")
    common(sp, data=True)
    sp.add_argument("--pretrained", help="checkpoint from the pretrain command")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate K motions for a text in a dataset scene")
    common(sp, config=False, data=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", type=int, required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--plot", action="store_true", help="also write trajectories.png (needs matplotlib)")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="benchmark checkpoints on the test split")
    common(sp, config=False, data=True)
    sp.add_argument("--checkpoints", nargs="+", required=True)
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--quick", action="store_true", help="goal distance only")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help=f"train and evaluate the variants {', '.join(VARIANTS)}")
    common(sp)
    sp.add_argument("--data", help="existing dataset (generated from the config if omitted)")
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--quick", action="store_true", help="goal distance only")
    sp.set_defaults(func=cmd_ablate)
    return p


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, CliError):
        return exc.code, exc.category
    if isinstance(exc, VersionMismatchError):
        return EXIT_VERSION, "version"
    if isinstance(exc, (CorruptHeaderError, TruncatedError)):
        return EXIT_CORRUPT, "corrupt"
    if isinstance(exc, FileNotFoundError) or (isinstance(exc, ContainerError) and not exc.path.exists()):
        return EXIT_MISSING, "missing-file"
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    return EXIT_RUNTIME, "runtime"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        man = args.func(args)
        path = write_manifest(man, Path(man.out))
        print(path)
        return EXIT_OK
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    except Exception as exc:
        code, category = _classify(exc)
        msg = " ".join(str(exc).split())
        print(f"error[{category}]: {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
