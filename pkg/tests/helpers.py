"""Shared builders for the test suite."""
from pathlib import Path

import numpy as np

from scenemotion import autodiff as ad
from scenemotion.config import RunConfig, load_config, parse_config
from scenemotion.model import loss_total

FIXTURES = Path(__file__).parent / "fixtures"


def toy_config(**sections) -> RunConfig:
    cfg = load_config(FIXTURES / "toy.cfg")
    return cfg.with_overrides(**sections) if sections else cfg


def micro_config(**sections) -> RunConfig:
    """Smallest model that still exercises every component (32-point clouds)."""
    text = """
    data.n_scenes = 3
    world.n_points = 256
    model.stage_dims = 4, 6
    model.stage_blocks = 1, 1
    model.k = 4
    model.cond_points = 16
    model.cond_k = 4
    model.fuse_hidden = 8
    model.cond_dim = 8
    model.latent_dim = 4
    model.gru_hidden = 6
    model.dec_dim = 8
    model.dec_heads = 2
    model.dec_layers = 1
    model.dec_ffn = 8
    model.frames = 6
    world.frames = 6
    world.min_frames = 4
    """
    cfg = parse_config(text)
    return cfg.with_overrides(**sections) if sections else cfg


def flat_loss(model, batch, lambdas, eps):
    """(f, x0): f maps one flat parameter vector to loss_total, x0 is the current vector."""
    params = model.parameters()
    names = sorted(params)
    shapes = [params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    x0 = np.concatenate([params[n].data.reshape(-1) for n in names])

    def f(vec):
        tensors, at = {}, 0
        for n, shp, sz in zip(names, shapes, sizes):
            tensors[n] = ad.reshape(ad.slice_(vec, slice(at, at + sz)), shp)
            at += sz
        model.bind_parameters(tensors)
        total, _ = loss_total(model, batch, lambdas, eps)
        return total

    return f, x0


def random_motion_batch(rng, b, t, z, c):
    return rng.normal(size=(b, t, 72)), rng.normal(size=(b, z)), rng.normal(size=(b, c))
