"""Scene U-Net, condition fusion, motion cVAE and the training objectives.

All forward passes are batch-first.  Scene inputs are batched point clouds of
equal size; the neighbourhood structure of each cloud (sampling, k-NN,
interpolation) is precomputed once in a :class:`SceneGeometry` plan, which stays
valid under rigid transforms of the cloud.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import body
from .autodiff import Tensor
from .geometry import farthest_point_sample, knn_indices
from .nn import GRU, LayerNorm, Linear, Module, MultiHeadAttention, sinusoidal_embedding
from .text import PAD, FrozenTextEncoder

N_ACTIONS = 4
N_CLASSES = 9


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64                  # F, shared with the text space
    stage_dims: tuple = (16, 32, 64, 96)   # stage 0 is full resolution
    stage_blocks: tuple = (0, 1, 1, 1)
    ratio: int = 4
    k: int = 8
    cond_points: int = 256
    cond_k: int = 8
    fuse_hidden: int = 128
    cond_dim: int = 64                     # C
    latent_dim: int = 32                   # Z
    gru_hidden: int = 64
    dec_dim: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    dec_ffn: int = 128
    frames: int = 30
    logit_scale: float = 1.0 / 0.07

    def __post_init__(self):
        if len(self.stage_dims) != len(self.stage_blocks):
            raise ValueError("stage_dims and stage_blocks need the same length")
        if self.dec_dim % self.dec_heads:
            raise ValueError("dec_dim must be divisible by dec_heads")

    def min_points(self) -> int:
        return max(self.ratio ** (len(self.stage_dims) - 1) * self.k, self.cond_points)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- geometry plan

@dataclass(frozen=True)
class SceneGeometry:
    """Index structure for one cloud; every index refers to original point order."""
    stage_points: tuple      # per stage (n_s,) indices into the full cloud
    pool_idx: tuple          # per stage s>=1: (n_s, k) indices into stage s-1 rows
    attn_idx: tuple          # per stage: (n_s, k) indices into stage s rows
    up_idx: tuple            # per stage s>=1: (n_{s-1}, 3) indices into stage s rows
    up_w: tuple              # per stage s>=1: (n_{s-1}, 3) inverse-distance weights
    cond_points: np.ndarray  # (m,) indices into the full cloud
    cond_idx: np.ndarray     # (m, k) indices into the full cloud


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting points by (x, y, z); makes downstream tie rules order-free."""
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def build_geometry(coords: np.ndarray, config: ModelConfig) -> SceneGeometry:
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n < config.min_points():
        raise ad.ShapeError(f"cloud has {n} points, the encoder needs at least {config.min_points()}")
    order = canonical_order(coords)
    canon = coords[order]
    # everything below runs in canonical order, then maps back
    rows = [np.arange(n)]
    pool, attn, up_i, up_w = [], [], [], []
    for s in range(len(config.stage_dims)):
        if s > 0:
            prev = canon[rows[-1]]
            pick = farthest_point_sample(prev, max(config.k, len(prev) // config.ratio))
            rows.append(rows[-1][pick])
            cur = canon[rows[-1]]
            pool.append(knn_indices(prev, cur, config.k))
            nn3 = knn_indices(cur, prev, 3)
            d = np.sqrt(np.sum((prev[:, None, :] - cur[nn3]) ** 2, axis=-1))
            w = 1.0 / (d + 1e-8)
            up_i.append(nn3)
            up_w.append(w / w.sum(axis=1, keepdims=True))
        cur = canon[rows[-1]]
        attn.append(knn_indices(cur, cur, min(config.k, len(cur))))
    cpick = farthest_point_sample(canon, config.cond_points)
    cidx = knn_indices(canon, canon[cpick], config.cond_k)
    # stage-0 features stay in the caller's point order, so re-key stage-0 rows and indices
    inv = np.argsort(order)
    attn[0] = order[attn[0][inv]]
    if pool:
        pool[0] = order[pool[0]]
        up_i[0] = up_i[0][inv]
        up_w[0] = up_w[0][inv]
    rows[0] = inv
    return SceneGeometry(tuple(order[r] for r in rows), tuple(pool), tuple(attn), tuple(up_i), tuple(up_w),
                         order[cpick], order[cidx])


def stack_geometry(geoms: list[SceneGeometry]) -> SceneGeometry:
    def st(items):
        return np.stack(items)
    return SceneGeometry(
        tuple(st([g.stage_points[s] for g in geoms]) for s in range(len(geoms[0].stage_points))),
        tuple(st([g.pool_idx[s] for g in geoms]) for s in range(len(geoms[0].pool_idx))),
        tuple(st([g.attn_idx[s] for g in geoms]) for s in range(len(geoms[0].attn_idx))),
        tuple(st([g.up_idx[s] for g in geoms]) for s in range(len(geoms[0].up_idx))),
        tuple(st([g.up_w[s] for g in geoms]) for s in range(len(geoms[0].up_w))),
        st([g.cond_points for g in geoms]), st([g.cond_idx for g in geoms]))


def _take(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Batched numpy row lookup: arr (B, N, D), idx (B, ...)."""
    b = np.arange(len(arr)).reshape((-1,) + (1,) * (idx.ndim - 1))
    return arr[b, idx]


# ---------------------------------------------------------------- scene encoder

class PointAttention(Module):
    """Scalar self-attention over k-NN neighbourhoods with a relative-position MLP, residual."""

    def __init__(self, rng, dim: int):
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.pos1 = Linear(rng, 3, dim)
        self.pos2 = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def __call__(self, h: Tensor, coords: np.ndarray, idx: np.ndarray) -> Tensor:
        d = h.shape[-1]
        rel = coords[:, :, None, :] - _take(coords, idx)             # (B, n, k, 3)
        pos = self.pos2(ad.relu(self.pos1(Tensor(rel))))
        kj = ad.add(ad.gather(self.k(h), idx), pos)
        vj = ad.add(ad.gather(self.v(h), idx), pos)
        q = ad.reshape(self.q(h), h.shape[:2] + (1, d))
        w = ad.softmax(ad.scale(ad.sum_(ad.mul(q, kj), axis=-1), 1.0 / math.sqrt(d)), axis=-1)
        agg = ad.sum_(ad.mul(ad.reshape(w, w.shape + (1,)), vj), axis=-2)
        return ad.add(h, self.out(agg))


class SceneEncoderUNet(Module):
    """Per-point features from (rgb, height) inputs; output rows follow input order."""

    in_dim = 4

    def __init__(self, rng, config: ModelConfig):
        self.config = config
        dims = config.stage_dims
        self.stem = Linear(rng, self.in_dim, dims[0])
        self.down = [Linear(rng, dims[s - 1], dims[s]) for s in range(1, len(dims))]
        self.blocks = [[PointAttention(rng, dims[s]) for _ in range(config.stage_blocks[s])]
                       for s in range(len(dims))]
        self.up = [Linear(rng, dims[s], dims[s - 1]) for s in range(1, len(dims))]
        self.skip = [Linear(rng, dims[s - 1], dims[s - 1]) for s in range(1, len(dims))]
        self.head = Linear(rng, dims[0], config.feature_dim)

    def named_children(self):
        yield from super().named_children()
        for s, stage in enumerate(self.blocks):
            for i, blk in enumerate(stage):
                yield f"blocks.{s}.{i}", blk

    @staticmethod
    def inputs(coords: np.ndarray, colors: np.ndarray) -> np.ndarray:
        return np.concatenate([colors, coords[..., 2:3]], axis=-1)

    def __call__(self, coords: np.ndarray, colors: np.ndarray, geom: SceneGeometry) -> Tensor:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim == 2:
            raise ad.ShapeError("scene encoder expects a batch (B, N, 3); add a leading axis")
        x = Tensor(self.inputs(coords, colors))
        h = ad.relu(self.stem(x))
        stage_coords = [coords if s == 0 else _take(coords, geom.stage_points[s])
                        for s in range(len(self.config.stage_dims))]
        skips = []
        for s in range(len(self.config.stage_dims)):
            if s > 0:
                pooled = ad.mean(ad.gather(h, geom.pool_idx[s - 1]), axis=-2)
                h = ad.relu(self.down[s - 1](pooled))
            for blk in self.blocks[s]:
                h = blk(h, stage_coords[s], geom.attn_idx[s])
            skips.append(h)
        for s in range(len(self.config.stage_dims) - 1, 0, -1):
            w = geom.up_w[s - 1]
            interp = ad.sum_(ad.mul(ad.gather(h, geom.up_idx[s - 1]), Tensor(w[..., None])), axis=-2)
            h = ad.relu(ad.add(self.up[s - 1](interp), self.skip[s - 1](skips[s - 1])))
        return self.head(ad.relu(h))


def loss_distill(student, targets, covered) -> Tensor:
    """Mean over covered points of 1 - cos(student, target); in [0, 2]."""
    covered = np.asarray(covered, dtype=bool)
    if not covered.any():
        raise ValueError("distillation loss needs at least one covered point")
    student = ad.as_tensor(student)
    f = student.shape[-1]
    rows = np.flatnonzero(covered.reshape(-1))
    s = ad.gather(ad.reshape(student, (-1, f)), rows)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, f)[rows]
    cos = ad.cosine_similarity(s, t, axis=-1)
    return ad.scale(ad.sum_(ad.sub(1.0, cos)), 1.0 / len(rows))


# ---------------------------------------------------------------- condition

@dataclass
class ConditionOutput:
    z_c: Tensor
    action_logits: Tensor
    class_logits: Tensor
    center: Tensor
    bbox: Tensor
    point_feats: Tensor      # (B, m, F) downsampled unit features before fusion
    point_coords: np.ndarray  # (B, m, 3)
    text_pooled: Tensor      # (B, F)


class ConditionModule(Module):
    """Fuses per-token text embeddings with downsampled scene features into z_c."""

    extra = 5  # text flag + 4 sinusoidal token-position channels

    def __init__(self, rng, config: ModelConfig, text: FrozenTextEncoder):
        f = config.feature_dim
        self.config = config
        self.text = text
        self.scene = SceneEncoderUNet(rng, config)
        d = f + self.extra
        self.fq = Linear(rng, d, d, init="identity")
        self.fk = Linear(rng, d, d, init="identity")
        self.fv = Linear(rng, d, d, init="identity")
        self.fo = Linear(rng, d, d, init="identity")
        self.logit_scale = Tensor(np.array(math.log(config.logit_scale)), requires_grad=True)
        self.post1 = Linear(rng, d + 3, config.fuse_hidden)
        self.post2 = Linear(rng, config.fuse_hidden, config.fuse_hidden)
        self.zc = Linear(rng, config.fuse_hidden + f + body.N_BETAS, config.cond_dim)
        self.action_head = Linear(rng, config.cond_dim, N_ACTIONS)
        self.class_head = Linear(rng, config.cond_dim, N_CLASSES)
        self.center_head = Linear(rng, config.cond_dim, 3)
        self.bbox_head = Linear(rng, config.cond_dim, 6)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = super().parameters(prefix)
        if self.text.trainable:
            out[prefix + "text.table"] = self.text.table
        return out

    def set_parameters(self, values, prefix: str = "") -> None:
        super().set_parameters(values, prefix)
        key = prefix + "text.table"
        if self.text.trainable and key in values:
            self.text.table = Tensor(np.asarray(values[key], dtype=np.float64), requires_grad=True)

    def token_features(self, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, W, F) raw token rows and (B, F) renormalized mean over word tokens."""
        tokens = np.asarray(tokens)
        rows = ad.gather(self.text.table, tokens)
        mask = self.text.word_mask(tokens).astype(np.float64)
        if (mask.sum(axis=1) == 0).any():
            raise ValueError("every text needs at least one word token")
        w = mask / mask.sum(axis=1, keepdims=True)
        pooled = ad.sum_(ad.mul(rows, Tensor(w[..., None])), axis=1)
        return rows, ad.normalize(pooled, axis=-1)

    def downsample(self, feats: Tensor, coords: np.ndarray, geom: SceneGeometry) -> tuple[Tensor, np.ndarray]:
        pooled = ad.mean(ad.gather(feats, geom.cond_idx), axis=-2)
        return ad.normalize(pooled, axis=-1), _take(coords, geom.cond_points)

    def fuse(self, pts: Tensor, tok: Tensor, tokens: np.ndarray) -> Tensor:
        """Scaled-cosine self-attention over [points; tokens]; returns the fused point rows."""
        b, m, _ = pts.shape
        w = tok.shape[1]
        pts_x = ad.concat([pts, Tensor(np.zeros((b, m, self.extra)))], axis=-1)
        tpos = sinusoidal_embedding(w, self.extra - 1)
        tok_extra = np.concatenate([np.ones((w, 1)), tpos], axis=-1)
        tok_x = ad.concat([tok, Tensor(np.broadcast_to(tok_extra, (b, w, self.extra)))], axis=-1)
        x = ad.concat([pts_x, tok_x], axis=1)
        q = ad.normalize(self.fq(x), axis=-1)
        k = ad.normalize(self.fk(x), axis=-1)
        logits = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), ad.exp(self.logit_scale))
        key_ok = np.concatenate([np.ones((b, m), bool), np.asarray(tokens) != PAD], axis=1)
        logits = ad.where(np.broadcast_to(key_ok[:, None, :], logits.shape), logits, Tensor(np.full(logits.shape, -1e9)))
        att = ad.softmax(logits, axis=-1)
        y = ad.add(x, self.fo(ad.matmul(att, self.fv(x))))
        return y[:, :m, :]

    def __call__(self, tokens, coords, colors, beta, geom: SceneGeometry, scene_feats: Tensor | None = None
                 ) -> ConditionOutput:
        coords = np.asarray(coords, dtype=np.float64)
        feats = self.scene(coords, colors, geom) if scene_feats is None else scene_feats
        pts, pcoords = self.downsample(feats, coords, geom)
        tok, pooled = self.token_features(tokens)
        fused = self.fuse(pts, tok, tokens)
        h = ad.relu(self.post1(ad.concat([fused, Tensor(pcoords)], axis=-1)))
        scene_vec = ad.max_(self.post2(h), axis=1)
        z_c = self.zc(ad.concat([scene_vec, pooled, ad.as_tensor(beta)], axis=-1))
        return ConditionOutput(z_c, self.action_head(z_c), self.class_head(z_c), self.center_head(z_c),
                               self.bbox_head(z_c), pts, pcoords, pooled)


# ---------------------------------------------------------------- motion cVAE

class MotionEncoder(Module):
    def __init__(self, rng, config: ModelConfig):
        hd = config.gru_hidden
        self.inp = Linear(rng, body.N_PARAMS, hd)
        self.fwd = GRU(rng, hd, hd)
        self.bwd = GRU(rng, hd, hd)
        self.join = Linear(rng, 2 * hd + config.cond_dim, 2 * hd)
        self.res1 = Linear(rng, 2 * hd, 2 * hd)
        self.res2 = Linear(rng, 2 * hd, 2 * hd)
        self.mu = Linear(rng, 2 * hd, config.latent_dim)
        self.logvar = Linear(rng, 2 * hd, config.latent_dim)

    def __call__(self, params, mask, z_c: Tensor) -> tuple[Tensor, Tensor]:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("every motion needs at least one valid frame")
        x = self.inp(ad.as_tensor(params))
        h = ad.concat([self.fwd(x, mask), self.bwd(x, mask, reverse=True), z_c], axis=-1)
        h = self.join(h)
        h = ad.add(h, self.res2(ad.relu(self.res1(h))))
        h = ad.relu(h)
        return self.mu(h), self.logvar(h)


class DecoderLayer(Module):
    def __init__(self, rng, config: ModelConfig):
        d = config.dec_dim
        self.self_att = MultiHeadAttention(rng, d, config.dec_heads)
        self.cross_att = MultiHeadAttention(rng, d, config.dec_heads)
        self.ff1 = Linear(rng, d, config.dec_ffn)
        self.ff2 = Linear(rng, config.dec_ffn, d)
        self.ln1, self.ln2, self.ln3 = LayerNorm(d), LayerNorm(d), LayerNorm(d)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = self.ln1(ad.add(x, self.self_att(x)))
        x = self.ln2(ad.add(x, self.cross_att(x, memory)))
        return self.ln3(ad.add(x, self.ff2(ad.relu(self.ff1(x)))))


class MotionDecoder(Module):
    def __init__(self, rng, config: ModelConfig):
        self.frames = config.frames
        self.memory = Linear(rng, config.latent_dim + config.cond_dim, config.dec_dim)
        self.layers = [DecoderLayer(rng, config) for _ in range(config.dec_layers)]
        self.out = Linear(rng, config.dec_dim, body.N_PARAMS)
        self.pe = sinusoidal_embedding(config.frames, config.dec_dim)

    def __call__(self, z: Tensor, z_c: Tensor) -> Tensor:
        z, z_c = ad.as_tensor(z), ad.as_tensor(z_c)
        b = z.shape[0]
        mem = ad.reshape(self.memory(ad.concat([z, z_c], axis=-1)), (b, 1, -1))
        x = Tensor(np.broadcast_to(self.pe, (b,) + self.pe.shape))
        for layer in self.layers:
            x = layer(x, mem)
        return self.out(x)


def reparameterize(mu, logvar, seed=None, eps: np.ndarray | None = None) -> Tensor:
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
    return ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), Tensor(eps)))


class CVAE(Module):
    def __init__(self, config: ModelConfig, text: FrozenTextEncoder, seed: int = 0):
        if text.dim != config.feature_dim:
            raise ValueError(f"text dim {text.dim} differs from feature_dim {config.feature_dim}")
        rng = np.random.default_rng(seed)
        self.config = config
        self.cond = ConditionModule(rng, config, text)
        self.encoder = MotionEncoder(rng, config)
        self.decoder = MotionDecoder(rng, config)

    @property
    def scene(self) -> SceneEncoderUNet:
        return self.cond.scene

    def forward(self, batch: "Batch", eps: np.ndarray) -> dict:
        cond = self.cond(batch.tokens, batch.coords, batch.colors, batch.beta, batch.geometry)
        mu, logvar = self.encoder(batch.params, batch.mask, cond.z_c)
        z = reparameterize(mu, logvar, eps=eps)
        return {"cond": cond, "mu": mu, "logvar": logvar, "pred": self.decoder(z, cond.z_c)}


# ---------------------------------------------------------------- batches and losses

@dataclass
class Batch:
    coords: np.ndarray     # (B, N, 3)
    colors: np.ndarray     # (B, N, 3)
    geometry: SceneGeometry
    tokens: np.ndarray     # (B, W)
    beta: np.ndarray       # (B, 10)
    params: np.ndarray     # (B, T, 72)
    mask: np.ndarray       # (B, T)
    action: np.ndarray     # (B,) 0..3
    goal_class: np.ndarray  # (B,) 1..9
    center: np.ndarray     # (B, 3)
    bbox: np.ndarray       # (B, 6)

    def __len__(self) -> int:
        return len(self.tokens)


LOSS_TERMS = ("t", "r", "theta", "M", "kl", "action", "center", "bbox", "class")
DEFAULT_LAMBDAS = {"t": 1.0, "r": 1.0, "theta": 10.0, "M": 10.0, "kl": 0.1,
                   "action": 0.5, "center": 0.1, "bbox": 0.1, "class": 0.5}


def check_lambdas(lambdas: dict) -> dict:
    out = dict(DEFAULT_LAMBDAS)
    for k, v in lambdas.items():
        if k not in out:
            raise KeyError(f"unknown loss weight {k!r}")
        if not v >= 0:
            raise ValueError(f"loss weight {k} must be non-negative, got {v}")
        out[k] = float(v)
    return out


def masked_l1(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Per-frame mean |error|, averaged over valid frames, then over the batch."""
    mask = np.asarray(mask, dtype=np.float64)
    per_frame = ad.mean(ad.abs_(ad.sub(pred, ad.as_tensor(target))), axis=tuple(range(2, pred.ndim)))
    w = mask / mask.sum(axis=1, keepdims=True) / len(mask)
    return ad.sum_(ad.mul(per_frame, Tensor(w)))


def kl_divergence(mu, logvar) -> Tensor:
    """Closed-form KL of N(mu, diag exp(logvar)) from N(0, I), summed over dims, batch mean."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    per = ad.sub(ad.sub(ad.add(ad.exp(logvar), ad.mul(mu, mu)), 1.0), logvar)
    return ad.scale(ad.sum_(per), 0.5 / mu.shape[0])


def cross_entropy(logits, labels) -> Tensor:
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.eye(logits.shape[-1])[labels]
    return ad.scale(ad.sum_(ad.mul(ad.log_softmax(logits, axis=-1), Tensor(onehot))), -1.0 / len(labels))


def mse(pred, target) -> Tensor:
    d = ad.sub(ad.as_tensor(pred), ad.as_tensor(target))
    return ad.mean(ad.mul(d, d))


def loss_terms(pred: Tensor, mu, logvar, cond: ConditionOutput, batch: Batch) -> dict[str, Tensor]:
    tgt = np.asarray(batch.params)
    verts_p = body.canonical_mesh(pred, batch.beta)
    verts_t = body.canonical_mesh(tgt, batch.beta).data
    return {
        "t": masked_l1(pred[..., 0:3], tgt[..., 0:3], batch.mask),
        "r": masked_l1(pred[..., 3:9], tgt[..., 3:9], batch.mask),
        "theta": masked_l1(pred[..., 9:], tgt[..., 9:], batch.mask),
        "M": masked_l1(verts_p, verts_t, batch.mask),
        "kl": kl_divergence(mu, logvar),
        "action": cross_entropy(cond.action_logits, batch.action),
        "center": mse(cond.center, batch.center),
        "bbox": mse(cond.bbox, batch.bbox),
        "class": cross_entropy(cond.class_logits, np.asarray(batch.goal_class) - 1),
    }


def combine(terms: dict[str, Tensor], lambdas: dict) -> Tensor:
    lam = check_lambdas(lambdas)
    total = None
    for name in LOSS_TERMS:
        part = ad.scale(terms[name], lam[name])
        total = part if total is None else ad.add(total, part)
    return total


def loss_total(model: CVAE, batch: Batch, lambdas: dict | None = None, eps: np.ndarray | None = None,
               seed: int = 0) -> tuple[Tensor, dict[str, float]]:
    """Weighted training objective and its per-term breakdown (unweighted values)."""
    lambdas = check_lambdas(lambdas or {})
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal((len(batch), model.config.latent_dim))
    out = model.forward(batch, eps)
    terms = loss_terms(out["pred"], out["mu"], out["logvar"], out["cond"], batch)
    total = combine(terms, lambdas)
    return total, {k: float(v.data) for k, v in terms.items()}


def sample_motion(model: CVAE, tokens, coords, colors, beta, geometry: SceneGeometry, k: int = 10,
                  seed: int = 0) -> np.ndarray:
    """K decodes from seeded standard-normal latents sharing one z_c; returns (K, T, 72)."""
    z = np.random.default_rng(seed).standard_normal((k, model.config.latent_dim))
    cond = model.cond(np.asarray(tokens)[None], np.asarray(coords)[None], np.asarray(colors)[None],
                      np.asarray(beta)[None], stack_geometry([geometry]))
    zc = np.broadcast_to(cond.z_c.data, (k, cond.z_c.shape[-1]))
    return model.decoder(Tensor(z), Tensor(zc)).data
