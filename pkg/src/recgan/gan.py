"""Coupled conditional GAN over coded (view, buy) matrices.

Two generators share a segment embedding and a dense trunk and differ only in
their output heads; two discriminators have their own segment embeddings and
heads but share a dense trunk.  Sharing is by object identity: ``g_shared`` and
``d_shared`` exist once and both networks hold references to them.
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, fields
from typing import BinaryIO, NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .validation import check_bit_array, check_segments

logger = logging.getLogger(__name__)

RGAN_MAGIC = b"RGAN"
RGAN_VERSION = 1


@dataclass
class GanConfig:
    r: int
    W: int
    z_dim: int = 100
    n_segments: int = 5
    g_embed_dim: int = 100
    g_widths: tuple = (128, 256)
    d_widths: tuple = (512, 256, 64)
    pool_window: tuple = (2, 2)
    pool_stride: tuple = (2, 2)
    dropout_rate: float = 0.25
    label_smooth: float = 0.9
    batch_size: int = 16
    epochs: int = 1100
    max_steps: int | None = None
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    fake_mode: str = "train"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("g_widths", "d_widths", "pool_window", "pool_stride"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        dims = [self.r, self.W, self.z_dim, self.n_segments, self.g_embed_dim, self.batch_size,
                *self.g_widths, *self.d_widths, *self.pool_window, *self.pool_stride]
        if any(int(d) < 1 for d in dims) or not self.g_widths or not self.d_widths:
            raise ValueError("all GAN dimensions must be positive")
        if self.g_embed_dim != self.z_dim:
            raise ValueError("g_embed_dim must equal z_dim (the embedding multiplies z)")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ValueError("epochs and max_steps must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0 < self.label_smooth <= 1:
            raise ValueError("label_smooth must be in (0, 1]")
        if self.fake_mode not in ("train", "infer"):
            raise ValueError("fake_mode must be train or infer")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        nn.pool_output_shape((self.r, self.W), self.pool_window, self.pool_stride)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def full_size(cls, **overrides):
        return cls(**{"r": 1669, "W": 300, **overrides})


class GeneratorTrunk:
    """[Dense, ReLU, BatchNorm, Dropout] blocks."""

    def __init__(self, name, n_in, widths, momentum, eps):
        sizes = (n_in, *widths)
        self.dense = [nn.Dense(f"{name}.dense{i + 1}", a, b)
                      for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        self.bn = [nn.BatchNorm(f"{name}.bn{i + 1}", b, momentum, eps)
                   for i, b in enumerate(widths)]

    def layers(self):
        return [layer for pair in zip(self.dense, self.bn) for layer in pair]

    def forward(self, h, training, rng, rate, update_stats=True):
        caches = []
        for dense, bn in zip(self.dense, self.bn):
            h, cd = dense.forward(h)
            h, cr = nn.relu(h)
            h, cb = bn.forward(h, training, update_stats)
            h, cm = nn.dropout(h, rate, rng, training)
            caches.append((cd, cr, cb, cm))
        return h, caches

    def backward(self, dh, caches):
        for dense, bn, (cd, cr, cb, cm) in reversed(list(zip(self.dense, self.bn, caches))):
            dh = nn.dropout_backward(dh, cm)
            dh = bn.backward(dh, cb)
            dh = nn.relu_backward(dh, cr)
            dh = dense.backward(dh, cd)
        return dh


class DiscriminatorTrunk:
    """[Dense, ReLU] blocks."""

    def __init__(self, name, n_in, widths):
        sizes = (n_in, *widths)
        self.dense = [nn.Dense(f"{name}.dense{i + 1}", a, b)
                      for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]

    def layers(self):
        return list(self.dense)

    def forward(self, h):
        caches = []
        for dense in self.dense:
            h, cd = dense.forward(h)
            h, cr = nn.relu(h)
            caches.append((cd, cr))
        return h, caches

    def backward(self, dh, caches):
        for dense, (cd, cr) in reversed(list(zip(self.dense, caches))):
            dh = dense.backward(nn.relu_backward(dh, cr), cd)
        return dh


class Generator(NamedTuple):
    embed: nn.Embedding
    trunk: GeneratorTrunk
    head: nn.Dense


class Discriminator(NamedTuple):
    embed: nn.Embedding
    trunk: DiscriminatorTrunk
    head: nn.Dense


class TrainingDiverged(RuntimeError):
    pass


class CoupledGan:
    def __init__(self, cfg: GanConfig):
        c = self.cfg = cfg
        rw = c.r * c.W
        self.g_embed = nn.Embedding("g_embed", c.n_segments, c.g_embed_dim)
        self.g_shared = GeneratorTrunk("g_shared", c.g_embed_dim, c.g_widths,
                                       c.bn_momentum, c.bn_eps)
        self.g_head_1 = nn.Dense("g_head_1", c.g_widths[-1], rw)
        self.g_head_2 = nn.Dense("g_head_2", c.g_widths[-1], rw)
        self.d_embed_1 = nn.Embedding("d_embed_1", c.n_segments, rw)
        self.d_embed_2 = nn.Embedding("d_embed_2", c.n_segments, rw)
        self.pooled_shape = nn.pool_output_shape((c.r, c.W), c.pool_window, c.pool_stride)
        self.n_features = self.pooled_shape[0] * self.pooled_shape[1]
        self.d_shared = DiscriminatorTrunk("d_shared", self.n_features, c.d_widths)
        self.d_head_1 = nn.Dense("d_head_1", c.d_widths[-1], 1)
        self.d_head_2 = nn.Dense("d_head_2", c.d_widths[-1], 1)
        self.dtype = np.dtype(c.dtype)
        self.d_opt = self._adam()
        self.g_opt = self._adam()

    def _adam(self):
        c = self.cfg
        return nn.Adam(c.learning_rate, c.beta1, c.beta2, c.adam_eps)

    @property
    def generators(self):
        return (Generator(self.g_embed, self.g_shared, self.g_head_1),
                Generator(self.g_embed, self.g_shared, self.g_head_2))

    @property
    def discriminators(self):
        return (Discriminator(self.d_embed_1, self.d_shared, self.d_head_1),
                Discriminator(self.d_embed_2, self.d_shared, self.d_head_2))

    @staticmethod
    def _unique_params(layers):
        seen, out = set(), []
        for layer in layers:
            for p in layer.params():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def generator_params(self):
        layers = []
        for g in self.generators:
            layers += [g.embed, *g.trunk.layers(), g.head]
        return self._unique_params(layers)

    def discriminator_params(self):
        layers = []
        for d in self.discriminators:
            layers += [d.embed, *d.trunk.layers(), d.head]
        return self._unique_params(layers)

    def params(self):
        return self.generator_params() + self.discriminator_params()

    def param_dict(self):
        return {p.name: p for p in self.params()}

    def allocate(self, names=None):
        """Initialize parameter arrays (all blocks, or only those in ``names``).

        Layers are initialized in a fixed order from a stream derived from the
        config seed, so any subset gets the same values it would get in a full
        allocation.
        """
        rng = np.random.default_rng([self.cfg.seed, 0])
        layers = [self.g_embed, *self.g_shared.layers(), self.g_head_1, self.g_head_2,
                  self.d_embed_1, self.d_embed_2, *self.d_shared.layers(),
                  self.d_head_1, self.d_head_2]
        for layer in layers:
            wanted = names is None or any(p.name in names for p in layer.params())
            # every layer consumes its own child stream so skipping one does not shift others
            child = np.random.default_rng(rng.integers(2**63))
            if wanted:
                layer.init(child, self.dtype)
                for p in layer.params():
                    p.zero_grad()
        return self

    @property
    def allocated(self):
        return all(p.value is not None for p in self.params())

    # generator -----------------------------------------------------------

    def _generate(self, z, y, training, rng=None, update_stats=True):
        c = self.cfg
        e, ce = self.g_embed.forward(y)
        h, cm = nn.multiply(e, np.asarray(z, dtype=self.dtype))
        h, ct = self.g_shared.forward(h, training, rng, c.dropout_rate, update_stats)
        outs, heads = [], []
        for head in (self.g_head_1, self.g_head_2):
            a, cd = head.forward(h)
            o, ch = nn.tanh(a)
            outs.append(o.reshape(len(o), c.r, c.W))
            heads.append((cd, ch))
        return outs, (ce, cm, ct, heads)

    def _generate_backward(self, douts, cache):
        ce, cm, ct, heads = cache
        dh = 0
        for head, dout, (cd, ch) in zip((self.g_head_1, self.g_head_2), douts, heads):
            da = nn.tanh_backward(dout.reshape(len(dout), -1), ch)
            dh = dh + head.backward(da, cd)
        dh = self.g_shared.backward(dh, ct)
        de, _ = nn.multiply_backward(dh, cm)
        self.g_embed.backward(de, ce)

    def generate(self, z, y):
        """Inference-mode samples: (X1_hat, X2_hat), each (batch, r, W) in (-1, 1)."""
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        y = check_segments(np.atleast_1d(y), self.cfg.n_segments)
        if z.shape[1] != self.cfg.z_dim:
            raise ValueError(f"z must have {self.cfg.z_dim} columns")
        if len(y) == 1 and len(z) > 1:
            y = np.repeat(y, len(z))
        outs, _ = self._generate(z, y, training=False)
        return outs[0], outs[1]

    # discriminator -------------------------------------------------------

    def _features(self, k, X, y):
        embed = (self.d_embed_1, self.d_embed_2)[k]
        e, ce = embed.forward(y)
        m, cm = nn.multiply(e.reshape(X.shape), X)
        p, cp = nn.avgpool2d(m, self.cfg.pool_window, self.cfg.pool_stride)
        return p.reshape(len(X), -1), (ce, cm, cp)

    def d_features(self, X, y, head=1):
        """Pooled, flattened discriminator input of ``head`` (1 or 2)."""
        X = np.asarray(X, dtype=self.dtype).reshape(-1, self.cfg.r, self.cfg.W)
        y = check_segments(np.atleast_1d(y), self.cfg.n_segments)
        return self._features(head - 1, X, y)[0]

    def _discriminate(self, inputs):
        """Logits for a list of ``(head_index, X, y)``; the trunk runs once on all of them."""
        feats, fcaches = [], []
        for k, X, y in inputs:
            f, c = self._features(k, X, y)
            feats.append(f)
            fcaches.append(c)
        h, tc = self.d_shared.forward(np.concatenate(feats))
        bounds = np.cumsum([0] + [len(f) for f in feats])
        logits, hcaches = [], []
        for (k, _, _), a, b in zip(inputs, bounds, bounds[1:]):
            head = (self.d_head_1, self.d_head_2)[k]
            out, hc = head.forward(h[a:b])
            logits.append(out[:, 0])
            hcaches.append(hc)
        return logits, (inputs, fcaches, tc, hcaches)

    def _discriminate_backward(self, dlogits, cache):
        inputs, fcaches, tc, hcaches = cache
        dh = np.concatenate([
            (self.d_head_1, self.d_head_2)[k].backward(dl[:, None].astype(self.dtype), hc)
            for (k, _, _), dl, hc in zip(inputs, dlogits, hcaches)])
        dF = self.d_shared.backward(dh, tc)
        dXs, start = [], 0
        for (k, X, _), (ce, cm, cp) in zip(inputs, fcaches):
            dp = dF[start:start + len(X)].reshape((len(X), *self.pooled_shape))
            start += len(X)
            dm = nn.avgpool2d_backward(dp, cp, self.cfg.pool_window, self.cfg.pool_stride)
            de, dX = nn.multiply_backward(dm, cm)
            (self.d_embed_1, self.d_embed_2)[k].backward(de.reshape(len(X), -1), ce)
            dXs.append(dX)
        return dXs

    # losses ----------------------------------------------------------------

    @staticmethod
    def _zero(params):
        for p in params:
            p.zero_grad()

    def discriminator_loss(self, X1, X2, y, z, rng):
        """Summed per-head loss 0.5 * (real vs label_smooth + fake vs 0); fills D grads.

        Fakes come from train-mode generators without touching BN running stats.
        """
        self._zero(self.discriminator_params())
        training = self.cfg.fake_mode == "train"
        (F1, F2), _ = self._generate(z, y, training, rng, update_stats=False)
        smooth = self.cfg.label_smooth
        inputs = [(0, X1, y), (0, F1, y), (1, X2, y), (1, F2, y)]
        logits, cache = self._discriminate(inputs)
        loss, dlogits = 0.0, []
        for logit, label in zip(logits, (smooth, 0.0, smooth, 0.0)):
            l, g = nn.sigmoid_xent(logit, label)
            loss += 0.5 * l
            dlogits.append(0.5 * g)
        self._discriminate_backward(dlogits, cache)
        info = {
            "d_acc_real": float(np.mean(np.concatenate([logits[0], logits[2]]) > 0)),
            "d_acc_fake": float(np.mean(np.concatenate([logits[1], logits[3]]) < 0)),
            "g1": F1, "g2": F2,
        }
        return loss, info

    def generator_loss(self, y, z, rng, update_stats=True):
        """Sum over heads of cross-entropy against label 1 through the current discriminators."""
        self._zero(self.generator_params())
        outs, gcache = self._generate(z, y, True, rng, update_stats)
        logits, dcache = self._discriminate([(0, outs[0], y), (1, outs[1], y)])
        loss, dlogits = 0.0, []
        for logit in logits:
            l, g = nn.sigmoid_xent(logit, 1.0)
            loss += l
            dlogits.append(g)
        dXs = self._discriminate_backward(dlogits, dcache)
        self._generate_backward(dXs, gcache)
        return loss

    def train_step(self, X1, X2, y, z, rng):
        """One discriminator update, then one generator update; returns batch statistics."""
        X1 = np.asarray(X1, dtype=self.dtype)
        X2 = np.asarray(X2, dtype=self.dtype)
        z = np.asarray(z, dtype=self.dtype)
        d_loss, info = self.discriminator_loss(X1, X2, y, z, rng)
        if not np.isfinite(d_loss):
            raise TrainingDiverged(f"discriminator loss is {d_loss} at step {self.d_opt.t + 1}")
        self.d_opt.step(self.discriminator_params())
        g_loss = self.generator_loss(y, z, rng)
        if not np.isfinite(g_loss):
            raise TrainingDiverged(f"generator loss is {g_loss} at step {self.g_opt.t + 1}")
        self.g_opt.step(self.generator_params())
        g1, g2 = info.pop("g1"), info.pop("g2")
        return {
            "d_loss": d_loss, "g_loss": g_loss, **info,
            "x1_mean": float(X1.mean()), "x1_std": float(X1.std()),
            "x2_mean": float(X2.mean()), "x2_std": float(X2.std()),
            "g1_mean": float(g1.mean()), "g1_std": float(g1.std()),
            "g2_mean": float(g2.mean()), "g2_std": float(g2.std()),
        }


def build_model(cfg: GanConfig, allocate=True) -> CoupledGan:
    model = CoupledGan(cfg)
    if allocate:
        model.allocate()
    return model


def _is_bn_stat(p):
    return not p.trainable


def param_count(model: CoupledGan, convention="combined"):
    """Exact ``(total, trainable, non_trainable)`` counts from block shapes.

    ``combined``: the generator-through-frozen-discriminator stack, so only
    generator-side trainable blocks count as trainable.  ``all``: every block
    except the batch-norm running statistics.
    """
    gen = model.generator_params()
    dis = model.discriminator_params()
    total = sum(p.size for p in gen + dis)
    if convention == "combined":
        trainable = sum(p.size for p in gen if p.trainable)
    elif convention == "all":
        trainable = sum(p.size for p in gen + dis if p.trainable)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return total, trainable, total - trainable


def layer_shapes(model: CoupledGan):
    """Output shape (without batch axis) of every layer along both network paths."""
    c = model.cfg
    g = [("g.embedding", (c.g_embed_dim,)), ("g.multiply", (c.z_dim,))]
    for i, w in enumerate(c.g_widths, 1):
        g += [(f"g.dense{i}", (w,)), (f"g.relu{i}", (w,)), (f"g.bn{i}", (w,)),
              (f"g.dropout{i}", (w,))]
    g += [("g.head", (c.r * c.W,)), ("g.tanh", (c.r * c.W,)), ("g.reshape", (c.r, c.W, 1))]
    d = [("d.embedding", (c.r * c.W,)), ("d.reshape", (c.r, c.W, 1)),
         ("d.multiply", (c.r, c.W, 1)), ("d.avgpool", (*model.pooled_shape, 1)),
         ("d.flatten", (model.n_features,))]
    for i, w in enumerate(c.d_widths, 1):
        d += [(f"d.dense{i}", (w,)), (f"d.relu{i}", (w,))]
    d += [("d.head", (1,))]
    return g + d


@dataclass
class TrainStats:
    epoch: int
    steps: int
    d_loss: float
    g_loss: float
    d_acc_real: float
    d_acc_fake: float
    x1_mean: float
    x1_std: float
    x2_mean: float
    x2_std: float
    g1_mean: float
    g1_std: float
    g2_mean: float
    g2_std: float

    @property
    def d_accuracy(self):
        return 0.5 * (self.d_acc_real + self.d_acc_fake)


def train(model: CoupledGan, X1, X2, y, epochs=None, checkpoint_every=0,
          checkpoint_path=None, rng=None):
    """Train on signed (+-1) matrices; returns the per-epoch history.

    Each epoch runs ``max(1, N // batch_size)`` steps on uniformly drawn
    batches; ``cfg.max_steps`` caps the total step count.
    """
    c = model.cfg
    X1 = np.asarray(X1, dtype=model.dtype)
    X2 = np.asarray(X2, dtype=model.dtype)
    y = check_segments(y, c.n_segments)
    n = len(y)
    if n == 0:
        raise ValueError("training set is empty")
    if X1.shape != (n, c.r, c.W) or X2.shape != X1.shape:
        raise ValueError(f"expected matrices of shape ({n}, {c.r}, {c.W})")
    epochs = c.epochs if epochs is None else epochs
    rng = rng if rng is not None else np.random.default_rng([c.seed, 1])
    steps_per_epoch = max(1, n // c.batch_size)
    batch = min(c.batch_size, n)
    history, done = [], 0
    for epoch in range(1, epochs + 1):
        records = []
        for _ in range(steps_per_epoch):
            if c.max_steps is not None and done >= c.max_steps:
                break
            idx = rng.choice(n, size=batch, replace=False)
            z = rng.standard_normal((batch, c.z_dim)).astype(model.dtype)
            records.append(model.train_step(X1[idx], X2[idx], y[idx], z, rng))
            done += 1
        if not records:
            break
        means = {k: float(np.mean([r[k] for r in records])) for k in records[0]}
        history.append(TrainStats(epoch=epoch, steps=done, **means))
        if checkpoint_every and checkpoint_path and epoch % checkpoint_every == 0:
            with open(checkpoint_path, "wb") as fh:
                save_checkpoint(model, fh)
    return history


def save_checkpoint(model: CoupledGan, fh: BinaryIO):
    """``RGAN`` magic, version, config JSON, then named float32 little-endian blocks."""
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    fh.write(RGAN_MAGIC + struct.pack("<II", RGAN_VERSION, len(cfg)) + cfg)
    blocks = model.params()
    fh.write(struct.pack("<I", len(blocks)))
    for p in blocks:
        if p.value is None:
            raise ValueError(f"block {p.name} is not allocated")
        name = p.name.encode()
        fh.write(struct.pack("<H", len(name)) + name)
        fh.write(struct.pack(f"<B{len(p.shape)}I", len(p.shape), *p.shape))
        fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(fh: BinaryIO, dtype=None) -> CoupledGan:
    if fh.read(4) != RGAN_MAGIC:
        raise ValueError("not an RGAN checkpoint")
    version, n = struct.unpack("<II", fh.read(8))
    if version != RGAN_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = GanConfig.from_dict(json.loads(fh.read(n)))
    if dtype is not None:
        cfg.dtype = dtype
    model = CoupledGan(cfg)
    blocks = model.param_dict()
    (count,) = struct.unpack("<I", fh.read(4))
    for _ in range(count):
        (ln,) = struct.unpack("<H", fh.read(2))
        name = fh.read(ln).decode()
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        p = blocks.get(name)
        if p is None or tuple(p.shape) != shape:
            raise ValueError(f"checkpoint block {name} {shape} does not match the model")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(fh.read(4 * size), dtype="<f4")
        if data.size != size:
            raise ValueError(f"truncated checkpoint at block {name}")
        p.value = data.reshape(shape).astype(model.dtype)
        p.zero_grad()
    missing = [p.name for p in model.params() if p.value is None]
    if missing:
        raise ValueError(f"checkpoint is missing blocks: {missing}")
    return model


def checkpoint_bytes(model: CoupledGan) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(model, buf)
    return buf.getvalue()


class CoupledGANRecommender(BaseEstimator):
    """Estimator wrapper: ``fit`` on coded (view, buy) bit matrices, ``sample`` raw outputs."""

    def __init__(self, z_dim=100, n_segments=5, g_widths=(128, 256), d_widths=(512, 256, 64),
                 dropout_rate=0.25, label_smooth=0.9, batch_size=16, epochs=1100,
                 max_steps=None, learning_rate=0.001, seed=0):
        self.z_dim = z_dim
        self.n_segments = n_segments
        self.g_widths = g_widths
        self.d_widths = d_widths
        self.dropout_rate = dropout_rate
        self.label_smooth = label_smooth
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y):
        """``X``: (n, 2, r, W) 0/1 codes (view channel first); ``y``: segments."""
        X = check_bit_array(X, ndim=4, name="X")
        if X.shape[1] != 2:
            raise ValueError("X must stack the view and buy channels on axis 1")
        y = check_segments(y, self.n_segments)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        self.config_ = GanConfig(
            r=X.shape[2], W=X.shape[3], z_dim=self.z_dim, n_segments=self.n_segments,
            g_embed_dim=self.z_dim, g_widths=self.g_widths, d_widths=self.d_widths,
            dropout_rate=self.dropout_rate, label_smooth=self.label_smooth,
            batch_size=self.batch_size, epochs=self.epochs, max_steps=self.max_steps,
            learning_rate=self.learning_rate, seed=self.seed)
        self.model_ = build_model(self.config_)
        signed = X.astype(np.float32) * 2 - 1
        self.history_ = train(self.model_, signed[:, 0], signed[:, 1], y)
        return self

    def sample(self, segment, n, seed=0):
        """``n`` raw (view, buy) generator outputs for one segment: shape (n, 2, r, W)."""
        from .recgen import sample_segment
        return sample_segment(self.model_, segment, n, seed)
