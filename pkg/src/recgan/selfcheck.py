"""Quick built-in checks: codec round trip, gradient check, metric oracle."""
from __future__ import annotations

import random
from fractions import Fraction

import numpy as np

from . import codec, evaluation, gan, nn
from .recgen import RecommendationSet


def check_codec(n_rows=500, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_rows):
        n = int(rng.integers(0, 400))
        ones = int(rng.integers(0, min(n, 8) + 1))
        row = np.zeros(n, np.uint8)
        row[rng.choice(n, ones, replace=False)] = 1
        width = codec.required_width(n, ones)
        if not np.array_equal(codec.decode_row(codec.encode_row(row, width), n), row):
            return False, f"round trip failed for n={n}, ones={ones}"
    for _ in range(n_rows):
        n = int(rng.integers(1, 400))
        out = codec.decode_row(rng.integers(0, 2, 32), n)
        if out.shape != (n,):
            return False, "decoder is not total"
    return True, f"{n_rows} rows round-tripped, {n_rows} random patterns decoded"


def check_gradients(seed=0):
    cfg = gan.GanConfig(r=6, W=8, z_dim=5, g_embed_dim=5, g_widths=(7, 9), d_widths=(8, 6, 4),
                        seed=seed, dtype="float64")
    model = gan.build_model(cfg)
    rng = np.random.default_rng(seed)
    X1, X2 = rng.choice([-1.0, 1.0], (2, 4, 6, 8))
    y = rng.integers(0, 5, 4)
    z = rng.standard_normal((4, 5))

    def d_fn():
        loss, _ = model.discriminator_loss(X1, X2, y, z, np.random.default_rng(1))
        return loss, {p.name: p.grad for p in model.discriminator_params()}

    def g_fn():
        loss = model.generator_loss(y, z, np.random.default_rng(2), update_stats=False)
        return loss, {p.name: p.grad for p in model.generator_params()}

    d = nn.grad_check(d_fn, model.discriminator_params())
    g = nn.grad_check(g_fn, model.generator_params())
    worst = max(d["max_error"], g["max_error"])
    return d["passed"] and g["passed"], f"max relative error {worst:.2e}"


def _brute(recs, kind):
    parts = []
    for rs in recs:
        if kind == "cvr":
            shared = set(rs.items_v) & set(rs.items_b)
            viewed = sum(len(rs.items_v[c]) for c in shared)
            if not viewed:
                continue
            hit = sum(len(rs.items_v[c] & rs.items_b[c]) for c in shared)
            parts.append(Fraction(hit, viewed))
        else:
            union = set(rs.items_v) | set(rs.items_b)
            if not union:
                continue
            parts.append(Fraction(len(set(rs.items_v) & set(rs.items_b)), len(union)))
    return 100 * sum(parts) / len(parts) if parts else None


def check_metrics(n_cases=300, seed=0):
    rng = random.Random(seed)
    for _ in range(n_cases):
        recs = []
        for _ in range(rng.randrange(1, 4)):
            chans = [{f"c{c}": {f"i{rng.randrange(4)}" for _ in range(rng.randrange(1, 4))}
                      for c in range(rng.randrange(4))} for _ in range(2)]
            recs.append(RecommendationSet(0, *chans))
        for kind, fn in (("cvr", evaluation.cvr), ("jaccard", evaluation.jaccard)):
            expected = _brute(recs, kind)
            try:
                got = fn(recs).exact
            except evaluation.UndefinedMetric:
                got = None
            if got != expected:
                return False, f"{kind} disagrees with brute force: {got} != {expected}"
    return True, f"{n_cases} random instances agree exactly"


CHECKS = {"codec": check_codec, "gradients": check_gradients, "metrics": check_metrics}


def run_all():
    """List of (name, passed, detail)."""
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed command
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, ok, detail))
    return out
