"""File-based pipeline stages behind the ``recgan`` command line.

Every stage reads its inputs from a work directory, writes its outputs there,
echoes the effective configuration and refreshes ``manifest.txt`` with the
sha256 of every artifact it produced.  Stages never hand data over in memory,
so each can be re-run on its own.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import os
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import codec, evaluation, gan, ingest, recgen, synth

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"


class ConfigError(ValueError):
    """Bad configuration key or value."""


class MissingInput(ValueError):
    """A stage input does not exist (usually: the producing stage was not run)."""


def _gan_defaults():
    skip = {"r", "W", "n_segments", "g_embed_dim", "max_steps", "seed"}
    return {f"gan.{f.name}": f.default for f in dataclasses.fields(gan.GanConfig)
            if f.name not in skip}


def _synth_defaults():
    skip = {"seed", "bin_edges", "category_blocks"}
    return {f"synth.{f.name}": f.default for f in dataclasses.fields(synth.SynthConfig)
            if f.name not in skip}


DEFAULTS = {
    "seed": 0,
    "paths.events": "events.csv",
    "paths.catalog": "catalog.csv",
    "ingest.scheme": "view,buy",
    "ingest.bin_edges": ingest.DEFAULT_BIN_EDGES,
    "codec.width": codec.DEFAULT_WIDTH,
    "codec.prior_strength": "1/2",
    **_gan_defaults(),
    "gan.max_steps": None,
    "sample.n_realizations": 2500,
    "sample.subsample": 0.08,
    "sample.threshold": 0.0,
    "sample.segments": None,
    "null.trials": 500,
    **_synth_defaults(),
}

# keys whose default is None need an explicit element type
_OPTIONAL = {"gan.max_steps": int, "sample.segments": tuple, "synth.pool_sizes": tuple}


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(value, str):
        value = value.strip()
        if value.lower() in ("none", "") and key in _OPTIONAL:
            return None
    kind = _OPTIONAL.get(key, type(default))
    try:
        if kind is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").strip("()[]").split(",") if v]
            return tuple(int(v) for v in value)
        if kind is bool:
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def _render(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    return str(value)


class RunConfig(dict):
    """Flat dotted-key configuration, e.g. ``gan.batch_size = 16``."""

    def __init__(self, overrides=None):
        super().__init__(DEFAULTS)
        for key, value in (overrides or {}).items():
            self[key] = value

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        super().__setitem__(key, _coerce(key, value))

    def update(self, other=(), **kw):
        for key, value in dict(other, **kw).items():
            self[key] = value

    @classmethod
    def parse(cls, text):
        overrides = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            overrides[key] = value
        return cls(overrides)

    @classmethod
    def load(cls, path):
        try:
            return cls.parse(Path(path).read_text())
        except FileNotFoundError:
            raise MissingInput(f"config file not found: {path}") from None

    def dumps(self):
        return "".join(f"{k} = {_render(v)}\n" for k, v in sorted(self.items()))

    def section(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def codec_config(self, width=None):
        return codec.CodecConfig(width=width or self["codec.width"],
                                 prior_strength=Fraction(self["codec.prior_strength"]))

    def gan_config(self, r, W):
        opts = self.section("gan")
        return gan.GanConfig(r=r, W=W, g_embed_dim=opts["z_dim"], seed=self["seed"], **opts)

    def synth_config(self):
        return synth.SynthConfig(seed=self["seed"], bin_edges=self["ingest.bin_edges"],
                                 **self.section("synth"))


class Workdir:
    """Artifact directory with a content-hash manifest."""

    def __init__(self, path):
        self.path = Path(path)

    def file(self, name):
        return self.path / name

    def require(self, name, hint=None):
        p = self.file(name)
        if not p.exists():
            msg = f"missing input {p}"
            raise MissingInput(msg + (f" (run `{hint}` first)" if hint else ""))
        return p

    def resolve(self, name):
        p = Path(name)
        return p if p.is_absolute() else self.path / p

    def write(self, name, data):
        self.path.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.file(name).write_bytes(data)
        self._record(name, data)

    def _record(self, name, data):
        entries = self.manifest()
        entries[name] = hashlib.sha256(data).hexdigest()
        body = "".join(f"{digest}  {n}\n" for n, digest in sorted(entries.items()))
        self.file(MANIFEST).write_text(body)

    def manifest(self):
        p = self.file(MANIFEST)
        if not p.exists():
            return {}
        out = {}
        for line in p.read_text().splitlines():
            digest, name = line.split("  ", 1)
            out[name] = digest
        return out


def _catalog(wd, cfg):
    path = wd.resolve(cfg["paths.catalog"])
    if not path.exists():
        raise MissingInput(f"missing catalog {path} (run `synth` or set paths.catalog)")
    with open(path) as fh:
        return ingest.build_catalog(fh)


def _json_lines(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _read_json_lines(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def run_synth(wd, cfg, workers=1):
    corpus = synth.generate(cfg.synth_config())
    wd.write(Path(cfg["paths.events"]).name, corpus.events)
    wd.write(Path(cfg["paths.catalog"]).name, corpus.catalog)
    summary = [{"segment": s["segment"], "visitors": s["visitors"], "included": s["included"],
                "views": s["views"], "buys": s["buys"], "pool": s["pool"]}
               for _, s in sorted(corpus.summary.items())]
    oracle = synth.oracle_cvr(cfg.synth_config())
    for rec in summary:
        rec["oracle_cvr"] = oracle.get(rec["segment"])
    wd.write("synth.json", _json_lines(summary))
    return summary


def run_ingest(wd, cfg, workers=1):
    events_path = wd.resolve(cfg["paths.events"])
    if not events_path.exists():
        raise MissingInput(f"missing event log {events_path} (run `synth` or set paths.events)")
    catalog = _catalog(wd, cfg)
    with open(events_path) as fh:
        log = ingest.parse_events(fh)
    assignments = ingest.segment_visitors(log, cfg["ingest.bin_edges"])
    pairs, unknown = ingest.build_matrices(log, catalog, ingest.Scheme.parse(cfg["ingest.scheme"]),
                                           assignments, return_skipped=True)
    buf = io.StringIO()
    ingest.write_interactions(buf, pairs)
    wd.write("interactions.txt", buf.getvalue())
    counts = np.bincount([a.segment for a in assignments], minlength=5)
    logger.info("%d events (%d malformed, %d unknown items), %d visitors, %d pairs",
                len(log), log.skipped, unknown, len(assignments), len(pairs))
    return {"events": len(log), "malformed": log.skipped, "unknown_items": unknown,
            "visitors_per_segment": counts.tolist(), "pairs": len(pairs)}


def run_encode(wd, cfg, workers=1):
    source = wd.require("interactions.txt", "ingest")
    catalog = _catalog(wd, cfg)
    with open(source) as fh:
        pairs = ingest.read_interactions(fh)
    ccfg = cfg.codec_config()
    records = []
    for p in sorted(pairs, key=lambda p: p.visitor_id):
        v, b = codec.encode_matrix(p, catalog, ccfg)
        records.append((p.segment, v, b))
    buf = io.BytesIO()
    codec.write_coded(buf, records, catalog.r, ccfg.width, catalog.digest())
    wd.write("coded.rgc", buf.getvalue())
    return {"records": len(records), "r": catalog.r, "width": ccfg.width}


def _read_coded(wd, name, hint):
    with open(wd.require(name, hint), "rb") as fh:
        return codec.read_coded(fh)


def run_train(wd, cfg, workers=1, checkpoint_every=0):
    r, width, _, y, V, B = _read_coded(wd, "coded.rgc", "encode")
    gcfg = cfg.gan_config(r, width)
    model = gan.build_model(gcfg)
    history = gan.train(model, V * 2.0 - 1, B * 2.0 - 1, y, checkpoint_every=checkpoint_every,
                        checkpoint_path=wd.file("model.rgan") if checkpoint_every else None)
    wd.write("model.rgan", gan.checkpoint_bytes(model))
    wd.write("train_log.jsonl", _json_lines(dataclasses.asdict(h) for h in history))
    last = history[-1] if history else None
    return {"epochs": len(history), "steps": last.steps if last else 0,
            "d_accuracy": last.d_accuracy if last else None}


def _segments(cfg, trained):
    chosen = cfg["sample.segments"]
    return sorted(set(chosen if chosen is not None else trained.tolist()))


def run_sample(wd, cfg, workers=1):
    with open(wd.require("model.rgan", "train"), "rb") as fh:
        model = gan.load_checkpoint(fh)
    r, width, digest, trained, _, _ = _read_coded(wd, "coded.rgc", "encode")
    n = cfg["sample.n_realizations"]
    records = []
    for s in _segments(cfg, trained):
        raw = recgen.sample_segment(model, s, n, seed=[cfg["seed"], 2, s])
        bits = recgen.binarize(raw, cfg["sample.threshold"])
        records.extend((s, b[0], b[1]) for b in bits)
    buf = io.BytesIO()
    codec.write_coded(buf, records, r, width, digest)
    wd.write("samples.rgc", buf.getvalue())
    return {"realizations": len(records)}


def run_decode(wd, cfg, workers=1):
    r, width, digest, segments, V, B = _read_coded(wd, "samples.rgc", "sample")
    catalog = _catalog(wd, cfg)
    if digest != catalog.digest():
        raise ConfigError("samples.rgc was produced for a different catalog")
    bits = np.stack([V, B], axis=1)
    recs = recgen.decode_realizations(bits, catalog, segments, cfg.codec_config(width), workers)
    buf = io.StringIO()
    recgen.write_realizations(buf, recs)
    wd.write("realizations.txt", buf.getvalue())
    return {"realizations": len(recs)}


def _by_segment(recs):
    out = {}
    for rs in recs:
        out.setdefault(rs.segment, []).append(rs)
    return out


def _metric(fn, recs):
    try:
        m = fn(recs)
        return m.value, m.skipped
    except evaluation.UndefinedMetric:
        return 0.0, len(recs)


def run_eval(wd, cfg, workers=1):
    source = wd.require("realizations.txt", "decode")
    catalog = _catalog(wd, cfg)
    with open(source) as fh:
        recs = recgen.read_realizations(fh)
    rows = []
    for s, group in sorted(_by_segment(recs).items()):
        group = recgen.subsample(group, cfg["sample.subsample"], seed=[cfg["seed"], 3, s])
        c, c_skip = _metric(evaluation.cvr, group)
        j, j_skip = _metric(evaluation.jaccard, group)
        p_v, p_b = evaluation.density(group, catalog)
        rows.append({
            "segment": s, "n_realizations": len(group),
            "n_items": float(np.mean([rs.n_items() for rs in group])),
            "n_categories": float(np.mean([rs.n_categories() for rs in group])),
            "cvr": c, "cvr_skipped": c_skip, "jaccard": j, "jaccard_skipped": j_skip,
            "density_v": p_v, "density_b": p_b,
        })
    wd.write("eval.jsonl", _json_lines(rows))
    return rows


def run_nulltest(wd, cfg, workers=1):
    rows = _read_json_lines(wd.require("eval.jsonl", "eval"))
    catalog = _catalog(wd, cfg)
    out = []
    for row in rows:
        s = row["segment"]
        seed = int(np.random.SeedSequence([cfg["seed"], 4, s]).generate_state(1)[0])
        res = evaluation.null_trials(row["density_v"], row["density_b"], catalog,
                                     cfg["null.trials"], seed, s)
        out.append({"segment": s, **res._asdict()})
    wd.write("null.jsonl", _json_lines(out))
    return out


def run_report(wd, cfg, workers=1, fmt="both"):
    rows = _read_json_lines(wd.require("eval.jsonl", "eval"))
    nulls = {n["segment"]: n for n in _read_json_lines(wd.require("null.jsonl", "nulltest"))}
    table = []
    for row in rows:
        null = nulls.get(row["segment"])
        if null is None:
            raise MissingInput(f"null.jsonl has no entry for segment {row['segment']} (rerun `nulltest`)")
        table.append(evaluation.SegmentRow(
            segment=row["segment"], n_items=row["n_items"], n_categories=row["n_categories"],
            cvr=row["cvr"], cvr_rn=null["cvr"], jaccard=row["jaccard"], jaccard_rn=null["jaccard"],
            n_realizations=row["n_realizations"], null_trials=null["trials"],
            cvr_skipped=row["cvr_skipped"], jaccard_skipped=row["jaccard_skipped"]))
    rep = evaluation.report(table)
    if fmt in ("json", "both"):
        wd.write("report.json", rep.to_json())
    if fmt in ("text", "both"):
        wd.write("report.txt", rep.to_text())
    return rep


STAGES = {
    "synth": run_synth,
    "ingest": run_ingest,
    "encode": run_encode,
    "train": run_train,
    "sample": run_sample,
    "decode": run_decode,
    "eval": run_eval,
    "nulltest": run_nulltest,
    "report": run_report,
}

PIPELINE = ("ingest", "encode", "train", "sample", "decode", "eval", "nulltest", "report")


def run_stage(name, workdir, cfg, workers=None, **kw):
    """Run one stage and echo its effective config to ``config.<name>.txt``."""
    wd = workdir if isinstance(workdir, Workdir) else Workdir(workdir)
    workers = workers or os.cpu_count() or 1
    result = STAGES[name](wd, cfg, workers=workers, **kw)
    wd.write(f"config.{name}.txt", cfg.dumps())
    return result
