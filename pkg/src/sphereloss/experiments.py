"""Experiment runner: JSON config in, deterministic CSV/JSON artifacts out.

Each experiment kind reads its section of the config, runs with the given
seed, and writes artifacts into the output directory.  Every CSV starts with
a ``# config_sha256=... seed=...`` comment; JSON artifacts carry the same
information under a ``"_provenance"`` key.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import read_csv, write_csv, write_json
from .arch import ArchSpec, build_default_arch, count_flops_params, instantiate_toy
from .datagen import (
    SphereDatasetSpec,
    gen_glyph_images,
    gen_pair_protocol,
    gen_sphere_dataset,
)
from .distill import DistillSpec
from .exceptions import ConfigParseError, DuplicateRun, NoRunsFound
from .losses import (
    MarginLossSpec,
    logit_curve_table,
    overlap_map,
    write_logit_curve_csv,
)
from .nn import LossStage, Network, TrainConfig, accuracy, dense_embedding_net, train
from .rng import CounterRNG
from .verification import (
    ScoredPairs,
    rank1_identification,
    roc_table,
    tar_at_far,
    tenfold_verification,
    write_roc_csv,
)

log = logging.getLogger(__name__)

KINDS = ("logit-curves", "overlap-map", "flops", "train", "margin-sweep", "two-stage", "distill", "eval")
DEFAULT_MARGINS = (0.35, 0.40, 0.45, 0.50)
REPORT_COLUMNS = (
    "run_id", "kind", "variant", "m", "s", "seed", "steps", "final_train_acc",
    "verification_acc", "diverged", "divergence_step",
)

DEFAULT_CURVE_SPECS = (
    {"variant": "NSoftmax", "s": 64.0},
    {"variant": "CosFace", "s": 64.0, "m": 0.35},
    {"variant": "ArcFace", "s": 64.0, "m": 0.5},
    {"variant": "LiArcFace", "s": 64.0, "m": 0.4},
)
DEFAULT_DATA = {"classes": 50, "dim": 8, "samples_per_class": 40, "noise_sigma": 0.1}
DEFAULT_MODEL = {"type": "dense", "hidden": 64, "embedding_dim": 8}
DEFAULT_TRAIN = {
    "lr_schedule": [[0, 0.1]],
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "wd_mult": {"embedding": 10.0},
    "batch_size": 128,
    "max_steps": 2000,
}
DEFAULT_EVAL = {"every": 200, "n_pos": 300, "n_neg": 300, "folds": 10}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    out_dir: Path
    body: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigParseError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.seed is None:
            raise ConfigParseError("a seed is mandatory (config 'seed' or --seed)")
        self.seed = int(self.seed)
        self.out_dir = Path(self.out_dir)

    @classmethod
    def load(cls, path=None, kind: str | None = None, out_dir=None, seed=None) -> "ExperimentConfig":
        """Read a JSON config; ``kind``/``out_dir``/``seed`` arguments override it."""
        body: dict = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigParseError(f"config file {path} does not exist")
            try:
                body = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigParseError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(body, dict):
                raise ConfigParseError(f"{path}: top level must be an object")
        file_kind = body.pop("kind", None)
        if kind and file_kind and kind != file_kind:
            raise ConfigParseError(f"config declares kind {file_kind!r} but {kind!r} was requested")
        kind = kind or file_kind
        file_seed = body.pop("seed", None)
        file_out = body.pop("out_dir", None)
        out = out_dir or file_out
        if out is None:
            raise ConfigParseError("no output directory (config 'out_dir', --out or SPHERELOSS_OUT)")
        return cls(kind=kind, seed=seed if seed is not None else file_seed, out_dir=Path(out), body=body)

    def canonical(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, **self.body}

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def comment(self) -> str:
        return f"config_sha256={self.config_hash()} seed={self.seed}"

    def provenance(self) -> dict:
        return {"config_sha256": self.config_hash(), "seed": self.seed, "kind": self.kind}


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.=_-]+", "_", text).strip("_")


def _loss(d) -> MarginLossSpec:
    try:
        return MarginLossSpec.from_dict(d)
    except TypeError as exc:
        raise ConfigParseError(f"bad loss spec {d}: {exc}") from exc


def _merged(defaults: dict, override: dict | None) -> dict:
    out = dict(defaults)
    out.update(override or {})
    return out


# -- analysis experiments --------------------------------------------------


def _run_logit_curves(cfg: ExperimentConfig) -> list:
    n_points = int(cfg.body.get("n_points", 1001))
    paths = []
    for i, d in enumerate(cfg.body.get("specs", DEFAULT_CURVE_SPECS)):
        spec = _loss(d)
        table = logit_curve_table(spec, n_points)
        path = cfg.out_dir / f"logit_curve_{i:02d}_{_slug(spec.label)}.csv"
        paths.append(write_logit_curve_csv(path, table, comment=cfg.comment))
    return paths


def _run_overlap_map(cfg: ExperimentConfig) -> list:
    grid_n = int(cfg.body.get("grid_n", 200))
    specs = cfg.body.get("specs", [{"variant": "ArcFace", "s": 64.0, "m": 0.5}, {"variant": "LiArcFace", "s": 64.0, "m": 0.4}])
    paths, fractions = [], []
    for i, d in enumerate(specs):
        spec = _loss(d)
        result = overlap_map(spec, grid_n)
        stem = f"overlap_{i:02d}_{_slug(spec.label)}"
        paths.append(result.write_csv(cfg.out_dir / f"{stem}.csv", comment=cfg.comment))
        paths.append(write_json(cfg.out_dir / f"{stem}.json", {
            "loss": spec.to_dict(), "grid_n": grid_n, "overlap_fraction": result.overlap_fraction,
            "corner_in_overlap": result.contains(np.pi, np.pi), "_provenance": cfg.provenance(),
        }))
        fractions.append({"label": spec.label, "overlap_fraction": result.overlap_fraction})
    paths.append(write_json(cfg.out_dir / "overlap_summary.json", {"maps": fractions, "_provenance": cfg.provenance()}))
    return paths


def _arch_from(cfg: ExperimentConfig) -> ArchSpec:
    ref = cfg.body.get("arch")
    if ref is None:
        return build_default_arch()
    if isinstance(ref, dict):
        return ArchSpec.from_dict(ref)
    path = Path(ref)
    if not path.is_file():
        raise ConfigParseError(f"arch file {path} does not exist")
    return ArchSpec.load(path)


def _run_flops(cfg: ExperimentConfig) -> list:
    arch = _arch_from(cfg)
    report = count_flops_params(arch)
    out = cfg.out_dir
    return [
        report.write_csv(out / "flops.csv", comment=cfg.comment),
        report.write_json(out / "flops.json", embedding_dim=arch.embedding_dim, _provenance=cfg.provenance()),
        write_json(out / "arch.json", arch.to_dict()),
    ]


# -- training experiments --------------------------------------------------


@dataclass
class _Task:
    X: np.ndarray
    y: np.ndarray
    X_eval: np.ndarray
    y_eval: np.ndarray
    n_classes: int
    in_shape: tuple


def _build_task(cfg: ExperimentConfig, data: dict) -> _Task:
    data = dict(data)
    kind = data.pop("kind", "sphere")
    if kind == "sphere":
        spec = SphereDatasetSpec.from_dict({**_merged(DEFAULT_DATA, data), "seed": cfg.seed})
        X, y = gen_sphere_dataset(spec)
        Xe, ye = gen_sphere_dataset(spec, stream="heldout")
        return _Task(X, y, Xe, ye, spec.classes, (spec.dim,))
    if kind == "glyph":
        g = {"classes": 10, "size": 28, "samples_per_class": 20, "noise_sigma": 0.3, **data}
        X, y = gen_glyph_images(g["classes"], g["size"], g["samples_per_class"], g["noise_sigma"], cfg.seed)
        # held-out images reuse the templates with fresh noise
        Xe, ye = _renoise_glyphs(g, cfg.seed)
        return _Task(X, y, Xe, ye, g["classes"], X.shape[1:])
    raise ConfigParseError(f"unknown data kind {kind!r}")


def _renoise_glyphs(g: dict, seed: int):
    from .datagen import glyph_templates

    templates = glyph_templates(g["classes"], g["size"], seed)
    root = CounterRNG(seed).spawn("glyph-heldout")
    size, n = g["size"], g["samples_per_class"]
    imgs = np.empty((g["classes"] * n, 1, size, size))
    labels = np.repeat(np.arange(g["classes"]), n)
    for c in range(g["classes"]):
        for j in range(n):
            imgs[c * n + j, 0] = np.clip(templates[c] + g["noise_sigma"] * root.spawn(c, j).normal((size, size)), 0, 1)
    return imgs, labels


def _build_model(cfg: ExperimentConfig, model: dict, task: _Task, seed_offset: str = "model") -> Network:
    model = _merged(DEFAULT_MODEL, model)
    seed = CounterRNG(cfg.seed).spawn(seed_offset).key
    if model["type"] == "dense":
        if len(task.in_shape) != 1:
            raise ConfigParseError("dense model needs vector inputs")
        return dense_embedding_net(task.in_shape[0], int(model["hidden"]), int(model["embedding_dim"]), task.n_classes, seed=seed)
    if model["type"] == "toy":
        arch = build_default_arch() if "arch" not in model else ArchSpec.load(model["arch"])
        backbone = instantiate_toy(arch, float(model.get("width_mult", 0.125)), int(model.get("input_size", task.in_shape[-1])),
                                   batchnorm=bool(model.get("batchnorm", True)), seed=seed, in_channels=task.in_shape[0])
        emb = max(1, int(arch.embedding_dim * float(model.get("width_mult", 0.125))))
        return Network(backbone, emb, task.n_classes, seed=seed)
    raise ConfigParseError(f"unknown model type {model['type']!r}")


def _train_config(cfg: ExperimentConfig, stages: list, overrides: dict | None = None) -> TrainConfig:
    t = _merged(DEFAULT_TRAIN, cfg.body.get("train"))
    t.update(overrides or {})
    loss_stages, start = [], 0
    for spec, steps in stages:
        loss_stages.append(LossStage(spec, start, start + steps))
        start += steps
    return TrainConfig(
        lr_schedule=[tuple(p) for p in t["lr_schedule"]],
        momentum=float(t["momentum"]),
        weight_decay=float(t["weight_decay"]),
        wd_mult={k: float(v) for k, v in t["wd_mult"].items()},
        batch_size=int(t["batch_size"]),
        max_steps=start,
        seed=cfg.seed,
        loss_stages=loss_stages,
    )


def _verifier(cfg: ExperimentConfig, task: _Task):
    ev = _merged(DEFAULT_EVAL, cfg.body.get("eval"))
    protocol = gen_pair_protocol(task.y_eval, int(ev["n_pos"]), int(ev["n_neg"]), int(ev["folds"]), cfg.seed)

    def evaluate(step, model):
        return tenfold_verification(ScoredPairs.from_embeddings(model.embed(task.X_eval), protocol))[0]

    return int(ev["every"]), evaluate


def _finish_run(cfg: ExperimentConfig, out: Path, model: Network, task: _Task, history, spec: MarginLossSpec,
                evaluate, extra: dict | None = None) -> dict:
    final_acc = accuracy(model, task.X, task.y, spec) if not history.diverged else None
    ver = evaluate(len(history), model) if not history.diverged else None
    summary = history.summary(
        run_id=f"{cfg.kind}-{_slug(spec.label)}-s{spec.s}-seed{cfg.seed}",
        kind=cfg.kind, variant=spec.variant, m=spec.m, s=spec.s, seed=cfg.seed,
        loss=spec.to_dict(), final_train_acc=final_acc, verification_acc=ver,
        stage_boundaries={str(k): v for k, v in history.stage_boundaries.items()},
        _provenance=cfg.provenance(), **(extra or {}),
    )
    history.write_csv(out / "history.csv", comment=cfg.comment)
    write_csv(out / "verification.csv", ["step", "verification_acc"], history.evals, comment=cfg.comment)
    write_json(out / "summary.json", summary)
    return summary


def _train_once(cfg: ExperimentConfig, out: Path, stages: list, distill: DistillSpec | None = None, teacher=None):
    task = _build_task(cfg, cfg.body.get("data", {}))
    model = _build_model(cfg, cfg.body.get("model", {}), task)
    tc = _train_config(cfg, stages)
    every, evaluate = _verifier(cfg, task)
    boundary_acc = {}

    history = train(model, (task.X, task.y), tc, teacher=teacher(task) if teacher else None, distill=distill,
                    eval_every=every, eval_fn=evaluate,
                    on_stage_start=lambda step, m: boundary_acc.__setitem__(str(step), accuracy(m, task.X, task.y)))
    extra = {"stage_start_train_acc": boundary_acc}
    if distill is not None:
        extra["distill"] = distill.to_dict()
    summary = _finish_run(cfg, out, model, task, history, stages[-1][0], evaluate, extra)
    return summary


def _run_train(cfg: ExperimentConfig) -> list:
    spec = _loss(cfg.body.get("loss", {"variant": "LiArcFace", "s": 64.0, "m": 0.4}))
    steps = int(_merged(DEFAULT_TRAIN, cfg.body.get("train"))["max_steps"])
    _train_once(cfg, cfg.out_dir, [(spec, steps)])
    return _listing(cfg.out_dir)


def _run_two_stage(cfg: ExperimentConfig) -> list:
    stages = cfg.body.get("stages", [
        {"loss": {"variant": "NSoftmax", "s": 64.0}, "steps": 500},
        {"loss": {"variant": "ArcFace", "s": 64.0, "m": 0.5}, "steps": 1500},
    ])
    _train_once(cfg, cfg.out_dir, [(_loss(st["loss"]), int(st["steps"])) for st in stages])
    return _listing(cfg.out_dir)


def _run_margin_sweep(cfg: ExperimentConfig) -> list:
    base = dict(cfg.body.get("loss", {"variant": "LiArcFace", "s": 64.0}))
    steps = int(_merged(DEFAULT_TRAIN, cfg.body.get("train"))["max_steps"])
    for m in cfg.body.get("margins", DEFAULT_MARGINS):
        spec = _loss({**base, "m": float(m)})
        _train_once(cfg, cfg.out_dir / f"run_m{float(m):.2f}", [(spec, steps)])
    emit_reports(cfg.out_dir, comment=cfg.comment)
    return _listing(cfg.out_dir)


def _run_distill(cfg: ExperimentConfig) -> list:
    spec = _loss(cfg.body.get("loss", {"variant": "LiArcFace", "s": 64.0, "m": 0.4}))
    steps = int(_merged(DEFAULT_TRAIN, cfg.body.get("train"))["max_steps"])
    dspec = DistillSpec.from_dict(cfg.body.get("distill", {"mode": "CosineGap", "weight": 1.0}))
    tconf = {"hidden": 256, "steps": steps, **cfg.body.get("teacher", {})}

    def teacher_for(task: _Task):
        student_model = _merged(DEFAULT_MODEL, cfg.body.get("model"))
        tmodel = _build_model(cfg, {**student_model, "hidden": int(tconf["hidden"])}, task, seed_offset="teacher")
        th = train(tmodel, (task.X, task.y), _train_config(cfg, [(spec, int(tconf["steps"]))]))
        th.write_csv(cfg.out_dir / "teacher_history.csv", comment=cfg.comment)
        write_json(cfg.out_dir / "teacher_summary.json", th.summary(
            final_train_acc=accuracy(tmodel, task.X, task.y) if not th.diverged else None, _provenance=cfg.provenance()))
        return lambda xb: tmodel.embed(xb)

    _train_once(cfg, cfg.out_dir, [(spec, steps)], distill=dspec, teacher=teacher_for)
    return _listing(cfg.out_dir)


# -- evaluation ------------------------------------------------------------


def _run_eval(cfg: ExperimentConfig) -> list:
    out = cfg.out_dir
    body = cfg.body
    fars = [float(f) for f in body.get("fars", [1e-1, 1e-2, 1e-3])]
    paths = []
    if "scores_csv" in body:
        header, rows = read_csv(body["scores_csv"])
        col = {name: i for i, name in enumerate(header)}
        pairs = ScoredPairs(
            [float(r[col["score"]]) for r in rows],
            [r[col["same"]] in ("1", "true", "True") for r in rows],
            [int(r[col["fold"]]) for r in rows],
        )
        feats = labels = None
    else:
        spec = SphereDatasetSpec.from_dict({**_merged(DEFAULT_DATA, body.get("data")), "seed": cfg.seed})
        feats, labels = gen_sphere_dataset(spec, stream="heldout")
        ev = _merged(DEFAULT_EVAL, body.get("pairs"))
        protocol = gen_pair_protocol(labels, int(ev["n_pos"]), int(ev["n_neg"]), int(ev["folds"]), cfg.seed)
        protocol.write_csv(out / "pairs.csv", comment=cfg.comment)
        pairs = ScoredPairs.from_embeddings(feats, protocol)

    acc, thresholds = tenfold_verification(pairs)
    paths.append(write_json(out / "verification.json", {"accuracy": acc, "thresholds": thresholds, "_provenance": cfg.provenance()}))
    paths.append(write_json(out / "tar_at_far.json", {
        "rows": [{"far": far, "tar": tar_at_far(pairs.scores, pairs.labels, far)} for far in fars],
        "_provenance": cfg.provenance(),
    }))
    paths.append(write_roc_csv(out / "roc.csv", roc_table(pairs.scores, pairs.labels), comment=cfg.comment))

    if feats is not None:
        ident = body.get("identification", {})
        n_distractors = int(ident.get("distractors", 1000))
        first = np.unique(labels, return_index=True)[1]
        probe_mask = np.ones(len(labels), dtype=bool)
        probe_mask[first] = False
        distractors = CounterRNG(cfg.seed).spawn("distractors").normal((n_distractors, feats.shape[1]))
        rate = rank1_identification(feats[probe_mask], labels[probe_mask], feats[first], labels[first],
                                    distractors, np.full(n_distractors, -1))
        paths.append(write_json(out / "rank1.json", {"rank1": rate, "distractors": n_distractors, "_provenance": cfg.provenance()}))
    return paths


# -- reports ---------------------------------------------------------------


def emit_reports(run_dir, out_path=None, comment: str | None = None) -> Path:
    """Merge every ``summary.json`` under ``run_dir`` into ``comparison.csv``.

    Rows are sorted by ``(m, variant, s, seed)``.

    Raises:
        NoRunsFound: if no summaries exist.
        DuplicateRun: if two summaries share a run id.
    """
    run_dir = Path(run_dir)
    files = sorted(run_dir.rglob("summary.json"))
    if not files:
        raise NoRunsFound(f"no summary.json under {run_dir}")
    seen, rows = {}, []
    for path in files:
        s = json.loads(path.read_text())
        run_id = s.get("run_id")
        if run_id in seen:
            raise DuplicateRun(f"run id {run_id!r} appears in {seen[run_id]} and {path}")
        seen[run_id] = path
        rows.append(s)
    rows.sort(key=lambda s: (float(s.get("m") or 0.0), str(s.get("variant")), float(s.get("s") or 0.0), int(s.get("seed") or 0)))
    table = [tuple("" if s.get(c) is None else s.get(c) for c in REPORT_COLUMNS) for s in rows]
    return write_csv(out_path or run_dir / "comparison.csv", REPORT_COLUMNS, table, comment=comment)


def _listing(out: Path) -> list:
    return sorted(p for p in Path(out).rglob("*") if p.is_file())


RUNNERS = {
    "logit-curves": _run_logit_curves,
    "overlap-map": _run_overlap_map,
    "flops": _run_flops,
    "train": _run_train,
    "margin-sweep": _run_margin_sweep,
    "two-stage": _run_two_stage,
    "distill": _run_distill,
    "eval": _run_eval,
}


def run_experiment(cfg: ExperimentConfig) -> list:
    """Run one experiment and return the artifact paths it wrote."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    log.info("running %s (seed %d) into %s", cfg.kind, cfg.seed, cfg.out_dir)
    return RUNNERS[cfg.kind](cfg)
