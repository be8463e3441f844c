"""prepare / train / retrieve / evaluate over an output directory.

Layout under ``out``::

    effective_config.yaml
    prepared/<split>.corpus.jsonl      (synthetic sources only)
    prepared/<split>.segmented.jsonl
    prepared/<split>.labels.jsonl
    train/checkpoint_best.zip  train/checkpoint_last.zip  train/training_log.jsonl
    retrieve/<variant>/plans.jsonl  retrieve/<variant>/inputs.jsonl
    evaluate/report.json
"""
from __future__ import annotations

import copy
import json
import logging
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import baselines, checkpoint, synthetic, truncation
from .backends import BackendError, make_embedder, make_encoder
from .corpus import (
    CorpusError,
    DEFAULT_TOKENIZER,
    FallbackSegmenter,
    SegmentedSet,
    load_corpus,
    read_segmented_cache,
    segment_set,
    write_segmented_cache,
)
from .metrics import MetricsAccumulator
from .oracle import LabelError, OracleLabels, build_labels, read_labels, salience_order, write_labels
from .retriever import (
    RetrieverModel,
    TrainingConfig,
    TrainingDivergence,
    em_train,
    evaluate_items,
    infer_scores,
    make_optimizer,
    prepare_items,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_DIVERGENCE, EXIT_MISMATCH = 0, 2, 3, 4
SPLITS = ("train", "validation", "test")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "out": "edurank-run",
    "data": {"train": None, "validation": None, "test": None, "synthetic": None},
    "segmenter": FallbackSegmenter.segmenter_id,
    "embedder": "hash-emb-256",
    "encoder": "hash-64",
    "chunk_size": 1024,
    "labels": {"k_q": 10, "k_f": None, "aggregation": "mean"},
    "model": {"d_h": None, "residual": True, "layer_norm": True},
    "training": {
        "lam": 1.0, "k": 10, "learning_rate": 3e-5, "batch_size": 16, "epochs": 10,
        "pair_samples_per_set": 64, "eval_k": 10, "train_backend": False, "weight_decay": 0.0,
    },
    "few_shot": None,
    "truncation": {
        "budget": 4096, "variant": "full", "separator": truncation.DEFAULT_SEPARATOR,
        "scope": "global", "split": "test", "summarizer_command": None,
    },
    "evaluate": {"split": "test", "precision_ks": [10, 20, 50, 100], "ndcg_ks": [1, 3, 5]},
}

# Planted benchmark with the settings the acceptance suite trains on.
SYNTHETIC_BENCHMARK: dict[str, Any] = {
    "data": {"synthetic": {"train": 64, "validation": 16, "test": 16, "seed": 1,
                           "n_docs": 5, "edus_per_doc": 30}},
    "labels": {"k_q": 10, "k_f": 10},
    "training": {"learning_rate": 2e-3, "batch_size": 4, "epochs": 100, "k": 10, "weight_decay": 0.1},
}


class PipelineError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise PipelineError(EXIT_INPUT, f"config: cannot read {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise PipelineError(EXIT_INPUT, f"config: invalid YAML in {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise PipelineError(EXIT_INPUT, "config: top level must be a mapping")
        unknown = set(loaded) - set(DEFAULT_CONFIG)
        if unknown:
            raise PipelineError(EXIT_INPUT, f"config: unknown keys {sorted(unknown)}")
        cfg = deep_merge(cfg, loaded)
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return cfg


@dataclass
class Run:
    """Resolved config plus the components it names."""

    cfg: dict
    out: Path

    def __post_init__(self):
        try:
            self.encoder = make_encoder(self.cfg["encoder"])
        except BackendError as exc:
            raise PipelineError(EXIT_INPUT, f"encoder backend: {exc}") from exc
        except ImportError as exc:  # pragma: no cover - optional deps
            raise PipelineError(EXIT_INPUT, f"encoder backend: {exc}") from exc
        if self.cfg["segmenter"] != FallbackSegmenter.segmenter_id:
            raise PipelineError(EXIT_INPUT, f"segmenter: unknown segmenter {self.cfg['segmenter']!r}")
        self.segmenter = FallbackSegmenter()
        self.tokenizer = getattr(self.encoder, "tokenizer", DEFAULT_TOKENIZER)

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    @property
    def chunk_size(self) -> int:
        return int(self.cfg["chunk_size"])

    def embedder(self):
        try:
            return make_embedder(self.cfg["embedder"])
        except (BackendError, ImportError) as exc:
            raise PipelineError(EXIT_INPUT, f"embedder: {exc}") from exc

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def training_config(self) -> TrainingConfig:
        t = self.cfg["training"]
        return TrainingConfig(
            lam=float(t["lam"]), k=int(t["k"]), k_q=int(self.cfg["labels"]["k_q"]),
            k_f=self.cfg["labels"]["k_f"], learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]), epochs=int(t["epochs"]),
            pair_samples_per_set=t["pair_samples_per_set"], seed=self.seed,
            train_backend=bool(t["train_backend"]), eval_k=int(t["eval_k"]),
            weight_decay=float(t["weight_decay"]),
        )

    def new_model(self) -> RetrieverModel:
        m = self.cfg["model"]
        return RetrieverModel(
            self.encoder.dim, m["d_h"], k=int(self.cfg["training"]["k"]), seed=self.seed,
            residual=bool(m["residual"]), layer_norm=bool(m["layer_norm"]),
        )

    def fingerprint(self) -> dict:
        d_h = self.cfg["model"]["d_h"]
        return {"d": self.encoder.dim, "d_h": self.encoder.dim if d_h is None else int(d_h),
                "c": self.chunk_size, "backend_id": self.encoder.backend_id}


def start(cfg: dict) -> Run:
    run = Run(cfg, Path(cfg["out"]))
    run.out.mkdir(parents=True, exist_ok=True)
    with open(run.path("effective_config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return run


# --------------------------------------------------------------------------
# prepare


def _synthetic_splits(synth: dict, run: Run) -> dict[str, list]:
    kwargs = {k: synth[k] for k in ("n_docs", "edus_per_doc", "aspects_per_set", "junk_per_doc") if k in synth}
    vocab_kwargs = {k: synth[k] for k in ("n_aspects", "n_cues", "n_filler") if k in synth}
    base_seed = int(synth.get("seed", run.seed))
    encoder = run.encoder if isinstance(run.encoder, synthetic.HashTokenEncoder) else None
    vocab = synthetic.build_vocabulary(encoder=encoder, **vocab_kwargs)
    out = {}
    for offset, split in enumerate(SPLITS):
        count = int(synth.get(split) or 0)
        if count:
            out[split] = synthetic.make_benchmark(count, seed=base_seed + offset, prefix=f"syn-{split}", vocab=vocab, **kwargs)
    return out


def _write_corpus(path: Path, sets) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sets:
            rec = {"id": s.set_id, "docs": [d.raw_text for d in s.documents], "summary": s.reference_summary}
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def cmd_prepare(cfg: dict) -> dict:
    run = start(cfg)
    data = cfg["data"]
    embedder = run.embedder()
    # read and validate every source before writing anything
    raw: dict[str, list] = {}
    if data.get("synthetic"):
        raw = _synthetic_splits(data["synthetic"], run)
    for split in SPLITS:
        src = data.get(split)
        if src:
            try:
                raw[split] = list(load_corpus(src, tokenizer=run.tokenizer, id_prefix=split))
            except FileNotFoundError as exc:
                raise PipelineError(EXIT_INPUT, f"corpus: {exc}") from exc
            except CorpusError as exc:
                raise PipelineError(EXIT_INPUT, f"corpus {src}: {exc}") from exc
    if not raw:
        raise PipelineError(EXIT_INPUT, "corpus: no data sources configured")
    prepared: dict[str, tuple[list[SegmentedSet], list[OracleLabels]]] = {}
    lab = cfg["labels"]
    for split, sets in raw.items():
        segs = sorted((segment_set(s, run.segmenter, run.chunk_size) for s in sets), key=lambda s: s.set_id)
        try:
            labels = [build_labels(s, embedder, int(lab["k_q"]), lab["k_f"], lab["aggregation"]) for s in segs]
        except (LabelError, ValueError) as exc:
            raise PipelineError(EXIT_INPUT, f"labels ({split}): {exc}") from exc
        prepared[split] = (segs, labels)
    run.path("prepared").mkdir(exist_ok=True)
    counts = {}
    for split, (segs, labels) in prepared.items():
        if data.get("synthetic"):
            _write_corpus(run.path("prepared", f"{split}.corpus.jsonl"), [s.base for s in segs])
        write_segmented_cache(run.path("prepared", f"{split}.segmented.jsonl"), segs, run.tokenizer.tokenizer_id)
        write_labels(run.path("prepared", f"{split}.labels.jsonl"), labels)
        counts[split] = len(segs)
    return {"sets": counts}


def load_split(run: Run, split: str) -> tuple[list[SegmentedSet], list[OracleLabels]] | None:
    seg_path = run.path("prepared", f"{split}.segmented.jsonl")
    lab_path = run.path("prepared", f"{split}.labels.jsonl")
    if not seg_path.exists():
        return None
    try:
        segs = read_segmented_cache(seg_path, run.tokenizer, run.chunk_size)
        labels = read_labels(lab_path) if lab_path.exists() else []
    except (CorpusError, OSError, KeyError, json.JSONDecodeError) as exc:
        raise PipelineError(EXIT_INPUT, f"prepared {split}: {exc}") from exc
    if labels and [l.set_id for l in labels] != [s.set_id for s in segs]:
        raise PipelineError(EXIT_INPUT, f"prepared {split}: labels and segmented cache disagree")
    return segs, labels


def _require_split(run: Run, split: str, need_labels: bool = True):
    got = load_split(run, split)
    if got is None:
        raise PipelineError(EXIT_INPUT, f"prepared {split} split not found under {run.path('prepared')}; run prepare first")
    if need_labels and not got[1]:
        raise PipelineError(EXIT_INPUT, f"prepared {split} split has no labels")
    return got


def few_shot_subset(n: int, fraction: float, seed: int) -> list[int]:
    """Seeded subsample of ``max(1, round(fraction * n))`` indices, in original order."""
    if not 0 < fraction <= 1:
        raise PipelineError(EXIT_INPUT, f"few-shot fraction must lie in (0, 1], got {fraction}")
    size = max(1, int(round(fraction * n)))
    return sorted(int(i) for i in np.random.default_rng(seed).choice(n, size=size, replace=False))


# --------------------------------------------------------------------------
# train


def cmd_train(cfg: dict, resume: str | Path | None = None) -> dict:
    run = start(cfg)
    tcfg = run.training_config()
    segs, labels = _require_split(run, "train")
    if cfg.get("few_shot"):
        keep = few_shot_subset(len(segs), float(cfg["few_shot"]), run.seed)
        segs, labels = [segs[i] for i in keep], [labels[i] for i in keep]
    items = prepare_items(zip(segs, labels), run.encoder, run.chunk_size)
    val = load_split(run, "validation")
    if val is not None and val[1]:
        val_items = prepare_items(zip(*val), run.encoder, run.chunk_size)
    else:
        logger.warning("no validation split; selecting checkpoints on the training sets")
        val_items = items

    tdir = run.path("train")
    tdir.mkdir(exist_ok=True)
    best_path, last_path, log_path = tdir / "checkpoint_best.zip", tdir / "checkpoint_last.zip", tdir / "training_log.jsonl"
    fp = run.fingerprint()

    if resume is not None:
        ckpt = _load_checked(run, resume)
        model = checkpoint.restore_model(ckpt, run.seed)
        opt = make_optimizer(model, tcfg)
        checkpoint.restore_optimizer(opt, model, ckpt)
        start_epoch = ckpt.epoch
        best = float(ckpt.meta["extra"].get("best_ndcg_at_3", -1.0))
        log_mode = "a"
    else:
        model = run.new_model()
        opt = make_optimizer(model, tcfg)
        start_epoch = 0
        best = evaluate_items(model, val_items, tcfg.eval_k)["ndcg_at_3"]
        extra = {"best_ndcg_at_3": best, "selected_epoch": 0}
        checkpoint.save_checkpoint(best_path, model, run.chunk_size, fp["backend_id"], 0, None, extra)
        checkpoint.save_checkpoint(last_path, model, run.chunk_size, fp["backend_id"], 0, opt, extra)
        log_mode = "w"

    state = {"best": best}
    with open(log_path, log_mode, encoding="utf-8") as log:
        def on_epoch(record, m, o):
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            if record["ndcg_at_3"] > state["best"]:
                state["best"] = record["ndcg_at_3"]
                checkpoint.save_checkpoint(best_path, m, run.chunk_size, fp["backend_id"], record["epoch"], None,
                                           {"best_ndcg_at_3": state["best"], "selected_epoch": record["epoch"]})
            checkpoint.save_checkpoint(last_path, m, run.chunk_size, fp["backend_id"], record["epoch"], o,
                                       {"best_ndcg_at_3": state["best"]})

        try:
            result = em_train(items, model, tcfg, validation=val_items, optimizer=opt,
                              start_epoch=start_epoch, on_epoch=on_epoch)
        except TrainingDivergence as exc:
            raise PipelineError(EXIT_DIVERGENCE, f"training diverged: {exc}") from exc
    return {"epochs": result.epochs_done, "best_ndcg_at_3": state["best"],
            "last": result.history[-1] if result.history else None}


def _load_checked(run: Run, path: str | Path) -> checkpoint.Checkpoint:
    try:
        ckpt = checkpoint.load_checkpoint(path)
    except checkpoint.CheckpointError as exc:
        raise PipelineError(EXIT_INPUT, f"checkpoint: {exc}") from exc
    try:
        checkpoint.check_fingerprint(ckpt, run.fingerprint())
    except checkpoint.CheckpointMismatch as exc:
        raise PipelineError(EXIT_MISMATCH, str(exc)) from exc
    return ckpt


def _model_for(run: Run, ckpt_path: str | Path | None) -> RetrieverModel:
    path = ckpt_path or run.path("train", "checkpoint_best.zip")
    if not Path(path).exists():
        raise PipelineError(EXIT_INPUT, f"checkpoint: {path} not found; run train first")
    try:
        return checkpoint.restore_model(_load_checked(run, path), run.seed)
    except checkpoint.CheckpointMismatch as exc:
        raise PipelineError(EXIT_MISMATCH, str(exc)) from exc


# --------------------------------------------------------------------------
# retrieve


def _plan(run: Run, seg: SegmentedSet, res, variant: str) -> truncation.TruncationPlan:
    t = run.cfg["truncation"]
    try:
        return truncation.ablation_plan(
            seg, res.doc_relevance, res.edu_salience, int(t["budget"]), variant, run.seed,
            t["separator"], run.tokenizer, t["scope"],
        )
    except truncation.EmptyPlanError as exc:
        raise PipelineError(EXIT_INPUT, f"truncation ({seg.set_id}): {exc}") from exc


def run_summarizer(command: str, inputs: list[truncation.AssembledInput]) -> list[dict]:
    """Feed each assembled input to ``command`` on stdin and collect stdout."""
    argv = shlex.split(command)
    out = []
    for item in inputs:
        proc = subprocess.run(argv, input=item.text, capture_output=True, text=True, check=False)
        if proc.returncode != 0:
            raise PipelineError(EXIT_INPUT, f"summarizer failed on {item.set_id}: {proc.stderr.strip()}")
        out.append({"set_id": item.set_id, "summary": proc.stdout.strip()})
    return out


def cmd_retrieve(cfg: dict, ckpt_path: str | Path | None = None) -> dict:
    run = start(cfg)
    t = cfg["truncation"]
    variant = t["variant"]
    if variant not in truncation.VARIANTS:
        raise PipelineError(EXIT_INPUT, f"variant must be one of {truncation.VARIANTS}")
    if t["budget"] is None or int(t["budget"]) < 1:
        raise PipelineError(EXIT_INPUT, "truncation budget must be a positive integer")
    model = _model_for(run, ckpt_path)
    segs, _ = _require_split(run, t["split"], need_labels=False)
    plans, inputs = [], []
    for seg in segs:
        res = infer_scores(model, seg, run.encoder, run.chunk_size)
        plan = _plan(run, seg, res, variant)
        plans.append(plan)
        inputs.append(truncation.assemble_input(plan, seg))
    rdir = run.path("retrieve", variant)
    rdir.mkdir(parents=True, exist_ok=True)
    truncation.write_plans(rdir / "plans.jsonl", plans)
    truncation.write_inputs(rdir / "inputs.jsonl", inputs)
    if t.get("summarizer_command"):
        summaries = run_summarizer(t["summarizer_command"], sorted(inputs, key=lambda a: a.set_id))
        with open(rdir / "summaries.jsonl", "w", encoding="utf-8") as fh:
            for row in summaries:
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    return {"variant": variant, "sets": len(plans), "max_used_tokens": max((p.used_tokens for p in plans), default=0)}


# --------------------------------------------------------------------------
# evaluate


def _accumulator(run: Run) -> MetricsAccumulator:
    ev = run.cfg["evaluate"]
    return MetricsAccumulator(ev["precision_ks"], ev["ndcg_ks"])


def truncation_stats(plan: truncation.TruncationPlan, labels: OracleLabels) -> dict:
    """How much of the oracle's salient and filter-worthy material a plan keeps."""
    kept = [k for ks in plan.kept_tokens for k in ks]
    lengths = [n for ns in plan.edu_lengths for n in ns]
    full = [k == n for k, n in zip(kept, lengths)]
    return {
        "used_tokens": plan.used_tokens,
        "query_edus_kept": sum(full[i] for i in labels.query_set) / max(labels.k_q, 1),
        "filter_edus_dropped": sum(kept[i] == 0 for i in labels.filter_set) / max(labels.k_f, 1),
    }


def cmd_evaluate(cfg: dict, ckpt_path: str | Path | None = None) -> dict:
    run = start(cfg)
    model = _model_for(run, ckpt_path)
    split = cfg["evaluate"]["split"]
    segs, labels = _require_split(run, split)
    methods = {name: _accumulator(run) for name in ("model", "bm25+rake", "bm25+gold")}
    ablations: dict[str, list[dict]] = {v: [] for v in truncation.VARIANTS}
    for seg, lab in zip(segs, labels):
        oracle_edus = lab.edu_order()
        res = infer_scores(model, seg, run.encoder, run.chunk_size)
        scored = {
            "model": (res.edu_salience, res.doc_relevance),
            "bm25+rake": (lambda b: (b.edu_scores, b.doc_scores))(baselines.rake_baseline(seg)),
            "bm25+gold": (lambda b: (b.edu_scores, b.doc_scores))(baselines.gold_baseline(seg, lab)),
        }
        for name, (edu_scores, doc_scores) in scored.items():
            acc = methods[name]
            acc.add_edu_ranking([int(i) for i in salience_order(edu_scores)], oracle_edus)
            acc.add_doc_ranking([int(i) for i in salience_order(doc_scores)], list(lab.doc_ranking))
        for variant in truncation.VARIANTS:
            ablations[variant].append(truncation_stats(_plan(run, seg, res, variant), lab))
    report = {
        "split": split,
        "num_sets": len(segs),
        "budget": int(cfg["truncation"]["budget"]),
        "methods": {name: acc.report() for name, acc in methods.items()},
        "ablations": {
            v: {key: float(np.mean([r[key] for r in rows])) for key in rows[0]} if rows else {}
            for v, rows in ablations.items()
        },
    }
    run.path("evaluate").mkdir(exist_ok=True)
    with open(run.path("evaluate", "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return report
