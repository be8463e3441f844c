"""Acceptance criteria 1-10. Each test records one PASS/FAIL line, printed at the end of the run."""
import itertools
import json
import math
import time
from collections import Counter
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch

from edurank import pipeline
from edurank.baselines import Bm25Index, bm25_rank, bm25_score
from edurank.cli import main
from edurank.encoder import DTYPE
from edurank.metrics import mrr_first, mrr_second, ndcg_at_k, precision_at_k
from edurank.retriever import (
    FULL_PAIRS,
    RetrieverModel,
    TrainingConfig,
    em_train,
    evaluate_items,
    filtering_loss,
    prepare_items,
    ranking_loss,
    total_loss,
)
from edurank.truncation import (
    VARIANTS,
    EmptyPlanError,
    ablation_plan,
    assemble_input,
    seeded_permutation,
)

from conftest import edu_ids_of, labels_from_scores, random_features, set_with_lengths

ROOT = Path(__file__).resolve().parents[1]
BENCH_CONFIG = ROOT / "configs" / "synthetic.yaml"


# ---------------------------------------------------------------- 1


def test_criterion_1_normalization(record_acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(0)
    models = [RetrieverModel(8, 5, k=int(k), seed=s) for s, k in zip(range(10), rng.integers(1, 8, 10))]
    for inst in range(1000):
        n = int(rng.integers(1, 6))
        feats = random_features(rng, n, [int(rng.integers(1, 5)) for _ in range(n)], d=8, max_len=6)
        with torch.no_grad():
            feats.tokens.mul_(float(rng.choice([0.1, 1.0, 10.0])))
            out = models[inst % 10](feats)
        span_sums = torch.zeros(feats.num_edus, dtype=DTYPE).index_add(0, feats.token_edu, out.span_weights)
        gate_sums = torch.zeros(n, dtype=DTYPE).index_add(0, feats.edu_doc, out.gate_weights)
        col_sums = out.relevance.per_query.sum(dim=0)
        for sums in (span_sums, gate_sums, col_sums):
            worst = max(worst, float((sums - 1).abs().max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30
    record_acceptance(1, ok, f"max |sum-1| = {worst:.2e} over 1000 instances, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def central_difference(f, x: torch.Tensor, direction: torch.Tensor, eps: float = 1e-6) -> float:
    with torch.no_grad():
        base = x.detach().clone()
        x.copy_(base + eps * direction)
        plus = float(f())
        x.copy_(base - eps * direction)
        minus = float(f())
        x.copy_(base)
    return (plus - minus) / (2 * eps)


def gradients(value: torch.Tensor, inputs: list[torch.Tensor]) -> list[torch.Tensor]:
    """Autograd gradients; zeros when ``value`` does not depend on ``inputs`` (e.g. no pairs)."""
    if not value.requires_grad:
        return [torch.zeros_like(x) for x in inputs]
    grads = torch.autograd.grad(value, inputs, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]


def fd_gradient(f, params: list[torch.Tensor], eps: float = 1e-6) -> list[torch.Tensor]:
    """Central differences, one coordinate at a time."""
    out = []
    for p in params:
        g = torch.zeros_like(p)
        flat = g.view(-1)
        for i in range(p.numel()):
            e = torch.zeros_like(p)
            e.view(-1)[i] = 1
            flat[i] = central_difference(f, p, e, eps)
        out.append(g)
    return out


ZERO_GRAD = 1e-10


def vector_rel_err(a: list[torch.Tensor], b: list[torch.Tensor]) -> float | None:
    """Relative error of the flattened gradients; ``None`` when both vanish (constant loss)."""
    va, vb = torch.cat([x.reshape(-1) for x in a]), torch.cat([x.reshape(-1) for x in b])
    scale = max(float(va.norm()), float(vb.norm()))
    if scale < ZERO_GRAD:
        return None
    return float((va - vb).norm() / scale)


def test_criterion_2_gradients(record_acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    gen = torch.Generator().manual_seed(1)
    worst = {"filtering": 0.0, "ranking": 0.0, "total": 0.0, "forward": 0.0}
    constant = 0  # checks whose loss is flat (e.g. n = 1 without the residual), gradient exactly zero

    def track(name, a, b):
        nonlocal constant
        err = vector_rel_err(a, b)
        if err is None:
            constant += 1
        else:
            worst[name] = max(worst[name], err)

    for inst in range(50):
        n = int(rng.integers(1, 5))
        counts = [1] * n
        for _ in range(int(rng.integers(0, 12 - n + 1))):
            counts[int(rng.integers(n))] += 1
        feats = random_features(rng, n, counts, d=5)
        m = feats.num_edus
        k_q = int(rng.integers(1, max(m, 2)))  # leaves the filter term non-empty when m > 1
        labels = labels_from_scores(edu_ids_of(feats), rng.random(m), rng.random(n), k_q, max(m - k_q, 0))
        # alternate the plain block with the residual + layer-norm block
        plain = inst % 2 == 0
        model = RetrieverModel(5, 4, k=int(rng.integers(1, 5)), seed=inst, residual=not plain, layer_norm=not plain)
        lam = float(rng.choice([0.2, 1.0, 2.0]))

        # filtering and ranking losses w.r.t. their score inputs
        for name, x, fn in (
            ("filtering", torch.rand(m, dtype=DTYPE, generator=gen), lambda s: filtering_loss(s, labels, FULL_PAIRS)),
            ("ranking", torch.rand(n, dtype=DTYPE, generator=gen), lambda r: ranking_loss(r, labels, FULL_PAIRS)),
        ):
            x.requires_grad_(True)
            analytic = gradients(fn(x), [x])
            numeric = fd_gradient(lambda: fn(x), [x])
            track(name, analytic, numeric)

        def total():
            out = model(feats)
            return total_loss(ranking_loss(out.relevance.aggregate, labels), filtering_loss(out.salience, labels), lam)

        w_rel = torch.randn(n, dtype=DTYPE, generator=gen)
        w_sal = torch.randn(m, dtype=DTYPE, generator=gen)

        def forward_chain():
            out = model(feats)
            return out.relevance.aggregate @ w_rel + out.salience @ w_sal

        # every trainable parameter plus the token inputs
        params = list(model.parameters()) + [feats.tokens]
        for name, fn in (("total", total), ("forward", forward_chain)):
            feats.tokens.requires_grad_(True)
            analytic = gradients(fn(), params)
            feats.tokens.requires_grad_(False)
            numeric = fd_gradient(fn, params)
            track(name, analytic, numeric)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_acceptance(2, ok, f"max relative error of the gradient vector: {detail} "
                             f"({constant} checks with an exactly flat loss); {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3


def brute_precision(pred, oracle_top, K):
    return float(Fraction(sum(1 for p in pred[:K] if p in oracle_top), K))


def brute_dcg(seq, gains, K):
    total = 0.0
    for pos in range(K):
        total += gains[seq[pos]] / math.log2(pos + 2)
    return total


def brute_ndcg(pred, oracle, K, n):
    K = min(K, n)
    gains = {doc: n - rank for rank, doc in enumerate(oracle)}
    ideal = max(brute_dcg(p, gains, K) for p in itertools.permutations(oracle))
    return brute_dcg(pred, gains, K) / ideal


def brute_rr(pred, target):
    for pos, item in enumerate(pred):
        if item == target:
            return float(Fraction(1, pos + 1))
    return 0.0


def test_criterion_3_metric_oracles(record_acceptance):
    rng = np.random.default_rng(3)
    cases = Counter()
    mismatches = []
    for n in range(1, 7):
        oracle = [int(i) for i in rng.permutation(n)]
        for pred in itertools.permutations(range(n)):
            pred = list(pred)
            for K in range(1, n + 1):
                if precision_at_k(pred, set(oracle[:K]), K) != brute_precision(pred, set(oracle[:K]), K):
                    mismatches.append(("precision", pred, K))
                if abs(ndcg_at_k(pred, oracle, K) - brute_ndcg(pred, oracle, K, n)) > 1e-12:
                    mismatches.append(("ndcg", pred, K))
            if mrr_first(pred, oracle) != brute_rr(pred, oracle[0]):
                mismatches.append(("mrr_1st", pred))
            if n >= 2 and mrr_second(pred, oracle) != brute_rr(pred, oracle[1]):
                mismatches.append(("mrr_2nd", pred))
            if n == 6:
                cases["n=6 permutations"] += 1
    ok = not mismatches and cases["n=6 permutations"] == 720
    record_acceptance(3, ok, f"{cases['n=6 permutations']} permutations at n=6 (all n <= 6 checked), {len(mismatches)} mismatches")
    assert ok, mismatches[:5]


# ---------------------------------------------------------------- 4


def brute_bm25(units, query, u, k1=1.2, b=0.75):
    N = len(units)
    avg = sum(len(x) for x in units) / N
    score = 0.0
    for t in query:
        df = sum(1 for x in units if t in x)
        tf = units[u].count(t)
        if tf == 0 or avg == 0:
            continue
        idf = math.log((N - df + 0.5) / (df + 0.5) + 1)
        score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(units[u]) / avg))
    return score


def test_criterion_4_bm25_oracle(record_acceptance):
    toy = [["cat", "sat"], ["dog", "ran"], ["cat", "cat"]]
    index = Bm25Index.from_units(toy)
    hand = math.log((3 - 2 + 0.5) / (2 + 0.5) + 1) * 2 * 2.2 / (2 + 1.2)
    toy_err = max(abs(bm25_score(index, ["cat"], u) - brute_bm25(toy, ["cat"], u)) for u in range(3))
    toy_err = max(toy_err, abs(bm25_score(index, ["cat"], 2) - hand))
    rng = np.random.default_rng(4)
    vocab = list("abcdefgh")
    disagreements = 0
    for _ in range(100):
        units = [list(rng.choice(vocab, size=int(rng.integers(0, 7)))) for _ in range(int(rng.integers(1, 11)))]
        query = list(rng.choice(vocab, size=int(rng.integers(1, 4))))
        scores = [brute_bm25(units, query, u) for u in range(len(units))]
        exhaustive = sorted(range(len(units)), key=lambda u: (-scores[u], u))
        if bm25_rank(Bm25Index.from_units(units), query) != exhaustive:
            disagreements += 1
    ok = toy_err <= 1e-9 and disagreements == 0 and bm25_rank(index, ["cat"])[:2] == [2, 0]
    record_acceptance(4, ok, f"toy max error {toy_err:.1e}, {disagreements}/100 ranking disagreements")
    assert ok


# ---------------------------------------------------------------- 5 and 6


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench") / "run"
    args = ["--config", str(BENCH_CONFIG), "--out", str(out)]
    t0 = time.perf_counter()
    assert main(["prepare", *args]) == 0
    assert main(["train", *args]) == 0
    assert main(["evaluate", *args, "--checkpoint", str(out / "train" / "checkpoint_last.zip")]) == 0
    elapsed = time.perf_counter() - t0
    report = json.loads((out / "evaluate" / "report.json").read_text())
    return out, report, elapsed


@pytest.mark.slow
def test_criterion_5_synthetic_end_to_end(benchmark_run, record_acceptance):
    _, report, elapsed = benchmark_run
    m = report["methods"]["model"]
    values = {
        "P@10": m["precision_at"]["10"],
        "filterP@10": m["filter_precision_at"]["10"],
        "NDCG@3": m["ndcg_at"]["3"],
        "MRR_1st": m["mrr_1st"],
    }
    ok = (values["P@10"] >= 0.9 and values["filterP@10"] >= 0.9 and values["NDCG@3"] >= 0.95
          and values["MRR_1st"] >= 0.9 and elapsed < 300 and report["num_sets"] == 16)
    detail = ", ".join(f"{k} {v:.3f}" for k, v in values.items())
    record_acceptance(5, ok, f"{detail}; 100 epochs, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_6_baseline_direction(benchmark_run, record_acceptance):
    _, report, _ = benchmark_run
    meth = report["methods"]
    model, rake, gold = meth["model"], meth["bm25+rake"], meth["bm25+gold"]
    ok = all(model["precision_at"][K] > max(rake["precision_at"][K], gold["precision_at"][K]) for K in ("10", "20"))
    ok = ok and model["ndcg_at"]["3"] > rake["ndcg_at"]["3"]
    detail = "; ".join(
        f"{name} P@10 {m['precision_at']['10']:.3f} P@20 {m['precision_at']['20']:.3f} NDCG@3 {m['ndcg_at']['3']:.3f}"
        for name, m in (("model", model), ("bm25+rake", rake), ("bm25+gold", gold)))
    record_acceptance(6, ok, detail)
    assert ok


# ---------------------------------------------------------------- 7 and 8


@pytest.fixture(scope="module")
def benchmark_items(benchmark_run):
    out, _, _ = benchmark_run
    cfg = pipeline.load_config(BENCH_CONFIG, {"out": str(out)})
    run = pipeline.Run(cfg, out)
    items = {s: prepare_items(zip(*pipeline.load_split(run, s)), run.encoder, run.chunk_size)
             for s in ("train", "validation", "test")}
    base = run.training_config().to_dict()
    return items, base, run.encoder.dim


def train_and_test(items, base, d, **changes):
    cfg = TrainingConfig(**{**base, **changes})
    model = RetrieverModel(d, k=cfg.k, seed=cfg.seed)
    em_train(items["train"], model, cfg, validation=items["validation"])
    return evaluate_items(model, items["test"], cfg.eval_k)


@pytest.mark.slow
def test_criterion_7_query_count_trend(benchmark_items, record_acceptance):
    items, base, d = benchmark_items
    mrr = {k: [train_and_test(items, base, d, k=k, seed=s)["mrr_1st"] for s in (0, 1, 2)] for k in (1, 7)}
    mean = {k: float(np.mean(v)) for k, v in mrr.items()}
    ok = mean[7] > mean[1]
    per_seed = "; ".join(f"k={k}: " + ", ".join(f"{v:.3f}" for v in vals) for k, vals in mrr.items())
    record_acceptance(7, ok, f"mean MRR_1st k=1 {mean[1]:.3f} vs k=7 {mean[7]:.3f} ({per_seed})")
    assert ok


@pytest.mark.slow
def test_criterion_8_lambda_robustness(benchmark_items, record_acceptance):
    items, base, d = benchmark_items
    ndcg = {lam: train_and_test(items, base, d, lam=lam, seed=0)["ndcg_at_3"] for lam in (0.2, 1.0, 2.0)}
    spread = max(ndcg.values()) - min(ndcg.values())
    ok = spread < 0.05
    record_acceptance(8, ok, "NDCG@3 " + ", ".join(f"lambda={k}: {v:.3f}" for k, v in ndcg.items()) + f"; spread {spread:.3f}")
    assert ok


# ---------------------------------------------------------------- 9


def no_both_oracle(seg, budget, seed, sep_tokens):
    """Seeded permutation, concatenate with separators, keep the first ``budget`` tokens."""
    stream: list[str] = []
    for pos, i in enumerate(seeded_permutation(seg.n, seed)):
        if pos:
            stream.extend(sep_tokens)
        stream.extend(seg.base.documents[i].tokens)
    head = stream[:budget]
    while head and head[-1] in sep_tokens:
        head.pop()
    return head


def test_criterion_9_truncation_safety(record_acceptance):
    rng = np.random.default_rng(9)
    violations, drops_with_room, oracle_mismatch = 0, 0, 0
    counts = Counter()
    for trial in range(10_000):
        n = int(rng.integers(1, 6))
        lengths = [[int(x) for x in rng.integers(1, 9, size=int(rng.integers(1, 5)))] for _ in range(n)]
        seg = set_with_lengths(lengths, set_id=f"t{trial}")
        separator = None if rng.random() < 0.2 else "<doc-sep>"
        sep_tokens = ["<doc-sep>"] if separator else []
        total = sum(map(sum, lengths)) + (n - 1) * len(sep_tokens)
        budget = int(rng.integers(1, total + 10))
        variant = VARIANTS[trial % len(VARIANTS)]
        rel = rng.random(n).round(1)  # rounding forces ties
        sal = rng.random(seg.num_edus).round(1)
        seed = int(rng.integers(1000))
        try:
            plan = ablation_plan(seg, rel, sal, budget, variant, seed=seed, separator=separator)
        except EmptyPlanError:
            counts["even quota below one token"] += 1
            continue
        counts[variant] += 1
        assembled = assemble_input(plan, seg)
        if plan.used_tokens > budget or len(assembled.tokens) > budget:
            violations += 1
        if budget >= total and variant != "even" and (plan.dropped_edus or plan.partial_edus):
            drops_with_room += 1
        if variant == "no_both" and list(assembled.tokens) != no_both_oracle(seg, budget, seed, sep_tokens):
            oracle_mismatch += 1
    ok = violations == 0 and drops_with_room == 0 and oracle_mismatch == 0
    record_acceptance(9, ok, f"10000 triples ({counts['no_both']} no_both): {violations} over budget, "
                             f"{drops_with_room} drops with room, {oracle_mismatch} no_both oracle mismatches")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_determinism(tmp_path, record_acceptance):
    import yaml

    cfg = {
        "seed": 5,
        "data": {"synthetic": {"train": 8, "validation": 4, "test": 4, "seed": 2, "n_docs": 4, "edus_per_doc": 16}},
        "labels": {"k_q": 8, "k_f": 8},
        "training": {"learning_rate": 0.005, "batch_size": 4, "epochs": 3, "k": 5, "weight_decay": 0.1},
        "truncation": {"budget": 200},
    }
    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump({**cfg, "out": str(tmp_path / name)}))
        for cmd in ("prepare", "train"):
            assert main([cmd, "--config", str(path)]) == 0
        for variant in VARIANTS:
            assert main(["retrieve", "--config", str(path), "--variant", variant]) == 0
        assert main(["evaluate", "--config", str(path)]) == 0
        outs.append(tmp_path / name)
    compared = sorted(
        str(p.relative_to(outs[0])) for p in outs[0].rglob("*")
        if p.is_file() and p.name not in ("effective_config.yaml", "training_log.jsonl")
    )
    differing = [rel for rel in compared if (outs[0] / rel).read_bytes() != (outs[1] / rel).read_bytes()]
    kinds = {"labels", "checkpoint", "plans", "report"}
    covered = {k for k in kinds if any(k in rel for rel in compared)}
    ok = not differing and covered == kinds
    record_acceptance(10, ok, f"{len(compared)} files byte-compared, {len(differing)} differ {differing[:3]}")
    assert ok
