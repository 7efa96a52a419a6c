"""Acceptance gate: the behaviour-level guarantees the toolkit ships with.

Eleven checks, each with an explicit tolerance and an oracle that does not
lean on the code path under test.  Everything runs offline: the language
model is the scripted mock gateway, the encoder is the hash test double,
and the end-to-end checks replay the bundled demo fixtures.  The whole
module is budgeted to finish in well under five minutes.
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from importlib import resources

import numpy as np
import pytest
from scipy.special import softmax

from leckg.corpus import Document, chunk_document, load_corpus
from leckg.evaluation import (
    MODE_SEMANTIC,
    MatchConfig,
    TableSimilarity,
    evaluate,
)
from leckg.extraction import extract_corpus
from leckg.gateway import (
    MockGateway,
    RawTuple,
    build_extraction_prompt,
    build_remap_prompt,
    load_default_demos,
    prompt_hash,
)
from leckg.kge import (
    TrainConfig,
    batch_loss_and_grad,
    new_model,
    rank_relations,
    train,
)
from leckg.ontology import load_default_schema, relations_in_category
from leckg.pipeline import RunConfig, export_graph, run
from leckg.semantic_init import HashEncoder, fit_alignment, project
from leckg.validation import (
    ROUTE_ACCEPT,
    ROUTE_FEEDBACK,
    ROUTE_REJECT,
    compute_thresholds,
    route,
)

RECOVERY_CFG = dict(margin=2.0, negatives=16, batch_size=32, epochs=500,
                    learning_rate=3.0)


def wrap_angle(x: np.ndarray) -> np.ndarray:
    return (x + np.pi) % (2 * np.pi) - np.pi


# ------------------------------------------------------- 1. pattern recovery


def test_rotation_recovers_symmetry_and_composition():
    """A planted symmetric relation trains to phases near {0, pi}; a planted
    relation chain trains to additive phases.  Both on 50-entity graphs,
    within 60 seconds."""
    t0 = time.time()
    seed = 1

    rng = np.random.default_rng(seed + 1000)
    ents = [f"e{i:02d}" for i in range(50)]
    pairs = set()
    while len(pairs) < 100:
        a, b = rng.integers(0, 50, size=2)
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    sym_triples = []
    for a, b in sorted(pairs):
        sym_triples.append((ents[a], "sym", ents[b]))
        sym_triples.append((ents[b], "sym", ents[a]))
    m = new_model(ents, ["sym"], dim=8, seed=seed, margin=2.0)
    m = train(m, sym_triples, TrainConfig(seed=seed, **RECOVERY_CFG))
    phases = m.rel_phase[m.relation_index["sym"]]
    sym_dev = np.minimum(np.abs(wrap_angle(phases)),
                         np.abs(wrap_angle(phases - np.pi))).mean()
    assert sym_dev < 0.15, f"symmetric phase deviation {sym_dev:.4f}"

    cyc = [f"c{i:02d}" for i in range(50)]
    comp_triples = []
    for i in range(50):
        comp_triples.append((cyc[i], "r1", cyc[(i + 1) % 50]))
        comp_triples.append((cyc[i], "r2", cyc[(i + 2) % 50]))
        comp_triples.append((cyc[i], "r3", cyc[(i + 3) % 50]))
    m2 = new_model(cyc, ["r1", "r2", "r3"], dim=8, seed=seed, margin=2.0)
    m2 = train(m2, comp_triples, TrainConfig(seed=seed, **RECOVERY_CFG))
    p = {r: m2.rel_phase[m2.relation_index[r]] for r in ("r1", "r2", "r3")}
    comp_dev = np.abs(wrap_angle(p["r1"] + p["r2"] - p["r3"])).mean()
    assert comp_dev < 0.2, f"composition residual {comp_dev:.4f}"

    assert time.time() - t0 < 60.0


# ------------------------------------------------------ 2. gradient exactness


def test_loss_gradient_matches_central_differences():
    """Analytic gradients against central finite differences at 10 random
    parameter points, d=4, relative error below 1e-4."""
    rng = np.random.default_rng(7)
    n_e, n_r, d, B, n = 6, 3, 4, 3, 5
    step = 1e-6
    worst = 0.0
    for _ in range(10):
        emb = rng.normal(size=(n_e, d)) + 1j * rng.normal(size=(n_e, d))
        phases = rng.uniform(-math.pi, math.pi, size=(n_r, d))
        pos = np.column_stack([
            rng.integers(0, n_e, B), rng.integers(0, n_r, B),
            rng.integers(0, n_e, B),
        ])
        neg_ent = rng.integers(0, n_e, (B, n))
        neg_side = rng.integers(0, 2, (B, n))
        weights = softmax(rng.normal(size=(B, n)), axis=1)

        loss, g_emb, g_phase = batch_loss_and_grad(
            emb, phases, pos, neg_ent, neg_side, weights, margin=2.0)
        assert np.isfinite(loss)

        def f(e2, p2):
            return batch_loss_and_grad(
                e2, p2, pos, neg_ent, neg_side, weights, margin=2.0)[0]

        fd_emb = np.zeros_like(g_emb)
        for i in range(n_e):
            for j in range(d):
                for part in (1.0, 1.0j):
                    delta = np.zeros_like(emb)
                    delta[i, j] = part * step
                    diff = (f(emb + delta, phases)
                            - f(emb - delta, phases)) / (2 * step)
                    fd_emb[i, j] += diff * part
        fd_phase = np.zeros_like(g_phase)
        for i in range(n_r):
            for j in range(d):
                delta = np.zeros_like(phases)
                delta[i, j] = step
                fd_phase[i, j] = (f(emb, phases + delta)
                                  - f(emb, phases - delta)) / (2 * step)

        analytic = np.concatenate(
            [g_emb.real.ravel(), g_emb.imag.ravel(), g_phase.ravel()])
        numeric = np.concatenate(
            [fd_emb.real.ravel(), fd_emb.imag.ravel(), fd_phase.ravel()])
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
        worst = max(worst, rel)
    assert worst < 1e-4, f"worst relative error {worst:.2e}"


# ------------------------------------------------------- 3. link prediction


def test_category_restricted_hits_at_1():
    """On a group-structured graph with a 10% holdout, the category-ranked
    top relation is the planted one at least 80% of the time."""
    seed = 1
    o = load_default_schema()
    cat = "Definition & Naming"
    rels = [r.id for r in relations_in_category(o, cat)]
    assert len(rels) == 4
    groups = [[f"g{k}_{i:02d}" for i in range(10)] for k in range(4)]
    ents = [e for g in groups for e in g]
    triples = []
    for k in range(4):
        for h in groups[k]:
            for t in groups[(k + 1) % 4]:
                triples.append((h, rels[k], t))

    rng = np.random.default_rng(seed + 2000)
    order = rng.permutation(len(triples))
    n_hold = len(triples) // 10
    held_out = [triples[i] for i in order[:n_hold]]
    training = [triples[i] for i in order[n_hold:]]

    m = new_model(ents, rels, dim=8, seed=seed, margin=2.0)
    m = train(m, training, TrainConfig(seed=seed, **RECOVERY_CFG))
    hits = sum(
        rank_relations(m, h, t, cat, o, k=1)[0][0] == r
        for h, r, t in held_out
    )
    assert hits / len(held_out) >= 0.8, f"hits@1 {hits}/{len(held_out)}"


# ---------------------------------------------------------- 4. projection


class PlantedEncoder:
    def __init__(self, table):
        self.table = table
        self.out_dim = len(next(iter(table.values())))

    def encode(self, mention: str) -> np.ndarray:
        return self.table[mention]


def test_alignment_recovers_planted_affine_map():
    """Encoder vectors related to embeddings by a planted affine map: the
    fitted alignment generalizes below 1e-3 held-out relative error, and
    projected unseen entities preserve the score ordering (Spearman >= 0.8)."""
    seed = 0
    rng = np.random.default_rng(seed + 3000)
    enc_dim, dim, n_seen, n_unseen = 16, 4, 40, 20
    A = rng.normal(size=(2 * dim, enc_dim))
    b = rng.normal(size=2 * dim)
    seen = [f"s{i:02d}" for i in range(n_seen)]
    unseen = [f"u{i:02d}" for i in range(n_unseen)]
    table, true_emb = {}, {}
    for name in seen + unseen:
        v = rng.normal(size=enc_dim)
        table[name] = v
        flat = A @ v + b + rng.normal(size=2 * dim) * 1e-5
        true_emb[name] = flat[:dim] + 1j * flat[dim:]

    m = new_model(seen, ["rel"], dim=dim, seed=seed, margin=2.0)
    for name in seen:
        m.entity_emb[m.entity_index[name]] = true_emb[name]

    amap = fit_alignment(PlantedEncoder(table), m, holdout=0.25, seed=seed)
    hold_err = amap.fit_stats["holdout_rel_err"]
    assert hold_err < 1e-3, f"holdout relative error {hold_err:.2e}"

    proj_scores, true_scores = [], []
    for u in unseen:
        proj = project(amap, table[u])
        for t in seen[:10]:
            t_vec = true_emb[t]
            proj_scores.append(m.score_vectors(proj, "rel", t_vec))
            true_scores.append(m.score_vectors(true_emb[u], "rel", t_vec))

    def ranks(x):
        r = np.empty(len(x))
        r[np.argsort(x)] = np.arange(len(x))
        return r

    rho = float(np.corrcoef(ranks(proj_scores), ranks(true_scores))[0, 1])
    assert rho >= 0.8, f"Spearman {rho:.4f}"


# ------------------------------------------------------ 5. tri-partition


def oracle_nearest_rank(ordered: list[float], pct: float) -> float:
    n = len(ordered)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return ordered[min(rank, n) - 1]


def test_partition_matches_brute_force_oracle():
    """Thresholds and bucket counts equal an independent nearest-rank oracle
    on 1,000 random score multisets (sizes 1-500, ties included), and the
    routing is monotone in score."""
    rng = np.random.default_rng(11)
    class_index = {ROUTE_REJECT: 0, ROUTE_FEEDBACK: 1, ROUTE_ACCEPT: 2}
    for case in range(1000):
        n = int(rng.integers(1, 501))
        scores = rng.uniform(0.0, 0.5, size=n)
        if case % 2:
            scores = np.round(scores, 2)  # force ties
        scores = scores.tolist()

        th = compute_thresholds(scores, iteration=1,
                                low_pct=25.0, high_pct=70.0)
        ordered = sorted(scores)
        assert th.theta_low == oracle_nearest_rank(ordered, 25.0)
        assert th.theta_high == oracle_nearest_rank(ordered, 70.0)

        routed = Counter(route(("k",), s, th).route for s in scores)
        expect = Counter()
        for s in scores:
            if s >= th.theta_high:
                expect[ROUTE_ACCEPT] += 1
            elif s >= th.theta_low:
                expect[ROUTE_FEEDBACK] += 1
            else:
                expect[ROUTE_REJECT] += 1
        assert routed == expect
        assert routed[ROUTE_ACCEPT] >= 1  # the maximum always clears P70

        classes = [class_index[route(("k",), s, th).route] for s in ordered]
        assert all(a <= b for a, b in zip(classes, classes[1:]))


# ------------------------------------------------- 6 & 7. end-to-end demo


def demo_dir():
    return resources.files("leckg") / "data" / "demo"


@pytest.fixture(scope="module")
def demo_bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo_bundle")
    paths = {}
    for name in ["corpus.jsonl", "scenario.json", "config.json",
                 "expected_graph.jsonl", "expected_graph.tsv",
                 "expected.json"]:
        p = root / name
        p.write_bytes((demo_dir() / name).read_bytes())
        paths[name] = p
    return paths


def demo_run(bundle, cfg=None, checkpoint_dir=None, resume=False):
    corpus = load_corpus(bundle["corpus.jsonl"])
    o = load_default_schema()
    gw = MockGateway.from_file(bundle["scenario.json"])
    cfg = cfg or RunConfig.from_file(bundle["config.json"])
    result = run(corpus, o, gw, HashEncoder(), cfg,
                 checkpoint_dir=checkpoint_dir, resume=resume)
    return result, gw


def graph_bytes(state, tmp_path, stem):
    jsonl = tmp_path / f"{stem}.jsonl"
    tsv = tmp_path / f"{stem}.tsv"
    export_graph(state, jsonl, tsv)
    return jsonl.read_bytes(), tsv.read_bytes()


def test_end_to_end_converges_to_golden_graph(demo_bundle, tmp_path):
    """The bundled scenario converges (growth < 0.01) by round 4 with a
    non-decreasing validated count, and the exported graph is byte-identical
    to the golden fixture across two fresh runs and a checkpoint-resume."""
    golden_jsonl = demo_bundle["expected_graph.jsonl"].read_bytes()
    golden_tsv = demo_bundle["expected_graph.tsv"].read_bytes()
    cfg = RunConfig.from_file(demo_bundle["config.json"])

    result, _ = demo_run(demo_bundle)
    state = result.state
    assert state.converged and state.t <= 4
    assert state.growth_history[-1] < cfg.epsilon == 0.01
    counts = state.valid_counts
    assert all(a <= b for a, b in zip(counts, counts[1:]))
    assert graph_bytes(state, tmp_path, "first") == (golden_jsonl, golden_tsv)

    second, _ = demo_run(demo_bundle)
    assert graph_bytes(second.state, tmp_path, "second") == (golden_jsonl,
                                                             golden_tsv)

    # interrupted after round 2, then resumed to completion
    ckpt = tmp_path / "ckpt"
    import dataclasses
    demo_run(demo_bundle, cfg=dataclasses.replace(cfg, t_max=2),
             checkpoint_dir=ckpt)
    resumed, _ = demo_run(demo_bundle, cfg=cfg, checkpoint_dir=ckpt,
                          resume=True)
    assert resumed.state.t == state.t
    assert graph_bytes(resumed.state, tmp_path, "resumed") == (golden_jsonl,
                                                               golden_tsv)


def test_failing_triple_gets_three_calls_then_permanent_rejection(demo_bundle):
    """The scripted always-failing triple is sent for feedback exactly three
    times across the whole run and is then rejected for good, with no fourth
    gateway call."""
    expected = json.loads(
        demo_bundle["expected.json"].read_text(encoding="utf-8"))
    stubborn = tuple(expected["stubborn"])

    result, gw = demo_run(demo_bundle)
    assert gw.log.count(tag="Feedback", meta_key=list(stubborn)) == 3

    limit_rows = [row for row in result.feedback_log
                  if row["reason"] == "retry limit"]
    assert len(limit_rows) == 1
    row = limit_rows[0]
    assert (row["h"], row["r"], row["t"]) == stubborn
    assert row["prompt_hash"] is None  # rejected without another call
    assert stubborn in result.state.rejected_keys
    assert stubborn not in result.state.valid


# -------------------------------------------------- 8. schema conservatism


def test_adversarial_out_of_schema_relations_never_survive():
    """With half of every scripted reply outside the schema, the candidate
    set contains no relation outside its claimed category; remap replies are
    honoured only when they name a relation of that category."""
    o = load_default_schema()
    docs, scenario = [], {}
    shots = load_default_demos()

    # per doc: one valid Quantitative tuple, one bogus relation (50% OOS)
    specs = []
    for i in range(6):
        ind, val = f"指标{i}", f"{i}0"
        text = f"{ind}的数值为{val}。"
        docs.append(Document(id=f"adv{i}", text=text))
        good = {"h": ind, "r": "hasValue", "t": val,
                "e": f"{ind}的数值为{val}", "c": "Quantitative", "p": 0.9}
        bad = {"h": ind, "r": f"bogusRel{i}", "t": val,
               "e": f"{ind}的数值为{val}", "c": "Quantitative", "p": 0.8}
        specs.append((text, good, bad))

    remap_replies = ["hasUnit", "locatedIn", "no suitable match",
                     "madeUpRelation", "causes", "thresholdOf"]
    for (text, good, bad), remap in zip(specs, remap_replies):
        req = build_extraction_prompt(text, o, shots)
        scenario[prompt_hash(req)] = json.dumps([good, bad],
                                                ensure_ascii=False)
        raw = RawTuple(h=bad["h"], r=bad["r"], t=bad["t"], e=bad["e"],
                       c=bad["c"], p_llm=bad["p"])
        scenario[prompt_hash(build_remap_prompt(raw, o))] = remap

    gw = MockGateway(scenario)
    cands = extract_corpus(docs, o, gw, shots=shots)

    allowed = {r.id for r in relations_in_category(o, "Quantitative")}
    assert cands, "extraction produced no candidates"
    for c in cands:
        assert c.c == "Quantitative"
        assert c.r in allowed, f"out-of-category relation {c.r} survived"

    survivors = {(c.h, c.r, c.t) for c in cands}
    # in-category remaps (hasUnit, thresholdOf) are accepted
    assert ("指标0", "hasUnit", "00") in survivors
    assert ("指标5", "thresholdOf", "50") in survivors
    # a real relation of the wrong category is still rejected
    assert not any(c.r == "locatedIn" for c in cands)
    assert not any(c.r == "causes" for c in cands)
    # unknown or unmapped replies drop the tuple
    assert len(cands) == 8  # 6 valid + 2 in-category remaps


# ----------------------------------------------------- 9. metrics oracle


def oracle_exact_report(pred, gold):
    """Exhaustive confusion computation for Exact mode via multiset counts."""
    tp_by_rel = Counter()
    for key, n_pred in Counter(pred).items():
        tp_by_rel[key[1]] += min(n_pred, Counter(gold)[key])
    pred_by_rel = Counter(p[1] for p in pred)
    gold_by_rel = Counter(g[1] for g in gold)

    def f1(p, r):
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    per_rel = {}
    for rel in set(pred_by_rel) | set(gold_by_rel):
        tp = tp_by_rel[rel]
        fp = pred_by_rel[rel] - tp
        fn = gold_by_rel[rel] - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per_rel[rel] = (tp, fp, fn, f1(prec, rec))

    tp = sum(v[0] for v in per_rel.values())
    fp = sum(v[1] for v in per_rel.values())
    fn = sum(v[2] for v in per_rel.values())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    gold_rels = sorted(gold_by_rel)
    macro = (sum(per_rel[r][3] for r in gold_rels) / len(gold_rels)
             if gold_rels else 0.0)
    return precision, recall, f1(precision, recall), macro, per_rel


HAND_BUILT_CASES = [
    ([], []),
    ([("a", "x", "1")], []),
    ([], [("a", "x", "1")]),
    ([("a", "x", "1")], [("a", "x", "1")]),
    ([("a", "x", "1")], [("b", "x", "1")]),
    # duplicates on one side only
    ([("a", "x", "1")] * 3, [("a", "x", "1")]),
    ([("a", "x", "1")], [("a", "x", "1")] * 4),
    # mixed relations, partial overlap
    ([("a", "x", "1"), ("b", "y", "2"), ("c", "z", "3")],
     [("a", "x", "1"), ("b", "y", "9"), ("d", "w", "4")]),
    # 20-element sides
    ([(f"e{i}", "x" if i % 2 else "y", str(i)) for i in range(20)],
     [(f"e{i}", "x" if i % 3 else "y", str(i)) for i in range(20)]),
    ([(f"p{i % 5}", f"r{i % 4}", str(i % 3)) for i in range(20)],
     [(f"p{i % 4}", f"r{i % 5}", str(i % 2)) for i in range(18)]),
]


def test_metrics_match_exhaustive_oracle():
    for pred, gold in HAND_BUILT_CASES:
        report = evaluate(pred, gold)
        precision, recall, micro, macro, per_rel = oracle_exact_report(
            pred, gold)
        assert report.precision == pytest.approx(precision, abs=1e-12)
        assert report.recall == pytest.approx(recall, abs=1e-12)
        assert report.micro_f1 == pytest.approx(micro, abs=1e-12)
        assert report.macro_f1 == pytest.approx(macro, abs=1e-12)
        assert set(report.per_relation) == set(per_rel)
        for rel, (tp, fp, fn, f1) in per_rel.items():
            got = report.per_relation[rel]
            assert got[:3] == (tp, fp, fn)
            assert got[3] == pytest.approx(f1, abs=1e-12)


def test_semantic_threshold_boundary():
    """Pair similarity is min(head, tail) given equal relations; matches
    require similarity >= 0.85, so 0.85 matches and 0.8499 does not."""
    table = TableSimilarity({
        ("甲", "甲指标"): 0.9, ("十", "10"): 0.85,
        ("乙", "乙指标"): 0.9, ("二十", "20"): 0.8499,
    })
    cfg = MatchConfig(mode=MODE_SEMANTIC, sim_threshold=0.85,
                      similarity=table)

    at_cut = evaluate([("甲", "hasValue", "十")],
                      [("甲指标", "hasValue", "10")], cfg)
    assert at_cut.micro_f1 == 1.0  # min(0.9, 0.85) == 0.85 clears the bar

    below = evaluate([("乙", "hasValue", "二十")],
                     [("乙指标", "hasValue", "20")], cfg)
    assert below.micro_f1 == 0.0  # min(0.9, 0.8499) falls short

    wrong_rel = evaluate([("甲", "hasUnit", "十")],
                         [("甲指标", "hasValue", "10")], cfg)
    assert wrong_rel.micro_f1 == 0.0  # relation mismatch is never bridged


# --------------------------------------------------------- 10. chunking


def test_chunk_boundaries_match_stride_formula():
    """For 200 random lengths (plus edge lengths), chunk spans equal the
    closed form with size 2000 / overlap 200, and the chunks cover the
    document."""
    rng = np.random.default_rng(23)
    size, overlap = 2000, 200
    stride = size - overlap
    lengths = [int(x) for x in rng.integers(1, 12001, size=200)]
    lengths += [1, 1999, 2000, 2001, 3800, 3801, 5600, 5601]

    for n, length in enumerate(lengths):
        doc = Document(id=f"d{n}", text="字" * length)
        chunks = chunk_document(doc, size=size, overlap=overlap)

        want_n = 1 if length <= size else math.ceil((length - size) / stride) + 1
        assert len(chunks) == want_n, f"len {length}: {len(chunks)} chunks"
        for i, ch in enumerate(chunks):
            assert ch.index == i
            assert ch.start == i * stride
            assert ch.end == min(i * stride + size, length)
            assert ch.text == doc.text[ch.start:ch.end]
        assert chunks[-1].end == length
        covered = 0
        for ch in chunks:
            assert ch.start <= covered  # no gaps
            covered = max(covered, ch.end)
        assert covered == length


# ------------------------------------------------------ 11. determinism


def test_same_seed_runs_write_identical_checkpoints(demo_bundle, tmp_path):
    dirs = [tmp_path / "run_a", tmp_path / "run_b"]
    for d in dirs:
        demo_run(demo_bundle, checkpoint_dir=d)
    names_a = sorted(p.name for p in dirs[0].iterdir())
    names_b = sorted(p.name for p in dirs[1].iterdir())
    assert names_a == names_b and names_a
    for name in names_a:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
