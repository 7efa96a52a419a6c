#!/usr/bin/env python3
"""Build the bundled demo fixtures: corpus, scripted replies, expected outputs.

Extraction and remap prompts depend only on the corpus and schema, so their
hashes are computed up front.  Feedback prompts embed live model scores that
shift as the model warm-starts, so their hashes cannot be written down a
priori: the script runs the pipeline repeatedly, scripting a reply for every
newly observed feedback prompt, until a full run sees no unscripted call (a
fixpoint; each pass pins down one more round, so it terminates quickly).

The reply policy confirms every feedback call in rounds 1 and 2; in round 3
it confirms the callee with the most consumed attempts (driving it to the
retry limit) and corrects the other into an already-validated triple, so
the last round validates nothing new and growth bottoms out at zero:

  round 1: pool 12 -> reject 2, accept 4, feedback 6 (2 called, confirmed)
  round 2: pool  6 -> reject 1, accept 2, feedback 3 (2 called, confirmed)
  round 3: pool  3 -> accept 1, feedback 2 (one confirmed a 3rd time, the
           companion corrected into an already-accepted triple)
  round 4: pool  2 -> the duplicate re-validates (growth 0), the stubborn
           triple hits the retry limit and is permanently rejected, no call

Which triple ends up stubborn depends on learned scores (the feedback queue
is served by priority flag, then score spread), so the script searches run
seeds until a run realizes the whole arc, then freezes that seed into the
bundled config and records the discovered stubborn key in expected.json.

Run from the repository root:  python3 tools/build_demo_scenario.py
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from leckg.corpus import Document, chunk_document  # noqa: E402
from leckg.gateway import (  # noqa: E402
    MockGateway,
    RawTuple,
    build_extraction_prompt,
    build_remap_prompt,
    load_default_demos,
    prompt_hash,
)
from leckg.ontology import load_default_schema  # noqa: E402
from leckg.pipeline import RunConfig, export_graph, run  # noqa: E402
from leckg.semantic_init import HashEncoder  # noqa: E402

OUT = ROOT / "src" / "leckg" / "data" / "demo"

DOCS = [
    {
        "id": "demo-forest",
        "text": (
            "2020年云南省森林覆盖率的数值为65.04%，单位为百分比。"
            "植被指数的数值为0.68。森林蓄积量的最大值为20.2亿立方米。"
            "监测数据的空间分辨率为30米。"
        ),
    },
    {
        "id": "demo-water",
        "text": (
            "湿地面积的数值为56.7万公顷。地表水质达标率的平均值为88%。"
            "水质监测的更新频率为每月一次。草地退化的变化趋势为加剧。"
        ),
    },
    {
        "id": "demo-threshold",
        "text": (
            "生态流量保障率的阈值为0.92。土壤侵蚀模数的数值为3400。"
            "植被指数的最小值为0.21。遥感影像的时间分辨率为16天。"
        ),
    },
]


def rec(h, r, t, e, p):
    return {"head": h, "relation": r, "tail": t, "evidence": e,
            "category": "Quantitative", "confidence": p}


DOC_REPLIES = {
    "demo-forest": [
        rec("森林覆盖率", "hasValue", "65.04%", "森林覆盖率的数值为65.04%", 0.95),
        rec("森林覆盖率", "hasUnit", "百分比", "单位为百分比", 0.9),
        # out-of-schema relation; the scripted remap answer folds it back in
        rec("植被指数", "numericValue", "0.68", "植被指数的数值为0.68", 0.85),
        rec("森林蓄积量", "maxValueOf", "20.2亿立方米", "森林蓄积量的最大值为20.2亿立方米", 0.9),
        rec("监测数据", "spatialResolution", "30米", "空间分辨率为30米", 0.8),
    ],
    "demo-water": [
        rec("湿地面积", "hasValue", "56.7万公顷", "湿地面积的数值为56.7万公顷", 0.9),
        rec("地表水质达标率", "meanValueOf", "88%", "地表水质达标率的平均值为88%", 0.85),
        rec("水质监测", "updateFrequency", "每月一次", "更新频率为每月一次", 0.75),
        # unmappable: the default remap reply drops it
        rec("草地退化", "degradationTrend", "加剧", "草地退化的变化趋势为加剧", 0.6),
    ],
    "demo-threshold": [
        # sole confidence under 0.5: heads the feedback queue when mid-band
        rec("生态流量保障率", "thresholdOf", "0.92", "生态流量保障率的阈值为0.92", 0.4),
        rec("土壤侵蚀模数", "hasValue", "3400", "土壤侵蚀模数的数值为3400", 0.9),
        rec("植被指数", "minValueOf", "0.21", "植被指数的最小值为0.21", 0.85),
        rec("遥感影像", "temporalResolution", "16天", "遥感影像的时间分辨率为16天", 0.8),
    ],
}

REMAPPED = RawTuple(
    h="植被指数", r="numericValue", t="0.68",
    e="植被指数的数值为0.68", c="Quantitative", p_llm=0.85,
)


def config_for(seed: int) -> RunConfig:
    return RunConfig(
        chunk_size=400, chunk_overlap=50,
        t_max=4, epsilon=0.01, feedback_budget=2,
        mc_runs=3,
        kge_dim=8, kge_margin=2.0, kge_negatives=4, kge_batch_size=16,
        # one warm epoch: augmentation still nudges the model every round,
        # but band membership stays governed by the cold-start ranking, so a
        # confirmed triple is not trained straight out of the feedback band
        kge_epochs=40, kge_learning_rate=1.5, warm_epochs=1,
        seed=seed,
    )


def base_scenario(o, cfg) -> dict:
    sc = {}
    for row in DOCS:
        doc = Document(id=row["id"], text=row["text"])
        reply = json.dumps(DOC_REPLIES[row["id"]], ensure_ascii=False)
        for ch in chunk_document(doc, cfg.chunk_size, cfg.chunk_overlap):
            req = build_extraction_prompt(ch.text, o, load_default_demos())
            sc[prompt_hash(req)] = reply
    sc[prompt_hash(build_remap_prompt(REMAPPED, o))] = "hasValue"
    return sc


def run_once(o, cfg, scenario):
    gw = MockGateway(dict(scenario))
    docs = [Document(id=r["id"], text=r["text"]) for r in DOCS]
    result = run(docs, o, gw, HashEncoder(), cfg)
    return result, gw


class Broken(Exception):
    pass


def assign_replies(new_rows, result) -> dict:
    """Replies for newly observed feedback calls, one fixpoint pass."""
    replies = {}
    round3 = []
    for row in new_rows:
        if row["iteration"] >= 4:
            raise Broken(
                f"unexpected feedback call at round {row['iteration']}"
                f" ({row['h']},{row['r']},{row['t']} attempt {row['attempt']})"
            )
        if row["iteration"] <= 2:
            replies[row["prompt_hash"]] = "confirm"
        else:
            round3.append(row)
    if round3:
        if len(round3) != 2:
            raise Broken(
                f"{len(round3)} feedback calls at round 3: "
                + "; ".join(f"{r['h']} attempt {r['attempt']}" for r in round3)
            )
        # the farthest-along callee is confirmed into the retry limit; the
        # other is corrected into the strongest already-validated triple,
        # so the final round accepts a duplicate and growth stays at zero
        round3.sort(key=lambda r: -r["attempt"])
        if round3[0]["attempt"] != 3:
            raise Broken(
                "round-3 attempts too low: "
                + "; ".join(f"{r['h']} attempt {r['attempt']}" for r in round3)
            )
        replies[round3[0]["prompt_hash"]] = "confirm"
        target = max(result.state.valid.values(), key=lambda v: v["score"])
        replies[round3[1]["prompt_hash"]] = json.dumps(
            {"head": target["h"], "relation": target["r"], "tail": target["t"]},
            ensure_ascii=False,
        )
    return replies


def fixpoint(o, cfg):
    """Grow the scenario until a run sees no unscripted feedback prompt."""
    scenario = base_scenario(o, cfg)
    for _ in range(10):
        result, gw = run_once(o, cfg, scenario)
        new_rows = [
            row for row in result.feedback_log
            if row["prompt_hash"] is not None
            and row["prompt_hash"] not in scenario
        ]
        if not new_rows:
            return scenario, result, gw
        scenario.update(assign_replies(new_rows, result))
    raise Broken("no fixpoint after 10 passes")


def check_choreography(result, gw, scenario):
    """Verify the full arc and return (stubborn_key, corrected_row)."""
    state = result.state
    if state.t != 4 or not state.converged:
        raise Broken(f"run ended t={state.t} converged={state.converged}")
    if state.valid_counts != [4, 6, 7, 7]:
        raise Broken(f"valid counts {state.valid_counts}")
    if state.growth_history[-1] != 0.0 or min(state.growth_history[:3]) < 0.01:
        raise Broken(f"growth {state.growth_history}")

    limit_rows = [r for r in result.feedback_log if r["reason"] == "retry limit"]
    if len(limit_rows) != 1:
        raise Broken(f"{len(limit_rows)} retry-limit rejections")
    last = limit_rows[0]
    if not (
        last["iteration"] == 4
        and last["outcome"] == "Rejected"
        and last["prompt_hash"] is None
        and last["attempt"] == 3
    ):
        raise Broken(f"retry-limit row {last}")
    stubborn = (last["h"], last["r"], last["t"])
    per_key = {}
    for rec_ in gw.log.records():
        if rec_.tag == "Feedback":
            k = tuple(rec_.meta["triple_key"])
            per_key[k] = per_key.get(k, 0) + 1
    if per_key.get(stubborn) != 3:
        raise Broken(f"stubborn got {per_key.get(stubborn, 0)} feedback calls")
    if max(per_key.values()) > 3:
        raise Broken(f"some triple exceeded 3 feedback calls: {per_key}")
    if stubborn not in state.rejected_keys or stubborn in state.valid:
        raise Broken("stubborn not permanently rejected")

    corrected = [r for r in result.feedback_log if r["outcome"] == "Corrected"]
    if len(corrected) != 1 or corrected[0]["iteration"] != 3:
        raise Broken(f"corrections {corrected}")
    defaulted = [
        r for r in result.feedback_log
        if r["prompt_hash"] is not None and r["prompt_hash"] not in scenario
    ]
    if defaulted:
        raise Broken(f"unscripted feedback calls remain: {len(defaulted)}")
    return stubborn, corrected[0]


def main():
    o = load_default_schema()
    for seed in range(60):
        cfg = config_for(seed)
        try:
            scenario, result, gw = fixpoint(o, cfg)
            stubborn, corrected_row = check_choreography(result, gw, scenario)
        except Broken as exc:
            print(f"seed {seed}: {exc}")
            continue

        # determinism sanity: a second cold run must reproduce the state
        replay, _ = run_once(o, cfg, scenario)
        if replay.state.valid != result.state.valid:
            print(f"seed {seed}: replay diverged")
            continue

        OUT.mkdir(parents=True, exist_ok=True)
        (OUT / "corpus.jsonl").write_text(
            "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in DOCS),
            encoding="utf-8",
        )
        (OUT / "scenario.json").write_text(
            json.dumps(scenario, ensure_ascii=False, sort_keys=True, indent=1) + "\n",
            encoding="utf-8",
        )
        (OUT / "config.json").write_text(
            json.dumps(cfg.to_dict(), ensure_ascii=False, sort_keys=True, indent=1) + "\n",
            encoding="utf-8",
        )
        export_graph(
            result.state, OUT / "expected_graph.jsonl", OUT / "expected_graph.tsv"
        )
        expected = {
            "stubborn": list(stubborn),
            "stubborn_feedback_calls": 3,
            "t": result.state.t,
            "converged": True,
            "valid_counts": result.state.valid_counts,
            "growth_history": result.state.growth_history,
            "corrected_round": corrected_row["iteration"],
            "corrected_original": [
                corrected_row["h"], corrected_row["r"], corrected_row["t"]
            ],
        }
        (OUT / "expected.json").write_text(
            json.dumps(expected, ensure_ascii=False, sort_keys=True, indent=1) + "\n",
            encoding="utf-8",
        )
        print(f"seed {seed}: fixtures written to {OUT}")
        print(f"  stubborn     {stubborn}")
        print(f"  valid counts {result.state.valid_counts}")
        print(f"  growth       {result.state.growth_history}")
        print(f"  scenario entries: {len(scenario)}")
        return 0
    print("no seed satisfied the choreography", file=sys.stderr)
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
