"""Command-line surface wiring the modules into reproducible batch runs.

Five subcommands: extract, train-kge, run, eval, export-review.  Every
command writes a manifest next to its outputs recording the package
version, parameters, input digests, and output paths, so a finished run
can be replayed against the mock gateway.  Domain failures exit 1 with a
one-line JSON envelope on stderr; bad invocations exit 2 via click.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import random
import sys
from pathlib import Path

import click

from . import __version__
from .corpus import load_corpus
from .errors import InvalidParams, LeckgError, ParseError
from .evaluation import (
    DEFAULT_SIM_THRESHOLD,
    MODE_EXACT,
    MODE_SEMANTIC,
    EncoderSimilarity,
    MatchConfig,
    evaluate,
    render_report,
)
from .extraction import extract_corpus
from .gateway import HttpGateway, MockGateway, load_default_demos
from .kge import TrainConfig, new_model, save_model, train
from .ontology import load_default_schema, load_schema
from .pipeline import (
    RunConfig,
    build_manifest,
    export_graph,
    run as run_pipeline,
    save_state,
    sha256_file,
    write_jsonl,
)
from .semantic_init import HashEncoder, HttpEncoder


def domain_errors(fn):
    """Map toolkit exceptions onto the machine-readable failure contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except LeckgError as exc:
            payload = {"error": exc.category, "message": str(exc)}
            click.echo(json.dumps(payload, ensure_ascii=False), err=True)
            sys.exit(1)

    return wrapper


def _schema(path: str | None):
    return load_schema(path) if path else load_default_schema()


def _encoder():
    url = os.environ.get("LECKG_ENC_URL")
    if url:
        return HttpEncoder(url)
    return HashEncoder()


def _gateway(mock_scenario: str | None, llm_url: str | None):
    # an explicit scenario file wins over an endpoint picked up from the
    # environment, so offline replays work without unsetting LECKG_LLM_URL
    if mock_scenario:
        return MockGateway.from_file(mock_scenario)
    if llm_url:
        return HttpGateway(llm_url, api_key=os.environ.get("LECKG_LLM_KEY"))
    raise click.UsageError("provide --mock-scenario or --llm-url (LECKG_LLM_URL)")


def _read_rows(path: str | Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{n}: {exc}") from exc
            if not isinstance(row, dict):
                raise ParseError(f"{path}:{n}: expected an object")
            rows.append(row)
    return rows


def _read_triples(path: str | Path) -> list[tuple[str, str, str]]:
    triples = []
    for n, row in enumerate(_read_rows(path), start=1):
        try:
            triples.append((str(row["h"]), str(row["r"]), str(row["t"])))
        except KeyError as exc:
            raise ParseError(f"{path}:{n}: missing key {exc}") from exc
    return triples


def _write_manifest(
    path: Path,
    command: str,
    params: dict,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
) -> None:
    doc = {
        "command": command,
        "package_version": __version__,
        "params": params,
        "inputs": {
            name: {"path": str(p), "sha256": sha256_file(p)}
            for name, p in sorted(inputs.items())
        },
        "outputs": {name: str(p) for name, p in sorted(outputs.items())},
    }
    path.write_text(
        json.dumps(doc, ensure_ascii=False, indent=1, sort_keys=True) + "\n",
        encoding="utf-8",
    )


@click.group()
@click.version_option(version=__version__, prog_name="leckg")
def main():
    """Knowledge-graph construction toolkit."""


@main.command()
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", type=click.Path(exists=True, dir_okay=False),
              help="Schema JSON; bundled schema when omitted.")
@click.option("--mock-scenario", type=click.Path(exists=True, dir_okay=False),
              help="Scripted reply table; takes precedence over --llm-url.")
@click.option("--llm-url", envvar="LECKG_LLM_URL",
              help="Chat-completion endpoint (key via LECKG_LLM_KEY).")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Candidate triples JSONL.")
@domain_errors
def extract(corpus_path, schema, mock_scenario, llm_url, out):
    """Run schema-constrained extraction over a corpus."""
    o = _schema(schema)
    gw = _gateway(mock_scenario, llm_url)
    corpus = load_corpus(corpus_path)
    diagnostics: list[str] = []
    cands = extract_corpus(corpus, o, gw, shots=load_default_demos(),
                           diagnostics=diagnostics)
    rows = [
        {
            "h": c.h, "r": c.r, "t": c.t,
            "category": c.c, "confidence": c.p_llm, "evidence": c.e,
            "h_type": c.h_type, "t_type": c.t_type,
            "provenance": [f"{d}:{i}" for d, i in c.provenance],
        }
        for c in cands
    ]
    write_jsonl(rows, out)
    inputs = {"corpus": corpus_path}
    if schema:
        inputs["schema"] = schema
    if mock_scenario:
        inputs["scenario"] = mock_scenario
    _write_manifest(Path(out).with_suffix(Path(out).suffix + ".manifest.json"),
                    "extract", {}, inputs, {"candidates": out})
    for line in diagnostics:
        click.echo(line, err=True)
    click.echo(f"{len(rows)} candidates -> {out}")


@main.command("train-kge")
@click.argument("triples_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False),
              help="JSON with TrainConfig fields plus optional 'dim'.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dim", type=int, default=None,
              help="Embedding dimension; overrides the config file.")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Model checkpoint path.")
@domain_errors
def train_kge(triples_path, config_path, seed, dim, out):
    """Train a rotation model on an (h, r, t) triples file."""
    triples = _read_triples(triples_path)
    raw = {}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{config_path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ParseError(f"{config_path}: expected an object")
    file_dim = int(raw.pop("dim", 512))
    model_dim = dim if dim is not None else file_dim
    raw.pop("seed", None)  # the flag owns the seed
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InvalidParams(f"unknown train config keys: {', '.join(unknown)}")
    cfg = TrainConfig(**raw, seed=seed)

    entities = sorted({h for h, _, _ in triples} | {t for _, _, t in triples})
    relations = sorted({r for _, r, _ in triples})
    m = new_model(entities, relations, dim=model_dim, seed=seed, margin=cfg.margin)
    m = train(m, triples, cfg)
    save_model(m, out)

    inputs = {"triples": triples_path}
    if config_path:
        inputs["config"] = config_path
    _write_manifest(Path(out).with_suffix(Path(out).suffix + ".manifest.json"),
                    "train-kge",
                    {"seed": seed, "dim": model_dim,
                     "train_config": dataclasses.asdict(cfg)},
                    inputs, {"model": out})
    loss = m.trainer_state.get("final_loss")
    click.echo(f"trained {len(triples)} triples, dim={model_dim} -> {out}"
               + (f" (loss {loss:.4f})" if isinstance(loss, float) else ""))


@main.command()
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", type=click.Path(exists=True, dir_okay=False),
              help="Schema JSON; bundled schema when omitted.")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False),
              help="Run configuration JSON; defaults when omitted.")
@click.option("--seed", type=int, default=None,
              help="Overrides the config seed.")
@click.option("--mock-scenario", type=click.Path(exists=True, dir_okay=False),
              help="Scripted reply table; takes precedence over --llm-url.")
@click.option("--llm-url", envvar="LECKG_LLM_URL",
              help="Chat-completion endpoint (key via LECKG_LLM_KEY).")
@click.option("--iterations", type=int, default=None,
              help="Overrides t_max (or analysis_rounds with --analysis-mode).")
@click.option("--analysis-mode", is_flag=True,
              help="Re-validate the full pool every round; no early stop.")
@click.option("--checkpoint-dir", type=click.Path(file_okay=False),
              help="Round checkpoints; required for --resume.")
@click.option("--resume", is_flag=True,
              help="Continue from the newest checkpoint pair.")
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@domain_errors
def run(corpus_path, schema, config_path, seed, mock_scenario, llm_url,
        iterations, analysis_mode, checkpoint_dir, resume, out):
    """Full construction loop: extract, validate, refine, export."""
    if resume and not checkpoint_dir:
        raise click.UsageError("--resume needs --checkpoint-dir")
    o = _schema(schema)
    gw = _gateway(mock_scenario, llm_url)
    cfg = RunConfig.from_file(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if iterations is not None:
        field = "analysis_rounds" if analysis_mode else "t_max"
        cfg = dataclasses.replace(cfg, **{field: iterations})
    corpus = load_corpus(corpus_path)

    result = run_pipeline(corpus, o, gw, _encoder(), cfg,
                          checkpoint_dir=checkpoint_dir, resume=resume,
                          analysis_mode=analysis_mode)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph_jsonl = out_dir / "graph.jsonl"
    graph_tsv = out_dir / "graph.tsv"
    export_graph(result.state, graph_jsonl, graph_tsv)
    state_path = out_dir / "state.json"
    save_state(result.state, state_path, gw=gw)
    save_model(result.model, out_dir / "model.ckpt")
    write_jsonl(result.routing_log, out_dir / "routing_log.jsonl")
    write_jsonl(result.feedback_log, out_dir / "feedback_log.jsonl")

    inputs = {"corpus": corpus_path}
    if schema:
        inputs["schema"] = schema
    if config_path:
        inputs["config"] = config_path
    if mock_scenario:
        inputs["scenario"] = mock_scenario
    outputs = {
        "graph_jsonl": graph_jsonl, "graph_tsv": graph_tsv,
        "state": state_path, "model": out_dir / "model.ckpt",
        "routing_log": out_dir / "routing_log.jsonl",
        "feedback_log": out_dir / "feedback_log.jsonl",
    }
    manifest = build_manifest(cfg, inputs, outputs, __version__)
    manifest["command"] = "run"
    manifest["params"] = {"analysis_mode": analysis_mode, "resume": resume,
                          "iterations": iterations}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, indent=1, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    state = result.state
    click.echo(f"t={state.t} converged={state.converged} "
               f"valid={len(state.valid)} -> {out_dir}")


@main.command("eval")
@click.argument("pred_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("gold_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice([MODE_EXACT, MODE_SEMANTIC]),
              default=MODE_EXACT, show_default=True)
@click.option("--threshold", type=float, default=DEFAULT_SIM_THRESHOLD,
              show_default=True, help="Semantic-mode similarity cutoff.")
@click.option("--schema", type=click.Path(exists=True, dir_okay=False),
              help="Widen macro-F1 to every schema relation.")
@click.option("--out", type=click.Path(dir_okay=False),
              help="Write the report as JSON here as well.")
@domain_errors
def eval_cmd(pred_path, gold_path, mode, threshold, schema, out):
    """Score predicted triples against gold triples."""
    pred = _read_triples(pred_path)
    gold = _read_triples(gold_path)
    similarity = EncoderSimilarity(_encoder()) if mode == MODE_SEMANTIC else None
    cfg = MatchConfig(mode=mode, sim_threshold=threshold, similarity=similarity)
    macro_over = _schema(schema) if schema else None
    report = evaluate(pred, gold, cfg, macro_over=macro_over)
    if out:
        Path(out).write_text(
            json.dumps(report.to_dict(), ensure_ascii=False,
                       indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        inputs = {"pred": pred_path, "gold": gold_path}
        if schema:
            inputs["schema"] = schema
        _write_manifest(Path(out).with_suffix(Path(out).suffix + ".manifest.json"),
                        "eval", {"mode": mode, "threshold": threshold},
                        inputs, {"report": out})
    click.echo(render_report(report))


@main.command("export-review")
@click.argument("graph_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--n", type=int, default=200, show_default=True,
              help="Sample size; the whole graph when smaller.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Review sheet TSV.")
@domain_errors
def export_review(graph_path, n, seed, out):
    """Draw a seeded review sample from an exported graph."""
    if n < 1:
        raise click.UsageError("--n must be >= 1")
    rows = _read_rows(graph_path)
    for i, row in enumerate(rows, start=1):
        if not {"h", "r", "t"} <= row.keys():
            raise ParseError(f"{graph_path}:{i}: missing h/r/t")
    # sort before sampling so the draw depends on content, not input order
    rows.sort(key=lambda row: (row["h"], row["r"], row["t"]))
    k = min(n, len(rows))
    sample = random.Random(seed).sample(rows, k)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("h\tr\tt\tscore\tevidence\tverdict\n")
        for row in sample:
            score = row.get("score")
            fh.write("\t".join([
                str(row["h"]), str(row["r"]), str(row["t"]),
                "" if score is None else f"{float(score):.6f}",
                str(row.get("evidence", "")).replace("\t", " "),
                "",
            ]) + "\n")
    _write_manifest(Path(out).with_suffix(Path(out).suffix + ".manifest.json"),
                    "export-review", {"n": n, "seed": seed, "drawn": k},
                    {"graph": graph_path}, {"review": out})
    click.echo(f"{k} rows -> {out}")


if __name__ == "__main__":
    main()
