"""Command-line entry points for every pipeline stage."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import attachment as attachment_mod
from . import conflict as conflict_mod
from .clustering import build_hierarchy, embed_texts
from .config import load_config
from .coverage import EmbeddingSet, coverage_report
from .errors import MetError
from .extraction import FrequencyTable, extract_corpus
from .matcher import Automaton, PatternDictionary, scan_corpus
from .providers import (
    FixtureRetrievalClient,
    FixtureSearchTool,
    make_embedding_provider,
    make_text_provider,
)
from .taxonomy import (
    read_audit,
    replay_audit,
    snapshot_load,
    snapshot_save,
)


def _read_jsonl(path: str):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _text_provider(config: dict):
    try:
        return make_text_provider(config)
    except MetError as exc:
        _fail(str(exc))


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TOML config file; defaults apply when omitted.")
@click.option("--seed", type=int, default=None,
              help="Override every seeded stage (clustering, sampling).")
@click.option("--provider-mode", type=click.Choice(["mock", "http"]), default=None,
              help="Override the text and embedding provider mode.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, seed: int | None,
         provider_mode: str | None) -> None:
    """Taxonomy engineering toolkit."""
    ctx.ensure_object(dict)
    cfg = load_config(config_path)
    if seed is not None:
        cfg["clustering"]["seed"] = seed
        cfg["acquisition"]["seed"] = seed
        cfg["embedding"]["seed"] = seed
    if provider_mode is not None:
        cfg["provider"]["mode"] = provider_mode
        cfg["embedding"]["mode"] = provider_mode
    ctx.obj["config"] = cfg


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--out-table", required=True, type=click.Path())
@click.option("--stage", type=click.IntRange(1, 2), default=2, show_default=True)
@click.option("--batch-size", type=int, default=None)
@click.option("--quarantine", type=click.Path(), default=None)
@click.pass_context
def extract(ctx, corpus, out_table, stage, batch_size, quarantine):
    """Run one extraction stage over a JSONL corpus into a frequency table."""
    cfg = ctx.obj["config"]
    provider = _text_provider(cfg["provider"])
    size = batch_size or cfg["extraction"]["batch_size"]
    try:
        table, stats = extract_corpus(
            _read_jsonl(corpus),
            provider,
            stage=stage,
            batch_size=size,
            max_workers=cfg["extraction"]["max_workers"],
        )
    except MetError as exc:
        _fail(str(exc))
    Path(out_table).write_text(
        json.dumps(table.to_json(), ensure_ascii=False, indent=2), encoding="utf-8"
    )
    if quarantine and stats.quarantine:
        with open(quarantine, "w", encoding="utf-8") as fh:
            for item in stats.quarantine:
                fh.write(json.dumps(item, ensure_ascii=False) + "\n")
    click.echo(
        f"batches={stats.batches} calls={stats.provider_calls} "
        f"mentions={stats.mentions} warnings={stats.warnings} "
        f"quarantined={stats.quarantined}"
    )


@main.command()
@click.option("--table", "table_path", required=True, type=click.Path(exists=True))
@click.option("--out-tree", required=True, type=click.Path())
@click.option("--axis-map", type=click.Path(exists=True), default=None,
              help="JSON mapping of normalized type names to axes.")
@click.option("--min-entity-freq", type=int, default=None)
@click.option("--min-type-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def cluster(ctx, table_path, out_tree, axis_map, min_entity_freq, min_type_size, seed):
    """Cleanse a frequency table and build the candidate hierarchy."""
    cfg = ctx.obj["config"]
    table = FrequencyTable.from_json(json.loads(Path(table_path).read_text(encoding="utf-8")))
    cleansed = table.cleanse(
        min_entity_freq or cfg["extraction"]["min_entity_freq"],
        min_type_size or cfg["extraction"]["min_type_size"],
    )
    if not cleansed.type_members:
        _fail("no types survive cleansing; relax the thresholds")
    provider = make_embedding_provider(cfg["embedding"])
    names = sorted(cleansed.entity_counts)
    vectors = embed_texts([cleansed.display_name(n) for n in names], provider)
    embeddings = {name: vectors[i] for i, name in enumerate(names)}
    axes = {}
    if axis_map:
        axes = json.loads(Path(axis_map).read_text(encoding="utf-8"))
    try:
        tree = build_hierarchy(
            cleansed, embeddings, axis_map=axes,
            seed=cfg["clustering"]["seed"] if seed is None else seed,
        )
    except MetError as exc:
        _fail(str(exc))
    snapshot_save(tree, out_tree)
    click.echo(f"nodes={len(tree.nodes)} version={tree.version} -> {out_tree}")


@main.command()
@click.option("--tree", "tree_path", required=True, type=click.Path(exists=True))
@click.option("--entities", "entities_path", required=True, type=click.Path(exists=True),
              help="One entity name per line.")
@click.option("--out-proposals", required=True, type=click.Path())
@click.option("--token-budget", type=int, default=None)
@click.option("--flush-size", type=int, default=None)
@click.pass_context
def attach(ctx, tree_path, entities_path, out_proposals, token_budget, flush_size):
    """Propose insertions for new entities against the frozen core."""
    cfg = ctx.obj["config"]
    tree = snapshot_load(tree_path)
    provider = _text_provider(cfg["provider"])
    names = [
        line.strip()
        for line in Path(entities_path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    try:
        applied, proposals = attachment_mod.attach_entities(
            tree,
            names,
            provider,
            token_budget=token_budget or cfg["attachment"]["token_budget"],
            flush_size=flush_size or cfg["attachment"]["flush_size"],
        )
    except MetError as exc:
        _fail(str(exc))
    attachment_mod.save_proposals(out_proposals, proposals)
    snapshot_save(tree, tree_path)
    click.echo(f"applied={applied} proposals={len(proposals)} version={tree.version}")


@main.command()
@click.option("--tree", "tree_path", required=True, type=click.Path(exists=True))
@click.option("--search-fixture", type=click.Path(exists=True), default=None)
@click.option("--log", "log_path", type=click.Path(), default=None)
@click.option("--use-agent/--rules-only", default=False, show_default=True)
@click.pass_context
def resolve(ctx, tree_path, search_fixture, log_path, use_agent):
    """Detect and resolve duplicate-placement conflicts to a fixpoint."""
    cfg = ctx.obj["config"]
    tree = snapshot_load(tree_path)
    generator = None
    search_tool = None
    if use_agent:
        if not search_fixture:
            _fail("--use-agent needs --search-fixture (or an http tool in config)")
        search_tool = FixtureSearchTool.from_file(search_fixture)
        generator = _text_provider(cfg["provider"])
    try:
        cases = conflict_mod.resolve_all(
            tree,
            generator=generator,
            search_tool=search_tool,
            max_steps=cfg["conflict"]["max_steps"],
            log_path=log_path,
        )
    except MetError as exc:
        _fail(str(exc))
    snapshot_save(tree, tree_path)
    click.echo(f"resolved={len(cases)} version={tree.version}")


@main.command()
@click.option("--dict", "dict_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--stats", "stats_path", type=click.Path(), default=None)
@click.option("--longest-only", is_flag=True, default=False)
@click.option("--boundaries", is_flag=True, default=False)
def scan(dict_path, corpus, out_path, stats_path, longest_only, boundaries):
    """Scan a corpus for dictionary surfaces with the compiled automaton."""
    try:
        dictionary = PatternDictionary.from_jsonl(dict_path)
        automaton = Automaton.build(dictionary)
    except MetError as exc:
        _fail(str(exc))
    handle = open(out_path, "w", encoding="utf-8") if out_path else None

    def sink(report):
        if handle is not None:
            handle.write(json.dumps(report.to_json(), ensure_ascii=False) + "\n")

    def reader():
        for record in _read_jsonl(corpus):
            yield record

    try:
        stats = scan_corpus(
            automaton, reader(), on_report=sink,
            longest_only=longest_only, boundaries=boundaries,
        )
    finally:
        if handle is not None:
            handle.close()
    if stats_path:
        Path(stats_path).write_text(json.dumps(stats.to_json(), indent=2), encoding="utf-8")
    click.echo(
        f"docs={stats.docs} matches={stats.total_matches} "
        f"skipped={stats.skipped} coverage={stats.coverage_fraction:.4f}"
    )


@main.command()
@click.option("--target", required=True, type=click.Path(exists=True),
              help="JSONL of {label, vector} rows.")
@click.option("--reference", required=True, type=click.Path(exists=True))
@click.option("--report", "report_path", required=True, type=click.Path())
def coverage(target, reference, report_path):
    """Asymmetric coverage between two labeled embedding sets."""

    def load_set(path: str) -> EmbeddingSet:
        labels, vectors = [], []
        for rec in _read_jsonl(path):
            labels.append(rec["label"])
            vectors.append(rec["vector"])
        arr = np.asarray(vectors, dtype=np.float64)
        arr = arr / np.linalg.norm(arr, axis=1)[:, None]
        return EmbeddingSet(labels, arr)

    try:
        result = coverage_report(load_set(target), load_set(reference))
    except MetError as exc:
        _fail(str(exc))
    Path(report_path).write_text(json.dumps(result.to_json(), indent=2), encoding="utf-8")
    click.echo(f"forward={result.forward:.6f} backward={result.backward:.6f}")


@main.command()
@click.option("--tree", "tree_path", required=True, type=click.Path(exists=True))
@click.option("--nodes", "node_ids", required=True,
              help="Comma-separated anchor node ids.")
@click.option("--retrieval-fixture", required=True, type=click.Path(exists=True))
@click.option("--teacher-fixture", required=True, type=click.Path(exists=True),
              help='JSON {"labels": {id: {...}}, "failing": [ids]}.')
@click.option("--judge-fixture", required=True, type=click.Path(exists=True),
              help='JSON {"verdicts": {id: {...}}, "failing": [ids]}.')
@click.option("--eval-manifest", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--quarantine", "quarantine_path", type=click.Path(), default=None)
@click.pass_context
def acquire(ctx, tree_path, node_ids, retrieval_fixture, teacher_fixture,
            judge_fixture, eval_manifest, out_path, quarantine_path):
    """Run the image acquisition cascade for the given anchor nodes."""
    from .acquisition import EvalManifest, run_pipeline, save_records
    from .providers import FixtureJudge, FixtureTeacher

    cfg = ctx.obj["config"]
    acq = cfg["acquisition"]
    tree = snapshot_load(tree_path)
    client = FixtureRetrievalClient.from_file(retrieval_fixture)
    t_raw = json.loads(Path(teacher_fixture).read_text(encoding="utf-8"))
    teacher = FixtureTeacher(t_raw.get("labels", {}), set(t_raw.get("failing", [])))
    j_raw = json.loads(Path(judge_fixture).read_text(encoding="utf-8"))
    judge = FixtureJudge(j_raw.get("verdicts", {}), set(j_raw.get("failing", [])))
    manifest = EvalManifest.from_file(eval_manifest) if eval_manifest else None
    text_embedder = make_embedding_provider(cfg["embedding"])
    try:
        ids = [int(x) for x in node_ids.split(",") if x.strip()]
    except ValueError:
        raise click.UsageError("--nodes must be comma-separated integers")
    try:
        result = run_pipeline(
            tree, ids, client, teacher, judge, text_embedder,
            image_embedder=text_embedder,
            eval_manifest=manifest,
            limit=acq["limit"],
            sample_rate=1.0,
            seed=acq["seed"],
            student_threshold=acq["student_threshold"],
            coarse_threshold=acq["coarse_threshold"],
            hamming_max=acq["hamming_max"],
            cosine_max=acq["cosine_max"],
        )
    except MetError as exc:
        _fail(str(exc))
    save_records(out_path, result.kept)
    if quarantine_path and result.quarantined:
        save_records(quarantine_path, result.quarantined)
    click.echo(json.dumps(result.stage_counts))


@main.command()
@click.option("--track", type=click.IntRange(1, 2), required=True)
@click.option("--tree", "tree_path", required=True, type=click.Path(exists=True))
@click.option("--records", "records_path", type=click.Path(exists=True), default=None,
              help="Track 1: acquisition records JSONL with alt_text + entities.")
@click.option("--reports", "reports_path", type=click.Path(exists=True), default=None,
              help="Track 2: longest-only scan reports JSONL.")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--max-chains", type=int, default=None)
@click.pass_context
def synthesize(ctx, track, tree_path, records_path, reports_path, out_dir, max_chains):
    """Generate enriched captions (track 1) or reasoning VQA items (track 2)."""
    from .matcher import MatchReport
    from .synthesis import export, extract_chains, generate_track1, generate_track2

    if track == 1 and not records_path:
        raise click.UsageError("track 1 needs --records")
    if track == 2 and not reports_path:
        raise click.UsageError("track 2 needs --reports")
    cfg = ctx.obj["config"]
    tree = snapshot_load(tree_path)
    provider = _text_provider(cfg["provider"])
    track1 = []
    track2 = []
    if track == 1:
        try:
            track1 = generate_track1(list(_read_jsonl(records_path)), tree, provider)
        except MetError as exc:
            _fail(str(exc))
    else:
        chains = []
        for obj in _read_jsonl(reports_path):
            report = MatchReport.from_json(obj)
            chains.extend(
                extract_chains(
                    report, tree, max_chains=max_chains or cfg["synthesis"]["max_chains"]
                )
            )
        try:
            track2 = generate_track2(chains, provider)
        except MetError as exc:
            _fail(str(exc))
    counts = export(track1, track2, out_dir)
    click.echo(json.dumps(counts))


@main.command()
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.pass_context
def serve(ctx, data_dir, host, port):
    """Run the curation HTTP service."""
    import uvicorn

    from .service import create_app

    cfg = ctx.obj["config"]["service"]
    app = create_app(data_dir)
    uvicorn.run(app, host=host or cfg["host"], port=port or cfg["port"])


@main.group()
def audit():
    """Audit log tooling."""


@audit.command("replay")
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--verify-snapshot", type=click.Path(exists=True), default=None,
              help="Fail unless the replayed tree matches this snapshot byte for byte.")
def audit_replay(log_path, out_path, verify_snapshot):
    """Rebuild a tree from its audit log."""
    records = read_audit(log_path)
    try:
        tree = replay_audit(records)
    except MetError as exc:
        _fail(str(exc))
    if out_path:
        snapshot_save(tree, out_path)
    if verify_snapshot:
        expected = Path(verify_snapshot).read_bytes()
        actual = tree.snapshot_bytes()
        if expected != actual:
            click.echo("replay mismatch: snapshot differs from audit replay", err=True)
            sys.exit(1)
        click.echo("replay verified: snapshot matches audit log")
    else:
        click.echo(f"replayed nodes={len(tree.nodes)} version={tree.version}")


if __name__ == "__main__":
    main()
