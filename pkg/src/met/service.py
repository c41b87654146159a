"""Curation HTTP service: tree browsing, review queues, adjudication, jobs.

All mutation funnels through one writer lock and optimistic version checks:
clients send the tree version they believe is current and get a 409 when it
moved. Every mutation lands in the snapshot file and the append-only audit
log before the response returns, so a crash never loses an acknowledged
change.
"""

from __future__ import annotations

import hashlib
import json
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from fastapi import Body, FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware

from . import attachment, conflict
from .errors import FrozenNode, MetError
from .taxonomy import (
    TaxonomyTree,
    append_audit,
    read_audit,
    snapshot_load,
    snapshot_save,
)
from .textutil import normalize_name

SNAPSHOT_CACHE_LIMIT = 16
JOB_STAGES = (
    "extract",
    "cluster",
    "attach",
    "resolve",
    "scan",
    "coverage",
    "acquire",
    "synthesize",
)


def _node_json(node) -> dict:
    return {
        "id": node.id,
        "name": node.name,
        "axis": node.axis,
        "tier": node.tier,
        "parent": node.parent_id,
        "frequency": node.frequency,
        "frozen": node.frozen,
        "status": node.status,
    }


class ServiceState:
    def __init__(self, data_dir: str | Path) -> None:
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.tree_path = self.data_dir / "tree.json"
        self.audit_path = self.data_dir / "audit.jsonl"
        self.proposals_path = self.data_dir / "proposals.jsonl"
        self.resolutions_path = self.data_dir / "resolutions.jsonl"
        self.coverage_path = self.data_dir / "coverage.json"

        self.lock = threading.RLock()
        if self.tree_path.is_file():
            self.tree = snapshot_load(self.tree_path)
        else:
            self.tree = TaxonomyTree()
        self.tree.audit_sink = lambda record: append_audit(self.audit_path, record)

        self.proposals: list[attachment.InsertionProposal] = []
        if self.proposals_path.is_file():
            self.proposals = attachment.load_proposals(self.proposals_path)

        self.resolved_conflicts: set[str] = set()
        if self.resolutions_path.is_file():
            with open(self.resolutions_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self.resolved_conflicts.add(normalize_name(json.loads(line)["entity"]))

        self.snapshot_cache: dict[int, dict] = {}
        self.jobs: dict[str, dict] = {}
        self.executor = ThreadPoolExecutor(max_workers=2)
        self._job_seq = 0

    # ------------------------------------------------------------ persistence

    def save(self) -> None:
        snapshot = self.tree.to_snapshot()
        snapshot_save(self.tree, self.tree_path)
        self.snapshot_cache[self.tree.version] = snapshot
        while len(self.snapshot_cache) > SNAPSHOT_CACHE_LIMIT:
            self.snapshot_cache.pop(min(self.snapshot_cache))

    def save_proposals(self) -> None:
        attachment.save_proposals(self.proposals_path, self.proposals)

    def log_resolution(self, record: dict) -> None:
        with open(self.resolutions_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        self.resolved_conflicts.add(normalize_name(record["entity"]))

    def check_version(self, body: Optional[dict]) -> None:
        if body and body.get("version") is not None:
            if int(body["version"]) != self.tree.version:
                raise HTTPException(
                    status_code=409,
                    detail=f"tree moved to version {self.tree.version}",
                )

    def submit_job(self, stage: str, config: dict) -> dict:
        self._job_seq += 1
        job_id = f"j{self._job_seq}-{uuid.uuid4().hex[:8]}"
        digest = hashlib.sha256(
            json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
        ).hexdigest()[:16]
        descriptor = {
            "id": job_id,
            "stage": stage,
            "config_digest": digest,
            "state": "queued",
            "progress": {},
            "result": None,
            "error": None,
        }
        self.jobs[job_id] = descriptor

        def run() -> None:
            with self.lock:
                descriptor["state"] = "running"
            try:
                result = run_job_stage(self, stage, config, descriptor["progress"])
                with self.lock:
                    descriptor["result"] = result
                    descriptor["state"] = "done"
            except Exception as exc:
                with self.lock:
                    descriptor["error"] = f"{type(exc).__name__}: {exc}"
                    descriptor["state"] = "failed"

        self.executor.submit(run)
        return descriptor


def run_job_stage(state: ServiceState, stage: str, config: dict, progress: dict) -> dict:
    """Background stage runners operating on files named in the config."""
    if stage == "scan":
        from .matcher import Automaton, PatternDictionary, scan_corpus

        dictionary = PatternDictionary.from_jsonl(config["dictionary"])
        automaton = Automaton.build(dictionary)
        reports_path = config.get("out_reports")
        sink = None
        handle = None
        if reports_path:
            handle = open(reports_path, "w", encoding="utf-8")

            def sink(report):
                handle.write(json.dumps(report.to_json(), ensure_ascii=False) + "\n")
                progress["docs"] = progress.get("docs", 0) + 1

        def read_corpus():
            with open(config["corpus"], encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        try:
                            yield json.loads(line)
                        except ValueError:
                            yield {"malformed": True}

        try:
            stats = scan_corpus(
                automaton,
                read_corpus(),
                on_report=sink,
                longest_only=bool(config.get("longest_only", False)),
                boundaries=bool(config.get("boundaries", False)),
            )
        finally:
            if handle is not None:
                handle.close()
        if config.get("out_stats"):
            Path(config["out_stats"]).write_text(
                json.dumps(stats.to_json(), indent=2), encoding="utf-8"
            )
        progress["docs"] = stats.docs
        return stats.to_json()

    if stage == "coverage":
        import numpy as np

        from .coverage import EmbeddingSet, coverage_report

        def load_set(path: str) -> EmbeddingSet:
            labels, vectors = [], []
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = json.loads(line)
                        labels.append(rec["label"])
                        vectors.append(rec["vector"])
            arr = np.asarray(vectors, dtype=np.float64)
            arr = arr / np.linalg.norm(arr, axis=1)[:, None]
            return EmbeddingSet(labels, arr)

        report = coverage_report(load_set(config["target"]), load_set(config["reference"]))
        payload = report.to_json()
        state.coverage_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        progress["items"] = len(payload["per_item_max"])
        return payload

    if stage == "resolve":
        with state.lock:
            cases = conflict.resolve_all(state.tree, log_path=state.resolutions_path)
            for case in cases:
                state.resolved_conflicts.add(normalize_name(case.entity_name))
            state.save()
        progress["resolved"] = len(cases)
        return {"resolved": len(cases)}

    if stage == "extract":
        from .extraction import extract_corpus
        from .providers import make_text_provider

        provider = make_text_provider(config.get("provider", {}))

        def read_corpus():
            with open(config["corpus"], encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        yield json.loads(line)

        table, stats = extract_corpus(
            read_corpus(),
            provider,
            stage=int(config.get("extraction_stage", 2)),
            batch_size=int(config.get("batch_size", 30)),
        )
        if config.get("cleanse", True):
            table = table.cleanse(
                min_entity_freq=int(config.get("min_entity_freq", 10)),
                min_type_size=int(config.get("min_type_size", 5)),
            )
        if config.get("out_table"):
            Path(config["out_table"]).write_text(
                json.dumps(table.to_json(), indent=2), encoding="utf-8"
            )
        progress["batches"] = stats.batches
        return {
            "batches": stats.batches,
            "calls": stats.provider_calls,
            "mentions": stats.mentions,
            "entities": len(table.entity_counts),
            "quarantined": stats.quarantined,
        }

    if stage == "cluster":
        from .clustering import build_hierarchy, embed_texts
        from .extraction import FrequencyTable
        from .providers import make_embedding_provider

        table = FrequencyTable.from_json(
            json.loads(Path(config["table"]).read_text(encoding="utf-8"))
        )
        embedder = make_embedding_provider(config.get("embedding", {}))
        names = sorted(table.entity_counts)
        vectors = embed_texts([table.display_name(n) for n in names], embedder)
        embeddings = {name: vectors[i] for i, name in enumerate(names)}
        tree = build_hierarchy(
            table,
            embeddings,
            axis_map=dict(config.get("axis_map", {})),
            seed=int(config.get("seed", 0)),
        )
        snapshot_save(tree, config["out_tree"])
        progress["entities"] = len(names)
        return {"entities": len(names), "nodes": len(tree.nodes)}

    if stage == "attach":
        from .attachment import (
            build_attach_prompt,
            parse_attach_response,
            serialize_core,
        )
        from .providers import make_text_provider

        provider = make_text_provider(config.get("provider", {}))
        entities = [
            line.strip()
            for line in Path(config["entities"]).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        with state.lock:
            core = serialize_core(
                state.tree, token_budget=int(config.get("token_budget", 4000))
            )
        produced = 0
        for name in entities:
            prompt = build_attach_prompt(core, name)
            try:
                text = provider.generate(prompt)
                proposal = parse_attach_response(text, entity_name=name)
            except MetError as exc:
                proposal = attachment.InsertionProposal(
                    entity_name=name,
                    proposed_path=(),
                    reasoning=str(exc),
                    status="rejected",
                    rejection_cause="ParseFailure",
                )
            with state.lock:
                state.proposals.append(proposal)
                state.save_proposals()
            produced += 1
            progress["entities"] = produced
        return {"proposals": produced}

    if stage == "acquire":
        from . import acquisition
        from .providers import (
            FixtureJudge,
            FixtureRetrievalClient,
            FixtureTeacher,
            make_embedding_provider,
        )

        retrieval = FixtureRetrievalClient.from_file(config["retrieval_fixture"])
        teacher = FixtureTeacher.from_file(config["teacher_fixture"])
        judge = FixtureJudge.from_file(config["judge_fixture"])
        embedder = make_embedding_provider(config.get("embedding", {}))
        manifest = None
        if config.get("eval_manifest"):
            manifest = acquisition.EvalManifest.from_file(config["eval_manifest"])
        node_ids = [int(x) for x in config["nodes"]]
        with state.lock:
            result = acquisition.run_pipeline(
                state.tree,
                node_ids,
                client=retrieval,
                teacher=teacher,
                judge=judge,
                text_embedder=embedder,
                image_embedder=embedder,
                eval_manifest=manifest,
                sample_rate=float(config.get("sample_rate", 1.0)),
                seed=int(config.get("seed", 0)),
            )
        if config.get("out_records"):
            acquisition.save_records(config["out_records"], result.kept)
        progress["kept"] = len(result.kept)
        return {
            "kept": len(result.kept),
            "rejected": len(result.rejected),
            "quarantined": len(result.quarantined),
            "stage_counts": result.stage_counts,
        }

    if stage == "synthesize":
        from . import synthesis
        from .providers import make_text_provider

        provider = make_text_provider(config.get("provider", {}))
        out_dir = Path(config["out_dir"])
        track = int(config.get("track", 2))
        if track == 1:
            records = [
                json.loads(line)
                for line in Path(config["records"]).read_text(encoding="utf-8").splitlines()
                if line.strip()
            ]
            with state.lock:
                samples = synthesis.generate_track1(records, state.tree, provider)
            counts = synthesis.export(samples, [], out_dir)
        else:
            from .matcher import MatchReport

            reports = [
                MatchReport.from_json(json.loads(line))
                for line in Path(config["reports"]).read_text(encoding="utf-8").splitlines()
                if line.strip()
            ]
            with state.lock:
                chains = []
                for report in reports:
                    chains.extend(
                        synthesis.extract_chains(
                            report,
                            state.tree,
                            max_chains=int(config.get("max_chains", 4)),
                        )
                    )
                samples = synthesis.generate_track2(chains, provider)
            counts = synthesis.export([], samples, out_dir)
        progress.update(counts)
        return counts

    raise ValueError(f"unknown job stage {stage!r}")


def create_app(data_dir: str | Path, state: Optional[ServiceState] = None) -> FastAPI:
    app = FastAPI(title="taxonomy curation service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    st = state or ServiceState(data_dir)
    app.state.service = st

    # --------------------------------------------------------------- reading

    @app.get("/tree")
    def get_tree(version: Optional[int] = Query(default=None)):
        with st.lock:
            if version is None or version == st.tree.version:
                return st.tree.to_snapshot()
            cached = st.snapshot_cache.get(version)
            if cached is None:
                raise HTTPException(status_code=404, detail=f"version {version} not cached")
            return cached

    @app.get("/tree/node/{node_id}")
    def get_node(node_id: int):
        with st.lock:
            if node_id not in st.tree.nodes:
                raise HTTPException(status_code=404, detail=f"node {node_id} unknown")
            node = st.tree.node(node_id)
            children = [_node_json(c) for c in st.tree.children_of(node_id)]
            path = []
            current = node
            while current is not None:
                path.append(current.name)
                current = (
                    st.tree.node(current.parent_id) if current.parent_id is not None else None
                )
            return {"node": _node_json(node), "children": children, "path": path[::-1]}

    @app.get("/audit")
    def get_audit(since: int = Query(default=0)):
        records = []
        if st.audit_path.is_file():
            records = [r.to_json() for r in read_audit(st.audit_path)]
        return {"records": records[since:], "next": len(records)}

    @app.get("/coverage/latest")
    def get_coverage():
        if not st.coverage_path.is_file():
            raise HTTPException(status_code=404, detail="no coverage report yet")
        return json.loads(st.coverage_path.read_text(encoding="utf-8"))

    # ------------------------------------------------------------- proposals

    @app.get("/review/proposals")
    def list_proposals(status: Optional[str] = Query(default=None)):
        with st.lock:
            out = []
            for index, proposal in enumerate(st.proposals):
                if status is not None and proposal.status != status:
                    continue
                record = proposal.to_json()
                record["id"] = f"p{index}"
                out.append(record)
            return {"proposals": out, "tree_version": st.tree.version}

    @app.post("/review/proposals/{proposal_id}")
    def decide_proposal(proposal_id: str, body: dict = Body(default={})):
        action = body.get("action")
        if action not in ("approve", "reject"):
            raise HTTPException(status_code=400, detail="action must be approve or reject")
        if not proposal_id.startswith("p") or not proposal_id[1:].isdigit():
            raise HTTPException(status_code=404, detail=f"proposal {proposal_id} unknown")
        index = int(proposal_id[1:])
        with st.lock:
            if index >= len(st.proposals):
                raise HTTPException(status_code=404, detail=f"proposal {proposal_id} unknown")
            st.check_version(body)
            proposal = st.proposals[index]
            if proposal.status != "pending":
                raise HTTPException(
                    status_code=409, detail=f"proposal already {proposal.status}"
                )
            comment = str(body.get("comment", "")).strip()
            if action == "reject":
                proposal.status = "rejected"
                proposal.rejection_cause = "human rejection"
                st.tree.record_rejection(
                    proposal.proposed_path or [proposal.entity_name],
                    comment or "rejected during review",
                    actor="human",
                )
                st.save_proposals()
                return {"status": "rejected", "cause": proposal.rejection_cause}
            cause = attachment.validate_proposal(st.tree, proposal)
            if cause is not None:
                proposal.status = "rejected"
                proposal.rejection_cause = cause
                st.tree.record_rejection(
                    proposal.proposed_path or [proposal.entity_name],
                    f"{cause}: stale against current tree",
                    actor="human",
                )
                st.save_proposals()
                return {"status": "rejected", "cause": cause}
            parent_id = attachment._resolve_parent(st.tree, proposal.proposed_path)
            axis = st.tree.node(parent_id).axis if parent_id is not None else "other"
            reasoning = proposal.reasoning
            if comment:
                reasoning = f"{reasoning} [approved: {comment}]"
            node_id = st.tree.add_node(
                parent_id,
                proposal.proposed_path[-1],
                axis,
                actor="human",
                reasoning=reasoning,
            )
            proposal.status = "applied"
            st.save()
            st.save_proposals()
            return {"status": "applied", "node_id": node_id, "version": st.tree.version}

    # ------------------------------------------------------------- conflicts

    @app.get("/conflicts")
    def list_conflicts(open_only: bool = Query(default=True, alias="open")):
        with st.lock:
            cases = conflict.detect_conflicts(st.tree)
            out = []
            for case in cases:
                out.append(
                    {
                        "id": normalize_name(case.entity_name),
                        "entity": case.entity_name,
                        "paths": case.candidate_paths,
                        "leaf_ids": case.leaf_ids,
                        "labels": [conflict.path_label(i) for i in range(len(case.leaf_ids))],
                    }
                )
            return {"conflicts": out, "tree_version": st.tree.version}

    @app.post("/conflicts/{conflict_id}")
    def decide_conflict(conflict_id: str, body: dict = Body(default={})):
        if body.get("action") not in (None, "keep_path"):
            raise HTTPException(
                status_code=400, detail="only keep_path decisions apply to conflicts"
            )
        with st.lock:
            st.check_version(body)
            cases = {
                normalize_name(c.entity_name): c
                for c in conflict.detect_conflicts(st.tree)
            }
            case = cases.get(normalize_name(conflict_id))
            if case is None:
                if normalize_name(conflict_id) in st.resolved_conflicts:
                    raise HTTPException(status_code=409, detail="conflict already resolved")
                raise HTTPException(status_code=404, detail="no such conflict")
            keep = body.get("keep")
            keep_index: Optional[int] = None
            if isinstance(keep, int):
                keep_index = keep
            elif isinstance(keep, str):
                for i in range(len(case.leaf_ids)):
                    if conflict.path_label(i) == keep:
                        keep_index = i
                        break
            if keep_index is None or not 0 <= keep_index < len(case.leaf_ids):
                raise HTTPException(status_code=400, detail="keep must name a case path")
            comment = str(body.get("comment", "")).strip() or "human adjudication"
            case.resolution = conflict.Resolution(
                kept_path=case.candidate_paths[keep_index],
                deleted_paths=[
                    p for i, p in enumerate(case.candidate_paths) if i != keep_index
                ],
                reasoning=comment,
                actor="human",
            )
            pruned = conflict.apply_resolution(st.tree, case)
            st.log_resolution(
                {
                    "entity": case.entity_name,
                    "kept": ".".join(case.resolution.kept_path),
                    "deleted": [".".join(p) for p in case.resolution.deleted_paths],
                    "actor": "human",
                    "reasoning": comment,
                    "evidence": [list(e) for e in case.evidence],
                }
            )
            st.save()
            return {
                "kept": case.resolution.kept_path,
                "pruned": pruned,
                "version": st.tree.version,
            }

    # ----------------------------------------------------------------- nodes

    @app.post("/nodes/{node_id}/freeze")
    def freeze_node(node_id: int, body: dict = Body(default={})):
        with st.lock:
            if node_id not in st.tree.nodes:
                raise HTTPException(status_code=404, detail=f"node {node_id} unknown")
            st.check_version(body)
            st.tree.freeze_node(
                node_id,
                actor="human",
                reasoning=str(body.get("reasoning", "frozen during review")),
            )
            st.save()
            return {"frozen": True, "version": st.tree.version}

    @app.post("/nodes/{node_id}/prune")
    def prune_node(node_id: int, body: dict = Body(default={})):
        with st.lock:
            if node_id not in st.tree.nodes:
                raise HTTPException(status_code=404, detail=f"node {node_id} unknown")
            st.check_version(body)
            try:
                count = st.tree.prune_subtree(
                    node_id,
                    reasoning=str(body.get("reasoning", "pruned during review")),
                    actor="human",
                )
            except FrozenNode as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from exc
            st.save()
            return {"pruned": count, "version": st.tree.version}

    # ------------------------------------------------------------------ jobs

    @app.post("/jobs")
    def post_job(body: dict = Body(default={})):
        stage = body.get("stage")
        if stage not in JOB_STAGES:
            raise HTTPException(status_code=400, detail=f"unknown stage {stage!r}")
        with st.lock:
            descriptor = st.submit_job(stage, dict(body.get("config", {})))
        return descriptor

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        with st.lock:
            descriptor = st.jobs.get(job_id)
            if descriptor is None:
                raise HTTPException(status_code=404, detail=f"job {job_id} unknown")
            return descriptor

    @app.exception_handler(MetError)
    def met_error_handler(request, exc: MetError):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400, content={"detail": str(exc)})

    return app
