"""Acceptance gate: one test per shipped guarantee, at its stated tolerance.

Each test here pins a headline behavior of the toolkit end to end; the
per-module suites cover the edge cases. Every assertion states its numeric
tolerance inline so a regression shows up as a specific broken guarantee.
"""

from __future__ import annotations

import json
import math
import random
import re
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import brute_amcs, brute_silhouette, naive_matches, unit

from met.acquisition import (
    CandidateRecord,
    EvalManifest,
    coarse_align,
    dedup,
    hamming,
    leakage_filter,
)
from met.attachment import attach_entities, parse_attach_response
from met.clustering import build_hierarchy, embed_texts, kmeans, select_k, silhouette
from met.conflict import detect_conflicts, parse_final_action, resolve_all
from met.coverage import EmbeddingSet, amcs
from met.errors import MissingField, ParseFailure, UnknownPathLabel
from met.extraction import (
    FrequencyTable,
    RawMention,
    extract_corpus,
    parse_stage1_response,
    parse_stage2_response,
)
from met.matcher import Automaton, PatternDictionary, scan
from met.providers import CallableTextProvider, FixtureSearchTool, MockEmbeddingProvider
from met.synthesis import parse_vqa_json
from met.taxonomy import TaxonomyTree, replay_audit


# ---------------------------------------------------------------- automaton


def test_automaton_equals_naive_search_on_1000_randomized_trials():
    started = time.monotonic()
    rng = random.Random(522)
    alphabets = ("ab", "abc", "abcd")
    for trial in range(1000):
        alphabet = alphabets[trial % len(alphabets)]
        patterns = sorted({
            "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 5)))
            for _ in range(rng.randint(1, 10))
        })
        dictionary = PatternDictionary()
        for pid, pattern in enumerate(patterns):
            dictionary.add(pattern, pid)
        automaton = Automaton.build(dictionary)
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 100)))
        got = {(m.start, m.end, m.pattern_id) for m in scan(automaton, text).matches}
        assert got == naive_matches(patterns, text)

    # the classic overlapping-suffix fixture, spans pinned exactly
    dictionary = PatternDictionary()
    surfaces = ["he", "she", "his", "hers"]
    for pid, surface in enumerate(surfaces):
        dictionary.add(surface, pid)
    report = scan(Automaton.build(dictionary), "ushers")
    found = {(surfaces[m.pattern_id], m.start, m.end) for m in report.matches}
    assert found == {("she", 1, 4), ("he", 2, 4), ("hers", 2, 6)}

    assert time.monotonic() - started < 60.0


def test_automaton_scan_time_is_linear_in_text_and_flat_in_dictionary():
    rng = random.Random(0)
    vocab = [
        "".join(rng.choice("abcdefghijklmnopqrstuvwxyz") for _ in range(rng.randint(4, 10)))
        for _ in range(5000)
    ]

    def automaton_for(n_patterns):
        dictionary = PatternDictionary()
        for pid, word in enumerate(rng.sample(vocab, n_patterns)):
            dictionary.add(word, pid)
        return Automaton.build(dictionary)

    def best_time(automaton, text, repeats=5):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            scan(automaton, text)
            times.append(time.perf_counter() - t0)
        return min(times)

    base = automaton_for(100)
    small_text = " ".join(rng.choice(vocab) for _ in range(20_000))
    big_text = small_text * 10

    t_small = best_time(base, small_text)
    t_big = best_time(base, big_text)
    ratio = t_big / t_small
    assert 7.0 <= ratio <= 13.0, f"10x text took {ratio:.2f}x time"

    t_dict_small = best_time(base, big_text)
    t_dict_big = best_time(automaton_for(1000), big_text)
    throughput_change = max(t_dict_small, t_dict_big) / min(t_dict_small, t_dict_big)
    assert throughput_change < 2.0, f"10x dictionary changed throughput {throughput_change:.2f}x"


# --------------------------------------------------------------------- amcs


def test_amcs_matches_brute_force_and_is_asymmetric():
    rng = np.random.default_rng(7)
    for _ in range(6):
        n_target = int(rng.integers(1, 201))
        n_reference = int(rng.integers(1, 201))
        target = rng.normal(size=(n_target, 8))
        reference = rng.normal(size=(n_reference, 8))
        target /= np.linalg.norm(target, axis=1)[:, None]
        reference /= np.linalg.norm(reference, axis=1)[:, None]
        got = amcs(
            EmbeddingSet([f"t{i}" for i in range(n_target)], target),
            EmbeddingSet([f"r{i}" for i in range(n_reference)], reference),
        )
        assert abs(got - brute_amcs(target, reference)) <= 1e-9

    same = rng.normal(size=(40, 8))
    same /= np.linalg.norm(same, axis=1)[:, None]
    identical = EmbeddingSet([f"v{i}" for i in range(40)], same)
    assert amcs(identical, identical) == pytest.approx(1.0, abs=1e-12)

    # reference strictly contains the target: perfect forward coverage,
    # imperfect backward coverage
    extras = rng.normal(size=(10, 8))
    extras /= np.linalg.norm(extras, axis=1)[:, None]
    superset = EmbeddingSet(
        [f"v{i}" for i in range(40)] + [f"x{i}" for i in range(10)],
        np.vstack([same, extras]),
    )
    forward = amcs(identical, superset)
    backward = amcs(superset, identical)
    assert forward == pytest.approx(1.0, abs=1e-12)
    assert backward < 1.0 - 1e-9
    assert backward == pytest.approx(brute_amcs(superset.vectors, same), abs=1e-9)


# ---------------------------------------------------------------- cleansing


def test_cleansing_thresholds_are_exact_at_the_boundary():
    table = FrequencyTable()
    diseases = ["Epilepsy", "Stroke", "Migraine", "Asthma", "Anemia"]
    for name in diseases:
        for _ in range(10):
            table.add_mention(RawMention("d", 0, name, entity_type="disease"))
    for _ in range(9):
        table.add_mention(RawMention("d", 0, "Borderline", entity_type="disease"))
    for name in ["Lungs", "Heart", "Liver", "Kidney"]:
        for _ in range(10):
            table.add_mention(RawMention("d", 0, name, entity_type="anatomy"))

    cleansed = table.cleanse(10, 5)

    # frequency 9 dropped, frequency 10 kept
    assert "borderline" not in cleansed.entity_counts
    assert all(cleansed.entity_counts[n.lower()] == 10 for n in diseases)
    # the 5-member type survives, the 4-member type does not
    assert set(cleansed.type_members) == {"disease"}
    assert cleansed.type_members["disease"] == {n.lower() for n in diseases}


# --------------------------------------------------------------- clustering


def test_clustering_silhouette_oracle_select_k_recovery_and_monotone_inertia():
    rng = np.random.default_rng(3)

    # silhouette agrees with the quadratic textbook oracle to 1e-9
    for n, k in ((40, 2), (90, 3), (150, 4), (200, 5)):
        points = rng.normal(size=(n, 6))
        assignment = kmeans(points, k, seed=3)
        assert abs(silhouette(points, assignment) - brute_silhouette(points, assignment.labels)) <= 1e-9

    # select_k recovers k=3 on seeded three-blob data in >= 95/100 seeds
    centers = np.array([[6.0, 0, 0, 0], [0, 6.0, 0, 0], [0, 0, 6.0, 0]])
    recovered = 0
    for seed in range(100):
        blob_rng = np.random.default_rng(seed)
        points = np.vstack([
            center + blob_rng.normal(scale=0.5, size=(30, 4)) for center in centers
        ])
        best_k, _ = select_k(points, k_min=2, k_max=6, seed=seed)
        recovered += best_k == 3
    assert recovered >= 95, f"recovered k=3 in only {recovered}/100 seeds"

    # Lloyd inertia never increases, on every run
    for run in range(20):
        run_rng = np.random.default_rng(run)
        points = run_rng.normal(size=(int(run_rng.integers(10, 61)), 4))
        history = kmeans(points, int(run_rng.integers(2, 6)) % len(points) + 1, seed=run).inertia_history
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


# ----------------------------------------------------------------- grammars


def _truncations(text, count=10):
    return [text[: len(text) * i // (count + 1)] for i in range(1, count + 1)]


def _assert_all_raise(parse, mutations, errors):
    assert len(mutations) == 20
    for mutated in mutations:
        with pytest.raises(errors):
            parse(mutated)


def test_every_response_grammar_round_trips_and_rejects_20_mutations():
    # flat extraction: JSON keyed by sentence with a "None" marker
    stage1 = '{"Sentence0": "Epilepsy, Stroke", "Sentence1": "None"}'
    mentions = parse_stage1_response(stage1)
    assert [(m.sentence_index, m.entity_name) for m in mentions] == [(0, "Epilepsy"), (0, "Stroke")]
    _assert_all_raise(parse_stage1_response, _truncations(stage1) + [
        "[]", "null", '"text"', "42",
        '{"Sent0": "x"}', '{"SentenceX": "x"}', '{"Sentence0": 5}',
        '{"Sentence0": ["x"]}', "{'Sentence0': 'x'}", '{"Sentence0": "a",}',
    ], ParseFailure)

    # typed extraction: arrays of Type:Name elements
    stage2 = '{"Sentence0": ["Disease:Epilepsy", "Anatomy:Lungs"], "Sentence1": "None"}'
    typed, warnings = parse_stage2_response(stage2)
    assert warnings == 0
    assert [(m.sentence_index, m.entity_type, m.entity_name) for m in typed] == [
        (0, "Disease", "Epilepsy"), (0, "Anatomy", "Lungs"),
    ]
    _assert_all_raise(parse_stage2_response, _truncations(stage2) + [
        "[]", "null", '"x"', "7",
        '{"Nope": []}', '{"Sentence0": 7}', '{"Sentence0": "plain"}',
        '{"Sentence0": {"t": 1}}', "{'Sentence0': []}", '{"Sentence0": [],}',
    ], ParseFailure)

    # attachment: tagged reason plus dot-separated insertion path
    stage3 = ("<Reason>generalized seizure type</Reason>\n"
              "<InsertionPath>Diseases.Seizure Disorders.Epilepsy</InsertionPath>")
    proposal = parse_attach_response(stage3, "Epilepsy")
    assert proposal.proposed_path == ["Diseases", "Seizure Disorders", "Epilepsy"]
    assert proposal.status == "pending"
    assert proposal.reasoning == "generalized seizure type"
    _assert_all_raise(parse_attach_response, _truncations(stage3) + [
        "", "plain prose with no tags",
        "<InsertionPath>A.B</InsertionPath>",
        "<Reason>r</Reason><InsertionPath></InsertionPath>",
        "<Reason>r</Reason><InsertionPath>A..B</InsertionPath>",
        "<Reason>r</Reason><InsertionPath>A.B.</InsertionPath>",
        "<Reason>r</Reason><InsertionPath>.A</InsertionPath>",
        "<Reason>reason alone</Reason>",
        "<Reasoning>detail alone</Reasoning>",
        "<reason>x</reason><insertionpath>A.B</insertionpath>",
    ], ParseFailure)

    # conflict agent: final action keeping one labeled path
    final = ("<SearchEvidence>bilateral temporal lesions</SearchEvidence>\n"
             "<Reasoning>neurological mechanism, disease axis wins</Reasoning>\n"
             "<FinalAction>Keep: path_a, Delete: path_b</FinalAction>")
    assert parse_final_action(final, 2) == (0, [1])
    _assert_all_raise(lambda t: parse_final_action(t, 2), _truncations(final) + [
        "no blocks at all",
        "<FinalAction></FinalAction>",
        "<FinalAction>Delete: path_b</FinalAction>",
        "<FinalAction>Keep path_a</FinalAction>",
        "<FinalAction>Keep: path_A</FinalAction>",
        "<FinalAction>Keep: path_z</FinalAction>",
        "<FinalAction>Keep: path_a, Delete: path_a</FinalAction>",
        "<FinalAction>Keep: path_a, Delete: path_q</FinalAction>",
        "<FinalAction>Keep: path_a, Delete: banana</FinalAction>",
        "<finalaction>Keep: path_a</finalaction>",
    ], (ParseFailure, UnknownPathLabel))

    # reasoning synthesis: strict JSON, no prose wrappers
    vqa = json.dumps({
        "target_knowledge_path": "Pneumonia (disease) -> Lungs (anatomy)",
        "question_type": "MCQ",
        "vqa_data": {
            "question": "Which organ shows the described consolidation?",
            "options": ["A) Lungs", "B) Liver", "C) Spleen", "D) Kidney"],
            "correct_answer": "A",
            "explanation": "Pneumonia consolidates lung parenchyma.",
        },
    })
    sample = parse_vqa_json(vqa)
    assert sample.question_type == "MCQ"
    assert len(sample.options) == 4
    assert sample.correct_answer == "A"
    _assert_all_raise(parse_vqa_json, _truncations(vqa) + [
        "not json", "[]", '"string"',
        f"Here you go: {vqa}",
        "```json\n{\"target_knowledge_path\": \"x\"",
        '{"question_type": "MCQ", "vqa_data": {}}',
        '{"target_knowledge_path": "x", "vqa_data": {}}',
        '{"target_knowledge_path": "x", "question_type": "MCQ"}',
        json.dumps({"target_knowledge_path": "x", "question_type": "Essay",
                    "vqa_data": {"question": "q", "correct_answer": "A",
                                 "explanation": "e"}}),
        json.dumps({"target_knowledge_path": "x", "question_type": "MCQ",
                    "vqa_data": {"question": "q", "correct_answer": "A"}}),
    ], (ParseFailure, MissingField))


# ------------------------------------------------------------- call economy


def test_provider_calls_equal_ceiling_of_sentences_over_batch_size():
    for n_sentences in (1, 30, 31, 90, 1000):
        corpus = [{"id": "doc", "sentences": [f"Sentence body {i}." for i in range(n_sentences)]}]
        provider = CallableTextProvider(lambda prompt: "{}")
        _, stats = extract_corpus(iter(corpus), provider, stage=1, batch_size=30)
        assert stats.provider_calls == math.ceil(n_sentences / 30)
        assert provider.calls == stats.provider_calls


# --------------------------------------------------------------- end to end


_TOY_VOCAB = {
    "disease": ["Epilepsy", "Stroke", "Migraine", "Asthma", "Pneumonia", "Hepatitis",
                "Diabetes", "Anemia", "Arthritis", "Glaucoma", "Eczema", "Gastritis"],
    "anatomy": ["Lungs", "Heart", "Liver", "Kidney", "Spleen", "Thorax", "Cortex", "Retina"],
    "symptom": ["Fever", "Cough", "Nausea", "Fatigue", "Vertigo", "Rash"],
}


def _toy_corpus():
    """100 bundled documents cycling through the vocabulary so every term
    clears the default frequency threshold."""
    path = Path(__file__).parent / "fixtures" / "toy_corpus.jsonl"
    docs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    assert len(docs) == 100
    return docs


def _toy_extraction_provider():
    """Deterministic stand-in for the typed-extraction model: tags every
    vocabulary term it can see in the prompt's numbered sentences."""
    by_name = {name: etype for etype, names in _TOY_VOCAB.items() for name in names}
    line_re = re.compile(r"^Sentence(\d+): (.*)$", re.MULTILINE)

    def respond(prompt):
        payload = {}
        for index, body in line_re.findall(prompt):
            tags = [f"{etype}:{name}" for name, etype in by_name.items() if name in body]
            payload[f"Sentence{index}"] = tags if tags else "None"
        return json.dumps(payload)

    return CallableTextProvider(respond)


def _build_toy_tree():
    table, stats = extract_corpus(iter(_toy_corpus()), _toy_extraction_provider(),
                                  stage=2, batch_size=30)
    assert stats.quarantined == 0
    cleansed = table.cleanse(10, 5)
    names = sorted(cleansed.entity_counts)
    provider = MockEmbeddingProvider(dim=32, seed=0)
    vectors = embed_texts([cleansed.display_name(n) for n in names], provider)
    embeddings = {name: vectors[i] for i, name in enumerate(names)}
    axis_map = {"disease": "disease", "anatomy": "anatomy", "symptom": "symptom"}
    return build_hierarchy(cleansed, embeddings, axis_map=axis_map, seed=0)


def test_end_to_end_toy_corpus_yields_replayable_deterministic_tree():
    started = time.monotonic()

    tree = _build_toy_tree()
    tree.check_invariants()
    tiers = {node.tier for node in tree.nodes.values()}
    assert max(tiers) <= 5
    for node in tree.nodes.values():
        children = [c for c in tree.children_of(node.id) if c.active]
        if children:
            assert node.frequency == sum(c.frequency for c in children), node.name

    # the same corpus and seeds give a byte-identical snapshot
    assert tree.snapshot_bytes() == _build_toy_tree().snapshot_bytes()

    # curate: freeze the core, attach one entity, reject one duplicate,
    # prune one leaf; the audit log replays to the exact same snapshot
    for node in list(tree.nodes.values()):
        tree.freeze_node(node.id, actor="human")
    anchor_leaf = next(n for n in tree.nodes.values()
                       if n.tier == 5 and n.active)
    parent_path = ".".join(tree.path_of(anchor_leaf.parent_id))

    def respond(prompt):
        entity = prompt.rsplit("Medical Entity Noun:\n", 1)[-1].strip()
        return (f"<Reason>fits the existing branch</Reason>\n"
                f"<InsertionPath>{parent_path}.{entity}</InsertionPath>")

    applied, proposals = attach_entities(
        tree, ["Night Terrors", anchor_leaf.name], CallableTextProvider(respond),
    )
    assert applied == 1
    assert [p.status for p in proposals] == ["applied", "rejected"]
    assert proposals[1].rejection_cause == "DuplicateSibling"
    tree.prune_subtree(anchor_leaf.id, reasoning="curation pass", actor="human")

    replayed = replay_audit(tree.audit)
    assert replayed.snapshot_bytes() == tree.snapshot_bytes()

    assert time.monotonic() - started < 300.0


# ----------------------------------------------------------------- conflict


def test_conflict_resolution_reaches_fixpoint_with_logged_evidence(tmp_path):
    tree = TaxonomyTree()
    disease_parents = []
    symptom_parents = []
    d_root = tree.add_node(None, "Diseases", "disease", frequency=500, actor="human")
    s_root = tree.add_node(None, "Symptoms", "symptom", frequency=400, actor="human")
    for i in range(5):
        disease_parents.append(tree.add_node(
            d_root, f"Disease Group {i}", "disease", frequency=100, actor="human"))
        symptom_parents.append(tree.add_node(
            s_root, f"Symptom Group {i}", "symptom", frequency=80, actor="human"))
    for i in range(50):
        name = f"Entity {i:02d}"
        tree.add_node(disease_parents[i % 5], name, "disease", frequency=9, actor="llm")
        tree.add_node(symptom_parents[i % 5], name, "symptom", frequency=5, actor="llm")
    assert len(detect_conflicts(tree)) == 50

    # even-numbered entities get a decisive agent; odd ones feed it garbage
    # and must fall back to the rule cascade
    def scripted(prompt):
        m = re.search(r"Entity (\d\d)", prompt)
        if m and int(m.group(1)) % 2 == 0:
            return ("<SearchEvidence>canonical definition found</SearchEvidence>\n"
                    "<Reasoning>the disease placement matches the definition</Reasoning>\n"
                    "<FinalAction>Keep: path_a, Delete: path_b</FinalAction>")
        return "thinking aloud without any structured action"

    log_path = tmp_path / "resolutions.jsonl"
    cases = resolve_all(
        tree,
        generator=CallableTextProvider(scripted),
        search_tool=FixtureSearchTool([]),
        log_path=log_path,
    )
    assert len(cases) == 50
    assert detect_conflicts(tree) == []

    records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    assert len(records) == 50
    for record in records:
        assert record["reasoning"].strip()
        assert isinstance(record["evidence"], list)
    actors = {record["actor"] for record in records}
    assert actors == {"agent", "rule"}
    for record in records:
        if record["actor"] == "agent":
            assert record["evidence"], "agent resolutions must carry evidence"

    for i in range(50):
        survivors = [n for n in tree.by_name(f"Entity {i:02d}") if n.active]
        assert len(survivors) == 1

    # the canonical dual-placement fixture lands on the disease-axis path
    kb_tree = TaxonomyTree()
    d = kb_tree.add_node(None, "Diseases", "disease", frequency=50, actor="human")
    nd = kb_tree.add_node(d, "Neurological Disorders", "disease", frequency=30, actor="human")
    s = kb_tree.add_node(None, "Symptoms", "symptom", frequency=40, actor="human")
    ds = kb_tree.add_node(s, "Digestive Symptoms", "symptom", frequency=20, actor="human")
    kb_tree.add_node(nd, "Kluver-Bucy Syndrome", "disease", frequency=7, actor="llm")
    kb_tree.add_node(ds, "Kluver-Bucy Syndrome", "symptom", frequency=5, actor="llm")
    resolved = resolve_all(kb_tree)
    assert len(resolved) == 1
    assert resolved[0].resolution.kept_path[0] == "Diseases"
    survivors = [n for n in kb_tree.by_name("Kluver-Bucy Syndrome") if n.active]
    assert kb_tree.path_of(survivors[0].id) == [
        "Diseases", "Neurological Disorders", "Kluver-Bucy Syndrome",
    ]


# -------------------------------------------------------------- acquisition


def _candidate(rid, embedding, dhash_value):
    record = CandidateRecord(id=rid, image_ref="", alt_text="", source_url="",
                             anchor_node=1, anchor_name="Epilepsy")
    record.image_embedding = unit(embedding)
    record.dhash = dhash_value
    return record


class _AnchorEmbedder:
    """Maps every text to the first basis vector so a candidate's cosine
    against the anchor is exactly its first embedding coordinate."""

    def embed(self, texts):
        return [np.array([1.0, 0.0, 0.0, 0.0]) for _ in texts]


def test_acquisition_coarse_threshold_dedup_exhaustively_and_leakage_filter():
    # inclusive 0.3 gate: 0.29 fails, 0.30 and 0.31 pass
    embedder = _AnchorEmbedder()
    for cosine, expected in ((0.29, "fail"), (0.30, "pass"), (0.31, "pass")):
        record = _candidate("r", [cosine, math.sqrt(1 - cosine**2), 0.0, 0.0], 0)
        assert coarse_align(record, embedder, 0.3) == expected

    # 500 records with planted near-duplicates: after dedup, no kept pair is
    # within either threshold, checked exhaustively
    int_rng = random.Random(10)
    vec_rng = np.random.default_rng(10)
    records = []
    for i in range(400):
        records.append(_candidate(
            f"base-{i}", vec_rng.normal(size=8), int_rng.getrandbits(64)))
    for j in range(50):
        source = records[j * 8]
        flipped = source.dhash
        for position in int_rng.sample(range(64), 5):
            flipped ^= 1 << position
        records.append(_candidate(f"hash-dup-{j}", vec_rng.normal(size=8), flipped))
    for j in range(50):
        source = records[j * 8 + 1]
        nearby = source.image_embedding + 0.05 * vec_rng.normal(size=8)
        records.append(_candidate(f"cos-dup-{j}", nearby, int_rng.getrandbits(64)))
    assert len(records) == 500

    kept, groups = dedup(records, hamming_max=8, cosine_max=0.95)
    assert len(kept) < 500, "planted duplicates must collapse"
    assert {r.id for r in kept} == {group[0] for group in groups}
    matrix = np.stack([r.image_embedding for r in kept])
    cosines = matrix @ matrix.T
    np.fill_diagonal(cosines, 0.0)
    assert float(cosines.max()) < 0.95
    hashes = [r.dhash for r in kept]
    for i in range(len(hashes)):
        for j in range(i + 1, len(hashes)):
            assert hamming(hashes[i], hashes[j]) > 8

    # a planted benchmark twin is dropped, everything else passes
    survivors = kept[:3]
    planted = survivors[1].dhash ^ 0b11
    manifest = EvalManifest(dhashes=[planted], embeddings=np.asarray([]))
    clean = leakage_filter(survivors, manifest)
    assert [r.id for r in clean] == [survivors[0].id, survivors[2].id]
    assert survivors[1].verdicts[-1][1] == "fail"
    assert all(r.verdicts[-1] == ("leakage", "pass", None) for r in clean)
