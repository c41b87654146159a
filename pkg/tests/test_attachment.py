"""Frozen-core serialization, attach grammar and the deferred buffer."""

from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from met.attachment import (
    ATTACH_TEMPLATE,
    REJECT_DUPLICATE_SIBLING,
    REJECT_EMPTY_PATH,
    REJECT_LEAF_MISMATCH,
    REJECT_TIER_LIMIT,
    REJECT_UNFROZEN_ANCESTOR,
    REJECT_UNKNOWN_ANCESTOR,
    DeferredBuffer,
    InsertionProposal,
    attach_entities,
    build_attach_prompt,
    escape_angle,
    flush,
    load_proposals,
    parse_attach_response,
    save_proposals,
    serialize_core,
    unescape_angle,
    validate_proposal,
)
from met.errors import EmptyCore, ParseFailure
from met.providers import CallableTextProvider
from met.taxonomy import TaxonomyTree

FULL_OUTLINE = """\
Diseases
  Neurological Disorders
    Seizure Disorders
      Epilepsy
  Infectious Diseases
    Viral Infections
      Hepatitis
Anatomy
  Thorax
    Lungs"""


def _insertion(path: str, reason: str = "fits the branch") -> str:
    return f"<Reason>{reason}</Reason>\n<InsertionPath>{path}</InsertionPath>"


# -------------------------------------------------------------- serialization


def test_serialize_core_renders_frozen_outline(frozen_core):
    tree, _ = frozen_core
    assert serialize_core(tree) == FULL_OUTLINE


def test_serialize_core_ignores_unfrozen_and_pruned(frozen_core):
    tree, ids = frozen_core
    tree.add_node(ids["Seizure Disorders"], "Absence Seizure", "disease", actor="human")
    tree.prune_subtree(ids["Thorax"], "out of scope", actor="human")
    text = serialize_core(tree)
    assert "Absence Seizure" not in text
    assert "Thorax" not in text and "Lungs" not in text


def test_serialize_core_elides_deep_tiers_with_sentinel(frozen_core):
    tree, _ = frozen_core
    budget = math.ceil(len(FULL_OUTLINE) / 4) - 1
    text = serialize_core(tree, token_budget=budget)
    assert "Epilepsy" not in text and "Hepatitis" not in text
    assert "      ..." in text
    # Lungs has no children, so its branch carries no sentinel
    assert "    Lungs" in text


def test_serialize_core_prefix_truncation_when_tier1_overflows(frozen_core):
    tree, _ = frozen_core
    assert serialize_core(tree, token_budget=1) == "..."
    assert serialize_core(tree, token_budget=3) == "Diseases\n..."


def test_serialize_core_failure_modes(frozen_core):
    tree, _ = frozen_core
    with pytest.raises(ValueError):
        serialize_core(tree, token_budget=0)
    with pytest.raises(EmptyCore):
        serialize_core(TaxonomyTree())


def test_build_attach_prompt_escapes_entity(frozen_core):
    tree, _ = frozen_core
    prompt = build_attach_prompt(serialize_core(tree), "  A<B> & C  ")
    assert "A&lt;B&gt; &amp; C" in prompt
    assert FULL_OUTLINE in prompt
    with pytest.raises(ValueError):
        build_attach_prompt("core", "   ")
    assert "{tree}" in ATTACH_TEMPLATE and "{entity}" in ATTACH_TEMPLATE


@settings(max_examples=60, deadline=None)
@given(st.text(max_size=60))
def test_angle_escape_round_trip(text):
    assert unescape_angle(escape_angle(text)) == text


# -------------------------------------------------------------------- parsing


def test_parse_insertion_response():
    text = _insertion("Diseases.Neurological Disorders.Seizure Disorders.Absence Seizure")
    proposal = parse_attach_response(text)
    assert proposal.status == "pending"
    assert proposal.entity_name == "Absence Seizure"
    assert proposal.proposed_path == [
        "Diseases", "Neurological Disorders", "Seizure Disorders", "Absence Seizure",
    ]
    assert proposal.reasoning == "fits the branch"


def test_parse_insertion_unescapes_path_elements():
    proposal = parse_attach_response(_insertion("Diseases.A &lt;B&gt;"))
    assert proposal.proposed_path == ["Diseases", "A <B>"]
    assert proposal.entity_name == "A <B>"


def test_parse_unclassifiable_response():
    text = "<Reason>not medical</Reason><Reasoning>brand name, no clinical meaning</Reasoning>"
    proposal = parse_attach_response(text, entity_name="Duct Tape")
    assert proposal.status == "unclassifiable"
    assert proposal.entity_name == "Duct Tape"
    assert proposal.proposed_path == []
    assert proposal.reasoning == "not medical\nbrand name, no clinical meaning"


@pytest.mark.parametrize(
    "payload",
    [
        "<InsertionPath>Diseases.X</InsertionPath>",          # missing Reason
        "<Reason>r</Reason><InsertionPath>Diseases..X</InsertionPath>",  # empty element
        "<Reason>r</Reason><InsertionPath> </InsertionPath>",  # blank path
        "<Reason>only a reason</Reason>",                      # neither shape
        "free text with no markup",
    ],
)
def test_parse_failures(payload):
    with pytest.raises(ParseFailure):
        parse_attach_response(payload)


# ----------------------------------------------------------------- validation


def _pending(path: list[str]) -> InsertionProposal:
    return InsertionProposal(entity_name=path[-1] if path else "X", proposed_path=path,
                             reasoning="r")


def test_validate_causes(frozen_core):
    tree, ids = frozen_core
    assert validate_proposal(tree, _pending([])) == REJECT_EMPTY_PATH
    mismatch = InsertionProposal("Other Name", ["Diseases", "X"], "r")
    assert validate_proposal(tree, mismatch) == REJECT_LEAF_MISMATCH
    deep = _pending(["Diseases", "Neurological Disorders", "Seizure Disorders",
                     "Epilepsy", "Focal", "Too Deep"])
    assert validate_proposal(tree, deep) == REJECT_TIER_LIMIT
    assert validate_proposal(tree, _pending(["Ghost Branch", "X"])) == REJECT_UNKNOWN_ANCESTOR
    scoped = validate_proposal(
        tree, _pending(["Diseases", "X"]),
        allowed_ancestors=set(tree.nodes.keys()) - {ids["Diseases"]},
    )
    assert scoped == REJECT_UNFROZEN_ANCESTOR
    dup = _pending(["Diseases", "Neurological Disorders", "Seizure Disorders", "EPILEPSY"])
    dup.entity_name = "EPILEPSY"
    assert validate_proposal(tree, dup) == REJECT_DUPLICATE_SIBLING
    good = _pending(["Diseases", "Neurological Disorders", "Seizure Disorders",
                     "Absence Seizure"])
    assert validate_proposal(tree, good) is None


# ---------------------------------------------------------------------- flush


def test_flush_applies_and_inherits_parent_axis(frozen_core):
    tree, ids = frozen_core
    buffer = DeferredBuffer(core_version=tree.version)
    buffer.add(_pending(["Anatomy", "Thorax", "Lungs", "Alveoli"]))
    applied, rejected = flush(tree, buffer)
    assert (applied, rejected) == (1, [])
    node = tree.by_name("Alveoli")[0]
    assert node.axis == "anatomy" and node.tier == 4
    assert node.parent_id == ids["Lungs"]
    assert len(buffer) == 0


def test_flush_root_axis_fallbacks():
    tree = TaxonomyTree()
    buffer = DeferredBuffer(core_version=tree.version)
    buffer.add(_pending(["Imaging"]))
    applied, _ = flush(tree, buffer, axis_for=lambda name: "modality")
    assert applied == 1
    assert tree.by_name("Imaging")[0].axis == "modality"

    buffer = DeferredBuffer(core_version=tree.version)
    buffer.add(_pending(["Mystery Node"]))
    applied, _ = flush(tree, buffer)  # no axis hinting at all
    assert applied == 1
    assert tree.by_name("Mystery Node")[0].axis == "other"


def test_flush_rejects_stale_buffer(frozen_core):
    tree, _ = frozen_core
    with pytest.raises(ValueError):
        flush(tree, DeferredBuffer(core_version=tree.version + 1))


def test_flush_blocks_intra_batch_stacking(frozen_core):
    tree, _ = frozen_core
    buffer = DeferredBuffer(core_version=tree.version)
    buffer.add(_pending(["Diseases", "Genetic Disorders"]))
    buffer.add(_pending(["Diseases", "Genetic Disorders", "Marfan Syndrome"]))
    applied, rejected = flush(tree, buffer)
    assert applied == 1
    assert [r.rejection_cause for r in rejected] == [REJECT_UNFROZEN_ANCESTOR]
    # a later flush sees the node as preexisting and may stack on it
    retry = DeferredBuffer(core_version=tree.version)
    retry.add(_pending(["Diseases", "Genetic Disorders", "Marfan Syndrome"]))
    applied, rejected = flush(tree, retry)
    assert (applied, rejected) == (1, [])


def test_flush_rejects_duplicate_pair_and_records_audit(frozen_core):
    tree, _ = frozen_core
    version_before = tree.version
    audits_before = len(tree.audit)
    buffer = DeferredBuffer(core_version=tree.version)
    buffer.add(_pending(["Diseases", "Prion Diseases"]))
    buffer.add(_pending(["Diseases", "Prion Diseases"]))
    applied, rejected = flush(tree, buffer)
    assert applied == 1
    assert [r.rejection_cause for r in rejected] == [REJECT_DUPLICATE_SIBLING]
    records = tree.audit[audits_before:]
    assert [r.operation for r in records] == ["insert", "reject"]
    assert records[1].reasoning.startswith("DuplicateSibling:")
    # reject records do not advance the version
    assert tree.version == version_before + 1


def test_flush_skips_non_pending(frozen_core):
    tree, _ = frozen_core
    buffer = DeferredBuffer(core_version=tree.version)
    settled = InsertionProposal("X", [], "no path", status="unclassifiable")
    buffer.add(settled)
    applied, rejected = flush(tree, buffer)
    assert (applied, rejected) == (0, [])
    assert settled.status == "unclassifiable"


# ------------------------------------------------------------ attach_entities


def _scripted_provider(script: dict[str, str]) -> CallableTextProvider:
    def respond(prompt: str) -> str:
        entity = prompt.rsplit("Medical Entity Noun:\n", 1)[1]
        return script[entity]

    return CallableTextProvider(respond)


def test_attach_entities_end_to_end(frozen_core):
    tree, _ = frozen_core
    script = {
        "Absence Seizure": _insertion(
            "Diseases.Neurological Disorders.Seizure Disorders.Absence Seizure"
        ),
        "Duct Tape": "<Reason>not medical</Reason><Reasoning>hardware item</Reasoning>",
        "Hepatitis": _insertion("Diseases.Infectious Diseases.Viral Infections.Hepatitis"),
        "Garbled": "no tags at all",
    }
    provider = _scripted_provider(script)
    applied, proposals = attach_entities(
        tree, ["Absence Seizure", "Duct Tape", "Hepatitis", "Garbled"], provider
    )
    assert applied == 1
    assert provider.calls == 4
    by_status = {p.entity_name: p.status for p in proposals}
    assert by_status == {
        "Absence Seizure": "applied",
        "Duct Tape": "unclassifiable",
        "Hepatitis": "rejected",
        "Garbled": "rejected",
    }
    causes = {p.entity_name: p.rejection_cause for p in proposals if p.rejection_cause}
    assert causes == {"Hepatitis": REJECT_DUPLICATE_SIBLING, "Garbled": "ParseFailure"}


def test_attach_entities_flush_size_controls_stacking(frozen_core):
    script = {
        "Genetic Disorders": _insertion("Diseases.Genetic Disorders"),
        "Marfan Syndrome": _insertion("Diseases.Genetic Disorders.Marfan Syndrome"),
    }
    entities = ["Genetic Disorders", "Marfan Syndrome"]

    tree, _ = build_tree_pair()
    applied, _ = attach_entities(tree, entities, _scripted_provider(script), flush_size=50)
    assert applied == 1  # second proposal stacks on the first, same flush

    tree, _ = build_tree_pair()
    applied, _ = attach_entities(tree, entities, _scripted_provider(script), flush_size=1)
    assert applied == 2  # per-entity flush makes the parent preexisting

    with pytest.raises(ValueError):
        attach_entities(tree, [], _scripted_provider({}), flush_size=0)


def build_tree_pair():
    from conftest import build_frozen_core

    return build_frozen_core()


def test_proposals_file_round_trip(tmp_path):
    proposals = [
        _pending(["Diseases", "X"]),
        InsertionProposal("Y", [], "no fit", status="unclassifiable"),
        InsertionProposal("Z", ["Diseases", "Z"], "dup", status="rejected",
                          rejection_cause=REJECT_DUPLICATE_SIBLING),
    ]
    path = tmp_path / "proposals.jsonl"
    save_proposals(path, proposals)
    back = load_proposals(path)
    assert [p.to_json() for p in back] == [p.to_json() for p in proposals]
