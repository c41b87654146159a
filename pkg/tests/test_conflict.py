"""Duplicate-placement detection and the agent/rule resolution path."""

from __future__ import annotations

import json

import pytest

from met.conflict import (
    AXIS_DOMINANCE,
    ConflictCase,
    apply_resolution,
    build_agent_prompt,
    detect_conflicts,
    parse_final_action,
    path_label,
    resolve_all,
    resolve_case,
    rule_fallback,
    run_react,
)
from met.errors import (
    AlreadyApplied,
    GeneratorFailure,
    ParseFailure,
    ToolFailure,
    UnknownPathLabel,
)
from met.providers import CallableTextProvider, FailingSearchTool, FixtureSearchTool
from met.taxonomy import TaxonomyTree


class _ScriptedAgent:
    """Returns canned responses in order, recording prompts."""

    def __init__(self, responses: list[str]) -> None:
        self.responses = list(responses)
        self.prompts: list[str] = []

    def generate(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if len(self.responses) > 1:
            return self.responses.pop(0)
        return self.responses[0]


def _conflicted_tree() -> TaxonomyTree:
    """Kluver-Bucy attached under a disease branch and a symptom branch."""
    tree = TaxonomyTree()
    diseases = tree.add_node(None, "Diseases", "disease", frequency=100, actor="human")
    neuro = tree.add_node(diseases, "Neurological Disorders", "disease",
                          frequency=55, actor="human")
    symptoms = tree.add_node(None, "Symptoms", "symptom", frequency=80, actor="human")
    digestive = tree.add_node(symptoms, "Digestive Symptoms", "symptom",
                              frequency=30, actor="human")
    tree.add_node(neuro, "Kluver-Bucy Syndrome", "disease", frequency=4, actor="llm",
                  reasoning="attachment")
    tree.add_node(digestive, "Kluver-Bucy Syndrome", "symptom", frequency=3, actor="llm",
                  reasoning="attachment")
    return tree


KB_FINAL = (
    "<SearchEvidence>Kluver-Bucy syndrome is a neuropsychiatric disorder caused by "
    "bilateral temporal lobe lesions.</SearchEvidence>\n"
    "<Reasoning>The definition names a neurological mechanism, so the disease path "
    "wins under etiological dominance.</Reasoning>\n"
    "<FinalAction>Keep: path_a, Delete: path_b</FinalAction>"
)

KB_SEARCH_TOOL = FixtureSearchTool(
    [
        {
            "match": "kluver",
            "snippet": "Kluver-Bucy syndrome: neuropsychiatric disorder from bilateral "
                       "medial temporal lobe dysfunction.",
            "source": "wiki",
        }
    ]
)


# --------------------------------------------------------------------- labels


def test_path_label_base26_and_inverse():
    from met.conflict import _label_index

    assert [path_label(i) for i in (0, 1, 25, 26, 27, 51, 52)] == [
        "path_a", "path_b", "path_z", "path_aa", "path_ab", "path_az", "path_ba",
    ]
    for i in range(200):
        assert _label_index(path_label(i)) == i
    with pytest.raises(ValueError):
        path_label(-1)
    with pytest.raises(ParseFailure):
        _label_index("path_A")


# ------------------------------------------------------------------ detection


def test_detect_conflicts_groups_by_normalized_name():
    tree = _conflicted_tree()
    cases = detect_conflicts(tree)
    assert len(cases) == 1
    case = cases[0]
    assert case.entity_name == "Kluver-Bucy Syndrome"
    assert case.candidate_paths == [
        ["Diseases", "Neurological Disorders", "Kluver-Bucy Syndrome"],
        ["Symptoms", "Digestive Symptoms", "Kluver-Bucy Syndrome"],
    ]
    assert len(case.leaf_ids) == 2


def test_detect_conflicts_ignores_internal_nodes_and_pruned():
    tree = _conflicted_tree()
    # same name as an internal node elsewhere is not a conflict
    extra = tree.add_node(None, "Checkups", "procedure", actor="human")
    tree.add_node(extra, "Diseases", "procedure", actor="human")  # leaf named like root
    cases = detect_conflicts(tree)
    assert {c.entity_name for c in cases} == {"Kluver-Bucy Syndrome"}
    for case in cases:
        apply_resolution_with_rule(tree, case)
    assert detect_conflicts(tree) == []


def apply_resolution_with_rule(tree, case):
    case.resolution = rule_fallback(case, tree)
    apply_resolution(tree, case)


# --------------------------------------------------------------------- prompt


def test_build_agent_prompt_lines():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]
    prompt = build_agent_prompt(case)
    assert '"Kluver-Bucy Syndrome"' in prompt
    assert "1. Parent Path A (path_a): Diseases.Neurological Disorders" in prompt
    assert "2. Parent Path B (path_b): Symptoms.Digestive Symptoms" in prompt
    with pytest.raises(ValueError):
        build_agent_prompt(ConflictCase("X", [["X"]], [1]))


def test_build_agent_prompt_root_level_parent():
    case = ConflictCase("X", [["X"], ["Branch", "X"]], [1, 2])
    prompt = build_agent_prompt(case)
    assert "1. Parent Path A (path_a): (root)" in prompt


# --------------------------------------------------------------- final action


def test_parse_final_action_explicit_and_implicit_deletes():
    text = "<FinalAction>Keep: path_a, Delete: path_b</FinalAction>"
    assert parse_final_action(text, 2) == (0, [1])
    # unmentioned paths are deleted as well
    assert parse_final_action("<FinalAction>Keep: path_b</FinalAction>", 3) == (1, [0, 2])
    multi = "<FinalAction>Keep: path_b, Delete: path_a, path_c</FinalAction>"
    assert parse_final_action(multi, 3) == (1, [0, 2])


@pytest.mark.parametrize(
    "payload,exc",
    [
        ("no block", ParseFailure),
        ("<FinalAction>Delete: path_a</FinalAction>", ParseFailure),
        ("<FinalAction>Keep: path_c</FinalAction>", UnknownPathLabel),
        ("<FinalAction>Keep: path_a, Delete: path_z</FinalAction>", UnknownPathLabel),
        ("<FinalAction>Keep: path_a, Delete: path_a</FinalAction>", ParseFailure),
    ],
)
def test_parse_final_action_failures(payload, exc):
    with pytest.raises(exc):
        parse_final_action(payload, 2)


# ---------------------------------------------------------------------- react


def test_run_react_search_then_decide():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]
    agent = _ScriptedAgent(["<Search>Kluver-Bucy syndrome definition</Search>", KB_FINAL])
    transcript = run_react(case, agent, KB_SEARCH_TOOL)
    assert transcript.final_action == "Keep: path_a, Delete: path_b"
    assert len(transcript.steps) == 2
    # observation folded into the second prompt
    assert "<Observation>[wiki] Kluver-Bucy syndrome:" in agent.prompts[1]
    assert case.resolution is not None and case.resolution.actor == "agent"
    assert case.resolution.kept_path[0] == "Diseases"
    # tool evidence plus the agent's quoted excerpt
    sources = [source for _, _, source in case.evidence]
    assert sources == ["wiki", "agent"]


def test_run_react_no_results_observation():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]
    agent = _ScriptedAgent(["<Search>zzz unknown</Search>", KB_FINAL])
    run_react(case, agent, FixtureSearchTool([]))
    assert "<Observation>(no results)</Observation>" in agent.prompts[1]


def test_run_react_step_cap():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]
    agent = _ScriptedAgent(["<Search>kluver</Search>"])
    transcript = run_react(case, agent, KB_SEARCH_TOOL, max_steps=2)
    assert case.resolution is None
    assert transcript.final_action is None
    assert transcript.steps[-1]["note"] == "step cap reached"
    assert len(agent.prompts) == 3  # two tool rounds plus the capped attempt


def test_run_react_unparseable_response():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]
    transcript = run_react(case, _ScriptedAgent(["I refuse to use the grammar"]),
                           KB_SEARCH_TOOL)
    assert transcript.steps[-1]["note"] == "unparseable"
    assert case.resolution is None


def test_run_react_backend_failures():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]

    class _Boom:
        def generate(self, prompt):
            raise RuntimeError("offline")

    with pytest.raises(GeneratorFailure):
        run_react(case, _Boom(), KB_SEARCH_TOOL)
    with pytest.raises(ToolFailure):
        run_react(case, _ScriptedAgent(["<Search>kluver</Search>", KB_FINAL]),
                  FailingSearchTool())


# ---------------------------------------------------------------------- rules


def test_rule_specificity_prefers_deeper_parent():
    tree = TaxonomyTree()
    a = tree.add_node(None, "Diseases", "disease", frequency=10, actor="human")
    b = tree.add_node(a, "Infections", "disease", frequency=8, actor="human")
    tree.add_node(a, "Measles", "disease", actor="llm")
    tree.add_node(b, "Measles", "disease", actor="llm")
    case = detect_conflicts(tree)[0]
    resolution = rule_fallback(case, tree)
    assert resolution.kept_path == ["Diseases", "Infections", "Measles"]
    assert "specificity" in resolution.reasoning
    assert resolution.actor == "rule"


def test_rule_axis_dominance():
    tree = _conflicted_tree()  # disease branch vs symptom branch
    case = detect_conflicts(tree)[0]
    resolution = rule_fallback(case, tree)
    assert resolution.kept_path[0] == "Diseases"
    assert "etiological dominance" in resolution.reasoning
    assert AXIS_DOMINANCE.index("disease") < AXIS_DOMINANCE.index("symptom")


def test_rule_parent_frequency():
    tree = TaxonomyTree()
    root = tree.add_node(None, "Diseases", "disease", frequency=100, actor="human")
    infectious = tree.add_node(root, "Infectious", "disease", frequency=70, actor="human")
    rare = tree.add_node(root, "Rare", "disease", frequency=5, actor="human")
    tree.add_node(infectious, "Hantavirus", "disease", actor="llm")
    tree.add_node(rare, "Hantavirus", "disease", actor="llm")
    case = detect_conflicts(tree)[0]
    resolution = rule_fallback(case, tree)
    assert resolution.kept_path == ["Diseases", "Infectious", "Hantavirus"]
    assert "parent frequency" in resolution.reasoning


def test_rule_lexicographic_tiebreak():
    tree = TaxonomyTree()
    root = tree.add_node(None, "Diseases", "disease", frequency=100, actor="human")
    beta = tree.add_node(root, "Beta Group", "disease", frequency=10, actor="human")
    alpha = tree.add_node(root, "Alpha Group", "disease", frequency=10, actor="human")
    tree.add_node(beta, "Oddity", "disease", actor="llm")
    tree.add_node(alpha, "Oddity", "disease", actor="llm")
    case = detect_conflicts(tree)[0]
    resolution = rule_fallback(case, tree)
    assert resolution.kept_path == ["Diseases", "Alpha Group", "Oddity"]
    assert "lexicographic tie-break" in resolution.reasoning


# ---------------------------------------------------------------------- apply


def test_apply_resolution_prunes_and_guards_repeat():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]
    case.evidence.append(("q", "snippet text", "wiki"))
    case.resolution = rule_fallback(case, tree)
    before = tree.version
    pruned = apply_resolution(tree, case)
    assert pruned == 1
    assert tree.version == before + 1
    record = tree.audit[-1]
    assert record.operation == "resolve"
    assert record.evidence == ["q | snippet text | wiki"]
    kept_leaves = [n for n in tree.active_nodes()
                   if n.name == "Kluver-Bucy Syndrome"]
    assert len(kept_leaves) == 1
    with pytest.raises(AlreadyApplied):
        apply_resolution(tree, case)
    bare = ConflictCase("X", [["X"], ["Y", "X"]], [1, 2])
    with pytest.raises(ValueError):
        apply_resolution(tree, bare)


def test_resolve_case_falls_back_on_agent_failure():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]

    class _Boom:
        def generate(self, prompt):
            raise RuntimeError("offline")

    resolution = resolve_case(case, tree, generator=_Boom(), search_tool=KB_SEARCH_TOOL)
    assert resolution.actor == "rule"
    assert resolution.kept_path[0] == "Diseases"


def test_resolve_case_without_backends_uses_rules():
    tree = _conflicted_tree()
    case = detect_conflicts(tree)[0]
    assert resolve_case(case, tree).actor == "rule"


# ------------------------------------------------------------------- fixpoint


def test_resolve_all_reaches_fixpoint_and_logs(tmp_path):
    tree = _conflicted_tree()
    root = tree.add_node(None, "Procedures", "procedure", frequency=20, actor="human")
    sub = tree.add_node(root, "Imaging Procedures", "procedure", frequency=12, actor="human")
    tree.add_node(root, "Biopsy", "procedure", actor="llm")
    tree.add_node(sub, "Biopsy", "procedure", actor="llm")
    log = tmp_path / "resolutions.jsonl"
    handled = resolve_all(tree, log_path=log)
    assert detect_conflicts(tree) == []
    assert {c.entity_name for c in handled} == {"Kluver-Bucy Syndrome", "Biopsy"}
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(records) == 2
    for record in records:
        assert set(record) == {"entity", "kept", "deleted", "actor", "reasoning", "evidence"}
        assert record["reasoning"]


def test_resolve_all_agent_first_rule_fallback_mix():
    tree = _conflicted_tree()
    agent = _ScriptedAgent(["<Search>Kluver-Bucy</Search>", KB_FINAL])
    handled = resolve_all(tree, generator=agent, search_tool=KB_SEARCH_TOOL)
    assert len(handled) == 1
    assert handled[0].resolution.actor == "agent"
    assert handled[0].resolution.kept_path == [
        "Diseases", "Neurological Disorders", "Kluver-Bucy Syndrome",
    ]
    assert detect_conflicts(tree) == []
