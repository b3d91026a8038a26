"""Registry, planner, validator, executor and plan tokens."""

import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mage.agent import (
    AgentError,
    MissingExecutorError,
    NoRoute,
    PlanParseError,
    PlanningError,
    Registry,
    RegistryError,
    Request,
    ToolSpec,
    default_registry,
    execute,
    gen_plan_samples,
    json_to_plan,
    load_registry,
    make_plan,
    make_step,
    mock_executors,
    plan,
    plan_requests,
    plan_to_json,
    plan_to_tokens,
    tokens_to_plan,
    validate,
)
from mage.data import MAX_STEPS, MODALITIES
from mage.rng import SplitMix64

from oracles import brute_force_chain

EDGES = [(a, b) for a in MODALITIES for b in MODALITIES if a != b]


def edge_tool(a, b, cost=1.0):
    return ToolSpec(f"{a}_to_{b}", (a,), (b,), {a: {"type": "string", "required": True}}, cost)


def case3():
    return Registry([edge_tool("image", "text"), edge_tool("text", "audio"), edge_tool("text", "image")])


def as_tuples(reg):
    return [(t.name, t.inputs, t.outputs, t.cost) for t in (reg[n] for n in reg.names())]


def chain_of(p, want):
    """Tool names along the dependency path ending at the final step for ``want``."""
    sid = next(f for f in p.final_outputs if p.step(f).produces == want)
    names = []
    while True:
        s = p.step(sid)
        names.append(s.tool)
        if not s.depends_on:
            return tuple(reversed(names))
        sid = s.depends_on[0]


def assert_matches_oracle(reg, have):
    for want in MODALITIES:
        if want in have:
            continue
        oracle = brute_force_chain(as_tuples(reg), have, want)
        req = Request(frozenset(have), frozenset([want]))
        if oracle is None:
            with pytest.raises(NoRoute):
                plan(req, reg)
            continue
        p = plan(req, reg)
        names = chain_of(p, want)
        assert names == oracle[1], (reg.names(), have, want)
        assert sum(reg[n].cost for n in names) == oracle[0]


class TestRegistry:
    def test_json_round_trip(self):
        reg = default_registry()
        assert Registry.from_json(reg.to_json()).to_json() == reg.to_json()

    def test_fixture_loads(self, fixtures_dir):
        assert load_registry(fixtures_dir / "registry_case3.json").names() == case3().names()

    def test_duplicate_name(self):
        with pytest.raises(RegistryError):
            Registry([edge_tool("image", "text"), edge_tool("image", "text")])

    @pytest.mark.parametrize(
        "record",
        [
            {"name": "x", "inputs": ["smell"], "outputs": ["text"]},
            {"name": "x", "inputs": ["text"], "outputs": ["text"], "cost": 0},
            {"name": "x", "inputs": ["text"], "outputs": ["audio"], "params_schema": {"p": {"type": "list"}}},
            {"name": "x", "inputs": ["text"], "outputs": ["audio"], "extra": 1},
            {"name": "x", "inputs": ["text"]},
        ],
    )
    def test_bad_records(self, record):
        with pytest.raises(RegistryError):
            ToolSpec.from_dict(record)

    def test_registry_must_be_array(self):
        with pytest.raises(RegistryError):
            Registry.from_json("{}")


class TestPlanner:
    def test_case_three_two_step_chain(self):
        p = plan(Request({"image"}, {"audio"}), case3())
        assert [s.tool for s in p.steps] == ["image_to_text", "text_to_audio"]
        assert p.steps[1].depends_on == (1,) and p.steps[1].params == {"text": "$1"}
        assert p.final_outputs == (2,)
        assert validate(p, case3(), have={"image"}) == []

    def test_no_route_names_modality(self):
        with pytest.raises(NoRoute) as err:
            plan(Request({"audio"}, {"video"}), case3())
        assert err.value.modalities == ["video"]

    def test_empty_registry(self):
        for want in MODALITIES[1:]:
            with pytest.raises(NoRoute):
                plan(Request({"text"}, {want}), Registry())

    def test_want_already_available(self):
        p = plan(Request({"image"}, {"image"}), case3())
        assert p.steps == () and p.final_outputs == ()

    def test_shared_prefix_is_merged(self):
        reg = Registry([edge_tool("image", "text"), edge_tool("text", "audio"), edge_tool("text", "video")])
        p = plan(Request({"image"}, {"audio", "video"}), reg)
        assert [s.tool for s in p.steps] == ["image_to_text", "text_to_audio", "text_to_video"]
        assert p.final_outputs == (2, 3)

    def test_cost_beats_length(self):
        reg = Registry([
            edge_tool("image", "audio", cost=5.0),
            edge_tool("image", "text"),
            edge_tool("text", "audio"),
        ])
        assert chain_of(plan(Request({"image"}, {"audio"}), reg), "audio") == ("image_to_text", "text_to_audio")

    def test_equal_cost_ties_break_by_name(self):
        reg = Registry([edge_tool("image", "video"), edge_tool("image", "text"),
                        edge_tool("video", "audio"), edge_tool("text", "audio")])
        assert chain_of(plan(Request({"image"}, {"audio"}), reg), "audio") == ("image_to_text", "text_to_audio")

    def test_multi_input_first_step(self):
        fuse = ToolSpec("fuse", ("image", "text"), ("video",))
        p = plan(Request({"image", "text"}, {"video"}), Registry([fuse]))
        assert p.steps[0].params == {} and p.steps[0].depends_on == ()
        with pytest.raises(NoRoute):
            plan(Request({"image"}, {"video"}), Registry([fuse]))

    def test_request_params_bind(self):
        reg = default_registry()
        p = plan(Request({"text"}, {"image"}, {"prompt": "a red circle", "steps": 20}), reg)
        assert p.steps[0].params == {"prompt": "a red circle", "steps": 20}

    def test_required_number_missing(self):
        tool = ToolSpec("t2a", ("text",), ("audio",), {"seconds": {"type": "number", "required": True}})
        with pytest.raises(PlanningError):
            plan(Request({"text"}, {"audio"}), Registry([tool]))

    def test_deterministic_bytes(self):
        req = Request({"video"}, {"audio", "image"})
        assert plan_to_json(plan(req, default_registry())) == plan_to_json(plan(req, default_registry()))

    def test_unknown_modality_in_request(self):
        with pytest.raises(AgentError):
            Request({"smell"}, {"text"})


class TestPlannerOracle:
    def test_exhaustive_small_registries(self):
        """Every registry of at most 6 single-input tools over the 12 modality edges."""
        count = 0
        for r in range(7):
            for subset in itertools.combinations(EDGES, r):
                reg = Registry(edge_tool(a, b) for a, b in subset)
                for have in MODALITIES:
                    assert_matches_oracle(reg, {have})
                count += 1
        assert count == 2510

    @settings(max_examples=150)
    @given(
        st.lists(st.tuples(st.sampled_from(EDGES), st.sampled_from([0.5, 1.0, 1.5, 2.0, 3.0])),
                 max_size=6, unique_by=lambda t: t[0]),
        st.sets(st.sampled_from(MODALITIES), min_size=1, max_size=2),
        st.booleans(),
    )
    def test_random_costs_and_fusion_tools(self, edges, have, fusion):
        tools = [edge_tool(a, b, c) for (a, b), c in edges]
        if fusion:
            tools.append(ToolSpec("fuse", tuple(sorted(have)) + ("text",) if "text" not in have else tuple(sorted(have)),
                                  ("video",), {}, 1.5))
        reg = Registry(tools)
        assert_matches_oracle(reg, have)

    @given(st.lists(st.sampled_from(EDGES), max_size=6, unique=True), st.sampled_from(MODALITIES))
    def test_every_plan_validates(self, edges, have):
        reg = Registry(edge_tool(a, b) for a, b in edges)
        for want in MODALITIES:
            try:
                p = plan(Request({have}, {want}), reg)
            except NoRoute:
                continue
            assert validate(plan_to_json(p), reg, have={have}) == []
            assert json_to_plan(plan_to_json(p)) == p


class TestValidation:
    def test_fixtures_rejected_with_named_violation(self, fixtures_dir):
        expected = json.loads((fixtures_dir / "plans" / "expected.json").read_text())
        assert len(expected) == 10
        reg = default_registry()
        for name, code in expected.items():
            buf = (fixtures_dir / "plans" / name).read_bytes()
            if code == "parse_error":
                with pytest.raises(PlanParseError) as err:
                    validate(buf, reg)
                assert err.value.offset is not None
                continue
            codes = [v.code for v in validate(buf, reg)]
            assert code in codes, (name, codes)

    def test_parse_error_offset_is_bytes(self):
        with pytest.raises(PlanParseError) as err:
            validate('{"plan_id": "é", "steps": [,]}'.encode(), default_registry())
        assert err.value.offset == len('{"plan_id": "é", "steps": ['.encode())

    def test_strict_parse_rejects_forward_reference(self, fixtures_dir):
        with pytest.raises(PlanParseError) as err:
            json_to_plan((fixtures_dir / "plans" / "forward_reference.json").read_bytes())
        assert [v.code for v in err.value.violations] == ["forward_reference"]

    def test_reference_outside_depends_on(self):
        doc = make_plan("p", [make_step(1, "image_to_text", {"image": "$input.image"}, [], "text"),
                              make_step(2, "text_to_audio", {"prompt": "$1"}, [], "audio")], [2])
        assert "bad_reference" in [v.code for v in validate(doc, default_registry())]

    def test_input_not_available(self):
        p = plan(Request({"image"}, {"audio"}), case3())
        codes = [v.code for v in validate(p, case3(), have={"audio"})]
        assert codes == ["modality_flow"]

    def test_canonical_bytes(self):
        p = plan(Request({"image"}, {"audio"}), case3())
        buf = plan_to_json(p)
        shuffled = json.dumps(json.loads(buf), indent=3).encode()
        assert plan_to_json(json_to_plan(shuffled)) == buf
        assert b" " not in buf and buf.startswith(b'{"final_outputs":')

    def test_unicode_params_survive(self):
        p = plan(Request({"text"}, {"audio"}, {"prompt": "ünïcødé ☃"}), default_registry())
        buf = plan_to_json(p)
        assert "☃".encode() in buf and json_to_plan(buf) == p


def random_dag(rng, n):
    steps, fail = [], set()
    for i in range(1, n + 1):
        k = int(rng.integers(min(i, 3), 1)[0]) if i > 1 else 0
        deps = sorted({int(d) + 1 for d in rng.integers(i - 1, k)}) if k else []
        should_fail = rng.uniform(()) < 0.15
        if should_fail:
            fail.add(i)
        steps.append(make_step(i, "work", {"id": i, "fail": bool(should_fail)}, deps, "text"))
    return make_plan("rand", steps, [n]), fail


def work(params):
    if params["fail"]:
        raise RuntimeError(f"step {params['id']} broke")
    return f"text://{params['id']}"


class TestExecution:
    REG = Registry([ToolSpec("work", ("text",), ("text",), {})])

    def test_case_three_runs(self):
        p = plan(Request({"image"}, {"audio"}), case3())
        res = execute(p, case3(), mock_executors(case3()), inputs={"image": "file://cat.png"})
        assert res.ok and [r.order for r in res.trace] == [0, 1]
        assert res.final[2].startswith("audio://text_to_audio/")

    def test_missing_executor_is_preflight(self):
        p = plan(Request({"image"}, {"audio"}), case3())
        calls = []
        with pytest.raises(MissingExecutorError, match="text_to_audio"):
            execute(p, case3(), {"image_to_text": lambda params: calls.append(params) or "x"})
        assert calls == []

    def test_diamond_partial_order(self):
        steps = [make_step(1, "work", {"id": 1, "fail": False}, [], "text"),
                 make_step(2, "work", {"id": 2, "fail": False}, [1], "text"),
                 make_step(3, "work", {"id": 3, "fail": False}, [1], "text"),
                 make_step(4, "work", {"id": 4, "fail": False}, [2, 3], "text")]
        for workers in (1, 4):
            res = execute(make_plan("d", steps, [4]), self.REG, {"work": work}, max_workers=workers)
            order = {r.step_id: r.order for r in res.trace}
            assert order[1] < min(order[2], order[3]) and max(order[2], order[3]) < order[4]

    def test_failure_skips_dependents_only(self):
        steps = [make_step(1, "work", {"id": 1, "fail": True}, [], "text"),
                 make_step(2, "work", {"id": 2, "fail": False}, [1], "text"),
                 make_step(3, "work", {"id": 3, "fail": False}, [], "text")]
        res = execute(make_plan("f", steps, [2, 3]), self.REG, {"work": work})
        assert [r.status for r in res.trace] == ["failed", "skipped", "ok"]
        assert "step 1 broke" in res.trace[0].error and res.final == {3: "text://3"}

    @pytest.mark.parametrize("workers", [1, 4])
    def test_random_dags(self, workers):
        rng = SplitMix64(workers)
        for _ in range(500):
            p, fail = random_dag(rng, int(rng.integers(MAX_STEPS, 1)[0]) + 1)
            res = execute(p, self.REG, {"work": work}, max_workers=workers)
            rec = {r.step_id: r for r in res.trace}
            for s in p.steps:
                r = rec[s.id]
                upstream_bad = any(rec[d].status != "ok" for d in s.depends_on)
                if upstream_bad:
                    assert r.status == "skipped" and r.order is None
                else:
                    assert r.status == ("failed" if s.id in fail else "ok")
                    assert all(rec[d].order < r.order for d in s.depends_on)


class TestTokens:
    def test_round_trip_over_all_requests(self):
        reg = default_registry()
        reqs = plan_requests(reg)
        assert reqs
        for req in reqs:
            p = plan(req, reg)
            assert tokens_to_plan(plan_to_tokens(p, reg), req, reg) == p

    def test_samples_are_deterministic(self):
        a = gen_plan_samples(default_registry(), 0, 12)
        b = gen_plan_samples(default_registry(), 0, 12)
        assert [s.caption for s in a] == [s.caption for s in b]
        assert all(len(s.caption) <= 16 for s in a)

    def test_garbage_tokens(self):
        with pytest.raises(PlanParseError):
            tokens_to_plan([0, 0], Request({"image"}, {"audio"}), default_registry())
