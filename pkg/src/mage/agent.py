"""Tool-scheduling agent: modality-typed registry, planner, validator, executor.

Plans travel as canonical JSON::

    {"final_outputs": [int], "plan_id": str,
     "steps": [{"depends_on": [int], "id": int, "params": {...},
                "produces": str, "tool": str}]}

Parameter values of the form ``"$<id>"`` refer to the artifact of step
``<id>``; ``"$input.<modality>"`` refers to something the user supplied.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .data import (
    EOS,
    MAX_STEPS,
    MAX_TOOLS,
    MODALITIES,
    TOKEN,
    PairedSample,
    SceneSpec,
    all_scenes,
    render_scene,
)
from .rng import SplitMix64, derive_seed

PARAM_TYPES = {"string": str, "number": (int, float), "boolean": bool}
_MOD_ORDER = {m: i for i, m in enumerate(MODALITIES)}


class AgentError(Exception):
    pass


class RegistryError(AgentError, ValueError):
    pass


class NoRoute(AgentError):
    def __init__(self, modalities: Iterable[str]):
        self.modalities = sorted(modalities, key=_MOD_ORDER.get)
        super().__init__("no route to " + ", ".join(self.modalities))


class PlanningError(AgentError):
    """A route exists but a required parameter cannot be filled."""


class PlanParseError(AgentError, ValueError):
    def __init__(self, message: str, offset: int | None = None, violations: Sequence["Violation"] = ()):
        self.offset = offset
        self.violations = list(violations)
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


class MissingExecutorError(AgentError):
    pass


def _sort_mods(mods: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(mods), key=_MOD_ORDER.get))


def _check_modalities(mods, what: str) -> tuple[str, ...]:
    if not isinstance(mods, (list, tuple, set, frozenset)) or not mods:
        raise RegistryError(f"{what} must be a non-empty list of modalities")
    bad = [m for m in mods if m not in _MOD_ORDER]
    if bad:
        raise RegistryError(f"{what}: unknown modality {bad[0]!r}")
    return _sort_mods(mods)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolSpec:
    name: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    params_schema: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    cost: float = 1.0

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise RegistryError("tool name must be a non-empty string")
        object.__setattr__(self, "inputs", _check_modalities(self.inputs, f"{self.name}.inputs"))
        object.__setattr__(self, "outputs", _check_modalities(self.outputs, f"{self.name}.outputs"))
        for pname, spec in self.params_schema.items():
            if spec.get("type") not in PARAM_TYPES:
                raise RegistryError(f"{self.name}.params_schema.{pname}: bad type {spec.get('type')!r}")
            if not isinstance(spec.get("required", False), bool):
                raise RegistryError(f"{self.name}.params_schema.{pname}: required must be boolean")
        if isinstance(self.cost, bool) or not isinstance(self.cost, (int, float)) or self.cost <= 0:
            raise RegistryError(f"{self.name}.cost must be a positive number")

    def required(self) -> list[str]:
        return sorted(p for p, s in self.params_schema.items() if s.get("required", False))

    def to_dict(self) -> dict:
        return {
            "cost": self.cost,
            "inputs": list(self.inputs),
            "name": self.name,
            "outputs": list(self.outputs),
            "params_schema": {k: dict(v) for k, v in self.params_schema.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolSpec":
        if not isinstance(d, dict):
            raise RegistryError("tool record must be an object")
        unknown = set(d) - {"name", "inputs", "outputs", "params_schema", "cost"}
        if unknown:
            raise RegistryError(f"tool record has unknown field(s) {sorted(unknown)}")
        try:
            return cls(d["name"], d["inputs"], d["outputs"], d.get("params_schema", {}), d.get("cost", 1.0))
        except KeyError as exc:
            raise RegistryError(f"tool record missing field {exc.args[0]!r}") from None


class Registry:
    def __init__(self, tools: Iterable[ToolSpec] = ()):
        self.tools: dict[str, ToolSpec] = {}
        for t in tools:
            if t.name in self.tools:
                raise RegistryError(f"duplicate tool name {t.name!r}")
            self.tools[t.name] = t

    def __contains__(self, name: str) -> bool:
        return name in self.tools

    def __getitem__(self, name: str) -> ToolSpec:
        return self.tools[name]

    def __len__(self) -> int:
        return len(self.tools)

    def names(self) -> list[str]:
        return sorted(self.tools)

    def to_json(self) -> str:
        return json.dumps([self.tools[n].to_dict() for n in self.names()], sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Registry":
        raw = json.loads(text)
        if not isinstance(raw, list):
            raise RegistryError("registry file must hold a JSON array of tool records")
        return cls(ToolSpec.from_dict(r) for r in raw)


def load_registry(path: str | Path) -> Registry:
    return Registry.from_json(Path(path).read_text(encoding="utf-8"))


def _prompt_tool(name: str, out: str, **extra) -> ToolSpec:
    schema = {"prompt": {"type": "string", "required": True}}
    schema.update({k: {"type": v, "required": False} for k, v in extra.items()})
    return ToolSpec(name, ("text",), (out,), schema)


def default_registry() -> Registry:
    return Registry([
        ToolSpec("audio_to_text", ("audio",), ("text",), {"audio": {"type": "string", "required": True}}),
        ToolSpec("image_to_text", ("image",), ("text",), {"image": {"type": "string", "required": True}}),
        _prompt_tool("text_to_audio", "audio"),
        _prompt_tool("text_to_image", "image", steps="number"),
        _prompt_tool("text_to_video", "video", duration="number"),
        ToolSpec("video_to_text", ("video",), ("text",), {"video": {"type": "string", "required": True}}),
    ])


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    have: frozenset[str]
    want: frozenset[str]
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "have", frozenset(self.have))
        object.__setattr__(self, "want", frozenset(self.want))
        for m in self.have | self.want:
            if m not in _MOD_ORDER:
                raise AgentError(f"unknown modality {m!r}")


@dataclass(frozen=True)
class Step:
    id: int
    tool: str
    params: Mapping[str, Any]
    depends_on: tuple[int, ...]
    produces: str

    def to_dict(self) -> dict:
        return {
            "depends_on": list(self.depends_on),
            "id": self.id,
            "params": dict(self.params),
            "produces": self.produces,
            "tool": self.tool,
        }


@dataclass(frozen=True)
class TaskPlan:
    plan_id: str
    steps: tuple[Step, ...]
    final_outputs: tuple[int, ...]

    def step(self, sid: int) -> Step:
        for s in self.steps:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def to_dict(self) -> dict:
        return {
            "final_outputs": sorted(self.final_outputs),
            "plan_id": self.plan_id,
            "steps": [s.to_dict() for s in self.steps],
        }


def make_step(sid: int, tool: str, params: Mapping[str, Any], depends_on: Iterable[int], produces: str) -> Step:
    return Step(sid, tool, dict(params), tuple(sorted(set(depends_on))), produces)


def make_plan(plan_id: str, steps: Iterable[Step], final_outputs: Iterable[int]) -> TaskPlan:
    return TaskPlan(plan_id, tuple(steps), tuple(sorted(set(final_outputs))))


def plan_to_json(plan: TaskPlan) -> bytes:
    return json.dumps(plan.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    step: int | None = None

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


_PLAN_KEYS = {"plan_id", "steps", "final_outputs"}
_STEP_KEYS = {"id", "tool", "params", "depends_on", "produces"}


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _decode(doc) -> Any:
    if isinstance(doc, TaskPlan):
        return doc.to_dict()
    if isinstance(doc, (bytes, bytearray)):
        try:
            text = bytes(doc).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PlanParseError("plan is not valid UTF-8", exc.start) from None
    elif isinstance(doc, str):
        text = doc
    else:
        return doc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise PlanParseError(f"malformed plan JSON: {exc.msg}", offset) from None


def _structural(doc) -> tuple[list[Violation], list[dict]]:
    """Schema, identifiers and dependency-graph checks; no registry needed."""
    out: list[Violation] = []
    if not isinstance(doc, dict):
        return [Violation("schema", "plan must be a JSON object")], []
    for k in sorted(set(doc) - _PLAN_KEYS):
        out.append(Violation("unknown_field", f"unknown top-level field {k!r}"))
    for k in sorted(_PLAN_KEYS - set(doc)):
        out.append(Violation("missing_field", f"missing top-level field {k!r}"))
    if "plan_id" in doc and not isinstance(doc["plan_id"], str):
        out.append(Violation("schema", "plan_id must be a string"))
    steps_raw = doc.get("steps", [])
    if not isinstance(steps_raw, list):
        out.append(Violation("schema", "steps must be a list"))
        steps_raw = []

    steps: list[dict] = []
    for pos, s in enumerate(steps_raw):
        if not isinstance(s, dict):
            out.append(Violation("schema", f"steps[{pos}] must be an object"))
            continue
        sid = s.get("id") if _is_int(s.get("id")) else None
        for k in sorted(set(s) - _STEP_KEYS):
            out.append(Violation("unknown_field", f"step {sid}: unknown field {k!r}", sid))
        for k in sorted(_STEP_KEYS - set(s)):
            out.append(Violation("missing_field", f"step {sid}: missing field {k!r}", sid))
        ok = True
        if "id" in s and sid is None:
            out.append(Violation("schema", f"steps[{pos}].id must be an integer"))
            ok = False
        if "tool" in s and not isinstance(s["tool"], str):
            out.append(Violation("schema", f"step {sid}: tool must be a string", sid))
            ok = False
        if "params" in s and not isinstance(s["params"], dict):
            out.append(Violation("schema", f"step {sid}: params must be an object", sid))
            ok = False
        if "produces" in s and not isinstance(s["produces"], str):
            out.append(Violation("schema", f"step {sid}: produces must be a string", sid))
            ok = False
        deps = s.get("depends_on", [])
        if not isinstance(deps, list) or not all(_is_int(d) for d in deps):
            out.append(Violation("schema", f"step {sid}: depends_on must be a list of integers", sid))
            ok = False
        if ok and _STEP_KEYS <= set(s):
            steps.append(s)

    seen: dict[int, int] = {}
    for pos, s in enumerate(steps):
        if s["id"] in seen:
            out.append(Violation("duplicate_id", f"step id {s['id']} appears more than once", s["id"]))
        else:
            seen[s["id"]] = pos

    graph: dict[int, list[int]] = {}
    for pos, s in enumerate(steps):
        sid = s["id"]
        for d in s["depends_on"]:
            if d == sid:
                out.append(Violation("cycle", f"cycle at step {sid}", sid))
            elif d not in seen:
                out.append(Violation("unknown_dependency", f"step {sid} depends on unknown step {d}", sid))
            elif seen[d] > pos:
                out.append(Violation("forward_reference", f"step {sid} depends on later step {d}", sid))
        graph.setdefault(sid, []).extend(d for d in s["depends_on"] if d in seen and d != sid)
    for sid in _cycle_members(graph):
        out.append(Violation("cycle", f"cycle at step {sid}", sid))

    finals = doc.get("final_outputs", [])
    if not isinstance(finals, list) or not all(_is_int(f) for f in finals):
        out.append(Violation("schema", "final_outputs must be a list of integers"))
    else:
        for f in finals:
            if f not in seen:
                out.append(Violation("unknown_final_output", f"final output {f} is not a step id", f))
    return out, steps


def _cycle_members(graph: dict[int, list[int]]) -> list[int]:
    """Smallest id of every multi-node cycle (self-loops reported separately)."""
    color: dict[int, int] = {}
    found: set[int] = set()

    def visit(n: int, path: list[int]) -> None:
        color[n] = 1
        path.append(n)
        for m in graph.get(n, []):
            if color.get(m) == 1:
                found.add(min(path[path.index(m):]))
            elif m not in color:
                visit(m, path)
        path.pop()
        color[n] = 2

    for n in sorted(graph):
        if n not in color:
            visit(n, [])
    return sorted(found)


def _ref_target(value) -> int | None:
    if isinstance(value, str) and value.startswith("$") and value[1:].isdigit():
        return int(value[1:])
    return None


def validate(doc, registry: Registry, have: Iterable[str] | None = None) -> list[Violation]:
    """Every violation found in ``doc``; an empty list means the plan is valid.

    ``doc`` may be bytes, text, a decoded object or a :class:`TaskPlan`.
    Undecodable JSON raises :class:`PlanParseError` with the byte offset.
    """
    obj = _decode(doc)
    out, steps = _structural(obj)
    have_set = None if have is None else set(have)
    by_id = {s["id"]: s for s in steps}

    for s in steps:
        sid = s["id"]
        produces = s["produces"]
        if produces not in _MOD_ORDER:
            out.append(Violation("bad_modality", f"step {sid}: {produces!r} is not a modality", sid))
        tool = registry.tools.get(s["tool"])
        if tool is None:
            out.append(Violation("unknown_tool", f"step {sid}: unknown tool {s['tool']!r}", sid))
            continue
        if produces in _MOD_ORDER and produces not in tool.outputs:
            out.append(Violation("modality_flow", f"step {sid}: {tool.name} cannot produce {produces}", sid))

        params = s["params"]
        for pname in tool.required():
            if pname not in params:
                out.append(Violation("missing_param", f"step {sid}: missing required param {pname!r}", sid))
        for pname, val in params.items():
            spec = tool.params_schema.get(pname)
            if spec is None:
                out.append(Violation("unknown_param", f"step {sid}: unknown param {pname!r}", sid))
                continue
            want = PARAM_TYPES[spec["type"]]
            if isinstance(val, bool) and spec["type"] != "boolean" or not isinstance(val, want):
                out.append(Violation("param_type", f"step {sid}: param {pname!r} must be {spec['type']}", sid))
            target = _ref_target(val)
            if target is not None and target not in s["depends_on"]:
                out.append(Violation("bad_reference", f"step {sid}: param {pname!r} refers to step {target} outside depends_on", sid))

        dep_mods = set()
        for d in s["depends_on"]:
            dep = by_id.get(d)
            if dep is None or d == sid:
                continue
            dep_mods.add(dep["produces"])
            if dep["produces"] not in tool.inputs:
                out.append(Violation("modality_flow", f"step {sid}: {tool.name} does not consume {dep['produces']} from step {d}", sid))
        available = dep_mods | (have_set if have_set is not None else set())
        if have_set is None and not s["depends_on"]:
            continue
        for m in tool.inputs:
            if m not in available:
                out.append(Violation("modality_flow", f"step {sid}: input {m} is not available", sid))
    return out


def json_to_plan(buf: bytes | str) -> TaskPlan:
    """Strict parse: unknown fields, bad ids and forward references are rejected."""
    obj = _decode(buf)
    violations, steps = _structural(obj)
    for s in steps:
        if s["produces"] not in _MOD_ORDER:
            violations.append(Violation("bad_modality", f"step {s['id']}: {s['produces']!r} is not a modality", s["id"]))
    if violations:
        raise PlanParseError("invalid plan: " + "; ".join(map(str, violations)), violations=violations)
    return make_plan(
        obj["plan_id"],
        (make_step(s["id"], s["tool"], s["params"], s["depends_on"], s["produces"]) for s in steps),
        obj["final_outputs"],
    )


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Label:
    cost: float
    names: tuple[str, ...]
    chain: tuple[tuple[str, str], ...]  # (tool, produces)

    def key(self):
        return (self.cost, self.names)


def shortest_chains(have: Iterable[str], registry: Registry) -> dict[str, _Label]:
    """Cheapest tool chain to every reachable modality.

    Single-input tools are edges ``input -> output``; multi-input tools are
    only usable as a first step when all their inputs are supplied by the
    user. Ties on cost go to the lexicographically smallest sequence of tool
    names.
    """
    have = set(have)
    best: dict[str, _Label] = {m: _Label(0.0, (), ()) for m in have}
    tools = [registry.tools[n] for n in registry.names()]
    for t in tools:
        if len(t.inputs) > 1 and set(t.inputs) <= have:
            for o in t.outputs:
                cand = _Label(float(t.cost), (t.name,), ((t.name, o),))
                if o not in best or cand.key() < best[o].key():
                    best[o] = cand
    for _ in range(len(MODALITIES)):
        changed = False
        for t in tools:
            if len(t.inputs) != 1 or t.inputs[0] not in best:
                continue
            src = best[t.inputs[0]]
            for o in t.outputs:
                cand = _Label(src.cost + t.cost, src.names + (t.name,), src.chain + ((t.name, o),))
                if o not in best or cand.key() < best[o].key():
                    best[o] = cand
                    changed = True
        if not changed:
            break
    return best


def _bind_params(tool: ToolSpec, sources: Mapping[str, str], request: Request) -> dict[str, Any]:
    params: dict[str, Any] = {}
    primary = sources[tool.inputs[0]]
    for pname in sorted(tool.params_schema):
        spec = tool.params_schema[pname]
        if spec["type"] == "string":
            src = sources.get(pname, primary)
            if src.startswith("$input."):
                mod = src[len("$input."):]
                lit = request.params.get(pname, request.params.get(mod))
                if isinstance(lit, str):
                    src = lit
            if spec.get("required") or pname in request.params:
                params[pname] = src
        elif pname in request.params:
            params[pname] = request.params[pname]
        elif spec.get("required"):
            raise PlanningError(f"{tool.name}: required {spec['type']} param {pname!r} not given in the request")
    return params


def request_plan_id(request: Request) -> str:
    """Content-derived plan id, so identical requests give identical plan bytes."""
    req = json.dumps(
        {"have": sorted(request.have), "want": sorted(request.want), "params": dict(request.params)},
        sort_keys=True,
    )
    return "plan-" + hashlib.sha256(req.encode()).hexdigest()[:12]


def plan(request: Request, registry: Registry, plan_id: str | None = None) -> TaskPlan:
    """Minimum-cost chains for every wanted modality, merged on shared prefixes."""
    best = shortest_chains(request.have, registry)
    missing = [m for m in request.want if m not in best]
    if missing:
        raise NoRoute(missing)

    steps: list[Step] = []
    index: dict[tuple, int] = {}
    finals: list[int] = []
    for w in _sort_mods(request.want):
        parent: int | None = None
        prev_mod: str | None = None
        for tool_name, produces in best[w].chain:
            key = (parent, tool_name, produces)
            if key not in index:
                tool = registry[tool_name]
                if parent is None:
                    sources = {m: f"$input.{m}" for m in tool.inputs}
                else:
                    sources = {prev_mod: f"${parent}"}
                sid = len(steps) + 1
                params = _bind_params(tool, sources, request)
                steps.append(make_step(sid, tool_name, params, [] if parent is None else [parent], produces))
                index[key] = sid
            parent = index[key]
            prev_mod = produces
        if parent is not None:
            finals.append(parent)
    return make_plan(plan_id or request_plan_id(request), steps, finals)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step_id: int
    order: int | None
    status: str
    output: str | None = None
    error: str | None = None


@dataclass
class ExecutionResult:
    trace: list[StepRecord]
    artifacts: dict[int, str]
    final: dict[int, str]

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.trace)


Executor = Callable[[Mapping[str, Any]], str]


def mock_executor(tool: ToolSpec, produces: str | None = None) -> Executor:
    """Pure stand-in: stamps the tool name and resolved params into an artifact id."""

    def run(params: Mapping[str, Any]) -> str:
        digest = hashlib.sha256(json.dumps(dict(params), sort_keys=True).encode()).hexdigest()[:12]
        return f"{produces or tool.outputs[0]}://{tool.name}/{digest}"

    return run


def mock_executors(registry: Registry) -> dict[str, Executor]:
    return {name: mock_executor(registry[name]) for name in registry.names()}


def _resolve(value, artifacts: Mapping[int, str], inputs: Mapping[str, str]):
    target = _ref_target(value)
    if target is not None:
        return artifacts[target]
    if isinstance(value, str) and value.startswith("$input."):
        return inputs.get(value[len("$input."):], value)
    return value


def execute(
    plan: TaskPlan,
    registry: Registry,
    executors: Mapping[str, Executor],
    inputs: Mapping[str, str] | None = None,
    max_workers: int = 1,
) -> ExecutionResult:
    """Run steps in dependency order; a failure skips every transitive dependent.

    With ``max_workers > 1`` independent steps run concurrently; the trace
    records the order in which steps started.
    """
    missing = sorted({s.tool for s in plan.steps if s.tool not in executors})
    if missing:
        raise MissingExecutorError(f"no executor for tool(s): {', '.join(missing)}")
    inputs = dict(inputs or {})
    status: dict[int, str] = {}
    order: dict[int, int] = {}
    errors: dict[int, str] = {}
    artifacts: dict[int, str] = {}
    lock = threading.Lock()
    counter = itertools.count()
    by_id = {s.id: s for s in plan.steps}

    def run(step: Step) -> None:
        with lock:
            order[step.id] = next(counter)
            resolved = {k: _resolve(v, artifacts, inputs) for k, v in step.params.items()}
        try:
            out = executors[step.tool](resolved)
        except Exception as exc:  # executor failures are recorded, not raised
            with lock:
                status[step.id] = "failed"
                errors[step.id] = f"{type(exc).__name__}: {exc}"
            return
        with lock:
            artifacts[step.id] = out
            status[step.id] = "ok"

    def ready() -> list[Step]:
        out = []
        for s in plan.steps:
            if s.id in status or s.id in order:
                continue
            dep_status = [status.get(d) for d in s.depends_on]
            if any(ds in ("failed", "skipped") for ds in dep_status):
                status[s.id] = "skipped"
                continue
            if all(ds == "ok" for ds in dep_status):
                out.append(s)
        return out

    if max_workers <= 1:
        progress = True
        while progress:
            progress = False
            for s in ready():
                run(s)
                progress = True
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            pending = set()
            while True:
                with lock:
                    batch = ready()
                    for s in batch:
                        order.setdefault(s.id, -1)  # reserve; real index set in run()
                for s in batch:
                    pending.add(pool.submit(run, s))
                if not pending:
                    break
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for f in done:
                    f.result()
    for s in plan.steps:
        status.setdefault(s.id, "skipped")

    trace = [
        StepRecord(
            s.id,
            order.get(s.id) if status[s.id] != "skipped" else None,
            status[s.id],
            artifacts.get(s.id),
            errors.get(s.id),
        )
        for s in plan.steps
    ]
    final = {sid: artifacts[sid] for sid in plan.final_outputs if sid in artifacts and sid in by_id}
    return ExecutionResult(trace, artifacts, final)


# ---------------------------------------------------------------------------
# plan <-> LM tokens (stage-3 supervision)
# ---------------------------------------------------------------------------


def tool_tokens(registry: Registry) -> dict[str, int]:
    names = registry.names()
    if len(names) > MAX_TOOLS:
        raise RegistryError(f"at most {MAX_TOOLS} tools can be tokenized, registry has {len(names)}")
    return {n: TOKEN[f"<tool{i}>"] for i, n in enumerate(names)}


def request_tokens(request: Request) -> tuple[int, ...]:
    return (
        (TOKEN["have"],)
        + tuple(TOKEN[f"<{m}>"] for m in _sort_mods(request.have))
        + (TOKEN["want"],)
        + tuple(TOKEN[f"<{m}>"] for m in _sort_mods(request.want))
    )


def plan_to_tokens(plan: TaskPlan, registry: Registry) -> tuple[int, ...]:
    tt = tool_tokens(registry)
    if len(plan.steps) > MAX_STEPS:
        raise AgentError(f"plans longer than {MAX_STEPS} steps cannot be tokenized")
    out: list[int] = []
    for s in plan.steps:
        out.append(tt[s.tool])
        out.extend(TOKEN[f"<s{d}>"] for d in s.depends_on)
        out.append(TOKEN[";"])
    out.append(EOS)
    return tuple(out)


def tokens_to_plan(tokens: Sequence[int], request: Request, registry: Registry) -> TaskPlan:
    """Rebuild a plan from emitted tokens, binding params like the planner does."""
    inv_tool = {v: k for k, v in tool_tokens(registry).items()}
    inv_ref = {TOKEN[f"<s{i}>"]: i for i in range(1, MAX_STEPS + 1)}
    sep = TOKEN[";"]
    raw: list[tuple[str, list[int]]] = []
    cur: tuple[str, list[int]] | None = None
    for pos, t in enumerate(tokens):
        if t == EOS:
            break
        if cur is None:
            if t not in inv_tool:
                raise PlanParseError(f"expected a tool token at position {pos}, got {t}")
            cur = (inv_tool[t], [])
        elif t in inv_ref:
            cur[1].append(inv_ref[t])
        elif t == sep:
            raw.append(cur)
            cur = None
        else:
            raise PlanParseError(f"unexpected token {t} at position {pos}")
    if cur is not None:
        raise PlanParseError("unterminated step")

    steps: list[Step] = []
    produced: dict[int, str] = {}
    for i, (tool_name, deps) in enumerate(raw, start=1):
        tool = registry[tool_name]
        if deps:
            d = deps[0]
            if d not in produced:
                raise PlanParseError(f"step {i} depends on unknown step {d}")
            sources = {produced[d]: f"${d}"}
            if produced[d] not in tool.inputs:
                raise PlanParseError(f"step {i}: {tool_name} cannot consume {produced[d]}")
        else:
            sources = {m: f"$input.{m}" for m in tool.inputs}
        # single-output tools in every tokenizable registry
        produces = tool.outputs[0]
        steps.append(make_step(i, tool_name, _bind_params(tool, sources, request), deps, produces))
        produced[i] = produces
    finals = []
    for w in _sort_mods(request.want):
        ids = [s.id for s in steps if s.produces == w]
        if ids:
            finals.append(ids[-1])
    return make_plan(request_plan_id(request), steps, finals)


def plan_requests(registry: Registry) -> list[Request]:
    """Every single-source request with one or two wanted modalities that has a route."""
    out = []
    for h in MODALITIES:
        others = [m for m in MODALITIES if m != h]
        wants = [(w,) for w in others] + list(itertools.combinations(others, 2))
        for want in wants:
            req = Request(frozenset([h]), frozenset(want))
            try:
                plan(req, registry)
            except (NoRoute, PlanningError):
                continue
            out.append(req)
    return out


def gen_plan_samples(registry: Registry, seed: int, side: int = 48) -> list[PairedSample]:
    """Stage-3 samples: instruction = request tokens, target = planner output tokens."""
    rng = SplitMix64(derive_seed(seed, "plans"))
    grammar: list[SceneSpec] = all_scenes()
    out = []
    for req in plan_requests(registry):
        scene = grammar[int(rng.integers(len(grammar), 1)[0])]
        p = plan(req, registry)
        spec = {"have": sorted(req.have), "want": sorted(req.want), "plan": json.loads(plan_to_json(p))}
        out.append(PairedSample(render_scene(scene, side), request_tokens(req), plan_to_tokens(p, registry), spec, "plan"))
    return out
