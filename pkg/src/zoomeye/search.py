"""Confidence-guided zoom search over an image tree.

Type-1 cues (specific objects) run a best-first search whose stop threshold
decays as the pop budget is exceeded; type-2 cues ("all ...") run an
exhaustive shallow sweep. The full workflow generates cues from the
question, searches per cue, unions the result boxes and asks the oracle for
the final answer over the zoomed visual context.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from PIL import Image

from .cues import CueExemplars, CueType, ParsedCues, VisualCue, generate_cues
from .geometry import (
    AnswerVisual,
    BBox,
    ImageTree,
    InputMode,
    ResizePolicy,
    TreeNode,
    assemble_answer_visual,
    build_tree,
)
from .oracle import OracleError, PromptKind, SearchOracle, decomposed_question

log = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1

ANSWER_PROMPT_TEMPLATE = "Question: {}\nAnswer the question directly."


@dataclass(frozen=True)
class SearchConfig:
    """All knobs of one search run.

    ``tau`` is the type-1 stop threshold, decayed by 0.1 every ``delta``
    pops once the pop count reaches the step threshold (initially
    max(1, tree depth) * ``c_multiplier``), floored at ``tau_min``.
    ``tau2`` gates type-2 inclusion and ``bias_b`` anchors the depth weight
    that blends existing and latent confidence when ranking the frontier.
    """

    mode: InputMode = InputMode.LOCAL
    tau: float = 0.8
    tau2: float = 0.8
    tau_min: float = 0.0
    delta: int = 2
    bias_b: float = 0.2
    c_multiplier: int = 3
    max_type2_depth: int = 2
    paste_longer_side: int = 1000
    min_node_size: int = 336
    aspect_threshold: float = 1.5
    resize_policy: ResizePolicy = ResizePolicy.NAIVE

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_min <= self.tau <= 1.0:
            raise ValueError("need 0 <= tau_min <= tau <= 1")
        if not 0.0 <= self.tau2 <= 1.0:
            raise ValueError("tau2 must be in [0, 1]")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if not 0.0 <= self.bias_b <= 1.0:
            raise ValueError("bias_b must be in [0, 1]")
        if self.c_multiplier < 1:
            raise ValueError("c_multiplier must be >= 1")
        if self.max_type2_depth < 0:
            raise ValueError("max_type2_depth must be >= 0")
        if self.paste_longer_side < 1:
            raise ValueError("paste_longer_side must be >= 1")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if self.aspect_threshold < 1.0:
            raise ValueError("aspect_threshold must be >= 1")

    def replace(self, **overrides) -> "SearchConfig":
        return replace(self, **overrides)

    def as_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "tau": self.tau,
            "tau2": self.tau2,
            "tau_min": self.tau_min,
            "delta": self.delta,
            "bias_b": self.bias_b,
            "c_multiplier": self.c_multiplier,
            "max_type2_depth": self.max_type2_depth,
            "paste_longer_side": self.paste_longer_side,
            "min_node_size": self.min_node_size,
            "aspect_threshold": self.aspect_threshold,
            "resize_policy": self.resize_policy.value,
        }


PRESETS: dict[str, SearchConfig] = {
    "local": SearchConfig(
        mode=InputMode.LOCAL,
        tau=0.8,
        bias_b=0.2,
        min_node_size=336,
        resize_policy=ResizePolicy.NAIVE,
    ),
    "global-local": SearchConfig(
        mode=InputMode.GLOBAL_LOCAL,
        tau=0.6,
        bias_b=0.6,
        min_node_size=384,
        resize_policy=ResizePolicy.SERVER_SIDE,
    ),
}


def preset(name: str) -> SearchConfig:
    """Named parameter bundle; "local" or "global-local"."""
    key = name.strip().lower().replace("_", "-")
    try:
        return PRESETS[key]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


class TraceAction(str, Enum):
    POP = "pop"
    APPEND_CHILD = "append_child"
    DECAY = "decay"
    STOP_CURRENT = "stop_current"
    STOP_BEST = "stop_best"
    FALLBACK = "fallback"
    TYPE2_INCLUDE = "type2_include"


@dataclass(frozen=True)
class TraceEvent:
    """One step of the event log.

    Confidence fields carry only values actually known when the event was
    emitted; ``tau`` and ``step_threshold`` echo the schedule in force.
    """

    step: int
    action: TraceAction
    node_id: int | None = None
    depth: int | None = None
    bbox: BBox | None = None
    existing: float | None = None
    latent: float | None = None
    answering: float | None = None
    rank: float | None = None
    tau: float | None = None
    step_threshold: int | None = None

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "action": self.action.value,
            "node_id": self.node_id,
            "depth": self.depth,
            "bbox": list(self.bbox.as_tuple()) if self.bbox else None,
            "existing": self.existing,
            "latent": self.latent,
            "answering": self.answering,
            "rank": self.rank,
            "tau": self.tau,
            "step_threshold": self.step_threshold,
        }


@dataclass
class SearchTrace:
    """Ordered event log of one per-cue search."""

    cue: VisualCue
    q_s: str | None
    events: list[TraceEvent] = field(default_factory=list)
    result_node_ids: list[int] = field(default_factory=list)
    fallback_used: bool = False
    skipped: bool = False
    error: str | None = None

    def pop_events(self) -> list[TraceEvent]:
        return [event for event in self.events if event.action is TraceAction.POP]

    def as_dict(self) -> dict:
        return {
            "cue": {"phrase": self.cue.phrase, "cue_type": self.cue.cue_type.value},
            "q_s": self.q_s,
            "events": [event.as_dict() for event in self.events],
            "result_node_ids": list(self.result_node_ids),
            "fallback_used": self.fallback_used,
            "skipped": self.skipped,
            "error": self.error,
        }


class SearchAborted(Exception):
    """An oracle failure ended a per-cue search; carries the partial trace."""

    def __init__(self, trace: SearchTrace, cause: OracleError):
        super().__init__(str(cause))
        self.trace = trace
        self.cause = cause


def depth_weight(depth: int, tree_depth: int, bias_b: float) -> float:
    """Depth-dependent blend factor: ``bias_b`` at the root, rising
    quadratically to exactly 1.0 at the deepest level.

    A degenerate single-level tree weighs existing evidence fully.
    """
    if depth < 0:
        raise ValueError("depth must be non-negative")
    if tree_depth == 0:
        return 1.0
    if depth > tree_depth:
        raise ValueError(f"node depth {depth} exceeds tree depth {tree_depth}")
    if depth == tree_depth:
        return 1.0
    if depth == 0:
        return float(bias_b)
    return (1.0 - bias_b) / (tree_depth * tree_depth) * (depth * depth) + bias_b


def _node_confidence(
    oracle: SearchOracle, node: TreeNode, kind: PromptKind, text: str
) -> float:
    """Memoized oracle score; a search run never queries the same
    (node, kind, text) twice."""
    key = (kind.value, text)
    cached = node.cached_confidences.get(key)
    if cached is None:
        cached = oracle.confidence(node, kind, text)
        node.cached_confidences[key] = cached
    return cached


def rank_score(
    oracle: SearchOracle,
    node: TreeNode,
    cue: VisualCue,
    tree_depth: int,
    bias_b: float,
) -> float:
    """Frontier priority of a node for a type-1 cue.

    Blends existing confidence (is the cue visible here) with latent
    confidence (could it be found deeper) by depth: shallow nodes are
    judged mostly on promise, the deepest fully on visibility.
    """
    if cue.cue_type is not CueType.TYPE1:
        raise ValueError("rank_score applies to type-1 cues")
    existing = _node_confidence(oracle, node, PromptKind.EXISTING, cue.phrase)
    latent = _node_confidence(oracle, node, PromptKind.LATENT, cue.phrase)
    w = depth_weight(node.depth, tree_depth, bias_b)
    return w * existing + (1.0 - w) * latent


def stopping_check(
    oracle: SearchOracle, node: TreeNode, q_s: str, tau: float
) -> tuple[bool, float]:
    """Whether the node's context suffices to answer ``q_s``.

    Returns (answering confidence >= tau, answering confidence); the
    comparison is inclusive at the threshold.
    """
    answering = _node_confidence(oracle, node, PromptKind.ANSWERING, q_s)
    return answering >= tau, answering


def _decayed_tau(tau0: float, decay_count: int) -> float:
    # Rounding keeps the 0.1-step schedule on exact grid values so the
    # inclusive threshold comparison is not poisoned by float drift.
    return round(tau0 - 0.1 * decay_count, 10)


@dataclass
class _FrontierEntry:
    node_id: int
    seq: int
    rank: float | None = None


def search_type1(
    tree: ImageTree,
    cue: VisualCue,
    q_s: str,
    cfg: SearchConfig,
    oracle: SearchOracle,
) -> tuple[list[int], SearchTrace]:
    """Best-first search for a type-1 cue; returns exactly one node id.

    Per-pop order: pop the best-ranked node, count it, decay tau once the
    pop count reaches the step threshold (breaking when tau underflows
    ``tau_min``), stop on the current node, else stop on the best-so-far
    node, update the best-so-far, expand children and re-rank the frontier
    (ties keep insertion order). If the loop exhausts the frontier or tau
    underflows, the best-so-far node is returned and flagged as fallback.
    """
    if cue.cue_type is not CueType.TYPE1:
        raise ValueError("search_type1 requires a type-1 cue")
    trace = SearchTrace(cue=cue, q_s=q_s)
    tau0 = cfg.tau
    tau = tau0
    decay_count = 0
    step_threshold = max(1, tree.depth) * cfg.c_multiplier

    def emit(action: TraceAction, node: TreeNode | None = None, **values) -> None:
        trace.events.append(
            TraceEvent(
                step=len(trace.events),
                action=action,
                node_id=node.id if node else None,
                depth=node.depth if node else None,
                bbox=node.bbox if node else None,
                tau=tau,
                step_threshold=step_threshold,
                **values,
            )
        )

    frontier: list[_FrontierEntry] = [_FrontierEntry(tree.root.id, 0)]
    next_seq = 1
    best = tree.root
    pops = 0
    result: TreeNode | None = None
    fallback = False
    try:
        while frontier:
            entry = frontier.pop(0)
            node = tree.node(entry.node_id)
            pops += 1
            memo = node.cached_confidences
            emit(
                TraceAction.POP,
                node,
                existing=memo.get((PromptKind.EXISTING.value, cue.phrase)),
                latent=memo.get((PromptKind.LATENT.value, cue.phrase)),
                rank=entry.rank,
            )
            if pops >= step_threshold:
                decay_count += 1
                tau = _decayed_tau(tau0, decay_count)
                step_threshold += cfg.delta
                emit(TraceAction.DECAY)
                if tau < cfg.tau_min:
                    fallback = True
                    result = best
                    emit(
                        TraceAction.FALLBACK,
                        best,
                        answering=best.cached_confidences.get(
                            (PromptKind.ANSWERING.value, q_s)
                        ),
                    )
                    break
            passed, answering = stopping_check(oracle, node, q_s, tau)
            if passed:
                result = node
                emit(TraceAction.STOP_CURRENT, node, answering=answering)
                break
            best_passed, best_answering = stopping_check(oracle, best, q_s, tau)
            if best_passed:
                result = best
                emit(TraceAction.STOP_BEST, best, answering=best_answering)
                break
            if answering >= best_answering:
                best = node
            for child_id in node.children:
                frontier.append(_FrontierEntry(child_id, next_seq))
                next_seq += 1
                emit(TraceAction.APPEND_CHILD, tree.node(child_id))
            for member in frontier:
                if member.rank is None:
                    member.rank = rank_score(
                        oracle, tree.node(member.node_id), cue, tree.depth, cfg.bias_b
                    )
            frontier.sort(key=lambda member: (-member.rank, member.seq))
        if result is None and not fallback:
            fallback = True
            result = best
            emit(
                TraceAction.FALLBACK,
                best,
                answering=best.cached_confidences.get((PromptKind.ANSWERING.value, q_s)),
            )
    except OracleError as exc:
        trace.skipped = True
        trace.error = str(exc)
        raise SearchAborted(trace, exc) from exc

    trace.result_node_ids = [result.id]
    trace.fallback_used = fallback
    return [result.id], trace


def search_type2(
    tree: ImageTree,
    cue: VisualCue,
    cfg: SearchConfig,
    oracle: SearchOracle,
) -> tuple[list[int], SearchTrace]:
    """Breadth-first sweep for a collective cue.

    Nodes shallower than ``max_type2_depth`` are scored on existing
    confidence and included when it reaches ``tau2``; reaching the depth
    bound ends the sweep (breadth-first order visits depths in order, so
    nothing shallower is missed). May return an empty list.
    """
    if cue.cue_type is not CueType.TYPE2:
        raise ValueError("search_type2 requires a type-2 cue")
    trace = SearchTrace(cue=cue, q_s=None)
    results: list[int] = []

    def emit(action: TraceAction, node: TreeNode, **values) -> None:
        trace.events.append(
            TraceEvent(
                step=len(trace.events),
                action=action,
                node_id=node.id,
                depth=node.depth,
                bbox=node.bbox,
                tau=cfg.tau2,
                **values,
            )
        )

    queue: deque[int] = deque([tree.root.id])
    try:
        while queue:
            node = tree.node(queue.popleft())
            if node.depth >= cfg.max_type2_depth:
                emit(TraceAction.POP, node)
                break
            existing = _node_confidence(oracle, node, PromptKind.EXISTING, cue.phrase)
            emit(TraceAction.POP, node, existing=existing)
            if existing >= cfg.tau2:
                results.append(node.id)
                emit(TraceAction.TYPE2_INCLUDE, node, existing=existing)
            for child_id in node.children:
                queue.append(child_id)
                emit(TraceAction.APPEND_CHILD, tree.node(child_id))
    except OracleError as exc:
        trace.skipped = True
        trace.error = str(exc)
        raise SearchAborted(trace, exc) from exc

    trace.result_node_ids = list(results)
    return results, trace


@dataclass
class SearchOutcome:
    """Everything one full run produced: result list, union box, answer and
    the per-cue traces."""

    question: str
    image_width: int
    image_height: int
    cues: list[VisualCue]
    cue_parse_degraded: bool
    result_node_ids: list[int]
    union: BBox
    answer: str
    per_cue_traces: list[SearchTrace]
    fallback_used: bool
    visual: AnswerVisual

    def as_document(self, cfg: SearchConfig) -> dict:
        """Versioned trace document; field names are pinned by the schema
        file shipped with the package (trace_schema.json)."""
        return {
            "version": TRACE_SCHEMA_VERSION,
            "config": cfg.as_dict(),
            "image": {"width": self.image_width, "height": self.image_height},
            "question": self.question,
            "cues": [
                {"phrase": cue.phrase, "cue_type": cue.cue_type.value} for cue in self.cues
            ],
            "cue_parse_degraded": self.cue_parse_degraded,
            "searches": [trace.as_dict() for trace in self.per_cue_traces],
            "result_node_ids": list(self.result_node_ids),
            "union_bbox": list(self.union.as_tuple()),
            "fallback_used": self.fallback_used,
            "answer": self.answer,
        }


def zoom_eye(
    image: Image.Image,
    question: str,
    cfg: SearchConfig,
    oracle: SearchOracle,
    exemplars: CueExemplars,
    answer_prompt: str | None = None,
) -> SearchOutcome:
    """Full workflow: build the tree, generate cues, search per cue, union
    the results, assemble the zoomed visual input and answer the question.

    With a single cue the stopping question is the question itself;
    otherwise each cue gets its decomposed appearance question. A cue whose
    search fails is skipped with its partial trace kept; if no cue yields a
    node the root (whole image) is used and the outcome flagged.
    """
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    tree = build_tree(image.width, image.height, cfg.min_node_size, cfg.aspect_threshold)
    parsed: ParsedCues = generate_cues(oracle, question, exemplars)
    cues = list(parsed.cues)

    traces: list[SearchTrace] = []
    result_ids: list[int] = []
    for cue in cues:
        q_s = question if len(cues) == 1 else decomposed_question(cue.phrase)
        try:
            if cue.cue_type is CueType.TYPE2:
                ids, trace = search_type2(tree, cue, cfg, oracle)
            else:
                ids, trace = search_type1(tree, cue, q_s, cfg, oracle)
        except SearchAborted as aborted:
            log.warning("cue %r skipped after oracle failure: %s", cue.phrase, aborted)
            traces.append(aborted.trace)
            continue
        traces.append(trace)
        result_ids.extend(ids)

    fallback = False
    if not result_ids:
        result_ids = [tree.root.id]
        fallback = True
    nodes = [tree.node(node_id) for node_id in result_ids]
    visual = assemble_answer_visual(
        image, nodes, cfg.mode, cfg.resize_policy, cfg.paste_longer_side
    )
    prompt = answer_prompt if answer_prompt is not None else ANSWER_PROMPT_TEMPLATE.format(question)
    answer = oracle.generate(prompt, images=visual.images)
    return SearchOutcome(
        question=question,
        image_width=image.width,
        image_height=image.height,
        cues=cues,
        cue_parse_degraded=parsed.degraded,
        result_node_ids=result_ids,
        union=visual.union,
        answer=answer,
        per_cue_traces=traces,
        fallback_used=fallback,
        visual=visual,
    )
