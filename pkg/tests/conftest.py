from __future__ import annotations

from PIL import Image

from zoomeye import PromptKind, TraceAction, depth_weight


def gradient_image(width: int, height: int) -> Image.Image:
    """Deterministic RGB test pattern with distinct pixels."""
    buf = bytearray()
    for y in range(height):
        for x in range(width):
            buf.extend(((x * 7 + y * 13) % 256, (x * 3 + y * 5) % 256, (x + 2 * y) % 256))
    return Image.frombytes("RGB", (width, height), bytes(buf))


class TableOracle:
    """Search oracle with confidences read from per-node-id tables.

    Records every query so tests can assert memoization and prompt shapes.
    """

    def __init__(
        self,
        existing=None,
        latent=None,
        answering=None,
        default=0.0,
        cue_completion="So I need the information about the following objects: thing.",
        answer="table answer",
    ):
        self.tables = {
            PromptKind.EXISTING: dict(existing or {}),
            PromptKind.LATENT: dict(latent or {}),
            PromptKind.ANSWERING: dict(answering or {}),
        }
        self.default = default
        self.cue_completion = cue_completion
        self.answer = answer
        self.confidence_calls: list[tuple[int, str, str]] = []
        self.generate_calls: list[dict] = []

    def confidence(self, node, kind, text):
        self.confidence_calls.append((node.id, kind.value, text))
        return self.tables[kind].get(node.id, self.default)

    def generate(self, prompt, *, images=(), history=(), max_new_tokens=256):
        self.generate_calls.append(
            {
                "prompt": prompt,
                "images": tuple(images),
                "history": tuple(history),
                "max_new_tokens": max_new_tokens,
            }
        )
        if "which objects' information do you need" in prompt:
            return self.cue_completion
        return self.answer


def event_tuples(trace):
    """Flatten a trace into comparable tuples, one per event."""
    return [
        (
            event.step,
            event.action.value,
            event.node_id,
            event.depth,
            event.bbox.as_tuple() if event.bbox is not None else None,
            event.existing,
            event.latent,
            event.answering,
            event.rank,
            event.tau,
            event.step_threshold,
        )
        for event in trace.events
    ]


def replay_frontier_order(trace, tree, oracle: TableOracle, bias: float) -> None:
    """Assert best-first discipline from the trace alone.

    Ranks are recomputed from the oracle tables with the same blend the
    engine uses, so every pop must beat everything still waiting, with
    exact ties resolved by insertion order.
    """

    def rank_of(node_id: int) -> float:
        node = tree.node(node_id)
        w = depth_weight(node.depth, tree.depth, bias)
        existing = oracle.tables[PromptKind.EXISTING].get(node_id, oracle.default)
        latent = oracle.tables[PromptKind.LATENT].get(node_id, oracle.default)
        return w * existing + (1.0 - w) * latent

    waiting: list[int] = []
    for event in trace.events:
        if event.action is TraceAction.APPEND_CHILD:
            waiting.append(event.node_id)
        elif event.action is TraceAction.POP:
            if event.node_id == tree.root.id and event.node_id not in waiting:
                continue
            assert event.node_id in waiting
            popped_rank = rank_of(event.node_id)
            for other in waiting:
                assert popped_rank >= rank_of(other)
            ties = [nid for nid in waiting if rank_of(nid) == popped_rank]
            assert ties[0] == event.node_id, "tie must pop in insertion order"
            waiting.remove(event.node_id)
