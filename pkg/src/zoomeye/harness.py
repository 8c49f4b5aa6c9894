"""Benchmark evaluation over JSONL datasets and the planted-target simulator."""

from __future__ import annotations

import json
import logging
import random
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from PIL import Image, UnidentifiedImageError

from .cues import CueExemplars, CueType, VisualCue
from .geometry import BBox, ImageTree, TreeNode, build_tree
from .oracle import ScriptedOracleModel, ScriptedSearchOracle, SearchOracle, TransportError
from .search import SearchConfig, search_type1, zoom_eye

log = logging.getLogger(__name__)

CHOICE_DIRECTIVE = "Answer with the option's letter from the given choices directly."
SIM_CUE = VisualCue("target", CueType.TYPE1)
SIM_QUESTION = "where is the target?"

# A returned patch is useful context only if it pinpoints the target: it must
# contain the target's center and be at most 16x the target's area (one level
# of slack in a quad split).
SUCCESS_AREA_FACTOR = 16


class DatasetError(Exception):
    """The dataset file is unreadable or mostly malformed."""


@dataclass(frozen=True)
class BenchItem:
    image_path: str
    question: str
    options: tuple[str, ...] | None
    answer: str


def _parse_line(record: dict, base_dir: Path) -> BenchItem:
    image = record["image"]
    question = record["question"]
    answer = record["answer"]
    if not isinstance(image, str) or not image:
        raise ValueError("image must be a non-empty string")
    if not isinstance(question, str) or not question:
        raise ValueError("question must be a non-empty string")
    if not isinstance(answer, str) or not answer:
        raise ValueError("answer must be a non-empty string")
    options = record.get("options")
    if options is not None:
        if not isinstance(options, list) or not options or not all(
            isinstance(option, str) for option in options
        ):
            raise ValueError("options must be a non-empty list of strings")
        letter = answer.strip().upper()
        if len(letter) != 1 or letter not in string.ascii_uppercase[: len(options)]:
            raise ValueError(f"answer {answer!r} is not a letter within the options")
        options = tuple(options)
    path = Path(image)
    if not path.is_absolute():
        path = base_dir / path
    return BenchItem(str(path), question, options, answer)


def load_dataset(path: str | Path) -> list[BenchItem]:
    """Read one JSON record per line; fields {image, question, options?, answer}.

    Image paths resolve against the dataset's directory. Malformed lines are
    skipped and counted; more than 10% malformed is fatal.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    items: list[BenchItem] = []
    malformed = 0
    lines = [line for line in raw.splitlines() if line.strip()]
    for line_no, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValueError("record must be an object")
            items.append(_parse_line(record, path.parent))
        except (ValueError, KeyError) as exc:
            malformed += 1
            log.warning("skipping malformed dataset line %d: %s", line_no, exc)
    if lines and malformed / len(lines) > 0.10:
        raise DatasetError(
            f"{malformed}/{len(lines)} malformed lines in {path}; dataset rejected"
        )
    if malformed:
        log.warning("skipped %d malformed lines in %s", malformed, path)
    return items


def match_choice(generated: str, options: Sequence[str]) -> int | None:
    """Map a generation to an option index.

    First by the leading option letter (tolerating "A", "A.", "A)", "(A)"),
    then by the first option whose full text occurs in the generation,
    case-insensitive. None when nothing matches.
    """
    if not options:
        raise ValueError("options must be non-empty")
    text = generated.strip()
    if text:
        candidate = text
        if candidate.startswith("("):
            candidate = candidate[1:]
        letter = candidate[:1].upper()
        rest = candidate[1:2]
        if letter.isalpha() and (rest == "" or not rest.isalnum()):
            index = string.ascii_uppercase.index(letter)
            if index < len(options):
                return index
    lowered = generated.lower()
    for index, option in enumerate(options):
        if option.lower() in lowered:
            return index
    return None


def format_choice_prompt(question: str, options: Sequence[str]) -> str:
    lines = [f"Question: {question}"]
    for index, option in enumerate(options):
        lines.append(f"{string.ascii_uppercase[index]}. {option}")
    lines.append(CHOICE_DIRECTIVE)
    return "\n".join(lines)


@dataclass
class BenchRecord:
    index: int
    image_path: str
    question: str
    gold: str
    answer: str | None = None
    matched_index: int | None = None
    correct: bool | None = None
    baseline_answer: str | None = None
    baseline_correct: bool | None = None
    pops: int = 0
    fallback_used: bool = False
    transport_failed: bool = False
    error: str | None = None
    trace: dict | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchReport:
    records: list[BenchRecord]
    evaluated: int
    correct: int
    accuracy: float
    baseline_correct: int | None = None
    baseline_accuracy: float | None = None
    transport_failures: int = 0

    def as_dict(self) -> dict:
        return {
            "summary": {
                "total": len(self.records),
                "evaluated": self.evaluated,
                "correct": self.correct,
                "accuracy": self.accuracy,
                "baseline_correct": self.baseline_correct,
                "baseline_accuracy": self.baseline_accuracy,
                "transport_failures": self.transport_failures,
            },
            "items": [record.as_dict() for record in self.records],
        }


def _is_correct(generated: str, item: BenchItem) -> tuple[bool, int | None]:
    if item.options is not None:
        matched = match_choice(generated, item.options)
        gold_index = string.ascii_uppercase.index(item.answer.strip().upper())
        return matched == gold_index, matched
    answer = generated.strip().lower()
    gold = item.answer.strip().lower()
    return answer == gold or gold in answer, None


def run_bench(
    items: Sequence[BenchItem],
    cfg: SearchConfig,
    oracle_factory: Callable[[BenchItem, Image.Image], SearchOracle],
    exemplars: CueExemplars,
    baseline: bool = False,
    jobs: int = 1,
) -> BenchReport:
    """Run the zoom workflow over every item and score the answers.

    Multiple-choice items get the formatted option prompt; when ``baseline``
    is set each item is also answered directly from the whole image for
    comparison. Transport-fatal items are recorded but excluded from the
    accuracy denominator; other failures count as incorrect.
    """
    if not items:
        raise ValueError("no bench items")

    def evaluate(indexed: tuple[int, BenchItem]) -> BenchRecord:
        index, item = indexed
        record = BenchRecord(
            index=index, image_path=item.image_path, question=item.question, gold=item.answer
        )
        try:
            with Image.open(item.image_path) as handle:
                image = handle.convert("RGB")
        except (OSError, UnidentifiedImageError) as exc:
            record.correct = False
            record.error = f"image error: {exc}"
            return record
        oracle = oracle_factory(item, image)
        prompt = (
            format_choice_prompt(item.question, item.options)
            if item.options is not None
            else None
        )
        try:
            outcome = zoom_eye(image, item.question, cfg, oracle, exemplars, answer_prompt=prompt)
            record.answer = outcome.answer
            record.correct, record.matched_index = _is_correct(outcome.answer, item)
            record.fallback_used = outcome.fallback_used
            record.pops = sum(len(trace.pop_events()) for trace in outcome.per_cue_traces)
            record.trace = outcome.as_document(cfg)
            if baseline:
                from .search import ANSWER_PROMPT_TEMPLATE

                direct_prompt = prompt or ANSWER_PROMPT_TEMPLATE.format(item.question)
                direct = oracle.generate(direct_prompt, images=(image,))
                record.baseline_answer = direct
                record.baseline_correct, _ = _is_correct(direct, item)
        except TransportError as exc:
            record.transport_failed = True
            record.error = str(exc)
        except Exception as exc:  # noqa: BLE001 - per-item isolation
            record.correct = False
            record.error = str(exc)
        return record

    indexed_items = list(enumerate(items))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(evaluate, indexed_items))
    else:
        records = [evaluate(pair) for pair in indexed_items]

    scored = [record for record in records if not record.transport_failed]
    correct = sum(1 for record in scored if record.correct)
    report = BenchReport(
        records=records,
        evaluated=len(scored),
        correct=correct,
        accuracy=correct / len(scored) if scored else 0.0,
        transport_failures=len(records) - len(scored),
    )
    if baseline:
        baseline_correct = sum(1 for record in scored if record.baseline_correct)
        report.baseline_correct = baseline_correct
        report.baseline_accuracy = baseline_correct / len(scored) if scored else 0.0
    return report


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-target world for desk-scale validation runs."""

    image_width: int = 1344
    image_height: int = 1344
    min_node_size: int = 336
    target_size: int = 168
    noise_sigma: float = 0.0
    trials: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be positive")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be positive")
        if not 0 < self.target_size <= self.min_node_size:
            raise ValueError("target_size must be in (0, min_node_size]")
        if self.target_size > min(self.image_width, self.image_height):
            raise ValueError("target must fit inside the image")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def synth_tree(spec: SyntheticSpec, trial: int) -> tuple[ImageTree, ScriptedOracleModel]:
    """Tree over a virtual image plus the matching scripted oracle model.

    The target box is placed uniformly inside the image, seeded per trial.
    The visibility ratio saturates scores for nodes up to twice the leaf
    size that fully contain the target, so a noiseless search can stop one
    level above the leaves at the latest.
    """
    rng = random.Random(f"{spec.seed}:{trial}:target")
    x = rng.randint(0, spec.image_width - spec.target_size)
    y = rng.randint(0, spec.image_height - spec.target_size)
    target = BBox(x, y, spec.target_size, spec.target_size)
    tree = build_tree(spec.image_width, spec.image_height, spec.min_node_size)
    ratio = (spec.target_size / (2 * spec.min_node_size)) ** 2
    model = ScriptedOracleModel(
        target_bbox=target,
        visibility_ratio=min(1.0, ratio),
        epsilon_floor=0.01,
        noise_sigma=spec.noise_sigma,
        seed=spec.seed * 1_000_003 + trial,
    )
    return tree, model


def sim_success(node: TreeNode, target: BBox) -> bool:
    cx, cy = target.center()
    return node.bbox.contains_point(cx, cy) and node.bbox.area <= SUCCESS_AREA_FACTOR * target.area


def _random_descent(tree: ImageTree, rng: random.Random) -> TreeNode:
    node = tree.root
    while node.children:
        node = tree.node(rng.choice(node.children))
    return node


@dataclass
class SimRow:
    tau: float
    bias_b: float
    delta: int
    trials: int
    success_rate: float
    mean_pops: float
    baseline_success_rate: float
    pop_histogram: dict[int, int]

    def as_dict(self) -> dict:
        return {
            "tau": self.tau,
            "bias_b": self.bias_b,
            "delta": self.delta,
            "trials": self.trials,
            "success_rate": self.success_rate,
            "mean_pops": self.mean_pops,
            "baseline_success_rate": self.baseline_success_rate,
            "pop_histogram": {str(depth): count for depth, count in self.pop_histogram.items()},
        }


@dataclass
class SimReport:
    spec: SyntheticSpec
    rows: list[SimRow]

    def as_dict(self) -> dict:
        return {
            "spec": {
                "image_width": self.spec.image_width,
                "image_height": self.spec.image_height,
                "min_node_size": self.spec.min_node_size,
                "target_size": self.spec.target_size,
                "noise_sigma": self.spec.noise_sigma,
                "trials": self.spec.trials,
                "seed": self.spec.seed,
            },
            "rows": [row.as_dict() for row in self.rows],
        }

    def csv_lines(self) -> list[str]:
        lines = ["tau,bias_b,delta,trials,success_rate,mean_pops,baseline_success_rate"]
        for row in self.rows:
            lines.append(
                f"{row.tau},{row.bias_b},{row.delta},{row.trials},"
                f"{row.success_rate},{row.mean_pops},{row.baseline_success_rate}"
            )
        return lines


def _run_trial(spec: SyntheticSpec, cfg: SearchConfig, trial: int) -> tuple[bool, int, list[int], bool]:
    tree, model = synth_tree(spec, trial)
    oracle = ScriptedSearchOracle(model)
    result_ids, trace = search_type1(tree, SIM_CUE, SIM_QUESTION, cfg, oracle)
    node = tree.node(result_ids[0])
    pop_depths = [event.depth for event in trace.pop_events()]
    descent_rng = random.Random(f"{spec.seed}:{trial}:descent")
    baseline_node = _random_descent(tree, descent_rng)
    return (
        sim_success(node, model.target_bbox),
        len(pop_depths),
        pop_depths,
        sim_success(baseline_node, model.target_bbox),
    )


def run_sim(spec: SyntheticSpec, cfg_grid: Sequence[SearchConfig], jobs: int = 1) -> SimReport:
    """Planted-target trials per config; success means the returned node
    contains the target center and is not oversized.

    Identical spec and grid reproduce the report bit for bit: every random
    draw is derived from (seed, trial) strings.
    """
    if not cfg_grid:
        raise ValueError("cfg_grid must be non-empty")
    rows: list[SimRow] = []
    for cfg in cfg_grid:
        trials = range(spec.trials)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(lambda trial: _run_trial(spec, cfg, trial), trials))
        else:
            outcomes = [_run_trial(spec, cfg, trial) for trial in trials]
        histogram: Counter[int] = Counter()
        for _, _, depths, _ in outcomes:
            histogram.update(depths)
        successes = sum(1 for success, _, _, _ in outcomes if success)
        baseline_successes = sum(1 for _, _, _, success in outcomes if success)
        total_pops = sum(pops for _, pops, _, _ in outcomes)
        rows.append(
            SimRow(
                tau=cfg.tau,
                bias_b=cfg.bias_b,
                delta=cfg.delta,
                trials=spec.trials,
                success_rate=successes / spec.trials,
                mean_pops=total_pops / spec.trials,
                baseline_success_rate=baseline_successes / spec.trials,
                pop_histogram=dict(sorted(histogram.items())),
            )
        )
    return SimReport(spec=spec, rows=rows)
