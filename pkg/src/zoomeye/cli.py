"""Command-line entry points: ask one question, run a benchmark, run the simulator.

Exit codes: 0 success, 1 configuration error, 2 transport error, 3 image error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from PIL import Image, ImageDraw, UnidentifiedImageError

from .cues import EXEMPLAR_SETS
from .geometry import BBox, ResizePolicy
from .harness import (
    DatasetError,
    SimReport,
    SyntheticSpec,
    load_dataset,
    run_bench,
    run_sim,
)
from .oracle import (
    ENV_API_BASE,
    ENV_API_KEY,
    ENV_MODEL,
    HttpChatBackend,
    ModelSearchOracle,
    OracleError,
    ScriptedOracleModel,
    ScriptedSearchOracle,
    TransportError,
)
from .search import PRESETS, SearchConfig, SearchOutcome, TraceAction, preset, zoom_eye

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_TRANSPORT = 2
EXIT_IMAGE = 3

_VISIT_COLOR_START = (66, 135, 245)
_VISIT_COLOR_END = (239, 68, 56)
_UNION_COLOR = (52, 199, 89)

_FLOAT_CONFIG_KEYS = {"tau", "tau2", "tau_min", "bias_b", "aspect_threshold",
                      "rho", "epsilon_floor", "noise_sigma"}
_INT_CONFIG_KEYS = {"delta", "c_multiplier", "max_type2_depth", "paste_longer_side",
                    "min_node_size", "seed", "jobs"}
_STRING_CONFIG_KEYS = {"mode", "resize_policy", "backend", "api_base", "api_key",
                       "model", "exemplars", "out"}
_OTHER_CONFIG_KEYS = {"target"}
ALLOWED_CONFIG_KEYS = (
    _FLOAT_CONFIG_KEYS | _INT_CONFIG_KEYS | _STRING_CONFIG_KEYS | _OTHER_CONFIG_KEYS
)

_SEARCH_CONFIG_KEYS = {
    "tau", "tau2", "tau_min", "delta", "bias_b", "c_multiplier", "max_type2_depth",
    "paste_longer_side", "min_node_size", "aspect_threshold", "resize_policy",
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Argument errors are configuration errors (exit 1, not argparse's 2)."""

    def error(self, message: str):
        raise CliError(EXIT_CONFIG, message)


def _parse_target(value) -> BBox:
    if isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        parts = str(value).split(",")
    if len(parts) != 4:
        raise CliError(EXIT_CONFIG, f"target must be x,y,w,h; got {value!r}")
    try:
        x, y, w, h = (int(part) for part in parts)
        return BBox(x, y, w, h)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad target {value!r}: {exc}") from exc


def _load_config_file(path: str) -> dict:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config file: {exc}") from exc
    try:
        data = json.loads(raw)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, "config file must be a flat JSON object")
    normalized: dict = {}
    for key, value in data.items():
        name = str(key).replace("-", "_")
        if name == "bias":
            name = "bias_b"
        if name not in ALLOWED_CONFIG_KEYS:
            raise CliError(EXIT_CONFIG, f"unknown config key: {key}")
        try:
            if name in _FLOAT_CONFIG_KEYS:
                value = float(value)
            elif name in _INT_CONFIG_KEYS:
                value = int(value)
            elif name in _STRING_CONFIG_KEYS:
                value = str(value)
        except (TypeError, ValueError) as exc:
            raise CliError(EXIT_CONFIG, f"bad value for config key {key}: {exc}") from exc
        normalized[name] = value
    return normalized


@dataclass
class _RunSettings:
    cfg: SearchConfig
    backend: str
    api_base: str | None
    api_key: str | None
    model: str | None
    target: BBox | None
    rho: float
    epsilon_floor: float
    noise_sigma: float
    seed: int
    jobs: int
    out: Path
    exemplars: str


def _first(*values):
    for value in values:
        if value is not None:
            return value
    return None


def _resolve(args: argparse.Namespace) -> _RunSettings:
    file_cfg = _load_config_file(args.config) if args.config else {}

    mode_name = _first(args.mode, file_cfg.get("mode"), "local")
    try:
        cfg = preset(mode_name)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc

    overrides: dict = {}
    for key in _SEARCH_CONFIG_KEYS:
        if key in file_cfg:
            overrides[key] = file_cfg[key]
    for key, flag_value in (
        ("tau", args.tau),
        ("tau2", args.tau2),
        ("tau_min", args.tau_min),
        ("delta", args.delta),
        ("bias_b", args.bias),
    ):
        if flag_value is not None:
            overrides[key] = flag_value
    if "resize_policy" in overrides:
        try:
            overrides["resize_policy"] = ResizePolicy(overrides["resize_policy"])
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"unknown resize_policy: {exc}") from exc
    try:
        cfg = cfg.replace(**overrides)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid search configuration: {exc}") from exc

    target = _first(getattr(args, "target", None), file_cfg.get("target"))
    exemplars = _first(getattr(args, "exemplars", None), file_cfg.get("exemplars"), "vstar")
    if exemplars not in EXEMPLAR_SETS:
        raise CliError(EXIT_CONFIG, f"unknown exemplar set: {exemplars}")
    jobs = int(_first(args.jobs, file_cfg.get("jobs"), 1))
    if jobs < 1:
        raise CliError(EXIT_CONFIG, "jobs must be >= 1")
    return _RunSettings(
        cfg=cfg,
        backend=_first(getattr(args, "backend", None), file_cfg.get("backend"), "http"),
        api_base=_first(getattr(args, "api_base", None), file_cfg.get("api_base")),
        api_key=_first(getattr(args, "api_key", None), file_cfg.get("api_key")),
        model=_first(getattr(args, "model", None), file_cfg.get("model")),
        target=_parse_target(target) if target is not None else None,
        rho=float(_first(getattr(args, "rho", None), file_cfg.get("rho"), 0.25)),
        epsilon_floor=float(
            _first(getattr(args, "epsilon_floor", None), file_cfg.get("epsilon_floor"), 0.01)
        ),
        noise_sigma=float(
            _first(getattr(args, "noise_sigma", None), file_cfg.get("noise_sigma"), 0.0)
        ),
        seed=int(_first(args.seed, file_cfg.get("seed"), 0)),
        jobs=jobs,
        out=Path(_first(args.out, file_cfg.get("out"), "zoomeye_out")),
        exemplars=exemplars,
    )


def _default_target(width: int, height: int) -> BBox:
    size = max(1, min(width, height) // 4)
    return BBox((width - size) // 2, (height - size) // 2, size, size)


def _scripted_oracle(settings: _RunSettings, width: int, height: int) -> ScriptedSearchOracle:
    target = settings.target or _default_target(width, height)
    try:
        model = ScriptedOracleModel(
            target_bbox=target,
            visibility_ratio=settings.rho,
            epsilon_floor=settings.epsilon_floor,
            noise_sigma=settings.noise_sigma,
            seed=settings.seed,
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid scripted oracle: {exc}") from exc
    return ScriptedSearchOracle(model)


def _http_backend(settings: _RunSettings) -> HttpChatBackend:
    base = settings.api_base or os.environ.get(ENV_API_BASE)
    model = settings.model or os.environ.get(ENV_MODEL)
    key = settings.api_key or os.environ.get(ENV_API_KEY)
    if not base or not model:
        raise CliError(
            EXIT_CONFIG,
            f"http backend needs --api-base and --model (or {ENV_API_BASE}/{ENV_MODEL})",
        )
    return HttpChatBackend(base, model, api_key=key)


def _load_image(path: str) -> Image.Image:
    try:
        with Image.open(path) as handle:
            return handle.convert("RGB")
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise CliError(EXIT_IMAGE, f"cannot open image {path}: {exc}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise CliError(EXIT_IMAGE, f"cannot decode image {path}: {exc}") from exc


def _lerp_color(start, end, t: float) -> tuple[int, int, int]:
    return tuple(round(s + (e - s) * t) for s, e in zip(start, end))


def render_trace_overlay(image: Image.Image, outcome: SearchOutcome) -> Image.Image:
    """Visited-node boxes color-graded by visit order, union box on top."""
    annotated = image.convert("RGB")
    draw = ImageDraw.Draw(annotated)
    pops = [
        event
        for trace in outcome.per_cue_traces
        for event in trace.events
        if event.action is TraceAction.POP
    ]
    for index, event in enumerate(pops):
        t = index / (len(pops) - 1) if len(pops) > 1 else 0.0
        box = event.bbox
        draw.rectangle(
            (box.x, box.y, box.right - 1, box.bottom - 1),
            outline=_lerp_color(_VISIT_COLOR_START, _VISIT_COLOR_END, t),
            width=3,
        )
    union = outcome.union
    draw.rectangle(
        (union.x, union.y, union.right - 1, union.bottom - 1),
        outline=_UNION_COLOR,
        width=5,
    )
    return annotated


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def cmd_ask(args: argparse.Namespace) -> int:
    settings = _resolve(args)
    if not args.question or not args.question.strip():
        raise CliError(EXIT_CONFIG, "question must be non-empty")
    image = _load_image(args.image)
    if settings.backend == "scripted":
        oracle = _scripted_oracle(settings, image.width, image.height)
    elif settings.backend == "http":
        oracle = ModelSearchOracle(_http_backend(settings), image, settings.cfg.mode)
    else:
        raise CliError(EXIT_CONFIG, f"unknown backend: {settings.backend}")

    outcome = zoom_eye(
        image, args.question, settings.cfg, oracle, EXEMPLAR_SETS[settings.exemplars]
    )
    print(outcome.answer)
    settings.out.mkdir(parents=True, exist_ok=True)
    (settings.out / "answer.txt").write_text(outcome.answer + "\n", encoding="utf-8")
    _write_json(settings.out / "trace.json", outcome.as_document(settings.cfg))
    if args.annotate:
        render_trace_overlay(image, outcome).save(settings.out / "annotated.png")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    settings = _resolve(args)
    try:
        items = load_dataset(args.dataset)
    except DatasetError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    if not items:
        raise CliError(EXIT_CONFIG, f"dataset {args.dataset} holds no usable items")

    if settings.backend == "scripted":
        def factory(item, image):
            return _scripted_oracle(settings, image.width, image.height)
    elif settings.backend == "http":
        backend = _http_backend(settings)

        def factory(item, image):
            return ModelSearchOracle(backend, image, settings.cfg.mode)
    else:
        raise CliError(EXIT_CONFIG, f"unknown backend: {settings.backend}")

    report = run_bench(
        items,
        settings.cfg,
        factory,
        EXEMPLAR_SETS[settings.exemplars],
        baseline=args.baseline,
        jobs=settings.jobs,
    )
    print(f"zoom accuracy: {report.accuracy:.4f} ({report.correct}/{report.evaluated})")
    if args.baseline:
        print(
            "baseline accuracy: "
            f"{report.baseline_accuracy:.4f} ({report.baseline_correct}/{report.evaluated})"
        )
        print(f"delta: {report.accuracy - report.baseline_accuracy:+.4f}")
    _write_json(settings.out / "bench_report.json", report.as_dict())
    return EXIT_OK


def _parse_sweep(raw: str | None, cast):
    if raw is None:
        return None
    try:
        return [cast(piece) for piece in raw.split(",") if piece.strip()]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad sweep list {raw!r}: {exc}") from exc


def cmd_simulate(args: argparse.Namespace) -> int:
    settings = _resolve(args)
    try:
        spec = SyntheticSpec(
            image_width=args.width,
            image_height=args.height,
            min_node_size=args.min_node_size,
            target_size=args.target_size,
            noise_sigma=settings.noise_sigma,
            trials=args.trials,
            seed=settings.seed,
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid simulation spec: {exc}") from exc

    taus = _parse_sweep(args.sweep_tau, float) or [settings.cfg.tau]
    biases = _parse_sweep(args.sweep_bias, float) or [settings.cfg.bias_b]
    deltas = _parse_sweep(args.sweep_delta, int) or [settings.cfg.delta]
    grid = []
    for tau, bias_b, delta in itertools.product(taus, biases, deltas):
        try:
            grid.append(settings.cfg.replace(tau=tau, bias_b=bias_b, delta=delta))
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"invalid sweep point: {exc}") from exc

    report: SimReport = run_sim(spec, grid, jobs=settings.jobs)
    for row in report.rows:
        print(
            f"tau={row.tau} bias={row.bias_b} delta={row.delta} "
            f"success={row.success_rate:.4f} mean_pops={row.mean_pops:.2f} "
            f"baseline={row.baseline_success_rate:.4f}"
        )
    _write_json(settings.out / "sim_report.json", report.as_dict())
    if args.csv:
        csv_path = Path(args.csv)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text("\n".join(report.csv_lines()) + "\n", encoding="utf-8")
    return EXIT_OK


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=sorted(PRESETS), help="parameter preset")
    parser.add_argument("--tau", type=float, help="type-1 stop threshold")
    parser.add_argument("--tau2", type=float, help="type-2 inclusion threshold")
    parser.add_argument("--tau-min", type=float, dest="tau_min", help="decay floor")
    parser.add_argument("--delta", type=int, help="pops between threshold decays")
    parser.add_argument("--bias", type=float, help="depth-weight bias")
    parser.add_argument("--config", help="flat JSON config file; flags win over it")
    parser.add_argument("--seed", type=int, help="seed for scripted noise and simulation")
    parser.add_argument("--jobs", type=int, help="parallel workers for bench items / sim trials")
    parser.add_argument("--out", help="output directory (default zoomeye_out)")


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", choices=["http", "scripted"], help="oracle backend")
    parser.add_argument("--api-base", dest="api_base", help=f"chat server base URL (or {ENV_API_BASE})")
    parser.add_argument("--api-key", dest="api_key", help=f"API key (or {ENV_API_KEY})")
    parser.add_argument("--model", help=f"served model name (or {ENV_MODEL})")
    parser.add_argument("--target", help="scripted target box as x,y,w,h")
    parser.add_argument("--rho", type=float, help="scripted visibility ratio")
    parser.add_argument("--epsilon-floor", type=float, dest="epsilon_floor",
                        help="scripted latent floor")
    parser.add_argument("--noise-sigma", type=float, dest="noise_sigma",
                        help="scripted confidence noise")
    parser.add_argument("--exemplars", choices=sorted(EXEMPLAR_SETS),
                        help="in-context exemplar set for cue generation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zoomeye", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    ask = commands.add_parser("ask", parents=[], help="answer one question about one image")
    ask.add_argument("--image", required=True, help="path to a PNG or JPEG image")
    ask.add_argument("--question", required=True, help="question about the image")
    ask.add_argument("--annotate", action="store_true",
                     help="write annotated.png with visited boxes and the union box")
    _add_common_flags(ask)
    _add_backend_flags(ask)
    ask.set_defaults(func=cmd_ask)

    bench = commands.add_parser("bench", help="evaluate a JSONL dataset")
    bench.add_argument("--dataset", required=True, help="JSONL file: image/question/options?/answer")
    bench.add_argument("--baseline", action="store_true",
                       help="also answer directly from the whole image")
    _add_common_flags(bench)
    _add_backend_flags(bench)
    bench.set_defaults(func=cmd_bench)

    simulate = commands.add_parser("simulate", help="planted-target simulation and sweeps")
    simulate.add_argument("--width", type=int, default=1344, help="virtual image width")
    simulate.add_argument("--height", type=int, default=1344, help="virtual image height")
    simulate.add_argument("--min-node-size", type=int, dest="min_node_size", default=336,
                          help="leaf size of the simulated tree")
    simulate.add_argument("--target-size", type=int, dest="target_size", default=168,
                          help="planted target side length")
    simulate.add_argument("--trials", type=int, default=100, help="trials per sweep point")
    simulate.add_argument("--sweep-tau", dest="sweep_tau", help="comma list of tau values")
    simulate.add_argument("--sweep-bias", dest="sweep_bias", help="comma list of bias values")
    simulate.add_argument("--sweep-delta", dest="sweep_delta", help="comma list of delta values")
    simulate.add_argument("--csv", help="also write sweep rows to this CSV file")
    _add_common_flags(simulate)
    simulate.add_argument("--noise-sigma", type=float, dest="noise_sigma",
                          help="scripted confidence noise")
    simulate.set_defaults(func=cmd_simulate, backend="scripted")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except OracleError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
