"""Confidence-guided zoom search over high-resolution images.

Builds a multi-resolution tree over an image, asks a multimodal yes/no
oracle how confident it is that the sought object is visible (or findable
deeper, or that the question is answerable) in each patch, best-first
searches the tree under a decaying stop threshold, and answers the question
from the zoomed-in union of the found patches.
"""

from .cues import (
    CUE_QUESTION_TEMPLATE,
    CueExemplars,
    CueType,
    EXEMPLAR_SETS,
    HRBENCH_EXEMPLARS,
    ParsedCues,
    VSTAR_EXEMPLARS,
    VisualCue,
    generate_cues,
    parse_cues,
)
from .geometry import (
    AnswerVisual,
    BBox,
    ImageTree,
    InputMode,
    ResizePolicy,
    TreeNode,
    assemble_answer_visual,
    build_tree,
    crop_view,
    union_bbox,
)
from .harness import (
    BenchItem,
    BenchReport,
    DatasetError,
    SimReport,
    SyntheticSpec,
    load_dataset,
    match_choice,
    run_bench,
    run_sim,
    sim_success,
    synth_tree,
)
from .oracle import (
    CompletionResult,
    HttpChatBackend,
    ModelSearchOracle,
    OracleError,
    OracleRequest,
    PromptKind,
    ProtocolError,
    ScriptedOracleModel,
    ScriptedSearchOracle,
    SearchOracle,
    TransportError,
    YesNoDistribution,
    build_prompt,
    decomposed_question,
    extract_yes_no,
    generate_text,
    scripted_confidence,
    yes_probability,
)
from .search import (
    ANSWER_PROMPT_TEMPLATE,
    PRESETS,
    SearchAborted,
    SearchConfig,
    SearchOutcome,
    SearchTrace,
    TRACE_SCHEMA_VERSION,
    TraceAction,
    TraceEvent,
    depth_weight,
    preset,
    rank_score,
    search_type1,
    search_type2,
    stopping_check,
    zoom_eye,
)

__version__ = "0.1.0"

__all__ = [
    "ANSWER_PROMPT_TEMPLATE",
    "AnswerVisual",
    "BBox",
    "BenchItem",
    "BenchReport",
    "CompletionResult",
    "CUE_QUESTION_TEMPLATE",
    "CueExemplars",
    "CueType",
    "DatasetError",
    "EXEMPLAR_SETS",
    "HRBENCH_EXEMPLARS",
    "HttpChatBackend",
    "ImageTree",
    "InputMode",
    "ModelSearchOracle",
    "OracleError",
    "OracleRequest",
    "ParsedCues",
    "PRESETS",
    "PromptKind",
    "ProtocolError",
    "ResizePolicy",
    "ScriptedOracleModel",
    "ScriptedSearchOracle",
    "SearchAborted",
    "SearchConfig",
    "SearchOracle",
    "SearchOutcome",
    "SearchTrace",
    "SimReport",
    "SyntheticSpec",
    "TRACE_SCHEMA_VERSION",
    "TraceAction",
    "TraceEvent",
    "TransportError",
    "TreeNode",
    "VSTAR_EXEMPLARS",
    "VisualCue",
    "YesNoDistribution",
    "assemble_answer_visual",
    "build_prompt",
    "build_tree",
    "crop_view",
    "decomposed_question",
    "depth_weight",
    "extract_yes_no",
    "generate_cues",
    "generate_text",
    "load_dataset",
    "match_choice",
    "parse_cues",
    "preset",
    "rank_score",
    "run_bench",
    "run_sim",
    "scripted_confidence",
    "search_type1",
    "search_type2",
    "sim_success",
    "stopping_check",
    "synth_tree",
    "union_bbox",
    "yes_probability",
    "zoom_eye",
    "__version__",
]
