"""The model contract: prompt construction, yes-probability extraction, backends.

Two layers live here. ``ChatBackend`` is the wire-level contract (one
completion call, optionally with first-token log-probabilities); it is
implemented by :class:`HttpChatBackend` for any OpenAI-compatible server.
``SearchOracle`` is the node-level contract the search engines consume;
:class:`ModelSearchOracle` adapts a chat backend to it, and
:class:`ScriptedSearchOracle` is its deterministic geometric stand-in.
"""

from __future__ import annotations

import base64
import io
import logging
import math
import os
import random
import time
import weakref
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Protocol, Sequence

import requests
from PIL import Image

from .geometry import BBox, InputMode, TreeNode, crop_view

log = logging.getLogger(__name__)

ENV_API_BASE = "ZOOMEYE_API_BASE"
ENV_API_KEY = "ZOOMEYE_API_KEY"
ENV_MODEL = "ZOOMEYE_MODEL"

CONFIDENCE_MAX_NEW_TOKENS = 1
ANSWER_MAX_NEW_TOKENS = 256


class PromptKind(str, Enum):
    EXISTING = "existing"
    LATENT = "latent"
    ANSWERING = "answering"
    GENERATE = "generate"


# Scoring templates are byte-pinned: serving stacks key cached scores on the
# exact prompt string, so no rewording (the doubled "the the" is intentional).
_TEMPLATES: dict[tuple[PromptKind, InputMode], str] = {
    (PromptKind.EXISTING, InputMode.LOCAL): "Is there a {} in the image? Answer Yes or No.",
    (PromptKind.EXISTING, InputMode.GLOBAL_LOCAL): (
        "Is there a {} in the zoomed-in view? Answer Yes or No."
    ),
    (PromptKind.LATENT, InputMode.LOCAL): (
        "According to your common sense knowledge and the content of the image, "
        "is it possible to find a {} in the image? Answer Yes or No and tell the reason."
    ),
    (PromptKind.LATENT, InputMode.GLOBAL_LOCAL): (
        "According to your common sense knowledge and the content of the zoomed-in view, "
        "along with its location in the image, is it possible to find a {} by further "
        "zooming in the current view? Answer Yes or No and tell the reason."
    ),
    (PromptKind.ANSWERING, InputMode.LOCAL): (
        "Question: {} \nCould you answer the question based on the the available "
        "visual information? Answer Yes or No."
    ),
    (PromptKind.ANSWERING, InputMode.GLOBAL_LOCAL): (
        "Question: {} \nCould you answer the question based on the the available "
        "visual information? Answer Yes or No."
    ),
}

DECOMPOSED_QUESTION_TEMPLATE = "What is the appearance of the {}?"


def build_prompt(kind: PromptKind, mode: InputMode, cue_or_question: str) -> str:
    """Exact template string for (kind, mode) with the placeholder substituted."""
    if not cue_or_question:
        raise ValueError("cue or question must be non-empty")
    if kind is PromptKind.GENERATE:
        raise ValueError("free-generation prompts pass through unchanged; no template")
    return _TEMPLATES[(kind, mode)].format(cue_or_question)


def decomposed_question(cue: str) -> str:
    """Per-cue question used when several cues are searched in one run."""
    if not cue:
        raise ValueError("cue must be non-empty")
    return DECOMPOSED_QUESTION_TEMPLATE.format(cue)


class OracleError(Exception):
    """Base class for backend failures."""


class TransportError(OracleError):
    """The backend could not be reached after the configured attempts."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(OracleError):
    """The backend answered with something that is not a valid completion."""


@dataclass(frozen=True)
class OracleRequest:
    """One completion request.

    ``images`` is ordered: one patch in local mode, [global image, local
    patch] in global+local mode. ``history`` holds prior text-only
    (role, text) turns, used for in-context cue generation.
    """

    images: tuple[Image.Image, ...]
    prompt: str
    max_new_tokens: int = CONFIDENCE_MAX_NEW_TOKENS
    want_logprobs: bool = True
    history: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass(frozen=True)
class CompletionResult:
    """Backend reply: completion text plus the first generated token's
    candidate distribution (token -> logprob) when available."""

    text: str
    top_logprobs: dict[str, float] | None = None


class ChatBackend(Protocol):
    def complete(self, request: OracleRequest) -> CompletionResult: ...


YES_SURFACE_FORMS = ("Yes", "yes", " Yes", " yes")
NO_SURFACE_FORMS = ("No", "no", " No", " no")


@dataclass(frozen=True)
class YesNoDistribution:
    """Probability mass collected over Yes/No surface forms of one token slot."""

    p_yes_raw: float
    p_no_raw: float

    @property
    def normalized(self) -> float | None:
        """Two-class renormalized yes-probability; None when no mass at all."""
        total = self.p_yes_raw + self.p_no_raw
        if total <= 0.0:
            return None
        return self.p_yes_raw / total


def extract_yes_no(top_logprobs: dict[str, float]) -> YesNoDistribution:
    """Sum candidate-token mass over cased and space-prefixed Yes/No forms."""
    p_yes = sum(math.exp(top_logprobs[t]) for t in YES_SURFACE_FORMS if t in top_logprobs)
    p_no = sum(math.exp(top_logprobs[t]) for t in NO_SURFACE_FORMS if t in top_logprobs)
    return YesNoDistribution(p_yes, p_no)


def yes_probability(backend: ChatBackend, request: OracleRequest) -> float:
    """Yes-probability of the first generated token, renormalized over the
    Yes/No classes.

    Falls back to prefix matching on the completion text when the backend
    returns no usable token distribution: 1.0 iff the trimmed, lowercased
    text starts with "yes".
    """
    if not request.want_logprobs:
        raise ValueError("confidence queries must request logprobs")
    if request.max_new_tokens != CONFIDENCE_MAX_NEW_TOKENS:
        raise ValueError("confidence queries decode exactly one token")
    result = backend.complete(request)
    if result.top_logprobs is not None:
        normalized = extract_yes_no(result.top_logprobs).normalized
        if normalized is not None:
            return normalized
    return 1.0 if result.text.strip().lower().startswith("yes") else 0.0


def generate_text(
    backend: ChatBackend,
    images: Sequence[Image.Image],
    prompt: str,
    max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
    history: Sequence[tuple[str, str]] = (),
) -> str:
    """Free generation; returns the completion trimmed of surrounding whitespace."""
    request = OracleRequest(
        images=tuple(images),
        prompt=prompt,
        max_new_tokens=max_new_tokens,
        want_logprobs=False,
        history=tuple(history),
    )
    text = backend.complete(request).text.strip()
    if not text:
        log.warning("backend returned an empty completion")
    return text


# Keyed by image identity (PIL images are not hashable), evicted when the
# image is collected; assumes images are not mutated after first use. The
# global view recurs on every query of a run, so this saves one full PNG
# encode per confidence call in global+local mode.
_encoded_images: dict[int, str] = {}


def _data_url(image: Image.Image) -> str:
    key = id(image)
    cached = _encoded_images.get(key)
    if cached is None:
        buf = io.BytesIO()
        image.save(buf, format="PNG")
        cached = f"data:image/png;base64,{base64.b64encode(buf.getvalue()).decode('ascii')}"
        _encoded_images[key] = cached
        weakref.finalize(image, _encoded_images.pop, key, None)
    return cached


class HttpChatBackend:
    """OpenAI-compatible chat-completions client.

    Speaks POST {base}/chat/completions with user content interleaving
    base64 data-URL image parts and text parts, temperature 0, and
    ``top_logprobs`` candidates when a distribution is requested. Transient
    failures (connection errors, 5xx, 429) are retried with exponential
    backoff; anything else malformed raises :class:`ProtocolError`.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff_start: float = 0.5,
        top_logprobs: int = 20,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url:
            raise ValueError("base_url must be non-empty")
        if not model:
            raise ValueError("model must be non-empty")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_start = backoff_start
        self.top_logprobs = top_logprobs
        self._session = session or requests.Session()
        self._sleep = sleep

    @classmethod
    def from_env(cls, **kwargs) -> "HttpChatBackend":
        """Build a backend from ZOOMEYE_API_BASE / ZOOMEYE_API_KEY / ZOOMEYE_MODEL."""
        base = os.environ.get(ENV_API_BASE)
        model = os.environ.get(ENV_MODEL)
        if not base:
            raise ValueError(f"{ENV_API_BASE} is not set")
        if not model:
            raise ValueError(f"{ENV_MODEL} is not set")
        return cls(base, model, api_key=os.environ.get(ENV_API_KEY), **kwargs)

    def _messages(self, request: OracleRequest) -> list[dict]:
        messages: list[dict] = [
            {"role": role, "content": text} for role, text in request.history
        ]
        if request.images:
            parts: list[dict] = [
                {"type": "image_url", "image_url": {"url": _data_url(image)}}
                for image in request.images
            ]
            parts.append({"type": "text", "text": request.prompt})
            messages.append({"role": "user", "content": parts})
        else:
            messages.append({"role": "user", "content": request.prompt})
        return messages

    def complete(self, request: OracleRequest) -> CompletionResult:
        payload: dict = {
            "model": self.model,
            "messages": self._messages(request),
            "temperature": 0,
            "max_tokens": request.max_new_tokens,
        }
        if request.want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = self.top_logprobs
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        url = f"{self.base_url}/chat/completions"
        last_failure = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._session.post(
                    url, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_failure = str(exc)
            else:
                if response.status_code in (429,) or response.status_code >= 500:
                    last_failure = f"HTTP {response.status_code}"
                elif response.status_code != 200:
                    raise ProtocolError(
                        f"HTTP {response.status_code}: {response.text[:200]}"
                    )
                else:
                    return self._parse(response)
            if attempt < self.max_attempts:
                delay = self.backoff_start * (2 ** (attempt - 1))
                log.warning(
                    "chat completion attempt %d/%d failed (%s); retrying in %.1fs",
                    attempt,
                    self.max_attempts,
                    last_failure,
                    delay,
                )
                self._sleep(delay)
        raise TransportError(
            f"backend unreachable after {self.max_attempts} attempts: {last_failure}",
            attempts=self.max_attempts,
        )

    @staticmethod
    def _parse(response: requests.Response) -> CompletionResult:
        try:
            data = response.json()
            choice = data["choices"][0]
            text = choice["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from exc
        top: dict[str, float] | None = None
        logprobs = choice.get("logprobs")
        if isinstance(logprobs, dict):
            content = logprobs.get("content") or []
            if content:
                try:
                    top = {
                        entry["token"]: float(entry["logprob"])
                        for entry in content[0].get("top_logprobs", [])
                    }
                except (KeyError, TypeError, ValueError) as exc:
                    raise ProtocolError(f"malformed logprobs payload: {exc}") from exc
        return CompletionResult(text=text, top_logprobs=top)


@dataclass(frozen=True)
class ScriptedOracleModel:
    """Deterministic geometric stand-in for the multimodal model.

    Confidence for a node is driven entirely by how the node's box relates
    to a planted ``target_bbox``. With ``noise_sigma`` of 0 the model is a
    pure function of (node box, kind); with noise, outputs are seeded per
    (node, kind) and reproducible across runs.
    """

    target_bbox: BBox
    visibility_ratio: float = 0.25
    epsilon_floor: float = 0.01
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.visibility_ratio <= 1.0:
            raise ValueError("visibility_ratio must be in (0, 1]")
        if not 0.0 <= self.epsilon_floor <= 1.0:
            raise ValueError("epsilon_floor must be in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")


def scripted_confidence(model: ScriptedOracleModel, node: TreeNode, kind: PromptKind) -> float:
    """Scripted stand-in for the three confidence kinds.

    Existing/answering confidence is the visible fraction of the target,
    discounted when the node is so large that the target would be tiny in
    it (area ratio below ``visibility_ratio``). Latent confidence is high
    iff the node contains the target's center.
    """
    if kind is PromptKind.GENERATE:
        raise ValueError("scripted_confidence scores confidence kinds only")
    target = model.target_bbox
    if kind is PromptKind.LATENT:
        cx, cy = target.center()
        value = 1.0 - model.epsilon_floor if node.bbox.contains_point(cx, cy) else model.epsilon_floor
    else:
        visible = target.intersection_area(node.bbox) / target.area
        scale = target.area / node.bbox.area
        value = visible * min(1.0, scale / model.visibility_ratio)
    if model.noise_sigma > 0.0:
        rng = random.Random(f"{model.seed}:{node.id}:{kind.value}")
        value += rng.gauss(0.0, model.noise_sigma)
    return min(1.0, max(0.0, value))


class SearchOracle(Protocol):
    """Node-level oracle surface the search engines drive."""

    def confidence(self, node: TreeNode, kind: PromptKind, text: str) -> float: ...

    def generate(
        self,
        prompt: str,
        *,
        images: Sequence[Image.Image] = (),
        history: Sequence[tuple[str, str]] = (),
        max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
    ) -> str: ...


class ModelSearchOracle:
    """Scores tree nodes by querying a chat backend with mode-specific prompts."""

    def __init__(self, backend: ChatBackend, image: Image.Image, mode: InputMode):
        self._backend = backend
        self._image = image
        self._mode = mode

    def confidence(self, node: TreeNode, kind: PromptKind, text: str) -> float:
        patch = crop_view(self._image, node.bbox)
        if self._mode is InputMode.GLOBAL_LOCAL:
            images: tuple[Image.Image, ...] = (self._image, patch)
        else:
            images = (patch,)
        request = OracleRequest(
            images=images,
            prompt=build_prompt(kind, self._mode, text),
            max_new_tokens=CONFIDENCE_MAX_NEW_TOKENS,
            want_logprobs=True,
        )
        return yes_probability(self._backend, request)

    def generate(
        self,
        prompt: str,
        *,
        images: Sequence[Image.Image] = (),
        history: Sequence[tuple[str, str]] = (),
        max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
    ) -> str:
        return generate_text(self._backend, images, prompt, max_new_tokens, history)


_CUE_REQUEST_FRAGMENT = "which objects' information do you need"


class ScriptedSearchOracle:
    """Deterministic drop-in for :class:`ModelSearchOracle`.

    Confidences come from a :class:`ScriptedOracleModel`; generation returns
    canned text so a full search run needs no server.
    """

    def __init__(
        self,
        model: ScriptedOracleModel,
        cue_completion: str | None = None,
        answer: str | None = None,
    ):
        target = model.target_bbox
        self.model = model
        self._cue_completion = cue_completion or (
            "To answer the question, I need know the location of the target. "
            "So I need the information about the following objects: target."
        )
        self._answer = answer or (
            f"The target occupies the region x={target.x}, y={target.y}, "
            f"w={target.w}, h={target.h}."
        )

    def confidence(self, node: TreeNode, kind: PromptKind, text: str) -> float:
        return scripted_confidence(self.model, node, kind)

    def generate(
        self,
        prompt: str,
        *,
        images: Sequence[Image.Image] = (),
        history: Sequence[tuple[str, str]] = (),
        max_new_tokens: int = ANSWER_MAX_NEW_TOKENS,
    ) -> str:
        if _CUE_REQUEST_FRAGMENT in prompt:
            return self._cue_completion
        return self._answer
