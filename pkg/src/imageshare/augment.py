"""Dataset augmentation: moment detection, image alignment, rationale stats.

Full dialogues are scanned for additional image-sharing moments; the model's
pipe-delimited answers are anchored back onto real turns, each moment gets a
generated description and an image from a pluggable provider, and rationale
strings are summarized into verb/object counts.
"""

from __future__ import annotations

import hashlib
import re
import string
from dataclasses import dataclass, replace
from typing import Mapping, Protocol, Sequence

import requests

from .bundled import rationale_skip_words
from .data import AugmentedDialogue, Dialogue, ImageRef, SharingMoment, normalize_ws
from .gateway import (
    BackendRefusedRequest,
    BackendUnavailable,
    CacheCorruption,
    GenConfig,
    LlmGateway,
    default_config,
)
from .metrics import token_f1
from .pipeline import parse_stage2
from .prompts import (
    NamePool,
    assign_speaker_names,
    build_augment_description_prompt,
    build_augment_prompt,
)
from .retrieval import EmbeddingBackend, RetrievalIndex, build_index, rank_vector

DEFAULT_MATCH_THRESHOLD = 0.8


class EmptyCorpus(ValueError):
    pass


class ImageProvider(Protocol):
    provider_id: str

    def acquire(self, description: str) -> ImageRef: ...


@dataclass(frozen=True)
class Warning:
    kind: str
    line: str
    detail: str = ""


_LINE_NUMBER_RE = re.compile(r"^\s*\d+[.)]\s*")


def _match_turn(utterance: str, dialogue: Dialogue, threshold: float) -> int | None:
    needle = normalize_ws(utterance)
    for i, turn in enumerate(dialogue.turns):
        if not turn.is_image_turn and normalize_ws(turn.text) == needle:
            return i
    best_index, best_score = None, 0.0
    for i, turn in enumerate(dialogue.turns):
        if turn.is_image_turn:
            continue
        score = token_f1(utterance, turn.text)
        if score > best_score:
            best_index, best_score = i, score
    if best_index is not None and best_score >= threshold:
        return best_index
    return None


def parse_moments(
    raw: str,
    dialogue: Dialogue,
    names: Mapping[int, str],
    threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> tuple[list[SharingMoment], list[Warning]]:
    """Parse the numbered pipe-delimited answer into anchored sharing moments.

    Each line splits on " | " into utterance, speaker, and rationale. The
    utterance must anchor to a real turn (whitespace-normalized exact match,
    else best token-F1 match at or above ``threshold``), the speaker must be
    one of the assigned names, and the rationale must start with "To".
    Violations never raise; each bad line becomes a Warning and is dropped.
    """
    known_names = set(names.values())
    moments: dict[int, SharingMoment] = {}
    warnings: list[Warning] = []
    for line in raw.splitlines():
        line = _LINE_NUMBER_RE.sub("", line).strip()
        if not line:
            continue
        parts = [p.strip() for p in re.split(r"\s*\|\s*", line)]
        if len(parts) != 3:
            warnings.append(Warning(kind="bad-format", line=line, detail=f"{len(parts)} fields"))
            continue
        utterance, speaker, rationale = parts
        if not rationale.startswith("To"):
            warnings.append(Warning(kind="rationale-prefix", line=line, detail=rationale[:40]))
            continue
        if speaker not in known_names:
            warnings.append(Warning(kind="bad-speaker", line=line, detail=speaker))
            continue
        turn_index = _match_turn(utterance, dialogue, threshold)
        if turn_index is None:
            warnings.append(Warning(kind="unmatched-utterance", line=line, detail=utterance[:40]))
            continue
        if turn_index in moments:
            warnings.append(Warning(kind="duplicate-turn", line=line, detail=f"turn {turn_index}"))
            continue
        moments[turn_index] = SharingMoment(turn_index=turn_index, speaker=speaker, rationale=rationale)
    return [moments[i] for i in sorted(moments)], warnings


_GATEWAY_ERRORS = (BackendUnavailable, BackendRefusedRequest, CacheCorruption)


def augment_dialogue(
    dialogue: Dialogue,
    gateway: LlmGateway,
    provider: ImageProvider,
    *,
    pool: NamePool | None = None,
    names: Mapping[int, str] | None = None,
    augment_cfg: GenConfig | None = None,
    describe_cfg: GenConfig | None = None,
    threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> tuple[AugmentedDialogue, list[Warning]]:
    """Detect sharing moments in one dialogue and attach descriptions/images.

    Gateway or provider failures on individual moments are recorded on the
    moment's error field; the dialogue-level result always comes back with
    whatever moments succeeded. Raw responses persist via the gateway cache.
    """
    names = names or assign_speaker_names(dialogue, pool or NamePool.default())
    prompt = build_augment_prompt(dialogue, names)
    try:
        result = gateway.complete(prompt, augment_cfg or default_config("augment"))
    except _GATEWAY_ERRORS as e:
        warning = Warning(kind="gateway-error", line="", detail=f"{type(e).__name__}: {e}")
        return AugmentedDialogue(base=dialogue, moments=()), [warning]

    moments, warnings = parse_moments(result.text, dialogue, names, threshold)

    final: list[SharingMoment] = []
    for moment in moments:
        desc_prompt = build_augment_description_prompt(dialogue, names, moment.turn_index, moment.speaker)
        try:
            desc_result = gateway.complete(desc_prompt, describe_cfg or default_config("stage2"))
        except _GATEWAY_ERRORS as e:
            final.append(replace(moment, error=f"describe: {type(e).__name__}: {e}"))
            continue
        outcome = parse_stage2(desc_result.text)
        if not outcome.is_parsed:
            final.append(replace(moment, error=f"describe-parse: {outcome.reason or outcome.kind}"))
            continue
        description = outcome.payload.description
        try:
            image = provider.acquire(description)
        except Exception as e:
            final.append(replace(moment, description=description, error=f"provider: {e}"))
            continue
        final.append(replace(moment, description=description, image=image))

    return AugmentedDialogue(base=dialogue, moments=tuple(final)), warnings


# --------------------------------------------------------------------------
# Rationale analysis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RationaleStats:
    pairs: tuple[dict, ...]
    skipped: int


def _clean_token(token: str) -> str:
    return token.strip(string.punctuation)


def analyze_rationales(rationales: Sequence[str]) -> RationaleStats:
    """Count (verb, object) pairs over rationales of the form "To <verb> ...".

    The verb is the token right after "To"; the object is the first later
    token not on the bundled skip-list (determiners, possessives,
    quantifiers, common pre-modifiers). Rationales not starting with "To"
    are skipped and counted, so pair counts always sum to
    len(rationales) - skipped.
    """
    skip = rationale_skip_words()
    counts: dict[tuple[str, str], int] = {}
    examples: dict[tuple[str, str], str] = {}
    skipped = 0
    for rationale in rationales:
        tokens = rationale.split()
        if not tokens or tokens[0] != "To" or len(tokens) < 2:
            skipped += 1
            continue
        verb = _clean_token(tokens[1]).lower()
        obj = ""
        for token in tokens[2:]:
            cleaned = _clean_token(token).lower()
            if cleaned and cleaned not in skip:
                obj = cleaned
                break
        key = (verb, obj)
        counts[key] = counts.get(key, 0) + 1
        examples.setdefault(key, rationale)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    pairs = tuple(
        {"verb": verb, "object": obj, "count": count, "example": examples[(verb, obj)]}
        for (verb, obj), count in ordered
    )
    return RationaleStats(pairs=pairs, skipped=skipped)


# --------------------------------------------------------------------------
# Image providers
# --------------------------------------------------------------------------


class CorpusImageProvider:
    """Retrieves the closest corpus image for a description (top-1 cosine)."""

    provider_id = "corpus"

    def __init__(self, index: RetrievalIndex, refs_by_id: Mapping[str, ImageRef], backend: EmbeddingBackend):
        self._index = index
        self._refs_by_id = dict(refs_by_id)
        self._backend = backend

    def acquire(self, description: str) -> ImageRef:
        query_vec = self._backend.embed_texts([description])[0]
        top_id = rank_vector(self._index, query_vec)[0]
        return self._refs_by_id[top_id]


def corpus_provider(source_images: Sequence[ImageRef], backend: EmbeddingBackend) -> CorpusImageProvider:
    """Build a retrieval-backed provider over a source image corpus."""
    if not source_images:
        raise EmptyCorpus("source image corpus must be nonempty")
    index = build_index(source_images, backend)
    return CorpusImageProvider(index, {ref.id: ref for ref in source_images}, backend)


class GenerativeHttpProvider:
    """Client for a generative image service: POST description, get a URI."""

    provider_id = "generative-http"

    def __init__(self, base_url: str, timeout: float = 300.0, session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def acquire(self, description: str) -> ImageRef:
        resp = self.session.post(self.base_url, json={"description": description}, timeout=self.timeout)
        resp.raise_for_status()
        uri = resp.json()["image_uri"]
        image_id = hashlib.sha256(uri.encode("utf-8")).hexdigest()[:16]
        return ImageRef(id=image_id, uri=uri, source="generated")
