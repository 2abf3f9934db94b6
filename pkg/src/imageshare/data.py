"""Domain records and JSONL loaders for image-sharing dialogue corpora.

This module is the single source of truth for the dialogue, annotation, and
augmented-dialogue schemas used by the pipeline, retrieval, and augmentation
stages. Loaders validate every invariant up front; loaded values are
immutable and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from .bundled import object_categories

DESCRIPTION_PREFIXES = ("An image of", "A photo of")

VALID_IMAGE_SOURCES = ("corpus", "generated")


class MalformedRecord(ValueError):
    """A JSONL record violates the schema. Carries line number and field."""

    def __init__(self, line_no: int, field_name: str, message: str):
        self.line_no = line_no
        self.field_name = field_name
        super().__init__(f"line {line_no}, field {field_name!r}: {message}")


class DuplicateDialogueId(ValueError):
    pass


class UnknownIntentLabel(ValueError):
    pass


class PrefixViolation(ValueError):
    pass


class ValidationError(ValueError):
    pass


class IntentLabel(Enum):
    """Six-way taxonomy of image-sharing intent, in option-letter order."""

    INFORMATION_DISSEMINATION = "Information Dissemination"
    SOCIAL_BONDING = "Social Bonding"
    HUMOR_AND_ENTERTAINMENT = "Humor and Entertainment"
    VISUAL_CLARIFICATION = "Visual Clarification"
    TOPIC_TRANSITION = "Topic Transition"
    EXPRESSION_OF_EMOTION_OR_OPINION = "Expression of Emotion or Opinion"

    @property
    def option_letter(self) -> str:
        return "abcdef"[list(IntentLabel).index(self)]

    @property
    def option_label(self) -> str:
        """Render as a multiple-choice option, e.g. '(b) Social Bonding'."""
        return f"({self.option_letter}) {self.value}"

    @classmethod
    def from_text(cls, text: str) -> IntentLabel:
        """Resolve a label from its text form, case-insensitively."""
        key = " ".join(text.split()).lower()
        try:
            return _INTENT_BY_TEXT[key]
        except KeyError:
            raise UnknownIntentLabel(text) from None

    @classmethod
    def from_letter(cls, letter: str) -> IntentLabel:
        try:
            return list(cls)["abcdef".index(letter.lower())]
        except ValueError:
            raise UnknownIntentLabel(letter) from None


_INTENT_BY_TEXT = {label.value.lower(): label for label in IntentLabel}


@dataclass(frozen=True)
class Turn:
    speaker_id: int
    text: str
    is_image_turn: bool = False


@dataclass(frozen=True)
class ImageRef:
    id: str
    uri: str
    source: str = "corpus"


@dataclass(frozen=True)
class Dialogue:
    """An ordered two-speaker conversation with one optional image-share turn."""

    dialogue_id: str
    turns: tuple[Turn, ...]
    share_turn_index: int | None = None
    gold_image: ImageRef | None = None
    gold_objects: frozenset[str] = frozenset()

    @property
    def share_turn(self) -> Turn | None:
        if self.share_turn_index is None:
            return None
        return self.turns[self.share_turn_index]


@dataclass(frozen=True)
class AnnotationRecord:
    """One annotator's labels for a dialogue's image-share moment."""

    dialogue_id: str
    annotator_id: str
    intents: frozenset[IntentLabel]
    trigger_sentence: str
    image_description: str
    salient_spans: tuple[str, ...] = ()


@dataclass(frozen=True)
class SharingMoment:
    """A detected image-share opportunity after one utterance of a dialogue."""

    turn_index: int
    speaker: str
    rationale: str
    description: str = ""
    image: ImageRef | None = None
    error: str | None = None


@dataclass(frozen=True)
class AugmentedDialogue:
    base: Dialogue
    moments: tuple[SharingMoment, ...] = ()


def normalize_ws(text: str) -> str:
    """Collapse whitespace runs to single spaces and strip the ends."""
    return " ".join(text.split())


def has_description_prefix(text: str) -> bool:
    return text.startswith(DESCRIPTION_PREFIXES)


def canonical_object(name: str) -> str:
    """Map an object-category string to its canonical bundled spelling."""
    key = normalize_ws(name).lower()
    try:
        return _category_lookup()[key]
    except KeyError:
        raise ValidationError(f"unknown object category: {name!r}") from None


_CATEGORY_LOOKUP: dict[str, str] | None = None


def _category_lookup() -> dict[str, str]:
    global _CATEGORY_LOOKUP
    if _CATEGORY_LOOKUP is None:
        _CATEGORY_LOOKUP = {c.lower(): c for c in object_categories()}
    return _CATEGORY_LOOKUP


# --------------------------------------------------------------------------
# Dialogue JSONL
# --------------------------------------------------------------------------


def _expect(obj: dict, key: str, types: type | tuple, line_no: int, *, optional: bool = False) -> Any:
    if key not in obj or obj[key] is None:
        if optional:
            return None
        raise MalformedRecord(line_no, key, "missing required field")
    value = obj[key]
    if not isinstance(value, types):
        raise MalformedRecord(line_no, key, f"expected {types}, got {type(value).__name__}")
    return value


def _image_ref_from_dict(obj: Any, line_no: int, field_name: str) -> ImageRef:
    if not isinstance(obj, dict):
        raise MalformedRecord(line_no, field_name, "image reference must be an object")
    ref = ImageRef(
        id=str(_expect(obj, "id", str, line_no)),
        uri=str(_expect(obj, "uri", str, line_no)),
        source=str(obj.get("source", "corpus")),
    )
    if ref.source not in VALID_IMAGE_SOURCES:
        raise MalformedRecord(line_no, f"{field_name}.source", f"must be one of {VALID_IMAGE_SOURCES}")
    if not ref.id:
        raise MalformedRecord(line_no, f"{field_name}.id", "must be nonempty")
    return ref


def dialogue_from_dict(obj: dict, line_no: int = 0) -> Dialogue:
    """Build and validate a Dialogue from its JSON object form."""
    dialogue_id = _expect(obj, "dialogue_id", str, line_no)
    if not dialogue_id:
        raise MalformedRecord(line_no, "dialogue_id", "must be nonempty")

    raw_turns = _expect(obj, "turns", list, line_no)
    if not raw_turns:
        raise MalformedRecord(line_no, "turns", "must be nonempty")
    turns = []
    image_turns = []
    for i, t in enumerate(raw_turns):
        if not isinstance(t, dict):
            raise MalformedRecord(line_no, f"turns[{i}]", "turn must be an object")
        speaker = _expect(t, "speaker_id", int, line_no)
        if speaker not in (0, 1):
            raise MalformedRecord(line_no, f"turns[{i}].speaker_id", "must be 0 or 1")
        text = _expect(t, "text", str, line_no, optional=True) or ""
        is_image = bool(t.get("is_image_turn", False))
        if not text and not is_image:
            raise MalformedRecord(line_no, f"turns[{i}].text", "must be nonempty on non-image turns")
        if is_image:
            image_turns.append(i)
        turns.append(Turn(speaker_id=speaker, text=text, is_image_turn=is_image))
    if len(image_turns) > 1:
        raise MalformedRecord(line_no, "turns", f"multiple image turns at {image_turns}")

    share_idx = _expect(obj, "share_turn_index", int, line_no, optional=True)
    if share_idx is not None and not 0 <= share_idx < len(turns):
        raise MalformedRecord(line_no, "share_turn_index", f"out of range for {len(turns)} turns")
    if image_turns and share_idx is not None and image_turns[0] != share_idx:
        raise MalformedRecord(line_no, "share_turn_index", f"image turn is at {image_turns[0]}, not {share_idx}")

    gold_image_obj = obj.get("gold_image")
    gold_image = _image_ref_from_dict(gold_image_obj, line_no, "gold_image") if gold_image_obj else None

    raw_objects = obj.get("gold_objects") or []
    if not isinstance(raw_objects, list):
        raise MalformedRecord(line_no, "gold_objects", "must be a list")
    try:
        gold_objects = frozenset(canonical_object(o) for o in raw_objects)
    except ValidationError as e:
        raise MalformedRecord(line_no, "gold_objects", str(e)) from None

    return Dialogue(
        dialogue_id=dialogue_id,
        turns=tuple(turns),
        share_turn_index=share_idx,
        gold_image=gold_image,
        gold_objects=gold_objects,
    )


def dialogue_to_dict(d: Dialogue) -> dict:
    return {
        "dialogue_id": d.dialogue_id,
        "turns": [
            {"speaker_id": t.speaker_id, "text": t.text, "is_image_turn": t.is_image_turn}
            for t in d.turns
        ],
        "share_turn_index": d.share_turn_index,
        "gold_image": (
            {"id": d.gold_image.id, "uri": d.gold_image.uri, "source": d.gold_image.source}
            if d.gold_image
            else None
        ),
        "gold_objects": sorted(d.gold_objects),
    }


def load_photochat(path: str | Path) -> list[Dialogue]:
    """Load a dialogue corpus from JSONL, one dialogue object per line.

    Dialogues come back in file order with all invariants validated.
    Raises MalformedRecord on the first schema violation and
    DuplicateDialogueId when two lines share an id.
    """
    dialogues: list[Dialogue] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, "", f"invalid JSON: {e}") from None
            if not isinstance(obj, dict):
                raise MalformedRecord(line_no, "", "record must be a JSON object")
            d = dialogue_from_dict(obj, line_no)
            if d.dialogue_id in seen:
                raise DuplicateDialogueId(d.dialogue_id)
            seen.add(d.dialogue_id)
            dialogues.append(d)
    return dialogues


def write_dialogues(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in dialogues:
            f.write(json.dumps(dialogue_to_dict(d), ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# Annotation JSONL
# --------------------------------------------------------------------------


def annotation_from_dict(obj: dict, line_no: int = 0) -> AnnotationRecord:
    dialogue_id = _expect(obj, "dialogue_id", str, line_no)
    annotator_id = _expect(obj, "annotator_id", str, line_no)
    raw_intents = _expect(obj, "intents", list, line_no)
    if not raw_intents:
        raise MalformedRecord(line_no, "intents", "must be nonempty")
    intents = frozenset(IntentLabel.from_text(str(i)) for i in raw_intents)

    trigger = _expect(obj, "trigger_sentence", str, line_no)
    if not trigger.strip():
        raise MalformedRecord(line_no, "trigger_sentence", "must be nonempty")

    description = _expect(obj, "image_description", str, line_no)
    if not has_description_prefix(description):
        raise PrefixViolation(
            f"line {line_no}: description must begin with one of {DESCRIPTION_PREFIXES}: {description!r}"
        )

    raw_spans = obj.get("salient_spans") or []
    if not isinstance(raw_spans, list):
        raise MalformedRecord(line_no, "salient_spans", "must be a list")

    return AnnotationRecord(
        dialogue_id=dialogue_id,
        annotator_id=annotator_id,
        intents=intents,
        trigger_sentence=trigger,
        image_description=description,
        salient_spans=tuple(str(s) for s in raw_spans),
    )


def annotation_to_dict(a: AnnotationRecord) -> dict:
    return {
        "dialogue_id": a.dialogue_id,
        "annotator_id": a.annotator_id,
        "intents": sorted(i.value for i in a.intents),
        "trigger_sentence": a.trigger_sentence,
        "image_description": a.image_description,
        "salient_spans": list(a.salient_spans),
    }


def load_annotations(path: str | Path) -> dict[str, list[AnnotationRecord]]:
    """Load annotation records from JSONL, grouped by dialogue_id.

    Order within each group follows file order. Any number of annotators
    per dialogue is supported.
    """
    grouped: dict[str, list[AnnotationRecord]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, "", f"invalid JSON: {e}") from None
            record = annotation_from_dict(obj, line_no)
            grouped.setdefault(record.dialogue_id, []).append(record)
    return grouped


def write_annotations(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for a in records:
            f.write(json.dumps(annotation_to_dict(a), ensure_ascii=False) + "\n")


def trigger_sentence_matches(dialogue: Dialogue, record: AnnotationRecord) -> bool:
    """True when the trigger sentence occurs verbatim in a pre-share turn.

    Comparison is whitespace-normalized to tolerate transcription artifacts.
    """
    needle = normalize_ws(record.trigger_sentence)
    limit = dialogue.share_turn_index if dialogue.share_turn_index is not None else len(dialogue.turns)
    return any(needle in normalize_ws(t.text) for t in dialogue.turns[:limit])


# --------------------------------------------------------------------------
# Augmented-dialogue JSONL
# --------------------------------------------------------------------------


def _validate_augmented(aug: AugmentedDialogue) -> None:
    n = len(aug.base.turns)
    indices = [m.turn_index for m in aug.moments]
    if indices != sorted(indices):
        raise ValidationError(f"{aug.base.dialogue_id}: moments not sorted by turn_index")
    if len(set(indices)) != len(indices):
        raise ValidationError(f"{aug.base.dialogue_id}: duplicate moment turn_index")
    for m in aug.moments:
        if not 0 <= m.turn_index < n:
            raise ValidationError(f"{aug.base.dialogue_id}: moment turn_index {m.turn_index} out of range")
        if not m.rationale.startswith("To"):
            raise ValidationError(f"{aug.base.dialogue_id}: rationale must start with 'To': {m.rationale!r}")
        if not m.speaker:
            raise ValidationError(f"{aug.base.dialogue_id}: moment speaker must be nonempty")


def _moment_to_dict(m: SharingMoment) -> dict:
    obj = {
        "turn_index": m.turn_index,
        "speaker": m.speaker,
        "rationale": m.rationale,
        "description": m.description,
        "image": {"id": m.image.id, "uri": m.image.uri, "source": m.image.source} if m.image else None,
    }
    if m.error is not None:
        obj["error"] = m.error
    return obj


def _moment_from_dict(obj: dict, line_no: int) -> SharingMoment:
    image_obj = obj.get("image")
    return SharingMoment(
        turn_index=_expect(obj, "turn_index", int, line_no),
        speaker=_expect(obj, "speaker", str, line_no),
        rationale=_expect(obj, "rationale", str, line_no),
        description=str(obj.get("description", "")),
        image=_image_ref_from_dict(image_obj, line_no, "image") if image_obj else None,
        error=obj.get("error"),
    )


def write_augmented(dialogues: Iterable[AugmentedDialogue], path: str | Path) -> None:
    """Write augmented dialogues as JSONL; loading the file round-trips.

    Each record is validated first, so a file on disk always parses back
    into structurally valid values.
    """
    dialogues = list(dialogues)
    for aug in dialogues:
        _validate_augmented(aug)
    with open(path, "w", encoding="utf-8") as f:
        for aug in dialogues:
            obj = dialogue_to_dict(aug.base)
            obj["moments"] = [_moment_to_dict(m) for m in aug.moments]
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_augmented(path: str | Path) -> list[AugmentedDialogue]:
    result = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, "", f"invalid JSON: {e}") from None
            base = dialogue_from_dict(obj, line_no)
            moments = tuple(_moment_from_dict(m, line_no) for m in obj.get("moments") or [])
            aug = AugmentedDialogue(base=base, moments=moments)
            _validate_augmented(aug)
            result.append(aug)
    return result
