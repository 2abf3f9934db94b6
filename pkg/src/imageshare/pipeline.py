"""Decision and description stages: prompt, complete, parse, record.

Parsing is total: any byte string maps to exactly one of Parsed, Refusal, or
ParseError. Refusals are scanned first, then the outermost brace pair is
parsed tolerantly (JSON, then Python dict literals, so single quotes and
trailing chatter outside the braces are fine).
"""

from __future__ import annotations

import json
import re
import warnings
from ast import literal_eval
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

from .bundled import refusal_lexicon
from .data import Dialogue, IntentLabel, has_description_prefix
from .gateway import (
    BackendRefusedRequest,
    BackendUnavailable,
    CacheCorruption,
    GenConfig,
    LlmGateway,
    default_config,
)
from .prompts import (
    FewShotExample,
    NamePool,
    assign_speaker_names,
    build_stage1_prompt,
    build_stage2_prompt,
)

STAGE1_FILE = "stage1.jsonl"
STAGE2_FILE = "stage2.jsonl"

PROFILES = ("full", "describe_retrieve")


class UnknownIntent(ValueError):
    pass


@dataclass(frozen=True)
class Stage1Output:
    decision: str
    intents: frozenset[IntentLabel]
    sentence: str
    raw: str


@dataclass(frozen=True)
class DescriptionOutput:
    description: str
    salient: tuple[str, ...]
    prefix_ok: bool
    raw: str


@dataclass(frozen=True)
class StageOutcome:
    """Tagged union over parse results: parsed / refusal / parse_error."""

    kind: Literal["parsed", "refusal", "parse_error"]
    raw: str
    payload: Stage1Output | DescriptionOutput | None = None
    reason: str | None = None

    @classmethod
    def parsed(cls, payload, raw: str) -> StageOutcome:
        return cls(kind="parsed", raw=raw, payload=payload)

    @classmethod
    def refusal(cls, raw: str) -> StageOutcome:
        return cls(kind="refusal", raw=raw)

    @classmethod
    def parse_error(cls, raw: str, reason: str) -> StageOutcome:
        return cls(kind="parse_error", raw=raw, reason=reason)

    @property
    def is_parsed(self) -> bool:
        return self.kind == "parsed"


@dataclass(frozen=True)
class DecisionRecord:
    dialogue_id: str
    outcome: StageOutcome | None
    fingerprint: str | None = None
    error: str | None = None

    @property
    def decision(self) -> str:
        """Scored decision: refusals, parse errors, and failures count as "no"."""
        if self.outcome is not None and self.outcome.is_parsed:
            return self.outcome.payload.decision
        return "no"


@dataclass(frozen=True)
class DescriptionRecord:
    dialogue_id: str
    outcome: StageOutcome | None
    fingerprint: str | None = None
    skipped: bool = False
    error: str | None = None


@dataclass(frozen=True)
class PipelineResult:
    decisions: tuple[DecisionRecord, ...]
    descriptions: tuple[DescriptionRecord, ...]


def _normalize_for_refusal(text: str) -> str:
    return " ".join(text.replace("’", "'").split()).lower()


def detect_refusal(raw: str, lexicon: Sequence[str] | None = None) -> bool:
    """True when the response matches the refusal lexicon (case-insensitive)."""
    haystack = _normalize_for_refusal(raw)
    for entry in lexicon if lexicon is not None else refusal_lexicon():
        if entry.lower() in haystack:
            return True
    return False


def _outermost_braces(text: str) -> str | None:
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    for i in range(start, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def _parse_payload_dict(candidate: str) -> dict | None:
    for parser in (json.loads, literal_eval):
        try:
            with warnings.catch_warnings():
                # literal_eval compiles its input; junk escape sequences in
                # model chatter must not surface as SyntaxWarnings.
                warnings.simplefilter("ignore")
                obj = parser(candidate)
        except Exception:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _lookup_key(obj: dict, *aliases: str):
    wanted = {re.sub(r"[^a-z]", "", a.lower()) for a in aliases}
    for key, value in obj.items():
        if isinstance(key, str) and re.sub(r"[^a-z]", "", key.lower()) in wanted:
            return value
    return None


_OPTION_ENTRY_RE = re.compile(r"^\(([a-zA-Z])\)\s*(.*)$")


def parse_intents(entries: Iterable[str]) -> frozenset[IntentLabel]:
    """Resolve intent entries by option letter, label text, or letter+text.

    Matching is case-insensitive and duplicates collapse. Unresolvable
    entries raise UnknownIntent; callers decide how severe that is.
    """
    labels = set()
    for entry in entries:
        text = " ".join(str(entry).split()).strip()
        stripped = text.rstrip(".,;")
        match = _OPTION_ENTRY_RE.match(stripped)
        try:
            if match:
                labels.add(IntentLabel.from_letter(match.group(1)))
            else:
                labels.add(IntentLabel.from_text(stripped))
        except Exception:
            raise UnknownIntent(entry) from None
    return frozenset(labels)


def parse_stage1(raw: str, lexicon: Sequence[str] | None = None) -> StageOutcome:
    """Parse a decision-stage response into a Stage1Output outcome.

    Never raises: unparseable input yields a ParseError outcome with reason
    in {no-braces, bad-json, missing-key, bad-decision-value, unknown-intent}.
    """
    try:
        if detect_refusal(raw, lexicon):
            return StageOutcome.refusal(raw)

        candidate = _outermost_braces(raw)
        if candidate is None:
            return StageOutcome.parse_error(raw, "no-braces")
        obj = _parse_payload_dict(candidate)
        if obj is None:
            return StageOutcome.parse_error(raw, "bad-json")

        prediction = _lookup_key(obj, "Prediction")
        if prediction is None:
            return StageOutcome.parse_error(raw, "missing-key")
        decision = str(prediction).strip().strip(".!").lower()
        if decision not in ("yes", "no"):
            return StageOutcome.parse_error(raw, "bad-decision-value")

        intent_value = _lookup_key(obj, "Intent", "Intents")
        if isinstance(intent_value, str):
            intent_value = [intent_value] if intent_value.strip() else []
        entries = [e for e in (intent_value or []) if str(e).strip()]
        try:
            intents = parse_intents(entries)
        except UnknownIntent:
            return StageOutcome.parse_error(raw, "unknown-intent")

        sentence_value = _lookup_key(obj, "Sentence")
        sentence = str(sentence_value).strip() if sentence_value is not None else ""

        if decision == "yes" and (not intents or not sentence):
            return StageOutcome.parse_error(raw, "missing-key")

        payload = Stage1Output(decision=decision, intents=intents, sentence=sentence, raw=raw)
        return StageOutcome.parsed(payload, raw)
    except Exception:
        return StageOutcome.parse_error(raw, "bad-json")


def parse_stage2(raw: str, lexicon: Sequence[str] | None = None) -> StageOutcome:
    """Parse a description-stage response into a DescriptionOutput outcome.

    Brace payloads are read via the "Image Description" key (plus an optional
    "Salient" list); bare text that already starts with a valid description
    prefix passes through as the description itself.
    """
    try:
        if detect_refusal(raw, lexicon):
            return StageOutcome.refusal(raw)

        stripped = raw.strip()
        if has_description_prefix(stripped) and not stripped.startswith("{"):
            payload = DescriptionOutput(description=stripped, salient=(), prefix_ok=True, raw=raw)
            return StageOutcome.parsed(payload, raw)

        candidate = _outermost_braces(raw)
        if candidate is None:
            return StageOutcome.parse_error(raw, "no-braces")
        obj = _parse_payload_dict(candidate)
        if obj is None:
            return StageOutcome.parse_error(raw, "bad-json")

        value = _lookup_key(obj, "Image Description", "Description")
        if value is None or not str(value).strip():
            return StageOutcome.parse_error(raw, "missing-key")
        description = str(value).strip()

        salient_value = _lookup_key(obj, "Salient", "Salient Information")
        if isinstance(salient_value, str):
            salient = (salient_value,) if salient_value.strip() else ()
        elif isinstance(salient_value, (list, tuple)):
            salient = tuple(str(s) for s in salient_value if str(s).strip())
        else:
            salient = ()

        payload = DescriptionOutput(
            description=description,
            salient=salient,
            prefix_ok=has_description_prefix(description),
            raw=raw,
        )
        return StageOutcome.parsed(payload, raw)
    except Exception:
        return StageOutcome.parse_error(raw, "bad-json")


_GATEWAY_ERRORS = (BackendUnavailable, BackendRefusedRequest, CacheCorruption)


def run_decide(
    dialogue: Dialogue,
    gateway: LlmGateway,
    *,
    names: Mapping[int, str] | None = None,
    pool: NamePool | None = None,
    cfg: GenConfig | None = None,
    cot: bool = False,
    shots: Sequence[FewShotExample] = (),
    probe_index: int | None = None,
    lexicon: Sequence[str] | None = None,
) -> DecisionRecord:
    """Run the decision stage for one dialogue.

    Evaluation mode probes at the gold share turn; pass ``probe_index`` to
    probe elsewhere (inference mode, or share-less dialogues probed at the
    end of their history). Gateway failures come back as records with the
    error tag set rather than exceptions.
    """
    names = names or assign_speaker_names(dialogue, pool or NamePool.default())
    prompt = build_stage1_prompt(dialogue, names, cot=cot, shots=shots, cutoff=probe_index)
    cfg = cfg or default_config("stage1")
    try:
        result = gateway.complete(prompt, cfg)
    except _GATEWAY_ERRORS as e:
        return DecisionRecord(
            dialogue_id=dialogue.dialogue_id,
            outcome=None,
            error=f"{type(e).__name__}: {e}",
        )
    outcome = parse_stage1(result.text, lexicon)
    return DecisionRecord(
        dialogue_id=dialogue.dialogue_id,
        outcome=outcome,
        fingerprint=result.request_fingerprint,
    )


def run_describe(
    dialogue: Dialogue,
    gateway: LlmGateway,
    *,
    names: Mapping[int, str] | None = None,
    pool: NamePool | None = None,
    cfg: GenConfig | None = None,
    salient: bool = False,
    lexicon: Sequence[str] | None = None,
) -> DescriptionRecord:
    """Run the description stage for one dialogue."""
    names = names or assign_speaker_names(dialogue, pool or NamePool.default())
    try:
        prompt = build_stage2_prompt(dialogue, names, salient=salient)
    except Exception as e:
        return DescriptionRecord(
            dialogue_id=dialogue.dialogue_id,
            outcome=None,
            error=f"{type(e).__name__}: {e}",
        )
    cfg = cfg or default_config("stage2")
    try:
        result = gateway.complete(prompt, cfg)
    except _GATEWAY_ERRORS as e:
        return DescriptionRecord(
            dialogue_id=dialogue.dialogue_id,
            outcome=None,
            error=f"{type(e).__name__}: {e}",
        )
    outcome = parse_stage2(result.text, lexicon)
    return DescriptionRecord(
        dialogue_id=dialogue.dialogue_id,
        outcome=outcome,
        fingerprint=result.request_fingerprint,
    )


def evaluation_probe_index(dialogue: Dialogue) -> int | None:
    """Cutoff for evaluation mode: the gold share turn, or the full history
    for dialogues without one (their gold decision is "no")."""
    if dialogue.share_turn_index is not None:
        return None
    return len(dialogue.turns)


def probe_points(dialogue: Dialogue, speaker_id: int) -> list[int]:
    """Inference-mode cutoffs: one probe right after every turn of a speaker.

    Probing at cutoff k asks whether the speaker should share an image in
    place of what follows turn k-1; image turns themselves are not probed.
    """
    if speaker_id not in (0, 1):
        raise ValueError("speaker_id must be 0 or 1")
    return [
        j + 1
        for j, turn in enumerate(dialogue.turns)
        if turn.speaker_id == speaker_id and not turn.is_image_turn
    ]


def run_pipeline(
    dialogues: Sequence[Dialogue],
    gateway: LlmGateway,
    *,
    profile: str = "full",
    pool: NamePool | None = None,
    stage1_cfg: GenConfig | None = None,
    stage2_cfg: GenConfig | None = None,
    cot: bool = False,
    shots: Sequence[FewShotExample] = (),
    salient: bool = False,
    workers: int = 1,
    run_dir: str | Path | None = None,
    lexicon: Sequence[str] | None = None,
) -> PipelineResult:
    """Run both stages over a corpus and optionally persist the artifacts.

    In the full profile the description stage runs only for "yes" decisions
    (skips are recorded, keeping the accounting exact); the
    describe_retrieve profile runs it unconditionally and still executes the
    decision stage for the report's refusal/decision columns.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}, expected one of {PROFILES}")
    pool = pool or NamePool.default()

    def process(dialogue: Dialogue) -> tuple[DecisionRecord, DescriptionRecord]:
        names = assign_speaker_names(dialogue, pool)
        decision = run_decide(
            dialogue,
            gateway,
            names=names,
            cfg=stage1_cfg,
            cot=cot,
            shots=shots,
            probe_index=evaluation_probe_index(dialogue),
            lexicon=lexicon,
        )
        if profile == "full" and decision.decision != "yes":
            description = DescriptionRecord(dialogue_id=dialogue.dialogue_id, outcome=None, skipped=True)
        else:
            description = run_describe(
                dialogue, gateway, names=names, cfg=stage2_cfg, salient=salient, lexicon=lexicon
            )
        return decision, description

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            pairs = list(executor.map(process, dialogues))
    else:
        pairs = [process(d) for d in dialogues]

    pairs.sort(key=lambda p: p[0].dialogue_id)
    decisions = tuple(p[0] for p in pairs)
    descriptions = tuple(p[1] for p in pairs)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_stage1_records(decisions, run_dir / STAGE1_FILE)
        write_stage2_records(descriptions, run_dir / STAGE2_FILE)

    return PipelineResult(decisions=decisions, descriptions=descriptions)


# --------------------------------------------------------------------------
# Run-artifact serialization
# --------------------------------------------------------------------------


def _outcome_to_dict(outcome: StageOutcome | None) -> dict | None:
    if outcome is None:
        return None
    obj: dict = {"kind": outcome.kind}
    if outcome.reason is not None:
        obj["reason"] = outcome.reason
    payload = outcome.payload
    if isinstance(payload, Stage1Output):
        obj["decision"] = payload.decision
        obj["intents"] = sorted(i.value for i in payload.intents)
        obj["sentence"] = payload.sentence
    elif isinstance(payload, DescriptionOutput):
        obj["description"] = payload.description
        obj["salient"] = list(payload.salient)
        obj["prefix_ok"] = payload.prefix_ok
    return obj


def _outcome_from_dict(obj: dict | None, raw: str, stage: str) -> StageOutcome | None:
    if obj is None:
        return None
    kind = obj["kind"]
    if kind == "refusal":
        return StageOutcome.refusal(raw)
    if kind == "parse_error":
        return StageOutcome.parse_error(raw, obj.get("reason", ""))
    if stage == "stage1":
        payload = Stage1Output(
            decision=obj["decision"],
            intents=frozenset(IntentLabel.from_text(i) for i in obj.get("intents", [])),
            sentence=obj.get("sentence", ""),
            raw=raw,
        )
    else:
        payload = DescriptionOutput(
            description=obj["description"],
            salient=tuple(obj.get("salient", [])),
            prefix_ok=bool(obj.get("prefix_ok", False)),
            raw=raw,
        )
    return StageOutcome.parsed(payload, raw)


def _record_line(dialogue_id: str, outcome: StageOutcome | None, fingerprint: str | None,
                 error: str | None, **extra) -> dict:
    obj = {
        "dialogue_id": dialogue_id,
        "outcome": _outcome_to_dict(outcome),
        "raw": outcome.raw if outcome is not None else None,
        "fingerprint": fingerprint,
    }
    if error is not None:
        obj["error"] = error
    obj.update(extra)
    return obj


def write_stage1_records(records: Iterable[DecisionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            line = _record_line(r.dialogue_id, r.outcome, r.fingerprint, r.error)
            f.write(json.dumps(line, ensure_ascii=False) + "\n")


def read_stage1_records(path: str | Path) -> list[DecisionRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            outcome = _outcome_from_dict(obj.get("outcome"), obj.get("raw") or "", "stage1")
            records.append(
                DecisionRecord(
                    dialogue_id=obj["dialogue_id"],
                    outcome=outcome,
                    fingerprint=obj.get("fingerprint"),
                    error=obj.get("error"),
                )
            )
    return records


def write_stage2_records(records: Iterable[DescriptionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            if r.skipped:
                line: dict = {"dialogue_id": r.dialogue_id, "skipped": True}
            else:
                line = _record_line(r.dialogue_id, r.outcome, r.fingerprint, r.error)
            f.write(json.dumps(line, ensure_ascii=False) + "\n")


def read_stage2_records(path: str | Path) -> list[DescriptionRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("skipped"):
                records.append(DescriptionRecord(dialogue_id=obj["dialogue_id"], outcome=None, skipped=True))
                continue
            outcome = _outcome_from_dict(obj.get("outcome"), obj.get("raw") or "", "stage2")
            records.append(
                DescriptionRecord(
                    dialogue_id=obj["dialogue_id"],
                    outcome=outcome,
                    fingerprint=obj.get("fingerprint"),
                    error=obj.get("error"),
                )
            )
    return records
