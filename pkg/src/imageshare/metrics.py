"""Evaluation metrics for every pipeline stage, plus report aggregation.

Token-level F1 follows the extractive-QA convention: lowercase, strip
punctuation, drop the articles a/an/the, split on whitespace, and score
overlap over token multisets. That normalization is part of the metric
contract and is recorded in report metadata so runs stay comparable.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bundled import object_categories, object_synonyms
from .data import AnnotationRecord, Dialogue, IntentLabel
from .gateway import GenConfig, LlmGateway
from .pipeline import (
    STAGE1_FILE,
    STAGE2_FILE,
    DecisionRecord,
    DescriptionRecord,
    read_stage1_records,
    read_stage2_records,
)
from .prompts import build_object_extraction_prompt
from .retrieval import EmbeddingBackend

TOKEN_NORMALIZATION = "lowercase, strip punctuation, drop articles (a/an/the), split on whitespace"

CLIPSCORE_WEIGHT = 2.5


class LengthMismatch(ValueError):
    pass


class EmptyGold(ValueError):
    pass


class EmptyReferenceSet(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class IdMismatch(ValueError):
    pass


class MissingRun(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# Token-level F1
# --------------------------------------------------------------------------

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_tokens(text: str) -> list[str]:
    """Tokenize under the extractive-QA normalization."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return text.split()


def token_f1(pred: str, gold: str) -> float:
    """F1 over normalized token multisets; two empty sides agree at 1.0."""
    pred_tokens = normalize_tokens(pred)
    gold_tokens = normalize_tokens(gold)
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def avg_token_f1(pred: str, golds: Sequence[str]) -> float:
    """Mean token F1 of one prediction against each reference."""
    if not golds:
        raise EmptyReferenceSet("need at least one reference")
    return sum(token_f1(pred, g) for g in golds) / len(golds)


# --------------------------------------------------------------------------
# Decision and intent metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionScores:
    macro_f1: float
    macro_precision: float
    macro_recall: float


def decision_scores(preds: Sequence[str], golds: Sequence[str]) -> DecisionScores:
    """Macro-averaged P/R/F1 over the yes and no classes.

    A class with no predicted and no actual positives scores 0 by
    convention, matching the usual zero-division handling.
    """
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise EmptyInput("need at least one instance")
    precisions, recalls, f1s = [], [], []
    for cls in ("yes", "no"):
        tp = sum(1 for p, g in zip(preds, golds) if p == cls and g == cls)
        fp = sum(1 for p, g in zip(preds, golds) if p == cls and g != cls)
        fn = sum(1 for p, g in zip(preds, golds) if p != cls and g == cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    return DecisionScores(
        macro_f1=sum(f1s) / 2,
        macro_precision=sum(precisions) / 2,
        macro_recall=sum(recalls) / 2,
    )


def intent_set_f1(pred: frozenset[IntentLabel] | set, gold: frozenset[IntentLabel] | set) -> float:
    """Set F1 between predicted and gold intent labels: 2|∩| / (|pred|+|gold|)."""
    if not gold:
        raise EmptyGold("gold intent set must be nonempty")
    return 2 * len(set(pred) & set(gold)) / (len(pred) + len(gold))


# --------------------------------------------------------------------------
# Description metrics
# --------------------------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ZeroVector("cosine undefined for zero vectors")
    return float(a @ b / (norm_a * norm_b))


def descriptiveness(desc_vec: np.ndarray, img_vec: np.ndarray) -> float:
    """CLIPScore-style scaled clamped cosine: 2.5 * max(0, cos)."""
    return CLIPSCORE_WEIGHT * max(0.0, cosine(desc_vec, img_vec))


@dataclass(frozen=True)
class ObjectSet:
    objects: frozenset[str]
    fallback_used: bool = False


def _synonym_patterns() -> list[tuple[str, re.Pattern]]:
    patterns = []
    synonyms = object_synonyms()
    for category in object_categories():
        phrases = [category, *synonyms.get(category, ())]
        for phrase in phrases:
            words = [re.escape(w) for w in phrase.lower().split()]
            words[-1] += r"(?:e?s)?"  # plural tolerance on the final word
            patterns.append((category, re.compile(r"\b" + r"\s+".join(words) + r"\b")))
    return patterns


_SYNONYM_PATTERNS: list[tuple[str, re.Pattern]] | None = None


def match_objects_lexical(description: str) -> frozenset[str]:
    """Whole-word match of category names and synonyms in a description."""
    global _SYNONYM_PATTERNS
    if _SYNONYM_PATTERNS is None:
        _SYNONYM_PATTERNS = _synonym_patterns()
    haystack = description.lower()
    return frozenset(category for category, pattern in _SYNONYM_PATTERNS if pattern.search(haystack))


def extract_objects(
    description: str,
    gateway: LlmGateway | None = None,
    cfg: GenConfig | None = None,
) -> ObjectSet:
    """Extract the object categories a description mentions.

    With a gateway, the bundled extraction prompt is sent and the returned
    category->object dictionary is canonicalized against the category list.
    Without one, or whenever the call or parse fails, a deterministic
    lexical matcher takes over and the result is flagged as a fallback.
    This never raises.
    """
    if gateway is not None and cfg is not None:
        try:
            prompt = build_object_extraction_prompt(description)
            result = gateway.complete(prompt, cfg)
            from .pipeline import _outermost_braces, _parse_payload_dict

            candidate = _outermost_braces(result.text)
            obj = _parse_payload_dict(candidate) if candidate else None
            if obj is not None:
                lookup = {c.lower(): c for c in object_categories()}
                matched = frozenset(
                    lookup[str(key).strip().lower()]
                    for key in obj
                    if str(key).strip().lower() in lookup
                )
                return ObjectSet(objects=matched, fallback_used=False)
        except Exception:
            pass
    return ObjectSet(objects=match_objects_lexical(description), fallback_used=True)


def completeness(pred: ObjectSet, gold: ObjectSet) -> float:
    """Fraction of gold image objects the description covers: |∩| / |gold|."""
    if not gold.objects:
        raise EmptyGold("instances with empty gold object sets are excluded")
    return len(pred.objects & gold.objects) / len(gold.objects)


def consistency(desc: str, human_descs: Sequence[str], text_backend: EmbeddingBackend) -> float:
    """Mean embedding cosine between a description and each human reference."""
    if not human_descs:
        raise EmptyReferenceSet("need at least one human description")
    vectors = np.asarray(text_backend.embed_texts([desc, *human_descs]), dtype=np.float64)
    desc_vec = vectors[0]
    return sum(cosine(desc_vec, ref_vec) for ref_vec in vectors[1:]) / len(human_descs)


def salient_f1(pred_spans: Sequence[str], gold_spans_per_annotator: Sequence[Sequence[str]]) -> float:
    """Token F1 of predicted salient spans, averaged over annotators.

    Spans join into one space-separated string per side before scoring.
    """
    if not gold_spans_per_annotator:
        raise EmptyReferenceSet("need at least one annotator")
    pred_text = " ".join(pred_spans)
    refs = [" ".join(spans) for spans in gold_spans_per_annotator]
    return avg_token_f1(pred_text, refs)


# --------------------------------------------------------------------------
# Run-level ratios
# --------------------------------------------------------------------------


def refusal_ratio(records: Sequence[DecisionRecord]) -> float:
    if not records:
        raise EmptyInput("need at least one record")
    refused = sum(1 for r in records if r.outcome is not None and r.outcome.kind == "refusal")
    return refused / len(records)


def parse_failure_ratio(records: Sequence[DecisionRecord]) -> float:
    if not records:
        raise EmptyInput("need at least one record")
    failed = sum(1 for r in records if r.outcome is not None and r.outcome.kind == "parse_error")
    return failed / len(records)


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalScores:
    r1: float
    r5: float
    r10: float
    mrr: float


@dataclass(frozen=True)
class AggregateOptions:
    """Configurable scoring conventions, recorded in the report metadata."""

    intent_gold: str = "union"  # or "intersection"
    intent_aggregation: str = "per_instance"  # or "micro"
    all_sentence_threshold: float = 0.5
    unparsed_decision: str = "no"  # score for refusals/parse errors/failures; or "exclude"


@dataclass
class EvaluationReport:
    decision: DecisionScores
    refusal_ratio: float
    parse_failure_ratio: float
    intent_f1: float | None = None
    sentence_f1: float | None = None
    all_rate: float | None = None
    descriptiveness: float | None = None
    completeness: float | None = None
    consistency: float | None = None
    salient_f1: float | None = None
    retrieval: RetrievalScores | None = None
    counts: dict = field(default_factory=dict)
    per_instance: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "decision": {
                "macro_f1": self.decision.macro_f1,
                "macro_precision": self.decision.macro_precision,
                "macro_recall": self.decision.macro_recall,
            },
            "intent_f1": self.intent_f1,
            "sentence_f1": self.sentence_f1,
            "all_rate": self.all_rate,
            "descriptiveness": self.descriptiveness,
            "completeness": self.completeness,
            "consistency": self.consistency,
            "salient_f1": self.salient_f1,
            "refusal_ratio": self.refusal_ratio,
            "parse_failure_ratio": self.parse_failure_ratio,
            "retrieval": (
                {"r1": self.retrieval.r1, "r5": self.retrieval.r5, "r10": self.retrieval.r10, "mrr": self.retrieval.mrr}
                if self.retrieval
                else None
            ),
            "counts": self.counts,
            "metadata": self.metadata,
            "per_instance": self.per_instance,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)


def _gold_intents(records: Sequence[AnnotationRecord], mode: str) -> frozenset[IntentLabel]:
    sets = [r.intents for r in records]
    combined = frozenset().union(*sets) if mode == "union" else frozenset.intersection(*sets)
    return combined


def aggregate(
    run_dir: str | Path,
    gold_data: Sequence[Dialogue],
    annotations: Mapping[str, Sequence[AnnotationRecord]] | None = None,
    retrieval_results: Sequence | None = None,
    *,
    embed_backend: EmbeddingBackend | None = None,
    gateway: LlmGateway | None = None,
    extract_cfg: GenConfig | None = None,
    options: AggregateOptions | None = None,
) -> EvaluationReport:
    """Assemble the full evaluation report from run artifacts.

    Decision gold is "yes" exactly when the dialogue carries a share turn.
    Intent and sentence metrics cover annotated gold-"yes" instances;
    description metrics need an embedding backend (descriptiveness,
    consistency) and are reported as n/a without one. Retrieval scores come
    precomputed via ``retrieval_results``.
    """
    options = options or AggregateOptions()
    annotations = annotations or {}
    run_dir = Path(run_dir)

    stage1_path = run_dir / STAGE1_FILE
    if not stage1_path.exists():
        raise MissingRun(str(stage1_path))
    decisions = read_stage1_records(stage1_path)

    by_id = {d.dialogue_id: d for d in gold_data}
    record_ids = {r.dialogue_id for r in decisions}
    if record_ids != set(by_id):
        missing = sorted(set(by_id) - record_ids)[:3]
        extra = sorted(record_ids - set(by_id))[:3]
        raise IdMismatch(f"run/gold id mismatch (missing={missing}, extra={extra})")

    yes_count = sum(1 for r in decisions if r.decision == "yes")
    stage2_path = run_dir / STAGE2_FILE
    if stage2_path.exists():
        descriptions: list[DescriptionRecord] = read_stage2_records(stage2_path)
    elif yes_count == 0:
        descriptions = []
    else:
        raise MissingRun(str(stage2_path))
    desc_by_id = {r.dialogue_id: r for r in descriptions}

    golds = ["yes" if by_id[r.dialogue_id].share_turn_index is not None else "no" for r in decisions]
    preds = [r.decision for r in decisions]
    if options.unparsed_decision == "exclude":
        kept = [
            i for i, r in enumerate(decisions)
            if r.outcome is not None and r.outcome.is_parsed
        ]
        decision_result = decision_scores([preds[i] for i in kept], [golds[i] for i in kept])
    else:
        decision_result = decision_scores(preds, golds)

    # Intent / sentence / All over annotated gold-yes instances.
    intent_values: list[float] = []
    micro_overlap = micro_size = 0
    sentence_values: list[float] = []
    all_hits: list[bool] = []
    per_instance: list[dict] = []

    for record, gold in zip(decisions, golds):
        dialogue = by_id[record.dialogue_id]
        row: dict = {
            "dialogue_id": record.dialogue_id,
            "gold_decision": gold,
            "pred_decision": record.decision,
            "outcome": record.outcome.kind if record.outcome else "error",
        }
        anns = list(annotations.get(record.dialogue_id, ()))
        if gold == "yes" and anns:
            gold_intents = _gold_intents(anns, options.intent_gold)
            pred_intents = (
                record.outcome.payload.intents
                if record.outcome is not None and record.outcome.is_parsed
                else frozenset()
            )
            pred_sentence = (
                record.outcome.payload.sentence
                if record.outcome is not None and record.outcome.is_parsed
                else ""
            )
            instance_intent = intent_set_f1(pred_intents, gold_intents) if gold_intents else 0.0
            intent_values.append(instance_intent)
            micro_overlap += len(pred_intents & gold_intents)
            micro_size += len(pred_intents) + len(gold_intents)
            refs = [a.trigger_sentence for a in anns]
            instance_sentence = avg_token_f1(pred_sentence, refs)
            sentence_values.append(instance_sentence)
            best_sentence = max(token_f1(pred_sentence, ref) for ref in refs)
            all_hits.append(
                record.decision == gold
                and pred_intents == gold_intents
                and best_sentence >= options.all_sentence_threshold
            )
            row.update(intent_f1=instance_intent, sentence_f1=instance_sentence)

        desc_record = desc_by_id.get(record.dialogue_id)
        if desc_record is not None and desc_record.outcome is not None and desc_record.outcome.is_parsed:
            row["description"] = desc_record.outcome.payload.description
            row["prefix_ok"] = desc_record.outcome.payload.prefix_ok
        per_instance.append(row)

    if options.intent_aggregation == "micro":
        intent_score = 2 * micro_overlap / micro_size if micro_size else None
    else:
        intent_score = sum(intent_values) / len(intent_values) if intent_values else None
    sentence_score = sum(sentence_values) / len(sentence_values) if sentence_values else None
    all_rate = sum(all_hits) / len(all_hits) if all_hits else None

    # Description metrics over parsed stage-2 records.
    parsed_desc = [
        (by_id[r.dialogue_id], r.outcome.payload)
        for r in descriptions
        if r.outcome is not None and r.outcome.is_parsed
    ]
    desc_score = cons_score = comp_score = sal_score = None
    completeness_excluded = 0
    if parsed_desc:
        if embed_backend is not None:
            with_image = [(d, p) for d, p in parsed_desc if d.gold_image is not None]
            if with_image:
                desc_vecs = embed_backend.embed_texts([p.description for _, p in with_image])
                img_vecs = embed_backend.embed_images([d.gold_image for d, _ in with_image])
                desc_score = float(
                    np.mean([descriptiveness(dv, iv) for dv, iv in zip(desc_vecs, img_vecs)])
                )
            cons_values = [
                consistency(p.description, [a.image_description for a in annotations[d.dialogue_id]], embed_backend)
                for d, p in parsed_desc
                if annotations.get(d.dialogue_id)
            ]
            if cons_values:
                cons_score = sum(cons_values) / len(cons_values)

        comp_values = []
        for d, p in parsed_desc:
            if not d.gold_objects:
                completeness_excluded += 1
                continue
            pred_objects = extract_objects(p.description, gateway, extract_cfg)
            comp_values.append(completeness(pred_objects, ObjectSet(objects=d.gold_objects)))
        if comp_values:
            comp_score = sum(comp_values) / len(comp_values)

        if any(p.salient for _, p in parsed_desc):
            sal_values = [
                salient_f1(p.salient, [a.salient_spans for a in annotations[d.dialogue_id]])
                for d, p in parsed_desc
                if annotations.get(d.dialogue_id)
            ]
            if sal_values:
                sal_score = sum(sal_values) / len(sal_values)

    retrieval_scores = None
    if retrieval_results:
        from .retrieval import mrr as _mrr
        from .retrieval import recall_at_k as _recall

        retrieval_scores = RetrievalScores(
            r1=_recall(retrieval_results, 1),
            r5=_recall(retrieval_results, 5),
            r10=_recall(retrieval_results, 10),
            mrr=_mrr(retrieval_results),
        )

    counts = {
        "instances": len(decisions),
        "gold_yes": golds.count("yes"),
        "gold_no": golds.count("no"),
        "refusals": sum(1 for r in decisions if r.outcome is not None and r.outcome.kind == "refusal"),
        "parse_errors": sum(1 for r in decisions if r.outcome is not None and r.outcome.kind == "parse_error"),
        "gateway_errors": sum(1 for r in decisions if r.error is not None),
        "describe_invoked": sum(1 for r in descriptions if not r.skipped),
        "describe_skipped": sum(1 for r in descriptions if r.skipped),
        "annotated": len(intent_values),
        "completeness_excluded": completeness_excluded,
    }

    return EvaluationReport(
        decision=decision_result,
        refusal_ratio=refusal_ratio(decisions),
        parse_failure_ratio=parse_failure_ratio(decisions),
        intent_f1=intent_score,
        sentence_f1=sentence_score,
        all_rate=all_rate,
        descriptiveness=desc_score,
        completeness=comp_score,
        consistency=cons_score,
        salient_f1=sal_score,
        retrieval=retrieval_scores,
        counts=counts,
        per_instance=per_instance,
        metadata={
            "token_normalization": TOKEN_NORMALIZATION,
            "intent_gold": options.intent_gold,
            "intent_aggregation": options.intent_aggregation,
            "all_sentence_threshold": options.all_sentence_threshold,
            "unparsed_decision": options.unparsed_decision,
        },
    )


def _fmt(value: float | None) -> str:
    return f"{value:.4f}" if value is not None else "n/a"


def format_report(report: EvaluationReport) -> str:
    """Render the report as an aligned plain-text table for the console."""
    rows = [
        ("decision macro F1", _fmt(report.decision.macro_f1)),
        ("decision macro precision", _fmt(report.decision.macro_precision)),
        ("decision macro recall", _fmt(report.decision.macro_recall)),
        ("intent F1", _fmt(report.intent_f1)),
        ("sentence F1", _fmt(report.sentence_f1)),
        ("all (joint) rate", _fmt(report.all_rate)),
        ("descriptiveness", _fmt(report.descriptiveness)),
        ("completeness", _fmt(report.completeness)),
        ("consistency", _fmt(report.consistency)),
        ("salient F1", _fmt(report.salient_f1)),
        ("refusal ratio", _fmt(report.refusal_ratio)),
        ("parse failure ratio", _fmt(report.parse_failure_ratio)),
    ]
    if report.retrieval:
        rows += [
            ("recall@1", _fmt(report.retrieval.r1)),
            ("recall@5", _fmt(report.retrieval.r5)),
            ("recall@10", _fmt(report.retrieval.r10)),
            ("MRR", _fmt(report.retrieval.mrr)),
        ]
    else:
        rows.append(("retrieval", "n/a"))
    width = max(len(name) for name, _ in rows)
    lines = [f"{name:<{width}}  {value}" for name, value in rows]
    lines.append("")
    lines.append(
        "counts: " + ", ".join(f"{k}={v}" for k, v in report.counts.items())
    )
    return "\n".join(lines)
