"""Shared synthetic-corpus builders and stub backends for the test suite."""

from __future__ import annotations

import json
import re

import pytest

from imageshare.data import AnnotationRecord, Dialogue, ImageRef, IntentLabel, Turn
from imageshare.gateway import StubBackend
from imageshare.prompts import render_stage1_payload
from imageshare.retrieval import HashEmbeddingBackend

_MARKER_RE = re.compile(r"marker(\d{4})")

REFUSAL_TEXT = "I'm sorry, I cannot assist with that request."


def make_dialogue(i: int, yes: bool = True) -> Dialogue:
    """Synthetic two-speaker dialogue; its first turn carries a unique marker.

    "yes" dialogues share an image at the final turn; "no" dialogues have no
    share turn and act as gold-negative probes at the end of their history.
    """
    marker = f"marker{i:04d}"
    turns = [
        Turn(0, f"hi there {marker}"),
        Turn(1, "hello friend how are you"),
        Turn(0, f"i just baked something special today number {i}"),
    ]
    if yes:
        turns += [
            Turn(1, f"oh nice what did you bake today number {i}"),
            Turn(0, "", is_image_turn=True),
        ]
        share = len(turns) - 1
        image = ImageRef(id=f"img{i:04d}", uri=f"file:///images/{i:04d}.jpg", source="corpus")
        objects = frozenset({"Cake"})
    else:
        turns += [Turn(1, "sounds good, talk later")]
        share, image, objects = None, None, frozenset()
    return Dialogue(
        dialogue_id=f"d{i:04d}",
        turns=tuple(turns),
        share_turn_index=share,
        gold_image=image,
        gold_objects=objects,
    )


def make_annotation(dialogue: Dialogue, annotator_id: str = "a1") -> AnnotationRecord:
    i = int(dialogue.dialogue_id[1:])
    return AnnotationRecord(
        dialogue_id=dialogue.dialogue_id,
        annotator_id=annotator_id,
        intents=frozenset({IntentLabel.SOCIAL_BONDING, IntentLabel.VISUAL_CLARIFICATION}),
        trigger_sentence=dialogue.turns[3].text,
        image_description=f"An image of a chocolate cake number {i}",
        salient_spans=("chocolate cake", f"number {i}"),
    )


def make_corpus(n_yes: int = 12, n_no: int = 8):
    """Mixed corpus plus one gold annotation per "yes" dialogue."""
    dialogues = [make_dialogue(i, yes=True) for i in range(n_yes)]
    dialogues += [make_dialogue(n_yes + i, yes=False) for i in range(n_no)]
    annotations = {
        d.dialogue_id: [make_annotation(d)] for d in dialogues if d.share_turn_index is not None
    }
    return dialogues, annotations


def gold_echo_responder(dialogues, annotations, refuse_ids=frozenset()):
    """Stub behavior echoing each dialogue's gold annotation.

    Distinguishes stages by template content and dialogues by their marker.
    Dialogues in ``refuse_ids`` get the canonical refusal string at stage 1.
    """
    by_marker = {}
    for d in dialogues:
        match = _MARKER_RE.search(d.turns[0].text)
        by_marker[match.group(0)] = d

    def respond(prompt_text: str, cfg) -> str:
        digits = _MARKER_RE.findall(prompt_text)
        if not digits:
            raise AssertionError("prompt without dialogue marker")
        # Few-shot prompts embed exemplar dialogues; the query block is last.
        dialogue = by_marker[f"marker{digits[-1]}"]
        anns = annotations.get(dialogue.dialogue_id)
        if '"Image Description"' in prompt_text:
            assert anns, f"stage 2 prompt for unannotated {dialogue.dialogue_id}"
            return json.dumps({"Image Description": anns[0].image_description})
        if "select all utterances" in prompt_text:
            return ""
        if dialogue.dialogue_id in refuse_ids:
            return REFUSAL_TEXT
        if anns:
            return render_stage1_payload("yes", anns[0].intents, anns[0].trigger_sentence)
        return render_stage1_payload("no", frozenset(), "")

    return respond


def echo_stub(dialogues, annotations, backend_id: str = "default", refuse_ids=frozenset()) -> StubBackend:
    return StubBackend(backend_id, behavior=gold_echo_responder(dialogues, annotations, refuse_ids))


def alias_embed_backend(dialogues, annotations, dim: int = 32, backend_id: str = "embed") -> HashEmbeddingBackend:
    """Embedder mapping each gold description onto its gold image's vector."""
    aliases = {}
    for d in dialogues:
        for a in annotations.get(d.dialogue_id, ()):
            if d.gold_image is not None:
                aliases[a.image_description] = d.gold_image.id
    return HashEmbeddingBackend(dim=dim, backend_id=backend_id, text_aliases=aliases)


@pytest.fixture
def small_corpus():
    return make_corpus(n_yes=6, n_no=4)
