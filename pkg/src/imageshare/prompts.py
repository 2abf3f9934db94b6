"""Prompt rendering for every pipeline stage.

Templates live as bundled resource files with ``{name}`` placeholders and are
rendered by a single-pass substitution, so identical inputs always produce
byte-identical prompt text and substituted dialogue content is never
re-scanned for placeholders.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .bundled import default_name_pool_lines, template_text
from .data import Dialogue, IntentLabel

SHARE_MARKER = "[Sharing Image]"
COT_LINE = "Let's think step by step."

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


class PoolTooSmall(ValueError):
    pass


class CutoffOutOfRange(ValueError):
    pass


class MissingShareTurn(ValueError):
    pass


class EmptyDialogue(ValueError):
    pass


class EmptyDescription(ValueError):
    pass


@dataclass(frozen=True)
class PromptText:
    """Rendered prompt plus the metadata needed to reproduce it."""

    text: str
    template_id: str
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NamePool:
    """Ordered pool of speaker names with a seed for deterministic draws."""

    names: tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.names:
            raise ValueError("name pool must be nonempty")
        if len(set(self.names)) != len(self.names):
            raise ValueError("name pool entries must be unique")

    @classmethod
    def from_file(cls, path: str | Path, seed: int = 0) -> NamePool:
        with open(path, encoding="utf-8") as f:
            names = tuple(line.strip() for line in f if line.strip())
        return cls(names=names, seed=seed)

    @classmethod
    def default(cls, seed: int = 0) -> NamePool:
        return cls(names=default_name_pool_lines(), seed=seed)


@dataclass(frozen=True)
class FewShotExample:
    """One in-context exemplar for the decision stage.

    ``probe_index`` overrides the exemplar's cutoff, which lets a dialogue
    without (or before) its share turn serve as a "no" exemplar.
    """

    dialogue: Dialogue
    decision: str
    intents: frozenset[IntentLabel] = frozenset()
    sentence: str = ""
    probe_index: int | None = None
    names: dict[int, str] | None = None


def _render(template: str, values: Mapping[str, str]) -> str:
    def substitute(match: re.Match) -> str:
        key = match.group(1)
        if key not in values:
            raise KeyError(f"unresolved placeholder {{{key}}}")
        return values[key]

    return _PLACEHOLDER_RE.sub(substitute, template)


def assign_speaker_names(dialogue: Dialogue, pool: NamePool) -> dict[int, str]:
    """Draw two distinct names, deterministic in (dialogue_id, pool.seed).

    The draw hashes the pair directly rather than going through a PRNG, so
    results are stable across platforms and Python versions.
    """
    n = len(pool.names)
    if n < 2:
        raise PoolTooSmall(f"need at least 2 names, pool has {n}")
    digest = hashlib.sha256(f"{dialogue.dialogue_id}\x1f{pool.seed}".encode()).digest()
    h = int.from_bytes(digest[:16], "big")
    first = pool.names[h % n]
    rest = [name for name in pool.names if name != first]
    second = rest[(h // n) % (n - 1)]
    return {0: first, 1: second}


def render_transcript(
    dialogue: Dialogue,
    names: Mapping[int, str],
    cutoff: int,
    mark_share: bool = False,
) -> str:
    """Render turns [0, cutoff) one per line as ``<Name>: <text>``.

    With ``mark_share``, the dialogue's share turn renders as the
    ``[Sharing Image]`` marker instead of its text.
    """
    if not 0 < cutoff <= len(dialogue.turns):
        raise CutoffOutOfRange(f"cutoff {cutoff} not in (0, {len(dialogue.turns)}]")
    lines = []
    for j, turn in enumerate(dialogue.turns[:cutoff]):
        name = names[turn.speaker_id]
        if mark_share and j == dialogue.share_turn_index:
            lines.append(f"{name}: {SHARE_MARKER}")
        else:
            lines.append(f"{name}: {turn.text}")
    return "\n".join(lines)


def render_stage1_payload(decision: str, intents: frozenset[IntentLabel], sentence: str) -> str:
    """Render a gold decision-stage answer in the requested payload format."""
    entries = [label.option_label for label in sorted(intents, key=lambda l: l.option_letter)]
    return json.dumps({"Prediction": decision, "Intent": entries, "Sentence": sentence})


def _share_speaker_id(dialogue: Dialogue, cutoff: int) -> int:
    # The probed turn's speaker when inside the dialogue; past the end, the
    # hypothetical next speaker alternates from the last turn.
    if cutoff < len(dialogue.turns):
        return dialogue.turns[cutoff].speaker_id
    return 1 - dialogue.turns[-1].speaker_id


def _stage1_block(
    dialogue: Dialogue,
    names: Mapping[int, str],
    cutoff: int,
    cot: bool,
    answer: str | None,
) -> str:
    transcript = render_transcript(dialogue, names, cutoff)
    text = _render(
        template_text("stage1"),
        {
            "speaker1": names[0],
            "speaker2": names[1],
            "share_speaker": names[_share_speaker_id(dialogue, cutoff)],
            "dialogue": transcript,
            "cot": f"{COT_LINE}\n" if cot else "",
        },
    )
    if answer is not None:
        text = f"{text} {answer}"
    return text


def build_stage1_prompt(
    dialogue: Dialogue,
    names: Mapping[int, str],
    *,
    cot: bool = False,
    shots: Sequence[FewShotExample] = (),
    cutoff: int | None = None,
) -> PromptText:
    """Build the decision-stage prompt over the dialogue history.

    The transcript cuts off just before the share turn (history only). Pass
    ``cutoff`` to probe at another point, e.g. for dialogues without a gold
    share turn. Exemplar blocks, when given, precede the query in the same
    template shape with their gold payload appended after the answer slot.
    """
    if cutoff is None:
        if dialogue.share_turn_index is None:
            raise MissingShareTurn(dialogue.dialogue_id)
        cutoff = dialogue.share_turn_index
    if not 0 < cutoff <= len(dialogue.turns):
        raise CutoffOutOfRange(f"cutoff {cutoff} not in (0, {len(dialogue.turns)}]")

    blocks = []
    for shot in shots:
        shot_cutoff = shot.probe_index
        if shot_cutoff is None:
            if shot.dialogue.share_turn_index is None:
                raise MissingShareTurn(shot.dialogue.dialogue_id)
            shot_cutoff = shot.dialogue.share_turn_index
        shot_names = shot.names or dict(names)
        answer = render_stage1_payload(shot.decision, shot.intents, shot.sentence)
        blocks.append(_stage1_block(shot.dialogue, shot_names, shot_cutoff, False, answer))
    blocks.append(_stage1_block(dialogue, names, cutoff, cot, None))

    return PromptText(
        text="\n\n".join(blocks),
        template_id="stage1",
        metadata={
            "speaker1": names[0],
            "speaker2": names[1],
            "share_speaker": names[_share_speaker_id(dialogue, cutoff)],
            "cutoff": cutoff,
            "shots": len(shots),
            "cot": cot,
        },
    )


SALIENT_RESTRICTION = (
    "\n(2) You should provide all words or phrases in the dialogue that you focus on "
    'to write the image description, as a list of strings, for the value of "Salient" key.'
)


def build_stage2_prompt(
    dialogue: Dialogue,
    names: Mapping[int, str],
    *,
    salient: bool = False,
) -> PromptText:
    """Build the description-stage prompt with the share turn marked."""
    if dialogue.share_turn_index is None:
        raise MissingShareTurn(dialogue.dialogue_id)
    cutoff = dialogue.share_turn_index + 1
    transcript = render_transcript(dialogue, names, cutoff, mark_share=True)
    text = _render(
        template_text("stage2"),
        {
            "speaker1": names[0],
            "speaker2": names[1],
            "share_speaker": names[dialogue.turns[dialogue.share_turn_index].speaker_id],
            "dialogue": transcript,
            "salient": SALIENT_RESTRICTION if salient else "",
        },
    )
    return PromptText(
        text=text,
        template_id="stage2",
        metadata={
            "speaker1": names[0],
            "speaker2": names[1],
            "cutoff": cutoff,
            "salient": salient,
        },
    )


def build_augment_prompt(dialogue: Dialogue, names: Mapping[int, str]) -> PromptText:
    """Build the moment-detection prompt over the full dialogue context."""
    if not dialogue.turns:
        raise EmptyDialogue(dialogue.dialogue_id)
    cutoff = len(dialogue.turns)
    transcript = render_transcript(
        dialogue, names, cutoff, mark_share=dialogue.share_turn_index is not None
    )
    text = _render(
        template_text("augment"),
        {"speaker1": names[0], "speaker2": names[1], "dialogue": transcript},
    )
    return PromptText(
        text=text,
        template_id="augment",
        metadata={"speaker1": names[0], "speaker2": names[1], "cutoff": cutoff},
    )


def build_augment_description_prompt(
    dialogue: Dialogue,
    names: Mapping[int, str],
    turn_index: int,
    share_speaker: str,
) -> PromptText:
    """Describe the image shared right after ``turn_index``.

    Used per detected moment during augmentation: the transcript runs through
    the moment's utterance and a synthetic marker line follows it.
    """
    if not 0 <= turn_index < len(dialogue.turns):
        raise CutoffOutOfRange(f"turn_index {turn_index} out of range")
    transcript = render_transcript(dialogue, names, turn_index + 1)
    transcript = f"{transcript}\n{share_speaker}: {SHARE_MARKER}"
    text = _render(
        template_text("stage2_augment"),
        {
            "speaker1": names[0],
            "speaker2": names[1],
            "share_speaker": share_speaker,
            "dialogue": transcript,
        },
    )
    return PromptText(
        text=text,
        template_id="stage2",
        metadata={
            "speaker1": names[0],
            "speaker2": names[1],
            "cutoff": turn_index + 1,
            "variant": "augment",
        },
    )


def build_object_extraction_prompt(description: str) -> PromptText:
    """Build the category-constrained object-extraction prompt."""
    if not description.strip():
        raise EmptyDescription("description must be nonempty")
    text = _render(template_text("object_extract"), {"description": description})
    return PromptText(text=text, template_id="object_extract", metadata={})


def make_fewshot_examples(
    dialogues: Sequence[Dialogue],
    k: int,
    seed: int = 0,
    annotations: Mapping[str, Sequence] | None = None,
    pool: NamePool | None = None,
) -> list[FewShotExample]:
    """Sample k exemplars with a balanced yes/no decision mix, seeded.

    "yes" exemplars probe at the gold share turn; their intents and sentence
    come from the first annotation of the dialogue when available. "no"
    exemplars probe the same corpus at a random non-share cutoff.
    """
    rng = random.Random(seed)
    pool = pool or NamePool.default()
    with_share = [d for d in dialogues if d.share_turn_index is not None and d.share_turn_index > 0]
    if not with_share:
        raise ValueError("need at least one dialogue with a share turn after turn 0")

    shots: list[FewShotExample] = []
    for i in range(k):
        d = rng.choice(with_share)
        names = assign_speaker_names(d, pool)
        if i % 2 == 0:
            intents: frozenset[IntentLabel] = frozenset()
            sentence = ""
            if annotations and annotations.get(d.dialogue_id):
                gold = annotations[d.dialogue_id][0]
                intents = gold.intents
                sentence = gold.trigger_sentence
            shots.append(
                FewShotExample(dialogue=d, decision="yes", intents=intents, sentence=sentence, names=names)
            )
        else:
            candidates = [j for j in range(1, len(d.turns) + 1) if j != d.share_turn_index]
            probe = rng.choice(candidates) if candidates else len(d.turns)
            shots.append(FewShotExample(dialogue=d, decision="no", probe_index=probe, names=names))
    return shots
