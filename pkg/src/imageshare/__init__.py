"""Decide/describe/retrieve pipeline and evaluation harness for image-sharing dialogue."""

from .data import (
    AnnotationRecord,
    AugmentedDialogue,
    Dialogue,
    ImageRef,
    IntentLabel,
    SharingMoment,
    Turn,
    load_annotations,
    load_augmented,
    load_photochat,
    write_augmented,
)
from .gateway import (
    CompletionResult,
    GenConfig,
    HttpChatBackend,
    LlmGateway,
    StubBackend,
    default_config,
)
from .metrics import (
    EvaluationReport,
    aggregate,
    avg_token_f1,
    completeness,
    consistency,
    decision_scores,
    descriptiveness,
    extract_objects,
    intent_set_f1,
    refusal_ratio,
    salient_f1,
    token_f1,
)
from .pipeline import (
    DecisionRecord,
    DescriptionOutput,
    DescriptionRecord,
    Stage1Output,
    StageOutcome,
    detect_refusal,
    parse_intents,
    parse_stage1,
    parse_stage2,
    run_decide,
    run_describe,
    run_pipeline,
)
from .prompts import (
    FewShotExample,
    NamePool,
    PromptText,
    assign_speaker_names,
    build_augment_prompt,
    build_object_extraction_prompt,
    build_stage1_prompt,
    build_stage2_prompt,
    render_transcript,
)
from .retrieval import (
    HashEmbeddingBackend,
    RankedRetrieval,
    RetrievalIndex,
    build_index,
    load_index,
    mrr,
    rank,
    rank_multiround,
    recall_at_k,
)
from .augment import (
    analyze_rationales,
    augment_dialogue,
    corpus_provider,
    parse_moments,
)

__version__ = "0.1.0"
