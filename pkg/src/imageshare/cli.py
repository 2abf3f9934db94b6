"""Command-line entry point tying the modules into runnable workflows.

Workflows read a YAML config (nested key-value, with ``${ENV_VAR}``
interpolation for secrets) and write artifacts into a run directory that is
content-addressed by the config hash, so re-running a changed config never
silently overwrites an old run. Timestamps live only in a sidecar; artifact
files are byte-stable under a warm cache.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import augment as augment_mod
from .data import Dialogue, load_annotations, load_photochat, write_augmented
from .gateway import (
    BackendUnavailable,
    HttpChatBackend,
    LlmGateway,
    default_config,
)
from .metrics import (
    AggregateOptions,
    IdMismatch,
    MissingRun,
    aggregate,
    format_report,
)
from .pipeline import (
    STAGE1_FILE,
    STAGE2_FILE,
    DescriptionRecord,
    read_stage1_records,
    run_decide,
    run_describe,
    evaluation_probe_index,
    write_stage1_records,
    write_stage2_records,
)
from .prompts import (
    NamePool,
    assign_speaker_names,
    build_augment_prompt,
    build_stage1_prompt,
    build_stage2_prompt,
    make_fewshot_examples,
)
from .retrieval import (
    HashEmbeddingBackend,
    HttpEmbeddingBackend,
    build_index,
    candidate_pool,
    load_index,
    per_query_pool,
    rank,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3

RETRIEVAL_FILE = "retrieval.jsonl"


class ConfigError(ValueError):
    pass


_ENV_RE = re.compile(r"\$\{(\w+)\}")


def _interpolate(value: Any) -> Any:
    if isinstance(value, str):
        return _ENV_RE.sub(lambda m: os.environ.get(m.group(1), ""), value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


@dataclass
class RunConfig:
    dialogues: str | None = None
    annotations: str | None = None
    profile: str = "full"
    seed: int = 0
    workers: int = 1
    cache_dir: str | None = None
    out: str = "runs"
    names_file: str | None = None
    chat_backend: str = "chat"
    embed_backend: str = "embed"
    fewshot_dialogues: str | None = None
    backends: dict = field(default_factory=dict)
    stage1: dict = field(default_factory=dict)  # cot, shots, fewshot_seed
    stage2: dict = field(default_factory=dict)  # salient
    retrieval: dict = field(default_factory=dict)  # pool, pool_size, pool_seed, index_path, build_index

    def to_dict(self) -> dict:
        return {
            "dialogues": self.dialogues,
            "annotations": self.annotations,
            "profile": self.profile,
            "seed": self.seed,
            "workers": self.workers,
            "cache_dir": self.cache_dir,
            "out": self.out,
            "names_file": self.names_file,
            "chat_backend": self.chat_backend,
            "embed_backend": self.embed_backend,
            "fewshot_dialogues": self.fewshot_dialogues,
            "backends": self.backends,
            "stage1": self.stage1,
            "stage2": self.stage2,
            "retrieval": self.retrieval,
        }


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid config: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = _interpolate(raw)
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return RunConfig(**raw)


def validate_config(config: RunConfig, need_dialogues: bool = True) -> None:
    if need_dialogues:
        if not config.dialogues:
            raise ConfigError("missing required field: dialogues")
        if not Path(config.dialogues).exists():
            raise ConfigError(f"dialogues: path does not exist: {config.dialogues}")
    if config.annotations and not Path(config.annotations).exists():
        raise ConfigError(f"annotations: path does not exist: {config.annotations}")
    if config.profile not in ("full", "describe_retrieve"):
        raise ConfigError(f"profile: must be 'full' or 'describe_retrieve', got {config.profile!r}")
    if config.profile != "full" and int(config.stage1.get("shots", 0)) > 0:
        raise ConfigError("stage1.shots: few-shot exemplars only apply to the full profile")
    if config.names_file and not Path(config.names_file).exists():
        raise ConfigError(f"names_file: path does not exist: {config.names_file}")
    if config.fewshot_dialogues and not Path(config.fewshot_dialogues).exists():
        raise ConfigError(f"fewshot_dialogues: path does not exist: {config.fewshot_dialogues}")


def config_hash(config: RunConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True, ensure_ascii=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def run_dir_for(config: RunConfig) -> Path:
    return Path(config.out) / config_hash(config)


def build_gateway(config: RunConfig) -> LlmGateway:
    gateway = LlmGateway(cache_dir=config.cache_dir, max_in_flight=max(1, config.workers))
    for backend_id, spec in (config.backends or {}).items():
        kind = (spec or {}).get("kind", "http")
        if kind == "http":
            api_key = None
            if spec.get("api_key_env"):
                api_key = os.environ.get(spec["api_key_env"], "")
            gateway.register_backend(
                HttpChatBackend(
                    backend_id=backend_id,
                    model=spec.get("model", "gpt-3.5-turbo"),
                    base_url=spec.get("base_url"),
                    api_key=api_key,
                )
            )
        elif kind == "stub":
            behavior = None
            if spec.get("behavior_file"):
                with open(spec["behavior_file"], encoding="utf-8") as f:
                    behavior = json.load(f)
            gateway.register_stub(backend_id, behavior=behavior, default=spec.get("default_response"))
        elif kind == "embed-hash" or kind == "embed-http":
            continue  # embedding backends are built separately
        else:
            raise ConfigError(f"backends.{backend_id}.kind: unknown kind {kind!r}")
    return gateway


def build_embed_backend(config: RunConfig):
    spec = (config.backends or {}).get(config.embed_backend, {}) or {}
    kind = spec.get("kind", "embed-hash")
    if kind == "embed-hash":
        return HashEmbeddingBackend(dim=int(spec.get("dim", 64)), backend_id=config.embed_backend)
    if kind == "embed-http":
        if not spec.get("base_url"):
            raise ConfigError(f"backends.{config.embed_backend}.base_url: required for embed-http")
        return HttpEmbeddingBackend(base_url=spec["base_url"], backend_id=config.embed_backend)
    raise ConfigError(f"backends.{config.embed_backend}.kind: unknown embedding kind {kind!r}")


def _name_pool(config: RunConfig) -> NamePool:
    if config.names_file:
        return NamePool.from_file(config.names_file, seed=config.seed)
    return NamePool.default(seed=config.seed)


def _write_meta(run_dir: Path, command: str, config: RunConfig, extra: dict | None = None) -> None:
    meta = {"command": command, "config": config.to_dict(), "timestamp": time.time()}
    meta.update(extra or {})
    with open(run_dir / f"{command}.meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)


def _stage1_options(config: RunConfig, dialogues: Sequence[Dialogue], annotations) -> dict:
    shots_k = int(config.stage1.get("shots", 0))
    shots = ()
    if shots_k > 0:
        source = dialogues
        if config.fewshot_dialogues:
            source = load_photochat(config.fewshot_dialogues)
        shots = make_fewshot_examples(
            source,
            shots_k,
            seed=int(config.stage1.get("fewshot_seed", config.seed)),
            annotations=annotations,
            pool=_name_pool(config),
        )
    return {"cot": bool(config.stage1.get("cot", False)), "shots": shots}


def _load_inputs(config: RunConfig):
    dialogues = load_photochat(config.dialogues)
    annotations = load_annotations(config.annotations) if config.annotations else {}
    return dialogues, annotations


def cmd_decide(config: RunConfig, dry_run: bool = False) -> int:
    dialogues, annotations = _load_inputs(config)
    pool = _name_pool(config)
    run_dir = run_dir_for(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    options = _stage1_options(config, dialogues, annotations)

    if dry_run:
        with open(run_dir / "prompts_stage1.jsonl", "w", encoding="utf-8") as f:
            for d in dialogues:
                names = assign_speaker_names(d, pool)
                prompt = build_stage1_prompt(
                    d, names, cot=options["cot"], shots=options["shots"],
                    cutoff=evaluation_probe_index(d),
                )
                f.write(json.dumps({"dialogue_id": d.dialogue_id, "prompt": prompt.text}) + "\n")
        print(f"dry run: wrote {len(dialogues)} prompts to {run_dir}")
        return EXIT_OK

    gateway = build_gateway(config)
    cfg = default_config("stage1", backend_id=config.chat_backend)
    records = []
    for d in dialogues:
        names = assign_speaker_names(d, pool)
        records.append(
            run_decide(
                d, gateway, names=names, cfg=cfg,
                cot=options["cot"], shots=options["shots"],
                probe_index=evaluation_probe_index(d),
            )
        )
    records.sort(key=lambda r: r.dialogue_id)
    write_stage1_records(records, run_dir / STAGE1_FILE)
    _write_meta(run_dir, "decide", config)
    failures = sum(1 for r in records if r.error is not None)
    print(f"decide: {len(records)} records -> {run_dir / STAGE1_FILE} ({failures} failures)")
    return EXIT_OK


def cmd_describe(config: RunConfig, dry_run: bool = False) -> int:
    dialogues, _ = _load_inputs(config)
    pool = _name_pool(config)
    run_dir = run_dir_for(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    salient = bool(config.stage2.get("salient", False))

    if dry_run:
        with open(run_dir / "prompts_stage2.jsonl", "w", encoding="utf-8") as f:
            for d in dialogues:
                if d.share_turn_index is None:
                    continue
                names = assign_speaker_names(d, pool)
                prompt = build_stage2_prompt(d, names, salient=salient)
                f.write(json.dumps({"dialogue_id": d.dialogue_id, "prompt": prompt.text}) + "\n")
        print(f"dry run: wrote stage-2 prompts to {run_dir}")
        return EXIT_OK

    if config.profile == "full":
        stage1_path = run_dir / STAGE1_FILE
        if not stage1_path.exists():
            raise ConfigError(f"full profile needs {stage1_path}; run decide first")
        yes_ids = {r.dialogue_id for r in read_stage1_records(stage1_path) if r.decision == "yes"}
    else:
        yes_ids = None  # describe unconditionally

    gateway = build_gateway(config)
    cfg = default_config("stage2", backend_id=config.chat_backend)
    records = []
    for d in dialogues:
        if yes_ids is not None and d.dialogue_id not in yes_ids:
            records.append(DescriptionRecord(dialogue_id=d.dialogue_id, outcome=None, skipped=True))
            continue
        names = assign_speaker_names(d, pool)
        records.append(run_describe(d, gateway, names=names, cfg=cfg, salient=salient))
    records.sort(key=lambda r: r.dialogue_id)
    write_stage2_records(records, run_dir / STAGE2_FILE)
    _write_meta(run_dir, "describe", config)
    invoked = sum(1 for r in records if not r.skipped)
    print(f"describe: {invoked} invoked, {len(records) - invoked} skipped -> {run_dir / STAGE2_FILE}")
    return EXIT_OK


def cmd_retrieve(config: RunConfig) -> int:
    dialogues, _ = _load_inputs(config)
    run_dir = run_dir_for(config)
    stage2_path = run_dir / STAGE2_FILE
    if not stage2_path.exists():
        raise ConfigError(f"retrieve needs {stage2_path}; run describe first")

    from .pipeline import read_stage2_records

    records = read_stage2_records(stage2_path)
    backend = build_embed_backend(config)
    rconf = config.retrieval or {}
    index_path = rconf.get("index_path")
    if index_path and Path(f"{index_path}.meta.json").exists():
        index = load_index(index_path)
    elif rconf.get("build_index", True):
        pool = candidate_pool(dialogues, policy="gold")
        if not pool:
            raise ConfigError("no gold images available to build the candidate pool")
        index = build_index(pool, backend)
        index.save(index_path or run_dir / "index")
    else:
        raise ConfigError("no retrieval index: set retrieval.index_path or retrieval.build_index")

    policy = rconf.get("pool", "gold")
    pool_size = int(rconf.get("pool_size", 100))
    pool_seed = int(rconf.get("pool_seed", config.seed))
    by_id = {d.dialogue_id: d for d in dialogues}
    rows = []
    for record in records:
        if record.skipped or record.outcome is None or not record.outcome.is_parsed:
            continue
        dialogue = by_id.get(record.dialogue_id)
        gold = dialogue.gold_image if dialogue else None
        if gold is None or gold.id not in index.candidate_ids:
            continue
        if policy == "sampled":
            query_index = per_query_pool(index, gold.id, pool_size, pool_seed)
        else:
            query_index = index
        ranked = rank(query_index, record.outcome.payload.description, backend,
                      gold_id=gold.id, query_id=record.dialogue_id)
        rows.append(
            {
                "query_id": ranked.query_id,
                "gold_id": gold.id,
                "gold_rank": ranked.gold_rank,
                "pool_size": len(query_index.candidate_ids),
                "top10": list(ranked.ranking[:10]),
            }
        )
    with open(run_dir / RETRIEVAL_FILE, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    _write_meta(run_dir, "retrieve", config, {"pool_size": len(index.candidate_ids)})
    print(f"retrieve: {len(rows)} queries over {len(index.candidate_ids)} candidates -> {run_dir / RETRIEVAL_FILE}")
    return EXIT_OK


@dataclass(frozen=True)
class _RetrievalRow:
    query_id: str
    gold_rank: int | None


def _load_retrieval_rows(path: Path) -> list[_RetrievalRow]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                rows.append(_RetrievalRow(query_id=obj["query_id"], gold_rank=obj.get("gold_rank")))
    return rows


def cmd_evaluate(config: RunConfig) -> int:
    dialogues, annotations = _load_inputs(config)
    run_dir = run_dir_for(config)
    retrieval_rows = None
    retrieval_path = run_dir / RETRIEVAL_FILE
    if retrieval_path.exists():
        retrieval_rows = _load_retrieval_rows(retrieval_path) or None
    report = aggregate(
        run_dir,
        dialogues,
        annotations,
        retrieval_rows,
        embed_backend=build_embed_backend(config),
        options=AggregateOptions(),
    )
    with open(run_dir / "report.json", "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    text = format_report(report)
    with open(run_dir / "report.txt", "w", encoding="utf-8") as f:
        f.write(text + "\n")
    _write_meta(run_dir, "evaluate", config)
    print(text)
    return EXIT_OK


def cmd_augment(config: RunConfig, dry_run: bool = False) -> int:
    dialogues, _ = _load_inputs(config)
    pool = _name_pool(config)
    run_dir = run_dir_for(config)
    run_dir.mkdir(parents=True, exist_ok=True)

    if dry_run:
        with open(run_dir / "prompts_augment.jsonl", "w", encoding="utf-8") as f:
            for d in dialogues:
                names = assign_speaker_names(d, pool)
                prompt = build_augment_prompt(d, names)
                f.write(json.dumps({"dialogue_id": d.dialogue_id, "prompt": prompt.text}) + "\n")
        print(f"dry run: wrote {len(dialogues)} augmentation prompts to {run_dir}")
        return EXIT_OK

    gateway = build_gateway(config)
    backend = build_embed_backend(config)
    source = candidate_pool(dialogues, policy="gold")
    if not source:
        raise ConfigError("augment needs gold images in the corpus for the retrieval provider")
    provider = augment_mod.corpus_provider(source, backend)

    augmented = []
    all_warnings = []
    augment_cfg = default_config("augment", backend_id=config.chat_backend)
    describe_cfg = default_config("stage2", backend_id=config.chat_backend)
    for d in dialogues:
        names = assign_speaker_names(d, pool)
        aug, warnings = augment_mod.augment_dialogue(
            d, gateway, provider, names=names, augment_cfg=augment_cfg, describe_cfg=describe_cfg
        )
        augmented.append(aug)
        all_warnings.extend({"dialogue_id": d.dialogue_id, "kind": w.kind, "line": w.line, "detail": w.detail}
                            for w in warnings)
    write_augmented(augmented, run_dir / "aug_dialogues.jsonl")
    with open(run_dir / "aug_warnings.jsonl", "w", encoding="utf-8") as f:
        for w in all_warnings:
            f.write(json.dumps(w) + "\n")
    _write_meta(run_dir, "augment", config)
    moment_count = sum(len(a.moments) for a in augmented)
    print(
        f"augment: {moment_count} moments over {len(augmented)} dialogues, "
        f"{len(all_warnings)} warnings -> {run_dir / 'aug_dialogues.jsonl'}"
    )
    return EXIT_OK


def cmd_report(config: RunConfig) -> int:
    run_dir = run_dir_for(config)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise MissingRun(str(report_path))
    with open(report_path, encoding="utf-8") as f:
        obj = json.load(f)
    rows = []
    for key, value in obj.items():
        if key in ("per_instance", "counts", "metadata"):
            continue
        if isinstance(value, dict):
            rows += [(f"{key}.{sub}", v) for sub, v in value.items()]
        else:
            rows.append((key, value))
    width = max(len(label) for label, _ in rows)
    print("\n".join(f"{label:<{width}}  {value if value is not None else 'n/a'}" for label, value in rows))
    return EXIT_OK


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.backend:
        config.chat_backend = args.backend
    if args.profile:
        config.profile = args.profile
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    if args.cache_dir:
        config.cache_dir = args.cache_dir
    if args.out:
        config.out = args.out
    return config


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="imageshare",
        description="Decide/describe/retrieve pipeline for image-sharing dialogue",
    )
    parser.add_argument("--config", required=True, help="YAML config file")
    parser.add_argument("--backend", help="chat backend id override")
    parser.add_argument("--profile", choices=["full", "describe_retrieve"], help="pipeline profile override")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--workers", type=int, help="worker pool size override")
    parser.add_argument("--cache-dir", help="response cache directory override")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--dry-run", action="store_true", help="render prompts without any backend call")
    parser.add_argument(
        "command",
        choices=["decide", "describe", "retrieve", "evaluate", "augment", "report"],
    )
    args = parser.parse_args(argv)

    try:
        config = _apply_overrides(load_config(args.config), args)
        need_dialogues = args.command != "report"
        validate_config(config, need_dialogues=need_dialogues)
        if args.command == "decide":
            return cmd_decide(config, dry_run=args.dry_run)
        if args.command == "describe":
            return cmd_describe(config, dry_run=args.dry_run)
        if args.command == "retrieve":
            return cmd_retrieve(config)
        if args.command == "evaluate":
            return cmd_evaluate(config)
        if args.command == "augment":
            return cmd_augment(config, dry_run=args.dry_run)
        if args.command == "report":
            return cmd_report(config)
        raise AssertionError(args.command)
    except (ConfigError, MissingRun, IdMismatch, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendUnavailable as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
