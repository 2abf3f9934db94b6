"""Embedding-based image retrieval: indexing, ranking, Recall@k, MRR.

Candidate vectors are stored unit-normalized as 32-bit floats; similarities
accumulate in 64-bit. Ranking is exact cosine search with a deterministic
tie rule (candidate id ascending), so rankings are reproducible regardless
of candidate input order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .data import Dialogue, ImageRef, Turn
from .gateway import GenConfig, LlmGateway, default_config
from .prompts import NamePool, assign_speaker_names, build_augment_description_prompt


class EmbeddingFailure(RuntimeError):
    pass


class DuplicateId(ValueError):
    pass


class BackendMismatch(ValueError):
    pass


class UnknownGoldId(KeyError):
    pass


class MissingGoldRank(ValueError):
    pass


class EmbeddingBackend(Protocol):
    backend_id: str
    dim: int

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...

    def embed_images(self, refs: Sequence[ImageRef]) -> np.ndarray: ...


class HashEmbeddingBackend:
    """Deterministic offline embedder for tests and dry runs.

    Every key hashes to a fixed pseudo-random unit direction, so equal keys
    embed identically across runs and machines. Texts may be aliased onto
    arbitrary keys (e.g. a gold image id) to build exact-match fixtures;
    images embed by their id.
    """

    def __init__(
        self,
        dim: int = 64,
        backend_id: str = "hash",
        text_aliases: Mapping[str, str] | None = None,
    ):
        self.dim = dim
        self.backend_id = backend_id
        self.text_aliases = dict(text_aliases or {})

    def _vector(self, key: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self.dim).astype(np.float32)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._vector(self.text_aliases.get(t, t)) for t in texts])

    def embed_images(self, refs: Sequence[ImageRef]) -> np.ndarray:
        return np.stack([self._vector(ref.id) for ref in refs])


class HttpEmbeddingBackend:
    """Client for an embedding service exposing text and image endpoints.

    Contract: POST ``/embed_text`` with ``{"texts": [...]}`` and POST
    ``/embed_image`` with ``{"uris": [...]}`` both return
    ``{"vectors": [[...], ...]}``; GET ``/metadata`` advertises
    ``{"dim": ...}``.
    """

    def __init__(
        self,
        base_url: str,
        backend_id: str = "http-embed",
        api_key: str | None = None,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.backend_id = backend_id
        self.api_key = api_key if api_key is not None else os.environ.get("EMBED_API_KEY", "")
        self.timeout = timeout
        self.session = session or requests.Session()
        self._dim: int | None = None

    @property
    def dim(self) -> int:
        if self._dim is None:
            resp = self.session.get(f"{self.base_url}/metadata", headers=self._headers(), timeout=self.timeout)
            resp.raise_for_status()
            self._dim = int(resp.json()["dim"])
        return self._dim

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, route: str, payload: dict) -> np.ndarray:
        resp = self.session.post(
            f"{self.base_url}/{route}", json=payload, headers=self._headers(), timeout=self.timeout
        )
        if resp.status_code >= 400:
            raise EmbeddingFailure(f"{route}: HTTP {resp.status_code}: {resp.text[:200]}")
        return np.asarray(resp.json()["vectors"], dtype=np.float32)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return self._post("embed_text", {"texts": list(texts)})

    def embed_images(self, refs: Sequence[ImageRef]) -> np.ndarray:
        return self._post("embed_image", {"uris": [ref.uri for ref in refs]})


@dataclass(frozen=True)
class RetrievalIndex:
    """Immutable candidate matrix with unit-normalized float32 rows."""

    candidate_ids: tuple[str, ...]
    matrix: np.ndarray
    backend_id: str

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        self.matrix.astype(np.float32).tofile(f"{prefix}.vecs")
        meta = {
            "ids": list(self.candidate_ids),
            "dim": int(self.matrix.shape[1]),
            "backend_id": self.backend_id,
            "normalized": True,
        }
        with open(f"{prefix}.meta.json", "w", encoding="utf-8") as f:
            json.dump(meta, f)


def load_index(prefix: str | Path) -> RetrievalIndex:
    with open(f"{prefix}.meta.json", encoding="utf-8") as f:
        meta = json.load(f)
    matrix = np.fromfile(f"{prefix}.vecs", dtype=np.float32).reshape(len(meta["ids"]), meta["dim"])
    return RetrievalIndex(candidate_ids=tuple(meta["ids"]), matrix=matrix, backend_id=meta["backend_id"])


def _normalize_rows(matrix: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise EmbeddingFailure(ids[int(zero[0])])
    return (matrix.astype(np.float64) / norms[:, None]).astype(np.float32)


def build_index(
    candidates: Sequence[ImageRef],
    backend: EmbeddingBackend,
    batch_size: int = 64,
    max_in_flight: int = 4,
) -> RetrievalIndex:
    """Embed each candidate image once and build the normalized index.

    Batches embed concurrently (bounded by ``max_in_flight``) and reassemble
    in input order, so the index is identical however the work interleaves.
    """
    if not candidates:
        raise ValueError("candidate set must be nonempty")
    ids = [ref.id for ref in candidates]
    seen: set[str] = set()
    for candidate_id in ids:
        if candidate_id in seen:
            raise DuplicateId(candidate_id)
        seen.add(candidate_id)

    batches = [candidates[start : start + batch_size] for start in range(0, len(candidates), batch_size)]

    def embed(batch: Sequence[ImageRef]) -> np.ndarray:
        try:
            return np.asarray(backend.embed_images(batch), dtype=np.float32)
        except EmbeddingFailure:
            raise
        except Exception as e:
            raise EmbeddingFailure(f"{batch[0].id}: {e}") from e

    if len(batches) > 1 and max_in_flight > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_in_flight) as executor:
            rows = list(executor.map(embed, batches))
    else:
        rows = [embed(batch) for batch in batches]
    matrix = _normalize_rows(np.vstack(rows), ids)
    return RetrievalIndex(candidate_ids=tuple(ids), matrix=matrix, backend_id=backend.backend_id)


@dataclass(frozen=True)
class RankedRetrieval:
    """Full candidate ranking for one query, best first."""

    query_id: str
    ranking: tuple[str, ...]
    gold_rank: int | None = None


def rank_vector(index: RetrievalIndex, query_vec: np.ndarray) -> list[str]:
    """Rank candidate ids by descending cosine against a query vector.

    Scores accumulate in 64-bit per row (never through a blocked matmul
    whose rounding depends on row position) and are quantized to the 1e-6
    reporting resolution before sorting, so equal candidates tie exactly
    and the id-ascending tie rule is stable under input shuffling and
    positive query scaling.
    """
    q = np.asarray(query_vec, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise EmbeddingFailure("query")
    q = q / norm
    scores = np.round((index.matrix.astype(np.float64) * q).sum(axis=1), 6)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], index.candidate_ids[i]))
    return [index.candidate_ids[i] for i in order]


def rank(
    index: RetrievalIndex,
    query: str,
    backend: EmbeddingBackend,
    gold_id: str | None = None,
    query_id: str | None = None,
) -> RankedRetrieval:
    """Embed a text query and rank all candidates by cosine similarity."""
    if backend.backend_id != index.backend_id:
        raise BackendMismatch(f"index built with {index.backend_id!r}, query uses {backend.backend_id!r}")
    if gold_id is not None and gold_id not in index.candidate_ids:
        raise UnknownGoldId(gold_id)
    query_vec = np.asarray(backend.embed_texts([query]))[0]
    ranking = rank_vector(index, query_vec)
    gold_rank = ranking.index(gold_id) + 1 if gold_id is not None else None
    if query_id is None:
        query_id = gold_id if gold_id is not None else hashlib.sha256(query.encode()).hexdigest()[:12]
    return RankedRetrieval(query_id=query_id, ranking=tuple(ranking), gold_rank=gold_rank)


def subset_index(index: RetrievalIndex, ids: Sequence[str]) -> RetrievalIndex:
    """View of an index restricted to the given candidate ids.

    Rows are reused as-built, so scores match the full index exactly. Used
    for fixed-size per-query pools without re-embedding.
    """
    position = {cid: i for i, cid in enumerate(index.candidate_ids)}
    try:
        rows = [position[cid] for cid in ids]
    except KeyError as e:
        raise UnknownGoldId(str(e)) from None
    return RetrievalIndex(
        candidate_ids=tuple(ids),
        matrix=index.matrix[rows],
        backend_id=index.backend_id,
    )


def per_query_pool(index: RetrievalIndex, gold_id: str, size: int, seed: int) -> RetrievalIndex:
    """Fixed-size pool for one query: its gold plus seeded distractors.

    Deterministic in (gold_id, seed) so reruns rank against identical pools.
    """
    if gold_id not in index.candidate_ids:
        raise UnknownGoldId(gold_id)
    others = [cid for cid in index.candidate_ids if cid != gold_id]
    import random

    rng = random.Random(f"{gold_id}\x1f{seed}")
    distractors = others if len(others) <= size - 1 else rng.sample(others, size - 1)
    return subset_index(index, [gold_id, *sorted(distractors)])


def _gold_ranks(results: Sequence) -> list[int]:
    if not results:
        raise ValueError("results must be nonempty")
    ranks = []
    for r in results:
        if r.gold_rank is None:
            raise MissingGoldRank(getattr(r, "query_id", "?"))
        ranks.append(r.gold_rank)
    return ranks


def recall_at_k(results: Sequence, k: int) -> float:
    """Fraction of queries whose gold candidate ranks in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = _gold_ranks(results)
    return sum(1 for r in ranks if r <= k) / len(ranks)


def mrr(results: Sequence) -> float:
    """Mean reciprocal rank of the gold candidate."""
    ranks = _gold_ranks(results)
    return sum(1.0 / r for r in ranks) / len(ranks)


def truncate_rounds(dialogue: Dialogue, rounds: int) -> tuple[Turn, ...]:
    """Turns visible after the opening description plus ``rounds`` Q&A pairs."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    return dialogue.turns[: 1 + 2 * rounds]


def rank_multiround(
    index: RetrievalIndex,
    dialogue: Dialogue,
    rounds: int,
    backend: EmbeddingBackend,
    mode: str = "description_query",
    *,
    gateway: LlmGateway | None = None,
    pool: NamePool | None = None,
    cfg: GenConfig | None = None,
    gold_id: str | None = None,
) -> RankedRetrieval:
    """Rank with a dialogue context truncated to the first ``rounds`` Q&A pairs.

    Turn 0 is the opening image description; each later round adds two turns.
    ``description_query`` generates a fresh description over the visible
    context and queries with it (at 0 rounds the opening description is the
    query as-is); ``concat_context`` queries with the raw concatenated
    context, the usual baseline comparator.
    """
    if mode not in ("description_query", "concat_context"):
        raise ValueError(f"unknown mode {mode!r}")
    turns = truncate_rounds(dialogue, rounds)
    if not turns:
        raise ValueError(f"{dialogue.dialogue_id}: empty context at {rounds} rounds")
    query_id = f"{dialogue.dialogue_id}#r{rounds}"

    if mode == "concat_context":
        query = "\n".join(t.text for t in turns)
        return rank(index, query, backend, gold_id=gold_id, query_id=query_id)

    if rounds == 0:
        return rank(index, turns[0].text, backend, gold_id=gold_id, query_id=query_id)

    if gateway is None:
        raise ValueError("description_query mode needs a gateway for rounds > 0")
    truncated = Dialogue(dialogue_id=query_id, turns=turns)
    names = assign_speaker_names(truncated, pool or NamePool.default())
    share_speaker = names[1 - turns[-1].speaker_id]
    prompt = build_augment_description_prompt(truncated, names, len(turns) - 1, share_speaker)
    result = gateway.complete(prompt, cfg or default_config("stage2"))
    from .pipeline import parse_stage2  # local import to avoid a module cycle

    outcome = parse_stage2(result.text)
    query = outcome.payload.description if outcome.is_parsed else "\n".join(t.text for t in turns)
    return rank(index, query, backend, gold_id=gold_id, query_id=query_id)


def candidate_pool(
    dialogues: Iterable[Dialogue],
    policy: str = "gold",
    size: int = 100,
    seed: int = 0,
) -> list[ImageRef]:
    """Assemble the retrieval candidate pool from a corpus's gold images.

    ``gold`` pools every gold image of the split; ``sampled`` draws a fixed-
    size seeded sample of them (matching the fixed-candidate protocol used
    by trained baselines).
    """
    refs = [d.gold_image for d in dialogues if d.gold_image is not None]
    unique: dict[str, ImageRef] = {}
    for ref in refs:
        unique.setdefault(ref.id, ref)
    pool = list(unique.values())
    if policy == "gold":
        return pool
    if policy == "sampled":
        import random

        rng = random.Random(seed)
        if len(pool) <= size:
            return pool
        return rng.sample(pool, size)
    raise ValueError(f"unknown pool policy {policy!r}")
