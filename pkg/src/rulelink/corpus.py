"""Dataset model and I/O for labeled mention-candidate linking data.

A dataset is JSONL, one labeled instance per line: a mention, its ordered
candidate list, and aligned 0/1 link labels. Instances that cannot carry a
ranking signal (empty candidate set, or no positive label) are dropped at
load time and counted in the load report, never silently.

An optional HTTP lookup client retrieves candidates from a lookup-style
endpoint; all tests run from static fixtures and the client is never
required for offline use.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

from .errors import DatasetError, FetchError

logger = logging.getLogger(__name__)

# Lookup results whose id starts with one of these prefixes are not real
# entities (categories, files, ...). Callers override per knowledge graph.
DEFAULT_DENYLIST = (
    "http://dbpedia.org/resource/Category:",
    "http://dbpedia.org/resource/Template:",
    "http://dbpedia.org/resource/File:",
)


@dataclass(frozen=True)
class Mention:
    id: str
    surface: str
    text_id: str
    context_ids: tuple[str, ...] = ()
    mention_type: str | None = None


@dataclass(frozen=True)
class CandidateEntity:
    id: str
    name: str
    description: str | None = None
    domains: frozenset[str] = frozenset()
    indegree: int = 0
    embedding: tuple[float, ...] | None = None
    external_scores: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class LabeledInstance:
    mention: Mention
    candidates: tuple[CandidateEntity, ...]
    labels: tuple[int, ...]

    def positive_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.labels) if l == 1]


@dataclass(frozen=True)
class LoadReport:
    total_lines: int = 0
    kept: int = 0
    empty_candidates: int = 0
    all_negative: int = 0
    pruned_context_ids: int = 0

    def summary(self) -> str:
        parts = [f"kept {self.kept} of {self.total_lines} instances"]
        if self.empty_candidates:
            parts.append(f"dropped {self.empty_candidates} empty-candidate")
        if self.all_negative:
            parts.append(f"dropped {self.all_negative} all-negative")
        if self.pruned_context_ids:
            parts.append(f"pruned {self.pruned_context_ids} dangling context ids")
        return "; ".join(parts)


@dataclass(frozen=True)
class Dataset:
    instances: tuple[LabeledInstance, ...]
    embedding_dim: int | None = None
    name: str = ""
    report: LoadReport | None = field(default=None, compare=False)

    def mentions_by_id(self) -> dict[str, Mention]:
        return {inst.mention.id: inst.mention for inst in self.instances}

    def instances_by_text(self) -> dict[str, list[LabeledInstance]]:
        by_text: dict[str, list[LabeledInstance]] = {}
        for inst in self.instances:
            by_text.setdefault(inst.mention.text_id, []).append(inst)
        return by_text


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]
    coverage: dict[str, float]

    @property
    def ok(self) -> bool:
        return not self.violations


def _parse_instance(obj: dict, line_no: int) -> LabeledInstance:
    def fail(msg: str):
        raise DatasetError(f"line {line_no}: {msg}")

    try:
        m = obj["mention"]
        mention = Mention(
            id=str(m["id"]),
            surface=str(m["surface"]),
            text_id=str(m["text_id"]),
            context_ids=tuple(str(c) for c in m.get("context_ids", [])),
            mention_type=m.get("type"),
        )
        raw_cands = obj["candidates"]
        labels = tuple(int(l) for l in obj["labels"])
    except (KeyError, TypeError) as exc:
        fail(f"missing or malformed field ({exc})")
    if not mention.surface:
        fail("mention surface is empty")
    if mention.id in mention.context_ids:
        fail(f"mention {mention.id!r} lists itself as context")
    if any(l not in (0, 1) for l in labels):
        fail("labels must be 0 or 1")

    candidates = []
    for c in raw_cands:
        try:
            emb = c.get("embedding")
            cand = CandidateEntity(
                id=str(c["id"]),
                name=str(c["name"]),
                description=c.get("description"),
                domains=frozenset(str(d) for d in c.get("domains", [])),
                indegree=int(c.get("indegree", 0)),
                embedding=None if emb is None else tuple(float(v) for v in emb),
                external_scores={str(k): float(v) for k, v in c.get("external_scores", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            fail(f"malformed candidate ({exc})")
        if cand.indegree < 0:
            fail(f"candidate {cand.id!r} has negative indegree")
        for k, v in cand.external_scores.items():
            if not 0.0 <= v <= 1.0:
                fail(f"external score {k!r}={v} outside [0,1] on candidate {cand.id!r}")
        candidates.append(cand)

    if candidates and len(labels) != len(candidates):
        fail(f"{len(labels)} labels for {len(candidates)} candidates")
    return LabeledInstance(mention=mention, candidates=tuple(candidates), labels=labels)


def load_dataset(path) -> Dataset:
    """Load a JSONL linking dataset, dropping instances that cannot rank.

    Dropped are instances with an empty candidate set and instances whose
    labels are all zero; the counts are logged and kept on the returned
    dataset's ``report``. Context ids pointing at mentions absent from the
    retained set are pruned (counted) so context features stay computable.
    """
    parsed: list[LabeledInstance] = []
    total = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            total += 1
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            parsed.append(_parse_instance(obj, line_no))

    seen_ids: set[str] = set()
    for inst in parsed:
        if inst.mention.id in seen_ids:
            raise DatasetError(f"duplicate mention id {inst.mention.id!r}")
        seen_ids.add(inst.mention.id)

    empty = sum(1 for i in parsed if not i.candidates)
    retained = [i for i in parsed if i.candidates]
    negative = sum(1 for i in retained if not any(i.labels))
    retained = [i for i in retained if any(i.labels)]

    dim: int | None = None
    for inst in retained:
        for cand in inst.candidates:
            if cand.embedding is None:
                continue
            if dim is None:
                dim = len(cand.embedding)
            elif len(cand.embedding) != dim:
                raise DatasetError(
                    f"embedding dimension mismatch: {len(cand.embedding)} vs {dim} "
                    f"(candidate {cand.id!r})"
                )

    kept_ids = {i.mention.id for i in retained}
    pruned = 0
    fixed: list[LabeledInstance] = []
    for inst in retained:
        ctx = tuple(c for c in inst.mention.context_ids if c in kept_ids)
        pruned += len(inst.mention.context_ids) - len(ctx)
        if ctx != inst.mention.context_ids:
            mention = Mention(
                id=inst.mention.id,
                surface=inst.mention.surface,
                text_id=inst.mention.text_id,
                context_ids=ctx,
                mention_type=inst.mention.mention_type,
            )
            inst = LabeledInstance(mention, inst.candidates, inst.labels)
        fixed.append(inst)

    report = LoadReport(
        total_lines=total,
        kept=len(fixed),
        empty_candidates=empty,
        all_negative=negative,
        pruned_context_ids=pruned,
    )
    if empty or negative or pruned:
        logger.warning("load %s: %s", path, report.summary())
    else:
        logger.info("load %s: %s", path, report.summary())
    import os

    name = os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(instances=tuple(fixed), embedding_dim=dim, name=name, report=report)


def _instance_to_obj(inst: LabeledInstance) -> dict:
    return {
        "mention": {
            "id": inst.mention.id,
            "surface": inst.mention.surface,
            "text_id": inst.mention.text_id,
            "context_ids": list(inst.mention.context_ids),
            "type": inst.mention.mention_type,
        },
        "candidates": [
            {
                "id": c.id,
                "name": c.name,
                "description": c.description,
                "domains": sorted(c.domains),
                "indegree": c.indegree,
                "embedding": None if c.embedding is None else list(c.embedding),
                "external_scores": dict(sorted(c.external_scores.items())),
            }
            for c in inst.candidates
        ],
        "labels": list(inst.labels),
    }


def canonical_lines(ds: Dataset) -> list[str]:
    """Canonical JSONL serialization: sorted keys, compact separators."""
    return [
        json.dumps(_instance_to_obj(inst), sort_keys=True, separators=(",", ":"))
        for inst in ds.instances
    ]


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in canonical_lines(ds):
            fh.write(line + "\n")


def merge_external_scores(ds: Dataset, scores_path, feature_name: str) -> Dataset:
    """Attach a precomputed score column to every candidate of ``ds``.

    The scores file is CSV with header ``mention_id,candidate_id,score``.
    Dataset pairs missing from the file default to 0.0 (counted); file keys
    naming unknown mentions or candidates are warned about, not fatal.
    Duplicate keys keep the last value. If a mention's resulting values
    leave [0,1] they are min-max rescaled over that candidate list.
    """
    from .simfeatures import minmax_rescale

    scores: dict[tuple[str, str], float] = {}
    duplicates = 0
    with open(scores_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header and header.split(",")[:3] != ["mention_id", "candidate_id", "score"]:
            raise DatasetError(
                f"scores file {scores_path}: expected header mention_id,candidate_id,score"
            )
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DatasetError(f"scores file line {line_no}: expected 3 columns")
            key = (parts[0], parts[1])
            if key in scores:
                duplicates += 1
            try:
                scores[key] = float(parts[2])
            except ValueError:
                raise DatasetError(f"scores file line {line_no}: bad score {parts[2]!r}")
    if duplicates:
        logger.warning("merge %s: %d duplicate keys, last value wins", feature_name, duplicates)

    known_pairs = set()
    for inst in ds.instances:
        for cand in inst.candidates:
            if feature_name in cand.external_scores:
                raise DatasetError(
                    f"feature {feature_name!r} already present on candidate {cand.id!r}"
                )
            known_pairs.add((inst.mention.id, cand.id))
    known_mentions = {inst.mention.id for inst in ds.instances}
    unknown_mentions = {m for (m, _) in scores if m not in known_mentions}
    unknown_pairs = {k for k in scores if k[0] in known_mentions and k not in known_pairs}
    if unknown_mentions:
        logger.warning("merge %s: %d unknown mention ids ignored", feature_name, len(unknown_mentions))
    if unknown_pairs:
        logger.warning("merge %s: %d unknown candidate ids ignored", feature_name, len(unknown_pairs))

    defaulted = 0
    new_instances = []
    for inst in ds.instances:
        values = []
        for cand in inst.candidates:
            key = (inst.mention.id, cand.id)
            if key in scores:
                values.append(scores[key])
            else:
                values.append(0.0)
                defaulted += 1
        if values and (min(values) < 0.0 or max(values) > 1.0):
            values = list(minmax_rescale(values))
        new_cands = tuple(
            CandidateEntity(
                id=c.id,
                name=c.name,
                description=c.description,
                domains=c.domains,
                indegree=c.indegree,
                embedding=c.embedding,
                external_scores={**c.external_scores, feature_name: v},
            )
            for c, v in zip(inst.candidates, values)
        )
        new_instances.append(LabeledInstance(inst.mention, new_cands, inst.labels))
    if defaulted:
        logger.warning("merge %s: %d dataset pairs defaulted to 0.0", feature_name, defaulted)
    return Dataset(
        instances=tuple(new_instances),
        embedding_dim=ds.embedding_dim,
        name=ds.name,
        report=ds.report,
    )


def fetch_candidates(
    endpoint: str,
    surface: str,
    k: int = 100,
    denylist: tuple[str, ...] = DEFAULT_DENYLIST,
    timeout: float = 10.0,
    max_attempts: int = 3,
    backoff: float = 0.5,
    sleep=time.sleep,
    session=None,
) -> list[CandidateEntity]:
    """Query a lookup-style endpoint for entity candidates.

    Sends ``GET endpoint?query=<surface>&maxResults=<k>`` and expects a JSON
    array of ``{id, label, typeName[]}`` records. Non-entity results (id
    matching a denylist prefix) are pruned before truncation to ``k``.
    Network failures are retried ``max_attempts`` times with exponential
    backoff before raising a retriable :class:`FetchError`.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    http = session or requests
    last_exc = None
    for attempt in range(max_attempts):
        try:
            resp = http.get(endpoint, params={"query": surface, "maxResults": k}, timeout=timeout)
            resp.raise_for_status()
            body = resp.text
            break
        except requests.RequestException as exc:
            last_exc = exc
            if attempt + 1 < max_attempts:
                sleep(backoff * (2**attempt))
    else:
        raise FetchError(
            f"lookup failed after {max_attempts} attempts: {last_exc}", retriable=True
        )

    try:
        records = json.loads(body)
        if not isinstance(records, list):
            raise TypeError("top-level JSON is not an array")
        out = []
        for rec in records:
            rid = str(rec["id"])
            if any(rid.startswith(prefix) for prefix in denylist):
                continue
            out.append(
                CandidateEntity(
                    id=rid,
                    name=str(rec.get("label", rid)),
                    domains=frozenset(str(t) for t in rec.get("typeName", [])),
                )
            )
    except (TypeError, KeyError, json.JSONDecodeError) as exc:
        raise FetchError(f"malformed lookup response ({exc}): {body[:200]!r}") from exc
    return out[:k]


def fetch_all(
    endpoint: str,
    surfaces: list[str],
    k: int = 100,
    max_in_flight: int = 4,
    **kwargs,
) -> dict[str, list[CandidateEntity]]:
    """Fetch candidates for many surfaces with a bounded worker pool."""
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        futures = {s: pool.submit(fetch_candidates, endpoint, s, k, **kwargs) for s in surfaces}
        return {s: f.result() for s, f in futures.items()}


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Report invariant violations and per-field coverage; never mutates."""
    violations: list[str] = []
    seen: set[str] = set()
    known = {i.mention.id for i in ds.instances}
    dim = ds.embedding_dim

    n_cands = 0
    with_desc = 0
    with_emb = 0
    with_type = 0
    external_counts: dict[str, int] = {}

    for inst in ds.instances:
        mid = inst.mention.id
        if mid in seen:
            violations.append(f"duplicate mention id {mid!r}")
        seen.add(mid)
        if not inst.mention.surface:
            violations.append(f"mention {mid!r}: empty surface")
        if mid in inst.mention.context_ids:
            violations.append(f"mention {mid!r}: lists itself as context")
        for ctx in inst.mention.context_ids:
            if ctx not in known:
                violations.append(f"mention {mid!r}: unknown context id {ctx!r}")
        if not inst.candidates:
            violations.append(f"mention {mid!r}: empty candidate list")
        if len(inst.labels) != len(inst.candidates):
            violations.append(
                f"mention {mid!r}: {len(inst.labels)} labels for {len(inst.candidates)} candidates"
            )
        elif inst.candidates and not any(inst.labels):
            violations.append(f"mention {mid!r}: no positive label")
        if inst.mention.mention_type is not None:
            with_type += 1
        for cand in inst.candidates:
            n_cands += 1
            if cand.description is not None:
                with_desc += 1
            if cand.embedding is not None:
                with_emb += 1
                if dim is not None and len(cand.embedding) != dim:
                    violations.append(
                        f"candidate {cand.id!r}: embedding dim {len(cand.embedding)} != {dim}"
                    )
            if cand.indegree < 0:
                violations.append(f"candidate {cand.id!r}: negative indegree")
            for k, v in cand.external_scores.items():
                external_counts[k] = external_counts.get(k, 0) + 1
                if not 0.0 <= v <= 1.0:
                    violations.append(f"candidate {cand.id!r}: score {k}={v} outside [0,1]")

    denom = max(n_cands, 1)
    coverage = {
        "description": with_desc / denom,
        "embedding": with_emb / denom,
        "mention_type": with_type / max(len(ds.instances), 1),
    }
    for k, count in sorted(external_counts.items()):
        coverage[f"external:{k}"] = count / denom
    return ValidationReport(violations=tuple(violations), coverage=coverage)
