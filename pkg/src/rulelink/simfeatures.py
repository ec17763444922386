"""Non-embedding feature functions and feature table assembly.

All features map a (mention, candidate) pair into [0, 1]:

* ``jacc``  -- character-level Jaccard similarity of surface and name
* ``lev``   -- normalized Levenshtein similarity
* ``jw``    -- Jaro-Winkler similarity
* ``pr``    -- partial ratio: best Levenshtein over equal-length windows
* ``ctx``   -- summed partial ratio of co-mentions against the candidate
  description, min-max rescaled over the candidate list
* ``type``  -- 1 if the mention type is among the candidate's domains
* ``prom``  -- candidate in-degree, min-max rescaled over the candidate list
* ``external`` -- a stored score column copied through
* ``box``   -- joint box-geometry score (see :mod:`rulelink.boxgeom`)

Degenerate min-max ranges (max == min) rescale to 1.0 everywhere so a lone
candidate is never penalized for lacking competition.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset, LabeledInstance, Mention
from .errors import FeatureError

logger = logging.getLogger(__name__)

FEATURE_KINDS = ("jacc", "lev", "jw", "pr", "ctx", "type", "prom", "external", "box")


def char_jaccard(a: str, b: str) -> float:
    """|chars(a) & chars(b)| / |chars(a) | chars(b)| over case-folded sets."""
    sa, sb = set(a.casefold()), set(b.casefold())
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def _levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        curr = [i]
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            curr.append(min(prev[j] + 1, curr[j - 1] + 1, prev[j - 1] + cost))
        prev = curr
    return prev[-1]


def lev_sim(a: str, b: str) -> float:
    """1 - editdistance(a, b) / max(|a|, |b|); 1.0 when both empty."""
    if not a and not b:
        return 1.0
    return 1.0 - _levenshtein(a, b) / max(len(a), len(b))


def jaro_winkler(a: str, b: str) -> float:
    """Jaro-Winkler similarity with prefix scale 0.1 and max prefix 4."""
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    if a == b:
        return 1.0
    window = max(len(a), len(b)) // 2 - 1
    window = max(window, 0)
    a_flags = [False] * len(a)
    b_flags = [False] * len(b)
    matches = 0
    for i, ca in enumerate(a):
        lo = max(0, i - window)
        hi = min(len(b), i + window + 1)
        for j in range(lo, hi):
            if not b_flags[j] and b[j] == ca:
                a_flags[i] = b_flags[j] = True
                matches += 1
                break
    if matches == 0:
        return 0.0
    transpositions = 0
    j = 0
    for i in range(len(a)):
        if a_flags[i]:
            while not b_flags[j]:
                j += 1
            if a[i] != b[j]:
                transpositions += 1
            j += 1
    t = transpositions // 2
    jaro = (matches / len(a) + matches / len(b) + (matches - t) / matches) / 3.0
    prefix = 0
    for ca, cb in zip(a, b):
        if ca != cb or prefix == 4:
            break
        prefix += 1
    return jaro + prefix * 0.1 * (1.0 - jaro)


def partial_ratio(short: str, long: str) -> float:
    """Best ``lev_sim`` of the shorter string against equal-length windows.

    Arguments are reordered internally so the first is the shorter one;
    an empty short string scores 1.0.
    """
    if len(short) > len(long):
        short, long = long, short
    if not short:
        return 1.0
    n = len(short)
    return max(lev_sim(short, long[i : i + n]) for i in range(len(long) - n + 1))


def minmax_rescale(values) -> np.ndarray:
    """(v - min) / (max - min); all ones when the range is degenerate."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise FeatureError("cannot rescale an empty vector")
    if not np.all(np.isfinite(arr)):
        raise FeatureError("cannot rescale non-finite values")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.ones_like(arr)
    return (arr - lo) / (hi - lo)


def context_scores(inst: LabeledInstance, all_mentions: dict[str, Mention]) -> np.ndarray:
    """Raw context score per candidate, min-max rescaled over the list.

    raw(e) = sum over context mentions m_k of partial_ratio(m_k.surface,
    e.description); candidates without a description contribute raw 0.
    """
    surfaces = []
    for ctx_id in inst.mention.context_ids:
        if ctx_id not in all_mentions:
            raise FeatureError(f"unknown context mention id {ctx_id!r}")
        surfaces.append(all_mentions[ctx_id].surface)
    raws = []
    for cand in inst.candidates:
        if cand.description is None or not surfaces:
            raws.append(0.0)
        else:
            raws.append(sum(partial_ratio(s, cand.description) for s in surfaces))
    return minmax_rescale(raws)


def context_score(inst: LabeledInstance, candidate_index: int, all_mentions: dict[str, Mention]) -> float:
    return float(context_scores(inst, all_mentions)[candidate_index])


def type_score(m: Mention, e) -> float:
    """1 iff the mention has a type and it appears in the candidate domains."""
    if m.mention_type is None:
        return 0.0
    return 1.0 if m.mention_type in e.domains else 0.0


def prominence_score(inst: LabeledInstance) -> np.ndarray:
    """Min-max rescaled in-degrees over the instance's candidate list."""
    if not inst.candidates:
        raise FeatureError("prominence needs a non-empty candidate list")
    return minmax_rescale([c.indegree for c in inst.candidates])


@dataclass(frozen=True)
class FeatureSpec:
    """Descriptor for one catalog entry.

    ``source`` names the stored column for ``external`` features;
    ``box_params``/``cos_column`` configure ``box`` features.
    """

    kind: str
    source: str | None = None
    cos_column: str = "cos"
    box_params: object | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise FeatureError(f"unknown feature kind {self.kind!r}")
        if self.kind == "external" and not self.source:
            raise FeatureError("external features need a source column")

    def to_json(self) -> dict:
        obj = {"kind": self.kind}
        if self.source:
            obj["source"] = self.source
        if self.kind == "box":
            obj["cos_column"] = self.cos_column
            if self.box_params is not None:
                obj["box_params"] = self.box_params.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSpec":
        params = None
        if obj.get("box_params") is not None:
            from .boxgeom import BoxParams

            params = BoxParams.from_json(obj["box_params"])
        return cls(
            kind=obj["kind"],
            source=obj.get("source"),
            cos_column=obj.get("cos_column", "cos"),
            box_params=params,
        )


class FeatureCatalog:
    """Ordered name -> FeatureSpec registry; names must be unique."""

    def __init__(self, entries: dict[str, FeatureSpec] | None = None):
        self.entries: dict[str, FeatureSpec] = dict(entries or {})

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> FeatureSpec:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def restricted(self, names) -> "FeatureCatalog":
        missing = [n for n in names if n not in self.entries]
        if missing:
            raise FeatureError(f"features not in catalog: {', '.join(missing)}")
        return FeatureCatalog({n: self.entries[n] for n in names})

    def to_json(self) -> dict:
        return {name: spec.to_json() for name, spec in self.entries.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureCatalog":
        return cls({name: FeatureSpec.from_json(spec) for name, spec in obj.items()})


def default_catalog(box_params=None) -> FeatureCatalog:
    """Catalog covering every predicate used by the built-in templates."""
    return FeatureCatalog(
        {
            "jacc": FeatureSpec("jacc"),
            "lev": FeatureSpec("lev"),
            "jw": FeatureSpec("jw"),
            "pr": FeatureSpec("pr"),
            "ctx": FeatureSpec("ctx"),
            "type": FeatureSpec("type"),
            "prom": FeatureSpec("prom"),
            "spacy": FeatureSpec("external", source="spacy"),
            "blink": FeatureSpec("external", source="blink"),
            "bert": FeatureSpec("external", source="bert"),
            "box": FeatureSpec("box", box_params=box_params),
        }
    )


class FeatureTable:
    """Per (mention, candidate) feature vectors, keyed by feature name."""

    def __init__(self, feature_names: list[str]):
        self.feature_names = list(feature_names)
        self.rows: dict[tuple[str, str], dict[str, float]] = {}

    def add_row(self, mention_id: str, candidate_id: str, values: dict[str, float]) -> None:
        missing = [n for n in self.feature_names if n not in values]
        if missing:
            raise FeatureError(f"row ({mention_id},{candidate_id}) missing {missing}")
        self.rows[(mention_id, candidate_id)] = {n: float(values[n]) for n in self.feature_names}

    def value(self, mention_id: str, candidate_id: str, name: str) -> float:
        return self.rows[(mention_id, candidate_id)][name]

    def columns(self, inst: LabeledInstance, names=None) -> dict[str, np.ndarray]:
        """Feature columns over the instance's candidates, in list order."""
        names = list(names) if names is not None else self.feature_names
        mid = inst.mention.id
        rows = []
        for cand in inst.candidates:
            row = self.rows.get((mid, cand.id))
            if row is None:
                raise FeatureError(f"feature table lacks row ({mid!r}, {cand.id!r})")
            rows.append(row)
        out: dict[str, np.ndarray] = {}
        for name in names:
            if name not in self.feature_names:
                raise FeatureError(f"feature table has no column {name!r}")
            out[name] = np.array([row[name] for row in rows], dtype=float)
        return out

    def covers(self, ds: Dataset) -> bool:
        return all(
            (inst.mention.id, c.id) in self.rows for inst in ds.instances for c in inst.candidates
        )

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["mention_id", "candidate_id"] + self.feature_names) + "\n")
            for (mid, cid), values in self.rows.items():
                cells = [mid, cid] + [repr(values[n]) for n in self.feature_names]
                fh.write(",".join(cells) + "\n")

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            if header[:2] != ["mention_id", "candidate_id"]:
                raise FeatureError(f"bad feature CSV header in {path}")
            table = cls(header[2:])
            for line_no, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                cells = line.split(",")
                if len(cells) != len(header):
                    raise FeatureError(f"{path} line {line_no}: expected {len(header)} cells")
                table.rows[(cells[0], cells[1])] = {
                    n: float(v) for n, v in zip(header[2:], cells[2:])
                }
        return table


def _instance_rows(
    inst: LabeledInstance,
    catalog: FeatureCatalog,
    mentions: dict[str, Mention],
    by_text: dict[str, list[LabeledInstance]],
) -> tuple[list[dict[str, float]], dict[str, int]]:
    n = len(inst.candidates)
    missing_external: dict[str, int] = {}
    values: dict[str, list[float] | np.ndarray] = {}
    for name, spec in catalog.entries.items():
        if spec.kind == "jacc":
            values[name] = [char_jaccard(inst.mention.surface, c.name) for c in inst.candidates]
        elif spec.kind == "lev":
            values[name] = [lev_sim(inst.mention.surface, c.name) for c in inst.candidates]
        elif spec.kind == "jw":
            values[name] = [jaro_winkler(inst.mention.surface, c.name) for c in inst.candidates]
        elif spec.kind == "pr":
            values[name] = [partial_ratio(inst.mention.surface, c.name) for c in inst.candidates]
        elif spec.kind == "ctx":
            values[name] = context_scores(inst, mentions)
        elif spec.kind == "type":
            values[name] = [type_score(inst.mention, c) for c in inst.candidates]
        elif spec.kind == "prom":
            values[name] = prominence_score(inst)
        elif spec.kind == "external":
            col = []
            for c in inst.candidates:
                if spec.source in c.external_scores:
                    col.append(c.external_scores[spec.source])
                else:
                    col.append(0.0)
                    missing_external[name] = missing_external.get(name, 0) + 1
            values[name] = col
        elif spec.kind == "box":
            from .boxgeom import BoxParams, joint_box_feature_multi

            params = spec.box_params or BoxParams.default(_embedding_dim(inst))
            peers = [
                [c for c in other.candidates]
                for other in by_text.get(inst.mention.text_id, [])
                if other.mention.id != inst.mention.id
            ]
            cos = np.array(
                [c.external_scores.get(spec.cos_column, 0.0) for c in inst.candidates]
            )
            values[name] = joint_box_feature_multi(inst, peers, params, cos)
        else:  # pragma: no cover - guarded by FeatureSpec
            raise FeatureError(f"unknown feature kind {spec.kind!r}")
    rows = [{name: float(values[name][j]) for name in catalog.entries} for j in range(n)]
    return rows, missing_external


def _embedding_dim(inst: LabeledInstance) -> int:
    for c in inst.candidates:
        if c.embedding is not None:
            return len(c.embedding)
    raise FeatureError("box features need candidate embeddings")


def build_feature_table(ds: Dataset, catalog: FeatureCatalog, jobs: int = 1) -> FeatureTable:
    """Evaluate every catalog feature for every (mention, candidate) pair.

    Pure given its inputs: repeated calls produce identical tables. Rows may
    be computed in parallel per mention; assembly order is always dataset
    order, then candidate position.
    """
    if any(spec.kind == "box" for spec in catalog.entries.values()):
        for inst in ds.instances:
            for cand in inst.candidates:
                if cand.embedding is None:
                    raise FeatureError(
                        f"catalog includes box features but candidate {cand.id!r} has no embedding"
                    )
    mentions = ds.mentions_by_id()
    by_text = ds.instances_by_text()
    table = FeatureTable(catalog.names())

    def compute(inst):
        return _instance_rows(inst, catalog, mentions, by_text)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(compute, ds.instances))
    else:
        results = [compute(inst) for inst in ds.instances]

    missing_external: dict[str, int] = {}
    for inst, (rows, missing) in zip(ds.instances, results):
        for cand, row in zip(inst.candidates, rows):
            table.add_row(inst.mention.id, cand.id, row)
        for name, count in missing.items():
            missing_external[name] = missing_external.get(name, 0) + count
    for name, count in missing_external.items():
        logger.warning("feature %s: %d candidates lacked the source column, used 0.0", name, count)
    return table
