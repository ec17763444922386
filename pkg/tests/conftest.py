import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rulelink.corpus import CandidateEntity, Dataset, LabeledInstance, Mention


def toy_instances():
    """Two co-mentions from one short text, with descriptions and types.

    Mention 1 "Cameron": the film director (indegree 30) vs a lesser-known
    person (indegree 10). Mention 2 "Titanic": the ship (44) vs the 1997
    film (52). Gold links: the director and the film.
    """
    m1 = Mention(id="m1", surface="Cameron", text_id="t1", context_ids=("m2",), mention_type="Person")
    m2 = Mention(id="m2", surface="Titanic", text_id="t1", context_ids=("m1",))
    c_james = CandidateEntity(
        id="James_Cameron",
        name="James_Cameron",
        description="Canadian filmmaker who directed the 1997 film about the Titanic disaster",
        domains=frozenset({"Person", "Agent"}),
        indegree=30,
        external_scores={"spacy": 0.85},
    )
    c_roderick = CandidateEntity(
        id="Roderick_Cameron",
        name="Roderick_Cameron",
        description="author born in Upper Canada",
        domains=frozenset({"Person"}),
        indegree=10,
        external_scores={"spacy": 0.45},
    )
    c_ship = CandidateEntity(
        id="Titanic",
        name="Titanic",
        description="British passenger liner that sank in the North Atlantic",
        domains=frozenset({"Ship"}),
        indegree=44,
        external_scores={"spacy": 0.6},
    )
    c_film = CandidateEntity(
        id="Titanic_(1997_film)",
        name="Titanic_(1997_film)",
        description="epic romance film directed by James Cameron",
        domains=frozenset({"Film", "Work"}),
        indegree=52,
        external_scores={"spacy": 0.8},
    )
    return (
        LabeledInstance(mention=m1, candidates=(c_james, c_roderick), labels=(1, 0)),
        LabeledInstance(mention=m2, candidates=(c_ship, c_film), labels=(0, 1)),
    )


@pytest.fixture
def toy_dataset():
    return Dataset(instances=toy_instances(), name="toy")


def instance_obj(mention_id="m1", surface="Cameron", candidates=None, labels=None, **mention_kw):
    """A raw JSONL-shaped instance dict for file-based tests."""
    if candidates is None:
        candidates = [
            {"id": "e1", "name": "Alpha", "description": None, "domains": [], "indegree": 3,
             "embedding": None, "external_scores": {}},
            {"id": "e2", "name": "Beta", "description": "a thing", "domains": ["Thing"],
             "indegree": 1, "embedding": None, "external_scores": {}},
        ]
    if labels is None:
        labels = [1, 0]
    return {
        "mention": {
            "id": mention_id,
            "surface": surface,
            "text_id": mention_kw.get("text_id", "t1"),
            "context_ids": mention_kw.get("context_ids", []),
            "type": mention_kw.get("type"),
        },
        "candidates": candidates,
        "labels": labels,
    }


def write_jsonl(path, objects):
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objects:
            fh.write(json.dumps(obj) + "\n")
    return path
