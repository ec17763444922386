import json

import pytest

from rulelink.cli import run
from rulelink.corpus import save_dataset
from rulelink.ruledsl import ast_leaves, find_root, parse
from synthgen import generate_dataset

RULES = (
    "rule NameSim = jacc? | lev? | jw?;\n"
    "rule Links = NameSim & prom;\n"
)


@pytest.fixture
def workdir(tmp_path):
    ds = generate_dataset(20, n_candidates=5, seed=17)
    data = tmp_path / "data.jsonl"
    save_dataset(ds, data)
    rules = tmp_path / "rules.elr"
    rules.write_text(RULES)
    return tmp_path


def _featurize(workdir, out="features.csv"):
    code = run(
        [
            "featurize",
            "--data", str(workdir / "data.jsonl"),
            "--rules", str(workdir / "rules.elr"),
            "--out", str(workdir / out),
        ]
    )
    assert code == 0
    return workdir / out


def _train(workdir, out="model.json", seed="7", features="features.csv"):
    code = run(
        [
            "train",
            "--data", str(workdir / "data.jsonl"),
            "--features", str(workdir / features),
            "--rules", str(workdir / "rules.elr"),
            "--epochs", "5",
            "--mu", "0.6",
            "--lr", "0.01",
            "--seed", seed,
            "--out", str(workdir / out),
        ]
    )
    assert code == 0
    return workdir / out


class TestFeaturize:
    def test_header_matches_rule_leaves(self, workdir):
        path = _featurize(workdir)
        header = path.read_text().splitlines()[0].split(",")
        leaves = ast_leaves(find_root(parse(RULES)), parse(RULES))
        assert header == ["mention_id", "candidate_id"] + leaves

    def test_missing_data_file_exits_one(self, workdir, capsys):
        code = run(
            ["featurize", "--data", str(workdir / "nope.jsonl"),
             "--rules", str(workdir / "rules.elr"), "--out", str(workdir / "f.csv")]
        )
        assert code == 1
        assert "nope.jsonl" in capsys.readouterr().err

    def test_builtin_rules_accepted(self, workdir):
        code = run(
            ["featurize", "--data", str(workdir / "data.jsonl"),
             "--rules", "builtin:Name", "--out", str(workdir / "f.csv")]
        )
        assert code == 0
        header = (workdir / "f.csv").read_text().splitlines()[0]
        assert header == "mention_id,candidate_id,jacc,lev,jw,spacy,prom"


class TestTrainCli:
    def test_bit_identical_across_runs(self, workdir):
        _featurize(workdir)
        first = _train(workdir, out="m1.json")
        second = _train(workdir, out="m2.json")
        assert first.read_bytes() == second.read_bytes()

    def test_does_not_mutate_inputs(self, workdir):
        _featurize(workdir)
        data_before = (workdir / "data.jsonl").read_bytes()
        features_before = (workdir / "features.csv").read_bytes()
        _train(workdir)
        assert (workdir / "data.jsonl").read_bytes() == data_before
        assert (workdir / "features.csv").read_bytes() == features_before

    def test_config_file_applies(self, workdir):
        _featurize(workdir)
        cfg = workdir / "train.cfg"
        cfg.write_text("epochs = 2\nmu = 0.7\n")
        code = run(
            ["train", "--data", str(workdir / "data.jsonl"),
             "--features", str(workdir / "features.csv"),
             "--rules", str(workdir / "rules.elr"),
             "--config", str(cfg),
             "--out", str(workdir / "m.json")]
        )
        assert code == 0
        model = json.loads((workdir / "m.json").read_text())
        assert model["config"]["epochs"] == 2
        assert model["config"]["mu"] == 0.7


class TestLinkEvalCli:
    def test_link_then_eval(self, workdir, capsys):
        _featurize(workdir)
        _train(workdir)
        code = run(
            ["link", "--model", str(workdir / "model.json"),
             "--data", str(workdir / "data.jsonl"),
             "--features", str(workdir / "features.csv"),
             "--out", str(workdir / "preds.json")]
        )
        assert code == 0
        preds = json.loads((workdir / "preds.json").read_text())
        assert len(preds) == 20

        code = run(
            ["eval", "--model", str(workdir / "model.json"),
             "--data", str(workdir / "data.jsonl"),
             "--features", str(workdir / "features.csv"),
             "--ks", "1,5",
             "--out", str(workdir / "report.json")]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "f1=" in out and "R@5=" in out
        report = json.loads((workdir / "report.json").read_text())
        assert set(report) == {"precision", "recall", "f1", "recall_at", "per_mention"}

    def test_transfer_subcommand(self, workdir):
        _featurize(workdir)
        _train(workdir)
        code = run(
            ["transfer", "--model", str(workdir / "model.json"),
             "--data", str(workdir / "data.jsonl"),
             "--features", str(workdir / "features.csv")]
        )
        assert code == 0


class TestInspectCli:
    def test_dot_export(self, workdir):
        _featurize(workdir)
        _train(workdir)
        code = run(
            ["inspect", "--model", str(workdir / "model.json"),
             "--dot", str(workdir / "tree.dot"),
             "--json", str(workdir / "weights.json")]
        )
        assert code == 0
        dot = (workdir / "tree.dot").read_text()
        assert dot.startswith("digraph scoring {")
        weights = json.loads((workdir / "weights.json").read_text())
        assert weights["tree"]["op"] == "and"


class TestAblateCli:
    def test_markdown_table(self, workdir, capsys):
        code = run(
            ["featurize", "--data", str(workdir / "data.jsonl"),
             "--rules", "builtin:LNN-EL", "--out", str(workdir / "f.csv")]
        )
        assert code == 0
        code = run(
            ["ablate", "--data", str(workdir / "data.jsonl"),
             "--features", str(workdir / "f.csv"),
             "--templates", "Name,Name+Context",
             "--epochs", "2",
             "--out", str(workdir / "ablation.md")]
        )
        assert code == 0
        table = (workdir / "ablation.md").read_text()
        assert "| Name |" in table and "| Name+Context |" in table


class TestUsageErrors:
    def test_unknown_flag_exits_one(self, capsys):
        assert run(["train", "--nonsense"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand_exits_one(self, capsys):
        assert run(["upload"]) == 1

    def test_bad_rules_syntax_exits_one(self, workdir, capsys):
        (workdir / "bad.elr").write_text("rule broken = ;")
        code = run(
            ["featurize", "--data", str(workdir / "data.jsonl"),
             "--rules", str(workdir / "bad.elr"), "--out", str(workdir / "f.csv")]
        )
        assert code == 1


class TestBoxFeaturizeCli:
    def test_embeddings_and_box_params_flags(self, workdir):
        import json as _json

        import numpy as np

        from rulelink.boxgeom import BoxParams, save_box_params
        from rulelink.corpus import load_dataset

        ds = load_dataset(workdir / "data.jsonl")
        rng = np.random.default_rng(0)
        emb_path = workdir / "emb.jsonl"
        with open(emb_path, "w") as fh:
            for inst in ds.instances:
                for cand in inst.candidates:
                    fh.write(_json.dumps({"id": cand.id, "vec": rng.normal(size=2).tolist()}) + "\n")
        save_box_params(BoxParams(psi=(0.5, 0.0), omega=(1.0, 1.0), beta_box=2.0), workdir / "box.json")
        (workdir / "box_rules.elr").write_text("rule Links = (jacc? | box?) & prom;\n")
        code = run(
            ["featurize", "--data", str(workdir / "data.jsonl"),
             "--rules", str(workdir / "box_rules.elr"),
             "--embeddings", str(emb_path),
             "--box-params", str(workdir / "box.json"),
             "--out", str(workdir / "fbox.csv")]
        )
        assert code == 0
        header = (workdir / "fbox.csv").read_text().splitlines()[0]
        assert header == "mention_id,candidate_id,jacc,box,prom"
