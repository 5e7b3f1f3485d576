import json

import pytest

from capcurric.cli import load_candidates, main
from capcurric.data import load_dataset
from capcurric.difficulty import load_scores
from capcurric.learner import caption_nll, load_checkpoint

SMALL = ["--n-pairs", "60", "--feature-dim", "6", "--vocab-size", "14", "--valid-images", "6", "--test-images", "8"]
TRAIN = ["--lr", "0.1", "--max-epochs", "6", "--patience", "1"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("generate", *SMALL, "--seed", 2, "--out-dir", root / "gen") == 0
    return root


@pytest.fixture(scope="module")
def dataset_path(workdir):
    return workdir / "gen" / "dataset.jsonl"


def read_json(path):
    return json.loads(path.read_text())


def test_generate_default_and_score_cosine(tmp_path):
    assert run("generate", "--seed", 1, "--out-dir", tmp_path / "g") == 0
    assert run("score", "--dataset", tmp_path / "g" / "dataset.jsonl", "--method", "simi-cos", "--out-dir", tmp_path / "s") == 0
    lines = (tmp_path / "s" / "scores.jsonl").read_text().splitlines()
    assert len(lines) == 2000
    first = json.loads(lines[0])
    assert first["difficulty"] == pytest.approx(-first["raw"]) and first["method"] == "SimiCosine"


def test_manifest_echoes_config(workdir):
    m = read_json(workdir / "gen" / "manifest.json")
    assert m["command"] == "generate" and m["config"]["seed"] == 2
    assert set(m["outputs"]) == {"dataset.jsonl", "head.mat"}


def test_sigmoid_scoring_with_generated_head(workdir, dataset_path, tmp_path):
    assert run("score", "--dataset", dataset_path, "--method", "simi-sigmoid", "--head", workdir / "gen" / "head.mat", "--out-dir", tmp_path) == 0
    scores = load_scores(tmp_path / "scores.jsonl")
    assert all(0 < s.raw < 1 for s in scores)


def test_addup_without_detections_exits_2(tmp_path, capsys):
    ds_path = tmp_path / "d.jsonl"
    lines = [
        {"name": "t", "vocab": ["<bos>", "<eos>", "<unk>", "a"], "feature_dim": 1},
        {"pair_id": 0, "image_id": 0, "features": [1.0], "tokens": [3, 1], "lm_logprobs": [-0.1, -0.2]},
        {"ref_image_id": 0, "refs": [[3]]},
    ]
    ds_path.write_text("".join(json.dumps(x) + "\n" for x in lines))
    assert run("score", "--dataset", ds_path, "--method", "addup", "--out-dir", tmp_path / "o") == 2
    assert "det_probs" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert run("score", "--dataset", tmp_path / "nope.jsonl", "--method", "simi-cos", "--out-dir", tmp_path) == 2


def test_sigmoid_without_head_exits_2(dataset_path, tmp_path):
    assert run("score", "--dataset", dataset_path, "--method", "simi-sigmoid", "--out-dir", tmp_path) == 2


@pytest.fixture(scope="module")
def trained(workdir, dataset_path):
    assert run("score", "--dataset", dataset_path, "--method", "simi-cos", "--out-dir", workdir / "scores") == 0
    scores = workdir / "scores" / "scores.jsonl"
    for name, extra in {
        "simi": ["--buckets", 3],
        "anti": ["--buckets", 3, "--baseline", "anti"],
        "one": ["--buckets", 1],
        "vanilla": ["--baseline", "vanilla"],
    }.items():
        code = run("train", "--dataset", dataset_path, "--scores", scores, *TRAIN, *extra, "--out-dir", workdir / name)
        assert code == 0
    return workdir


def test_anti_order_is_exact_reverse(trained):
    simi = read_json(trained / "simi" / "order.json")["order"]
    anti = read_json(trained / "anti" / "order.json")["order"]
    assert anti == simi[::-1]


def test_single_bucket_trains_on_everything(trained):
    one = read_json(trained / "one" / "train_report.json")
    van = read_json(trained / "vanilla" / "train_report.json")
    n = 60
    assert [e["active_count"] for e in one["epochs"]] == [n] * len(one["epochs"])
    assert [e["active_count"] for e in van["epochs"]] == [n] * len(van["epochs"])


def test_train_replay_is_identical(trained, dataset_path, tmp_path):
    scores = trained / "scores" / "scores.jsonl"
    assert run("train", "--dataset", dataset_path, "--scores", scores, *TRAIN, "--buckets", 3, "--out-dir", tmp_path) == 0
    a = read_json(tmp_path / "train_report.json")
    b = read_json(trained / "simi" / "train_report.json")
    assert a == b
    assert (tmp_path / "checkpoint" / "Wo.mat").read_bytes() == (trained / "simi" / "checkpoint" / "Wo.mat").read_bytes()


def test_train_without_scores_exits_2(dataset_path, tmp_path):
    assert run("train", "--dataset", dataset_path, "--out-dir", tmp_path) == 2


def test_bootstrap_scores_are_model_nlls(trained, dataset_path, tmp_path):
    ck = trained / "vanilla" / "checkpoint"
    assert run("score", "--dataset", dataset_path, "--method", "bootstrap", "--model", ck, "--out-dir", tmp_path) == 0
    model, _ = load_checkpoint(ck)
    pairs = {p.pair_id: p for p in load_dataset(dataset_path).split_pairs("train")}
    for s in load_scores(tmp_path / "scores.jsonl"):
        assert s.raw == pytest.approx(caption_nll(model, pairs[s.pair_id]), rel=1e-9)


@pytest.fixture(scope="module")
def evaluated(trained, dataset_path):
    for name in ("simi", "vanilla"):
        code = run("eval", "--checkpoint", trained / name / "checkpoint", "--dataset", dataset_path, "--per-example", "--out-dir", trained / f"eval_{name}")
        assert code == 0
    return trained


def test_eval_outputs(evaluated):
    rep = read_json(evaluated / "eval_simi" / "metric_report.json")
    assert 0.0 <= rep["corpus"]["bleu4"] <= 1.0
    assert len(rep["per_example"]) == 8
    assert len(load_candidates(evaluated / "eval_simi" / "candidates.jsonl")) == 8


def test_compare_self_is_half(evaluated, tmp_path):
    cands = evaluated / "eval_simi" / "candidates.jsonl"
    refs = evaluated / "eval_simi" / "references.jsonl"
    assert run("compare", "--cands-a", cands, "--cands-b", cands, "--refs", refs, "--resamples", 100, "--out-dir", tmp_path) == 0
    assert read_json(tmp_path / "significance.json")["p_value"] == {"bleu4": 0.5, "cider": 0.5}


def test_analyze_divide(evaluated, tmp_path):
    e = evaluated
    argv = [
        "analyze", "--mode", "divide", "--per-example", e / "eval_vanilla" / "metric_report.json",
        "--cands", f"simi={e / 'eval_simi' / 'candidates.jsonl'}", f"vanilla={e / 'eval_vanilla' / 'candidates.jsonl'}",
        "--refs", e / "eval_simi" / "references.jsonl", "--out-dir", tmp_path,
    ]
    assert run(*argv) == 0
    out = read_json(tmp_path / "levels.json")
    assert out["sizes"] == [2, 2, 2, 2]
    assert set(out["systems"]) == {"simi", "vanilla"} and len(out["systems"]["simi"]) == 4


def test_analyze_dispersion(trained, dataset_path, tmp_path):
    assert run("score", "--dataset", dataset_path, "--method", "addup", "--out-dir", tmp_path / "a") == 0
    argv = ["analyze", "--mode", "dispersion", "--scores", trained / "scores" / "scores.jsonl", tmp_path / "a" / "scores.jsonl", "--out-dir", tmp_path]
    assert run(*argv) == 0
    ranking = read_json(tmp_path / "dispersion.json")["ranking"]
    assert {r["method"] for r in ranking} == {"SimiCosine", "Addup"}
    stds = [r["stddev"] for r in ranking]
    assert stds == sorted(stds, reverse=True)
    assert (tmp_path / "hist_Addup.csv").exists()


def test_analyze_cross_same_dataset(evaluated, dataset_path, tmp_path):
    argv = ["analyze", "--mode", "cross", "--checkpoint", evaluated / "simi" / "checkpoint", "--dataset", dataset_path, "--out-dir", tmp_path]
    assert run(*argv) == 0
    cross = read_json(tmp_path / "metric_report.json")["corpus"]
    in_domain = read_json(evaluated / "eval_simi" / "metric_report.json")["corpus"]
    assert cross == pytest.approx(in_domain, abs=1e-12)


def test_analyze_divide_needs_report(tmp_path):
    assert run("analyze", "--mode", "divide", "--out-dir", tmp_path) == 2
