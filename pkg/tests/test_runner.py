import csv
import hashlib
import json
import math

import numpy as np
import pytest
import yaml

from remind.baselines import DISPLAY_NAMES
from remind.config import load_config
from remind.errors import ConfigError, DataError, TrainingError
from remind.histograms import binned_counts, emit_feature_histograms
from remind.ill_features import FEATURE_COLUMNS, FEATURE_NAMES, read_features_csv, write_features_csv
from remind.runner import (
    CLASSIFIER_NAMES, METRIC_COLUMNS, method_metrics, run_experiment, sample_seed, score_baselines_only, warm_cache,
)

from helpers import synthetic_workspace

BASELINE_ROWS = tuple(DISPLAY_NAMES.values())


def small_workspace(root, **overrides):
    opts = {"per_class": 20, "n_words": 15, "rf_trees": 10, "m": 10, "K": 5}
    opts.update(overrides)
    per_class = opts.pop("per_class")
    n_words = opts.pop("n_words")
    paraphrases = opts.pop("paraphrases", False)
    geometries = opts.pop("geometries", None)
    return synthetic_workspace(root, per_class=per_class, n_words=n_words, paraphrases=paraphrases,
                               geometries=geometries, **opts)


# -- config -----------------------------------------------------------------


def test_config_loads_and_resolves_paths(tmp_path):
    cfg = load_config(small_workspace(tmp_path))
    assert cfg.seed == 7 and cfg.oracle_kind == "synthetic"
    assert cfg.resolve(cfg.embedding_table_path) == tmp_path.resolve() / "emb.txt"


def test_config_rejects_unknown_and_missing_keys(tmp_path):
    path = small_workspace(tmp_path)
    doc = yaml.safe_load(path.read_text())
    path.write_text(yaml.safe_dump({**doc, "perturbation_rate": 0.3}))
    with pytest.raises(ConfigError, match="perturbation_rate"):
        load_config(path)
    del doc["seed"]
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(ConfigError, match="seed"):
        load_config(path)


def test_config_validation(tmp_path):
    path = small_workspace(tmp_path)
    with pytest.raises(ConfigError, match="p must"):
        load_config(path, {"p": 1.5})
    with pytest.raises(ConfigError, match="oracle_url"):
        load_config(path, {"oracle_kind": "http"})
    with pytest.raises(ConfigError, match="not found"):
        load_config(path, {"embedding_table_path": "nope.txt"})
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_config_hash(tmp_path):
    path = small_workspace(tmp_path)
    base = load_config(path).config_hash()
    assert base == load_config(path).config_hash()
    assert len(base) == 16
    assert load_config(path, {"seed": 8}).config_hash() != base
    # the output location does not change what is computed
    assert load_config(path, {"output_dir": "elsewhere"}).config_hash() == base


def test_sample_seed():
    want = int.from_bytes(hashlib.sha256(b"7\x00retain-0001").digest()[:8], "big")
    assert sample_seed(7, "retain-0001") == want
    assert sample_seed(7, "retain-0002") != want
    assert sample_seed(8, "retain-0001") != want


# -- metrics assembly -------------------------------------------------------


def test_scalar_method_metrics():
    labels = ["Retained"] * 2 + ["Forgotten"] * 2 + ["Holdout"] * 2
    s = np.array([5.0, 6.0, 1.0, 2.0, 3.0, 4.0])
    m = method_metrics(labels, np.repeat(s[:, None], 3, axis=1), scalar=True)
    assert m["retain_vs_all_auc"] == 1.0
    assert m["forget_vs_all_auc"] == 0.0
    assert m["holdout_vs_all_auc"] == 0.5
    assert m["multi_class_auc"] == 0.5
    assert m["retained_vs_forgotten_auc"] == 1.0
    assert m["forgotten_vs_holdout_auc"] == 0.0
    assert math.isnan(m["accuracy"]) and math.isnan(m["macro_f1"])
    assert set(m) == set(METRIC_COLUMNS)


def test_probability_method_metrics():
    labels = ["Retained", "Forgotten", "Holdout"]
    m = method_metrics(labels, np.eye(3) * 0.8 + 0.1 / 1, scalar=False)
    assert m["accuracy"] == 1.0 and m["macro_f1"] == 1.0
    assert m["multi_class_auc"] == 1.0 and m["retained_vs_forgotten_auc"] == 1.0


# -- full runs --------------------------------------------------------------


@pytest.fixture(scope="module")
def two_arm_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = load_config(small_workspace(root, paraphrases=True, views=["original", "paraphrased"]))
    report = run_experiment(cfg)
    return cfg, report, cfg.resolve(cfg.output_dir)


def test_report_csv_schema(two_arm_run):
    cfg, report, out = two_arm_run
    rows = list(csv.reader((out / "report.csv").read_text().splitlines()))
    header = rows[0]
    assert header[0] == "method" and header[-1] == "config_hash"
    assert header[1:-1] == [f"{c}_{s}" for c in METRIC_COLUMNS for s in ("orig", "reph")]
    methods = [r[0] for r in rows[1:]]
    assert methods == list(BASELINE_ROWS) + [CLASSIFIER_NAMES[k] for k in cfg.classifiers]
    for r in rows[1:]:
        assert r[-1] == report.config_hash
        for cell in r[1:-1]:
            assert cell == "n/a" or 0.0 <= float(cell) <= 100.0


def test_scalar_rows_use_chance_multiclass_and_no_accuracy(two_arm_run):
    _, report, _ = two_arm_run
    for row in report.rows():
        if row["method"] in BASELINE_ROWS:
            assert row["multi_class_auc_orig"] == 50.0
            assert row["accuracy_orig"] is None and row["macro_f1_orig"] is None


def test_text_report_tables(two_arm_run):
    _, _, out = two_arm_run
    text = (out / "report.txt").read_text()
    for title in ("AUC metrics", "AUC at 1% FPR metrics", "Detailed scores"):
        assert title + "\n" in text
    assert "Overall Score Orig" in text and "Forgotten vs Holdout Reph" in text
    assert "seed: 7" in text


def test_output_artifacts(two_arm_run):
    cfg, report, out = two_arm_run
    for name in ("report.csv", "report.txt", "features.csv", "features_reph.csv", "scores.csv",
                 "run-manifest.json", "histograms/orig_feature_histograms.svg",
                 "histograms/reph_feature_histograms.csv", "models/orig-random-forest.json",
                 "models/reph-logistic-regression.json"):
        assert (out / name).exists(), name
    assert len(read_features_csv(out / "features.csv")) == 60
    manifest = json.loads((out / "run-manifest.json").read_text())
    assert manifest["config_hash"] == report.config_hash
    assert manifest["seed"] == 7 and manifest["arms"] == ["original", "paraphrased"]
    assert manifest["samples_per_arm"] == {"original": 60, "paraphrased": 60}
    assert manifest["cache"]["live_calls"] == report.cache_stats["live_calls"]
    scores = list(csv.DictReader((out / "scores.csv").read_text().splitlines()))
    assert {r["arm"] for r in scores} == {"original", "paraphrased"}
    clf = [r for r in scores if r["method"] == "random-forest" and r["arm"] == "original"]
    assert len(clf) == 12 and all(r["split"] == "test" for r in clf)
    for r in clf:
        assert sum(float(r[k]) for k in ("score_retained", "score_forgotten", "score_holdout")) == pytest.approx(1)


def test_arm_isolation(two_arm_run, tmp_path):
    """Adding the paraphrased arm leaves the original arm untouched."""
    cfg, report, out = two_arm_run
    single_cfg = load_config(small_workspace(tmp_path, paraphrases=True))
    single = run_experiment(single_cfg, write=False)
    for method in single.methods():
        for col in METRIC_COLUMNS:
            a, b = single.value(method, col, "orig"), report.value(method, col, "orig")
            assert (a is None and b is None) or a == b or (math.isnan(a) and math.isnan(b))
    orig_feats = read_features_csv(out / "features.csv")
    assert [v for _, _, v in single.arms[0].features] == [v for _, _, v in orig_feats]


def test_warm_cache_then_replay(tmp_path):
    cfg = load_config(small_workspace(tmp_path))
    stats = warm_cache(cfg)
    assert stats["live_calls"] > 0 and stats["hits"] == 0
    report = run_experiment(cfg)
    assert report.cache_stats["live_calls"] == 0
    assert report.cache_stats["misses"] == 0


def test_score_baselines_only(tmp_path):
    cfg = load_config(small_workspace(tmp_path))
    report = score_baselines_only(cfg)
    assert report.methods() == list(BASELINE_ROWS)
    assert (cfg.resolve(cfg.output_dir) / "report.csv").exists()


def test_starved_training_split(tmp_path):
    cfg = load_config(small_workspace(tmp_path, per_class=20))
    cfg.test_size = 0.99
    with pytest.raises(TrainingError):
        run_experiment(cfg, write=False)


# -- HTTP oracle end to end -------------------------------------------------


def completions(body):
    """Deterministic stand-in for a completions endpoint."""
    words = body["prompt"].split()
    if body.get("echo"):
        lps = [None] + [-(int(hashlib.md5(w.encode()).hexdigest()[:4], 16) % 400) / 100 - 0.01 for w in words[1:]]
        return 200, {"choices": [{"text": body["prompt"], "logprobs": {"token_logprobs": lps}}]}
    return 200, {"choices": [{"text": " " + " ".join(words[-body["max_tokens"]:])}]}


def test_http_oracle_run_marks_min_k_pp_unavailable(tmp_path, endpoint, caplog):
    endpoint.replies["/v1/completions"] = completions
    path = small_workspace(tmp_path, per_class=10, oracle_kind="http", oracle_url=endpoint.url + "/v1/completions",
                           oracle_model="audit-model", oracle_backoff=[0, 0, 0], synthetic_profiles_path=None,
                           classifiers=[])
    report = run_experiment(load_config(path))
    row = next(r for r in report.rows() if r["method"] == "MIN-K%++")
    assert all(row[f"{c}_orig"] is None for c in METRIC_COLUMNS)
    assert "MIN-K%++ reported as n/a" in caplog.text
    rouge = next(r for r in report.rows() if r["method"] == "ROUGE-L F1")
    assert rouge["retain_vs_all_auc_orig"] is not None
    assert "n/a" in (tmp_path / "out" / "report.csv").read_text()


# -- histograms -------------------------------------------------------------


FLAT_FORGOTTEN = {
    "Forgotten": {"kind": "flat", "jitter": 0.0},
    "Retained": {"kind": "basin", "slope": 3.0, "jitter": 0.0},
    "Holdout": {"kind": "basin", "slope": 1.0, "jitter": 0.0},
}


@pytest.fixture(scope="module")
def flat_features(tmp_path_factory):
    root = tmp_path_factory.mktemp("flat")
    cfg = load_config(small_workspace(root, geometries=FLAT_FORGOTTEN, classifiers=[], baselines=["loss"]))
    run_experiment(cfg)
    return cfg.resolve(cfg.output_dir) / "features.csv"


def test_flat_forgotten_concentrates_at_zero(flat_features):
    rows = read_features_csv(flat_features)
    for _, label, vec in rows:
        if label == "Forgotten":
            assert np.all(vec.as_array()[4:] == 0.0)
    counts = binned_counts(rows, 40)
    for col in FEATURE_COLUMNS[4:]:
        c = counts[(col, "Forgotten")]
        assert c[0] == 20 and c[1:].sum() == 0, col


def test_histogram_files(flat_features, tmp_path):
    svg, counts_csv = emit_feature_histograms(flat_features, tmp_path, bins=12)
    text = svg.read_text()
    assert text.count("</svg>") == 1
    for j, col in enumerate(FEATURE_COLUMNS):
        assert f"{col}: {FEATURE_NAMES[j]}" in text
    rows = list(csv.reader(counts_csv.read_text().splitlines()))
    assert rows[0][:3] == ["feature", "name", "label"] and len(rows[0]) == 3 + 12
    assert len(rows) == 1 + 14 * 3
    assert all(sum(map(int, r[3:])) == 20 for r in rows[1:])
    # byte-stable output for identical input
    svg2, _ = emit_feature_histograms(flat_features, tmp_path / "again", bins=12)
    assert svg2.read_bytes() == svg.read_bytes()


def test_histograms_need_two_classes(flat_features, tmp_path):
    rows = [r for r in read_features_csv(flat_features) if r[1] == "Holdout"]
    one = tmp_path / "one.csv"
    write_features_csv(one, rows)
    with pytest.raises(DataError, match="two classes"):
        emit_feature_histograms(one, tmp_path)
    with pytest.raises(DataError):
        emit_feature_histograms(flat_features, tmp_path, bins=0)
