import base64
import json
import math
import statistics
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remind.embedding_store import load_embedding_table
from remind.errors import DataError, FormatError, OracleError, ParameterError
from remind.ill_features import (
    EPS, IllFeatureVector, MeanPooledEncoder, RemoteEncoder, encode_text, extract_features, features_from_losses,
    read_features_csv, write_features_csv,
)
from remind.oracle import JsonPoster, LossProfile, SyntheticOracle
from remind.perturbation import PerturbationConfig, perturb
from remind.tokenizer import WhitespaceTokenizer

from helpers import WORDS, random_table

HTTP = Path(__file__).parent / "fixtures" / "http"


def reference_features(l_orig, losses, distances):
    """Spreadsheet-style oracle: plain Python, one statistic per line."""
    K = len(losses)
    mu = sum(losses) / K
    var = statistics.pvariance(losses)
    absd = [abs(v - l_orig) for v in losses]
    grads = [a / max(d, EPS) if d >= EPS else 0.0 for a, d in zip(absd, distances)]
    walk = [v for _, _, v in sorted(zip(distances, range(K), losses))]
    vol = sum(abs(b - a) for a, b in zip(walk, walk[1:])) / (K - 1)
    return [
        l_orig, mu, max(losses), min(losses), math.sqrt(var), var, mu - l_orig, max(losses) - l_orig,
        min(losses) - l_orig, statistics.pvariance(absd), sum(grads) / K, max(grads),
        statistics.pvariance(grads), vol,
    ]


finite_loss = st.floats(0, 20, allow_nan=False)


def neighborhoods(min_k=2, max_k=20):
    return st.integers(min_k, max_k).flatmap(lambda k: st.tuples(
        finite_loss,
        st.lists(finite_loss, min_size=k, max_size=k),
        st.lists(st.one_of(st.just(0.0), st.floats(1e-9, 5)), min_size=k, max_size=k),
    ))


def test_hand_example_two_neighbors():
    f = features_from_losses(1.0, [1.2, 0.8], [0.1, 0.2]).as_array()
    expected = [1.0, 1.0, 1.2, 0.8, 0.2, 0.04, 0.0, 0.2, -0.2, 0.0, 1.5, 2.0, 0.25, 0.4]
    assert np.allclose(f, expected, rtol=0, atol=1e-9)
    assert np.allclose(f, reference_features(1.0, [1.2, 0.8], [0.1, 0.2]), rtol=0, atol=1e-12)


def test_flat_field_is_exactly_zero():
    f = features_from_losses(2.0, [2.0] * 4, [0.1] * 4)
    assert tuple(f.as_array()) == (2, 2, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0)


def test_zero_distance_neighbor_has_zero_gradient():
    f = features_from_losses(1.0, [1.0, 3.0, 2.0], [0.0, 0.5, 1e-12])
    assert f.grad_max == pytest.approx(4.0)
    assert np.all(np.isfinite(f.as_array()))


def test_needs_two_neighbors():
    with pytest.raises(ParameterError):
        features_from_losses(1.0, [1.0], [0.1])


def test_non_finite_input():
    with pytest.raises(DataError):
        features_from_losses(1.0, [1.0, math.nan], [0.1, 0.1])


@settings(max_examples=300)
@given(neighborhoods())
def test_matches_reference(case):
    l_orig, losses, dist = case
    got = features_from_losses(l_orig, losses, dist).as_array()
    want = np.array(reference_features(l_orig, losses, dist))
    assert np.allclose(got, want, rtol=1e-9, atol=1e-9)


@settings(max_examples=300)
@given(neighborhoods())
def test_invariants(case):
    f = features_from_losses(*case)
    a = f.as_array()
    assert np.all(np.isfinite(a))
    assert f.sigma_neigh ** 2 == pytest.approx(f.var_neigh, abs=1e-9)
    assert f.l_min <= f.mu_neigh <= f.l_max
    assert f.delta_min <= f.delta_mu <= f.delta_max


@settings(max_examples=200)
@given(neighborhoods(), st.randoms(use_true_random=False))
def test_permutation_invariance(case, rnd):
    l_orig, losses, dist = case
    base = features_from_losses(l_orig, losses, dist).as_array()
    order = list(range(len(losses)))
    rnd.shuffle(order)
    shuffled = features_from_losses(l_orig, [losses[i] for i in order], [dist[i] for i in order]).as_array()
    assert np.allclose(base[:13], shuffled[:13], rtol=1e-12, atol=1e-12)
    if len(set(dist)) == len(dist):
        assert base[13] == pytest.approx(shuffled[13], abs=1e-12)


@settings(max_examples=200)
@given(neighborhoods(), st.floats(0.01, 100))
def test_scaling_covariance(case, c):
    l_orig, losses, dist = case
    base = features_from_losses(l_orig, losses, dist).as_array()
    scaled = features_from_losses(l_orig * c, [v * c for v in losses], dist).as_array()
    factor = np.full(14, c)
    factor[[5, 9, 12]] = c * c
    assert np.allclose(scaled, base * factor, rtol=1e-9, atol=1e-9)


def test_duplicate_variants_are_safe():
    f = features_from_losses(1.5, [1.5, 1.5, 2.0, 2.0], [0.0, 0.0, 0.3, 0.3])
    assert np.all(np.isfinite(f.as_array()))


def test_vector_round_trip():
    v = features_from_losses(1.0, [1.2, 0.8], [0.1, 0.2])
    assert IllFeatureVector.from_array(v.as_array()) == v
    with pytest.raises(ParameterError):
        IllFeatureVector.from_array([1.0] * 13)


def test_csv_round_trip(tmp_path):
    rows = [(f"s{i}", "Retained", features_from_losses(1.0 + i, [1.1, 0.7 + i / 3], [0.1, 0.3])) for i in range(4)]
    path = tmp_path / "f.csv"
    write_features_csv(path, rows)
    assert path.read_text().splitlines()[0] == "sample_id,label," + ",".join(f"f{i}" for i in range(1, 15))
    assert read_features_csv(path) == rows


def test_csv_bad_header(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("id,label\n")
    with pytest.raises(FormatError):
        read_features_csv(path)


# -- encoders ----------------------------------------------------------------


@pytest.fixture(scope="module")
def toolkit(tmp_path_factory):
    table = load_embedding_table(random_table(tmp_path_factory.mktemp("e") / "t.txt"), 20)
    tok = WhitespaceTokenizer(table)
    return table, tok, MeanPooledEncoder(table, tok)


def test_mean_pooled_encoder(toolkit):
    table, _, enc = toolkit
    assert np.array_equal(encode_text(enc, "w007"), table.embeddings[7])
    assert np.allclose(enc.encode("w003 w009"), (table.embeddings[3] + table.embeddings[9]) / 2)
    with pytest.raises(DataError):
        enc.encode("   ")


def test_remote_encoder_fixture(endpoint):
    doc = json.loads((HTTP / "embedding_response.json").read_text())
    endpoint.replies["/emb"] = [(200, doc)]
    enc = RemoteEncoder(JsonPoster(endpoint.url + "/emb"), "embed-model")
    vec = enc.encode("hello")
    expected = np.frombuffer(base64.b64decode(doc["data"][0]["embedding"]), dtype="<f4")
    assert vec.tolist() == expected.tolist() == [1.0, -2.0, 3.0]
    assert endpoint.requests[0][1] == {"model": "embed-model", "input": "hello"}
    enc.encode("hello")
    assert len(endpoint.requests) == 1


def test_remote_encoder_list_and_dimension_change(endpoint):
    replies = iter([[0.5, 0.25], [1.0, 2.0, 3.0]])
    endpoint.replies["/emb"] = lambda body: (200, {"data": [{"embedding": next(replies)}]})
    enc = RemoteEncoder(JsonPoster(endpoint.url + "/emb"), "m")
    assert enc.encode("a").tolist() == [0.5, 0.25]
    with pytest.raises(DataError):
        enc.encode("b")


def test_remote_encoder_transport_error():
    enc = RemoteEncoder(JsonPoster("http://127.0.0.1:9/x", timeout=0.5, backoff=()), "m")
    with pytest.raises(OracleError):
        enc.encode("a")


def test_extract_features_uses_encoder_distances(toolkit):
    table, tok, enc = toolkit
    orig_text = " ".join(WORDS[:10])
    var_texts = [" ".join(WORDS[1:11]), orig_text, " ".join(WORDS[5:15])]
    losses = [2.0, 1.5, 3.0]
    got = extract_features(LossProfile((1.0,)), [(LossProfile((v,)), t) for v, t in zip(losses, var_texts)],
                           orig_text, enc)
    base = enc.encode(orig_text)
    dist = [float(np.linalg.norm(enc.encode(t) - base)) for t in var_texts]
    assert dist[1] == 0.0
    assert np.allclose(got.as_array(), reference_features(1.0, losses, dist), atol=1e-12)


def test_basin_slope_recovery(toolkit):
    """An affine loss field with zero jitter has |dl|/d equal to the slope."""
    table, tok, enc = toolkit
    rng = np.random.default_rng(0)
    for i in range(20):
        slope = float(rng.uniform(0.5, 5.0))
        oracle = SyntheticOracle({"s": {"kind": "basin", "center_loss": 1.0, "slope": slope, "jitter": 0.0}},
                                 tok, enc)
        ids = rng.integers(0, 500, size=25).tolist()
        nb = perturb(ids, table, PerturbationConfig(seed=i))
        anchor = tok.decode(nb.original)
        texts = [tok.decode(v) for v in nb.variants]
        neigh = [(oracle.score_text(t, "s", anchor), t) for t in texts]
        f = extract_features(oracle.score_text(anchor, "s", anchor), neigh, anchor, enc)
        assert abs(f.mu_grad - slope) <= 1e-6
