"""HTTP surface: endpoints, status codes, golden fixtures, determinism."""

import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from scorer_service.app import create_app

GOLDEN = json.loads((Path(__file__).parent / "fixtures" / "golden_score.json").read_text())


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app(model_spec="byte:0", max_bytes=256)) as test_client:
        yield test_client


class TestHealth:
    def test_ready(self, client):
        resp = client.get("/v1/health")
        assert resp.status_code == 200
        payload = resp.json()
        assert payload["status"] == "ready"
        assert payload["model_fingerprint"]

    def test_fingerprint_stable_across_calls(self, client):
        a = client.get("/v1/health").json()["model_fingerprint"]
        b = client.get("/v1/health").json()["model_fingerprint"]
        assert a == b

    def test_loading_returns_503(self):
        app = create_app(model_spec="byte:0", max_bytes=64)
        # no startup event: the model is not loaded yet
        bare = TestClient(app)
        assert bare.get("/v1/health").status_code == 503


class TestScore:
    def test_response_length_matches_request(self, client):
        pairs = [{"context": f"c{i}", "continuation": f" y{i}"} for i in range(7)]
        resp = client.post("/v1/score", json={"pairs": pairs})
        assert resp.status_code == 200
        payload = resp.json()
        assert len(payload["log_likelihoods"]) == len(pairs)
        assert all(v <= 0.0 for v in payload["log_likelihoods"])

    def test_empty_continuation_scores_zero(self, client):
        resp = client.post(
            "/v1/score", json={"pairs": [{"context": "abc", "continuation": ""}]}
        )
        assert resp.json()["log_likelihoods"] == [0.0]

    def test_repeat_request_identical_floats(self, client):
        body = {"pairs": [{"context": "det", "continuation": "erminism"}]}
        first = client.post("/v1/score", json=body).json()["log_likelihoods"]
        second = client.post("/v1/score", json=body).json()["log_likelihoods"]
        assert first == second

    def test_malformed_is_400(self, client):
        assert client.post("/v1/score", json={"nonsense": 1}).status_code == 400
        assert client.post("/v1/score", json={"pairs": []}).status_code == 400
        assert client.post(
            "/v1/score", json={"pairs": [{"context": 5, "continuation": []}]}
        ).status_code == 400

    def test_over_limit_is_413(self, client):
        resp = client.post(
            "/v1/score",
            json={"pairs": [{"context": "x" * 300, "continuation": "y"}]},
        )
        assert resp.status_code == 413

    def test_golden_request_response(self, client):
        resp = client.post("/v1/score", json=GOLDEN["request"])
        assert resp.status_code == 200
        payload = resp.json()
        expected = GOLDEN["response"]
        assert payload["model_fingerprint"] == expected["model_fingerprint"]
        assert len(payload["log_likelihoods"]) == len(expected["log_likelihoods"])
        for got, want in zip(payload["log_likelihoods"], expected["log_likelihoods"]):
            assert got == pytest.approx(want, abs=1e-6)
