import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import margin_triplet, shift_triplet, write_manifest_dataset
from percepattack.service import create_app


@pytest.fixture
def client():
    with TestClient(create_app(), raise_server_exceptions=False) as c:
        yield c


@pytest.fixture
def manifest(rng, tmp_path):
    triplets = [margin_triplet(rng, 0.02, 0.06) for _ in range(4)]
    return write_manifest_dataset(tmp_path / "data", triplets)


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "ok"


def test_metric_and_attack_listing(client):
    body = client.get("/v1/metrics").json()
    assert body["metrics"] == ["l2", "ssim", "msssim", "conv"]
    assert "stadv" in body["attacks"]


def test_accuracy_endpoint(client, manifest):
    response = client.post("/v1/accuracy", json={
        "dataset": {"path": str(manifest)},
        "metric": {"name": "l2"},
    })
    assert response.status_code == 200
    body = response.json()
    assert body["n_samples"] == 4
    assert body["accuracy"] == 1.0


def test_accuracy_with_margins(client, manifest):
    response = client.post("/v1/accuracy", json={
        "dataset": {"path": str(manifest)},
        "metric": {"name": "l2"},
        "with_margins": True,
    })
    margins = response.json()["margins"]
    assert margins["agree"] > 0
    assert margins["disagree"] is None  # empty bucket serializes as null


def test_missing_dataset_is_400(client):
    response = client.post("/v1/accuracy", json={
        "dataset": {"path": "/no/such/file.csv"},
        "metric": {"name": "l2"},
    })
    assert response.status_code == 400
    assert "not found" in response.json()["detail"]


def test_unknown_metric_is_422(client, manifest):
    response = client.post("/v1/accuracy", json={
        "dataset": {"path": str(manifest)},
        "metric": {"name": "vgg"},
    })
    assert response.status_code == 422


def test_conv_without_weights_is_400(client, manifest):
    response = client.post("/v1/accuracy", json={
        "dataset": {"path": str(manifest)},
        "metric": {"name": "conv"},
    })
    assert response.status_code == 400


def test_gradcheck_endpoint(client):
    response = client.post("/v1/gradcheck", json={
        "metric": {"name": "ssim"}, "seed": 7,
    })
    body = response.json()
    assert response.status_code == 200
    assert body["passed"] is True
    assert body["max_relative_error"] < 1e-3


def test_attack_endpoint_returns_full_payload(client, manifest):
    response = client.post("/v1/attack", json={
        "dataset": {"path": str(manifest)},
        "metric": {"name": "l2"},
        "attack": {"name": "pgd"},
        "seed": 11,
    })
    assert response.status_code == 200
    body = response.json()
    assert body["kind"] == "attack_benchmark"
    assert body["seed"] == 11
    assert len(body["samples"]) == 4
    assert {row["bucket"] for row in body["summary"]} <= {"agree", "disagree"}


def test_transfer_endpoint(client, rng, tmp_path):
    triplets = [shift_triplet(rng) for _ in range(3)]
    manifest = write_manifest_dataset(tmp_path / "shift", triplets)
    response = client.post("/v1/transfer", json={
        "dataset": {"path": str(manifest)},
        "source": {"name": "l2"},
        "targets": [{"name": "l2"}],
        "combine_ks": [5],
        "plain_pgd_ks": [],
    })
    assert response.status_code == 200
    body = response.json()
    assert body["kind"] == "transfer_benchmark"
    assert body["n_total"] == 3
    assert {row["variant"] for row in body["summary"]} == {"stadv", "stadv+pgd5"}


def test_duplicate_targets_rejected(client, manifest):
    response = client.post("/v1/transfer", json={
        "dataset": {"path": str(manifest)},
        "source": {"name": "l2"},
        "targets": [{"name": "l2"}, {"name": "l2"}],
    })
    assert response.status_code == 400
    assert "duplicate" in response.json()["detail"]
