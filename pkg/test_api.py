#!/usr/bin/env python3
"""
Tests for the API server.

Under pytest the endpoints are exercised through Flask's test client. Run as a
script, main() checks a live server on http://localhost:5000 with requests.
"""

import time
from pathlib import Path

import pytest
import requests

import api_server
import start_api
from config import RunConfig
from model import init_parameters, save_checkpoint

BASE_URL = "http://localhost:5000"


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setattr(api_server, "OUTPUT_ROOT", tmp_path)
    monkeypatch.setattr(api_server, "loaded_params", None)
    monkeypatch.setattr(api_server, "loaded_checkpoint", None)
    api_server.app.config["TESTING"] = True
    with api_server.app.test_client() as c:
        yield c


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    data = response.get_json()
    assert data["status"] == "healthy"
    assert data["checkpoint_loaded"] is False


def test_assign_is_deterministic(client):
    payload = {"assigner": "cd", "scene_seed": 7}
    first = client.post("/assign", json=payload).get_json()
    second = client.post("/assign", json=payload).get_json()
    assert first == second
    assert first["assigner"] == "cd"
    assert len(first["labels"]) == RunConfig().model.grid
    assert len(first["positives"]) >= 1


def test_assign_rejects_unknown_assigner(client):
    response = client.post("/assign", json={"assigner": "atss", "scene_seed": 1})
    assert response.status_code == 400
    assert "assigner" in response.get_json()["error"]


def test_assign_requires_fields(client):
    response = client.post("/assign", json={"assigner": "iv"})
    assert response.status_code == 400


def test_evaluate_without_checkpoint_is_rejected(client):
    response = client.post("/evaluate", json={"sequences": 1, "seed": 1})
    assert response.status_code == 400


def test_evaluate_fresh_model(client):
    response = client.post("/evaluate", json={"sequences": 1, "seed": 3, "fresh": True})
    assert response.status_code == 200
    data = response.get_json()
    assert data["n_sequences"] == 1
    assert 0.0 <= data["sr_075"] <= data["sr_050"] <= 1.0
    assert len(data["success_curve"]) == 21


def test_load_checkpoint_missing_file(client, tmp_path):
    response = client.post("/load_checkpoint", json={"checkpoint": str(tmp_path / "nope.json")})
    assert response.status_code == 404


def test_load_checkpoint_then_health(client, tmp_path):
    path = save_checkpoint(tmp_path / "ckpt.json", init_parameters(RunConfig().model, 5))
    response = client.post("/load_checkpoint", json={"checkpoint": str(path)})
    assert response.status_code == 200
    assert client.get("/health").get_json()["checkpoint_loaded"] is True


def test_list_runs_and_download(client, tmp_path):
    run_dir = tmp_path / "run_a"
    run_dir.mkdir()
    (run_dir / "metrics.csv").write_text("epoch,mean_train_iou\n0,0.1\n")

    data = client.get("/list_runs").get_json()
    assert data["runs"][0]["run"] == "run_a"
    assert data["runs"][0]["files"] == ["metrics.csv"]

    response = client.get("/download/run_a/metrics.csv")
    assert response.status_code == 200
    assert response.data.startswith(b"epoch")


def test_download_missing_file(client):
    assert client.get("/download/run_a/none.csv").status_code == 404


def test_start_api_config_check(tmp_path):
    assert start_api.check_config(Path(__file__).parent / "default_config.json")
    assert not start_api.check_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"top_k": 300}')
    assert not start_api.check_config(bad)


def test_start_api_preloads_checkpoint(tmp_path, monkeypatch):
    monkeypatch.setattr(api_server, "loaded_params", None)
    monkeypatch.setattr(api_server, "loaded_checkpoint", None)
    path = save_checkpoint(tmp_path / "ckpt.json", init_parameters(RunConfig().model, 5))

    assert start_api.preload_checkpoint(api_server, str(path))
    assert api_server.loaded_checkpoint == str(path)
    assert api_server.loaded_params.count() == init_parameters(RunConfig().model, 5).count()
    assert not start_api.preload_checkpoint(api_server, str(tmp_path / "missing.json"))


def test_debugger_is_opt_in(monkeypatch):
    assert start_api.build_parser().parse_args([]).debug is False
    assert start_api.build_parser().parse_args(["--debug"]).debug is True
    monkeypatch.delenv("POINTHEAD_DEBUG", raising=False)
    assert not api_server.debug_requested([])
    assert api_server.debug_requested(["--debug"])
    monkeypatch.setenv("POINTHEAD_DEBUG", "1")
    assert api_server.debug_requested([])


# Live-server checks, run with `python test_api.py`

def check_health():
    """Test health endpoint"""
    print("🔍 Testing health endpoint...")
    try:
        response = requests.get(f"{BASE_URL}/health")
        if response.status_code == 200:
            data = response.json()
            print(f"✅ Health check passed")
            print(f"   Status: {data['status']}")
            print(f"   Checkpoint loaded: {data['checkpoint_loaded']}")
            return True
        else:
            print(f"❌ Health check failed: {response.status_code}")
            return False
    except Exception as e:
        print(f"❌ Health check error: {e}")
        return False


def check_assign():
    """Test assignment endpoint"""
    print("\n🎯 Testing assignment...")
    try:
        response = requests.post(
            f"{BASE_URL}/assign",
            json={"assigner": "iv", "scene_seed": 7, "leading": True},
            headers={"Content-Type": "application/json"}
        )
        if response.status_code == 200:
            result = response.json()
            print(f"✅ Assignment successful")
            print(f"   Positives: {result['positives']}")
            print(f"   Threshold: {result['threshold']}")
            return True
        else:
            print(f"❌ Assignment failed: {response.status_code}")
            print(f"   Response: {response.text}")
            return False
    except Exception as e:
        print(f"❌ Assignment error: {e}")
        return False


def check_evaluate():
    """Test evaluation of a fresh model"""
    print("\n📈 Testing evaluation...")
    try:
        response = requests.post(f"{BASE_URL}/evaluate", json={"sequences": 2, "seed": 42, "fresh": True})
        if response.status_code == 200:
            result = response.json()
            print(f"✅ Evaluation successful")
            print(f"   AO: {result['ao']:.4f}  SR0.5: {result['sr_050']:.4f}")
            return True
        else:
            print(f"❌ Evaluation failed: {response.status_code}")
            print(f"   Response: {response.text}")
            return False
    except Exception as e:
        print(f"❌ Evaluation error: {e}")
        return False


def check_list_runs():
    """Test list runs endpoint"""
    print("\n📋 Testing list runs...")
    try:
        response = requests.get(f"{BASE_URL}/list_runs")
        if response.status_code == 200:
            data = response.json()
            print(f"✅ List runs successful")
            print(f"   Total runs: {len(data['runs'])}")
            for run in data['runs'][:3]:  # Show first 3
                print(f"   - {run['run']}: {', '.join(run['files'])}")
            return True
        else:
            print(f"❌ List runs failed: {response.status_code}")
            return False
    except Exception as e:
        print(f"❌ List runs error: {e}")
        return False


def main():
    print("🧪 Tracking Head API Test Suite")
    print("=" * 50)

    # Wait a moment for server to be ready
    print("⏳ Waiting for server to be ready...")
    time.sleep(2)

    if not check_health():
        print(f"\n❌ Server is not responding. Make sure it's running on {BASE_URL}")
        return

    check_assign()
    check_evaluate()
    check_list_runs()

    print("\n" + "=" * 50)
    print("🎉 Test suite completed!")


if __name__ == "__main__":
    main()
