import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from anoadapt.feature_store import FeatureMatrix, load_feature_file, save_feature_file
from anoadapt.service.app import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, client):
    """Synthetic feature files plus a pretrained model, shared by the tests."""
    root = tmp_path_factory.mktemp("svc")
    paths = {
        "train": str(root / "train.pndf"),
        "test": str(root / "test.pndf"),
        "aux": str(root / "aux.pndf"),
        "psi0": str(root / "psi0.pndc"),
        "fisher": str(root / "fisher.pndf"),
        "head": str(root / "head.pndc"),
        "bank": str(root / "bank"),
        "root": root,
    }
    r = client.post("/synth", json={
        "out_train": paths["train"], "out_test": paths["test"], "out_aux": paths["aux"],
        "seed": 3, "collapse_prone": True,
    })
    assert r.status_code == 200, r.text
    r = client.post("/pretrain", json={
        "aux_path": paths["aux"], "psi0_out": paths["psi0"], "fisher_out": paths["fisher"],
        "head_out": paths["head"], "minibatches": 150, "hidden_layers": 1, "seed": 3,
    })
    assert r.status_code == 200, r.text
    paths["pretrain_resp"] = r.json()
    return paths


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200 and r.json()["status"] == "ok"


def test_synth_files_load(workspace):
    train = load_feature_file(workspace["train"])
    test = load_feature_file(workspace["test"])
    aux = load_feature_file(workspace["aux"])
    assert train.n == 192 and test.n == 384 and aux.n == 768
    assert aux.labels is not None


def test_pretrain_outputs_reload(workspace):
    from anoadapt.adapter import load_checkpoint

    psi0 = load_checkpoint(workspace["psi0"])
    fisher = load_feature_file(workspace["fisher"])
    head = load_checkpoint(workspace["head"])
    assert psi0.params.num_params == workspace["pretrain_resp"]["num_params"]
    assert fisher.d == psi0.params.num_params
    assert (fisher.values() >= 0).all()
    assert head.params.weights[0].shape[0] == workspace["pretrain_resp"]["num_classes"]


def test_pretrain_unlabeled_aux_rejected(client, workspace):
    unlabeled = str(workspace["root"] / "unlabeled.pndf")
    save_feature_file(FeatureMatrix(np.ones((4, 2), dtype=np.float32)), unlabeled)
    r = client.post("/pretrain", json={"aux_path": unlabeled, "psi0_out": "x", "fisher_out": "y"})
    assert r.status_code == 400
    assert "labeled" in r.json()["detail"]


def test_adapt_and_score_roundtrip(client, workspace):
    r = client.post("/adapt", json={
        "mode": "ewc", "train_path": workspace["train"], "psi0_path": workspace["psi0"],
        "fisher_path": workspace["fisher"], "bank_dir": workspace["bank"],
        "minibatches": 120, "ckpt_interval": 30, "lr": 0.5, "seed": 3,
    })
    assert r.status_code == 200, r.text
    body = r.json()
    assert body["minibatches_run"] == 120
    assert len(body["checkpoint_files"]) == 5  # indices 0,30,60,90,120

    out = str(workspace["root"] / "scores.csv")
    r = client.post("/score", json={
        "scorer": "knn", "gallery_path": workspace["train"], "query_path": workspace["test"],
        "out_path": out, "ckpt_path": body["final_params_path"],
    })
    assert r.status_code == 200
    assert r.json()["n_scores"] == 384

    labels = str(workspace["root"] / "labels.csv")
    test_m = load_feature_file(workspace["test"])
    with open(labels, "w") as fh:
        fh.write("index,label\n")
        for i, l in enumerate(test_m.labels):
            fh.write(f"{i},{1 if l != 0 else 0}\n")
    r = client.post("/eval", json={"scores_path": out, "labels_path": labels})
    assert r.status_code == 200
    assert 0.5 < r.json()["auc"] <= 1.0


def test_adapt_ewc_requires_fisher(client, workspace):
    r = client.post("/adapt", json={
        "mode": "ewc", "train_path": workspace["train"], "psi0_path": workspace["psi0"],
        "bank_dir": str(workspace["root"] / "b2"), "minibatches": 5,
    })
    assert r.status_code == 400
    assert "fisher" in r.json()["detail"]


def test_adapt_unknown_mode(client, workspace):
    r = client.post("/adapt", json={
        "mode": "nope", "train_path": workspace["train"], "psi0_path": workspace["psi0"],
        "bank_dir": str(workspace["root"] / "b3"),
    })
    assert r.status_code == 400


def test_score_ses_from_bank(client, workspace):
    out = str(workspace["root"] / "ses.csv")
    r = client.post("/score", json={
        "scorer": "ses", "gallery_path": workspace["train"], "query_path": workspace["test"],
        "out_path": out, "bank_dir": workspace["bank"],
    })
    assert r.status_code == 200
    assert r.json()["n_scores"] == 384


def test_score_missing_gallery(client, workspace):
    r = client.post("/score", json={
        "scorer": "knn", "gallery_path": str(workspace["root"] / "missing.pndf"),
        "query_path": workspace["test"], "out_path": "x.csv",
    })
    assert r.status_code == 400


def test_eval_known_fixture(client, workspace):
    scores = str(workspace["root"] / "fix_scores.csv")
    labels = str(workspace["root"] / "fix_labels.csv")
    with open(scores, "w") as fh:
        fh.write("index,score\n0,0.1\n1,0.4\n2,0.35\n3,0.8\n")
    with open(labels, "w") as fh:
        fh.write("index,label\n0,0\n1,0\n2,1\n3,1\n")
    r = client.post("/eval", json={"scores_path": scores, "labels_path": labels})
    assert r.status_code == 200
    assert r.json()["auc"] == 0.75


def test_eval_mismatched_indices(client, workspace):
    scores = str(workspace["root"] / "m_scores.csv")
    labels = str(workspace["root"] / "m_labels.csv")
    with open(scores, "w") as fh:
        fh.write("index,score\n0,0.1\n1,0.4\n")
    with open(labels, "w") as fh:
        fh.write("index,label\n0,0\n2,1\n")
    r = client.post("/eval", json={"scores_path": scores, "labels_path": labels})
    assert r.status_code == 400


def test_oe_adapt_and_logit_scoring(client, workspace):
    oe_path = str(workspace["root"] / "oe.pndf")
    test_m = load_feature_file(workspace["test"])
    anomalies = test_m.data[test_m.labels != 0]
    save_feature_file(FeatureMatrix(anomalies), oe_path)
    bank = str(workspace["root"] / "oe_bank")
    r = client.post("/adapt", json={
        "mode": "oe", "train_path": workspace["train"], "psi0_path": workspace["psi0"],
        "oe_path": oe_path, "bank_dir": bank, "minibatches": 100, "seed": 3,
    })
    assert r.status_code == 200, r.text
    body = r.json()
    assert body["oe_head_path"] is not None
    out = str(workspace["root"] / "oe_scores.csv")
    r = client.post("/score", json={
        "scorer": "oe-logit", "gallery_path": workspace["train"], "query_path": workspace["test"],
        "out_path": out, "ckpt_path": body["final_params_path"], "oe_head_path": body["oe_head_path"],
    })
    assert r.status_code == 200
    assert r.json()["n_scores"] == 384


def test_jo_adapt(client, workspace):
    bank = str(workspace["root"] / "jo_bank")
    r = client.post("/adapt", json={
        "mode": "jo", "train_path": workspace["train"], "psi0_path": workspace["psi0"],
        "aux_path": workspace["aux"], "head_path": workspace["head"],
        "bank_dir": bank, "minibatches": 50, "seed": 3,
    })
    assert r.status_code == 200, r.text


def test_ses_on_single_checkpoint_bank_matches_knn(client, workspace):
    # a bank holding only the starting model: samplewise scoring must equal
    # the plain kNN path divided by the (constant) normalizer
    import shutil

    single = workspace["root"] / "single_bank"
    single.mkdir(exist_ok=True)
    shutil.copy(os.path.join(workspace["bank"], "ckpt-0000000.pndc"), single / "ckpt-0000000.pndc")
    ses_out = str(workspace["root"] / "single_ses.csv")
    knn_out = str(workspace["root"] / "single_knn.csv")
    r = client.post("/score", json={
        "scorer": "ses", "gallery_path": workspace["train"], "query_path": workspace["test"],
        "out_path": ses_out, "bank_dir": str(single),
    })
    assert r.status_code == 200, r.text
    r = client.post("/score", json={
        "scorer": "knn", "gallery_path": workspace["train"], "query_path": workspace["test"],
        "out_path": knn_out, "ckpt_path": str(single / "ckpt-0000000.pndc"),
    })
    assert r.status_code == 200
    ses = np.loadtxt(ses_out, delimiter=",", skiprows=1)[:, 1]
    knn = np.loadtxt(knn_out, delimiter=",", skiprows=1)[:, 1]
    from anoadapt.adapter import load_checkpoint

    s0 = load_checkpoint(single / "ckpt-0000000.pndc").normalizer
    assert s0 is not None and s0 > 0
    assert np.allclose(ses, knn / s0, rtol=1e-12)
    assert np.array_equal(np.argsort(ses, kind="stable"), np.argsort(knn, kind="stable"))


def test_experiment_endpoint(client, workspace):
    report_out = str(workspace["root"] / "exp.csv")
    r = client.post("/experiment", json={
        "train_path": workspace["train"], "test_path": workspace["test"],
        "variant": "unadapted", "jobs": 2, "report_out": report_out,
    })
    assert r.status_code == 200, r.text
    body = r.json()
    assert body["per_class"][0]["normal_class"] == 0
    assert 0.0 <= body["average_auc"] <= 1.0
    assert os.path.exists(report_out)
    # jobs > 1 must not change the result
    r2 = client.post("/experiment", json={
        "train_path": workspace["train"], "test_path": workspace["test"],
        "variant": "unadapted", "jobs": 1,
    })
    assert r2.json()["average_auc"] == body["average_auc"]


def test_experiment_needs_labels(client, workspace):
    unlabeled = str(workspace["root"] / "unlab.pndf")
    save_feature_file(FeatureMatrix(np.ones((4, 2), dtype=np.float32)), unlabeled)
    r = client.post("/experiment", json={"train_path": unlabeled, "test_path": workspace["test"]})
    assert r.status_code == 400
