import math

import numpy as np
import pytest

import mammoclu


def _tiny_config(manifest, out_dir, epochs=1):
    return {
        "seed": 7,
        "train_manifest": manifest,
        "output_dir": out_dir,
        "image_size": 64,
        "backbone": {"global": {"preset": "tiny"}, "local": {"preset": "tiny"}},
        "roi": {"num_patches": 4, "patch_size": 16},
        "fusion": {"dim": 24},
        "optimizer": {"learning_rate": 1e-3, "epochs": epochs, "batch_size": 4},
    }


def test_assign_clusters_matches_numpy_oracle():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(24, 6))
    anc = rng.normal(size=(3, 6))
    got = np.asarray(mammoclu.assign_clusters(pts, anc))
    sim = (pts @ anc.T) / np.outer(
        np.linalg.norm(pts, axis=1) + 1e-12, np.linalg.norm(anc, axis=1) + 1e-12
    )
    assert np.array_equal(got, sim.argmax(axis=1))


def test_greedy_roi_select_picks_disjoint_windows():
    rng = np.random.default_rng(6)
    m = rng.uniform(size=(10, 10))
    picks = mammoclu.greedy_roi_select(m, 3, 2, 2)
    assert len(picks) == 3
    means = {
        (r, c): m[r : r + 2, c : c + 2].mean() for r in range(9) for c in range(9)
    }
    assert tuple(picks[0]) == max(means, key=means.get)
    for i, (ra, ca) in enumerate(picks):
        for rb, cb in picks[i + 1 :]:
            assert ra + 2 <= rb or rb + 2 <= ra or ca + 2 <= cb or cb + 2 <= ca


def test_auc_and_f1_basics():
    assert mammoclu.auc([0.1, 0.9], [0, 1]) == 1.0
    assert mammoclu.auc([0.9, 0.1], [0, 1]) == 0.0
    assert mammoclu.auc([0.5, 0.5], [0, 1]) == 0.5
    assert mammoclu.f1(2, 1, 1) == pytest.approx(2 / 3)


def test_mdr_hand_fixture():
    patches = [[(0, 0, 8, 8)]]
    boxes = [[(0, 0, 8, 8), (20, 20, 28, 28)]]
    out = mammoclu.mdr(patches, boxes, tau=0.25)
    assert out == {"n_gt": 2, "n_miss": 1, "value": 0.5}


def test_params_counts_tiny_model():
    out = mammoclu.params(_tiny_config("unused.csv", "unused"))
    assert out["total"] == 27960
    assert sum(out["modules"].values()) == out["total"]


def test_strict_config_rejects_unknown_keys(tmp_path):
    cfg = _tiny_config("m.csv", str(tmp_path))
    cfg["optimizre"] = {}
    with pytest.raises(ValueError, match="optimizre"):
        mammoclu.params(cfg)


def test_synth_train_evaluate_roundtrip(tmp_path):
    manifest = mammoclu.synth(str(tmp_path / "data"), study_count=6, image_size=64, seed=3)
    cfg = _tiny_config(manifest, str(tmp_path / "run"))
    res = mammoclu.train(cfg)
    assert len(res["history"]) == 1
    assert math.isfinite(res["history"][0]["loss"])

    metrics = mammoclu.evaluate(res["last_checkpoint"], manifest)
    for key in ("auc", "acc", "f1", "threshold", "tp", "tn", "fp", "fn"):
        assert key in metrics
    assert 0.0 <= metrics["auc"] <= 1.0
