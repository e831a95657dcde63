import numpy as np
import pytest

import lwnet


def test_param_counts():
    assert lwnet.count_params() == 34201
    assert lwnet.count_params(wnet=True) == 68482
    assert lwnet.count_params(base_width=12) == 76213
    assert lwnet.count_params(upsampling="bilinear") == 32281
    layers = lwnet.parameter_breakdown()
    assert sum(n for _, n in layers) == 34201


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    probs = rng.random(2000).astype(np.float32)
    labels = (rng.random(2000) < 0.3).astype(np.uint8)
    # probabilities quantized to the evaluator's grid, ties counted half
    q = np.floor(probs.astype(np.float64) * 65535 + 0.5)
    pos, neg = q[labels == 1], q[labels == 0]
    diff = pos[:, None] - neg[None, :]
    expected = ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size
    assert lwnet.roc_auc(probs, labels) == pytest.approx(expected, abs=1e-12)


def test_fov_excludes_pixels():
    probs = np.array([[0.9, 0.1], [0.8, 0.95]], dtype=np.float32)
    labels = np.array([[1, 0], [1, 1]], dtype=np.uint8)
    fov = np.array([[1, 1], [1, 0]], dtype=np.uint8)
    # the out-of-FOV positive would otherwise not change the ranking
    assert lwnet.roc_auc(probs, labels, fov) == 1.0
    t = lwnet.optimal_threshold(probs, labels, fov)
    dice, mcc = lwnet.dice_mcc(probs, labels, t, fov)
    assert dice == 1.0 and mcc == 1.0


def test_synth_sample_shapes():
    image, label, fov = lwnet.synth_sample(index=2, height=64, width=48, seed=5)
    assert image.shape == (64, 48, 3) and image.dtype == np.float32
    assert label.shape == (64, 48) and fov.shape == (64, 48)
    assert set(np.unique(label)) <= {0, 1}
    assert 0.0 <= image.min() and image.max() <= 1.0


def test_cli_train_and_load(tmp_path):
    data, out = tmp_path / "data", tmp_path / "run"
    code, _, err = lwnet.run_cli(
        ["synth", "--out", str(data), "--height", "48", "--width", "48",
         "--n-train", "4", "--n-val", "1", "--n-test", "1"])
    assert code == 0, err
    code, stdout, err = lwnet.run_cli(
        ["train", "--manifest", str(data / "manifest.csv"), "--out", str(out),
         "--total-iterations", "10", "--epochs-per-cycle", "5"])
    assert code == 0, err
    assert "checkpoint_id=" in stdout

    model = lwnet.Model.load(out / "model.lwnt")
    assert model.count_params() == 34201
    assert model.provenance["kind"] == "train"
    assert 0.0 <= model.threshold <= 1.0
    image, _, _ = lwnet.synth_sample(index=0, height=60, width=50)
    probs = model.predict(image)
    assert probs.shape == (60, 50)
    assert np.all((probs >= 0) & (probs <= 1))


def test_cli_bad_flag():
    code, _, _ = lwnet.run_cli(["report", "--bogus"])
    assert code not in (0, 1)
