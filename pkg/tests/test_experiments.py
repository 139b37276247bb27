import json
from pathlib import Path

import numpy as np
import pytest

from aplnet import archive
from aplnet.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from aplnet.config import ExperimentConfig, load_config, read_config_file
from aplnet.data import gen_synthetic_pwl_task, write_csv, write_idx
from aplnet.experiments import (
    cmd_eval,
    cmd_export_activations,
    cmd_sweep_k,
    cmd_sweep_s,
    cmd_train,
    mean_std,
    prepare_data,
    read_export,
)
from aplnet.layers import ConfigError, Network
from aplnet.pwl import eval_pwl_grid, apl_to_pwl
from aplnet.train import evaluate, load_network


@pytest.fixture(scope="module")
def tiny_images(tmp_path_factory):
    """Separable 3-class 6x6 images in IDX files plus a manifest."""
    root = tmp_path_factory.mktemp("tiny")
    rng = np.random.default_rng(0)
    for split, n in (("train", 90), ("test", 30)):
        labels = np.arange(n) % 3
        imgs = rng.integers(0, 60, size=(n, 6, 6))
        for c in range(3):
            imgs[labels == c, 2 * c:2 * c + 2, :] += 180
        write_idx(root / f"{split}-images.idx", imgs.astype(np.uint8))
        write_idx(root / f"{split}-labels.idx", labels.astype(np.uint8))
    (root / "manifest.txt").write_text(
        "task = classification\n"
        "train_images = train-images.idx\ntrain_labels = train-labels.idx\n"
        "test_images = test-images.idx\ntest_labels = test-labels.idx\n")
    return root / "manifest.txt"


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    train = gen_synthetic_pwl_task(2000, 2, 0.01, seed=0)
    test = gen_synthetic_pwl_task(500, 2, 0.0, seed=0)  # same h*, no noise
    write_csv(root / "train.csv", train)
    write_csv(root / "test.csv", test)
    (root / "manifest.txt").write_text("task = regression\ntrain_csv = train.csv\ntest_csv = test.csv\n")
    return root / "manifest.txt", train.meta["true_params"]


def _cfg(manifest, tmp_path, **kw):
    base = dict(manifest=str(manifest), out_dir=str(tmp_path / "out"), arch="mlp:36-12-3",
                epochs=2, batch_size=16, lr=0.05, val_fraction=0.2)
    base.update(kw)
    return ExperimentConfig(**base)


# -- config ---------------------------------------------------------------------------------

def test_config_errors_reported_together(tmp_path):
    cfg = ExperimentConfig(manifest=str(tmp_path / "missing"), activation="relu", frozen=True,
                           repetitions=0, dropout=1.5, lr=-1.0, arch="mlp:3")
    errs = cfg.errors()
    assert len(errs) == 6
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    assert "frozen" in str(exc.value) and "repetitions" in str(exc.value)


def test_config_file_include_and_override(tmp_path, tiny_images):
    (tmp_path / "base.cfg").write_text(f"manifest = {tiny_images}\nlr = 0.5\nepochs = 3\n# comment\n")
    (tmp_path / "run.cfg").write_text("include = base.cfg\nlr = 0.1\nfrozen = yes\nactivation = apl\n")
    values = read_config_file(tmp_path / "run.cfg")
    assert values["lr"] == "0.1" and values["epochs"] == "3"
    cfg = load_config(tmp_path / "run.cfg", {"epochs": "7"})
    assert cfg.lr == 0.1 and cfg.epochs == 7 and cfg.frozen is True
    cfg.validate()


def test_config_include_cycle(tmp_path):
    (tmp_path / "a.cfg").write_text("include = b.cfg\n")
    (tmp_path / "b.cfg").write_text("include = a.cfg\n")
    with pytest.raises(ConfigError, match="cycle"):
        read_config_file(tmp_path / "a.cfg")


def test_config_bad_values_listed(tmp_path):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_mapping({"lr": "fast", "epochs": "x", "colour": "red"})
    msg = str(exc.value)
    assert "lr" in msg and "epochs" in msg and "colour" in msg


def test_config_text_round_trip():
    cfg = ExperimentConfig(manifest="m.txt", activation="apl", S=3, frozen=True, lr_schedule="0:1 5:0.1")
    values = dict(line.split(" = ", 1) for line in cfg.to_text().splitlines())
    assert ExperimentConfig.from_mapping(values) == cfg
    assert cfg.parsed_schedule() == [(0, 1.0), (5, 0.1)]


def test_mean_std():
    assert mean_std([1.0, 3.0]) == (2.0, pytest.approx(np.sqrt(2)))
    assert mean_std([0.5]) == (0.5, 0.0)
    assert np.isnan(mean_std([float("nan")])[0])


# -- train / eval -----------------------------------------------------------------------------

def test_zero_epochs_reports_initial_model(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, epochs=0, activation="apl", S=2)
    report = cmd_train(cfg)
    r = report.results[0]
    _, train, val, test = prepare_data(cfg, cfg.seed)
    net = Network(cfg.network_spec(train.feature_shape), seed=cfg.seed)
    assert r.test_error == evaluate(net, test, "classification")["error"]
    assert r.val_error == evaluate(net, val, "classification")["error"]


def test_frozen_run_keeps_apl_params(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, activation="apl", S=2, frozen=True, epochs=3)
    report = cmd_train(cfg)
    texts, tensors = archive.load(Path(cfg.out_dir) / report.results[0].checkpoint)
    apl = [k for k in tensors if k.startswith("param/") and ".apl_" in k]
    assert apl
    for k in apl:
        assert tensors[k].tobytes() == tensors["init/" + k[6:]].tobytes()
    w = [k for k in tensors if k.startswith("param/") and k.endswith(".W")]
    assert any(tensors[k].tobytes() != tensors["init/" + k[6:]].tobytes() for k in w)


def test_learned_run_moves_apl_params(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, activation="apl", S=2, epochs=3)
    report = cmd_train(cfg)
    _, tensors = archive.load(Path(cfg.out_dir) / report.results[0].checkpoint)
    assert not np.array_equal(tensors["param/L1.apl_b"], tensors["init/L1.apl_b"])


def test_report_files_and_determinism(tmp_path, tiny_images):
    a = cmd_train(_cfg(tiny_images, tmp_path / "a", repetitions=3, activation="apl", S=1))
    b = cmd_train(_cfg(tiny_images, tmp_path / "b", repetitions=3, activation="apl", S=1, workers=3))
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert a.txt_path.read_bytes() == b.txt_path.read_bytes()
    lines = a.csv_path.read_text().splitlines()
    assert [l.split(",")[0] for l in lines] == ["row", "run", "run", "run", "mean", "std"]
    assert "reseeds" in a.txt_path.read_text()
    meta = json.loads((tmp_path / "a" / "out" / "meta.json").read_text())
    assert "started" in meta and meta["config"]["repetitions"] == 3
    # seeds differ, so the repetitions do too
    assert len({l.split(",")[6] for l in lines[1:4]}) > 1


def test_eval_matches_training_report(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, activation="apl", S=1)
    r = cmd_train(cfg).results[0]
    metrics = cmd_eval(Path(cfg.out_dir) / r.checkpoint, tiny_images, "test")
    assert metrics["error"] == r.test_error


def test_synthetic_recovery_through_train(tmp_path, synthetic):
    manifest, h_true = synthetic
    (tmp_path / "unit.txt").write_text("input 1\nactivation apl S=2\n")
    cfg = ExperimentConfig(manifest=str(manifest), out_dir=str(tmp_path / "out"),
                           arch=f"file:{tmp_path / 'unit.txt'}", activation="apl", S=2,
                           lr=0.05, batch_size=32, epochs=60, mean_subtract=False, val_fraction=0.0)
    report = cmd_train(cfg)
    net = load_network(*archive.load(Path(cfg.out_dir) / report.results[0].checkpoint))
    grid = np.linspace(-3, 3, 2001)
    mse = np.mean((net.predict(grid[:, None])[:, 0] - eval_pwl_grid(apl_to_pwl(h_true), grid)) ** 2)
    assert mse <= 1e-3


def test_nan_aborts_with_finite_checkpoint(tmp_path, synthetic):
    manifest, _ = synthetic
    cfg = ExperimentConfig(manifest=str(manifest), out_dir=str(tmp_path / "out"), arch="mlp:1-8-1",
                           activation="apl", S=1, lr=1e6, epochs=5, mean_subtract=False)
    report = cmd_train(cfg)
    r = report.results[0]
    assert not report.ok and r.status == "failed" and "non-finite" in r.message
    _, tensors = archive.load(Path(cfg.out_dir) / r.checkpoint)
    assert all(np.isfinite(v).all() for v in tensors.values())
    assert "failed" in report.txt_path.read_text()


# -- sweeps ---------------------------------------------------------------------------------------

def test_sweep_rows_and_zero_equals_baseline(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, repetitions=2, epochs=2)
    rows = cmd_sweep_s(cfg, [0, 1, 2], include_frozen=True)
    assert [r.label for r in rows] == ["relu", "S1_frozen", "S0", "S1", "S2"]
    base, s0 = rows[0], rows[2]
    for rb, r0 in zip(base.results, s0.results):
        assert (rb.train_loss, rb.val_error, rb.test_error) == (r0.train_loss, r0.val_error, r0.test_error)
    out = Path(cfg.out_dir)
    txt = (out / "sweep_s.txt").read_text()
    assert "baseline" in txt and "S=1 (activation not learned)" in txt and "S=2" in txt
    assert len((out / "sweep_s.csv").read_text().splitlines()) == 6
    assert len((out / "sweep_s_runs.csv").read_text().splitlines()) == 11


def test_sweep_row_count_layout(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, epochs=1)
    rows = cmd_sweep_s(cfg, [1, 2, 5, 10], include_frozen=False)
    assert [r.title for r in rows] == ["baseline", "S=1", "S=2", "S=5", "S=10"]


def test_sweep_marks_failed_cells(tmp_path, synthetic):
    manifest, _ = synthetic
    cfg = ExperimentConfig(manifest=str(manifest), out_dir=str(tmp_path / "out"), arch="mlp:1-8-1",
                           lr=1e6, epochs=3, mean_subtract=False)
    rows = cmd_sweep_s(cfg, [1], include_frozen=False)
    assert all(r.n_ok == 0 for r in rows)
    assert "failed (1/1 runs)" in (tmp_path / "out" / "sweep_s.txt").read_text()


def test_sweep_negative_s(tmp_path, tiny_images):
    with pytest.raises(ConfigError):
        cmd_sweep_s(_cfg(tiny_images, tmp_path), [1, -1])


def test_sweep_k_selects_by_validation(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, epochs=1)
    best, rows = cmd_sweep_k(cfg, (-0.1, 0.01, 0.2))
    vals = [r.stats("val_error")[0] for r in rows]
    assert best == (-0.1, 0.01, 0.2)[int(np.argmin(vals))]
    assert "selected k" in (Path(cfg.out_dir) / "sweep_k.txt").read_text()


# -- export -------------------------------------------------------------------------------------------

@pytest.fixture
def apl_checkpoint(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, arch="mlp:36-12-8-3", activation="apl", S=3, epochs=2)
    return Path(cfg.out_dir) / cmd_train(cfg).results[0].checkpoint


def test_export_matches_pwl_and_tails(apl_checkpoint, tmp_path):
    paths = cmd_export_activations(apl_checkpoint, "all", (-6, 6, 801), tmp_path / "ex")
    assert len(paths) == 2
    texts, tensors = archive.load(apl_checkpoint)
    net = load_network(texts, tensors)
    init = load_network(texts, tensors, "init/")
    for path, t in zip(paths, net.apl_layers()):
        header, rows, summary = read_export(path)
        x = rows[:, 0]
        p = net.apl_params(t)
        assert header[1:3] == ["h_init_0", "h_final_0"]
        for i in range(p.M):
            final = rows[:, 2 + 2 * i]
            np.testing.assert_allclose(final, eval_pwl_grid(apl_to_pwl(p.row(i)), x), rtol=0, atol=1e-12)
            np.testing.assert_allclose(rows[:, 1 + 2 * i], eval_pwl_grid(apl_to_pwl(init.apl_params(t).row(i)), x),
                                       rtol=0, atol=1e-12)
        assert np.all(summary["right_tail_slope"] == 1.0)
        left_final = summary["left_tail_slope"][1::2]
        np.testing.assert_allclose(left_final, -p.a.sum(axis=1), rtol=0, atol=1e-9)
        # finite differences on the exported grid, below every hinge
        fd = (rows[1, 2::2] - rows[0, 2::2]) / (x[1] - x[0])
        np.testing.assert_allclose(fd, left_final, rtol=0, atol=1e-9)


def test_export_caps_neurons(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, arch="mlp:36-1100-3", activation="apl", S=1, epochs=0)
    ckpt = Path(cfg.out_dir) / cmd_train(cfg).results[0].checkpoint
    (path,) = cmd_export_activations(ckpt, "1", (-1, 1, 3), tmp_path / "ex")
    header, _, _ = read_export(path)
    assert len(header) == 1 + 2 * 1000


def test_export_s0_is_relu(tmp_path, tiny_images):
    cfg = _cfg(tiny_images, tmp_path, activation="apl", S=0, epochs=1)
    ckpt = Path(cfg.out_dir) / cmd_train(cfg).results[0].checkpoint
    (path,) = cmd_export_activations(ckpt, "L1", (-2, 2, 41), tmp_path / "ex")
    _, rows, summary = read_export(path)
    for col in rows[:, 1:].T:
        np.testing.assert_array_equal(col, np.maximum(rows[:, 0], 0))
    assert np.all(summary["left_tail_slope"] == 0.0)


def test_export_usage_errors(apl_checkpoint, tmp_path):
    with pytest.raises(ConfigError, match="matches no APL layer"):
        cmd_export_activations(apl_checkpoint, "0,2", out_dir=tmp_path)
    with pytest.raises(ConfigError):
        cmd_export_activations(apl_checkpoint, "all", (0, 1, 1), tmp_path)


# -- CLI ------------------------------------------------------------------------------------------------

def test_cli_train_eval_export(tmp_path, tiny_images, capsys):
    out = tmp_path / "cli"
    (tmp_path / "run.cfg").write_text(f"manifest = {tiny_images}\narch = mlp:36-12-3\nepochs = 1\n")
    code = main(["train", "--config", str(tmp_path / "run.cfg"), "--activation", "apl", "--S", "2",
                 "--out-dir", str(out)])
    assert code == EXIT_OK
    ckpt = out / "checkpoints" / "run-seed0.ckpt"
    assert main(["eval", str(ckpt), "--manifest", str(tiny_images)]) == EXIT_OK
    assert "error=" in capsys.readouterr().out
    assert main(["export-activations", str(ckpt), "--grid", "-1", "1", "11", "--out", str(tmp_path / "e")]) == EXIT_OK
    assert main(["export-activations", str(ckpt), "--layers", "0"]) == EXIT_CONFIG


def test_cli_exit_codes(tmp_path, tiny_images, synthetic, capsys):
    assert main(["train", "--manifest", str(tmp_path / "nope"), "--frozen", "--repetitions", "0"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "frozen" in err and "repetitions" in err and "manifest" in err
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == EXIT_CONFIG
    assert main(["eval", str(tmp_path / "missing.ckpt"), "--manifest", str(tiny_images)]) == EXIT_CONFIG
    code = main(["train", "--manifest", str(synthetic[0]), "--arch", "mlp:1-4-1", "--lr", "1e6",
                 "--epochs", "3", "--no-mean-subtract", "--out-dir", str(tmp_path / "nan")])
    assert code == EXIT_RUNTIME


def test_cli_sweep_s(tmp_path, tiny_images, capsys):
    code = main(["sweep-s", "--manifest", str(tiny_images), "--arch", "mlp:36-12-3", "--epochs", "1",
                 "--S-values", "1", "2", "--out-dir", str(tmp_path / "sw")])
    assert code == EXIT_OK
    assert "S=1 (activation not learned)" in capsys.readouterr().out
