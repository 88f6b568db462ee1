import json
import os

import numpy as np
import pytest

from ccf import cli
from ccf.config import ConfigError, RunConfig, format_config, load_config, parse_config
from ccf.detector import load_model
from ccf.convnet import save_weights, synthetic_convnet
from ccf.edges import write_label_pgm
from ccf.image import LabeledBox, load_image, save_image, write_annotations
from ccf.synthetic import make_detection_dataset, make_negative_images, make_segmentation_dataset


def test_config_roundtrip_defaults_and_changes():
    cfg = RunConfig()
    assert parse_config(format_config(cfg)) == cfg
    cfg = parse_config("n_trees = 64\nwindow = 64x32\nthreshold = -0.5\napprox = yes  # comment\n")
    assert (cfg.n_trees, cfg.window, cfg.threshold, cfg.approx) == (64, (64, 32), -0.5, True)
    assert parse_config(format_config(cfg)) == cfg
    assert cfg.pyramid_mode == "approx"


def test_config_errors_name_the_key():
    with pytest.raises(ConfigError, match="'bogus'"):
        parse_config("bogus = 1")
    with pytest.raises(ConfigError, match="'n_trees'"):
        parse_config("n_trees = many")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("depth = 2\njust words\n")
    with pytest.raises(ConfigError, match="'annotations'"):
        parse_config("annotations = /no/such/file").validate()
    with pytest.raises(ConfigError, match="'weights'"):
        parse_config("backend = conv").validate()
    with pytest.raises(ConfigError, match="lambdas_file"):
        parse_config("approx = true").validate()


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "a.txt").write_text("")
    (tmp_path / "run.cfg").write_text("annotations = a.txt\n")
    cfg = load_config(tmp_path / "run.cfg", {"depth": "4"})
    assert cfg.annotations == str(tmp_path / "a.txt") and cfg.depth == 4
    cfg.validate()


def test_digest_ignores_workers():
    a, b = RunConfig(workers=1), RunConfig(workers=8)
    assert a.digest() == b.digest() != RunConfig(seed=1).digest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    train, test = make_detection_dataset(12, 3, seed=7)
    os.makedirs(root / "train")
    records = {}
    for i, sc in enumerate(train):
        p = f"train/{i:03d}.png"
        save_image(sc.image, root / p)
        records[p] = sc.boxes
    write_annotations(root / "train.txt", records)
    os.makedirs(root / "test")
    for i, sc in enumerate(test):
        save_image(sc.image, root / f"test/{i:03d}.png")
    os.makedirs(root / "neg")
    for i, im in enumerate(make_negative_images(6, seed=7)):
        save_image(im, root / f"neg/{i:03d}.png")
    os.makedirs(root / "seg/img")
    os.makedirs(root / "seg/lab")
    for i, (im, lab) in enumerate(make_segmentation_dataset(4, seed=7)):
        save_image(im, root / f"seg/img/{i:03d}.png")
        write_label_pgm(root / f"seg/lab/{i:03d}.pgm", lab)
    (root / "run.cfg").write_text(
        "annotations = train.txt\nmining_images = neg\nn_trees = 16\nrounds = 1\n"
        "edge_images = seg/img\nedge_labels = seg/lab\nedge_trees = 2\nedge_per_image = 60\n"
        "edge_pairs = 256\nlambda_images = neg\nbench_size = 136x104\n"
    )
    return root


def run(root, *argv):
    return cli.main([*argv[:1], "--config", str(root / "run.cfg"), *argv[1:]])


def test_train_detect_importance(workspace):
    r = workspace
    assert run(r, "train", "--out", str(r / "m1")) == 0
    assert run(r, "train", "--out", str(r / "m2")) == 0
    a, b = (r / "m1/model.cfd").read_bytes(), (r / "m2/model.cfd").read_bytes()
    assert a == b
    man = json.loads((r / "m1/manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 0
    assert man["config_sha256"] == load_config(r / "run.cfg").digest()
    assert set(man["outputs"]) == {"model.cfd", "rounds.csv"}
    assert {"ccf", "numpy", "python", "kernels"} <= set(man["versions"])
    assert (r / "m1/manifest.json").read_text() == (r / "m2/manifest.json").read_text()

    dets = r / "dets.txt"
    assert run(r, "detect", "--model", str(r / "m1/model.cfd"), "--images", str(r / "test"), "--out", str(dets)) == 0
    for line in dets.read_text().splitlines():
        assert len(line.split()) == 6
    assert (r / "dets.txt.manifest.json").exists()
    approx = ("detect", "--model", str(r / "m1/model.cfd"), "--images", str(r / "test"), "--out", str(dets),
              "--mode", "approx")
    assert run(r, *approx) == 2
    assert run(r, "fit-lambda", "--out", str(r / "lam0")) == 0
    assert run(r, *approx, "--set", f"lambdas_file={r / 'lam0/lambdas.json'}") == 0

    assert run(r, "importance", "--model", str(r / "m1/model.cfd"), "--out", str(r / "imp")) == 0
    counts = np.loadtxt(r / "imp/map_counts.csv", delimiter=",", skiprows=1)
    assert counts[:, 1].sum() == load_model(r / "m1/model.cfd").forest.n_internal
    occ = (r / "imp/occupancy.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in occ[1:]] == ["10", "20", "50"]


def test_edges_commands(workspace):
    r = workspace
    assert run(r, "train-edges", "--out", str(r / "e1")) == 0
    assert run(r, "train-edges", "--out", str(r / "e2")) == 0
    assert (r / "e1/edges.cfe").read_bytes() == (r / "e2/edges.cfe").read_bytes()
    out = r / "e.pgm"
    assert run(r, "edges", "--model", str(r / "e1/edges.cfe"), "--image", str(r / "seg/img/000.png"),
               "--out", str(out)) == 0
    E = load_image(out)
    assert (E.height, E.width) == (96, 96)


def test_fit_lambda_and_bench(workspace):
    r = workspace
    assert run(r, "fit-lambda", "--out", str(r / "lam")) == 0
    lam = json.loads((r / "lam/lambdas.json").read_text())
    assert len(lam["lambdas"]) == 10
    assert run(r, "pyramid-bench", "--out", str(r / "pb")) == 0
    rows = (r / "pb/pyramid_bench.csv").read_text().splitlines()
    assert rows[0].startswith("mode,seconds,speedup")
    assert {l.split(",")[0] for l in rows[1:]} == {"exact", "patchwork", "approx", "approx+patchwork"}
    # a run with the fitted exponents through the approximate pyramid
    assert run(r, "pyramid-bench", "--set", f"lambdas_file={r / 'lam/lambdas.json'}", "--set", "approx=1",
               "--out", str(r / "pb2")) == 0


def test_conv_bench_has_free_size_row(workspace, tmp_path):
    w = tmp_path / "net.cfw"
    save_weights(synthetic_convnet(seed=0), w)
    assert cli.main(["pyramid-bench", "--set", "backend=conv", "--set", f"weights={w}",
                     "--set", "bench_size=96x96", "--set", "window=32x32", "--set", "canvas=200", "--out", str(tmp_path / "pb")]) == 0
    modes = [l.split(",")[0] for l in (tmp_path / "pb/pyramid_bench.csv").read_text().splitlines()[1:]]
    assert "exact-free" in modes


def test_exit_codes(workspace, tmp_path, caplog):
    r = workspace
    assert cli.main(["train", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert "bogus" in caplog.text
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--set", "annotations=/no/such", "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--set", "backend=conv", "--out", str(tmp_path)]) == 2
    assert cli.main(["detect", "--model", str(tmp_path / "none.cfd"), "--images", str(r / "test"),
                     "--out", str(tmp_path / "d.txt")]) == 3
    bad = tmp_path / "bad.cfd"
    bad.write_bytes(b"CFD1" + b"\0" * 20)
    assert cli.main(["importance", "--model", str(bad), "--out", str(tmp_path / "i")]) == 3
    ann = tmp_path / "bad.txt"
    ann.write_text("img.png 1 2 three 4 object 0\n")
    assert cli.main(["train", "--set", f"annotations={ann}", "--out", str(tmp_path / "t")]) == 3
    (tmp_path / "empty").mkdir()
    with pytest.raises(cli.DataError, match="no images"):
        cli.list_images(str(tmp_path / "empty"))
