import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from radon_net.cli import main
from radon_net.dataset import load_index, write_pnm
from radon_net.model import build_model, save_weights
from radon_net.weights import load_container

from conftest import SMALL_INPUT, SMALL_SPEC


def run(*argv):
    return main([str(a) for a in argv])


def small_config(manifest, out, **extra):
    cfg = {
        "manifest": str(manifest),
        "out": str(out),
        "model": {"layers": [layer.to_dict() for layer in SMALL_SPEC], "input_shape": list(SMALL_INPUT)},
        "preprocess": {"crop_top_fraction": 1.0, "output_height": 16, "output_width": 16, "grayscale": True},
        "sampler": {"batch_size": 8, "pairs_per_epoch": 32, "seed": 0},
        "optimizer": {"lr": 1e-3},
        "eval": {"max_pairs": 80, "samples_per_cell": 3},
    }
    cfg.update(extra)
    return cfg


def write_json(path, data):
    Path(path).write_text(json.dumps(data))
    return path


def tree_digest(root):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    assert run("make-synthetic", "--classes", 6, "--per-class", 2, "--seed", 3, "--size", 16, "--out", root) == 0
    assert run("split", "--manifest", root / "manifest.csv", "--novel", 2, "--seed", 1) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    cfg = write_json(out / "c.json", small_config(dataset / "manifest.csv", out / "run"))
    assert run("train", "--config", cfg, "--epochs", 2, "--threads", 1) == 0
    return out / "run"


# -------------------------------------------------------- make-synthetic


def test_make_synthetic_counts_and_determinism(tmp_path, capsys):
    assert run("make-synthetic", "--classes", 16, "--per-class", 10, "--seed", 7, "--size", 16,
               "--out", tmp_path / "a", "--threads", 1) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.csv")
    assert run("make-synthetic", "--classes", 16, "--per-class", 10, "--seed", 7, "--size", 16,
               "--out", tmp_path / "b", "--threads", 1) == 0
    lines = (tmp_path / "a" / "manifest.csv").read_text().splitlines()
    assert len(lines) == 1 + 320
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_make_synthetic_one_class_is_usage_error(tmp_path):
    assert run("make-synthetic", "--classes", 1, "--per-class", 2, "--out", tmp_path) == 2


# ----------------------------------------------------------------- split


def big_manifest(path, n):
    rows = ["image_path,class_id,domain,split"]
    rows += [f"img/{c}_{d}.pgm,k{c:04d},{d}," for c in range(n) for d in (0, 1)]
    for c in range(n):
        for d in (0, 1):
            (path.parent / "img").mkdir(exist_ok=True)
            write_pnm(path.parent / "img" / f"{c}_{d}.pgm", np.zeros((2, 2), dtype=np.uint8))
    path.write_text("\n".join(rows) + "\n")
    return path


@pytest.mark.parametrize("n,novel,known", [(683, 67, 616), (491, 50, 441)])
def test_split_large_manifests(tmp_path, n, novel, known):
    m = big_manifest(tmp_path / "m.csv", n)
    assert run("split", "--manifest", m, "--novel", novel, "--seed", 1) == 0
    idx = load_index(m)
    assert (len(idx.known_classes), len(idx.novel_classes)) == (known, novel)
    first = m.read_bytes()
    assert run("split", "--manifest", m, "--novel", novel, "--seed", 1) == 0
    assert m.read_bytes() == first


def test_split_too_many_novel(tmp_path):
    m = big_manifest(tmp_path / "m.csv", 4)
    assert run("split", "--manifest", m, "--novel", 4) == 2


def test_split_missing_manifest(tmp_path):
    assert run("split", "--manifest", tmp_path / "nope.csv", "--novel", 1) == 1


# ----------------------------------------------------------------- train


def test_train_zero_epochs(dataset, tmp_path):
    cfg = write_json(tmp_path / "c.json", small_config(dataset / "manifest.csv", tmp_path / "r"))
    assert run("train", "--config", cfg, "--epochs", 0, "--threads", 1) == 0
    files = sorted(p.name for p in (tmp_path / "r").glob("*.rdnw"))
    assert files == ["initial.rdnw"]
    report = json.loads((tmp_path / "r" / "train_report.json").read_text())
    assert report["epoch_loss"] == [] and report["steps"] == 0
    echoed = json.loads((tmp_path / "r" / "config.json").read_text())
    assert echoed["epochs"] == 0


def test_train_artifacts(trained):
    names = sorted(p.name for p in trained.iterdir())
    for expected in ("config.json", "initial.rdnw", "epoch_001.rdnw", "epoch_002.rdnw", "final.rdnw",
                     "train_report.json", "loss.svg"):
        assert expected in names
    report = json.loads((trained / "train_report.json").read_text())
    assert len(report["epoch_loss"]) == 2
    assert report["config"]["optimizer"]["lr"] == 1e-3


def test_train_tied_vs_untied_differ(dataset, tmp_path):
    digests = []
    for mode in ("tied", "untied"):
        cfg = write_json(tmp_path / f"{mode}.json", small_config(dataset / "manifest.csv", tmp_path / mode))
        assert run("train", "--config", cfg, "--epochs", 1, "--mode", mode, "--threads", 1, "--no-plots") == 0
        digests.append((tmp_path / mode / "final.rdnw").read_bytes())
    assert digests[0] != digests[1]


def test_train_missing_manifest_names_key(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", small_config(tmp_path / "absent.csv", tmp_path / "r"))
    assert run("train", "--config", cfg) == 2
    assert "manifest" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_train_without_manifest_key(tmp_path, capsys):
    assert run("train", "--out", tmp_path / "r") == 2
    assert "'manifest'" in capsys.readouterr().err


@pytest.mark.parametrize("patch", [
    {"sampler": {"batch_size": 7, "pairs_per_epoch": 32}},
    {"model": {"layers": [layer.to_dict() for layer in SMALL_SPEC], "input_shape": [1, 32, 32]}},
    {"bogus": 1},
    {"eval": {"scenarios": ["sideways"]}},
])
def test_train_bad_config_exit_2(dataset, tmp_path, patch):
    cfg = small_config(dataset / "manifest.csv", tmp_path / "r")
    cfg.update(patch)
    assert run("train", "--config", write_json(tmp_path / "c.json", cfg)) == 2
    assert not (tmp_path / "r").exists()


def test_train_init_weights_transplant(dataset, tmp_path):
    donor = build_model(SMALL_SPEC, SMALL_INPUT, "tied", seed=42)
    save_weights(donor, tmp_path / "donor.rdnw")
    cfg = write_json(tmp_path / "c.json", small_config(dataset / "manifest.csv", tmp_path / "r"))
    assert run("train", "--config", cfg, "--epochs", 0, "--init-weights", tmp_path / "donor.rdnw") == 0
    rec = json.loads((tmp_path / "r" / "transplant.json").read_text())
    assert rec["transplanted"] == ["conv1", "conv2", "dense1"]
    init = load_container(tmp_path / "r" / "initial.rdnw")
    assert np.array_equal(init["branch_b.conv1.weight"], donor.branch_a.params["conv1.weight"].data)


# ------------------------------------------------------------------ eval


def test_eval_three_scenarios(trained, tmp_path, capsys):
    rc = run("eval", "--checkpoint", trained / "final.rdnw", "--scenarios", "both_known,both_novel,all",
             "--out", tmp_path / "e", "--threads", 1)
    assert rc == 0
    names = sorted(p.name for p in (tmp_path / "e").iterdir())
    assert [n for n in names if n.endswith(".csv")] == ["roc_all.csv", "roc_both_known.csv", "roc_both_novel.csv"]
    assert "summary.json" in names and "eval_config.json" in names and "roc.svg" in names
    assert "both_known: auc=" in capsys.readouterr().out


def test_eval_matrix_subset(trained, dataset, tmp_path):
    classes = load_index(dataset / "manifest.csv").classes[:3]
    rc = run("eval", "--checkpoint", trained / "final.rdnw", "--scenarios", "all", "--matrix",
             "--classes", ",".join(classes), "--out", tmp_path / "e")
    assert rc == 0
    rows = (tmp_path / "e" / "score_matrix.csv").read_text().splitlines()
    assert rows[0].split(",")[1:] == list(classes)
    assert [r.split(",")[0] for r in rows[1:]] == list(classes)
    assert (tmp_path / "e" / "score_matrix.svg").is_file()


def test_eval_unknown_scenario(trained, tmp_path):
    assert run("eval", "--checkpoint", trained / "final.rdnw", "--scenarios", "sideways", "--out", tmp_path) == 2


def test_eval_mismatched_checkpoint_names_tensor(trained, tmp_path, capsys):
    other = build_model(SMALL_SPEC, SMALL_INPUT, "tied", seed=0)
    save_weights(other, tmp_path / "tied.rdnw")
    rc = run("eval", "--checkpoint", tmp_path / "tied.rdnw", "--config", trained / "config.json",
             "--out", tmp_path / "e")
    assert rc == 1
    assert "missing tensor branch_b.conv1.weight" in capsys.readouterr().err


def test_eval_without_config_beside_checkpoint(tmp_path):
    save_weights(build_model(SMALL_SPEC, SMALL_INPUT, "tied", seed=0), tmp_path / "w.rdnw")
    assert run("eval", "--checkpoint", tmp_path / "w.rdnw", "--out", tmp_path / "e") == 2


# ----------------------------------------------------------------- score


def test_score_same_file_on_tied_is_head_constant(dataset, tmp_path, capsys):
    model = build_model(SMALL_SPEC, SMALL_INPUT, "tied", seed=5)
    model.head_bias.data[:] = -0.8
    save_weights(model, tmp_path / "t.rdnw")
    cfg = small_config(dataset / "manifest.csv", tmp_path)
    cfg["model"]["mode"] = "tied"
    write_json(tmp_path / "config.json", cfg)
    img = next((dataset / "images").glob("*.pgm"))
    assert run("score", "--checkpoint", tmp_path / "t.rdnw", "--image-a", img, "--image-b", img) == 0
    out = capsys.readouterr().out
    value = float(out.split("score=")[1].split()[0])
    assert value == pytest.approx(1 / (1 + np.exp(0.8)), abs=1e-6)
    assert "decision=no match" in out


def test_threshold_changes_decision_not_score(trained, dataset, capsys):
    imgs = sorted((dataset / "images").glob("*.pgm"))
    a, b = imgs[0], imgs[1]
    outs = []
    for thr in ("0.0", "0.5", "1.0"):
        assert run("score", "--checkpoint", trained / "final.rdnw", "--image-a", a, "--image-b", b,
                   "--threshold", thr) == 0
        outs.append(capsys.readouterr().out)
    scores = {o.split()[0] for o in outs}
    assert len(scores) == 1
    assert "decision=match" in outs[0]
    assert "decision=no match" in outs[2]


def test_score_unreadable_image(trained, tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"garbage")
    rc = run("score", "--checkpoint", trained / "final.rdnw", "--image-a", tmp_path / "bad.pgm",
             "--image-b", tmp_path / "bad.pgm")
    assert rc == 1
    assert run("score", "--checkpoint", trained / "final.rdnw", "--image-a", tmp_path / "none.pgm",
               "--image-b", tmp_path / "none.pgm") == 1


def test_score_bad_threshold(trained, tmp_path):
    assert run("score", "--checkpoint", trained / "final.rdnw", "--image-a", "x", "--image-b", "y",
               "--threshold", "2") == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        run("train", "--epochs", "many")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("nonsense")
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "radon_net", "make-synthetic", "--classes", "1",
                           "--per-class", "1", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "--classes" in proc.stderr
