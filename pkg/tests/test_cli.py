import csv

import numpy as np
import pytest

from jrlab import checks
from jrlab.cli import main
from jrlab.data import synthetic_blobs, split_per_class
from jrlab.jacreg import cyclopropagation, jacreg_exact
from jrlab.nn import load_model, save_model, xavier_init
from jrlab.train import parse_key_values

SMALL = ["--synthetic-per-class", "12", "--hidden", "8", "--log-every", "10"]
DATA = ["--synthetic-per-class", "12"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--total-iters", "40", "--quench-every", "30", "--lambda-jr", "0.01", *SMALL, "--out", str(out)])
    assert rc == 0
    return out


def test_train_outputs(run_dir):
    assert (run_dir / "model.ckpt").exists()
    lines = (run_dir / "history.csv").read_text().splitlines()
    assert lines[1] == "iteration,loss,reg_value,test_acc,jf_norm,lr"
    manifest = parse_key_values((run_dir / "manifest.txt").read_text())
    assert manifest["lambda_jr"] == "0.01" and manifest["seed"] == "0"
    assert manifest["dataset"] == "synthetic"


def test_bare_run_manifest_shows_zeros(tmp_path):
    rc = main(
        ["train", "--lambda-jr", "0", "--lambda-wd", "0", "--dropout", "0", "--total-iters", "3", *SMALL, "--out", str(tmp_path)]
    )
    assert rc == 0
    m = parse_key_values((tmp_path / "manifest.txt").read_text())
    assert float(m["lambda_jr"]) == float(m["lambda_wd"]) == float(m["dropout_rate"]) == 0.0


def test_manifest_rerun_is_byte_identical(run_dir, tmp_path):
    assert main(["train", "--config", str(run_dir / "manifest.txt"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (run_dir / "model.ckpt").read_bytes()
    assert (tmp_path / "history.csv").read_bytes() == (run_dir / "history.csv").read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("lambda-jr=0.5\ntotal_iters=2\nhidden=4\nsynthetic_per_class=12\n")
    assert main(["train", "--config", str(cfg), "--lambda-jr", "0.25", "--out", str(tmp_path / "o")]) == 0
    assert parse_key_values((tmp_path / "o" / "manifest.txt").read_text())["lambda_jr"] == "0.25"


def test_few_shot_train_size_in_history(tmp_path):
    assert main(["train", "--samples-per-class", "10", "--total-iters", "2", *SMALL, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == "# train_size=100"


def test_unknown_config_key_lists_valid_keys(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("lambda_jx=1\n")
    assert main(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "lambda_jx" in err and "lambda_jr" in err


def test_unknown_flag_lists_valid_flags(capsys):
    assert main(["train", "--lambda-jx", "1"]) == 2
    assert "--lambda-jr" in capsys.readouterr().err


def test_eval_matches_exact_regularizer(run_dir, tmp_path, capsys):
    assert main(["eval", str(run_dir / "model.ckpt"), *DATA, "--csv", str(tmp_path / "e.csv")]) == 0
    with open(tmp_path / "e.csv") as fh:
        row = next(csv.DictReader(fh))
    model = load_model(run_dir / "model.ckpt")
    _, test_set = split_per_class(synthetic_blobs(15, seed=0), 3, seed=0)
    expected = np.mean(jacreg_exact(model, test_set.inputs, with_grads=False).frobenius_norms)
    assert abs(float(row["jf_norm"]) - expected) <= 1e-10 * expected
    assert "accuracy" in capsys.readouterr().out


def test_eval_untrained_net_is_near_chance(tmp_path, capsys):
    save_model(xavier_init([784, 10], "identity", seed=0), tmp_path / "m.ckpt")
    assert main(["eval", str(tmp_path / "m.ckpt"), "--synthetic-per-class", "200", "--csv", str(tmp_path / "e.csv")]) == 0
    with open(tmp_path / "e.csv") as fh:
        acc = float(next(csv.DictReader(fh))["accuracy"])
    assert acc < 40


def test_eval_width_mismatch(tmp_path, capsys):
    save_model(xavier_init([5, 3], "tanh", seed=0), tmp_path / "m.ckpt")
    assert main(["eval", str(tmp_path / "m.ckpt"), *DATA]) == 2
    assert "width" in capsys.readouterr().err


def test_attack_white_zero_sigma_is_clean_accuracy(run_dir, tmp_path):
    out = tmp_path / "a.csv"
    assert main(["attack", str(run_dir / "model.ckpt"), "--kind", "white", "--sigmas", "0", *DATA, "--out", str(out)]) == 0
    main(["eval", str(run_dir / "model.ckpt"), *DATA, "--csv", str(tmp_path / "e.csv")])
    rows = list(csv.DictReader(open(out)))
    clean = float(next(csv.DictReader(open(tmp_path / "e.csv")))["accuracy"])
    assert len(rows) == 1 and float(rows[0]["accuracy"]) == clean


def test_attack_outputs_are_deterministic(run_dir, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"p{k}.csv"
        assert main(["attack", str(run_dir / "model.ckpt"), "--kind", "fgsm", "--n-test", "15", *DATA, "--out", str(out)]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert (tmp_path / "p0_points.csv").read_bytes() == (tmp_path / "p1_points.csv").read_bytes()
    lines = outs[0].read_text().splitlines()
    assert lines[0] == "abscissa,error,n,seed"
    assert len(list(csv.DictReader(open(tmp_path / "p0_points.csv")))) == 15


def test_attack_unknown_kind(run_dir, capsys):
    assert main(["attack", str(run_dir / "model.ckpt"), "--kind", "laser", *DATA]) == 2
    assert "unknown attack kind" in capsys.readouterr().err


def test_sweep_single_lambda_and_manifests(tmp_path):
    args = ["sweep", "--lambdas", "0,0.1", "--total-iters", "5", "--n-test", "5", "--sigmas", "0,0.5", *SMALL]
    assert main([*args, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert {r["lambda_jr"] for r in rows} == {"0.0", "0.1"}
    assert {r["attack"] for r in rows} == {"white", "pgd"}
    for lam in ("0", "0.1"):
        m = parse_key_values((tmp_path / f"lambda_{lam}" / "manifest.txt").read_text())
        assert float(m["lambda_jr"]) == float(lam)


def test_sweep_rejects_negative_lambda(tmp_path, capsys):
    assert main(["sweep", "--lambdas", "-0.1", *SMALL, "--out", str(tmp_path)]) == 2


def test_slice_command(run_dir, tmp_path, capsys):
    out = tmp_path / "s.csv"
    rc = main(["slice", str(run_dir / "model.ckpt"), "--resolution", "7", "--extent", "1", *DATA, "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# center_hash=") and "resolution=7" in lines[0]
    assert len(lines) == 2 + 49
    assert (tmp_path / "s_manifest.txt").exists()


def test_slice_given_basis_needs_directions(run_dir, tmp_path):
    assert main(["slice", str(run_dir / "model.ckpt"), "--mode", "given-basis", *DATA]) == 2
    np.save(tmp_path / "d.npy", np.random.default_rng(0).standard_normal((2, 784)))
    rc = main(
        ["slice", str(run_dir / "model.ckpt"), "--mode", "given-basis", "--directions", str(tmp_path / "d.npy"),
         "--resolution", "3", *DATA, "--out", str(tmp_path / "s.csv")]
    )
    assert rc == 0


def test_check_passes_and_reports(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] equivalence" in out and "margin" in out and "all checks passed" in out


def test_check_fails_on_sign_flip(monkeypatch, capsys):
    def broken(model, x):
        r = cyclopropagation(model, x)
        for g in r.grads.dW:
            g *= -1
        return r

    real = checks.run_checks
    monkeypatch.setattr(checks, "run_checks", lambda: real(cyclo=broken))
    assert main(["check"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL] equivalence: cyclopropagation grads" in out
