"""Command-line behavior: exit codes, JSON output, reproducibility."""

import json
import subprocess
import sys

import numpy as np
import pytest

from uwbrem import cli
from uwbrem import dataset as ds

MODEL_FLAGS = ["--k", "16", "--filters", "8", "--se-reduction", "4",
               "--blocks", "2", "--epochs", "1"]


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.csv"
    ds.export_csv(ds.make_synthetic(80, seed=21), path)
    return str(path)


def run_cli(capsys, *args):
    code = cli.main(list(args))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def test_train_is_bit_reproducible(tmp_path, capsys, data_csv):
    m1 = tmp_path / "a.remn"
    m2 = tmp_path / "b.remn"
    code1, out1 = run_cli(capsys, "train", "--data", data_csv,
                          "--out", str(m1), *MODEL_FLAGS)
    code2, out2 = run_cli(capsys, "train", "--data", data_csv,
                          "--out", str(m2), *MODEL_FLAGS)
    assert code1 == 0 and code2 == 0
    assert m1.read_bytes() == m2.read_bytes()
    assert out1["train_mae"] == out2["train_mae"]
    manifest = json.loads((tmp_path / "a.remn.manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["options"]["epochs"] == 1
    assert "numpy" in manifest["versions"]


def test_eval_emits_json_report(tmp_path, capsys, data_csv):
    m = tmp_path / "m.remn"
    assert run_cli(capsys, "train", "--data", data_csv, "--out", str(m),
                   *MODEL_FLAGS)[0] == 0
    code, report = run_cli(capsys, "eval", "--model", str(m),
                           "--data", data_csv)
    assert code == 0
    assert set(report) >= {"n_nlos", "n_los", "mae_nlos", "mae_los",
                           "raw_mae_nlos", "histogram"}


def test_quantize_ptq_and_eval(tmp_path, capsys, data_csv):
    m = tmp_path / "m.remn"
    q = tmp_path / "m.remq"
    run_cli(capsys, "train", "--data", data_csv, "--out", str(m), *MODEL_FLAGS)
    code, out = run_cli(capsys, "quantize", "ptq", "--model", str(m),
                        "--out", str(q), "--data", data_csv)
    assert code == 0
    assert out["bytes"] == q.stat().st_size
    code, report = run_cli(capsys, "eval", "--model", str(q),
                           "--data", data_csv)
    assert code == 0 and report["n_los"] > 0


def test_quantize_qat_tracks_float_report(tmp_path, capsys, data_csv):
    m = tmp_path / "m.remn"
    q = tmp_path / "m.remq"
    run_cli(capsys, "train", "--data", data_csv, "--out", str(m), *MODEL_FLAGS)
    _, float_report = run_cli(capsys, "eval", "--model", str(m),
                              "--data", data_csv)
    code, info = run_cli(capsys, "quantize", "qat", "--model", str(m),
                         "--out", str(q), "--data", data_csv, "--epochs", "2")
    assert code == 0
    assert info["final_train_mae"] is not None
    code, report = run_cli(capsys, "eval", "--model", str(q),
                           "--data", data_csv)
    assert code == 0
    assert report["mae_nlos"] < 1.5 * float_report["mae_nlos"]


def test_sweep_k_command(tmp_path, capsys, data_csv):
    out = tmp_path / "sweep.csv"
    code, res = run_cli(capsys, "sweep-k", "--data", data_csv,
                        "--split", "stratified", "--ks", "8,16",
                        "--repeats", "1", *MODEL_FLAGS, "--out", str(out))
    assert code == 0
    assert [r["k"] for r in res["rows"]] == [8, 16]
    assert out.read_text().startswith("k,mean_mae")


def test_transfer_command(tmp_path, capsys, data_csv):
    out = tmp_path / "transfer.csv"
    code, res = run_cli(capsys, "transfer", "--data", data_csv,
                        "--axis", "environment", "--hidden", "8",
                        "--layers", "2", "--epochs", "1", "--k", "16",
                        "--out", str(out))
    assert code == 0
    n = len(res["classes"])
    assert n >= 2 and len(res["grid"]) == n
    assert out.exists()


def test_bench_command(tmp_path, capsys, data_csv):
    m = tmp_path / "m.remn"
    q = tmp_path / "m.remq"
    run_cli(capsys, "train", "--data", data_csv, "--out", str(m), *MODEL_FLAGS)
    run_cli(capsys, "quantize", "ptq", "--model", str(m), "--out", str(q),
            "--data", data_csv)
    code, res = run_cli(capsys, "bench", "--model", str(m),
                        "--quantized", str(q), "--iters", "30", "--warmup", "5")
    assert code == 0
    assert res["float32"]["median_ms"] > 0.0
    assert res["int8"]["model_bytes"] < res["float32"]["model_bytes"]
    assert "speedup" in res and "size_ratio" in res


def test_unknown_flag_exits_1(capsys):
    assert cli.main(["train", "--bogus"]) == 1


def test_unknown_command_exits_1(capsys):
    assert cli.main(["frobnicate"]) == 1


def test_missing_file_exits_2(capsys, tmp_path):
    assert cli.main(["eval", "--model", str(tmp_path / "nope.remn"),
                     "--data", str(tmp_path / "nope.csv")]) == 2


def test_invalid_model_config_exits_2(tmp_path, capsys, data_csv):
    # input width too small for three halvings
    assert cli.main(["train", "--data", data_csv,
                     "--out", str(tmp_path / "x.remn"), "--k", "4"]) == 2


def test_config_file_precedence(tmp_path, capsys, data_csv):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\nk = 16\nfilters = 8\nse_reduction = 4\n"
                   "blocks = 2\n# comment\n")
    m = tmp_path / "m.remn"
    code, out = run_cli(capsys, "train", "--data", data_csv, "--out", str(m),
                        "--config", str(cfg), "--epochs", "2")
    assert code == 0
    assert out["epochs"] == 2  # flag wins over the config file

    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_option = 5\n")
    assert cli.main(["train", "--data", data_csv, "--out", str(m),
                     "--config", str(bad)]) == 1
    capsys.readouterr()


def test_defaults_are_per_subcommand():
    # --k defaults to 128 for train but 157 for transfer; the registries
    # must not bleed into each other
    parser = cli._build_parser()
    train = cli._resolve(parser.parse_args(["train", "--data", "d", "--out", "m"]))
    transfer = cli._resolve(parser.parse_args(["transfer", "--data", "d"]))
    assert train.k == 128
    assert transfer.k == 157
    assert train.seed == 0 and train.threads == 1


def test_import_reports_rejects(tmp_path, capsys, data_csv):
    src = tmp_path / "raw.csv"
    lines = open(data_csv).read().splitlines()
    broken = lines[1].split(",")
    broken[0] = "not-a-number"
    lines.append(",".join(broken))
    src.write_text("\n".join(lines) + "\n")
    out_csv = tmp_path / "canon.csv"
    errs = tmp_path / "errors.txt"
    code, out = run_cli(capsys, "import", "--data", str(src),
                        "--out", str(out_csv), "--errors-out", str(errs))
    assert code == 0
    assert out["imported"] == 80 and out["rejected"] == 1
    assert errs.read_text().startswith("row 82:")
    assert len(ds.import_csv(out_csv).samples) == 80


def test_locate_scenario(tmp_path, capsys):
    import uwbrem.localization as loc
    from uwbrem.rng import Rng
    anchors = loc.AnchorSet(np.array([[0, 0, 0], [6, 0, 0.5], [0, 6, 1.0],
                                      [6, 6, 2.5]], dtype=float))
    rng = Rng(3)
    epochs = []
    for _ in range(5):
        w = rng.uniforms(4, 0.05, 1.0)
        w /= w.sum()
        truth = w @ anchors.anchors
        epochs.append(loc.Epoch(truth=truth,
                                ranges=np.linalg.norm(anchors.anchors - truth,
                                                      axis=1)))
    scene = tmp_path / "scene.csv"
    loc.save_scenario(scene, anchors, epochs)
    fixes = tmp_path / "fixes.csv"
    code, out = run_cli(capsys, "locate", "--scenario", str(scene),
                        "--out", str(fixes))
    assert code == 0
    assert out["epochs"] == 5 and out["converged"] == 5
    assert out["position_mae"] < 1e-6
    assert len(fixes.read_text().splitlines()) == 6


def test_pca_command(tmp_path, capsys, data_csv):
    proj = tmp_path / "proj.csv"
    code, out = run_cli(capsys, "pca", "--data", data_csv, "--dims", "2",
                        "--out", str(proj))
    assert code == 0
    assert len(out["explained_variance"]) == 2
    assert len(proj.read_text().splitlines()) == 81


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "uwbrem.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "train" in proc.stdout and "quantize" in proc.stdout
