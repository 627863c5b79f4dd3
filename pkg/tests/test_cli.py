import json
import subprocess
import sys
import time

import pytest

from conftest import permissive_hw
from inputtune.cli import main
from inputtune.param_space import GEMM_PARAMS, default_bounds


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def loose_hw_file(tmp_path):
    p = tmp_path / "loose_hw.json"
    permissive_hw().save(p)
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert main(["generate", "--samples", "4000", "--seed", "1", "--out", str(d / "d.csv")]) == 0
    assert main(["train", "--dataset", str(d / "d.csv"), "--epochs", "30", "--out", str(d / "m.json")]) == 0
    return d


def test_calibrate_single_value_bounds(tmp_path, capsys, loose_hw_file):
    b = tmp_path / "b.json"
    b.write_text(json.dumps({n: [1] for n in GEMM_PARAMS}))
    code, out, _ = run(capsys, "calibrate", "--hw", loose_hw_file, "--bounds", b, "--samples", 100,
                       "--out", tmp_path / "s.json", "--report", tmp_path / "r.json")
    assert code == 0
    assert "100.0%" in out and out.count("100.0%") == 2
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["acceptance"] == {"categorical": 1.0, "uniform": 1.0}


def test_calibrate_default_space(tmp_path, capsys):
    code, out, _ = run(capsys, "calibrate", "--out", tmp_path / "s.json", "--report", tmp_path / "r.json")
    assert code == 0 and "Categorical" in out and "Uniform" in out
    acc = json.loads((tmp_path / "r.json").read_text())["acceptance"]
    assert acc["categorical"] > acc["uniform"]


def test_missing_hw_file_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "hw.json"
    code, _, err = run(capsys, "calibrate", "--hw", missing, "--out", tmp_path / "s.json")
    assert code == 2 and str(missing) in err
    assert not (tmp_path / "s.json").exists()


def test_usage_errors_leave_no_artifacts(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--dataset", tmp_path / "nope.csv", "--out", tmp_path / "m.json")
    assert code == 2 and "generate" in err
    bad = tmp_path / "b.json"
    bad.write_text(json.dumps({"m_s": [3]}))
    code, _, _ = run(capsys, "generate", "--samples", 10, "--bounds", bad, "--out", tmp_path / "d.csv")
    assert code == 2
    code, _, err = run(capsys, "infer", "--shape", "8,8,8", "--out", tmp_path / "r.json")
    assert code == 2 and "train" in err
    code, _, _ = run(capsys, "infer", "--shape", "8,8", "--model", tmp_path / "x.json")
    assert code == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["b.json"]


def test_argparse_usage_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--backend", "gpu"])
    assert exc.value.code == 2


def test_runtime_failure_exit_code(tmp_path, capsys, trained):
    b = tmp_path / "b.json"
    b.write_text(json.dumps({**default_bounds("gemm"), "m_s": [8], "m_l": [4]}))
    code, _, err = run(capsys, "infer", "--shape", "64,64,64", "--model", trained / "m.json", "--bounds", b, "--no-cache")
    assert code == 1 and "no legal tuning" in err


def test_generate_and_train_reproducible(tmp_path, capsys, trained):
    code, _, _ = run(capsys, "generate", "--samples", 4000, "--seed", 1, "--out", tmp_path / "d.csv")
    assert code == 0
    assert (tmp_path / "d.csv").read_bytes() == (trained / "d.csv").read_bytes()
    code, _, _ = run(capsys, "train", "--dataset", tmp_path / "d.csv", "--epochs", 30, "--out", tmp_path / "m.json")
    assert code == 0
    assert (tmp_path / "m.json").read_bytes() == (trained / "m.json").read_bytes()


def test_train_rejects_tiny_dataset(tmp_path, capsys):
    assert main(["generate", "--samples", "50", "--out", str(tmp_path / "d.csv")]) == 0
    code, _, err = run(capsys, "train", "--dataset", tmp_path / "d.csv", "--out", tmp_path / "m.json")
    assert code == 2 and "generate more samples" in err
    assert not (tmp_path / "m.json").exists()


def test_infer_warm_cache(tmp_path, capsys, trained):
    args = ["infer", "--shape", "512,512,512", "--trans-b", "--model", trained / "m.json",
            "--cache-dir", tmp_path / "cache", "--report", tmp_path / "r1.json"]
    code, out1, _ = run(capsys, *args)
    assert code == 0 and "legal tunings ranked" in out1
    args[-1] = tmp_path / "r2.json"
    t0 = time.perf_counter()
    code, out2, _ = run(capsys, *args)
    assert code == 0 and "cache hit" in out2 and time.perf_counter() - t0 < 1.0
    r1 = json.loads((tmp_path / "r1.json").read_text())
    r2 = json.loads((tmp_path / "r2.json").read_text())
    assert r1["tuning"] == r2["tuning"] and r2["cached"] is True


def test_infer_output_byte_identical(tmp_path, capsys, trained):
    for name in ("a.json", "b.json"):
        code, _, _ = run(capsys, "infer", "--shape", "2560,16,2560", "--trans-a", "--model", trained / "m.json",
                         "--no-cache", "--out", tmp_path / name)
        assert code == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_infer_rejects_conv_shape_for_gemm_model(tmp_path, capsys, trained):
    code, _, err = run(capsys, "infer", "--kind", "conv", "--shape", "1,4,4,2,2,3,3", "--model", trained / "m.json")
    assert code == 2 and "gemm-v1" in err


def test_bench_ica_splits_reduction(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--only", "ICA (32)", "--out", tmp_path / "b.json")
    assert code == 0 and "ICA (32)" in out and "k_g" in out
    row = json.loads((tmp_path / "b.json").read_text())["results"][0]
    assert row["tuning"]["k_g"] > 1 or row["tuning"]["k_l"] > 1


def test_bench_with_model_and_conv(tmp_path, capsys, trained):
    code, out, _ = run(capsys, "bench", "--model", trained / "m.json", "--only", "LINPACK (512),LAPACK (896)")
    assert code == 0 and "LAPACK (896)" in out
    code, out, _ = run(capsys, "bench", "--kind", "conv", "--only", "Conv4")
    assert code == 0 and "Conv4" in out and "c_g" in out
    code, _, err = run(capsys, "bench", "--backend", "cpu", "--only", "Conv4")
    assert code == 2


def test_report(tmp_path, capsys, trained):
    code, out, _ = run(capsys, "report", "--dataset", trained / "d.csv", "--model", trained / "m.json",
                       "--report", tmp_path / "r.json")
    assert code == 0 and "4000 gemm samples" in out and "[32, 64, 32]" in out
    assert json.loads((tmp_path / "r.json").read_text())["dataset"]["samples"] == 4000
    code, _, _ = run(capsys, "report")
    assert code == 2


def test_full_pipeline_20k_under_15_minutes(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["calibrate", "--out", str(tmp_path / "s.json")]) == 0
    assert main(["generate", "--sampler", str(tmp_path / "s.json"), "--samples", "20000", "--out", str(tmp_path / "d.csv")]) == 0
    assert main(["train", "--dataset", str(tmp_path / "d.csv"), "--out", str(tmp_path / "m.json")]) == 0
    assert main(["infer", "--shape", "1024,1024,1024", "--trans-b", "--model", str(tmp_path / "m.json"), "--no-cache"]) == 0
    assert main(["bench", "--model", str(tmp_path / "m.json"), "--only", "ICA (64),DeepBench-F (16)"]) == 0
    assert time.perf_counter() - t0 < 15 * 60


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "inputtune", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("calibrate", "generate", "train", "infer", "bench", "report"):
        assert sub in proc.stdout
