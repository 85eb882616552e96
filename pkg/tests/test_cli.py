import dataclasses
import json

import pytest

from csrep import container
from csrep.cli import EXIT_FAIL, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from csrep.graph import validate
from csrep.reptdnn import build_rep_tdnn, save_config

from conftest import SMALL


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.json"
    save_config(dataclasses.replace(SMALL, dtype="float64"), path)
    return path


@pytest.fixture
def small_model(tmp_path, small_cfg, capsys):
    out = tmp_path / "m.csrp"
    assert run(capsys, "build", "--config", small_cfg, "--out", out)[0] == EXIT_OK
    return out


class TestBuild:
    def test_default_config(self, tmp_path, capsys):
        out = tmp_path / "d.csrp"
        code, text, _ = run(capsys, "build", "--out", out)
        assert code == EXIT_OK
        assert kv(text)["diagnostics"] == "0"
        assert validate(container.load(out)) == []

    def test_same_seed_identical_files(self, tmp_path, small_cfg, capsys):
        a, b = tmp_path / "a.csrp", tmp_path / "b.csrp"
        run(capsys, "build", "--config", small_cfg, "--seed", 5, "--out", a)
        run(capsys, "build", "--config", small_cfg, "--seed", 5, "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_field(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"channels": 8, "branch_groups": 3}')
        code, _, err = run(capsys, "build", "--config", cfg, "--out", tmp_path / "x.csrp")
        assert code == EXIT_USAGE and "branch_groups" in err

    def test_parse_error_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{\n"channels": 8,\n}\n')
        code, _, err = run(capsys, "build", "--config", cfg, "--out", tmp_path / "x.csrp")
        assert code == EXIT_USAGE and "line 3" in err

    def test_missing_config(self, tmp_path, capsys):
        code, _, _ = run(capsys, "build", "--config", tmp_path / "nope.json", "--out", tmp_path / "x.csrp")
        assert code == EXIT_IO

    def test_json_format(self, tmp_path, small_cfg, capsys):
        code, text, _ = run(capsys, "build", "--config", small_cfg, "--out", tmp_path / "j.csrp", "--format", "json")
        assert code == EXIT_OK and json.loads(text)["diagnostics"] == 0


class TestTransform:
    def test_default_full(self, tmp_path, capsys):
        m, p = tmp_path / "m.csrp", tmp_path / "p.csrp"
        run(capsys, "build", "--out", m)
        code, text, _ = run(capsys, "transform", "--in", m, "--out", p, "--format", "json")
        assert code == EXIT_OK
        assert json.loads(text)["merged_groups"] == 16

    def test_stop_after_one_zero_deviation(self, small_model, tmp_path, capsys):
        code, text, _ = run(capsys, "transform", "--in", small_model, "--out", tmp_path / "s1.csrp",
                            "--stop-after", 1, "--self-check")
        assert code == EXIT_OK and float(kv(text)["max_deviation"]) == 0.0

    def test_self_check_reports_deviation(self, small_model, tmp_path, capsys):
        code, text, _ = run(capsys, "transform", "--in", small_model, "--out", tmp_path / "p.csrp", "--self-check")
        assert code == EXIT_OK and float(kv(text)["max_deviation"]) <= 1e-10

    def test_already_plain(self, small_model, tmp_path, capsys):
        p, q = tmp_path / "p.csrp", tmp_path / "q.csrp"
        run(capsys, "transform", "--in", small_model, "--out", p)
        code, text, _ = run(capsys, "transform", "--in", p, "--out", q)
        assert code == EXIT_OK and kv(text)["rewritten_chains"] == "0"
        assert p.read_bytes() == q.read_bytes()

    def test_training_mode_rejected(self, tmp_path, capsys):
        path = tmp_path / "t.csrp"
        container.save(dataclasses.replace(build_rep_tdnn(SMALL), training=True), path)
        code, _, err = run(capsys, "transform", "--in", path, "--out", tmp_path / "o.csrp")
        assert code == EXIT_IO and "training" in err

    def test_unreadable(self, tmp_path, capsys):
        code, _, _ = run(capsys, "transform", "--in", tmp_path / "none.csrp", "--out", tmp_path / "o.csrp")
        assert code == EXIT_IO

    def test_corrupt_container(self, tmp_path, capsys):
        path = tmp_path / "bad.csrp"
        path.write_bytes(b"NOPE" + bytes(20))
        code, _, err = run(capsys, "transform", "--in", path, "--out", tmp_path / "o.csrp")
        assert code == EXIT_IO and "bad magic" in err


class TestVerify:
    def test_self_is_exact(self, small_model, capsys):
        code, text, _ = run(capsys, "verify", small_model, small_model)
        assert code == EXIT_OK and float(kv(text)["max_abs_deviation"]) == 0.0

    def test_transformed_within_tol(self, small_model, tmp_path, capsys):
        p = tmp_path / "p.csrp"
        run(capsys, "transform", "--in", small_model, "--out", p)
        code, text, _ = run(capsys, "verify", small_model, p, "--tol", 1e-10)
        assert code == EXIT_OK and float(kv(text)["max_abs_deviation"]) <= 1e-10

    def test_different_seed_fails(self, small_model, small_cfg, tmp_path, capsys):
        other = tmp_path / "o.csrp"
        run(capsys, "build", "--config", small_cfg, "--seed", 9, "--out", other)
        code, text, _ = run(capsys, "verify", small_model, other)
        assert code == EXIT_FAIL and float(kv(text)["max_abs_deviation"]) > 0

    def test_interface_mismatch(self, small_model, tmp_path, capsys):
        other = tmp_path / "o.csrp"
        container.save(build_rep_tdnn(dataclasses.replace(SMALL, input_channels=5)), other)
        code, _, err = run(capsys, "verify", small_model, other)
        assert code == EXIT_USAGE and "interface" in err


class TestBench:
    def test_frames_processed(self, small_model, capsys):
        code, text, _ = run(capsys, "bench", small_model, "--batch", 2, "--frames", 40, "--warmup", 1, "--iters", 3)
        rec = kv(text)
        assert code == EXIT_OK
        assert int(rec["frames_processed"]) == 240
        assert float(rec["frames_per_second"]) == pytest.approx(240 / float(rec["wall_seconds"]))

    def test_bad_iters(self, small_model, capsys):
        assert run(capsys, "bench", small_model, "--iters", 0)[0] == EXIT_USAGE


class TestParams:
    def test_both_conventions(self, small_model, capsys):
        code, text, _ = run(capsys, "params", small_model, "--format", "json")
        rec = json.loads(text)
        assert code == EXIT_OK
        bd = rec["params_breakdown"]
        assert rec["params"] - rec["params_bn_affine_only"] == bd["batchnorm"] - bd["batchnorm_affine"]
        assert rec["flops"] == sum(rec["flops_breakdown"].values())
        assert "flop_convention" in rec


class TestEer:
    def test_scores(self, tmp_path, capsys):
        path = tmp_path / "s.txt"
        path.write_text("target 0.9\ntarget 0.8\ntarget 0.3\nnontarget 0.6\nnontarget 0.2\nnontarget 0.1\n")
        code, text, _ = run(capsys, "eer", path, "--p-target", 0.01)
        assert code == EXIT_OK
        assert float(kv(text)["eer"]) == pytest.approx(1 / 3)

    def test_malformed_line(self, tmp_path, capsys):
        path = tmp_path / "s.txt"
        path.write_text("target 0.9\nbogus\n")
        code, _, err = run(capsys, "eer", path)
        assert code == EXIT_USAGE and "line 2" in err

    def test_single_class(self, tmp_path, capsys):
        path = tmp_path / "s.txt"
        path.write_text("target 0.9\n")
        assert run(capsys, "eer", path)[0] == EXIT_USAGE

    def test_missing_file(self, tmp_path, capsys):
        assert run(capsys, "eer", tmp_path / "none.txt")[0] == EXIT_IO


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE
