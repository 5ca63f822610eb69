import csv
import json
import os
import shutil

import numpy as np
import pytest

from evmaf import cli, pipeline
from evmaf.manifest import load_manifest
from evmaf.pool import builtin_pool_spec
from evmaf.synthetic import generate_database

LEVELS = {"blur": (0.6, 2.0), "noise": (0.01, 0.05), "resample": (0.5,)}


class Mini:
    def __init__(self, root):
        self.root = root
        self.a = generate_database(root / "a", "mini-a", [0, 1], frames=2, levels=LEVELS)
        self.b = generate_database(root / "b", "mini-b", [2, 3], frames=2, levels=LEVELS,
                                   mos_scale=(1, 5))
        self.cache = str(root / "cache")
        self.model = str(root / "model.json")

    def path(self, *parts):
        return os.path.join(str(self.root), *parts)


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    m = Mini(tmp_path_factory.mktemp("mini"))
    assert cli.main(["extract", m.a, m.b, "--cache", m.cache]) == 0
    assert cli.main(["train", m.a, m.b, "--cache", m.cache, "--model", m.model]) == 0
    return m


def _predict_args(mini, test="src00_blur1.yuv", **kw):
    args = ["predict", "--model", str(kw.pop("model", mini.model)),
            "--ref", mini.path("a", "src00.y4m"), "--test", mini.path("a", test),
            "--width", "128", "--height", "128", "--frames", "2"]
    for k, v in kw.items():
        args += [f"--{k.replace('_', '-')}", str(v)]
    return args


class TestExtract:
    def test_cache_rows_match_frames(self, mini):
        man = load_manifest(mini.a)
        total = 0
        for rec in man.sequences:
            ft = pipeline.load_frame_table(mini.cache, man.database, rec)
            assert ft.values.shape[0] == rec.test.spec.frame_count
            total += ft.values.shape[0]
        assert total == sum(r.test.spec.frame_count for r in man.sequences) == 24

    def test_second_run_recomputes_nothing(self, mini, capsys):
        res = pipeline.extract_database(load_manifest(mini.a), builtin_pool_spec("full"),
                                        mini.cache, 0.3)
        assert res.frames_recomputed == 0 and res.frames_cached == 24
        assert cli.main(["extract", mini.a, "--cache", mini.cache]) == 0
        assert "0 frames recomputed, 24 cached, 0 failed" in capsys.readouterr().out

    def test_corrupt_file_isolated(self, mini, tmp_path, capsys):
        shutil.copytree(mini.path("a"), tmp_path / "a")
        bad = tmp_path / "a" / "src01_noise3.yuv"
        bad.write_bytes(bad.read_bytes()[:-100])
        cache = str(tmp_path / "cache")
        assert cli.main(["extract", str(tmp_path / "a" / "mini-a.json"), "--cache", cache]) == 2
        captured = capsys.readouterr()
        assert "22 frames recomputed" in captured.out and "1 failed" in captured.out
        assert "src01_noise3" in captured.err
        assert len([f for f in os.listdir(os.path.join(cache, "mini-a"))
                    if f.endswith(".csv")]) == 11

    def test_changed_media_invalidates_one_sequence(self, mini, tmp_path):
        shutil.copytree(mini.path("a"), tmp_path / "a")
        shutil.copytree(mini.cache, tmp_path / "cache")
        f = tmp_path / "a" / "src00_blur1.yuv"
        data = bytearray(f.read_bytes())
        data[0] ^= 1
        f.write_bytes(bytes(data))
        res = pipeline.extract_database(load_manifest(tmp_path / "a" / "mini-a.json"),
                                        builtin_pool_spec("full"), tmp_path / "cache", 0.3)
        assert res.sequences_recomputed == 1 and res.frames_recomputed == 2

    def test_parallel_matches_serial(self, mini, tmp_path):
        pipeline.extract_database(load_manifest(mini.a), builtin_pool_spec("full"),
                                  tmp_path, 0.3, jobs=2)
        for name in ("src00_blur1.csv", "src01_resample5.csv"):
            with open(os.path.join(mini.cache, "mini-a", name)) as a, \
                    open(tmp_path / "mini-a" / name) as b:
                assert a.read() == b.read()


class TestTrain:
    def test_model_contents(self, mini):
        with open(mini.model) as fh:
            d = json.load(fh)
        assert d["beta"] == 0.5 and d["alpha"] == 0.3
        keys1 = d["model1"]["feature_keys"]
        assert keys1[:6] == ["E-ADM", "TI-Y-S3", "VIF-Y-S1", "VIF-Y-S2", "VIF-Y-S3", "VIF-Y-S4"]
        assert d["model2"]["feature_keys"]

    def test_retrain_bit_identical(self, mini, tmp_path):
        again = str(tmp_path / "m.json")
        assert cli.main(["train", mini.a, mini.b, "--cache", mini.cache, "--model", again]) == 0
        with open(mini.model, "rb") as a, open(again, "rb") as b:
            assert a.read() == b.read()

    def test_missing_cache_names_extract(self, mini, tmp_path, capsys):
        code = cli.main(["train", mini.a, mini.b, "--cache", str(tmp_path / "empty"),
                         "--model", str(tmp_path / "m.json")])
        assert code == 2
        assert "evmaf extract" in capsys.readouterr().err

    def test_tuned_beta_on_grid(self, mini, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"beta": "tune", "grid_step": 0.25}))
        out = str(tmp_path / "m.json")
        assert cli.main(["train", mini.a, mini.b, "--cache", mini.cache, "--model", out,
                         "--config", str(cfg)]) == 0
        with open(out) as fh:
            assert json.load(fh)["beta"] in (0.0, 0.25, 0.5, 0.75, 1.0)

    def test_unknown_config_key(self, mini, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"betta": 0.4}))
        assert cli.main(["train", mini.a, mini.b, "--cache", mini.cache, "--model",
                         str(tmp_path / "m.json"), "--config", str(cfg)]) == 1


class TestPredict:
    def test_identity_scores_high(self, mini, capsys):
        assert cli.main(_predict_args(mini, test="../a/src00.y4m")) == 0
        out = capsys.readouterr().out
        assert float(out.split()[0][2:]) >= 95.0

    def test_csv_rows_and_determinism(self, mini, tmp_path):
        paths = [tmp_path / "p1.csv", tmp_path / "p2.csv"]
        for p in paths:
            assert cli.main(_predict_args(mini, out=p)) == 0
        text = paths[0].read_text()
        assert text == paths[1].read_text()
        lines = text.splitlines()
        assert lines[0].startswith("# config_hash=")
        rows = list(csv.DictReader(lines[1:]))
        assert len(rows) == 2
        for r in rows:
            q, m1, m2 = float(r["Q"]), float(r["M1"]), float(r["M2"])
            assert q == pytest.approx(0.5 * m1 + 0.5 * m2, abs=1e-9)

    def test_resampled_test(self, mini, capsys):
        args = _predict_args(mini, test="src00_resample5.yuv", test_width=64, test_height=64)
        assert cli.main(args) == 0
        assert "frames=2" in capsys.readouterr().out

    def test_wrong_size_is_data_error(self, mini):
        args = _predict_args(mini, test="src00_resample5.yuv")
        assert cli.main(args) == 2

    def test_schema_mismatch_refused(self, mini, tmp_path, capsys):
        with open(mini.model) as fh:
            d = json.load(fh)
        d["schema_version"] = 7
        bad = tmp_path / "m.json"
        bad.write_text(json.dumps(d))
        assert cli.main(_predict_args(mini, model=bad)) == 1
        assert "7" in capsys.readouterr().err


class TestEvaluate:
    def test_report_files_and_anchor(self, mini, tmp_path):
        out = tmp_path / "ev"
        assert cli.main(["evaluate", mini.b, "--model", mini.model, "--cache", mini.cache,
                         "--out-dir", str(out)]) == 0
        assert (out / "report.txt").read_text().startswith("# config_hash=")
        with open(out / "report.csv") as fh:
            rows = {r["metric"]: r for r in csv.DictReader(fh)}
        assert set(rows) >= {"model", "M1", "M2", "PSNR-Y-S1", "E-ADM"}
        assert rows["PSNR-Y-S1"]["mini-b_ftest"] == "0"
        assert float(rows["model"]["overall"]) > 0.8
        assert (out / "pairs_model.csv").exists()

    def test_refuses_database_without_mos(self, mini, tmp_path, capsys):
        with open(mini.b) as fh:
            d = json.load(fh)
        for s in d["sequences"]:
            s.pop("mos")
        nomos = os.path.join(os.path.dirname(mini.b), "nomos.json")
        d["database"] = "mini-b"
        with open(nomos, "w") as fh:
            json.dump(d, fh)
        try:
            code = cli.main(["evaluate", mini.a, nomos, "--model", mini.model, "--cache",
                             mini.cache, "--out-dir", str(tmp_path)])
        finally:
            os.remove(nomos)
        assert code == 2
        assert "refused" in capsys.readouterr().err
        assert "mini-b" not in (tmp_path / "report.txt").read_text()

    def test_compare_pairs(self, mini, tmp_path, capsys):
        out = tmp_path / "ev"
        cli.main(["evaluate", mini.b, "--model", mini.model, "--cache", mini.cache,
                  "--out-dir", str(out)])
        capsys.readouterr()
        assert cli.main(["compare-pairs", str(out / "pairs_model.csv"),
                         str(out / "pairs_PSNR-Y-S1.csv")]) == 0
        assert "p=" in capsys.readouterr().out

    def test_compare_pairs_length_mismatch(self, tmp_path):
        for name, n in (("a.csv", 2), ("b.csv", 3)):
            rows = ["database,mos_diff,metric_diff"] + ["d,1.0,0.5"] * n
            (tmp_path / name).write_text("\n".join(rows) + "\n")
        assert cli.main(["compare-pairs", str(tmp_path / "a.csv"),
                         str(tmp_path / "b.csv")]) == 2


def test_usage_errors_exit_one():
    for argv in ([], ["bogus"], ["extract"]):
        with pytest.raises(SystemExit) as info:
            cli.main(argv)
        assert info.value.code == 1


def test_config_validation(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"beta": 2}))
    with pytest.raises(Exception, match="beta"):
        pipeline.load_config(cfg)
    assert pipeline.extraction_alphas(pipeline.load_config(overrides={"alpha": "tune"}))[1] \
        == (0.1, 0.2, 0.3, 0.5, 1.0)
    assert np.isclose(pipeline.load_config()["alpha"], 0.3)
