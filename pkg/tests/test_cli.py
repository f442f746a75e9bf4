import json
import os

import numpy as np
import pytest

from elfuse.cli import (
    EXIT_INPUT,
    EXIT_OK,
    SCHEMAS,
    format_table_csv,
    main,
    parse_table_csv,
    read_predictions_csv,
    read_primary_csv,
)
from elfuse.errors import ValidationError


TOY_SCENARIO = {
    "n": 200, "N": 800, "p": 5, "n_classes": 3,
    "theta_true": [0.2, 1, -1, 1, -1, -0.1, -1, 1, 1, 1],
    "phi_free_true": [0.35, -0.25],
    "groups": [[1, 3], [2]],
    "predictor": "oracle",
    "tau": 0.0002, "B": 16, "reps": 2, "seed": 5,
}


def write_scenario(tmp_path, **overrides):
    doc = dict(TOY_SCENARIO)
    doc.update(overrides)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc))
    return str(path)


class TestSchemas:
    def test_print_schema(self, capsys):
        for name in SCHEMAS:
            assert main(["--print-schema", name]) == EXIT_OK
            parsed = json.loads(capsys.readouterr().out)
            assert parsed["title"]

    def test_no_command_shows_help(self, capsys):
        assert main([]) == EXIT_INPUT


class TestSimulate:
    def test_deterministic_output(self, tmp_path):
        scen = write_scenario(tmp_path)
        out1, out2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        assert main(["simulate", "--scenario", scen, "--out", out1]) == EXIT_OK
        assert main(["simulate", "--scenario", scen, "--out", out2]) == EXIT_OK
        assert open(out1, "rb").read() == open(out2, "rb").read()

    def test_deterministic_across_thread_env(self, tmp_path, monkeypatch):
        scen = write_scenario(tmp_path)
        out1, out2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        monkeypatch.setenv("ELFUSE_THREADS", "1")
        assert main(["simulate", "--scenario", scen, "--out", out1]) == EXIT_OK
        monkeypatch.setenv("ELFUSE_THREADS", "2")
        assert main(["simulate", "--scenario", scen, "--out", out2]) == EXIT_OK
        assert open(out1, "rb").read() == open(out2, "rb").read()

    def test_csv_roundtrip(self, tmp_path):
        scen = write_scenario(tmp_path)
        out = str(tmp_path / "t.csv")
        main(["simulate", "--scenario", scen, "--out", out])
        text = open(out).read()
        rows = parse_table_csv(text)
        # re-serialize through the same writer
        import csv
        import io

        from elfuse.cli import TABLE_COLUMNS

        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({
                k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()
            })
        assert buf.getvalue() == text

    def test_single_replicate_cp_binary(self, tmp_path):
        scen = write_scenario(tmp_path, reps=1)
        out = str(tmp_path / "one.csv")
        assert main(["simulate", "--scenario", scen, "--out", out]) == EXIT_OK
        rows = [r for r in parse_table_csv(open(out).read()) if r["record"] == "coef"]
        assert rows and all(r["cp"] in (0.0, 1.0) for r in rows)

    def test_rejects_unknown_keys(self, tmp_path):
        scen = write_scenario(tmp_path, bogus_key=1)
        assert main(["simulate", "--scenario", scen]) == EXIT_INPUT

    def test_missing_file(self):
        assert main(["simulate", "--scenario", "/nonexistent.json"]) == EXIT_INPUT


class TestEmitAndFit:
    @pytest.fixture(scope="class")
    def emitted(self, tmp_path_factory):
        tmp_path = tmp_path_factory.mktemp("emit")
        scen = write_scenario(tmp_path)
        data_dir = str(tmp_path / "data")
        assert main(["simulate", "--scenario", scen, "--emit-data", data_dir]) == EXIT_OK
        return tmp_path, data_dir

    def test_emitted_files_parse(self, emitted):
        _, data_dir = emitted
        labels, design = read_primary_csv(os.path.join(data_dir, "primary.csv"))
        assert design.shape == (200, 5) and np.all(design[:, 0] == 1.0)
        q = read_predictions_csv(os.path.join(data_dir, "predictions.csv"))
        assert q.shape == (200, 1)
        assert q.min() >= 0.0 and q.max() <= 1.0
        ext = open(os.path.join(data_dir, "external.csv")).readline().strip()
        assert ext.startswith("u,z1")

    def test_fit_roundtrip(self, emitted, capsys):
        tmp_path, data_dir = emitted
        report_path = str(tmp_path / "report.json")
        code = main([
            "fit",
            "--primary", os.path.join(data_dir, "primary.csv"),
            "--predictions", os.path.join(data_dir, "predictions.csv"),
            "--config", os.path.join(data_dir, "fit_config.json"),
            "--bootstrap", "8",
            "--out", report_path,
        ])
        assert code == EXIT_OK
        report = json.loads(open(report_path).read())
        est = np.asarray(report["fmle"]["theta_hat"])
        lo = np.asarray(report["fmle"]["ci_lower"])
        hi = np.asarray(report["fmle"]["ci_upper"])
        assert np.all(lo <= est) and np.all(est <= hi)
        assert report["config_hash"]
        out = capsys.readouterr().out
        assert "coordinate" in out and "FMLE" in out

    def test_full_transport_exact_predictions(self, tmp_path, capsys):
        # predictions equal to the fitted grouped probabilities: the fused
        # estimate coincides with the MLE
        from elfuse import PrimaryDataset, fit_mle, probs_matrix
        from elfuse.simengine import ScenarioConfig, _gen_features, gen_labels

        cfg = ScenarioConfig(**{**TOY_SCENARIO,
                                "theta_true": tuple(TOY_SCENARIO["theta_true"]),
                                "phi_free_true": tuple(TOY_SCENARIO["phi_free_true"]),
                                "groups": ((1, 3), (2,)), "n": 120})
        rng = np.random.default_rng(3)
        X = _gen_features(cfg, "primary", 120, rng)
        y = gen_labels(X, np.asarray(cfg.theta_true), rng)
        ds = PrimaryDataset(labels=y, design=X, z_columns=cfg.z_columns, n_classes=3)
        mle = fit_mle(ds)
        q = probs_matrix(X, mle.theta_hat) @ cfg.cmap.indicator.T

        primary = tmp_path / "primary.csv"
        lines = ["label," + ",".join(f"x{j}" for j in range(1, 5))]
        for i in range(120):
            lines.append(f"{y[i]}," + ",".join(repr(float(v)) for v in X[i, 1:]))
        primary.write_text("\n".join(lines) + "\n")
        preds = tmp_path / "preds.csv"
        preds.write_text("q1\n" + "\n".join(repr(float(v)) for v in q[:, 0]) + "\n")
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "model": {"n_classes": 3, "groups": [[1, 3], [2]],
                      "shared_index": "all"},
            "solver": {"tau": 0.1},
            "inference": {"B": 4, "se_method": "hessian"},
            "seed": 0,
        }))
        report = tmp_path / "rep.json"
        code = main(["fit", "--primary", str(primary), "--predictions", str(preds),
                     "--config", str(config), "--out", str(report)])
        assert code == EXIT_OK
        doc = json.loads(report.read_text())
        fmle = np.asarray(doc["fmle"]["theta_hat"])
        np.testing.assert_allclose(fmle, mle.theta_hat, atol=1e-6)

    def test_malformed_cell_cites_location(self, tmp_path, capsys):
        primary = tmp_path / "bad.csv"
        primary.write_text("label,x1\n1,0.5\n2,oops\n")
        preds = tmp_path / "preds.csv"
        preds.write_text("q1\n0.5\n0.5\n")
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "model": {"n_classes": 2, "groups": [[1], [2]], "shared_index": "all"},
        }))
        code = main(["fit", "--primary", str(primary), "--predictions", str(preds),
                     "--config", str(config)])
        assert code == EXIT_INPUT
        err = capsys.readouterr().err
        assert "row 3" in err and "column x1" in err

    def test_row_count_mismatch(self, tmp_path, capsys):
        primary = tmp_path / "p.csv"
        primary.write_text("label,x1\n1,0.5\n2,1.5\n")
        preds = tmp_path / "q.csv"
        preds.write_text("q1\n0.5\n")
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "model": {"n_classes": 2, "groups": [[1], [2]], "shared_index": "all"},
        }))
        code = main(["fit", "--primary", str(primary), "--predictions", str(preds),
                     "--config", str(config)])
        assert code == EXIT_INPUT
        assert "mismatch" in capsys.readouterr().err


class TestCheckCommand:
    def test_identities_suite(self, capsys):
        assert main(["check", "--suite", "identities"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out

    def test_efficiency_suite(self, capsys):
        assert main(["check", "--suite", "efficiency"]) == EXIT_OK

    def test_mar_suite_with_config(self, tmp_path, capsys):
        cfg = tmp_path / "check.json"
        cfg.write_text(json.dumps({"seed": 7, "draws": 20000}))
        assert main(["check", "--suite", "mar", "--config", str(cfg)]) == EXIT_OK


class TestParsers:
    def test_primary_header_validation(self, tmp_path):
        bad = tmp_path / "h.csv"
        bad.write_text("label,foo\n1,2\n")
        with pytest.raises(ValidationError):
            read_primary_csv(str(bad))

    def test_predictions_header_validation(self, tmp_path):
        bad = tmp_path / "q.csv"
        bad.write_text("p1\n0.5\n")
        with pytest.raises(ValidationError):
            read_predictions_csv(str(bad))
