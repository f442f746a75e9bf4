"""Command-line surface: fit on user data, run simulation scenarios,
run the verification suites, emit machine-readable reports.

File contracts:
  primary CSV      header ``label,x1,...,x{p-1}``; the intercept column is
                   implicit and prepended internally.
  predictions CSV  header ``q1,...,q{L-1}``; row i aligned with primary row i.
  config/scenario  JSON, schema-validated (--print-schema emits the schemas).

Exit codes: 0 success, 1 check-suite failure, 2 input validation,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import checks as checks_mod
from ._parallel import worker_count
from .elfusion import fit_fmle
from .errors import FusionError, ValidationError
from .inference import (
    bootstrap_se,
    efficiency_diagnostic,
    empirical_blocks,
    sigma_sandwich,
    wald_ci,
)
from .mnlogit import fit_mle
from .presets import PRESET_NAMES, preset_config, preset_dict
from .simengine import ScenarioConfig, gen_labels, run_replications, _gen_features, _make_predictor
from .types import (
    BasisSet,
    CoarseningMap,
    Constant,
    Coordinate,
    EstimateReport,
    ExternalPredictionSet,
    ParamLayout,
    PrimaryDataset,
    Spline,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3

_BASIS_ITEM_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"type": {"const": "constant"}},
            "required": ["type"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "type": {"const": "coordinate"},
                "index": {"type": "integer", "minimum": 1},
            },
            "required": ["type", "index"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "type": {"const": "spline"},
                "index": {"type": "integer", "minimum": 1},
                "quantiles": {
                    "type": "array",
                    "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "minItems": 1,
                },
            },
            "required": ["type", "index"],
            "additionalProperties": False,
        },
    ]
}

_SHARED_SCHEMA = {
    "oneOf": [
        {"enum": ["all", "slopes", "none"]},
        {"type": "array", "items": {"type": "integer", "minimum": 1}},
    ]
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "elfuse fit configuration",
    "type": "object",
    "properties": {
        "model": {
            "type": "object",
            "properties": {
                "n_classes": {"type": "integer", "minimum": 2},
                "groups": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    "minItems": 2,
                },
                "shared_index": _SHARED_SCHEMA,
                "A": {
                    "oneOf": [
                        {"const": "identity"},
                        {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                    ]
                },
                "z_columns": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "basis": {
                    "oneOf": [
                        {"const": "default"},
                        {"type": "array", "items": _BASIS_ITEM_SCHEMA, "minItems": 1},
                    ]
                },
            },
            "required": ["n_classes", "groups"],
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {
                "tau": {"type": "number", "minimum": 0},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "inference": {
            "type": "object",
            "properties": {
                "B": {"type": "integer", "minimum": 2},
                "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "se_method": {"enum": ["bootstrap", "hessian"]},
            },
            "additionalProperties": False,
        },
        "io": {
            "type": "object",
            "properties": {"out": {"type": "string"}},
            "additionalProperties": False,
        },
        "seed": {"type": "integer"},
    },
    "required": ["model"],
    "additionalProperties": False,
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "elfuse simulation scenario",
    "type": "object",
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "N": {"type": "integer", "minimum": 1},
        "p": {"type": "integer", "minimum": 2},
        "n_classes": {"type": "integer", "minimum": 2},
        "theta_true": {"type": "array", "items": {"type": "number"}},
        "phi_free_true": {"type": "array", "items": {"type": "number"}},
        "groups": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            "minItems": 2,
        },
        "shared": _SHARED_SCHEMA,
        "shift": {"enum": ["none", "mean", "variance", "mean_and_variance"]},
        "shift_mean": {"type": "array", "items": {"type": "number"}},
        "shift_variance": {"type": "number", "exclusiveMinimum": 0},
        "drop_column": {"type": ["integer", "null"], "minimum": 2},
        "correlation": {"type": "number"},
        "predictor": {"enum": ["knn", "oracle", "file"]},
        "knn_k": {"type": ["integer", "null"], "minimum": 1},
        "knn_method": {"enum": ["frequency", "local_linear", "local_quadratic"]},
        "predictor_path": {"type": ["string", "null"]},
        "basis": {
            "oneOf": [
                {"const": "default"},
                {"type": "array", "items": _BASIS_ITEM_SCHEMA, "minItems": 1},
            ]
        },
        "tau": {"type": "number", "minimum": 0},
        "B": {"type": "integer", "minimum": 2},
        "reps": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "eval_grid_size": {"type": "integer", "minimum": 1},
    },
    "required": ["n", "N", "p", "n_classes", "theta_true", "phi_free_true", "groups"],
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "elfuse estimate report",
    "type": "object",
    "properties": {
        "mle": {"$ref": "#/$defs/estimator"},
        "fmle": {"$ref": "#/$defs/estimator"},
        "ci_level": {"type": "number"},
        "diagnostics": {"type": "object"},
        "config_hash": {"type": "string"},
        "seed": {"type": ["integer", "null"]},
    },
    "required": ["mle", "fmle", "ci_level", "diagnostics", "config_hash"],
    "additionalProperties": False,
    "$defs": {
        "estimator": {
            "type": "object",
            "properties": {
                "theta_hat": {"type": "array", "items": {"type": "number"}},
                "phi_free_hat": {"type": "array", "items": {"type": "number"}},
                "lambda_hat": {"type": "array", "items": {"type": "number"}},
                "se": {"type": "array", "items": {"type": "number"}},
                "se_method": {"enum": ["hessian", "bootstrap"]},
                "ci_lower": {"type": "array", "items": {"type": "number"}},
                "ci_upper": {"type": "array", "items": {"type": "number"}},
            },
            "required": ["theta_hat", "se", "se_method", "ci_lower", "ci_upper"],
            "additionalProperties": False,
        }
    },
}

SCHEMAS = {
    "run_config": RUN_CONFIG_SCHEMA,
    "scenario": SCENARIO_SCHEMA,
    "report": REPORT_SCHEMA,
}

TABLE_COLUMNS = ("record", "coordinate", "truth", "method", "bias", "sd", "se", "cp", "mse")


def _schema_validate(instance, schema, what):
    import jsonschema

    try:
        jsonschema.validate(instance=instance, schema=schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"{what}: {exc.message} (at {path})", field=path) from None


def write_text_atomic(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".elfuse-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_primary_csv(path: str):
    """Parse the primary CSV into labels and an intercept-led design matrix."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file", field="primary") from None
        if not header or header[0] != "label":
            raise ValidationError(
                f"{path}: first column must be 'label', got {header[:1]}",
                field="primary",
            )
        expected = ["label"] + [f"x{i}" for i in range(1, len(header))]
        if header != expected:
            raise ValidationError(
                f"{path}: header must be {','.join(expected)}", field="primary"
            )
        labels, rows = [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}: row {rownum} has {len(row)} fields, expected {len(header)}",
                    field="primary",
                )
            try:
                labels.append(int(row[0]))
            except ValueError:
                raise ValidationError(
                    f"{path}: row {rownum}, column label: not an integer: {row[0]!r}",
                    field="primary",
                ) from None
            vals = []
            for col, cell in zip(header[1:], row[1:]):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValidationError(
                        f"{path}: row {rownum}, column {col}: not a number: {cell!r}",
                        field="primary",
                    ) from None
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no data rows", field="primary")
    feats = np.asarray(rows, dtype=float)
    design = np.concatenate([np.ones((feats.shape[0], 1)), feats], axis=1)
    return np.asarray(labels, dtype=np.int64), design


def read_predictions_csv(path: str, expected_cols: int = None) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file", field="predictions") from None
        expected = [f"q{i}" for i in range(1, len(header) + 1)]
        if header != expected:
            raise ValidationError(
                f"{path}: header must be q1..q{len(header)}", field="predictions"
            )
        if expected_cols is not None and len(header) != expected_cols:
            raise ValidationError(
                f"{path}: expected {expected_cols} prediction columns, found {len(header)}",
                field="predictions",
            )
        rows = []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}: row {rownum} has {len(row)} fields, expected {len(header)}",
                    field="predictions",
                )
            vals = []
            for col, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValidationError(
                        f"{path}: row {rownum}, column {col}: not a number: {cell!r}",
                        field="predictions",
                    ) from None
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no data rows", field="predictions")
    return np.asarray(rows, dtype=float)


def _build_basis(spec, z_columns) -> BasisSet:
    if spec in (None, "default"):
        return BasisSet.default(z_columns)
    items = []
    for d in spec:
        if d["type"] == "constant":
            items.append(Constant())
        elif d["type"] == "coordinate":
            items.append(Coordinate(d["index"]))
        else:
            items.append(Spline(d["index"], tuple(d.get("quantiles", (0.25, 0.5, 0.75)))))
    return BasisSet.build(items)


def _build_layout(shared, A, p, n_classes) -> ParamLayout:
    if shared in (None, "slopes"):
        base = ParamLayout.shared_slopes(p, n_classes)
    elif shared == "all":
        base = ParamLayout.full_transportability(p, n_classes)
    elif shared == "none":
        base = ParamLayout.disconnected(p, n_classes)
    else:
        base = ParamLayout(p=p, n_classes=n_classes, shared_index=tuple(shared))
    if A in (None, "identity"):
        return base
    return ParamLayout(
        p=p, n_classes=n_classes, shared_index=base.shared_index, A=np.asarray(A, float)
    )


def _config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _coordinate_names(p, n_classes):
    return [f"theta_{k}_{j}" for k in range(1, n_classes) for j in range(1, p + 1)]


def cmd_fit(args) -> int:
    for path in (args.primary, args.predictions, args.config):
        if not os.path.exists(path):
            raise ValidationError(f"file not found: {path}", field="io")
    with open(args.config) as fh:
        config = json.load(fh)
    _schema_validate(config, RUN_CONFIG_SCHEMA, "config")
    model = config["model"]
    solver = config.get("solver", {})
    inference = config.get("inference", {})
    seed = config.get("seed", 0)

    labels, design = read_primary_csv(args.primary)
    n, p = design.shape
    K = model["n_classes"]
    groups = tuple(tuple(g) for g in model["groups"])
    cmap = CoarseningMap(groups=groups, n_classes=K)
    q = read_predictions_csv(args.predictions, cmap.n_groups - 1)
    if q.shape[0] != n:
        raise ValidationError(
            f"row-count mismatch: primary has {n} rows, predictions {q.shape[0]}",
            field="predictions",
        )
    z_columns = tuple(model.get("z_columns") or range(1, p + 1))
    dataset = PrimaryDataset(labels=labels, design=design, z_columns=z_columns, n_classes=K)
    predictions = ExternalPredictionSet(values=q)
    layout = _build_layout(model.get("shared_index"), model.get("A"), p, K)
    basis = _build_basis(model.get("basis"), z_columns)

    tau = solver.get("tau", 0.1)
    tol = solver.get("tol", 1e-8)
    max_iter = solver.get("max_iter", 200)
    B = args.bootstrap if args.bootstrap is not None else inference.get("B", 200)
    level = inference.get("level", 0.95)
    se_method = inference.get("se_method", "bootstrap")

    mle = fit_mle(dataset, tol=tol, max_iter=max_iter)
    fmle = fit_fmle(
        dataset, predictions, cmap, basis, layout,
        tau=tau, tol=tol, max_outer=max_iter,
    )
    se_mle = np.sqrt(np.diag(np.linalg.inv(mle.info)) / n)
    nl = (cmap.n_groups - 1) * basis.size
    blocks = empirical_blocks(fmle, dataset, predictions, cmap, basis, layout)
    if se_method == "bootstrap":
        boot = bootstrap_se(
            dataset, predictions, cmap, basis, layout,
            B=B, seed=seed, tau=tau, start=fmle.params,
        )
        se_fmle = boot.se[nl : nl + layout.dim]
    else:
        _, sigma_theta = sigma_sandwich(blocks)
        se_fmle = np.sqrt(np.clip(np.diag(sigma_theta), 0.0, None) / n)
    diag = efficiency_diagnostic(blocks, layout, basis, cmap)
    ci_mle = wald_ci(mle.theta_hat, se_mle, level)
    ci_fmle = wald_ci(fmle.params.theta, se_fmle, level)

    chash = _config_hash(config)
    report = EstimateReport(
        theta_hat=fmle.params.theta,
        phi_free_hat=fmle.params.phi_free,
        lambda_hat=fmle.params.lam,
        se=se_fmle,
        se_method=se_method,
        ci_lower=ci_fmle.lower,
        ci_upper=ci_fmle.upper,
        ci_level=level,
        diagnostics={
            "mle_iterations": mle.iterations,
            "fmle_outer_iterations": fmle.outer_iterations,
            "fmle_inner_iterations": fmle.inner_iterations,
            "fmle_gradient_norm": fmle.gradient_norm,
            "efficiency": {
                "necessary_holds": diag.necessary_holds,
                "sufficient_holds": diag.sufficient_holds,
                "colspace_residual": diag.colspace_residual,
                "gain_expected": diag.gain_expected,
            },
        },
        config_hash=chash,
        seed=seed,
    )
    doc = {
        "mle": {
            "theta_hat": mle.theta_hat.tolist(),
            "se": se_mle.tolist(),
            "se_method": "hessian",
            "ci_lower": ci_mle.lower.tolist(),
            "ci_upper": ci_mle.upper.tolist(),
        },
        "fmle": {
            "theta_hat": report.theta_hat.tolist(),
            "phi_free_hat": report.phi_free_hat.tolist(),
            "lambda_hat": report.lambda_hat.tolist(),
            "se": report.se.tolist(),
            "se_method": report.se_method,
            "ci_lower": report.ci_lower.tolist(),
            "ci_upper": report.ci_upper.tolist(),
        },
        "ci_level": level,
        "diagnostics": report.diagnostics,
        "config_hash": chash,
        "seed": seed,
    }
    _schema_validate(doc, REPORT_SCHEMA, "report")
    out = args.out or config.get("io", {}).get("out")
    if out:
        write_text_atomic(out, json.dumps(doc, indent=2) + "\n")

    names = _coordinate_names(p, K)
    width = max(len(s) for s in names)
    print(f"{'coordinate':<{width}}  {'MLE':>10} {'(se)':>9}  {'FMLE':>10} {'(se)':>9}  "
          f"{int(level*100)}% CI (FMLE)")
    for i, name in enumerate(names):
        print(
            f"{name:<{width}}  {mle.theta_hat[i]:>10.4f} {se_mle[i]:>9.4f}  "
            f"{fmle.params.theta[i]:>10.4f} {se_fmle[i]:>9.4f}  "
            f"[{ci_fmle.lower[i]:.4f}, {ci_fmle.upper[i]:.4f}]"
        )
    print(f"gain expected: {diag.gain_expected} "
          f"(colspace residual {diag.colspace_residual:.2e})")
    return EXIT_OK


def format_table_csv(table) -> str:
    """Deterministic CSV serialization of a ReplicationTable."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in table.to_rows():
        writer.writerow({
            k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()
        })
    return buf.getvalue()


def parse_table_csv(text: str):
    """Parse a serialized table back into row dicts (floats restored)."""
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for row in reader:
        parsed = {}
        for key in TABLE_COLUMNS:
            val = row[key]
            if key in ("record", "coordinate", "method"):
                parsed[key] = val
            else:
                parsed[key] = float(val) if val != "" else ""
        rows.append(parsed)
    return rows


def _scenario_from_args(args) -> ScenarioConfig:
    if args.preset:
        cfg = preset_dict(args.preset)
    else:
        if not os.path.exists(args.scenario):
            raise ValidationError(f"file not found: {args.scenario}", field="scenario")
        with open(args.scenario) as fh:
            cfg = json.load(fh)
        _schema_validate(cfg, SCENARIO_SCHEMA, "scenario")
    if args.reps is not None:
        cfg["reps"] = args.reps
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["theta_true"] = tuple(cfg["theta_true"])
    cfg["phi_free_true"] = tuple(cfg["phi_free_true"])
    cfg["groups"] = tuple(tuple(g) for g in cfg["groups"])
    if isinstance(cfg.get("shared"), list):
        cfg["shared"] = tuple(cfg["shared"])
    if cfg.get("shift_mean") is not None:
        cfg["shift_mean"] = tuple(cfg["shift_mean"])
    return ScenarioConfig(**cfg)


def _emit_data(config: ScenarioConfig, directory: str):
    """Write replicate-0 primary, predictions, and external CSVs plus a
    matching fit-config JSON."""
    os.makedirs(directory, exist_ok=True)
    ss = np.random.SeedSequence((config.seed, 0))
    rng_primary, rng_labels, rng_external = [np.random.default_rng(s) for s in ss.spawn(3)]
    X = _gen_features(config, "primary", config.n, rng_primary)
    y = gen_labels(X, np.asarray(config.theta_true), rng_labels)
    dataset = PrimaryDataset(
        labels=y, design=X, z_columns=config.z_columns, n_classes=config.n_classes
    )
    # regenerate the external sample with the same stream the predictor uses
    Xe = _gen_features(config, "external", config.N, rng_external)
    ye = gen_labels(Xe, config.phi_full, rng_external)
    ind_full = config.cmap.full_indicator
    group_of = np.zeros(config.n_classes, dtype=np.int64)
    for l in range(ind_full.shape[0]):
        group_of[ind_full[l] > 0] = l + 1
    Ue = group_of[ye - 1]
    observed = Ue > 0
    zcols = [c - 1 for c in config.z_columns]

    from .simengine import train_knn_predictor

    predictor = train_knn_predictor(
        Ue[observed], Xe[np.ix_(np.flatnonzero(observed), zcols)],
        config.knn_neighbors, config.cmap.n_groups, method=config.knn_method,
    ) if config.predictor == "knn" else _make_predictor(config, rng_external)
    q = np.clip(predictor.predict(dataset.z_matrix), 0.0, 1.0)

    p = config.p
    lines = ["label," + ",".join(f"x{j}" for j in range(1, p))]
    for i in range(config.n):
        lines.append(str(int(y[i])) + "," + ",".join(repr(float(v)) for v in X[i, 1:]))
    write_text_atomic(os.path.join(directory, "primary.csv"), "\n".join(lines) + "\n")

    L1 = config.cmap.n_groups - 1
    lines = [",".join(f"q{j}" for j in range(1, L1 + 1))]
    for i in range(config.n):
        lines.append(",".join(repr(float(v)) for v in q[i]))
    write_text_atomic(os.path.join(directory, "predictions.csv"), "\n".join(lines) + "\n")

    nz = len(zcols) - 1
    lines = ["u," + ",".join(f"z{j}" for j in range(1, nz + 1))]
    ext_rows = np.flatnonzero(observed)
    Z_ext = Xe[np.ix_(ext_rows, zcols)]
    for i, r in enumerate(ext_rows):
        lines.append(str(int(Ue[r])) + "," + ",".join(repr(float(v)) for v in Z_ext[i, 1:]))
    write_text_atomic(os.path.join(directory, "external.csv"), "\n".join(lines) + "\n")

    fit_config = {
        "model": {
            "n_classes": config.n_classes,
            "groups": [sorted(g) for g in config.groups],
            "shared_index": (
                config.shared if isinstance(config.shared, str) else list(config.shared)
            ),
            "z_columns": list(config.z_columns),
        },
        "solver": {"tau": config.tau},
        "inference": {"B": config.B, "level": config.level, "se_method": "bootstrap"},
        "seed": config.seed,
    }
    write_text_atomic(
        os.path.join(directory, "fit_config.json"), json.dumps(fit_config, indent=2) + "\n"
    )


def cmd_simulate(args) -> int:
    config = _scenario_from_args(args)
    if args.emit_data:
        _emit_data(config, args.emit_data)
        if not args.out:
            print(f"wrote replicate-0 data files to {args.emit_data}")
            return EXIT_OK
    table = run_replications(config, workers=args.workers)
    text = format_table_csv(table)
    if args.out:
        write_text_atomic(args.out, text)
        print(f"wrote {args.out} ({table.reps} replications, {table.n_failed} failed)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_check(args) -> int:
    opts = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ValidationError(f"file not found: {args.config}", field="config")
        with open(args.config) as fh:
            opts = json.load(fh)
        if not isinstance(opts, dict):
            raise ValidationError("check config must be a JSON object", field="config")
    seed = int(opts.get("seed", 7))
    if args.suite == "identities":
        results = checks_mod.identity_checks(seed=seed)
    elif args.suite == "efficiency":
        results = checks_mod.efficiency_checks(seed=seed)
    else:
        results = checks_mod.mar_checks(seed=seed, draws=int(opts.get("draws", 10**5)))
    failures = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f"  ({r.detail})" if r.detail else ""
        print(f"[{status}] {r.name}: measured {r.measured:.3e} vs tolerance {r.tolerance:.3e}{detail}")
        if not r.passed:
            failures.append(r.name)
    if failures:
        print(f"{len(failures)} check(s) failed: {', '.join(failures)}")
        return EXIT_CHECK_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elfuse",
        description="Fused multinomial logistic regression with "
        "summary-level external predictions",
    )
    parser.add_argument(
        "--print-schema",
        choices=sorted(SCHEMAS),
        help="print a JSON schema and exit",
    )
    sub = parser.add_subparsers(dest="command")

    p_fit = sub.add_parser("fit", help="fit MLE and FMLE on CSV data")
    p_fit.add_argument("--primary", required=True, help="primary CSV (label,x1,...)")
    p_fit.add_argument("--predictions", required=True, help="predictions CSV (q1,...)")
    p_fit.add_argument("--config", required=True, help="fit configuration JSON")
    p_fit.add_argument("--bootstrap", type=int, default=None, metavar="B",
                       help="override the bootstrap replication count")
    p_fit.add_argument("--out", default=None, help="write the JSON report here")

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    src = p_sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario JSON file")
    src.add_argument("--preset", choices=PRESET_NAMES, help="shipped scenario preset")
    p_sim.add_argument("--reps", type=int, default=None, help="override replication count")
    p_sim.add_argument("--seed", type=int, default=None, help="override the seed")
    p_sim.add_argument("--out", default=None, help="write the results CSV here")
    p_sim.add_argument("--emit-data", default=None, metavar="DIR",
                       help="write replicate-0 CSVs (primary, predictions, external)")
    p_sim.add_argument("--workers", type=int, default=None,
                       help="parallel workers (default: ELFUSE_THREADS or all cores)")

    p_check = sub.add_parser("check", help="run a verification suite")
    p_check.add_argument("--suite", required=True,
                         choices=("identities", "efficiency", "mar"))
    p_check.add_argument("--config", default=None, help="JSON with seed/draws options")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        print(json.dumps(SCHEMAS[args.print_schema], indent=2))
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_INPUT
    try:
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_check(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FusionError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
