import csv
import json
import math

import numpy as np
import pytest

from patchood import cli
from patchood.errors import MissingScores, TooFewSamples
from patchood.gauss import GaussianModel, save_model
from patchood.pipeline import RunConfig, cmd_evaluate, cmd_fit, cmd_score, comparison_table
from patchood.synth import ShiftSpec, generate
from patchood.tensorio import Split, load_manifest, read_tensor, write_tensor

SPEC = ShiftSpec(d=6, n_train=30, n_val=6, n_test=8, n_ood=8, seed=5, mc_samples=3)


@pytest.fixture
def dataset(tmp_path):
    generate(SPEC, tmp_path / "data")
    return tmp_path / "data" / "manifest.json"


def config(manifest, tmp_path, **kw):
    return RunConfig(manifest=manifest, out=tmp_path / "run", model=tmp_path / "model.zip", **kw)


def set_patches(manifest_path, subject_id, vec):
    m = load_manifest(manifest_path)
    block = np.broadcast_to(np.asarray(vec, dtype=np.float32)[:, None, None, None], (len(vec), 2, 2, 2))
    for f in m.subject(subject_id).feature_files:
        write_tensor(block, f)


def test_fit_without_training_subjects(dataset, tmp_path):
    doc = json.loads(dataset.read_text())
    doc["subjects"] = [s for s in doc["subjects"] if s["split"] != "ID_TRAIN"]
    dataset.write_text(json.dumps(doc))
    with pytest.raises(TooFewSamples):
        cmd_fit(config(dataset, tmp_path))


def test_fit_model_dimension_and_rerun(dataset, tmp_path):
    cfg = config(dataset, tmp_path)
    m = cmd_fit(cfg)
    assert m.d == SPEC.d
    assert m.n_samples == SPEC.n_train * len(load_manifest(dataset).subjects[0].feature_files)
    first = cfg.model.read_bytes()
    cmd_fit(cfg)
    assert cfg.model.read_bytes() == first


def test_patch_features_at_mean_score_zero(dataset, tmp_path):
    mu = np.arange(SPEC.d, dtype=np.float32)
    cfg = config(dataset, tmp_path)
    save_model(GaussianModel.from_moments(mu, np.diag(np.arange(1.0, SPEC.d + 1)), pooling=load_manifest(dataset).pooling), cfg.model)
    set_patches(dataset, "test_0000", mu)
    summary = cmd_score(cfg)
    assert summary.scores["test_0000"] == 0.0
    assert np.all(read_tensor(tmp_path / "run" / "test_0000.uncertainty.npy") == 0.0)


def test_constant_patch_scores(dataset, tmp_path):
    cfg = config(dataset, tmp_path)
    save_model(GaussianModel.from_moments(np.zeros(SPEC.d), np.eye(SPEC.d), pooling=load_manifest(dataset).pooling), cfg.model)
    set_patches(dataset, "ood_0003", [3.0, 4.0] + [0.0] * (SPEC.d - 2))
    assert cmd_score(cfg).scores["ood_0003"] == pytest.approx(25.0, rel=1e-12)


def test_evaluate_before_score(dataset, tmp_path):
    with pytest.raises(MissingScores) as info:
        cmd_evaluate(config(dataset, tmp_path))
    assert "val_0000" in str(info.value) and "ood_0007" in str(info.value)
    assert len(info.value.subject_ids) == SPEC.n_val + SPEC.n_test + SPEC.n_ood


def test_evaluate_matches_scripted_reference(dataset, tmp_path):
    cfg = config(dataset, tmp_path)
    cmd_fit(cfg)
    raw = cmd_score(cfg).scores
    doc = cmd_evaluate(cfg)

    m = load_manifest(dataset)
    split = {s.id: s.split for s in m.subjects}
    val = [raw[i] for i in raw if split[i] is Split.ID_VAL]
    lo, hi = min(val), 2 * max(val)
    norm = {i: min(max((r - lo) / (hi - lo), 0.0), 1.0) for i, r in raw.items()}
    ordered = sorted(norm[i] for i in norm if split[i] is Split.ID_VAL)
    tau = ordered[math.ceil(0.95 * len(ordered)) - 1]
    test = [norm[i] for i in norm if split[i] is Split.ID_TEST]
    ood = [norm[i] for i in norm if split[i] is Split.OOD]
    tpr = sum(u <= tau for u in test) / len(test)
    fpr = sum(u <= tau for u in ood) / len(ood)
    assert doc["boundary"] == tau
    assert doc["tpr_test"] == tpr and doc["fpr"] == fpr
    assert doc["detection_error"] == pytest.approx(0.5 * (1 - tpr) + 0.5 * fpr, abs=1e-15)

    def dsc(sid):
        s = m.subject(sid)
        p, g = read_tensor(s.prediction_file) > 0.5, read_tensor(s.groundtruth_file) > 0.5
        return 2 * int((p & g).sum()) / (int(p.sum()) + int(g.sum()))

    pool = [i for i in norm if split[i] is not Split.ID_VAL]
    bins = [[] for _ in range(10)]
    for i in pool:
        bins[min(int(norm[i] * 10), 9)].append(i)
    ref = sum(
        len(b) / len(pool) * abs(sum(dsc(i) for i in b) / len(b) - (1 - sum(norm[i] for i in b) / len(b)))
        for b in bins
        if b
    )
    assert doc["esce"] == pytest.approx(ref, abs=1e-12)
    admitted = [dsc(i) for i in pool if norm[i] <= tau]
    assert doc["admitted_dice_mean"] == pytest.approx(np.mean(admitted), abs=1e-12)

    meta = json.loads((tmp_path / "run" / "ood_0000.uncertainty.json").read_text())
    assert meta["normalized_score"] == norm["ood_0000"]
    rows = list(csv.DictReader((tmp_path / "run" / "scatter.mahalanobis.csv").open()))
    assert len(rows) == len(raw)


def test_max_softmax_uninformative(acceptance_run):
    assert acceptance_run["reports"]["max_softmax"]["fpr"] >= 0.5


def test_score_twice_identical(dataset, tmp_path):
    cfg = config(dataset, tmp_path)
    cmd_fit(cfg)
    cmd_score(cfg)
    first = {p.name: p.read_bytes() for p in cfg.out.iterdir()}
    cmd_score(cfg)
    assert {p.name: p.read_bytes() for p in cfg.out.iterdir()} == first


def test_cli_end_to_end(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SPEC.to_dict()))
    data, run, model = tmp_path / "data", tmp_path / "run", tmp_path / "model.zip"
    manifest = data / "manifest.json"
    assert cli.main(["synth", "--spec", str(spec), "--out", str(data)]) == 0
    assert cli.main(["fit", "--manifest", str(manifest), "--model", str(model)]) == 0
    common = ["--manifest", str(manifest), "--out", str(run)]
    assert cli.main(["score", *common, "--model", str(model)]) == 0
    assert cli.main(["score", *common, "--method", "temp_scaling", "--temperature", "100"]) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", *common]) == 0
    assert json.loads(capsys.readouterr().out)["method"] == "mahalanobis"
    assert cli.main(["evaluate", *common, "--method", "temp_scaling", "--temperature", "100"]) == 0
    capsys.readouterr()

    table = tmp_path / "table.txt"
    reports = [str(run / "report.mahalanobis.json"), str(run / "report.temp_scaling_T100.json")]
    assert cli.main(["report", *reports, "--out", str(table)]) == 0
    text = table.read_text()
    assert text.splitlines()[0].split(" | ")[0].strip() == "Method"
    assert "temp_scaling_T100" in text and text == capsys.readouterr().out


def test_cli_exit_codes(dataset, tmp_path):
    model = tmp_path / "model.zip"
    assert cli.main(["fit", "--manifest", str(dataset), "--model", str(model)]) == 0
    # classified error
    assert cli.main(["fit", "--manifest", str(tmp_path / "nope.json"), "--model", str(model)]) == 2
    # one corrupt subject: the rest is still scored, exit code flags the failure
    bad = load_manifest(dataset).subject("test_0002").feature_files[0]
    bad.write_bytes(b"not a tensor")
    argv = ["score", "--manifest", str(dataset), "--out", str(tmp_path / "run"), "--model", str(model)]
    assert cli.main(argv) == 1
    doc = json.loads((tmp_path / "run" / "scores.mahalanobis.json").read_text())
    assert list(doc["failures"]) == ["test_0002"]
    assert "MalformedHeader" in doc["failures"]["test_0002"]
    assert len(doc["scores"]) == SPEC.n_val + SPEC.n_test + SPEC.n_ood - 1


def test_env_override(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("PATCHOOD_MANIFEST", str(dataset))
    monkeypatch.setenv("PATCHOOD_WORKERS", "3")
    monkeypatch.setenv("PATCHOOD_METHOD", "max_softmax")
    args = cli.build_parser().parse_args(["score", "--out", str(tmp_path)])
    assert (args.manifest, args.workers, args.method) == (dataset, 3, "max_softmax")
    args = cli.build_parser().parse_args(["score", "--out", str(tmp_path), "--workers", "2"])
    assert args.workers == 2


def test_log_level_position():
    parser = cli.build_parser()
    assert parser.parse_args(["--log-level", "DEBUG", "report", "a.json"]).log_level == "DEBUG"
    assert parser.parse_args(["report", "a.json", "--log-level", "ERROR"]).log_level == "ERROR"
    assert parser.parse_args(["report", "a.json"]).log_level == "INFO"


def test_baseline_needs_its_inputs(dataset, tmp_path):
    doc = json.loads(dataset.read_text())
    for s in doc["subjects"]:
        s.pop("logits_file", None)
    dataset.write_text(json.dumps(doc))
    summary = cmd_score(config(dataset, tmp_path, method="temp_scaling"))
    assert not summary.ok and not summary.scores


def test_comparison_table_layout():
    table = comparison_table(
        [
            {"method": "mahalanobis", "detection_error": 0.082, "fpr": 0.05, "esce": 0.231, "admitted_dice_mean": 0.5, "admitted_dice_sd": 0.25},
            {"method": "mc_dropout", "detection_error": 0.5, "fpr": 1.0, "esce": None, "admitted_dice_mean": None},
        ]
    )
    lines = table.splitlines()
    assert [c.strip() for c in lines[0].split(" | ")] == ["Method", "Det. Error", "FPR", "ESCE", "Dice"]
    assert [c.strip() for c in lines[2].split(" | ")] == ["mahalanobis", "0.082", "0.050", "0.231", "0.500 ± 0.250"]
    assert [c.strip() for c in lines[3].split(" | ")] == ["mc_dropout", "0.500", "1.000", "n/a", "n/a"]
