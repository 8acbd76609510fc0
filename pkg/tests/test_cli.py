import csv
import json

import numpy as np
import pytest

from koopnmpc.cli import build_parser, default_config, load_config, main

TINY = {
    "sampling": {"n_step_experiments": 4, "n_steady_trajectories": 2, "rng_seed": 5},
    "windows": {"s": 4, "stride": 3},
    "model": {"n_z": 3, "hidden": [6]},
    "training": {"epochs": 3, "batch_size": 16, "seed": 1},
    "ocp": {"N_c": 3},
    "open_loop": {"seed": 2, "step_time": 1200.0, "horizon": 2400.0},
    "scenario": {"schedule": [[0.0, 15.0], [600.0, 15.3]], "duration": 1200.0,
                 "acceptance": {"max_input_violations": 0}},
}


def test_parser_has_all_verbs():
    p = build_parser()
    for verb in ("sample", "train", "test-open-loop", "control", "bench"):
        args = p.parse_args([verb, "--out", "o"] + (["--data", "d"] if verb == "train" else [])
                            + (["--model", "m"] if verb in ("test-open-loop", "control", "bench") else []))
        assert args.verb == verb and callable(args.func)
    with pytest.raises(SystemExit):
        p.parse_args(["control", "--model", "m", "--out", "o", "--controller", "nope"])


def test_config_merge(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"training": {"epochs": 7}}))
    cfg = load_config(path)
    assert cfg["training"]["epochs"] == 7
    assert cfg["training"]["batch_size"] == default_config()["training"]["batch_size"]


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    root = tmp_path_factory.mktemp("wf")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    codes = {
        "sample": main(["sample", "--out", str(root / "data")] + c),
        "train": main(["train", "--data", str(root / "data"), "--out", str(root / "model" / "m.json")] + c),
    }
    model = str(root / "model" / "m.json")
    codes["ol"] = main(["test-open-loop", "--model", model, "--out", str(root / "ol")] + c)
    codes["control"] = main(["control", "--model", model, "--out", str(root / "ctl")] + c)
    codes["bench"] = main(["bench", "--model", model, "--out", str(root / "bench")] + c)
    return root, c, codes


def test_workflow_exit_codes(workflow):
    _, _, codes = workflow
    assert codes["sample"] == codes["train"] == codes["ol"] == 0
    assert codes["control"] in (0, 1) and codes["bench"] in (0, 1)


def test_manifests_written(workflow):
    root, _, _ = workflow
    for sub, verb in (("data", "sample"), ("model", "train"), ("ol", "test-open-loop"), ("ctl", "control"),
                      ("bench", "bench")):
        m = json.loads((root / sub / "run_manifest.json").read_text())
        assert m["verb"] == verb and len(m["config_hash"]) == 16 and "numpy" in m["versions"]


def test_outputs(workflow):
    root, _, _ = workflow
    summary = json.loads((root / "ol" / "nrmse.json").read_text())
    assert len(summary["nrmse_multi"]) == 3 and all(np.isfinite(summary["nrmse_single"]))
    rows = list(csv.DictReader(open(root / "ctl" / "closed_loop_koopman_tailored.csv")))
    assert len(rows) == 5
    cpu = list(csv.DictReader(open(root / "bench" / "cpu_report.csv")))
    assert [r["controller"] for r in cpu] == ["ideal", "koopman_generic_dense", "koopman_tailored"]
    assert (root / "model" / "m.history.csv").exists()


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_sample_and_train_bit_identical(workflow, tmp_path):
    root, c, _ = workflow
    assert main(["sample", "--out", str(tmp_path / "data")] + c) == 0
    assert _files(tmp_path / "data") == _files(root / "data")
    assert main(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "model" / "m.json")] + c) == 0
    assert (root / "model" / "m.json").read_bytes() == (tmp_path / "model" / "m.json").read_bytes()
    m = json.loads((tmp_path / "model" / "run_manifest.json").read_text())
    assert m["wall_time_s"] > 0


def test_control_rerun_identical_except_wall_time(workflow, tmp_path):
    root, c, _ = workflow
    main(["control", "--model", str(root / "model" / "m.json"), "--out", str(tmp_path)] + c)
    name = "closed_loop_koopman_tailored.csv"
    a = list(csv.DictReader(open(root / "ctl" / name)))
    b = list(csv.DictReader(open(tmp_path / name)))
    for ra, rb in zip(a, b):
        ra.pop("wall_time_ms"), rb.pop("wall_time_ms")
        assert ra == rb


def test_acceptance_failure_gives_nonzero_exit(workflow, tmp_path):
    root, _, _ = workflow
    strict = dict(TINY, scenario=dict(TINY["scenario"], acceptance={"max_settling_s": -1.0}))
    cfg = tmp_path / "strict.json"
    cfg.write_text(json.dumps(strict))
    assert main(["control", "--model", str(root / "model" / "m.json"), "--out", str(tmp_path / "o"),
                 "--config", str(cfg)]) == 1
