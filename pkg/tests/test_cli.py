import json

import numpy as np
import pytest
import yaml

from beliefrl.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared tiny pipeline: generate -> train -> evaluate."""
    root = tmp_path_factory.mktemp("cli")
    sim_yaml = root / "sim.yaml"
    sim_yaml.write_text(
        yaml.safe_dump(
            {
                "n_episodes": 36, "horizon": 6, "sub_steps_per_decision": 2,
                "n_structured": 5, "text_embed_dim": 4, "seed": 11,
                "splits": {"train": 0.6, "val": 0.2, "test": 0.2},
            }
        )
    )
    exp_yaml = root / "exp.yaml"
    exp_yaml.write_text(
        yaml.safe_dump(
            {
                "model": {
                    "n_structured": 5, "text_embed_dim": 4, "hidden_dim": 12, "latent_dim": 4,
                    "psi_embed_dim": 8, "attn_dim": 8, "attn_heads": 2,
                    "decoder_hidden_dim": 12, "outcome_hidden_dim": 8, "dropout": 0.0,
                },
                "train": {"stage1_epochs": 1, "stage2_epochs": 2, "stage3_epochs": 1,
                          "batch_size": 16, "val_fqe_every": 2},
                "eval": {"fqe_iterations": 3, "fqe_hidden_dims": [16], "fqe_steps_per_iteration": 3,
                         "n_bootstrap": 100},
            }
        )
    )
    cohort = root / "cohort"
    assert main(["generate", "--config", str(sim_yaml), "--out", str(cohort)]) == EXIT_OK
    run = root / "run"
    assert main(["train", "--config", str(exp_yaml), "--cohort", str(cohort), "--out", str(run), "--quiet"]) == EXIT_OK
    ev = root / "eval"
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint_stage3.bin"),
                 "--cohort", str(cohort), "--out", str(ev), "--split", "test", "--seed", "0"]) == EXIT_OK
    return root, sim_yaml, exp_yaml, cohort, run, ev


def test_generate_outputs(workspace):
    root, _, _, cohort, _, _ = workspace
    manifest = json.loads((cohort / "manifest.json").read_text())
    assert manifest["n_episodes"] == 36
    assert set(manifest["splits"]) == {"train", "val", "test"}
    assert (cohort / "episodes.bin").exists()
    assert (cohort / "run_manifest.json").exists()


def test_missing_config_exit_2(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_bad_config_key_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"horizonn": 6}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_cohort_exit_3(workspace, tmp_path):
    root, _, exp_yaml, _, run, _ = workspace
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint_stage3.bin"),
                 "--cohort", str(tmp_path / "nope"), "--out", str(tmp_path / "e")]) == EXIT_DATA


def test_train_artifacts_and_manifests(workspace):
    _, _, _, _, run, _ = workspace
    assert (run / "metrics.jsonl").exists()
    assert (run / "run_manifest.json").exists()
    records = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert {r["stage"] for r in records} == {1, 2, 3}
    for tag in ("stage1", "stage2", "stage3"):
        assert (run / f"checkpoint_{tag}.bin").exists()


def test_train_metric_records_deterministic(workspace, tmp_path):
    root, _, exp_yaml, cohort, run, _ = workspace
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", str(exp_yaml), "--cohort", str(cohort), "--out", str(rerun), "--quiet"]) == EXIT_OK
    assert (rerun / "metrics.jsonl").read_bytes() == (run / "metrics.jsonl").read_bytes()


def test_eval_report_records(workspace):
    _, _, _, _, _, ev = workspace
    records = [json.loads(l) for l in (ev / "eval_report.jsonl").read_text().splitlines()]
    names = {r["name"] for r in records}
    assert {"fqe", "wis", "ess", "behavior_value_mc", "policy_entropy",
            "mean_kl", "active_dims", "mutual_info"} <= names
    fqe = next(r for r in records if r["name"] == "fqe")
    assert fqe["ci_lower"] <= fqe["value"] <= fqe["ci_upper"]
    assert (ev / "kl_per_dim.json").exists()


def test_evaluate_unknown_split_exit_3(workspace, tmp_path):
    _, _, _, cohort, run, _ = workspace
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint_stage3.bin"), "--cohort", str(cohort),
                 "--out", str(tmp_path / "x"), "--split", "bogus"]) == EXIT_DATA


def test_act_emits_distribution(workspace, capsys):
    _, _, _, cohort, run, _ = workspace
    manifest = json.loads((cohort / "manifest.json").read_text())
    episode = manifest["splits"]["test"][0]
    code = main(["act", "--checkpoint", str(run / "checkpoint_stage3.bin"), "--cohort", str(cohort),
                 "--episode", str(episode), "--step", "1", "--mode", "sample", "--n-samples", "8", "--seed", "1"])
    assert code == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["episode"] == episode
    dist = np.array(payload["distribution"])
    assert dist.shape == (9,)
    assert abs(dist.sum() - 1.0) < 1e-6
    assert 0 <= payload["action"] < 9


def test_act_bad_episode_exit_3(workspace):
    _, _, _, cohort, run, _ = workspace
    assert main(["act", "--checkpoint", str(run / "checkpoint_stage3.bin"), "--cohort", str(cohort),
                 "--episode", "424242", "--step", "0"]) == EXIT_DATA


def test_report_outputs_and_determinism(workspace, tmp_path):
    _, _, _, _, run, ev = workspace
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    assert main(["report", "--eval", str(ev), "--out", str(out1)]) == EXIT_OK
    assert main(["report", "--eval", str(ev), "--out", str(out2)]) == EXIT_OK
    for name in ("fqe_comparison.png", "kl_per_dim.png", "summary_table.json", "run_manifest.json"):
        assert (out1 / name).exists(), name
    assert (out1 / "fqe_comparison.png").read_bytes() == (out2 / "fqe_comparison.png").read_bytes()
    table = json.loads((out1 / "summary_table.json").read_text())
    # plot axes must cover the data range
    for row in table:
        lo, hi = row["fqe_axis"]
        assert lo <= row["ci"][0] and hi >= row["ci"][1]


def test_report_empty_input_errors(tmp_path):
    assert main(["report", "--eval", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_ablate_identical_variants_same_metrics(workspace, tmp_path):
    _, _, _, cohort, _, _ = workspace
    abl = tmp_path / "ablate.yaml"
    abl.write_text(
        yaml.safe_dump(
            {
                "base": {
                    "model": {"n_structured": 5, "text_embed_dim": 4, "hidden_dim": 12, "latent_dim": 4,
                              "psi_embed_dim": 8, "attn_dim": 8, "attn_heads": 2,
                              "decoder_hidden_dim": 12, "outcome_hidden_dim": 8, "dropout": 0.0},
                    "train": {"stage1_epochs": 1, "stage2_epochs": 1, "stage3_epochs": 0, "batch_size": 16},
                    "eval": {"fqe_iterations": 3, "fqe_hidden_dims": [16], "fqe_steps_per_iteration": 3,
                             "n_bootstrap": 100},
                },
                "seeds": [5],
                "variants": {"a": {}, "b": {}},
            }
        )
    )
    out = tmp_path / "abl_out"
    assert main(["ablate", "--config", str(abl), "--cohort", str(cohort), "--out", str(out)]) == EXIT_OK
    rows = json.loads((out / "ablation_table.json").read_text())
    assert len(rows) == 2
    by_name = {r["variant"]: r for r in rows}
    assert by_name["a"]["fqe"] == by_name["b"]["fqe"]
    assert by_name["a"]["fqe_ci"] == by_name["b"]["fqe_ci"]
