import csv
import json
import os
from itertools import product

import pytest

from memsearch import cli
from memsearch.checkpoint import load_checkpoint
from memsearch.config import load_run_config
from memsearch.denoiser import Mask, base_view, effective_params
from memsearch.errors import DivergenceError
from memsearch.evaluation import read_metrics_csv
from memsearch.metrics import AttackReport
from memsearch.search import load_mask, read_trial_log

from oracles import brute_pareto

TINY = """
[run]
run_id = {run_id}
output_dir = {out}
seed = 1
[corpus]
n_train = 150
n_val = 30
n_test = 30
mem_n = 4
mem_dup = 5
n_controls = 4
hpo_fraction = 0.2
[base_corpus]
n_train = 150
[arch]
hidden = 8
[schedule]
T = 8
[pretrain]
steps = 40
batch_size = 16
[train]
steps = 15
batch_size = 8
[search]
population = 3
trial_budget = 4
inner_steps = 5
[metrics]
n_noise_draws = 1
attack_samples = 4
attack_k = 2
fid_k = 4
"""


def write_config(directory, run_id="tiny", extra=""):
    path = os.path.join(directory, f"{run_id}.ini")
    with open(path, "w") as fh:
        fh.write(TINY.format(run_id=run_id, out=os.path.join(directory, "runs")) + extra)
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A pretrained tiny run shared by the command tests."""
    d = str(tmp_path_factory.mktemp("cli"))
    config = write_config(d)
    assert cli.main(["pretrain", "--config", config]) == 0
    return d, config, load_run_config(config)


def test_pretrain_checkpoint_reloads(run):
    _, _, cfg = run
    params, masks, header = load_checkpoint(os.path.join(cfg.run_dir, cli.THETA0), cfg.arch)
    assert masks == () and params.svd is not None
    manifest = json.load(open(os.path.join(cfg.run_dir, cli.MANIFEST)))
    assert manifest["files"][cli.THETA0] == cli.file_sha256(os.path.join(cfg.run_dir, cli.THETA0))


def test_pretrain_rerun_same_checksum(run, tmp_path):
    _, _, cfg = run
    config = write_config(str(tmp_path), "again")
    assert cli.main(["pretrain", "--config", config]) == 0
    other = load_run_config(config)
    assert cli.file_sha256(os.path.join(other.run_dir, cli.THETA0)) == \
        cli.file_sha256(os.path.join(cfg.run_dir, cli.THETA0))


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_dry_search_finds_exhaustive_front(tmp_path, bits):
    n = 2 ** bits
    config = write_config(str(tmp_path))
    text = open(config).read().replace("population = 3\ntrial_budget = 4", f"population = {n}\ntrial_budget = {n}")
    open(config, "w").write(text)
    assert cli.main(["search", "--config", config, "--dry-objectives", "popcount", "--dry-bits", str(bits)]) == 0
    cfg = load_run_config(config)
    _, trials = read_trial_log(os.path.join(cfg.run_dir, "trials_toy.jsonl"))
    assert len(trials) == n
    stub = cli.PopcountObjectives(bits)
    masks = [Mask("toy", m) for m in product((0, 1), repeat=bits)]
    expected = {masks[i].bits for i in brute_pareto([stub(m, 0).as_tuple() for m in masks])}
    front = json.load(open(os.path.join(cfg.run_dir, "pareto.json")))["members"]
    assert {tuple(m["bits"]) for m in front} == expected


def test_search_log_has_budget_lines(run):
    d, config, cfg = run
    assert cli.main(["search", "--config", config, "--space", "scale_shift"]) == 0
    with open(os.path.join(cfg.run_dir, "trials_scale_shift.jsonl")) as fh:
        assert len(fh.readlines()) == 1 + cfg.search.trial_budget
    mask, meta = load_mask(os.path.join(cfg.run_dir, "best_mask.json"))
    assert mask.space == "scale_shift" and meta["source_run"] == cfg.run_id


def test_search_all_spaces_merged_front(run):
    d, config, cfg = run
    assert cli.main(["search", "--config", config, "--space", "all"]) == 0
    members = json.load(open(os.path.join(cfg.run_dir, "pareto.json")))["members"]
    pts = [(m["d_mem"], m["d_fid"]) for m in members]
    assert brute_pareto(pts) == list(range(len(pts)))
    assert cli.main(["pareto", "--config", config]) == 0
    again = json.load(open(os.path.join(cfg.run_dir, "pareto.json")))["members"]
    assert {(m["space"], m["trial_id"]) for m in again} == {(m["space"], m["trial_id"]) for m in members}


def test_freeze_baseline_equals_theta0(run):
    _, config, cfg = run
    assert cli.main(["finetune", "--config", config, "--baseline", "freeze"]) == 0
    params, masks, _ = load_checkpoint(os.path.join(cfg.run_dir, "model_freeze.ckpt"))
    theta0, _, _ = load_checkpoint(os.path.join(cfg.run_dir, cli.THETA0))
    assert effective_params(params, masks).checksum() == base_view(theta0).checksum()


def test_finetune_labels(run):
    _, config, cfg = run
    assert cli.main(["finetune", "--config", config, "--baseline", "full", "--mitigation", "rwa"]) == 0
    mask_path = os.path.join(cfg.run_dir, "picked.json")
    cli.save_mask(mask_path, Mask("spectral", (1,) + (0,) * 12), "source-run", 0.5)
    assert cli.main(["finetune", "--config", config, "--mask", mask_path]) == 0
    labels = {r["run_id"] for r in read_metrics_csv(os.path.join(cfg.run_dir, cli.METRICS_FILE))}
    assert {"full+rwa", "source-run"} <= labels


def test_finetune_mask_and_baseline_conflict(run):
    _, config, cfg = run
    assert cli.main(["finetune", "--config", config, "--mask", "x.json", "--baseline", "full"]) == 2


def test_attack_report_is_valid(run):
    _, config, cfg = run
    assert cli.main(["attack", "--config", config]) == 0
    data = json.load(open(os.path.join(cfg.run_dir, "attack_theta0.json")))
    for key in ("duplicated", "control"):
        r = AttackReport.from_dict(data[key])
        r.validate(tuple(data["image_shape"]), data["tile"])
        assert len(data[key]["prompt_ids"]) == r.n_prompts == 4


def test_evaluate_and_report(run):
    _, config, cfg = run
    assert cli.main(["evaluate", "--config", config]) == 0
    assert cli.main(["report", "--config", config]) == 0
    with open(os.path.join(cfg.run_dir, "report.csv")) as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == cli.REPORT_COLUMNS


def row(run_id, d_mem, d_fid):
    return {"run_id": run_id, "mask_space": "none", "mask_bits": "", "d_mem": d_mem, "d_fid": d_fid, "amd": 0.0,
            "extracted_count": 0, "prompt_fidelity": 1.0, "seed": 0}


def test_report_marks_pareto_rows(run):
    cfg = run[2]
    single = cli.build_report([row("a", 1.0, 1.0)], cfg)
    assert single[0]["pareto_optimal"] == 1 and single[0]["rank"] == 1
    out = {r["run_id"]: r for r in cli.build_report([row("a", 1.0, 3.0), row("b", 2.0, 1.0), row("c", 3.0, 3.0)], cfg)}
    assert (out["a"]["pareto_optimal"], out["b"]["pareto_optimal"], out["c"]["pareto_optimal"]) == (1, 1, 0)
    assert out["b"]["rank"] == 1 and out["c"]["rank"] == 3


def test_report_empty_dir(tmp_path):
    config = write_config(str(tmp_path))
    assert cli.main(["report", "--config", config, "--run-dir", str(tmp_path)]) == 2


def test_usage_errors(tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["search"]) == 2
    assert cli.main(["pretrain", "--config", str(tmp_path / "missing.ini")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nrun_id = x\n")
    assert cli.main(["pretrain", "--config", str(bad)]) == 2
    config = write_config(str(tmp_path), "nockpt")
    assert cli.main(["finetune", "--config", config]) == 2
    assert cli.main(["search", "--config", config, "--dry-objectives", "popcount", "--dry-bits", "0"]) == 2


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError(3)

    monkeypatch.setattr(cli, "pretrain", boom)
    assert cli.main(["pretrain", "--config", write_config(str(tmp_path))]) == 3


def test_transfer_rejects_foreign_mask(run, tmp_path):
    _, config, cfg = run
    path = str(tmp_path / "toy.json")
    cli.save_mask(path, Mask("toy", (1, 0, 1)), "elsewhere", None)
    assert cli.main(["transfer", "--config", config, "--mask", path]) == 2
