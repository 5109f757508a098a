import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from framemoe.config import (
    BackboneConfig,
    ConfigError,
    ExperimentConfig,
    HeadsConfig,
    MoeConfig,
    StftBlock,
    TrainConfig,
    config_digest,
    config_to_dict,
    load_config,
    validate,
)
from framemoe.experiment import (
    ABLATION_BALANCING,
    ABLATION_EXPERT_COUNTS,
    ABLATION_ROUTINGS,
    _ablation_cells,
    _cell_config,
    ensure_corpus,
    load_trained,
    prepare_run_dir,
    run_eval,
    run_gen,
    run_train,
    run_analyze,
    update_report,
)
from framemoe.heads import identity_se_head
from framemoe.training import load_checkpoint, save_checkpoint


def tiny_cfg(output_dir, seed=0):
    cfg = ExperimentConfig(seed=seed, output_dir=str(output_dir))
    cfg.backbone = BackboneConfig(n_layers=2, width=6, frame=32, hop=16)
    cfg.moe = MoeConfig(n_experts=2, top_k=1, expert_hidden=8,
                        balancing_loss_enabled=True)
    cfg.heads = HeadsConfig(stft=StftBlock(window=32, hop=16, fft_size=32),
                            ser_hidden=8, se_hidden=10)
    cfg.training = TrainConfig(
        phase1_se_epochs=1, phase1_se_batch=4, phase1_ser_epochs=1,
        phase1_ser_batch=4, phase2_epochs=2, phase2_batch=4)
    cfg.data.train_size = 8
    cfg.data.dev_size = 4
    cfg.data.test_size = 4
    cfg.data.utterance_len = 160
    cfg.data.eval_snrs_db = [-5.0, 5.0]
    validate(cfg)
    return cfg


def test_prepare_run_dir_writes_loadable_resolved_config(tmp_path):
    cfg = tiny_cfg(tmp_path / "run")
    run_dir = prepare_run_dir(cfg)
    loaded = load_config(run_dir / "resolved_config.yaml")
    assert config_to_dict(loaded) == config_to_dict(cfg)
    assert config_digest(loaded) == config_digest(cfg)


def test_update_report_merges_fields(tmp_path):
    update_report(tmp_path, alpha=1)
    update_report(tmp_path, beta={"x": 2})
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["alpha"] == 1
    assert report["beta"] == {"x": 2}
    assert report["schema"] == "framemoe-report"
    update_report(tmp_path, alpha=3)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["alpha"] == 3
    assert report["beta"] == {"x": 2}


def test_ensure_corpus_generates_once_then_rereads(tmp_path):
    cfg = tiny_cfg(tmp_path / "run")
    corpus, noisy, corpus_dir = ensure_corpus(cfg)
    assert (corpus_dir / "manifest.jsonl").exists()
    first = corpus.train[0].clean.samples.copy()
    again, noisy2, _ = ensure_corpus(cfg)
    np.testing.assert_array_equal(again.train[0].clean.samples, first)
    assert set(noisy) == set(noisy2)


def test_run_gen_matches_on_demand_generation(tmp_path):
    cfg_a = tiny_cfg(tmp_path / "a")
    run_gen(cfg_a)
    corpus_a, _, _ = ensure_corpus(cfg_a)
    cfg_b = tiny_cfg(tmp_path / "b")
    corpus_b, _, _ = ensure_corpus(cfg_b)
    for ua, ub in zip(corpus_a.train, corpus_b.train):
        np.testing.assert_array_equal(ua.clean.samples, ub.clean.samples)
        assert ua.label == ub.label


def test_run_train_artifacts_and_summary(tmp_path):
    cfg = tiny_cfg(tmp_path / "run")
    summary = run_train(cfg)
    run = Path(summary["run_dir"])
    for name in ("resolved_config.yaml", "checkpoint_phase1.json",
                 "checkpoint_final.json", "losses.csv", "losses_phase1.csv",
                 "report.json"):
        assert (run / name).exists(), name
    assert len(summary["losses"]) == cfg.training.phase2_epochs
    assert summary["wall_time_s"] > 0.0
    report = json.loads((run / "report.json").read_text())
    assert report["config_digest"] == config_digest(cfg)
    assert report["seed"] == cfg.seed
    assert report["best_epoch"] == summary["best_epoch"]
    losses_lines = (run / "losses.csv").read_text().strip().splitlines()
    assert losses_lines[0] == "epoch,wce,l1,balance,total"
    assert len(losses_lines) == 1 + cfg.training.phase2_epochs


def test_load_trained_restores_checkpoint(tmp_path):
    cfg = tiny_cfg(tmp_path / "run")
    run_train(cfg)
    loaded_cfg, model, meta = load_trained(cfg.output_dir)
    assert config_digest(loaded_cfg) == config_digest(cfg)
    params, _ = load_checkpoint(Path(cfg.output_dir) / "checkpoint_final.json")
    from framemoe.model import named_parameters

    for name, tensor in named_parameters(model).items():
        np.testing.assert_array_equal(tensor.data, params[name], err_msg=name)
    assert "norm_stats" in meta


def test_load_trained_missing_run_raises(tmp_path):
    with pytest.raises(ConfigError):
        load_trained(tmp_path / "nothing")
    (tmp_path / "half").mkdir()
    cfg = tiny_cfg(tmp_path / "half")
    prepare_run_dir(cfg)
    with pytest.raises(ConfigError):
        load_trained(tmp_path / "half")


def test_eval_rows_cover_each_condition_once(tmp_path):
    cfg = tiny_cfg(tmp_path / "run")
    run_train(cfg)
    reports = run_eval(cfg.output_dir)
    conditions = [(r.family, r.snr_db) for r in reports]
    assert len(conditions) == len(set(conditions)) == 6
    families = {r.family for r in reports}
    assert families == {"babble", "ambient", "impulsive"}
    assert {r.snr_db for r in reports} == {-5.0, 5.0}
    for r in reports:
        assert r.n_utterances == cfg.data.test_size
        assert np.isfinite(r.ssnr_db) and np.isfinite(r.ssnr_noisy_db)
        assert r.l1 >= 0.0 and r.l1_noisy >= 0.0
    lines = (Path(cfg.output_dir) / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 7
    assert lines[0].startswith("family,snr_db,f1_macro")


def test_identity_denoiser_scores_exactly_like_unprocessed_noisy(tmp_path):
    cfg = tiny_cfg(tmp_path / "run")
    # The pass-through construction needs the decoder hidden width to equal
    # the bin count.
    n_bins = cfg.heads.stft.fft_size // 2 + 1
    cfg.heads.se_hidden = n_bins
    validate(cfg)
    run_train(cfg)
    ckpt_path = Path(cfg.output_dir) / "checkpoint_final.json"
    params, meta = load_checkpoint(ckpt_path)
    head = identity_se_head(width=cfg.backbone.width, n_bins=n_bins)
    params["se.w1"] = head.w1.data
    params["se.b1"] = head.b1.data
    params["se.w2"] = head.w2.data
    params["se.b2"] = head.b2.data
    save_checkpoint(ckpt_path, params, extra=meta)
    for report in run_eval(cfg.output_dir):
        assert report.l1 == report.l1_noisy
        assert abs(report.ssnr_db - report.ssnr_noisy_db) < 1e-9


def test_run_analyze_groups_by_condition_and_label(tmp_path):
    cfg = tiny_cfg(tmp_path / "run")
    run_train(cfg)
    run_eval(cfg.output_dir)
    report = run_analyze(cfg.output_dir)
    snr_rows = [r for r in report.switch_agreement if r["group_by"] == "snr_db"]
    assert [r["condition"] for r in snr_rows] == [-5.0, 5.0]
    label_rows = [r for r in report.switch_agreement if r["group_by"] == "label"]
    assert label_rows
    for name in ("switch_agreement.csv", "usage_by_snr.csv", "usage_by_label.csv"):
        assert (Path(cfg.output_dir) / name).exists()
    stored = json.loads((Path(cfg.output_dir) / "report.json").read_text())
    assert "analytics" in stored


def test_rerun_from_same_resolved_config_is_bit_identical(tmp_path):
    cfg = tiny_cfg(tmp_path / "run")
    run_train(cfg)
    run_eval(cfg.output_dir)
    run = Path(cfg.output_dir)
    keep = {}
    for name in ("checkpoint_final.json", "checkpoint_phase1.json",
                 "losses.csv", "losses_phase1.csv", "metrics.csv"):
        keep[name] = (run / name).read_bytes()
    report_first = json.loads((run / "report.json").read_text())
    resolved = load_config(run / "resolved_config.yaml")
    shutil.rmtree(run)

    run_train(resolved)
    run_eval(resolved.output_dir)
    for name, blob in keep.items():
        assert (run / name).read_bytes() == blob, name
    report_second = json.loads((run / "report.json").read_text())
    drop = lambda d: {k: v for k, v in d.items() if not k.startswith("wall_time")}
    assert drop(report_first) == drop(report_second)


def test_ablation_grid_enumerates_every_cell(tmp_path):
    cells = _ablation_cells()
    assert len(cells) == (len(ABLATION_ROUTINGS) * len(ABLATION_EXPERT_COUNTS)
                          * len(ABLATION_BALANCING)) == 20
    assert len({tuple(sorted(c.items())) for c in cells}) == 20
    base = tiny_cfg(tmp_path / "run")
    dirs = set()
    for cell in cells:
        cfg, applies = _cell_config(base, cell)
        routing, n, balancing = cell["routing"], cell["n_experts"], cell["balancing"]
        assert cfg.moe.n_experts == n
        if routing == "sparse":
            assert cfg.moe.top_k == 1
        else:
            assert cfg.moe.top_k == n
        # `applies` reports whether the request was satisfiable; an absent
        # request is trivially satisfied.
        assert applies == ((not balancing) or cfg.moe.top_k == 1)
        assert cfg.moe.balancing_loss_enabled == (balancing and cfg.moe.top_k == 1)
        validate(cfg)
        dirs.add(cfg.output_dir)
    assert len(dirs) == 20
