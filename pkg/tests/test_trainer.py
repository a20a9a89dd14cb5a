import json
import logging

import numpy as np
import pytest
import torch

from conftest import small_config
from ohubert.checkpoint import CheckpointError, load_checkpoint
from ohubert.corpus import make_batch
from ohubert.losses import combine
from ohubert.model import NonFiniteError
from ohubert.trainer import (GROUPS, Trainer, build_inputs, compute_losses, grad_check, lr_at,
                             param_group, pretrain, read_log, split_dev)


def _data(tiny_data):
    return tiny_data["manifest"], tiny_data["labels"]


def test_pretrain_writes_run_directory(tmp_path, tiny_data):
    cfg = small_config(tiny_data)
    pretrain(cfg, tmp_path, data=_data(tiny_data))
    for name in ("config.json", "train_log.jsonl", "events.jsonl", "best.ohub", "final.ohub",
                 "step_000004.ohub", "step_000012.ohub", "loss_curve.png"):
        assert (tmp_path / name).exists(), name
    rows = read_log(tmp_path / "train_log.jsonl")
    assert [r["step"] for r in rows] == list(range(1, cfg.train.steps + 1))
    for r in rows:
        assert abs(r["l_total"] - combine(r["l_mpl"], r["l_usp"], r["l_simclr"], r["l_orth"],
                                          cfg.train.alpha)) <= 1e-9
    events = [json.loads(line) for line in (tmp_path / "events.jsonl").read_text().splitlines()]
    act = [e for e in events if e["event"] == "queue_activated"]
    assert act == [{"step": cfg.train.queue_activation_step + 1, "event": "queue_activated",
                    "queue_size": cfg.train.queue_activation_step * 2 * cfg.train.batch_sources}]
    assert any(e["event"] == "best_dev" for e in events)
    assert json.loads((tmp_path / "config.json").read_text()) == cfg.to_dict()
    assert load_checkpoint(tmp_path / "final.ohub").step == cfg.train.steps


def test_float64_runs_are_bit_identical(tmp_path, tiny_data):
    cfg = small_config(tiny_data, **{"train.float64": "true", "train.steps": 6})
    pretrain(cfg, tmp_path / "a", data=_data(tiny_data))
    pretrain(cfg, tmp_path / "b", data=_data(tiny_data))
    assert (tmp_path / "a/train_log.jsonl").read_bytes() == (tmp_path / "b/train_log.jsonl").read_bytes()
    assert (tmp_path / "a/final.ohub").read_bytes() == (tmp_path / "b/final.ohub").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path, tiny_data):
    cfg = small_config(tiny_data, **{"train.float64": "true", "train.steps": 14})
    pretrain(cfg, tmp_path / "full", data=_data(tiny_data))
    pretrain(cfg, tmp_path / "resumed", resume=tmp_path / "full/step_000004.ohub",
             data=_data(tiny_data))
    full = read_log(tmp_path / "full/train_log.jsonl")[4:]
    resumed = read_log(tmp_path / "resumed/train_log.jsonl")
    assert [r["step"] for r in resumed] == list(range(5, 15))
    for a, b in zip(full, resumed):
        for k in ("l_mpl", "l_usp", "l_simclr", "l_orth", "l_total"):
            assert abs(a[k] - b[k]) <= 1e-12, (a["step"], k)


def test_overfit_on_a_frozen_batch(tiny_data):
    cfg = small_config(tiny_data, **{"train.steps": 50, "train.warmup_steps": 1,
                                     "train.queue_activation_step": 10_000, "train.lr": 1e-3})
    tr = Trainer(cfg, *_data(tiny_data), tiny_data["audio"])
    inputs = tr.prepare(0)
    losses = [tr.train_step(inputs).l_total for _ in range(51)]
    decreasing = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 45, losses


def test_alpha_zero_leaves_usp_heads_without_gradient(tiny_data):
    cfg = small_config(tiny_data, **{"train.alpha": 0})
    tr = Trainer(cfg, *_data(tiny_data), tiny_data["audio"])
    br, _, _ = compute_losses(tr.model, tr.prepare(0), cfg, np.random.default_rng(0))
    br.total.backward()
    for name, p in tr.model.lambda_head.named_parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert br.l_usp > 0 and br.l_total == br.l_mpl


def test_queue_holds_no_graph_after_a_step(tiny_data):
    tr = Trainer(small_config(tiny_data), *_data(tiny_data), tiny_data["audio"])
    tr.train_step()
    assert len(tr.queue) == 6
    assert not tr.queue.lambdas.requires_grad and tr.queue.lambdas.grad_fn is None
    assert not tr.queue.wlf.requires_grad


def test_missing_labels_skip_source_with_warning(tiny_data, caplog):
    cfg = small_config(tiny_data)
    b = make_batch(tiny_data["manifest"], 3, 16 * 320, 0, audio=tiny_data["audio"])
    labels = dict(tiny_data["labels"])
    del labels[b.source_ids[0]]
    with caplog.at_level(logging.WARNING):
        inputs = build_inputs(b, labels, cfg, np.random.default_rng(0))
    assert "no pseudo-labels" in caplog.text
    assert inputs.wav.shape[0] == 4
    assert b.source_ids[0] not in inputs.source_ids


def test_label_windows_follow_crop_offsets(tiny_data):
    cfg = small_config(tiny_data)
    b = make_batch(tiny_data["manifest"], 3, 16 * 320, 5, audio=tiny_data["audio"], align=320)
    inputs = build_inputs(b, tiny_data["labels"], cfg, np.random.default_rng(0))
    for i in range(len(b)):
        full = tiny_data["labels"][b.source_ids[i]]
        start = b.offsets[i] // 320 + (16 if b.roles[i] == "query" else 0)
        np.testing.assert_array_equal(inputs.labels[i].numpy(), full[start:start + 16])


def test_nan_loss_aborts(tiny_data):
    tr = Trainer(small_config(tiny_data), *_data(tiny_data), tiny_data["audio"])
    with torch.no_grad():
        tr.model.proj.E.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="l_mpl"):
        tr.train_step()
    with torch.no_grad():
        tr.model.encoder.blocks[0].attn.qkv.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="layer 1"):
        tr.train_step()


def test_resume_rejects_mismatched_config(tmp_path, tiny_data):
    cfg = small_config(tiny_data, **{"train.steps": 4})
    pretrain(cfg, tmp_path, data=_data(tiny_data))
    wider = small_config(tiny_data, **{"train.steps": 8, "model.ffn_dim": 48})
    with pytest.raises(CheckpointError, match="shape mismatch"):
        Trainer.from_checkpoint(load_checkpoint(tmp_path / "final.ohub"), *_data(tiny_data),
                                tiny_data["audio"], cfg=wider)


def test_lr_schedule():
    cfg = small_config(None, **{"train.steps": 100, "train.lr": 1.0})
    assert lr_at(0, cfg) == pytest.approx(0.1)
    assert lr_at(9, cfg) == pytest.approx(1.0)
    assert lr_at(10, cfg) == pytest.approx(1.0)
    assert lr_at(55, cfg) == pytest.approx(0.5)
    assert lr_at(100, cfg) == 0.0


def test_dev_split_is_disjoint(tiny_data):
    tr, dv = split_dev(tiny_data["manifest"], 0.25, 0)
    ids_tr = {e.source_id for e in tr}
    ids_dv = {e.source_id for e in dv}
    assert len(ids_dv) == 4 and not ids_tr & ids_dv
    assert len(ids_tr | ids_dv) == len(tiny_data["manifest"])


def test_every_parameter_has_a_group():
    from ohubert.model import OHubert
    names = [n for n, _ in OHubert(small_config().model).named_parameters()]
    groups = {param_group(n) for n in names}
    assert groups == set(GROUPS)
    with pytest.raises(KeyError):
        param_group("nonexistent.weight")


def test_gradcheck_small_and_central_difference_order():
    cfg = small_config(None, **{"train.orth_mode": '"distinct"'})
    rep = grad_check(cfg)
    assert set(rep) == set(GROUPS)
    assert max(r["max_rel_err"] for r in rep.values()) < 1e-4
    # truncation-dominated regime: halving eps quarters the error of smooth groups
    coarse = grad_check(cfg, eps=2e-2, n_directions=1)
    fine = grad_check(cfg, eps=1e-2, n_directions=1)
    ratios = [fine[g]["max_rel_err"] / coarse[g]["max_rel_err"]
              for g in ("attention", "ffn", "mlp") if coarse[g]["max_rel_err"] > 1e-7]
    assert ratios and all(0.15 < r < 0.35 for r in ratios), ratios
