import struct

import numpy as np
import pytest

from dssprune import experiment as E
from dssprune.checkpoint import load_checkpoint, save_checkpoint
from dssprune.config import DataConfig, TrainConfig
from dssprune.data import Dataset
from dssprune.errors import FormatError, InputError, RunError
from dssprune.metrics import HEADER, MetricsRecord, export_metrics, format_metrics, parse_metrics, read_metrics
from dssprune.model import build_convnet
from dssprune.pruning import PrunePlan, apply_prune, make_plan
from dssprune.saliency import Method, l2_scores


@pytest.fixture(scope="module")
def domains():
    return E.load_domains(DataConfig(train_size=600, eval_size=200))


def small_cfg(**kw):
    base = dict(epochs=1, finetune_epochs=1, batch_size=64, sparsity_ratio=0.4, sample_cap=200)
    base.update(kw)
    return TrainConfig(**base)


def params_of(model):
    return [p.data.copy() for p in model.parameters()]


# ------------------------------------------------------------------ training


def test_zero_epochs_leaves_parameters(domains):
    source, _ = domains
    m = build_convnet(seed=0)
    before = params_of(m)
    _, hist = E.train(m, source.train, small_cfg(epochs=0))
    assert hist == []
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))
    E.finetune(m, source.train, small_cfg(finetune_epochs=0))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))


def test_loss_decreases_on_1k_subset():
    source, _ = E.load_domains(DataConfig(train_size=1000, eval_size=10))
    _, hist = E.train(build_convnet(seed=0), source.train, small_cfg(epochs=3))
    assert len(hist) == 3 and hist[-1] < hist[0]


def test_training_is_deterministic(domains):
    source, _ = domains
    a, ha = E.train(build_convnet(seed=2), source.train.subset(0, 200), small_cfg(seed=2))
    b, hb = E.train(build_convnet(seed=2), source.train.subset(0, 200), small_cfg(seed=2))
    assert ha == hb
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def test_divergence_is_a_run_error(domains):
    source, _ = domains
    with np.errstate(all="ignore"), pytest.raises(RunError) as info:
        E.train(build_convnet(seed=0), source.train.subset(0, 128), small_cfg(lr=1e12, momentum=0.0))
    assert info.value.stage == "train" and info.value.epoch == 0


# ---------------------------------------------------------------- evaluate


def constant_model(cls):
    m = build_convnet(seed=0)
    fc3 = m.layer("fc3").params
    fc3["weight"].data[...] = 0
    fc3["bias"].data[...] = 0
    fc3["bias"].data[cls] = 1
    return m


def test_evaluate_constant_class():
    imgs = np.random.default_rng(0).random((20, 3, 28, 28), dtype=np.float32)
    m = constant_model(3)
    assert E.evaluate(m, Dataset(imgs, np.full(20, 3), "x")) == 1.0
    assert E.evaluate(m, Dataset(imgs, np.full(20, 4), "x")) == 0.0


def test_evaluate_random_model_near_chance():
    source, _ = E.load_domains(DataConfig(train_size=1000, eval_size=10))
    acc = E.evaluate(build_convnet(seed=11), source.train)
    assert abs(acc - 0.1) <= 0.05


def test_evaluate_empty():
    with pytest.raises(InputError):
        E.evaluate(build_convnet(seed=0), Dataset(np.zeros((0, 3, 28, 28), np.float32), np.zeros(0, int), "x"))


def test_finetune_recovers_source_accuracy(domains):
    source, _ = domains
    after_prune, after_ft = [], []
    for seed in range(3):
        cfg = small_cfg(seed=seed, epochs=2, finetune_epochs=1, finetune_lr=0.01)
        model, _ = E.train(build_convnet(seed=seed), source.train, cfg)
        pruned = apply_prune(model, make_plan({l: l2_scores(model, l) for l in model.prunable_layers}, 0.4))
        after_prune.append(E.evaluate(pruned, source.eval))
        E.finetune(pruned, source.train, cfg)
        after_ft.append(E.evaluate(pruned, source.eval))
    assert np.mean(after_ft) >= np.mean(after_prune)


# ------------------------------------------------------------------ pipeline


def test_zero_ratio_matches_baseline(domains, tmp_path):
    source, target = domains
    cfg = small_cfg(sparsity_ratio=0.0)
    base = E.prepare_baseline(cfg, source, target)
    for method in Method:
        rec = E.run_pipeline(cfg.replace(score_method=method), source, target, tmp_path, base)
        assert rec.target_acc_before_ft == rec.target_acc_after_ft == base.target_acc
        assert rec.source_acc == base.source_acc


def test_pipeline_writes_artifacts_and_is_deterministic(domains, tmp_path):
    source, target = domains
    cfg = small_cfg(seed=1)
    a = E.run_pipeline(cfg, source, target, tmp_path / "a")
    b = E.run_pipeline(cfg, source, target, tmp_path / "b")
    assert a.same_result(b)
    cell = tmp_path / "a" / "DSS_r0.400"
    for name in ("plan.txt", "pruned.ckpt", "finetuned.ckpt"):
        assert (cell / name).is_file()
    assert (tmp_path / "a" / "trained.ckpt").is_file()
    assert (tmp_path / "a" / "stats_target.bin").is_file()
    plan = PrunePlan.load(cell / "plan.txt")
    assert [len(e.kept) for e in plan.layers.values()] == [20, 29]
    assert 0 <= a.target_acc_before_ft <= 1 and 0 <= a.source_acc <= 1


def test_pipeline_rejects_foreign_baseline(domains):
    source, target = domains
    base = E.prepare_baseline(small_cfg(epochs=0), source, target)
    with pytest.raises(InputError):
        E.run_pipeline(small_cfg(epochs=0, seed=5), source, target, baseline=base)


def test_scoring_failure_keeps_trained_checkpoint(domains, tmp_path, monkeypatch):
    source, target = domains
    cfg = small_cfg(epochs=0)

    def boom(*a, **k):
        raise InputError("scoring exploded")

    monkeypatch.setattr(E, "score_layers", boom)
    with pytest.raises(RunError) as info:
        E.run_pipeline(cfg, source, target, tmp_path)
    assert info.value.stage == "score"
    reloaded = load_checkpoint(tmp_path / "trained.ckpt")
    fresh = build_convnet(seed=0)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(reloaded.parameters(), fresh.parameters()))


def test_sweep_counts_and_metrics(domains, tmp_path):
    source, target = domains
    csv_path = tmp_path / "m.csv"
    res = E.run_sweep(small_cfg(epochs=0, finetune_epochs=0), [0.0, 0.3], ["DSS", "L2"], [0, 1],
                      source, target, tmp_path, csv_path)
    assert res.ok and len(res.records) == 2 * 2 * 2
    assert read_metrics(csv_path) == res.records
    zero = [r for r in res.records if r.sparsity_ratio == 0.0]
    for seed in (0, 1):
        accs = {(r.target_acc_before_ft, r.target_acc_after_ft, r.source_acc) for r in zero if r.seed == seed}
        assert len(accs) == 1


def test_sweep_partial_failure(domains, tmp_path, monkeypatch):
    source, target = domains
    real = E.score_layers

    def flaky(model, method, *a, **k):
        if method is Method.L2:
            raise InputError("no L2 today")
        return real(model, method, *a, **k)

    monkeypatch.setattr(E, "score_layers", flaky)
    res = E.run_sweep(small_cfg(epochs=0, finetune_epochs=0), [0.2], ["DSS", "L2"], [0], source, target)
    assert not res.ok
    assert [r.method_tag for r in res.records] == ["DSS"]
    assert res.failures[0][:3] == (0.2, "L2", 0)


def test_sweep_rejects_bad_ratio(domains):
    with pytest.raises(InputError):
        E.run_sweep(small_cfg(), [1.0], ["DSS"], [0], *domains)


# --------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    for dtype in (np.float32, np.float64):
        m = build_convnet(seed=4, dtype=dtype)
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.describe() == m.describe()
        for (n1, p), (n2, q) in zip(m.named_parameters(), back.named_parameters()):
            assert n1 == n2 and p.dtype == q.dtype and np.array_equal(p.data, q.data)


def test_checkpoint_pruned_shapes(tmp_path):
    m = build_convnet(seed=0)
    pruned = apply_prune(m, make_plan({l: l2_scores(m, l) for l in m.prunable_layers}, 0.5))
    save_checkpoint(pruned, tmp_path / "p.ckpt")
    back = load_checkpoint(tmp_path / "p.ckpt")
    assert back.layer("conv1").params["weight"].shape == (16, 3, 5, 5)
    assert back.layer("conv2").params["weight"].shape == (24, 16, 5, 5)
    assert back.layer("fc1").params["weight"].shape == (100, 24 * 16)
    assert back.parameter_count() == pruned.parameter_count()


def test_checkpoint_rejects_damage(tmp_path):
    save_checkpoint(build_convnet(seed=0), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    cases = {
        "trunc": raw[:-10],
        "version": raw[:8] + struct.pack("<I", 2) + raw[12:],
        "magic": b"XXXXXXXX" + raw[8:],
        "trailing": raw + b"\0\0",
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)


# ------------------------------------------------------------------ metrics


RECS = [
    MetricsRecord("DSS", 0.4, 0, 0.977, 0.356, 0.3775, 42.63571136200005),
    MetricsRecord("L2", 0.1, 2, 1 / 3, 0.1 + 0.2, 0.0, 0.0),
]


def test_metrics_header_only(tmp_path):
    export_metrics([], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == ",".join(HEADER) + "\n"
    assert read_metrics(tmp_path / "m.csv") == []


def test_metrics_byte_identical_and_parse_back(tmp_path):
    export_metrics(RECS, tmp_path / "a.csv")
    export_metrics(RECS, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert read_metrics(tmp_path / "a.csv") == RECS


def test_metrics_append(tmp_path):
    from dssprune.metrics import append_metrics

    append_metrics(RECS[:1], tmp_path / "m.csv")
    append_metrics(RECS[1:], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == format_metrics(RECS)


def test_metrics_malformed():
    for text in ("", "a,b\n", ",".join(HEADER) + "\nDSS,0.4,0\n", ",".join(HEADER) + "\nDSS,x,0,1,1,1,1\n"):
        with pytest.raises(FormatError):
            parse_metrics(text)


def test_same_result_ignores_wall_time():
    a = RECS[0]
    b = MetricsRecord(*[*vars(a).values()][:-1], 1.0)
    assert a.same_result(b) and a != b
