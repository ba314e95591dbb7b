import hashlib
import math

import numpy as np
import pytest

from gsa.attention import ConfigError, GsaConfig
from gsa.model import ModelConfig, TransformerLM
from gsa.rng import Rng
from gsa.tensor import Tensor
from gsa.training import (
    AdamW,
    TrainConfig,
    TrainingDivergedError,
    adamw_update,
    detect_spike,
    evaluate,
    lm_loss,
    make_task,
    read_metrics,
    sparse_step,
    train,
    warmup_step,
)


def tiny_model(mode="gsa", seed=0, **attn):
    a = dict(d=16, n_h=2, n_kv=1, d_k=8, d_I=4, H_I=2, k_base=4, k_min=2, k_max=8, mode=mode)
    a.update(attn)
    return TransformerLM(ModelConfig(n_layers=1, vocab_size=12, ffn_width=32, attention=GsaConfig(**a)), seed=seed)


def batches(seq_len=16, vocab=12, batch=4, seed=0, kind="copy"):
    return make_task(kind, seq_len, vocab, Rng(seed, "data"), batch)


def checksum(model, group):
    h = hashlib.sha256()
    groups = model.param_groups()
    for name, p in model.named_parameters().items():
        if groups[name] == group:
            h.update(p.data.tobytes())
    return h.hexdigest()


# -- config ---------------------------------------------------------------------

def test_phase_schedule():
    c = TrainConfig(dense_steps=2, warmup_steps=3, total_steps=10)
    assert [c.phase(s, True) for s in range(7)] == ["dense"] * 2 + ["warmup"] * 3 + ["sparse"] * 2
    assert c.phase(8, False) == "dense"


@pytest.mark.parametrize("bad", [
    dict(total_steps=0), dict(warmup_steps=10, total_steps=10), dict(dense_steps=6, warmup_steps=5, total_steps=10),
    dict(lr_multipliers={"other": 1.0}), dict(lr_multipliers={"base": 0.0}), dict(kl_weight=-1.0),
])
def test_train_config_rejects(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_train_config_round_trip_and_strict_keys():
    c = TrainConfig(warmup_steps=3, total_steps=9)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"warmup": 3})


# -- optimizer ------------------------------------------------------------------------

def test_adamw_two_steps_by_hand():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.95, 1e-8, 0.01
    p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    p, m, v = adamw_update(p, np.array([0.5]), m, v, 1, lr, b1, b2, eps, wd)
    # bias-corrected moments equal g and g^2 on the first step
    first = 1.0 - lr * wd * 1.0 - lr * 0.5 / (0.5 + eps)
    assert p[0] == pytest.approx(first, rel=1e-14)
    p, m, v = adamw_update(p, np.array([-0.25]), m, v, 2, lr, b1, b2, eps, wd)
    m2 = 0.9 * 0.05 + 0.1 * -0.25
    v2 = 0.95 * 0.0125 + 0.05 * 0.0625
    step = lr * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.9025)) + eps)
    assert p[0] == pytest.approx(first - lr * wd * first - step, rel=1e-14)


def test_indexer_group_moves_ten_times_further():
    params = {"a": Tensor(np.zeros(3), requires_grad=True), "b": Tensor(np.zeros(3), requires_grad=True)}
    cfg = TrainConfig(weight_decay=0.0, base_lr=1e-3, total_steps=2, warmup_steps=0)
    opt = AdamW(params, {"a": "base", "b": "indexer"}, cfg)
    for p in params.values():
        p.grad = np.array([1.0, -2.0, 0.5])
    opt.step()
    np.testing.assert_allclose(params["b"].data, 10 * params["a"].data, rtol=1e-12)
    assert abs(params["a"].data[0]) == pytest.approx(1e-3, rel=1e-6)


def test_adamw_skips_params_without_gradient():
    params = {"a": Tensor(np.ones((2, 2)), requires_grad=True)}
    opt = AdamW(params, {"a": "base"}, TrainConfig(total_steps=2, warmup_steps=0))
    opt.step()
    assert np.all(params["a"].data == 1.0) and not opt.state


def test_adamw_groups_must_be_exhaustive_and_disjoint():
    params = {"a": Tensor(np.ones(1), requires_grad=True), "b": Tensor(np.ones(1), requires_grad=True)}
    cfg = TrainConfig(total_steps=2, warmup_steps=0)
    with pytest.raises(ConfigError):
        AdamW(params, {"a": "base"}, cfg)
    with pytest.raises(ConfigError):
        AdamW.from_group_lists(params, {"base": ["a", "b"], "gates": ["b"]}, cfg)
    with pytest.raises(ConfigError):
        AdamW(params, {"a": "base", "b": "nope"}, cfg)


# -- phases ----------------------------------------------------------------------------

def test_warmup_updates_only_the_indexer():
    model = tiny_model()
    opt = AdamW(model.named_parameters(), model.param_groups(), TrainConfig(total_steps=2, warmup_steps=1))
    before = {g: checksum(model, g) for g in ("base", "gates", "indexer")}
    out = warmup_step(model, next(batches()), opt)
    assert out["kl_loss"] >= 0
    assert checksum(model, "base") == before["base"]
    assert checksum(model, "gates") == before["gates"]
    assert checksum(model, "indexer") != before["indexer"]


def test_zero_kl_weight_freezes_indexer_in_sparse_phase():
    model = tiny_model()
    opt = AdamW(model.named_parameters(), model.param_groups(), TrainConfig(total_steps=2, warmup_steps=0))
    before = checksum(model, "indexer")
    base = checksum(model, "base")
    sparse_step(model, next(batches()), opt, kl_weight=0.0)
    assert checksum(model, "indexer") == before
    assert checksum(model, "base") != base


def test_positive_kl_weight_moves_indexer_in_sparse_phase():
    model = tiny_model()
    opt = AdamW(model.named_parameters(), model.param_groups(), TrainConfig(total_steps=2, warmup_steps=0))
    before = checksum(model, "indexer")
    sparse_step(model, next(batches()), opt, kl_weight=0.1)
    assert checksum(model, "indexer") != before


def test_evaluate_leaves_model_and_state_untouched():
    model = tiny_model()
    model.states[0].v_bar, model.states[0].initialized = 0.3, True
    before = {g: checksum(model, g) for g in ("base", "gates", "indexer")}
    out = evaluate(model, [next(batches())])
    assert math.isfinite(out["lm_loss"])
    assert model.states[0].v_bar == 0.3
    assert before == {g: checksum(model, g) for g in ("base", "gates", "indexer")}


def test_divergence_raises_with_dump():
    model = tiny_model()
    model.head.data[...] = np.inf
    opt = AdamW(model.named_parameters(), model.param_groups(), TrainConfig(total_steps=2, warmup_steps=0))
    with pytest.raises(TrainingDivergedError) as err, np.errstate(invalid="ignore"):
        sparse_step(model, next(batches()), opt)
    assert "head" in err.value.dump["non_finite_params"]


# -- losses and spikes --------------------------------------------------------------------

def test_lm_loss_uniform_logits():
    assert float(lm_loss(Tensor(np.zeros((2, 3, 5))), np.zeros((2, 3), dtype=int)).data) == pytest.approx(math.log(5))


def test_spike_detection():
    hist = [1.0] * 100
    assert detect_spike(hist, 1.6)
    assert not detect_spike(hist, 1.4)
    assert not detect_spike(hist[:99], 10.0)
    assert detect_spike(hist + [2.0])


# -- tasks -------------------------------------------------------------------------------

def test_copy_task_second_half_repeats_first():
    b = next(batches(seq_len=10, batch=3))
    full = np.concatenate([b.tokens, b.targets[:, -1:]], axis=1)
    np.testing.assert_array_equal(full[:, 5:10], full[:, :5])
    np.testing.assert_array_equal(b.tokens[:, 1:], b.targets[:, :-1])


def test_induction_task_keys_followed_by_bound_value():
    b = next(make_task("induction", 64, 16, Rng(0, "data"), 4))
    full = np.concatenate([b.tokens, b.targets[:, -1:]], axis=1)
    for row in full:
        bound = {}
        for i in range(len(row) - 1):
            if row[i] < 4:
                assert bound.setdefault(row[i], row[i + 1]) == row[i + 1]


def test_bytes_task(tmp_path):
    path = tmp_path / "c.txt"
    path.write_bytes(bytes(range(256)) * 4)
    b = next(make_task("bytes", 8, 256, Rng(0, "data"), 2, str(path)))
    assert b.tokens.shape == (2, 8)
    np.testing.assert_array_equal((b.tokens + 1) % 256, b.targets)
    with pytest.raises(FileNotFoundError):
        next(make_task("bytes", 8, 256, Rng(0, "data"), 2, None))


def test_task_streams_deterministic():
    a, b = next(batches(seed=3)), next(batches(seed=3))
    assert np.array_equal(a.tokens, b.tokens)


# -- loop -------------------------------------------------------------------------------------

def test_train_writes_one_metrics_row_per_step(tmp_path):
    model = tiny_model()
    cfg = TrainConfig(dense_steps=20, warmup_steps=20, total_steps=120, batch_size=4, seq_len=16, base_lr=3e-3)
    path = tmp_path / "m.csv"
    rows = train(model, cfg, batches(), path)
    assert path.read_text().startswith("# gsa-metrics/1\n")
    read = read_metrics(path)
    assert len(read) == 120
    assert [r["phase"] for r in read[18:22]] == ["dense", "dense", "warmup", "warmup"]
    assert read[0]["kl_loss"] == "" and read[30]["kl_loss"] != ""
    assert all(math.isfinite(r["lm_loss"]) for r in rows)
    assert all(0 < r["mean_gate"] < 1 for r in rows)


def test_train_is_deterministic(tmp_path):
    cfg = TrainConfig(dense_steps=2, warmup_steps=3, total_steps=8, batch_size=2, seq_len=12)
    for name in ("a", "b"):
        train(tiny_model(seed=5), cfg, batches(seq_len=12, batch=2, seed=5), tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
