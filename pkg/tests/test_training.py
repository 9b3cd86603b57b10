import math

import numpy as np
import pytest

from selgen import diffcore as dc
from selgen import training as T
from selgen.corpus import FeatureSpec, build_vocab, make_example
from selgen.diffcore import ParamStore
from selgen.model import checkpoint_digest, dumps_checkpoint, load_checkpoint, loss

TINY = dict(hidden_size=6, embed_size=6, gamma=3.0)


def test_adam_zero_gradient_is_a_no_op():
    ps = ParamStore([("w", [1.0, -2.0])])
    st = T.AdamState.for_params(ps)
    T.adam_step(ps, {"w": np.zeros(2)}, st)
    assert ps["w"].data.tolist() == [1.0, -2.0] and st.t == 1


def test_adam_moment_decay():
    ps = ParamStore([("w", [0.0])])
    st = T.AdamState.for_params(ps)
    st.m["w"][:] = 0.5
    T.adam_step(ps, {"w": np.zeros(1)}, st)
    assert np.allclose(st.m["w"], 0.45) and np.all(st.v["w"] == 0.0)


def test_adam_first_step_closed_form():
    ps = ParamStore([("a", [0.0]), ("b", [3.0])])
    st = T.AdamState.for_params(ps, lr=1e-3)
    T.adam_step(ps, {"a": np.array([1.0]), "b": np.array([1.0])}, st)
    # m_hat = 1, v_hat = 1 at t=1, so the step is lr / (1 + eps)
    assert ps["a"].data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)
    assert ps["b"].data[0] - 3.0 == pytest.approx(ps["a"].data[0], abs=1e-15)


def test_adam_rejects_non_finite_and_names_parameter():
    ps = ParamStore([("ok", [0.0]), ("bad", [0.0])])
    st = T.AdamState.for_params(ps)
    with pytest.raises(T.TrainingDiverged, match="bad"):
        T.adam_step(ps, {"ok": np.zeros(1), "bad": np.array([np.nan])}, st)
    assert st.t == 0


def test_clip_preserves_direction():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    norm = T.clip_global_norm(g, 1.0)
    assert norm == 5.0
    assert np.allclose(g["a"], [0.6, 0.0]) and np.allclose(g["b"], [[0.8]])
    small = {"a": np.array([0.1])}
    T.clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


def test_batch_loss_is_the_mean(small_corpus):
    spec, vocab = FeatureSpec.from_corpus(small_corpus), build_vocab(small_corpus)
    from selgen.model import ModelConfig, init_params

    cfg = ModelConfig(feature_size=spec.width, vocab_size=len(vocab), **TINY)
    params = init_params(cfg, 0)
    exs = [make_example(s, spec, vocab) for s in small_corpus[:3]]
    tot, _, _ = T.batch_loss_and_grads(exs, params, cfg)
    singles = [loss(e, params, cfg)[0].item() for e in exs]
    assert tot == pytest.approx(np.mean(singles), rel=1e-12)


def test_overfit_single_scenario(small_corpus):
    one = small_corpus[:1]
    cfg = T.TrainConfig(batch_size=1, max_iters=300, max_epochs=1e9, eval_every=300, patience=5, lr=1e-2, seed=0)
    res = T.train(one, one, TINY, cfg)
    first = res.log.entries[0]
    spec, vocab = res.best.feature_spec, res.best.vocab
    from selgen.model import init_params

    init_nll = loss(make_example(one[0], spec, vocab), init_params(res.best.config, 0), res.best.config)[1].nll
    assert res.iterations == 300 and first["train_nll"] < init_nll
    final_nll = loss(make_example(one[0], spec, vocab), res.last.params, res.last.config)[1].nll
    assert final_nll < 0.1 * init_nll


def test_determinism(small_corpus):
    cfg = T.TrainConfig(batch_size=4, max_iters=6, eval_every=3, seed=5)
    a = T.train(small_corpus, small_corpus[:3], TINY, cfg)
    b = T.train(small_corpus, small_corpus[:3], TINY, cfg)
    assert dumps_checkpoint(a.best) == dumps_checkpoint(b.best)
    assert a.log.dumps() == b.log.dumps()
    c = T.train(small_corpus, small_corpus[:3], TINY, T.TrainConfig(batch_size=4, max_iters=6, eval_every=3, seed=6))
    assert checkpoint_digest(c.last) != checkpoint_digest(a.last)


def test_patience_one_with_zero_lr_stops_after_two_evaluations(small_corpus):
    cfg = T.TrainConfig(batch_size=2, max_iters=100, eval_every=1, patience=1, lr=0.0)
    res = T.train(small_corpus, small_corpus[:2], TINY, cfg)
    assert len(res.log.entries) == 2 and res.iterations == 2


def test_best_is_max_over_log(small_corpus):
    cfg = T.TrainConfig(batch_size=4, max_iters=12, eval_every=3, patience=10)
    res = T.train(small_corpus, small_corpus[:4], TINY, cfg)
    scores = [e["dev_sbleu"] for e in res.log.entries]
    assert res.log.best["dev_sbleu"] == max(scores)
    assert {"epoch", "train_loss", "train_nll", "train_G", "dev_sbleu", "dev_cbleu", "dev_f1"} <= set(res.log.entries[0])
    assert len(res.log.timings) == len(res.log.entries)


def test_max_epochs_bounds_iterations(small_corpus):
    res = T.train(small_corpus, small_corpus[:2], TINY, T.TrainConfig(batch_size=4, max_epochs=1.0, eval_every=100))
    assert res.iterations == math.ceil(len(small_corpus) / 4)


def test_divergence_dumps_last_good(small_corpus, tmp_path, monkeypatch):
    calls = {"n": 0}
    real = T.loss

    def flaky(ex, params, cfg, trace=None):
        calls["n"] += 1
        L, parts = real(ex, params, cfg, trace)
        if calls["n"] > 8:
            L = dc.scale(L, float("nan"))
        return L, parts

    monkeypatch.setattr(T, "loss", flaky)
    cfg = T.TrainConfig(batch_size=2, max_iters=20, eval_every=2)
    with pytest.raises(T.TrainingDiverged):
        T.train(small_corpus, small_corpus[:2], TINY, cfg, out_dir=tmp_path)
    assert load_checkpoint(tmp_path / "last_good.json").config.hidden_size == 6


def test_ensemble_seeds_differ(small_corpus):
    cfg = T.TrainConfig(batch_size=4, max_iters=2, eval_every=2, seed=3)
    members = T.ensemble_train(small_corpus, small_corpus[:2], TINY, cfg, k=2)
    assert len(members) == 2
    assert checkpoint_digest(members[0].last) != checkpoint_digest(members[1].last)
    solo = T.train(small_corpus, small_corpus[:2], TINY, T.TrainConfig(batch_size=4, max_iters=2, eval_every=2, seed=4))
    assert checkpoint_digest(solo.last) == checkpoint_digest(members[1].last)
    with pytest.raises(ValueError):
        T.ensemble_train(small_corpus, small_corpus, TINY, cfg, k=0)


def test_config_validation():
    for bad in (dict(batch_size=0), dict(patience=0), dict(eval_every=0)):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)
    with pytest.raises(ValueError):
        T.train([], [], TINY, T.TrainConfig())
