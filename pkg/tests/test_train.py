import math
from dataclasses import replace

import numpy as np
import pytest

from boxseq import model as M
from boxseq import train as T
from boxseq.codec import Vocab
from boxseq.geometry import LossWeights
from boxseq.scenegen import GenConfig, build_dataset

SMALL = dict(d_model=16, n_layers=1, n_heads=2, batch_size=4, scenes_per_batch=2)


@pytest.fixture(scope="module")
def vocab():
    return Vocab.default()


@pytest.fixture(scope="module")
def ds(vocab):
    return build_dataset(GenConfig(n_scenes=6, grid_size=4, test_fraction=0.2, seed=1), vocab)


@pytest.fixture(scope="module")
def cfg():
    return T.TrainConfig(steps=4, checkpoint_every=2, **SMALL)


def first_batch(ds, vocab, cfg, n=3):
    mcfg = cfg.model_config(len(vocab), ds.config.grid_size)
    samples = ds.samples_in("train")[:n]
    return mcfg, T.make_batch(samples, T.GridCache(ds), vocab, mcfg)


class TestConfig:
    def test_defaults(self):
        c = T.TrainConfig()
        assert (c.alpha, c.beta, c.gamma, c.delta) == (0.2, 0.8, 0.2, 0.8)
        assert (c.lr, c.warmup_fraction, c.steps, c.batch_size) == (3e-4, 0.05, 5000, 16)
        assert c.warmup_steps == 250

    def test_clm_forces_zero_beta(self):
        assert T.TrainConfig(regime="clm").effective_beta == 0.0
        assert T.TrainConfig(regime="clm_arl").effective_beta == 0.8

    @pytest.mark.parametrize("bad", [dict(steps=0), dict(batch_size=0), dict(regime="mse"),
                                     dict(alpha=-1.0), dict(precision="fp32")])
    def test_rejects(self, bad):
        with pytest.raises((T.TrainError, ValueError)):
            T.TrainConfig(**bad)

    def test_dict_roundtrip(self):
        c = T.TrainConfig(seed=4, regime="clm")
        assert T.TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_field(self):
        with pytest.raises(T.TrainError):
            T.TrainConfig.from_dict({"learning_rate": 1.0})


class TestCLMLoss:
    def test_uniform_logits(self):
        logits = np.zeros((3, 10))
        got = T.clm_loss(logits, [1, 2, 3], [True, True, False])
        assert abs(got - 2 * math.log(10)) <= 1e-12

    def test_single_position(self):
        assert abs(T.clm_loss(np.zeros((2, 10)), [0, 4], [True, False]) - math.log(10)) <= 1e-12

    def test_confident_limit(self):
        z = np.zeros((2, 5))
        z[0, 3] = 50.0
        assert T.clm_loss(z, [0, 3], [True, False]) < 1e-20

    def test_matches_log_sum_exp(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((6, 7)) * 3
        toks = rng.integers(0, 7, 6)
        mask = np.array([False, True, True, False, True, False])
        expected = 0.0
        for t in np.flatnonzero(mask):
            expected += math.log(sum(math.exp(v) for v in z[t])) - z[t, toks[t + 1]]
        assert abs(T.clm_loss(z, toks, mask) - expected) <= 1e-12

    def test_empty_mask(self):
        with pytest.raises(T.EmptyMask):
            T.clm_loss(np.zeros((3, 4)), [0, 1, 2], [False] * 3)

    def test_last_position_unsupervisable(self):
        with pytest.raises(T.TrainError):
            T.clm_loss(np.zeros((2, 4)), [0, 1], [False, True])


class TestTotalLoss:
    def test_combination(self):
        assert T.total_loss(1.0, 1.0) == pytest.approx(1.0, abs=1e-15)
        assert T.total_loss(2.0, 0.5) == pytest.approx(0.8, abs=1e-15)

    def test_clm_regime(self):
        assert T.total_loss(2.0, 100.0, regime="clm") == 0.2 * 2.0

    def test_custom_weights(self):
        w = LossWeights(alpha=1.0, beta=0.0)
        assert T.total_loss(3.0, 7.0, w) == 3.0


class TestBatch:
    def test_mask_covers_response(self, ds, vocab, cfg):
        mcfg, batch = first_batch(ds, vocab, cfg)
        for b, x in enumerate(ds.samples_in("train")[:3]):
            n_ctx = len(M.context_tokens(vocab, mcfg, x.prompt))
            rows = np.flatnonzero(batch.mask[b])
            assert rows[0] == n_ctx and rows[-1] == batch.lengths[b] - 2
            assert batch.targets[b, rows].tolist() == list(x.response[1:])

    def test_sampling_is_per_step(self, ds, cfg):
        by_scene = {}
        for x in ds.samples_in("train"):
            by_scene.setdefault(x.scene_id, []).append(x)
        a = T.sample_batch(by_scene, 7, cfg)
        assert a == T.sample_batch(by_scene, 7, cfg)
        assert len(a) == cfg.batch_size
        assert len({x.scene_id for x in a}) <= cfg.scenes_per_batch


class TestGradients:
    def test_clm_regime_zero_arl_grads(self, ds, vocab, cfg):
        c = replace(cfg, regime="clm")
        mcfg, batch = first_batch(ds, vocab, c)
        params = M.init_params(mcfg, 0)
        params["arl_w2"] = np.random.default_rng(0).standard_normal(params["arl_w2"].shape)
        grads, parts = T.backward(params, mcfg, batch, c)
        for k in M.ARL_PARAMS:
            assert not grads[k].any(), k
        assert parts.arl > 0 and parts.total == 0.2 * parts.clm

    def test_beta_zero_matches_clm(self, ds, vocab, cfg):
        mcfg, batch = first_batch(ds, vocab, cfg)
        params = M.init_params(mcfg, 0)
        g1, _ = T.backward(params, mcfg, batch, replace(cfg, regime="clm"))
        g2, _ = T.backward(params, mcfg, batch, replace(cfg, beta=0.0))
        assert all(np.array_equal(g1[k], g2[k]) for k in g1)

    def test_heads_at_rest_give_zero_backbone_grad(self, ds, vocab, cfg):
        c = replace(cfg, squash=False)
        mcfg, batch = first_batch(ds, vocab, c, n=1)
        params = M.init_params(mcfg, 0)
        params["arl_w2"] = np.zeros_like(params["arl_w2"])
        params["arl_b2"] = batch.gold[0].copy()
        params["lm_w"] = np.zeros_like(params["lm_w"])
        grads, _ = T.backward(params, mcfg, batch, c)
        for k, g in grads.items():
            if k not in ("lm_w", "arl_w2", "arl_b2"):
                assert not g.any(), k

    def test_gradcheck_small(self, ds, vocab, cfg):
        mcfg, batch = first_batch(ds, vocab, cfg, n=2)
        params = M.init_params(mcfg, 0)
        rng = np.random.default_rng(1)
        for k in params:
            if k.startswith("arl_") or k.endswith("_b"):
                params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
        rep = T.gradcheck_batch(params, mcfg, batch, cfg, n_probes=60, seed=2)
        assert rep["passed"], rep
        assert rep["n_probes"] - rep["n_skipped_kinks"] >= 50

    def test_gradcheck_zero_probes(self):
        rep = T.gradcheck(T.TrainConfig(**SMALL), n_probes=0, grid_size=4)
        assert rep["passed"] and rep["max_rel_err"] == 0.0

    def test_gradcheck_detects_fault(self, ds, vocab, cfg):
        mcfg, batch = first_batch(ds, vocab, cfg, n=2)
        params = M.init_params(mcfg, 0)
        names = list(params)
        rep = T.gradcheck_batch(params, mcfg, batch, cfg, n_probes=2 * len(names), fault="l0.ff1_w")
        assert not rep["passed"]
        assert rep["worst_tensor"] == "l0.ff1_w"

    def test_geometry_gradcheck(self):
        rep = T.gradcheck_geometry(200, seed=3)
        assert rep["passed"], rep


class TestOptimizer:
    def test_warmup(self):
        c = T.TrainConfig(steps=100, warmup_fraction=0.1, lr=1e-3)
        assert T.lr_at(1, c) == pytest.approx(1e-4)
        assert T.lr_at(5, c) == pytest.approx(5e-4)
        assert T.lr_at(10, c) == 1e-3
        assert T.lr_at(80, c) == 1e-3

    def test_zero_grads_leave_params(self, cfg):
        params = {"a": np.arange(4.0), "b": np.ones((2, 2))}
        opt = T.Adam(params)
        new = T.optimizer_step(params, {k: np.zeros_like(v) for k, v in params.items()}, 1, cfg, opt)
        assert all(np.array_equal(new[k], params[k]) for k in params)

    def test_first_step_moves_by_lr(self):
        c = T.TrainConfig(steps=10, warmup_fraction=0.0, lr=0.01)
        params = {"a": np.zeros(3)}
        new = T.optimizer_step(params, {"a": np.array([2.0, -0.5, 0.0])}, 1, c, T.Adam(params))
        np.testing.assert_allclose(new["a"], [-0.01, 0.01, 0.0], rtol=1e-6)

    def test_shape_mismatch(self, cfg):
        params = {"a": np.zeros(3)}
        with pytest.raises(T.TrainError):
            T.optimizer_step(params, {"a": np.zeros(4)}, 1, cfg, T.Adam(params))

    def test_state_roundtrip(self):
        params = {"a": np.zeros(3)}
        opt = T.Adam(params)
        opt.m["a"] += 1
        other = T.Adam(params)
        other.load_state(opt.state())
        assert np.array_equal(other.m["a"], opt.m["a"])


class TestTrainRun:
    def test_one_step(self, ds, vocab, tmp_path):
        c = T.TrainConfig(steps=1, **SMALL)
        _, _, log, _ = T.train_run(ds, c, vocab, out_dir=tmp_path)
        assert len(log) == 1
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_000001.ckpt"]
        assert len(T.read_train_log(tmp_path / "logs" / "train_log.csv")) == 1

    def test_regimes_share_first_clm(self, ds, vocab):
        a = T.train_run(ds, T.TrainConfig(steps=1, regime="clm", **SMALL), vocab)[2]
        b = T.train_run(ds, T.TrainConfig(steps=1, regime="clm_arl", **SMALL), vocab)[2]
        assert a[0]["clm"] == b[0]["clm"] and a[0]["arl"] == b[0]["arl"]

    def test_deterministic(self, ds, vocab, cfg):
        p1, _, l1, _ = T.train_run(ds, cfg, vocab)
        p2, _, l2, _ = T.train_run(ds, cfg, vocab)
        assert l1 == l2
        assert all(np.array_equal(p1[k], p2[k]) for k in p1)

    def test_logged_total_decomposes(self, ds, vocab, cfg):
        for r in T.train_run(ds, cfg, vocab)[2]:
            assert abs(r["total"] - (0.2 * r["clm"] + 0.8 * r["arl"])) <= 1e-12

    def test_log_csv_roundtrip(self, ds, vocab, cfg, tmp_path):
        _, _, log, _ = T.train_run(ds, cfg, vocab, out_dir=tmp_path)
        assert T.read_train_log(tmp_path / "logs" / "train_log.csv") == log

    def test_resume_matches_uninterrupted(self, ds, vocab, cfg, tmp_path):
        p_full, _, log_full, _ = T.train_run(ds, cfg, vocab, out_dir=tmp_path / "a")
        ckpt = tmp_path / "a" / "checkpoints" / T.checkpoint_name(2)
        p_res, _, log_res, _ = T.train_run(ds, cfg, vocab, out_dir=tmp_path / "b", resume_from=ckpt)
        assert all(np.array_equal(p_full[k], p_res[k]) for k in p_full)
        assert log_res == log_full[2:]

    def test_eval_callback(self, ds, vocab, cfg):
        seen = []

        def cb(step, params, mcfg):
            seen.append(step)
            return {"x": 1}

        _, _, _, ev = T.train_run(ds, replace(cfg, eval_every=2), vocab, on_eval=cb)
        assert seen == [2, 4] and ev == [{"step": 2, "x": 1}, {"step": 4, "x": 1}]

    def test_non_finite_aborts(self, ds, vocab, tmp_path, monkeypatch):
        c = T.TrainConfig(steps=3, checkpoint_every=1, **SMALL)
        real = T.backward

        def poisoned(params, mcfg, batch, cfg):
            grads, parts = real(params, mcfg, batch, cfg)
            if len(list((tmp_path / "checkpoints").iterdir())) == 2:
                grads["l0.ff1_w"] = grads["l0.ff1_w"] * np.nan
            return grads, parts

        monkeypatch.setattr(T, "backward", poisoned)
        with pytest.raises(T.TrainingAborted) as info:
            T.train_run(ds, c, vocab, out_dir=tmp_path)
        assert info.value.last_checkpoint.name == T.checkpoint_name(2)
        assert len(T.read_train_log(tmp_path / "logs" / "train_log.csv")) == 2

    def test_split_loss(self, ds, vocab, cfg):
        mcfg = cfg.model_config(len(vocab), ds.config.grid_size)
        params = M.init_params(mcfg, 0)
        out = T.split_loss(params, mcfg, ds, "test", cfg, vocab, chunk=5)
        ref = T.split_loss(params, mcfg, ds, "test", cfg, vocab, chunk=1000)
        assert out["clm"] == pytest.approx(ref["clm"], rel=1e-12)
        assert out["total"] == pytest.approx(0.2 * out["clm"] + 0.8 * out["arl"], rel=1e-12)
