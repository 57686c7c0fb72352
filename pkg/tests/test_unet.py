import numpy as np
import pytest

from bayescmb.autodiff import Tensor
from bayescmb.training import ArchitectureMismatchError, transfer_weights
from bayescmb.unet import (
    CKPT_MAGIC,
    Checkpoint,
    UNet,
    UNetConfig,
    load_checkpoint,
    loss_heteroscedastic,
    loss_mse,
    model_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)

CFG = UNetConfig(nside=4, depth=2, widths=(4, 6), K=2)


@pytest.fixture
def x(rng):
    return rng.standard_normal((3, 9, 192))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(nside=6), dict(nside=4, depth=3, widths=(1, 2, 3)),
                                    dict(nside=4, depth=2, widths=(4,)), dict(nside=4, in_channels=3, depth=1, widths=(2,))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            UNetConfig(**kw)

    def test_dict_round_trip(self):
        assert UNetConfig.from_dict(CFG.to_dict()) == CFG
        assert CFG.replace(bayesian=True).bayesian


class TestForward:
    def test_shapes(self, x):
        mu, s = UNet(CFG)(Tensor(x))
        assert mu.shape == (3, 1, 192) and s is None
        model = UNet(CFG.replace(bayesian=True))
        mu, s = model(Tensor(x), np.random.default_rng(0))
        assert mu.shape == s.shape == (3, 1, 192)

    def test_bad_input(self, x):
        model = UNet(CFG)
        with pytest.raises(ValueError):
            model(Tensor(x[:, :8]))
        with pytest.raises(ValueError):
            model(Tensor(x[..., :48]))
        with pytest.raises(ValueError):
            UNet(CFG.replace(bayesian=True))(Tensor(x))

    def test_same_seed_same_weights(self):
        a, b = UNet(CFG, seed=3).state(), UNet(CFG, seed=3).state()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = UNet(CFG, seed=4).state()
        assert not np.array_equal(a["enc.0.convs.0.theta"], c["enc.0.convs.0.theta"])

    def test_eval_frozen_is_deterministic(self, x):
        model = UNet(CFG.replace(bayesian=True)).eval().set_dropout_mode("frozen")
        a = model(Tensor(x))
        b = model(Tensor(x))
        assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)

    def test_eval_is_per_sample(self, x):
        model = UNet(CFG).eval()
        full = model(Tensor(x))[0].data
        one = model(Tensor(x[1:2]))[0].data
        np.testing.assert_allclose(full[1:2], one, atol=1e-13)

    def test_parameter_names(self):
        names = set(UNet(CFG.replace(bayesian=True)).parameters())
        assert {"enc.0.convs.0.theta", "bottleneck.0.bns.1.gamma", "dec.1.drops.0.p_logit",
                "mean_head.theta", "logvar_head.bias"} <= names
        assert len(UNet(CFG.replace(bayesian=True)).dropouts()) == 2 * (2 * CFG.depth + 1)

    def test_kl_zero_for_deterministic(self):
        assert float(UNet(CFG).kl(1e-4, 10).data) == 0.0


class TestLossesOnModel:
    def test_batch_permutation_invariance(self, x, rng):
        model = UNet(CFG.replace(bayesian=True)).eval().set_dropout_mode("frozen")
        y = rng.standard_normal((3, 1, 192))
        perm = [2, 0, 1]
        mu, s = model(Tensor(x))
        mu_p, s_p = model(Tensor(x[perm]))
        assert float(loss_mse(mu, y).data) == pytest.approx(float(loss_mse(mu_p, y[perm]).data), rel=1e-13)
        a = float(loss_heteroscedastic(mu, s, y).data)
        b = float(loss_heteroscedastic(mu_p, s_p, y[perm]).data)
        assert a == pytest.approx(b, rel=1e-13)

    def test_mean_head_independent_of_logvar_head(self, x):
        model = UNet(CFG.replace(bayesian=True)).eval().set_dropout_mode("frozen")
        before = model(Tensor(x))[0].data
        model.logvar_head.bias.data += 5.0
        model.logvar_head.theta.data += 1.0
        np.testing.assert_array_equal(model(Tensor(x))[0].data, before)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, x):
        model = UNet(CFG.replace(bayesian=True), seed=2)
        model.train()(Tensor(x), np.random.default_rng(0))  # move running stats off defaults
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model_checkpoint(model, meta={"epoch": 3}, seed_label="s2"))
        ck = load_checkpoint(path)
        assert ck.meta == {"epoch": 3} and ck.seed_label == "s2"
        clone = model_from_checkpoint(ck)
        a, b = model.state(), clone.state()
        assert set(a) == set(b)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_bytes_stable(self, tmp_path):
        model = UNet(CFG)
        save_checkpoint(tmp_path / "a", model_checkpoint(model))
        save_checkpoint(tmp_path / "b", model_checkpoint(model_from_checkpoint(load_checkpoint(tmp_path / "a"))))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert (tmp_path / "a").read_bytes().startswith(CKPT_MAGIC)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, Checkpoint({}, {"a": np.arange(3.0)}))
        with open(path, "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, Checkpoint({}, {"a": np.arange(3.0)}))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_strict_state(self):
        model = UNet(CFG)
        state = model.state()
        state.pop("mean_head.bias")
        with pytest.raises(KeyError):
            model.load_state(state)
        state = model.state()
        state["mean_head.bias"] = np.zeros(2)
        with pytest.raises(ValueError):
            model.load_state(state)


class TestTransfer:
    def test_consistency(self, x, rng):
        det = UNet(CFG, seed=5)
        det.train()(Tensor(x))  # non-trivial running stats
        for p in det.parameters().values():
            p.data = p.data + rng.normal(0, 0.1, p.data.shape)
        bayes = transfer_weights(det, UNet(CFG.replace(bayesian=True), seed=9), seed=1)
        det.eval()
        bayes.eval().set_dropout_mode("frozen")
        a = det(Tensor(x))[0].data
        b = bayes(Tensor(x))[0].data
        assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, np.max(np.abs(a)))

    def test_new_parameters(self):
        bayes = transfer_weights(UNet(CFG), UNet(CFG.replace(bayesian=True)), seed=0)
        for d in bayes.dropouts():
            assert d.p_logit.data[0] == pytest.approx(-6.906754778648554, abs=1e-12)
        w = np.concatenate([bayes.logvar_head.theta.data.ravel(), bayes.logvar_head.bias.data])
        assert np.std(w) <= 3e-3 and np.max(np.abs(w)) <= 6e-3

    def test_from_checkpoint_path(self, tmp_path, x):
        det = UNet(CFG, seed=5)
        save_checkpoint(tmp_path / "d.ckpt", model_checkpoint(det))
        bayes = transfer_weights(tmp_path / "d.ckpt", UNet(CFG.replace(bayesian=True)))
        np.testing.assert_array_equal(bayes.enc[1].convs[0].theta.data, det.enc[1].convs[0].theta.data)

    def test_mismatch(self):
        with pytest.raises(ArchitectureMismatchError):
            transfer_weights(UNet(CFG), UNet(CFG.replace(bayesian=True, widths=(4, 8))))
        with pytest.raises(ArchitectureMismatchError):
            transfer_weights(UNet(CFG), UNet(CFG.replace(K=3, bayesian=True)))
        with pytest.raises(ArchitectureMismatchError):
            transfer_weights(UNet(CFG), UNet(CFG))
