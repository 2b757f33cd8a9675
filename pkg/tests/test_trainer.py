import math

import numpy as np
import pytest

from laplamba import hazegen, network, trainer
from laplamba.errors import ConfigError, FormatError, NonFiniteError
from laplamba.nn import Parameter

TINY = dict(channels=[4, 8, 8, 8, 8, 8, 4], M=[0, 1, 0, 1, 0, 1, 0], N=[1, 0, 0, 1, 0, 0, 1], nstate=4)


def tiny_model(seed=0):
    return network.build(network.NetworkConfig(**TINY), seed)


@pytest.fixture(scope="module")
def data():
    pairs = hazegen.make_pairs(6, 40, seed=9)
    return np.stack([p.hazy for p in pairs]), np.stack([p.clear for p in pairs])


def cfg(**kw):
    base = dict(iterations=6, batch=2, crop=32, log_every=2, checkpoint_every=3)
    base.update(kw)
    return trainer.TrainConfig(**base)


# ---------------------------------------------------------------- schedule
def test_cosine_values():
    assert trainer.cosine_lr(0, 2000) == 5e-4
    assert trainer.cosine_lr(2000, 2000) == 1e-7
    assert trainer.cosine_lr(1000, 2000) == pytest.approx((5e-4 + 1e-7) / 2, rel=1e-12)
    assert trainer.cosine_lr(2500, 2000) == 1e-7
    lrs = [trainer.cosine_lr(s, 100) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ConfigError):
        trainer.cosine_lr(-1, 10)


# ---------------------------------------------------------------- Adam
def scalar_param(v):
    return Parameter(np.array(float(v)))


def test_adam_first_step_hand_value():
    p = scalar_param(1.0)
    opt = trainer.Adam([("w", p)])
    p.grad = np.array(1.0)
    opt.step(0.1)
    # bias-corrected m = v = g on step 1, so the update is lr * g / (|g| + eps)
    assert 1.0 - p.data == pytest.approx(0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_grad_leaves_params_and_decays_moments():
    p = scalar_param(2.0)
    opt = trainer.Adam([("w", p)])
    p.grad = np.array(0.0)
    opt.step(0.01)
    assert float(p.data) == 2.0
    p.grad = np.array(0.5)
    opt.step(0.01)
    m0, v0 = float(opt.m["w"]), float(opt.v["w"])
    p.grad = np.array(0.0)
    opt.step(0.0)
    assert float(opt.m["w"]) == pytest.approx(0.9 * m0, rel=1e-14)
    assert float(opt.v["w"]) == pytest.approx(0.999 * v0, rel=1e-14)


def test_adam_converges_on_quadratic():
    w = scalar_param(0.0)
    opt = trainer.Adam([("w", w)])
    for _ in range(100):
        w.grad = 2.0 * (w.data - 3.0)
        opt.step(0.1)
    assert abs(float(w.data) - 3.0) < 0.5


def test_adam_rejects_nan_and_names_parameter():
    a, b = scalar_param(1.0), scalar_param(2.0)
    opt = trainer.Adam([("good", a), ("bad.weight", b)])
    a.grad, b.grad = np.array(1.0), np.array(np.nan)
    with pytest.raises(NonFiniteError, match="bad.weight"):
        opt.step(0.1)
    assert float(a.data) == 1.0 and opt.step_count == 0


def test_clip_grad_norm():
    ps = [Parameter(np.zeros(2)), Parameter(np.zeros(1))]
    ps[0].grad, ps[1].grad = np.array([3.0, 0.0]), np.array([4.0])
    assert trainer.clip_grad_norm(ps, 1.0) == pytest.approx(5.0)
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in ps))
    assert total == pytest.approx(1.0, rel=1e-9)


# ---------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip(tmp_path):
    m = tiny_model()
    opt = trainer.Adam(m.named_parameters())
    ck = trainer.make_checkpoint(m, opt, 7, 3)
    path = trainer.save_checkpoint(tmp_path / "a.lpmb", ck)
    back = trainer.load_checkpoint(path)
    assert list(back.tensors) == list(ck.tensors)
    assert all(back.tensors[k].tobytes() == np.asarray(ck.tensors[k]).tobytes() for k in ck.tensors)
    assert back.tensors["param/levels.1.lsrbs.0.beta"].shape == ()
    assert trainer.encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_corruption_is_rejected(tmp_path):
    m = tiny_model()
    ck = trainer.make_checkpoint(m, trainer.Adam(m.named_parameters()), 1, 0)
    raw = trainer.encode_checkpoint(ck)
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + (99).to_bytes(4, "little") + raw[8:],
        "truncated": raw[:-5],
        "trailing": raw + b"\x00",
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(FormatError):
            trainer.load_checkpoint(tmp_path / name)
    with pytest.raises(FormatError):
        trainer.load_checkpoint(tmp_path / "missing.lpmb")


def test_restore_is_all_or_nothing():
    m = tiny_model(0)
    opt = trainer.Adam(m.named_parameters())
    ck = trainer.make_checkpoint(tiny_model(1), opt, 2, 0)
    del ck.tensors["adam.v/intro.weight"]
    before = m.state_dict()
    with pytest.raises(FormatError):
        trainer.restore(m, opt, ck)
    after = m.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    other = network.build(network.NetworkConfig(**dict(TINY, nstate=5)), 0)
    with pytest.raises(FormatError):
        trainer.restore(other, trainer.Adam(other.named_parameters()), ck)


# ---------------------------------------------------------------- training loop
def test_sample_batch_deterministic(data):
    a = trainer.sample_batch(*data, seed=1, step=5, batch=3, crop=32)
    b = trainer.sample_batch(*data, seed=1, step=5, batch=3, crop=32)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = trainer.sample_batch(*data, seed=1, step=6, batch=3, crop=32)
    assert not np.array_equal(a[0], c[0])


def test_one_iteration_smoke():
    pairs = hazegen.make_pairs(4, 64, seed=2)
    hazy, clear = np.stack([p.hazy for p in pairs]), np.stack([p.clear for p in pairs])
    res = trainer.train(tiny_model(), hazy, clear, trainer.TrainConfig(iterations=1))
    assert len(res.step_losses) == 1 and res.rows[0]["step"] == 1


def test_log_rows_and_checkpoints(tmp_path, data):
    res = trainer.train(tiny_model(), *data, cfg(), val=data, out_dir=tmp_path)
    assert [r["step"] for r in res.rows] == [1, 2, 4, 6]
    assert all(r["psnr_val"] is not None for r in res.rows)
    assert (tmp_path / "checkpoint.lpmb").exists()
    trainer.write_log(tmp_path / "log.csv", res.rows)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,lr,recon,freq,total,psnr_val" and len(lines) == 5


def test_identical_seeds_identical_logs(data):
    a = trainer.train(tiny_model(), *data, cfg())
    b = trainer.train(tiny_model(), *data, cfg())
    assert [trainer.format_row(r) for r in a.rows] == [trainer.format_row(r) for r in b.rows]
    assert a.step_losses == b.step_losses


def test_resume_matches_uninterrupted(tmp_path, data):
    full = trainer.train(tiny_model(), *data, cfg())
    part = trainer.train(tiny_model(), *data, cfg(), out_dir=tmp_path, stop_after=3)
    rest = trainer.train(tiny_model(), *data, cfg(), out_dir=tmp_path, resume=tmp_path / "checkpoint.lpmb")
    assert part.step_losses + rest.step_losses == full.step_losses
    assert trainer.format_row(rest.rows[-1]) == trainer.format_row(full.rows[-1])
    with pytest.raises(ConfigError):
        trainer.train(tiny_model(), *data, cfg(), resume=tmp_path / "checkpoint.lpmb", dataset_seed=5)


def test_nonfinite_loss_aborts_and_keeps_checkpoint(tmp_path, data):
    class Exploding:
        def __init__(self):
            self.inner = tiny_model()
            self.calls = 0
            self.cfg = self.inner.cfg

        def __getattr__(self, name):
            return getattr(self.inner, name)

        def __call__(self, x):
            self.calls += 1
            out = self.inner(x)
            if self.calls > 3:
                return out * float("nan")
            return out

    good = cfg(checkpoint_every=2)
    with pytest.raises(NonFiniteError, match="last good checkpoint"):
        trainer.train(Exploding(), *data, good, out_dir=tmp_path)
    ck = trainer.load_checkpoint(tmp_path / "checkpoint.lpmb")
    assert int(ck.meta("step")) == 2


def test_loss_decreases_over_short_run(data):
    res = trainer.train(tiny_model(), *data, cfg(iterations=30, log_every=10, lr_max=2e-3))
    assert np.mean(res.step_losses[-5:]) < np.mean(res.step_losses[:5])


def test_train_config_validation(data):
    for bad in (dict(iterations=0), dict(batch=0), dict(lr_min=1.0), dict(beta1=1.0)):
        with pytest.raises(ConfigError):
            trainer.train(tiny_model(), *data, cfg(**bad))
    with pytest.raises(ConfigError):
        trainer.train(tiny_model(), data[0], data[1][:3], cfg())


def test_evaluate_reports_metrics(data):
    out = trainer.evaluate(tiny_model(), *data)
    assert set(out) == {"psnr", "ssim", "psnr_input"}
    assert all(np.isfinite(v) for v in out.values())
