import csv
import math

import numpy as np
import pytest

from motion2spec.data import PairSet
from motion2spec.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    IncompatibleCheckpointError,
    IntegrityError,
    NumericError,
    TrainingAborted,
)
from motion2spec.model import Discriminator, Translator, desk_preset
from motion2spec.numerics import Tensor, backward, grad
from motion2spec.training import (
    CSV_GAN,
    CSV_PLAIN,
    AdamState,
    Checkpoint,
    LossConfig,
    OptimConfig,
    discriminator_loss,
    fooling_loss,
    l1_loss,
    load_checkpoint,
    optimizer_step,
    predict,
    save_checkpoint,
    train,
    translator_loss,
)

SMALL = desk_preset(n_frames=4)


def _pairs(n=4, seed=0, cfg=SMALL):
    rng = np.random.default_rng(seed)
    motion = rng.standard_normal((n,) + cfg.motion_shape).astype(np.float32)
    target = rng.random((n, 1, 64, 64)).astype(np.float32)
    return PairSet(motion, target, [f"s{i:02d}" for i in range(n)])


# -- losses ----------------------------------------------------------------------------
def test_l1_examples():
    a = np.random.default_rng(0).random((1, 64, 64))
    assert l1_loss(a, a).item() == 0.0
    assert l1_loss(a + 0.1, a).item() == pytest.approx(0.1)
    b = np.random.default_rng(1).random((1, 64, 64))
    total = 0.0
    for i in range(64):
        for j in range(64):
            total += abs(a[0, i, j] - b[0, i, j])
    assert abs(l1_loss(a, b).item() - total / 4096) < 1e-12
    with pytest.raises(DimensionError):
        l1_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_discriminator_loss_examples():
    assert discriminator_loss([0.5], [0.5]).item() == pytest.approx(2 * math.log(2))
    assert discriminator_loss([1.0], [0.0]).item() < 1e-6
    assert discriminator_loss([0.8], [0.3]).item() == pytest.approx(-(math.log(0.8) + math.log(0.7)))
    with pytest.raises(ContractError):
        discriminator_loss([], [0.5])


def test_translator_loss_examples():
    assert translator_loss([0.5], 0.1, 1.0).item() == pytest.approx(math.log(2) + 0.1)
    assert translator_loss([0.0], 0.25, 2.0).item() == pytest.approx(0.5, abs=1e-6)
    assert translator_loss([0.5], 0.3, 0.0).item() == pytest.approx(math.log(2))
    with pytest.raises(ConfigError):
        translator_loss([0.5], 0.1, -1.0)


def test_fooling_loss_rewards_fakes_called_real():
    assert fooling_loss([0.5], 0.1).item() == pytest.approx(math.log(2) + 0.1)
    assert fooling_loss([1.0], 0.1).item() == pytest.approx(0.1, abs=1e-6)
    d = Tensor(np.array([0.3]), requires_grad=True)
    (g,) = grad(fooling_loss(d, 0.0), [d])
    assert g[0] < 0  # descent raises D(fake)


def test_clamping_keeps_losses_finite():
    assert math.isfinite(discriminator_loss([0.0], [1.0]).item())
    assert math.isfinite(translator_loss([1.0], 0.0).item())


def test_translator_gradient_never_sees_real_batch():
    cfg = desk_preset(n_frames=4)
    T, D = Translator(cfg), Discriminator(cfg)
    pairs = _pairs(2)
    fake = T(pairs.motion)
    d_real = D(pairs.target)
    loss = translator_loss(D(fake), l1_loss(fake, pairs.target))
    backward(loss)
    # the real-batch output is not on the translator loss path
    assert d_real.grad is None
    assert all(p.grad is not None for p in T.parameters())


# -- optimizer ----------------------------------------------------------------------------------
def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, 2.0])}
    optimizer_step(p, {"w": np.zeros(2)}, AdamState(), 0.1, OptimConfig())
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_adam_first_step_is_unit_update():
    p = {"w": np.array([0.0])}
    optimizer_step(p, {"w": np.array([1.0])}, AdamState(), 0.1, OptimConfig())
    assert p["w"][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_two_steps_match_hand_rolled():
    cfg = OptimConfig()
    p = {"w": np.array([0.3, -1.2])}
    st = AdamState()
    g1, g2 = np.array([0.5, -2.0]), np.array([-1.0, 0.25])
    optimizer_step(p, {"w": g1}, st, 0.01, cfg)
    optimizer_step(p, {"w": g2}, st, 0.01, cfg)

    w, m, v = np.array([0.3, -1.2]), np.zeros(2), np.zeros(2)
    for t, g in enumerate((g1, g2), start=1):
        m = 0.5 * m + 0.5 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.5**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.max(np.abs(p["w"] - w)) < 1e-10
    assert np.max(np.abs(st.m["w"] - m)) < 1e-10 and np.max(np.abs(st.v["w"] - v)) < 1e-10


def test_adam_nan_gradient_names_parameter():
    p = {"enc.w": np.zeros(2)}
    with pytest.raises(NumericError, match="enc.w"):
        optimizer_step(p, {"enc.w": np.array([np.nan, 0.0])}, AdamState(), 0.1, OptimConfig())
    np.testing.assert_array_equal(p["enc.w"], 0.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(lr_translator=0)
    with pytest.raises(ConfigError):
        LossConfig(beta=-0.5)
    with pytest.raises(ConfigError):
        LossConfig(adversarial="other")
    with pytest.raises(ConfigError):
        OptimConfig.from_dict({"learning_rate": 1})


# -- training loop -----------------------------------------------------------------------------
def test_gan_off_loss_is_plain_l1(tmp_path):
    res = train(_pairs(), SMALL, LossConfig(gan_enabled=False), OptimConfig(max_steps=2), out_dir=tmp_path)
    assert res.discriminator is None
    for row in res.history:
        assert row["loss_T"] == row["l1"]
    with open(res.csv_path) as fh:
        assert next(csv.reader(fh)) == CSV_PLAIN


def test_gan_run_logs_all_columns_and_finite(tmp_path):
    res = train(_pairs(), SMALL, LossConfig(), OptimConfig(max_steps=3, batch_size=2), out_dir=tmp_path)
    with open(res.csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_GAN
    for row in rows:
        assert all(math.isfinite(float(v)) for v in row.values())
        assert 0 <= float(row["d_real_acc"]) <= 1


def test_updates_touch_only_their_own_group():
    # a D step must not move T and vice versa: compare after one step with each lr near zero
    pairs = _pairs(2)
    tiny = 1e-30
    a = train(pairs, SMALL, LossConfig(), OptimConfig(max_steps=1, batch_size=2, lr_translator=tiny))
    ref = Translator(SMALL, seed=0)
    for (n, p), (_, q) in zip(a.translator.named_parameters(), ref.named_parameters()):
        assert np.allclose(p.data, q.data, atol=1e-20), n
    b = train(pairs, SMALL, LossConfig(), OptimConfig(max_steps=1, batch_size=2, lr_discriminator=tiny))
    ref_d = Discriminator(SMALL, seed=1)
    for (n, p), (_, q) in zip(b.discriminator.named_parameters(), ref_d.named_parameters()):
        assert np.allclose(p.data, q.data, atol=1e-20), n


def test_training_is_reproducible(tmp_path):
    cfg = OptimConfig(max_steps=3, batch_size=2, seed=4)
    train(_pairs(), SMALL, LossConfig(), cfg, out_dir=tmp_path / "a")
    train(_pairs(), SMALL, LossConfig(), cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_empty_and_mismatched_data():
    with pytest.raises(ContractError):
        train(_pairs(0), SMALL, LossConfig(), OptimConfig(max_steps=1))
    with pytest.raises(DimensionError):
        train(_pairs(2), desk_preset(), LossConfig(), OptimConfig(max_steps=1))


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    pairs = _pairs(2)
    pairs.target[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingAborted) as info:
        train(pairs, SMALL, LossConfig(gan_enabled=False), OptimConfig(max_steps=2), out_dir=tmp_path)
    assert info.value.checkpoint_path.exists()
    ckpt = load_checkpoint(info.value.checkpoint_path)
    assert "aborted" in ckpt.extra


def test_early_stop_rule():
    res = train(
        _pairs(2),
        SMALL,
        LossConfig(gan_enabled=False),
        OptimConfig(max_steps=50, batch_size=2, stop_l1_ratio=10.0, stop_corr2d=-1.0),
    )
    assert res.stopped_early and res.steps == 1


# -- checkpoints ----------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    res = train(_pairs(), SMALL, LossConfig(), OptimConfig(max_steps=2, batch_size=2), out_dir=out)
    return res


def test_checkpoint_round_trip_is_bit_exact(trained):
    ckpt = load_checkpoint(trained.checkpoint_path, expected=SMALL)
    x = _pairs(2, seed=9).motion
    assert np.array_equal(predict(ckpt.build_translator(), x), predict(trained.translator, x))
    for name, p in trained.discriminator.named_parameters():
        assert np.array_equal(ckpt.discriminator[name], p.data)
    assert ckpt.optimizer["T"].t == 2 and ckpt.step == 2


def test_checkpoint_byte_flip_is_integrity_error(trained, tmp_path):
    blob = bytearray(trained.checkpoint_path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "bad.m2sc"
    bad.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)


def test_checkpoint_truncated(trained, tmp_path):
    bad = tmp_path / "short.m2sc"
    bad.write_bytes(trained.checkpoint_path.read_bytes()[:100])
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)


def test_checkpoint_hash_mismatch(trained):
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(trained.checkpoint_path, expected=desk_preset())


def test_checkpoint_version_mismatch(tmp_path):
    import motion2spec.training as tr

    ckpt = Checkpoint(SMALL, Translator(SMALL).state_dict())
    save_checkpoint(tmp_path / "c.m2sc", ckpt)
    old = tr.CKPT_VERSION
    try:
        tr.CKPT_VERSION = old + 1
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(tmp_path / "c.m2sc")
    finally:
        tr.CKPT_VERSION = old


def test_checkpoint_header_layout(trained):
    blob = trained.checkpoint_path.read_bytes()
    assert blob[:4] == b"M2SC"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert blob[8:40] == SMALL.hash()
