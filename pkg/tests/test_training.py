import numpy as np
import pytest

from vstain.checkpoint import Checkpoint, CheckpointError
from vstain.config import (
    TrainConfig,
    desk_profile,
    dump_config,
    load_config,
    paper_profile,
    parse_config_text,
)
from vstain.models import build_vs_generator
from vstain.optim import Adam
from vstain.phantom import make_record
from vstain.training import TrainingDiverged, train_refocuser, train_virtual_stainer


def tiny(stage, **kw):
    base = dict(base_channels=4, disc_base_channels=2, batch_size=2, max_iterations=4, seed=3)
    base.update(kw)
    return desk_profile(stage, **base)


@pytest.fixture(scope="module")
def records():
    return [make_record(i, 100 + i, "train") for i in range(3)]


@pytest.fixture(scope="module")
def vs_run(records):
    return train_virtual_stainer(records, tiny("virtual_stainer"))


# -- configuration --------------------------------------------------------------


def test_profiles():
    vs, dr = paper_profile("virtual_stainer"), paper_profile("refocuser")
    assert (vs.gen_lr, vs.disc_lr, vs.batch_size, vs.patch_size) == (1e-4, 1e-5, 4, 512)
    assert (dr.gen_lr, dr.disc_lr, dr.batch_size) == (1e-5, 1e-6, 5)
    assert (vs.eta, vs.lam) == (2000.0, 0.02)
    assert (dr.a, dr.b, dr.c, dr.d, dr.e) == (300.0, 2000.0, 500.0, 100.0, 100.0)
    desk = desk_profile("refocuser")
    assert desk.patch_size == 64 and desk.scale_profile == "desk"
    with pytest.raises(ValueError):
        TrainConfig(stage="other")
    with pytest.raises(ValueError):
        TrainConfig(gen_lr=0)


def test_config_text_parsing(tmp_path):
    text = """
    # comment
    seed = 7
    augment = no
    vs.max_iterations = 11
    dr.max_iterations = 22
    dr.c = 0
    """
    vs = parse_config_text(text, stage="virtual_stainer")
    dr = parse_config_text(text, stage="refocuser")
    assert (vs.seed, vs.augment, vs.max_iterations, vs.c) == (7, False, 11, 500.0)
    assert (dr.max_iterations, dr.c) == (22, 0.0)
    for bad in ("nonsense = 1", "vs.nonsense = 1", "xx.seed = 1", "seed 1", "augment = maybe"):
        with pytest.raises(ValueError):
            parse_config_text(bad)
    path = tmp_path / "run.cfg"
    path.write_text(text)
    cfg = load_config(str(path), "refocuser")
    assert cfg.stage == "refocuser" and cfg.gen_lr == desk_profile("refocuser").gen_lr
    path.write_text("scale_profile = paper\n")
    assert load_config(str(path), "virtual_stainer").max_iterations == 40_000


def test_config_dump_round_trip():
    cfg = desk_profile("refocuser", seed=5, augment=False)
    assert parse_config_text(dump_config(cfg)) == cfg
    assert cfg.digest() == parse_config_text(dump_config(cfg)).digest()
    assert cfg.digest() != cfg.replace(seed=6).digest()


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_bytes_round_trip(vs_run, tmp_path):
    blob = vs_run.checkpoint.to_bytes()
    again = Checkpoint.from_bytes(blob)
    assert again.to_bytes() == blob
    path = str(tmp_path / "vs.ckpt")
    vs_run.checkpoint.save(path)
    assert Checkpoint.load(path).to_bytes() == blob
    net = again.network("generator")
    assert net.parameter_hash() == vs_run.generator.parameter_hash()
    assert again.iteration == 4 and again.config_digest == tiny("virtual_stainer").digest()


def test_checkpoint_corruption_and_mismatch(vs_run):
    blob = bytearray(vs_run.checkpoint.to_bytes())
    for mutate in (lambda b: b.__setitem__(0, 0), lambda b: b.__setitem__(len(b) // 2, b[len(b) // 2] ^ 1)):
        bad = bytearray(blob)
        mutate(bad)
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(bytes(bad))
    with pytest.raises(CheckpointError):
        vs_run.checkpoint.load_into(build_vs_generator(8), "generator")
    with pytest.raises(CheckpointError):
        vs_run.checkpoint.network("refocuser")


def test_optimizer_state_restores(vs_run):
    ckpt = vs_run.checkpoint
    net = ckpt.network("generator")
    opt = ckpt.restore_optimizer(Adam(net.parameters(), 1.0), "generator", net)
    assert opt.state.t == 4 and opt.lr == tiny("virtual_stainer").gen_lr
    assert all(m.shape == p.shape for m, p in zip(opt.state.m, net.parameters()))


# -- training -------------------------------------------------------------------


def test_stainer_training_is_bit_reproducible(records, vs_run):
    again = train_virtual_stainer(records, tiny("virtual_stainer"))
    assert again.checkpoint.to_bytes() == vs_run.checkpoint.to_bytes()
    assert [h["g_loss"] for h in again.history] == [h["g_loss"] for h in vs_run.history]
    other = train_virtual_stainer(records, tiny("virtual_stainer", seed=4))
    assert other.checkpoint.to_bytes() != vs_run.checkpoint.to_bytes()


def test_stainer_history(vs_run):
    assert [h["iteration"] for h in vs_run.history] == [1, 2, 3, 4]
    assert all(np.isfinite(h["g_loss"]) and h["mae"] >= 0 for h in vs_run.history)


def test_refocuser_training_reproducible_and_frozen(records, vs_run):
    seen = []
    a = train_refocuser(records, vs_run.checkpoint, tiny("refocuser"), callback=seen.append, check_every=1)
    b = train_refocuser(records, vs_run.checkpoint, tiny("refocuser"), check_every=1)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    assert len(seen) == 4 and seen[0]["style"] > 0
    assert a.stainer_hash == vs_run.generator.parameter_hash() == a.stainer.parameter_hash()
    assert a.checkpoint.extra["stainer_hash"] == a.stainer_hash
    assert all(p.grad is None or not np.any(p.grad) for p in a.stainer.parameters())
    assert set(a.checkpoint.architectures) == {"generator", "discriminator"}
    assert a.checkpoint.architectures["generator"]["variant"] == "refocuser"
    assert not a.ablation


def test_refocuser_ablation_without_style(records, vs_run):
    res = train_refocuser(records, vs_run.checkpoint, tiny("refocuser", c=0.0, max_iterations=2))
    assert res.ablation
    assert all(h["style"] == 0.0 for h in res.history)


def test_stage_ordering_and_arguments(records, vs_run):
    with pytest.raises(ValueError):
        train_refocuser(records, None, tiny("refocuser"))
    with pytest.raises(ValueError):
        train_refocuser(records, vs_run.checkpoint, tiny("virtual_stainer"))
    with pytest.raises(ValueError):
        train_virtual_stainer(records, tiny("refocuser"))
    with pytest.raises(ValueError):
        train_virtual_stainer([], tiny("virtual_stainer"))
    dr = train_refocuser(records, vs_run.checkpoint, tiny("refocuser", max_iterations=1))
    with pytest.raises(ValueError):
        train_refocuser(records, dr.checkpoint, tiny("refocuser"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(records):
    with pytest.raises(TrainingDiverged) as err:
        train_virtual_stainer(records, tiny("virtual_stainer", gen_lr=1e30, max_iterations=6))
    assert isinstance(err.value.checkpoint, Checkpoint)
