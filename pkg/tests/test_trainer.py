import json

import numpy as np
import pytest

from scout.bank import BankConfig, ConjugateConfig, VoxelBank
from scout.errors import ParameterError, TrainingError
from scout.geometry import parallel_geometry
from scout.network import init_net, net_forward
from scout.trainer import (
    CONJUGATE,
    STATISTICAL,
    TrainConfig,
    denoise,
    loss_progress,
    sample_pair,
    train,
)
from scout.volume import ProjectionVolume, RandomSource


def make_bank(members, kind=STATISTICAL):
    cfg = BankConfig() if kind == STATISTICAL else ConjugateConfig()
    return VoxelBank([ProjectionVolume(m) for m in members], kind, cfg)


@pytest.fixture
def two_banks():
    g = np.random.default_rng(0)
    stat = make_bank([g.random((6, 10, 12)) for _ in range(3)])
    conj = make_bank([g.random((6, 10, 12)) for _ in range(3)], CONJUGATE)
    return stat, conj


def tag_fraction(banks, lam, n=10_000):
    cfg = TrainConfig(lam=lam, crop=(2, 2, 2))
    src = RandomSource(4)
    tags = [sample_pair(banks, cfg, src, t)[2] for t in range(n)]
    return tags.count(STATISTICAL) / n


def test_mixture_boundaries(two_banks):
    assert tag_fraction(two_banks, 1.0) == 1.0
    assert tag_fraction(two_banks, 0.0) == 0.0
    assert 0.47 <= tag_fraction(two_banks, 0.5) <= 0.53


def test_pair_shares_crop_and_uses_distinct_members(two_banks):
    cfg = TrainConfig(lam=1.0, crop=(3, 4, 5))
    stat = two_banks[0]
    for t in range(50):
        x, y, tag = sample_pair(two_banks, cfg, RandomSource(1), t)
        assert x.shape == y.shape == (3, 4, 5)
        hits = []
        for arr in (x, y):
            for j, m in enumerate(stat.volumes):
                d = m.data
                for z in range(6 - 2):
                    for r in range(10 - 3):
                        for c in range(12 - 4):
                            if np.array_equal(d[z : z + 3, r : r + 4, c : c + 5], arr):
                                hits.append((j, z, r, c))
        (ja, *ca), (jb, *cb) = hits
        assert ja != jb and ca == cb


def test_crop_clamped_to_volume(two_banks):
    x, y, _ = sample_pair(two_banks, TrainConfig(crop=(32, 64, 64)), RandomSource(0), 0)
    assert x.shape == (6, 10, 12)


def test_small_bank_rejected():
    one = make_bank([np.zeros((4, 4, 4))])
    with pytest.raises(ParameterError):
        sample_pair((one, None), TrainConfig(lam=1.0), RandomSource(0), 0)
    with pytest.raises(ParameterError):
        sample_pair((one, None), TrainConfig(lam=0.0), RandomSource(0), 0)


def test_config_validation_and_json():
    for kw in ({"lam": 1.5}, {"iterations": 0}, {"batch": 0}, {"crop": (0, 1, 1)}):
        with pytest.raises(ParameterError):
            TrainConfig(**kw)
    cfg = TrainConfig(lam=0.25, iterations=10, crop=(4, 5, 6))
    d = json.loads(json.dumps(cfg.to_json()))
    assert d["lambda"] == 0.25
    assert TrainConfig.from_json(d) == cfg


def test_identical_banks_fit_the_input():
    """With every member equal, the only target is the input itself."""
    base = np.random.default_rng(0).random((8, 12, 12)).astype(np.float32) + 1.0
    bank = make_bank([base] * 3)
    cfg = TrainConfig(lam=1.0, iterations=600, crop=(8, 12, 12), batch=1, seed=2, lr=3e-3)
    net, rep = train(ProjectionVolume(base), (bank, None), init_net(4, seed=2), cfg)
    _, end = loss_progress(rep.loss)
    assert end <= rep.loss[0] / 20
    out = denoise(net, ProjectionVolume(base)).data.astype(np.float64)
    assert np.mean((out - base) ** 2) < np.var(base)


def test_noise2noise_variance_reduction():
    g = np.random.default_rng(0)
    members = [5.0 + g.normal(0, 0.1, (8, 24, 24)) for _ in range(4)]
    bank = make_bank(members)
    src = ProjectionVolume(members[0])
    cfg = TrainConfig(lam=1.0, iterations=300, crop=(8, 16, 16), batch=2, seed=1)
    net, rep = train(src, (bank, None), init_net(8, seed=1), cfg)
    held = 5.0 + g.normal(0, 0.1, (8, 24, 24))
    out = denoise(net, ProjectionVolume(held)).data.astype(np.float64)
    assert out.var() < 0.25 * 0.01
    first, last = loss_progress(rep.loss)
    assert last <= first
    assert len(rep.loss) == 300 and np.all(np.isfinite(rep.loss))


def test_training_is_deterministic(two_banks, tmp_path):
    cfg = TrainConfig(lam=0.5, iterations=20, crop=(4, 6, 6), batch=2, seed=3)
    v = two_banks[0].volumes[0]
    a, ra = train(v, two_banks, init_net(4, seed=3), cfg)
    b, rb = train(v, two_banks, init_net(4, seed=3), cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))
    assert ra.loss == rb.loss and ra.tags == rb.tags


def test_lambda_tags_in_report(two_banks):
    v = two_banks[0].volumes[0]
    for lam, key in ((1.0, STATISTICAL), (0.0, CONJUGATE)):
        _, rep = train(v, two_banks, init_net(2), TrainConfig(lam=lam, iterations=5, crop=(2, 4, 4), batch=3))
        assert rep.tags[key] == 15


def test_non_finite_loss_aborts(two_banks):
    net = init_net(2)
    net.weights[-1][...] = 1e38
    with pytest.raises(TrainingError) as ei:
        train(two_banks[0].volumes[0], two_banks, net, TrainConfig(iterations=3, crop=(2, 4, 4)))
    assert ei.value.iteration == 0
    assert ei.value.checkpoint is not None


def test_report_files(two_banks, tmp_path):
    _, rep = train(two_banks[0].volumes[0], two_banks, init_net(2), TrainConfig(iterations=4, crop=(2, 4, 4)))
    rep.save(tmp_path)
    data = json.loads((tmp_path / "train_report.json").read_text())
    assert len(data["loss"]) == 4 and data["config"]["iterations"] == 4
    lines = (tmp_path / "loss.csv").read_text().strip().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == 5


def test_denoise_zero_and_identity():
    v = ProjectionVolume(np.random.default_rng(0).random((10, 20, 30)) + 0.5, None)
    zero = init_net(2)
    for p in zero.parameters():
        p[...] = 0
    assert np.all(denoise(zero, v, tile=(4, 8, 8)).data == 0)
    ident = init_net(1)
    for w, b in zip(ident.weights, ident.biases):
        w[...] = 0
        w[0, 0, 1, 1, 1] = 1
        b[...] = 0
    out = denoise(ident, v, tile=(4, 8, 8)).data
    assert np.max(np.abs(out - v.data)) <= 1e-5


def test_tiled_matches_single_pass():
    v = ProjectionVolume(np.random.default_rng(0).random((32, 64, 64)).astype(np.float32))
    net = init_net(4, seed=9)
    whole = net_forward(net, v.data)
    tiled = denoise(net, v, tile=(12, 24, 20)).data
    assert np.max(np.abs(tiled - whole)) <= 1e-4


def test_denoise_keeps_geometry():
    g = parallel_geometry(12, 10, (8, 8))
    v = ProjectionVolume(np.ones((3, 12, 10)), g, (1.0, 0.5, 0.7))
    out = denoise(init_net(2), v)
    assert out.geometry == g and out.spacing == v.spacing and out.dims == v.dims
