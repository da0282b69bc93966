import numpy as np
import pytest

from fedfmri.federation import (BatchStream, FedConfig, GlobalServer, SiteData, average_states, broadcast,
                                run_fed, site_rng, train_centralized, write_telemetry)
from fedfmri.privacy import NoiseSpec


def make_site(name, n=30, d=12, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = (X[:, 0] + 0.5 * rng.standard_normal(n) > 0).astype(int)
    return SiteData(name, X, y)


def small_config(**kw):
    base = dict(epochs=2, steps_per_epoch=6, tau=3, lr=1e-3, seed=1)
    base.update(kw)
    return FedConfig(**base)


def test_single_site_every_step_matches_centralized():
    site = make_site("A")
    cfg = small_config(epochs=3, tau=1)
    fed = run_fed(cfg, [site])
    _, losses = train_centralized(site, cfg)
    fed_losses = [r["loss"] for r in fed.telemetry]
    assert len(fed_losses) == len(losses) == 18
    assert max(abs(a - b) for a, b in zip(fed_losses, losses)) <= 1e-12


@pytest.mark.parametrize("tau,steps,expected", [(3, 6, 2), (4, 6, 1), (6, 6, 1), (1, 6, 6)])
def test_comm_events_per_epoch(tau, steps, expected):
    res = run_fed(small_config(tau=tau, steps_per_epoch=steps), [make_site("A"), make_site("B", seed=1)])
    assert res.comm_events == 2 * expected
    flags = [r["comm_event"] for r in res.telemetry if r["site"] == "A"]
    assert sum(flags) == 2 * expected


def test_tau_beyond_epoch_never_communicates():
    res = run_fed(small_config(tau=7, steps_per_epoch=6), [make_site("A"), make_site("B", seed=1)])
    assert res.comm_events == 0
    assert res.global_model is None
    assert res.model_for("A") is res.local_models["A"]


def test_sites_agree_after_final_broadcast():
    res = run_fed(small_config(tau=3, steps_per_epoch=6), [make_site("A"), make_site("B", seed=1)])
    a, b = res.local_models["A"].state(), res.local_models["B"].state()
    for k in a:
        assert np.array_equal(a[k], b[k])
        assert np.array_equal(a[k], res.global_model.state()[k])


def test_average_states_oracle():
    s1 = {"w": np.array([1.0, 2.0]), "running_var": np.array([1.0])}
    s2 = {"w": np.array([3.0, 6.0]), "running_var": np.array([3.0])}
    out = average_states([s1, s2], NoiseSpec(), [None, None], {"w"})
    assert np.array_equal(out["w"], [2.0, 4.0])
    assert np.array_equal(out["running_var"], [2.0])


def test_average_states_noises_only_listed_keys():
    s1 = {"w": np.arange(5.0), "buf": np.arange(5.0)}
    rngs = [np.random.default_rng(0)]
    out = average_states([s1], NoiseSpec("gaussian", 0.5), rngs, {"w"})
    assert not np.array_equal(out["w"], s1["w"])
    assert np.array_equal(out["buf"], s1["buf"])


def test_average_states_rejects_mismatch():
    with pytest.raises(ValueError):
        average_states([{"w": np.zeros(2)}, {"w": np.zeros(3)}], NoiseSpec(), [None, None], set())
    with pytest.raises(ValueError):
        average_states([{"w": np.zeros(2)}, {"v": np.zeros(2)}], NoiseSpec(), [None, None], set())


def test_broadcast_before_aggregation():
    with pytest.raises(RuntimeError):
        broadcast(GlobalServer(), [])


def test_zero_alpha_equals_no_noise():
    sites = [make_site("A"), make_site("B", seed=1)]
    a = run_fed(small_config(), sites)
    b = run_fed(small_config(noise=NoiseSpec("laplace", 0.0)), sites)
    for k, v in a.global_model.state().items():
        assert np.array_equal(v, b.global_model.state()[k])


def test_noise_changes_result_but_is_reproducible():
    sites = [make_site("A"), make_site("B", seed=1)]
    cfg = small_config(noise=NoiseSpec("gaussian", 0.1))
    a, b = run_fed(cfg, sites), run_fed(cfg, sites)
    plain = run_fed(small_config(), sites)
    key = "1.W"
    assert np.array_equal(a.global_model.state()[key], b.global_model.state()[key])
    assert not np.array_equal(a.global_model.state()[key], plain.global_model.state()[key])


def test_site_order_does_not_change_result():
    sites = [make_site("A"), make_site("B", seed=1), make_site("C", seed=2)]
    a = run_fed(small_config(noise=NoiseSpec("gaussian", 0.05)), sites)
    b = run_fed(small_config(noise=NoiseSpec("gaussian", 0.05)), sites[::-1])
    for k, v in a.global_model.state().items():
        # summation order differs, so allow rounding
        assert np.allclose(v, b.global_model.state()[k], rtol=0, atol=1e-12)


def test_batch_stream_sizes_and_wraparound():
    site = make_site("A", n=10)
    stream = BatchStream(site, 4, site_rng(0, "A", "batches"))
    assert stream.batch_size == 3
    stream.start_epoch()
    seen = np.concatenate([stream.next().inputs for _ in range(4)])
    assert len(seen) == 12
    # first 10 rows cover the site once
    assert len({tuple(r) for r in seen[:10]}) == 10


def test_site_rng_streams_independent():
    a = site_rng(0, "A", "batches").random(3)
    assert not np.array_equal(a, site_rng(0, "A", "noise").random(3))
    assert not np.array_equal(a, site_rng(0, "B", "batches").random(3))
    assert np.array_equal(a, site_rng(0, "A", "batches").random(3))


def test_config_validation():
    with pytest.raises(ValueError):
        FedConfig(tau=0)
    with pytest.raises(ValueError):
        FedConfig(epochs=0)
    with pytest.raises(ValueError):
        SiteData("A", np.zeros((0, 3)), np.zeros(0))
    assert FedConfig(noise={"mechanism": "laplace", "alpha": 0.1}).noise.mechanism == "laplace"


def test_lr_schedule_in_config():
    cfg = FedConfig(lr=1e-3, lr_every=2)
    assert [cfg.lr_at(e) for e in range(5)] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]


def test_telemetry_csv(tmp_path):
    res = run_fed(small_config(epochs=1), [make_site("A")])
    write_telemetry(res.telemetry, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,site,loss,comm_event"
    assert len(lines) == 7
