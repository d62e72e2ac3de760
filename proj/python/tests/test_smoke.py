import numpy as np
import pytest

import priveri


@pytest.fixture(scope="module")
def model():
    return priveri.init_model(1)


@pytest.fixture(scope="module")
def cache(model):
    return priveri.generate_cache(model, 20, k=3, seed=5)


def test_model_is_deterministic(model):
    again = priveri.init_model(1)
    assert again.hash == model.hash
    assert len(model.hash) == 64
    assert priveri.init_model(2).hash != model.hash


def test_forward_shape_and_causality(model):
    tokens = [1, 5, 9, 2]
    full = model.forward(tokens)
    assert full.shape == (4, model.vocab_size)
    np.testing.assert_array_equal(model.forward(tokens[:2]), full[:2])


def test_honest_request_verifies(model, cache):
    req = priveri.build_request([4, 8, 15, 16, 23, 42], cache, seed=9)
    assert len(req) == 9
    assert sorted(req.sentinel_positions + req.original_positions()) == list(range(1, 10))
    ok, dists = priveri.verify(priveri.run_request(model, req), req, cache)
    assert ok
    assert dists == [0.0, 0.0, 0.0]


def test_substitute_request_fails(model, cache):
    other = priveri.substitute(model, "quantize:8")
    req = priveri.build_request([4, 8, 15, 16], cache, seed=3)
    ok, _ = priveri.verify(priveri.run_request(other, req), req, cache)
    assert not ok


def test_cache_round_trip(tmp_path, model, cache):
    path = tmp_path / "cache.bin"
    cache.save(path)
    loaded = priveri.load_cache(path)
    assert len(loaded) == len(cache)
    assert loaded.sequences() == cache.sequences()
    loaded.audit(model)
    with pytest.raises(priveri.IntegrityError):
        loaded.audit(priveri.init_model(2))


def test_model_round_trip(tmp_path, model):
    path = tmp_path / "model.json"
    model.save(path)
    assert priveri.load_model(path).hash == model.hash


def test_analytic_values():
    assert priveri.binomial(17, 3) == 680
    assert priveri.analytic_probability("position-guess", n=14, k=3) == pytest.approx(1 / 680)
    assert priveri.comm_overhead_bytes(100) == 4 * (100 * 100 + 8 * 100 + 15)
    with pytest.raises(priveri.ArgumentError):
        priveri.binomial(3, 4)


def test_run_attack_report():
    report = priveri.run_attack(protocol=1, strategy="honest", trials=20, seed=7, cache_size=10)
    assert report["trials"] == 20
    again = priveri.run_attack(protocol=1, strategy="honest", trials=20, seed=7, cache_size=10)
    report.pop("wall_clock_seconds", None)
    again.pop("wall_clock_seconds", None)
    assert report == again
    with pytest.raises(priveri.ArgumentError):
        priveri.run_attack(bogus=1)
