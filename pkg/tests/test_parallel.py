import threading

from featlm._parallel import THREADS_ENV, parallel_map, resolve_workers


def test_explicit_workers_win(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_workers(5) == 5
    assert resolve_workers(0) == 1


def test_environment_caps_the_pool(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "2")
    assert resolve_workers() == 2


def test_bad_environment_value_falls_back(monkeypatch, caplog):
    monkeypatch.setenv(THREADS_ENV, "many")
    assert resolve_workers() >= 1
    assert "ignoring non-integer" in caplog.text


def test_parallel_map_keeps_order():
    assert parallel_map(lambda x: x * x, range(50), max_workers=8) == [x * x for x in range(50)]
    assert parallel_map(str, [], max_workers=4) == []


def test_single_worker_runs_inline():
    seen = []
    parallel_map(lambda _: seen.append(threading.get_ident()), range(5), max_workers=1)
    assert set(seen) == {threading.get_ident()}
