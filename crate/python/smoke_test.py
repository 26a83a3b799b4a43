"""Smoke test for the pyotafeel extension.

Build and install first:  pip install --no-build-isolation -e crates/py
Run:                      python python/smoke_test.py
"""

import csv
import io
import math

import pyotafeel


def test_default_config_lists_sections():
    text = pyotafeel.default_config()
    for header in ("[system]", "[feel]", "[sweep]"):
        assert header in text


def test_unconstrained_schedule_keeps_everyone():
    out = pyotafeel.schedule({"eps0": 1e9, "Gamma0": 1e9})
    assert out["feasible"]
    assert out["set"] == list(range(20))
    assert out["removed"] == []


def test_tighter_sensing_drops_devices():
    loose = pyotafeel.schedule({"eps0": 300}, seed=3)
    tight = pyotafeel.schedule({"eps0": 60}, seed=3)
    assert len(tight["set"]) <= len(loose["set"])
    assert math.isfinite(loose["crb"])


def test_sense_reports_bound():
    out = pyotafeel.sense({}, blocks=50)
    assert out["crb"] > 0
    assert 0.5 < out["empirical_mse"] / out["crb"] < 4.0


def test_train_histories():
    out = pyotafeel.train({"rounds": 4, "samples": 400})
    assert len(out["loss"]) == len(out["accuracy"]) == 4
    assert all(0.0 <= a <= 1.0 for a in out["accuracy"])


def test_sweep_csv():
    text = pyotafeel.sweep({"values": "100, 300", "trials": 3, "sensing_blocks": 0}, seed=1)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 2 * 3
    assert {r["policy"] for r in rows} == {"mp", "greedy", "random"}
    assert all(r["trials"] == "3" for r in rows)


def test_selftest_passes():
    results = pyotafeel.selftest()
    failed = [name for name, (ok, _) in results.items() if not ok]
    assert not failed, failed


def test_bad_override_raises_value_error():
    try:
        pyotafeel.schedule({"N": "zero"})
    except ValueError:
        return
    raise AssertionError("expected ValueError")


if __name__ == "__main__":
    tests = [(n, f) for n, f in sorted(globals().items()) if n.startswith("test_")]
    for name, fn in tests:
        fn()
        print(f"ok {name}")
    print(f"{len(tests)} passed")
