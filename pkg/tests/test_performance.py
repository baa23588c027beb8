import logging

import pytest

from vifo.performance import EpochTimings, Stopwatch, time_epochs


def test_stopwatch_measures_its_block():
    with Stopwatch() as watch:
        sum(range(10_000))
    assert watch.seconds > 0


def test_timings_from_samples():
    timings = EpochTimings.from_samples([0.3, 0.1, 0.2])
    assert timings.median == pytest.approx(0.2)
    assert timings.mean == pytest.approx(0.2)
    assert timings.std == pytest.approx(0.1)


def test_single_sample_has_no_spread():
    assert EpochTimings.from_samples([0.5]).std == 0.0


def test_timings_need_samples():
    with pytest.raises(ValueError, match="No timing samples"):
        EpochTimings.from_samples([])


def test_time_epochs_warms_up_then_times_and_logs(caplog):
    calls = []

    with caplog.at_level(logging.INFO, logger="vifo.performance"):
        timings = time_epochs(lambda: calls.append(1), epochs=4, warmup=2, label="vifo/M=5")

    assert len(calls) == 6
    assert len(timings.samples) == 4
    records = [record for record in caplog.records if record.name == "vifo.performance"]
    assert len(records) == 1
    message = records[0].getMessage()
    assert "label=vifo/M=5" in message
    assert "epochs=4" in message
    assert "median_ms=" in message


def test_time_epochs_needs_a_timed_epoch():
    with pytest.raises(ValueError, match="at least one timed epoch"):
        time_epochs(lambda: None, epochs=0)
