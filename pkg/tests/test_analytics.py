import numpy as np
import pytest

from sumrec.analytics import channel_utilization, heatmap_csv, readout_attention_profile


def one_hot_trace(channels, K=5):
    tr = np.zeros((len(channels), K))
    tr[np.arange(len(channels)), channels] = 0.9
    tr[:, -1] = 1.0  # highway is always the largest entry and must be ignored
    return tr


def test_utilization_examples():
    assert channel_utilization([one_hot_trace([2, 2, 2])], 5) == 0.25
    assert channel_utilization([one_hot_trace([0, 1, 2, 3, 1])], 5) == 1.0
    # the two-of-four example, averaged with a full user
    assert channel_utilization([one_hot_trace([0, 3]), one_hot_trace([0, 1, 2, 3])], 5) == 0.75


def test_utilization_skips_empty_traces_and_handles_no_highway():
    assert channel_utilization([np.zeros((0, 5)), one_hot_trace([1])], 5) == 0.25
    tr = np.eye(3)
    assert channel_utilization([tr], 3, highway=False) == 1.0
    with pytest.raises(ValueError):
        channel_utilization([np.zeros((0, 5))], 5)


def test_utilization_in_unit_interval():
    rng = np.random.default_rng(0)
    traces = [rng.random((int(rng.integers(1, 30)), 6)) for _ in range(50)]
    assert 0 < channel_utilization(traces, 6) <= 1


def test_readout_profile_examples():
    assert np.allclose(readout_attention_profile([np.full(4, 0.25)] * 7), 0.25)
    assert np.allclose(readout_attention_profile([np.array([0.2, 0.8])]), [0.2, 0.8])
    assert np.allclose(readout_attention_profile([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), [0.5, 0.5])
    with pytest.raises(ValueError):
        readout_attention_profile([])


def test_heatmap_layout():
    text = heatmap_csv([np.array([[0.5, 0.5, 1.0]])], ["u7"], 3)
    assert text.splitlines() == ["user_id,step,ch0,ch1,ch2", "u7,0,0.5,0.5,1.0"]
