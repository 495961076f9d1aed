import numpy as np
import pytest

from shiftguard.adapt import EpisodeLog
from shiftguard.errors import PlotInputError
from shiftguard.plotting import plot_episodes, read_episode, state_count
from shiftguard.state import initialize_step_record


def write_episode(path, steps=5, offset=0.0):
    log = EpisodeLog("adapted", state_dim=2, action_dim=1)
    for t in range(steps):
        record = initialize_step_record(t, [0.1 * t, 0.0], [0.1 * t + offset, 0.05 * t])
        record.update(action=[0.0], residual_norm=abs(offset))
        log.records.append(record)
    log.to_csv(path)
    return path


def test_read_episode_columns(tmp_path):
    columns = read_episode(write_episode(tmp_path / "a.csv"))
    assert state_count(columns) == 2
    assert "solver_status" not in columns
    assert np.all(np.isnan(columns["logdet_bound"]))
    np.testing.assert_allclose(columns["ref_0"], 0.1 * np.arange(5))


def test_one_figure_per_state_coordinate(tmp_path):
    first = write_episode(tmp_path / "adapted.csv")
    second = write_episode(tmp_path / "unadapted.csv", offset=0.2)
    written = plot_episodes([first, second], tmp_path / "figures")
    assert [p.name for p in written] == ["state_0.svg", "state_1.svg"]
    assert all(p.stat().st_size > 0 for p in written)
    assert "adapted" in written[0].read_text(encoding="utf-8")


def test_figures_are_byte_identical_across_runs(tmp_path):
    episode = write_episode(tmp_path / "a.csv")
    one = plot_episodes([episode], tmp_path / "one", labels=["adapted"])
    two = plot_episodes([episode], tmp_path / "two", labels=["adapted"])
    for a, b in zip(one, two):
        assert a.read_bytes() == b.read_bytes()


def test_missing_reference_column(tmp_path):
    path = tmp_path / "partial.csv"
    path.write_text("t,s_0,s_1\n0,0.0,0.0\n1,0.1,0.1\n", encoding="utf-8")
    with pytest.raises(PlotInputError) as info:
        plot_episodes([path], tmp_path / "out")
    assert info.value.column == "ref_0"


def test_missing_state_in_later_episode(tmp_path):
    full = write_episode(tmp_path / "full.csv")
    short = tmp_path / "short.csv"
    short.write_text("t,ref_0,s_0\n0,0.0,0.0\n", encoding="utf-8")
    with pytest.raises(PlotInputError) as info:
        plot_episodes([full, short], tmp_path / "out")
    assert info.value.column == "s_1"


def test_empty_files_are_rejected(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(PlotInputError):
        plot_episodes([empty], tmp_path / "out")
    header_only = tmp_path / "header.csv"
    header_only.write_text("t,ref_0,s_0\n", encoding="utf-8")
    with pytest.raises(PlotInputError):
        read_episode(header_only)


def test_label_count_must_match(tmp_path):
    episode = write_episode(tmp_path / "a.csv")
    with pytest.raises(PlotInputError):
        plot_episodes([episode], tmp_path / "out", labels=["x", "y"])
