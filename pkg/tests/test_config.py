import json

import pytest

from lyapcdr.config import InitialCondition, RunConfig, StudyConfig, load_run_config, load_study_config
from lyapcdr.errors import ConfigurationError


class TestRunConfig:
    def test_defaults_resolve(self):
        cfg = RunConfig()
        assert cfg.velocity == [1.0, 1.0]
        assert cfg.box == [[0.0, 1.0], [0.0, 1.0]]
        assert isinstance(cfg.initial_condition, InitialCondition)

    def test_mms_box_is_periodic_period(self):
        cfg = RunConfig(dim=1, elements=4, initial_condition={"kind": "mms"})
        assert cfg.elements == [4]
        assert cfg.box[0][1] == pytest.approx(6.283185307179586, rel=1e-16)

    def test_json_round_trip(self, tmp_path):
        cfg = RunConfig(dim=3, degree=2, elements=[4, 4, 2], tableau="rk4", dt_fixed=1e-3,
                        initial_condition={"kind": "constant", "state": [1.0, 0.5]})
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert load_run_config(path) == cfg

    def test_summary_file_is_accepted(self, tmp_path):
        cfg = RunConfig(degree=2)
        path = tmp_path / "summary.json"
        path.write_text(json.dumps({"summary_version": 1, "config": cfg.to_dict(), "t_final": 1.0}))
        assert load_run_config(path) == cfg

    @pytest.mark.parametrize("data", [{"degre": 3}, {"initial_condition": {"kind": "blob", "radiuss": 1}}])
    def test_unknown_keys(self, data):
        with pytest.raises(ConfigurationError, match="unknown"):
            RunConfig.from_dict(data)

    @pytest.mark.parametrize("bad", [
        dict(dim=4), dict(degree=0), dict(degree=13), dict(elements=[4]), dict(mapping="twist"),
        dict(dim=3, mapping="warp", elements=2), dict(dim=3, elements=25), dict(dim=3, degree=5, elements=2),
        dict(d=-1.0), dict(k_r=0.0), dict(tableau="euler"), dict(atol=0.0), dict(t_end=0.0),
        dict(stability_safety=1.5), dict(dt_fixed=-1.0), dict(threads=0), dict(threshold=0.0),
        dict(box=[[0, 1], [1, 0]]), dict(velocity=[1.0]), dict(equilibrium=[1.0, -1.0]),
        dict(tableau_file="/nonexistent.json"), dict(initial_condition={"kind": "gauss"}),
        dict(initial_condition={"inside": [1.0, 0.0]}), dict(initial_condition={"center": [0.5]}),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            RunConfig(**bad)

    def test_overrides(self):
        cfg = RunConfig().with_overrides(dim=1, elements=8)
        assert cfg.velocity == [1.0] and cfg.box == [[0.0, 1.0]] and cfg.elements == [8]
        with pytest.raises(ConfigurationError):
            RunConfig().with_overrides(speed=2)

    @pytest.mark.parametrize("text", ["{", "[]"])
    def test_bad_files(self, tmp_path, text):
        path = tmp_path / "c.json"
        path.write_text(text)
        with pytest.raises(ConfigurationError):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="does not exist"):
            load_run_config(tmp_path / "none.json")


class TestStudyConfig:
    def test_levels(self, tmp_path):
        study = StudyConfig(base={"dim": 2, "elements": 2}, levels=[4, [8, 6]], degrees=[1, 2])
        assert study.level_elements(0) == [4, 4] and study.level_elements(1) == [8, 6]
        assert study.run_config(2, 1).degree == 2
        path = tmp_path / "s.json"
        path.write_text(json.dumps(study.to_dict()))
        assert load_study_config(path).to_dict() == study.to_dict()

    def test_per_level_overrides(self):
        study = StudyConfig(levels=[2, 4], overrides=[{"dt_fixed": 0.1}, {"dt_fixed": 0.05}])
        assert study.run_config(3, 1).dt_fixed == 0.05

    @pytest.mark.parametrize("bad", [dict(levels=[4]), dict(degrees=[]), dict(overrides=[{}]),
                                     dict(levels=[2, 4], overrides=[{}, {"x": 1}])])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            StudyConfig(**bad)
