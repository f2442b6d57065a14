import pytest

from orco.config import build_run_config, dump_run_config, load_run_config, parse_overrides
from orco.errors import ConfigurationError
from orco.protocol import PhaseConfig


def test_defaults():
    cfg = build_run_config()
    assert cfg.phase == PhaseConfig() and cfg.synthetic.seed == 0 and cfg.feature_file is None


def test_file_and_overrides():
    text = "[loss]\ntau = 0.2\nlambda = 0.05\n[plan]\nsessions = 2\n[phase3]\nassignment_strategy = random\n"
    cfg = build_run_config(text, ["loss.tau=0.5", "model.encoder_dims=32,32"])
    assert cfg.phase.tau == 0.5 and cfg.phase.lam == 0.05 and cfg.plan.sessions == 2
    assert cfg.phase.encoder_dims == (32, 32)
    assert cfg.phase.assignment_strategy.value == "random"


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("ORCO_SEED", "11")
    assert build_run_config().phase.seed == 11
    assert build_run_config().synthetic.seed == 11
    assert build_run_config("[run]\nseed = 4\n").phase.seed == 4
    assert build_run_config("[run]\nseed = 4\n", seed=9).phase.seed == 9
    monkeypatch.setenv("ORCO_SEED", "x")
    with pytest.raises(ConfigurationError):
        build_run_config()


@pytest.mark.parametrize("text,overrides", [
    ("[bogus]\na = 1\n", ()),
    ("[loss]\nsmoothing = 1\n", ()),
    ("[loss]\ntau = hot\n", ()),
    ("[loss]\ntau = -1\n", ()),
    ("[phase1]\nskip = maybe\n", ()),
    ("not an ini", ()),
    (None, ["loss.tau"]),
    (None, ["tau=1"]),
    (None, ["data.source=file"]),
    (None, ["data.source=file", "data.path=f.txt", "data.dim=3"]),
    (None, ["data.source=cloud"]),
])
def test_errors(text, overrides):
    with pytest.raises(ConfigurationError):
        build_run_config(text, overrides)


def test_dump_round_trip(tmp_path):
    cfg = build_run_config("[loss]\ntau = 0.25\nuse_orth = false\n[data]\ndim = 12\n", seed=3)
    text = dump_run_config(cfg)
    (tmp_path / "c.ini").write_text(text)
    back = load_run_config(tmp_path / "c.ini")
    assert back == cfg and dump_run_config(back) == text
    file_cfg = build_run_config(None, ["data.path=feats.txt"])
    assert file_cfg.synthetic is None and build_run_config(dump_run_config(file_cfg)) == file_cfg


def test_missing_file():
    with pytest.raises(ConfigurationError):
        load_run_config("/nonexistent/run.ini")


def test_parse_overrides():
    assert parse_overrides(["a.b=c=d"]) == [("a", "b", "c=d")]
