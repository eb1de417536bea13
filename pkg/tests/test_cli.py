import json

import numpy as np
import pytest

from lyaptransfer.cli import EXIT_CHAOS, EXIT_INVALID, EXIT_OK, main
from lyaptransfer.config import ConfigError, RunConfig, config_from_dict, load_config
from lyaptransfer.lyapunov import BoundReport
from lyaptransfer.net import Mlp
from lyaptransfer.systems import TransitionDataset
from lyaptransfer.transfer import TransferredModel

TINY = """
seed = 3
[system]
name = "pendulum"
[data]
n_source_traj = 6
source_traj_len = 40
n_target_traj = 6
target_traj_len = 40
n_test_traj = 2
test_traj_len = 30
[net]
hidden = 8
epochs = 2
[transfer]
fraction = 0.5
epochs = 2
traj_epochs = 1
horizon = 10
[eval]
horizon = 30
eps_div = 0.1
fractions = [0.5, 1.0]
methods = ["direct", "naive_finetune", "cumulative_residual"]
seeds = [0, 1]
[planner]
distances = [0, 3]
trials = 3
n_samples = 20
[audit]
n_steps = 300
n_probes = 1000
n_pairs = 300
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(TINY)
    return tmp_path, str(cfg)


def run(*args):
    return main([str(a) for a in args])


def _pipeline(d, cfg):
    assert run("gen-data", "--config", cfg, "--role", "source", "--out", d / "src.csv") == EXIT_OK
    assert run("gen-data", "--config", cfg, "--role", "target", "--out", d / "tgt.csv") == EXIT_OK
    assert run("gen-data", "--config", cfg, "--role", "test", "--out", d / "test.csv") == EXIT_OK
    assert run("train-source", "--config", cfg, "--data", d / "src.csv", "--out", d / "src.json") == EXIT_OK


def test_default_config_matches_documented_values():
    cfg = RunConfig().validate()
    assert (cfg.data.n_source_traj, cfg.data.source_traj_len) == (300, 1000)
    assert (cfg.transfer.alpha, cfg.transfer.gamma, cfg.transfer.horizon) == (0.3, 0.9997, 50)
    assert cfg.eval.eps_div == 0.004 and cfg.planner.tolerance == 0.01 and cfg.planner.n_samples == 1000


def test_config_errors_name_field_path():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"transfer": {"alpha": "big"}})
    assert err.value.path == "transfer.alpha"
    with pytest.raises(ConfigError) as err:
        config_from_dict({"data": {"n_trajs": 3}})
    assert err.value.path == "data.n_trajs"
    with pytest.raises(ConfigError) as err:
        config_from_dict({"eval": {"methods": ["direct", "magic"]}})
    assert err.value.path == "eval.methods[1]"


def test_invalid_config_exits_2_and_writes_nothing(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[system]\nperturbation = -1.0\n")
    out = tmp_path / "x.csv"
    assert run("gen-data", "--config", cfg, "--out", out) == EXIT_INVALID
    assert not out.exists()
    err = capsys.readouterr().err
    assert "system.perturbation" in err
    assert len(err.strip().splitlines()) == 1 and err.startswith("level=ERROR")


def test_gen_data_single_row(tmp_path):
    cfg = tmp_path / "one.toml"
    cfg.write_text("[data]\nn_source_traj = 1\nsource_traj_len = 1\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d.csv") == EXIT_OK
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert len(lines) == 2
    assert json.loads((tmp_path / "d.csv.meta.json").read_text())["system"]["name"] == "hand_surrogate"


def test_gen_data_default_row_count(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d.csv") == EXIT_OK
    assert len(TransitionDataset.load(tmp_path / "d.csv")) == 300_000


def test_train_source_affine_eps(tmp_path, capsys):
    x = np.linspace(0, 1, 1000)
    d = TransitionDataset(x[:, None], np.zeros((1000, 0)), (0.9 * x + 0.1)[:, None], np.zeros(1000, dtype=int),
                          np.arange(1000))
    d.save(tmp_path / "aff.csv")
    cfg = tmp_path / "aff.toml"
    cfg.write_text('[system]\nname = "logistic"\n[net]\nhidden = 32\ndropout = [0.0, 0.0]\n'
                   'epochs = 100\nbatch = 32\n')
    assert run("train-source", "--config", cfg, "--data", tmp_path / "aff.csv", "--out", tmp_path / "m.json") == 0
    out = capsys.readouterr().out
    eps = float(out.split("eps=")[1])
    assert eps < 1e-3


def test_train_source_dimension_mismatch(tiny):
    d, cfg = tiny
    _pipeline(d, cfg)
    bad = d / "bad.toml"
    bad.write_text(TINY.replace('name = "pendulum"', 'name = "henon"'))
    assert run("train-source", "--config", bad, "--data", d / "src.csv", "--out", d / "m.json") == EXIT_INVALID
    assert run("train-source", "--config", cfg, "--data", d / "nope.csv", "--out", d / "m.json") == EXIT_INVALID


def test_checkpoint_round_trip_and_validation(tiny, capsys):
    d, cfg = tiny
    _pipeline(d, cfg)
    m = Mlp.load(d / "src.json")
    m.save(d / "again.json")
    assert Mlp.load(d / "again.json").to_dict() == m.to_dict()
    raw = json.loads((d / "src.json").read_text())
    del raw["layers"]
    (d / "cut.json").write_text(json.dumps(raw))
    assert run("transfer", "--config", cfg, "--source", d / "cut.json", "--data", d / "tgt.csv",
               "--out", d / "t.json") == EXIT_INVALID
    assert "layers" in capsys.readouterr().err
    (d / "trunc.json").write_text((d / "src.json").read_text()[:200])
    assert run("transfer", "--config", cfg, "--source", d / "trunc.json", "--data", d / "tgt.csv",
               "--out", d / "t.json") == EXIT_INVALID
    assert not (d / "t.json").exists()


def test_transfer_direct_and_frozen_source(tiny):
    d, cfg = tiny
    _pipeline(d, cfg)
    assert run("transfer", "--config", cfg, "--source", d / "src.json", "--data", d / "tgt.csv",
               "--method", "direct", "--out", d / "direct.json") == EXIT_OK
    src = Mlp.load(d / "src.json").to_dict()
    direct = TransferredModel.load(d / "direct.json")
    assert direct.kind == "direct"
    assert direct.model.to_dict()["layers"] == src["layers"]
    assert run("transfer", "--config", cfg, "--source", d / "src.json", "--data", d / "tgt.csv",
               "--method", "cumulative_residual", "--out", d / "cum.json") == EXIT_OK
    cum = json.loads((d / "cum.json").read_text())
    assert cum["source"]["layers"] == src["layers"]
    assert cum["method_kind"] == "cumulative_residual" and cum["alpha"] == 0.3 and cum["gamma"] == 0.9997
    assert cum["source_checkpoint_ref"] == str(d / "src.json")
    assert Mlp.load(d / "src.json").to_dict() == src


def test_unknown_method(tiny):
    d, cfg = tiny
    _pipeline(d, cfg)
    assert run("transfer", "--config", cfg, "--source", d / "src.json", "--data", d / "tgt.csv",
               "--method", "magic", "--out", d / "x.json") == EXIT_INVALID


def test_audit_report_round_trip(tiny):
    d, cfg = tiny
    _pipeline(d, cfg)
    rc = run("audit", "--config", cfg, "--checkpoint", d / "src.json", "--data", d / "src.csv",
             "--out", d / "audit.json")
    assert rc in (EXIT_OK, EXIT_CHAOS)
    rep = json.loads((d / "audit.json").read_text())
    back = BoundReport.from_dict(rep["bound"])
    assert back.to_dict() == rep["bound"]
    assert rep["bound_holds"]
    assert rep["verdict"] == ("CHAOS-RISK" if rc == EXIT_CHAOS else "OK")


def test_audit_proxy_requires_source(tiny):
    d, cfg = tiny
    _pipeline(d, cfg)
    proxy = d / "proxy.toml"
    proxy.write_text(TINY + "proxy = true\n")
    assert run("audit", "--config", proxy, "--checkpoint", d / "src.json", "--data", d / "src.csv",
               "--out", d / "a.json") == EXIT_INVALID
    assert run("audit", "--config", proxy, "--checkpoint", d / "src.json", "--data", d / "src.csv",
               "--proxy-source", d / "src.json", "--out", d / "a.json") in (EXIT_OK, EXIT_CHAOS)
    assert json.loads((d / "a.json").read_text())["bound"]["proxy"] is True


OVERFIT = """
[system]
name = "logistic"
perturbation = 0.0
params = {rho = 3.5}
[data]
n_source_traj = 1
source_traj_len = 8
[net]
hidden = 64
dropout = [0.0, 0.0]
epochs = 2000
batch = 8
lr = 0.003
[audit]
truth = "source"
n_steps = 2000
n_probes = 5000
n_pairs = 2000
"""


def test_overfit_tiny_data_model_flagged(tmp_path):
    cfg = tmp_path / "ov.toml"
    cfg.write_text(OVERFIT)
    codes = []
    for s in range(5):
        assert run("gen-data", "--config", cfg, "--seed", s, "--out", tmp_path / f"d{s}.csv") == 0
        assert run("train-source", "--config", cfg, "--seed", s, "--data", tmp_path / f"d{s}.csv",
                   "--out", tmp_path / f"m{s}.json") == 0
        codes.append(run("audit", "--config", cfg, "--seed", s, "--checkpoint", tmp_path / f"m{s}.json",
                         "--data", tmp_path / f"d{s}.csv", "--out", tmp_path / f"a{s}.json"))
        rep = json.loads((tmp_path / f"a{s}.json").read_text())
        assert rep["measured_max_exponent"] <= rep["bound"]["bound_value"]
    assert EXIT_CHAOS in codes


def test_eval_sweep_plan_files(tiny):
    d, cfg = tiny
    _pipeline(d, cfg)
    run("transfer", "--config", cfg, "--source", d / "src.json", "--data", d / "tgt.csv", "--out", d / "cum.json")
    assert run("eval", "--config", cfg, "--checkpoint", d / "cum.json", "--data", d / "test.csv",
               "--out", d / "ev.json") == EXIT_OK
    ev = json.loads((d / "ev.json").read_text())
    assert ev["n_eval_traj"] == 2
    assert run("sweep", "--config", cfg, "--out", d / "sweep.csv") == EXIT_OK
    assert len((d / "sweep.csv").read_text().splitlines()) == 1 + 3 * 2 * 2
    assert run("plan", "--config", cfg, "--checkpoint", d / "cum.json", "--out", d / "plan.csv") == EXIT_OK
    rows = (d / "plan.csv").read_text().splitlines()
    assert rows[0] == "distance_steps,trials,successes,success_rate"
    assert rows[1] == "0,3,3,1.0"


def test_every_command_is_byte_deterministic(tiny, tmp_path_factory):
    d, cfg = tiny
    outs = []
    for rep in range(2):
        o = tmp_path_factory.mktemp(f"rep{rep}")
        _pipeline(o, cfg)
        run("transfer", "--config", cfg, "--source", o / "src.json", "--data", o / "tgt.csv", "--out", o / "cum.json")
        run("audit", "--config", cfg, "--checkpoint", o / "src.json", "--data", o / "src.csv", "--out", o / "au.json")
        run("eval", "--config", cfg, "--checkpoint", o / "cum.json", "--data", o / "test.csv", "--out", o / "ev.json")
        run("sweep", "--config", cfg, "--out", o / "sw.csv")
        run("plan", "--config", cfg, "--checkpoint", o / "cum.json", "--out", o / "pl.csv")
        outs.append(o)
    names = ["src.csv", "src.csv.meta.json", "tgt.csv", "test.csv", "src.json", "au.json", "ev.json", "sw.csv",
             "pl.csv"]
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    # the transferred checkpoint embeds the source path; compare everything else
    a, b = (json.loads((o / "cum.json").read_text()) for o in outs)
    a.pop("source_checkpoint_ref"), b.pop("source_checkpoint_ref")
    assert a == b


def test_seed_flag_overrides_config(tiny):
    d, cfg = tiny
    run("gen-data", "--config", cfg, "--out", d / "a.csv")
    run("gen-data", "--config", cfg, "--seed", 3, "--out", d / "b.csv")
    run("gen-data", "--config", cfg, "--seed", 4, "--out", d / "c.csv")
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()
    assert (d / "a.csv").read_bytes() != (d / "c.csv").read_bytes()


def test_load_config_none_gives_defaults():
    assert load_config(None).to_dict() == RunConfig().to_dict()


def test_example_config_lists_the_defaults():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "example.toml"
    assert load_config(str(path)) == RunConfig()
