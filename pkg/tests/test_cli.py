import json
import shutil
import subprocess
import sys

import pytest

from agentsim.cli import main, parse_overrides, UsageError
from agentsim.lanemap import load_map
from agentsim.simcore import packaged_path

FOLLOWING = str(packaged_path("scenarios", "following.json"))


@pytest.mark.parametrize("sub", ["run", "catalog", "bench", "genroad", "validate"])
def test_help(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        main([sub, "--help"])
    assert exc.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_run_writes_outputs(tmp_path, capsys):
    code = main(["run", FOLLOWING, "-o", str(tmp_path), "--duration", "60"])
    assert code == 0
    out = tmp_path / "following"
    report = json.loads((out / "report.json").read_text())
    assert report["verdict"] == "pass"
    assert (out / "following_ego.csv").is_file() and (out / "following_events.json").is_file()
    assert "following: pass" in capsys.readouterr().out


def test_run_failing_criterion_exits_1(tmp_path):
    assert main(["run", FOLLOWING, "-o", str(tmp_path), "-s", "T=1.2", "--no-plots"]) == 1


def test_catalog_exit_codes(tmp_path):
    data = json.loads((packaged_path("catalog") / "09_target_point.json").read_text())
    cat = tmp_path / "cat"
    cat.mkdir()
    (cat / "ok.json").write_text(json.dumps(data))
    assert main(["catalog", str(cat), "-o", str(tmp_path / "a")]) == 0
    data["criteria"].append({"metric": "max_value", "channel": "v", "op": "<=", "value": 0.5})
    (cat / "bad.json").write_text(json.dumps(data))
    assert main(["catalog", str(cat), "-o", str(tmp_path / "b")]) == 1
    assert json.loads((tmp_path / "b" / "report.json").read_text())["passed"] == 1
    assert main(["catalog", str(tmp_path / "missing")]) == 2


def test_genroad_validate_roundtrip(tmp_path, capsys):
    path = tmp_path / "r80.json"
    assert main(["genroad", "--radius", "80", "--spiral", "40", "--line", "100", "--output", str(path)]) == 0
    m = load_map(path)
    assert len(m.lanes) == 1
    assert main(["validate", str(path), FOLLOWING]) == 0
    out = capsys.readouterr().out
    assert "map, 1 lanes" in out and "scenario, 2 agents" in out


def test_validate_flags_bad_content(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"lanes": [{"id": "x"}]}')
    assert main(["validate", str(bad)]) == 1
    assert main(["validate", str(tmp_path / "nope.json")]) == 2
    assert main(["validate"]) == 2
    assert main(["validate", "--parameters"]) == 0


def test_usage_errors(tmp_path):
    assert main(["run", FOLLOWING, "-s", "nonsense=1", "-o", str(tmp_path)]) == 2
    assert main(["run", FOLLOWING, "-s", "T", "-o", str(tmp_path)]) == 2
    assert main(["run", str(tmp_path / "none.json")]) == 2
    assert main(["genroad", "--radius", "-5", "--spiral", "10", "--line", "10", "-o", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--counts", "0,1"])
    assert exc.value.code == 2


def test_parse_overrides_types():
    got = parse_overrides(["T=1.5", "debug=true", "v_desired=10"])
    assert got == {"T": 1.5, "debug": True, "v_desired": 10.0}
    assert isinstance(got["v_desired"], float)
    with pytest.raises(UsageError):
        parse_overrides(["T=fast"])


def test_out_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("AGENTSIM_OUT", str(tmp_path / "env"))
    assert main(["genroad", "--radius", "100", "--spiral", "50", "--line", "50"]) == 0
    assert (tmp_path / "env" / "road_r100.json").is_file()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "agentsim", "validate", FOLLOWING],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    exe = shutil.which("agentsim")
    if exe:
        assert subprocess.run([exe, "--version"], capture_output=True).returncode == 0
