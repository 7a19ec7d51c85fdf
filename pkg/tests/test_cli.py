import json
import os
import subprocess
import sys

import pytest
import yaml

from q8s.cli import EX_INTERRUPTED, EX_SOFTWARE, EX_TIMEOUT, EX_USAGE, main
from q8s.fake_cluster import Fault, LifecycleScript
from q8s.image import RecordingDriver
from test_manifests import normalize

BELL = "from qiskit import QuantumCircuit\nfrom qiskit_aer import AerSimulator\nprint('bell')\n"
FAST = ["--poll-interval", "0.005", "--timeout", "10"]


@pytest.fixture
def session(make_cluster, tmp_path):
    """A fake cluster plus a kubeconfig file and a cell file pointing at it."""

    def factory(script=None, faults=(), code=BELL):
        cluster = make_cluster(script or LifecycleScript(0, 1, 0, "ok\n"), faults=faults)
        kc = tmp_path / "kubeconfig"
        kc.write_text(cluster.kubeconfig_yaml())
        cell = tmp_path / "cell.py"
        cell.write_text(code)
        return cluster, str(kc), str(cell)

    return factory


def run(argv, env=None, driver=None):
    return main(argv, driver=driver or RecordingDriver(), env=env or {})


def test_run_success(session, capsys):
    cluster, kc, cell = session(LifecycleScript(1, 2, 0, "counts: {'00': 512, '11': 512}\n"))
    assert run(["run", cell, "--kubeconfig", kc, *FAST]) == 0
    out, err = capsys.readouterr()
    assert out == "counts: {'00': 512, '11': 512}\n"
    assert err == ""
    assert cluster.snapshot().jobs == []


@pytest.mark.parametrize("code", [1, 3, 137])
def test_run_passes_exit_code_through(session, capsys, code):
    _, kc, cell = session(LifecycleScript(0, 1, code, "Traceback\n"))
    assert run(["run", cell, "--kubeconfig", kc, *FAST]) == code
    out, err = capsys.readouterr()
    assert out == ""
    assert err.startswith("Traceback\n")
    assert f"code {code}" in err


def test_run_kubeconfig_from_env(session, capsys):
    _, kc, cell = session()
    assert run(["run", cell, *FAST], env={"KUBECONFIG": kc}) == 0


def test_flag_beats_env(session, capsys, tmp_path):
    _, kc, cell = session()
    assert run(["run", cell, "--kubeconfig", kc, *FAST], env={"KUBECONFIG": str(tmp_path / "nope")}) == 0


def test_run_timeout_exit_code(session, capsys):
    _, kc, cell = session(LifecycleScript(pending_polls=10**9))
    assert run(["run", cell, "--kubeconfig", kc, "--poll-interval", "0.01", "--timeout", "0.05"]) == EX_TIMEOUT
    assert "TimedOut" in capsys.readouterr().err


def test_run_infra_error_exit_code(session, capsys):
    _, kc, cell = session(faults=[Fault("create_job", 1, "403")])
    assert run(["run", cell, "--kubeconfig", kc, *FAST]) == EX_SOFTWARE
    assert "InfraError" in capsys.readouterr().err


def test_run_build_failure(session, capsys):
    _, kc, cell = session()
    assert run(["run", cell, "--kubeconfig", kc, *FAST], driver=RecordingDriver(fail_builds=1)) == EX_SOFTWARE


def test_run_json_output(session, capsys):
    _, kc, cell = session(LifecycleScript(0, 1, 0, "hi\n"))
    assert run(["run", cell, "--kubeconfig", kc, "--output", "json", *FAST]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["phase"] == "Succeeded" and doc["stdout"] == "hi\n"
    assert [s for s, _ in doc["timeline"]][-1] == "Done"


def test_missing_kubeconfig_is_usage_error(tmp_path, capsys):
    cell = tmp_path / "c.py"
    cell.write_text("x")
    missing = tmp_path / "absent.yaml"
    assert run(["run", str(cell), "--kubeconfig", str(missing)]) == EX_USAGE
    assert str(missing) in capsys.readouterr().err


def test_no_kubeconfig_at_all(tmp_path, capsys):
    cell = tmp_path / "c.py"
    cell.write_text("x")
    assert run(["run", str(cell)]) == EX_USAGE
    assert "KUBECONFIG" in capsys.readouterr().err


def test_missing_cell_file(capsys, tmp_path):
    assert run(["dry-run", str(tmp_path / "none.py")]) == EX_USAGE


def test_bad_flags_are_usage_errors(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == EX_USAGE
    cell = tmp_path / "c.py"
    cell.write_text("")
    assert run(["dry-run", str(cell), "--gpu", "-1"]) == EX_USAGE
    assert run(["dry-run", str(cell), "--base-image", "Bad Image"]) == EX_USAGE


def dry(tmp_path, capsys, code, *flags, env=None):
    cell = tmp_path / "cell.py"
    cell.write_text(code)
    assert run(["dry-run", str(cell), *flags], env=env) == 0
    return capsys.readouterr().out


def test_dry_run_matches_reference_job(tmp_path, capsys, golden):
    doc = json.loads(dry(tmp_path, capsys, BELL))
    assert normalize(doc["job"]) == yaml.safe_load((golden / "reference_job.yaml").read_text())
    assert doc["configmap"]["data"] == {"main.py": BELL}
    assert doc["image"]["requirements"] == "qiskit\nqiskit-aer\n"
    assert doc["job"]["spec"]["template"]["spec"]["containers"][0]["image"] == doc["image"]["image_ref"]


def test_dry_run_is_byte_stable_with_seed(tmp_path, capsys):
    a = dry(tmp_path, capsys, BELL, "--seed", "5")
    b = dry(tmp_path, capsys, BELL, "--seed", "5")
    c = dry(tmp_path, capsys, BELL, "--seed", "6")
    assert a == b != c


def test_dry_run_gpu0_golden(tmp_path, capsys, golden):
    out = dry(tmp_path, capsys, BELL, "--gpu", "0", "--seed", "0")
    assert out == (golden / "dry_run_gpu0.json").read_text()


def test_dry_run_empty_file(tmp_path, capsys):
    doc = json.loads(dry(tmp_path, capsys, ""))
    assert doc["configmap"]["data"] == {"main.py": ""}
    assert doc["image"]["requirements"] == ""
    assert doc["image"]["dockerfile"] == "FROM cuda-base:12\n"


def test_dry_run_env_precedence(tmp_path, capsys):
    env = {"Q8S_BASE_IMAGE": "env-base:1", "Q8S_REGISTRY": "env.io/team"}
    doc = json.loads(dry(tmp_path, capsys, "", env=env))
    assert doc["image"]["base_image"] == "env-base:1"
    assert doc["image"]["image_ref"].startswith("env.io/team/job-dependencies:")
    doc = json.loads(dry(tmp_path, capsys, "", "--registry", "flag.io/me", env=env))
    assert doc["image"]["image_ref"].startswith("flag.io/me/")
    assert doc["image"]["base_image"] == "env-base:1"


def test_dry_run_package_map_env(tmp_path, capsys):
    mapping = tmp_path / "map.txt"
    mapping.write_text("mylib=my-distribution\n")
    doc = json.loads(dry(tmp_path, capsys, "import mylib\n", env={"Q8S_PACKAGE_MAP": str(mapping)}))
    assert doc["image"]["requirements"] == "my-distribution\n"


def test_dry_run_does_not_touch_network(tmp_path, capsys):
    # no kubeconfig anywhere, still works
    dry(tmp_path, capsys, BELL, env={"KUBECONFIG": str(tmp_path / "missing")})


def test_check_config(fixtures, capsys):
    assert run(["check-config", "--kubeconfig", str(fixtures / "kubeconfig" / "token.yaml")]) == 0
    out = capsys.readouterr().out
    assert "workstation-gpu" in out and "quantum" in out
    assert "test-bearer-token" not in out


def test_check_config_json_and_namespace_override(fixtures, capsys):
    kc = str(fixtures / "kubeconfig" / "cert.yaml")
    assert run(["check-config", "--kubeconfig", kc, "--namespace", "other", "--output", "json"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["namespace"] == "other" and info["auth"] == "certificate"


def test_check_config_dangling(fixtures, capsys):
    assert run(["check-config", "--kubeconfig", str(fixtures / "kubeconfig" / "dangling.yaml")]) == EX_USAGE
    assert "missing-context" in capsys.readouterr().err


def test_install_kernelspec(tmp_path, capsys, fixtures):
    root = tmp_path / "kernels"
    kc = fixtures / "kubeconfig" / "token.yaml"
    assert run(["install-kernelspec", "--kernelspec-dir", str(root), "--kubeconfig", str(kc)]) == 0
    spec = json.loads((root / "q8s" / "kernel.json").read_text())
    assert spec["display_name"] == "Python Q8s kernel"
    assert spec["argv"] == [sys.executable, "-m", "q8s", "kernel", "{connection_file}"]
    assert spec["env"] == {"KUBECONFIG": str(kc.resolve())}
    # reinstall overwrites in place
    assert run(["install-kernelspec", "--kernelspec-dir", str(root), "--registry", "r.io/x"]) == 0
    spec = json.loads((root / "q8s" / "kernel.json").read_text())
    assert spec["env"] == {"Q8S_REGISTRY": "r.io/x"}
    assert sorted(p.name for p in root.iterdir()) == ["q8s"]


def test_install_kernelspec_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run(["install-kernelspec", "--kernelspec-dir", str(blocker)]) == 73
    assert "cannot write kernel spec" in capsys.readouterr().err


def test_kernel_bad_connection_file(tmp_path, capsys):
    bad = tmp_path / "conn.json"
    bad.write_text("{}")
    assert run(["kernel", str(bad)]) == EX_USAGE


def test_exit_code_constants():
    assert (EX_USAGE, EX_SOFTWARE, EX_TIMEOUT, EX_INTERRUPTED) == (64, 70, 124, 130)


def test_module_entry_point(tmp_path):
    cell = tmp_path / "c.py"
    cell.write_text("import numpy\n")
    proc = subprocess.run(
        [sys.executable, "-m", "q8s", "dry-run", str(cell), "--seed", "1"],
        capture_output=True, text=True, env={**os.environ, "KUBECONFIG": ""}, timeout=60,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["image"]["requirements"] == "numpy\n"
