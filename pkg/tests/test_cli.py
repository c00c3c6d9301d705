import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from patchem import cli
from patchem.basis import BandlimitParams, build_pswf_basis, quaternion_to_matrix
from patchem.forward import compute_beta_table, project
from patchem.io import load_coefficients, read_json
from patchem.mrc import read_mrc

SMALL = ["basis.L=5", "em.schedule=[[2,2]]", "em.K=6", "simulation.N=60", "simulation.gamma=0.1",
         "simulation.n_micrographs=2", "evaluate.n_rotations=30", "evaluate.refine_steps=2"]


def _run(tmp_path, *args, extra=()):
    sets = []
    for s in list(SMALL) + [f"paths.cache={tmp_path / 'cache'}"] + list(extra):
        sets += ["--set", s]
    return cli.main(list(args) + sets)


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert _run(tmp, "simulate", "--out", str(tmp / "sim")) == 0
    return tmp


@pytest.fixture(scope="module")
def recon(sim):
    mics = sorted(str(p) for p in (sim / "sim").glob("micrograph_???.mrc"))
    assert _run(sim, "reconstruct", *mics, "--out", str(sim / "rec")) == 0
    return sim


def test_simulate_outputs(sim):
    d = sim / "sim"
    for name in ("truth.mrc", "truth.mrc.json", "truth_coeffs.npz", "micrograph_000.mrc",
                 "micrograph_000_clean.mrc", "micrograph_001.mrc.json"):
        assert (d / name).exists()
    side = read_json(d / "micrograph_000.mrc.json")
    assert side["manifest"]["sigma2"] > 0 and side["clean"] == "micrograph_000_clean.mrc"
    assert read_mrc(d / "micrograph_000.mrc").shape == (60, 60)


def test_same_seed_gives_identical_bytes(sim, tmp_path):
    assert _run(sim, "simulate", "--out", str(tmp_path / "again")) == 0
    for name in ("micrograph_000.mrc", "micrograph_001.mrc", "truth.mrc"):
        assert (tmp_path / "again" / name).read_bytes() == (sim / "sim" / name).read_bytes()


def test_reconstruct_outputs(recon):
    d = recon / "rec"
    for name in ("estimate.mrc", "estimate_coeffs.npz", "rho.npy", "progress.jsonl", "checkpoints/checkpoint.npz"):
        assert (d / name).exists()
    rho = np.load(d / "rho.npy")
    assert rho.shape == (100,) and abs(rho.sum() - 1) < 1e-12
    lines = (d / "progress.jsonl").read_text().splitlines()
    assert all("loglik" in json.loads(x) for x in lines)


def test_resume_keeps_the_estimate(recon, tmp_path):
    shutil.copytree(recon / "rec", tmp_path / "rec")
    mics = sorted(str(p) for p in (recon / "sim").glob("micrograph_???.mrc"))
    assert _run(recon, "reconstruct", *mics, "--out", str(tmp_path / "rec"), "--resume") == 0
    a, _, _ = load_coefficients(recon / "rec" / "estimate_coeffs.npz")
    b, _, _ = load_coefficients(tmp_path / "rec" / "estimate_coeffs.npz")
    assert np.array_equal(a.coeffs, b.coeffs)


def test_resume_under_another_configuration_fails(recon, tmp_path):
    shutil.copytree(recon / "rec", tmp_path / "rec")
    mics = sorted(str(p) for p in (recon / "sim").glob("micrograph_???.mrc"))
    code = _run(recon, "reconstruct", *mics, "--out", str(tmp_path / "rec"), "--resume",
                "--allow-foreign", extra=["em.eps=0.5"])
    assert code == 1


def test_pick_writes_scores(recon, tmp_path):
    mics = sorted(str(p) for p in (recon / "sim").glob("micrograph_???.mrc"))
    assert _run(recon, "pick", *mics, "--coeffs", str(recon / "rec" / "estimate_coeffs.npz"),
                "--out", str(tmp_path)) == 0
    rep = read_json(tmp_path / "pick_report.json")
    assert 0 <= rep["f1_empty"] <= 1 and len(rep["reports"]) == 2


def test_pick_threshold_failure(recon, tmp_path):
    mics = sorted(str(p) for p in (recon / "sim").glob("micrograph_???.mrc"))
    code = _run(recon, "pick", *mics, "--coeffs", str(recon / "rec" / "estimate_coeffs.npz"),
                "--out", str(tmp_path), extra=["pick.min_f1=1.01"])
    assert code == 1


def test_evaluate_without_alignment_warns(recon, tmp_path):
    with pytest.warns(UserWarning, match="without alignment"):
        code = _run(recon, "evaluate", str(recon / "rec" / "estimate.mrc"), str(recon / "sim" / "truth.mrc"),
                    "--out", str(tmp_path))
    assert code == 0
    assert (tmp_path / "fsc.csv").read_text().startswith("shell,frequency,fsc")


def test_evaluate_with_alignment(recon, tmp_path):
    code = _run(recon, "evaluate", str(recon / "rec" / "estimate.mrc"), str(recon / "sim" / "truth.mrc"),
                "--align", "--coeffs", str(recon / "rec" / "estimate_coeffs.npz"), "--out", str(tmp_path))
    assert code == 0
    rep = read_json(tmp_path / "evaluate_report.json")
    assert rep["aligned"] and len(rep["rotation"]) == 3


def test_evaluate_self_reaches_nyquist(recon, tmp_path, capsys):
    truth = str(recon / "sim" / "truth.mrc")
    with pytest.warns(UserWarning):
        assert _run(recon, "evaluate", truth, truth, "--out", str(tmp_path),
                    extra=["evaluate.min_resolution_shell=2"]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["resolution_shell"] == out["nyquist_shell"] == 2


def test_evaluate_threshold_failure(recon, tmp_path):
    est, truth = str(recon / "rec" / "estimate.mrc"), str(recon / "sim" / "truth.mrc")
    with pytest.warns(UserWarning):
        code = _run(recon, "evaluate", est, truth, "--out", str(tmp_path), extra=["evaluate.min_fsc_up_to=[2, 1.01]"])
    assert code == 1


def test_mixed_configurations_are_rejected(sim, tmp_path):
    assert _run(sim, "simulate", "--out", str(tmp_path / "other"), extra=["simulation.seed=5"]) == 0
    mics = [str(sim / "sim" / "micrograph_000.mrc"), str(tmp_path / "other" / "micrograph_000.mrc")]
    assert _run(sim, "reconstruct", *mics, "--out", str(tmp_path / "rec")) == 1


def test_foreign_micrographs_need_a_flag(sim, tmp_path):
    mics = [str(sim / "sim" / "micrograph_000.mrc")]
    assert _run(sim, "reconstruct", *mics, "--out", str(tmp_path), extra=["em.seed=9"]) == 1


def test_render_projection_matches_forward_model(recon, tmp_path):
    q = [0.9, 0.1, -0.3, 0.3]
    coeffs = recon / "sim" / "truth_coeffs.npz"
    assert _run(recon, "render-projection", "--coeffs", str(coeffs), "--quaternion", *map(str, q),
                "--output", str(tmp_path / "p.mrc")) == 0
    x, params, _ = load_coefficients(coeffs)
    basis = build_pswf_basis(BandlimitParams(L=5, ell_max=2))
    ref = project(x, quaternion_to_matrix(np.array(q) / np.linalg.norm(q)), basis, compute_beta_table(basis)).image
    img = read_mrc(tmp_path / "p.mrc")
    assert np.abs(img - ref).max() < 1e-5 * np.abs(ref).max()


def test_cache_basis(tmp_path, capsys):
    assert _run(tmp_path, "cache-basis") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["count"] > 0 and list((tmp_path / "cache").iterdir())


def test_exit_codes(sim, tmp_path):
    assert _run(sim, "evaluate", str(tmp_path / "missing.mrc"), str(tmp_path / "missing.mrc")) == 3
    assert _run(sim, "cache-basis", extra=["basis.nope=1"]) == 1
    with pytest.raises(SystemExit) as err:
        cli.main(["frobnicate"])
    assert err.value.code == 1
    mics = [str(sim / "sim" / "micrograph_000.mrc")]
    code = _run(sim, "reconstruct", *mics, "--out", str(tmp_path / "m"), "--allow-foreign",
                extra=["em.assembly=qg", "em.memory_budget=1000"])
    assert code == 2


def test_options_accepted_before_the_subcommand(tmp_path):
    assert cli.main(["--set", f"paths.cache={tmp_path}", "--set", "basis.L=5", "cache-basis",
                     "--set", "em.schedule=[[2,1]]"]) == 0


def test_console_script_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "patchem.cli", "cache-basis", "--set", "basis.L=5",
                        "--set", "em.schedule=[[2,1]]", "--set", f"paths.cache={tmp_path}"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["count"] > 0


def test_micrographs_share_one_noise_level(sim):
    s = [read_json(sim / "sim" / f"micrograph_00{i}.mrc.json")["manifest"]["sigma2"] for i in (0, 1)]
    assert s[0] == s[1]
