import json

import numpy as np
import pytest
from click.testing import CliRunner

from panelstate.cli import main

TOY_CONFIG = {
    "p": 1, "G": [[1.0]], "W": [[0.5]], "G_star": [[1.0]], "S0": [[0.75]], "m0": [0.0],
    "M": 2, "sigma": -1, "L": 2, "dirichlet_a": [0.6, 0.4], "n_particles": 32,
    "prior_mc_draws": 1000,
    "pattern_encoder": {"type": "mean_level", "cut": 0.3},
    "mcmc": {"n_chains": 2, "n_iter": 40, "burn_in": 10, "thin": 2, "seed": 5},
    "snapshots": {"enabled": True, "stride": 3},
}

TOY_SCENARIO = {"n_per_cell": 1, "horizon": 30, "change_day": 16,
                "clump_len_range": [3, 7]}


def invoke(*args):
    runner = CliRunner()
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


@pytest.fixture()
def pipeline(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(TOY_CONFIG))
    scen = tmp_path / "scenario.json"
    scen.write_text(json.dumps(TOY_SCENARIO))
    data = tmp_path / "data"
    run = tmp_path / "run"
    res = invoke("simulate", "--scenario", scen, "--out", data, "--seed", 3)
    assert res.exit_code == 0, res.output
    res = invoke("fit", "--data", data, "--config", cfg, "--out", run, "--seed", 7)
    assert res.exit_code == 0, res.output
    return tmp_path, cfg, scen, data, run


class TestConfigLoading:
    def test_empty_config_gives_defaults(self):
        from panelstate.config import load_config
        rc = load_config(None)
        m = rc.model
        assert m.p == 12 and m.M == 10.0 and m.sigma == -1.0 and m.L == 8
        assert np.allclose(m.dirichlet_a, 1 / 20)
        assert (rc.mcmc.n_chains, rc.mcmc.n_iter, rc.mcmc.burn_in, rc.mcmc.thin) == \
            (5, 13500, 1000, 25)

    def test_fractional_multiple_rejected(self):
        from panelstate.config import ConfigError, load_config
        with pytest.raises(ConfigError, match="multiple"):
            load_config({"sigma": -1, "M": 9.5})

    def test_negative_variance_rejected(self):
        from panelstate.config import ConfigError, load_config
        with pytest.raises(ConfigError, match="W"):
            load_config({"p": 2, "W": [[-1.0, 0.0], [0.0, 1.0]]})

    def test_unknown_key_rejected(self):
        from panelstate.config import ConfigError, load_config
        with pytest.raises(ConfigError, match="unknown"):
            load_config({"particles": 5})

    def test_encoder_l_mismatch(self):
        from panelstate.config import ConfigError, load_config
        with pytest.raises(ConfigError, match="encoder"):
            load_config({"L": 8, "dirichlet_a": [1] * 8,
                         "pattern_encoder": {"type": "mean_level", "cut": 0.0}})

    def test_exit_code_for_bad_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"sigma": -1, "M": 9.5}))
        data = tmp_path / "d"
        data.mkdir()
        res = invoke("fit", "--data", data, "--config", bad, "--out", tmp_path / "r")
        assert res.exit_code == 2

    def test_exit_code_for_bad_data(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{}")
        data = tmp_path / "d"
        data.mkdir()
        (data / "observations.csv").write_text("patient_id,day,y,treatment\na,1,2,t\n")
        (data / "baseline.csv").write_text("patient_id,intercept\na,1\n")
        res = invoke("fit", "--data", data, "--config", cfg, "--out", tmp_path / "r")
        assert res.exit_code == 3


class TestPipeline:
    def test_simulate_outputs(self, pipeline):
        _, _, _, data, _ = pipeline
        for name in ("observations.csv", "baseline.csv", "truth.csv", "meta.json"):
            assert (data / name).exists()
        header = (data / "observations.csv").read_text().splitlines()[0]
        assert header == "patient_id,day,y,treatment"
        meta = json.loads((data / "meta.json").read_text())
        assert meta["seed"] == 3

    def test_fit_outputs_and_manifest(self, pipeline):
        _, _, _, data, run = pipeline
        meta = json.loads((run / "meta.json").read_text())
        assert meta["status"] == "complete"
        assert meta["seed"] == 7
        assert meta["draws_per_chain"] == [15, 15]
        assert set(meta["input_digests"]) == {"observations.csv", "baseline.csv"}
        for name in ("delta.csv", "patterns.csv", "partition.csv", "atoms.csv"):
            assert (run / name).exists()
        assert (run / "theta").is_dir()

    def test_fit_refuses_overwrite_without_force(self, pipeline):
        tmp_path, cfg, _, data, run = pipeline
        res = invoke("fit", "--data", data, "--config", cfg, "--out", run, "--seed", 7)
        assert res.exit_code == 2
        res = invoke("fit", "--data", data, "--config", cfg, "--out", run,
                     "--seed", 7, "--force")
        assert res.exit_code == 0

    def test_summarize_outputs(self, pipeline):
        tmp_path, _, _, _, run = pipeline
        out = tmp_path / "summary"
        res = invoke("summarize", "--run", run, "--out", out)
        assert res.exit_code == 0, res.output
        for name in ("pattern_posterior.csv", "similarity.csv", "partition.csv",
                     "xi_posterior_mean.csv", "diagnostics.csv"):
            assert (out / name).exists()
        lines = (out / "pattern_posterior.csv").read_text().splitlines()
        assert lines[0] == "patient_id,p0,p1"
        probs = np.array([[float(v) for v in ln.split(",")[1:]] for ln in lines[1:]])
        assert np.allclose(probs.sum(axis=1), 1.0)
        diag = (out / "diagnostics.csv").read_text()
        assert "rhat_delta" in diag and "acceptance_rate" in diag

    def test_score_outputs(self, pipeline):
        tmp_path, _, _, data, run = pipeline
        # scenario truth uses the eight-pattern coding; remap onto the toy's
        # two patterns before scoring
        truth2 = tmp_path / "truth2.csv"
        lines = (data / "truth.csv").read_text().splitlines()
        head = lines[0].split(",")
        col = head.index("true_pattern")
        out_lines = [lines[0]]
        for ln in lines[1:]:
            parts = ln.split(",")
            parts[col] = "1" if parts[col] == "2" else "0"
            out_lines.append(",".join(parts))
        truth2.write_text("\n".join(out_lines) + "\n")
        res = invoke("score", "--run", run, "--truth", truth2, "--out", tmp_path / "sc")
        assert res.exit_code == 0, res.output
        text = (tmp_path / "sc" / "cross_entropy.txt").read_text()
        h = float(text.splitlines()[0].split()[1])
        assert h <= 0.0

    def test_score_rejects_out_of_range_truth(self, pipeline):
        tmp_path, _, _, data, run = pipeline
        res = invoke("score", "--run", run, "--truth", data / "truth.csv")
        assert res.exit_code == 3

    def test_treatment_effects_outputs(self, pipeline):
        tmp_path, _, _, data, run = pipeline
        out = tmp_path / "te"
        res = invoke("treatment-effects", "--run", run, "--out", out, "--data", data)
        assert res.exit_code == 0, res.output
        lines = (out / "treatment_effects.csv").read_text().splitlines()
        assert lines[0] == ("group,treatment,t_pre,t_post,intercept,slope,"
                            "prop_pre_lt_post,prop_slope_neg,n_slices,n_excluded")
        assert any(ln.startswith("all,") for ln in lines[1:])

    def test_prior_probs_output(self, pipeline):
        tmp_path, cfg, _, data, _ = pipeline
        out = tmp_path / "pp"
        res = invoke("prior-probs", "--data", data, "--config", cfg, "--out", out,
                     "--seed", 2, "--draws", 1000)
        assert res.exit_code == 0, res.output
        lines = (out / "g_probs.csv").read_text().splitlines()
        assert lines[0] == "patient_id,pattern,probability"
        probs = {}
        for ln in lines[1:]:
            pid, ell, p = ln.split(",")
            probs.setdefault(pid, []).append(float(p))
        for pid, ps in probs.items():
            assert abs(sum(ps) - 1.0) < 1e-9 and all(p > 0 for p in ps)


class TestEntryPoint:
    def test_console_script_help(self):
        import subprocess
        out = subprocess.run(["panelstate", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for sub in ("simulate", "prior-probs", "fit", "summarize", "score",
                    "treatment-effects"):
            assert sub in out.stdout


class TestRuntimeAbort:
    def test_exit_code_four_with_partial_store(self, tmp_path, monkeypatch):
        import panelstate.cli as cli_mod
        from panelstate.sampler import ChainAbort, ChainStore

        partial = ChainStore(chain_id=0, seed=1, patient_ids=["a"],
                             covariate_names=["intercept"],
                             retained_iters=np.array([1]),
                             delta=np.zeros((1, 1)),
                             patterns=np.zeros((1, 1), dtype=np.int16),
                             labels=np.zeros((1, 1), dtype=np.int32),
                             atoms=[np.ones((1, 2))], g_tables=np.full((1, 2), 0.5),
                             acceptance=np.zeros(1, dtype=np.int64), n_sweeps=40)

        def explode(*a, **kw):
            raise ChainAbort("synthetic failure", partial)

        monkeypatch.setattr(cli_mod, "run_chains", explode)
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(TOY_CONFIG))
        scen = tmp_path / "s.json"
        scen.write_text(json.dumps(TOY_SCENARIO))
        data = tmp_path / "data"
        assert invoke("simulate", "--scenario", scen, "--out", data, "--seed", 1
                      ).exit_code == 0
        run = tmp_path / "run"
        res = invoke("fit", "--data", data, "--config", cfg, "--out", run, "--seed", 1)
        assert res.exit_code == 4
        meta = json.loads((run / "meta.json").read_text())
        assert meta["status"] == "aborted"
        assert (run / "patterns.csv").exists()  # partial store serialized


class TestSequentialMode:
    def test_sequential_flag_matches_default(self, pipeline):
        tmp_path, cfg, _, data, run = pipeline
        run_seq = tmp_path / "run_seq"
        res = invoke("fit", "--data", data, "--config", cfg, "--out", run_seq,
                     "--seed", 7, "--sequential")
        assert res.exit_code == 0, res.output
        for name in ("delta.csv", "patterns.csv", "partition.csv", "atoms.csv"):
            assert (run / name).read_bytes() == (run_seq / name).read_bytes()


class TestPresetMatrices:
    def test_named_preset_for_single_matrix(self):
        from panelstate.config import default_state_matrices, load_config
        rc = load_config({"p": 6, "G": "appendix_b_default",
                          "W": np.diag([0.1] * 6).tolist()})
        assert np.array_equal(rc.model.G, default_state_matrices(6)["G"])
        assert rc.model.W[0, 0] == 0.1

    def test_shape_mismatch_names_field(self):
        from panelstate.config import ConfigError, load_config
        with pytest.raises(ConfigError, match="G_star"):
            load_config({"p": 3, "G_star": [[1.0, 0.0], [0.0, 1.0]]})
