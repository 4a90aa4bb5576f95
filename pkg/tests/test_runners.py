import numpy as np
import pytest

from svflow.experiments import runners as R
from svflow.experiments.config import build_config

SMALL = {
    "toy2d": ["iterations=30", "log_every=10", "n_train=256", "n_eval=128", "grid_size=4", "snapshot_points=6",
              "betas=[0.0, \"inf\"]"],
    "vmf": ["iterations=20", "log_every=10", "n_train=256", "n_eval=64", "gradcheck_coords=8"],
    "coupling": ["steps=6", "log_every=3", "num_sequences=16", "eval_sequences=4", "length=24"],
    "shuffle": ["steps=120", "num_sequences=48", "eval_sequences=4", "shuffle_seeds=1", "num_layers=3",
                "proportions=[0.0, 0.2, 0.95]"],
    "kernel": ["num_seeds=20", "sizes=[32, 128]"],
}


def run(name, **kw):
    return R.RUNNERS[name](build_config(name, {}, SMALL[name]), **kw)


@pytest.mark.parametrize("name,kw", [("toy2d", {"threads": 1}), ("vmf", {}), ("coupling", {"threads": 1}),
                                     ("shuffle", {}), ("kernel", {})])
def test_bit_reproducible_and_versioned(name, kw):
    a, b = run(name, **kw), run(name, **kw)
    assert a.files == b.files
    for fname, text in a.files.items():
        if fname.endswith(".csv"):
            assert text.startswith("# svflow-lab schema v1\n"), fname
    assert a.summary["targets"] == a.targets


def test_toy2d_outputs():
    res = run("toy2d", threads=1)
    assert {"toy2d/beta_0.0/snapshots.csv", "toy2d/beta_inf/elbo_grid.csv", "toy2d/beta_inf/field_grid.csv",
            "toy2d/beta_0.0/history.csv"} <= set(res.files)
    snap = res.files["toy2d/beta_0.0/snapshots.csv"].splitlines()
    assert len(snap) == 2 + 6 * 6  # header, columns, 6 times x 6 points
    for cell in res.summary["cells"]:
        assert cell["bound_gap_max"] <= 1e-9
        assert cell["kernel_rel_err"] <= 1e-10


def test_vmf_checkpoints():
    res = run("vmf")
    assert [c["iteration"] for c in res.summary["checks"]] == [0, 10, 20]
    assert all(c["unit_norm_err"] <= 1e-12 for c in res.summary["checks"])


def test_shuffle_zero_proportion_and_bins():
    res = run("shuffle")
    assert res.targets["zero_shuffle_exact"] is True
    assert len(res.summary["delta_log_ppl"]) == 4
    assert "shuffle/heatmap.csv" in res.files


def test_shuffle_rejects_untrained_model():
    from svflow.attention import ToyTransformer

    cfg = build_config("shuffle", {}, SMALL["shuffle"])
    dead = ToyTransformer.random(np.random.default_rng(0), cfg.dim, cfg.vocab, cfg.window, ["mha"] * 3)
    dead.head_weight[:] = 0.0
    with pytest.raises(ValueError, match="trained"):
        R.run_shuffle_probe(cfg, model=dead)


def test_shuffle_rejects_grid_with_empty_bins():
    cfg = build_config("shuffle", {}, SMALL["shuffle"] + ["proportions=[0.0, 0.95]"])
    with pytest.raises(ValueError, match="bins"):
        R.run_shuffle_probe(cfg)


def test_oracle_failure_is_loud(monkeypatch):
    monkeypatch.setattr(R, "_bound_gap", lambda *a: 1.0)
    with pytest.raises(R.OracleFailure, match="ELBO"):
        run("vmf")


def test_thread_limit(monkeypatch):
    monkeypatch.setenv("SVFLOW_THREADS", "3")
    assert R.thread_limit() == 3
    monkeypatch.setenv("SVFLOW_THREADS", "0")
    with pytest.raises(ValueError):
        R.thread_limit()


def test_parallel_cells_match_serial(monkeypatch):
    cfg = build_config("toy2d", {}, SMALL["toy2d"])
    serial = R.run_toy2d(cfg, threads=1)
    parallel = R.run_toy2d(cfg, threads=2)
    assert serial.files == parallel.files
