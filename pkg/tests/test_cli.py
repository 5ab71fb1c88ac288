import json

import pytest

from dcflow.cli import main, read_config_file
from dcflow.data_io import default_toy_template, make_toy_dataset, write_jsonl

CIF_TEMPLATE = """data_toy{idx}
_cell_length_a {a}
_cell_length_b 4.0
_cell_length_c 4.0
_cell_angle_alpha 90.0
_cell_angle_beta 90.0
_cell_angle_gamma 90.0
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
_atom_site_occupancy
Sr1 Sr 0.05 0.10 0.15 0.5
Ba1 Ba 0.05 0.10 0.15 0.5
Ti1 Ti 0.55 0.60 0.40 1.0
O1 O 0.30 0.75 0.80 1.0
K1 K 0.80 0.30 0.70 1.0
"""


@pytest.fixture
def cif_dir(tmp_path):
    d = tmp_path / "cifs"
    d.mkdir()
    for i, a in enumerate((3.95, 4.0, 4.05, 4.02)):
        (d / f"s{i}.cif").write_text(CIF_TEMPLATE.format(idx=i, a=a))
    (d / "broken.cif").write_text("data_x\n_cell_length_a 3.0\n")
    return d


class TestConfigFile:
    def test_parse(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("epochs = 5\nlearning_rate = 1e-3  # fast\n\n# comment\n")
        assert read_config_file(str(path)) == {"epochs": "5", "learning_rate": "1e-3"}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs 5\n")
        with pytest.raises(Exception):
            read_config_file(str(path))


class TestPipeline:
    def test_end_to_end(self, cif_dir, tmp_path, capsys):
        data = tmp_path / "data.jsonl"
        assert main(["curate", "--cif-dir", str(cif_dir), "--out", str(data)]) == 0
        out = capsys.readouterr().out
        assert "curated 4" in out and "rejected 1" in out

        labeled = tmp_path / "labeled.jsonl"
        assert main(["split", "--in", str(data), "--out", str(labeled),
                     "--seed", "0", "--fractions", "0.4,0.1,0.5"]) == 0

        cfgfile = tmp_path / "train.cfg"
        cfgfile.write_text("epochs = 2\nbatch_size = 2\nhidden_dim = 16\n"
                           "num_layers = 1\nn_freq = 4\nn_max = 8\n")
        model = tmp_path / "model.ckpt"
        assert main(["train", "--task", "dng", "--data", str(labeled),
                     "--config", str(cfgfile), "--out", str(model),
                     "--seed", "0"]) == 0

        gen = tmp_path / "gen.jsonl"
        assert main(["sample", "--model", str(model), "--task", "dng",
                     "--n-samples", "4", "--steps", "5", "--slope", "20",
                     "--seed", "1", "--out", str(gen), "--deterministic"]) == 0
        gen2 = tmp_path / "gen2.jsonl"
        assert main(["sample", "--model", str(model), "--task", "dng",
                     "--n-samples", "4", "--steps", "5", "--slope", "20",
                     "--seed", "1", "--out", str(gen2), "--deterministic"]) == 0
        assert gen.read_text() == gen2.read_text()

        disc = tmp_path / "gen_disc.jsonl"
        assert main(["discretize", "--in", str(gen), "--out", str(disc)]) == 0

        report = tmp_path / "report.json"
        assert main(["evaluate", "--task", "dng", "--pred", str(disc),
                     "--ref", str(labeled), "--out", str(report)]) == 0
        payload = json.loads(report.read_text())
        assert 0.0 <= payload["structural_validity"] <= 1.0
        assert payload["wdist_density"] >= 0.0

        # CSP conditioning path against the test subset
        csp_model = tmp_path / "csp.ckpt"
        assert main(["train", "--task", "csp", "--data", str(labeled),
                     "--config", str(cfgfile), "--out", str(csp_model),
                     "--seed", "0"]) == 0
        pred = tmp_path / "csp_pred.jsonl"
        assert main(["sample", "--model", str(csp_model), "--task", "csp",
                     "--conditions", str(labeled), "--steps", "5",
                     "--seed", "2", "--out", str(pred), "--deterministic"]) == 0
        csp_report = tmp_path / "csp_report.json"
        # conditions file holds all splits; evaluate against the same records
        assert main(["evaluate", "--task", "csp", "--pred", str(pred),
                     "--ref", str(pred), "--out", str(csp_report)]) == 0
        assert json.loads(csp_report.read_text())["match_rate"] == 1.0

    def test_data_error_exit_code(self, tmp_path):
        assert main(["curate", "--cif-dir", str(tmp_path), "--out",
                     str(tmp_path / "x.jsonl")]) == 3
        assert main(["split", "--in", str(tmp_path / "missing.jsonl"),
                     "--out", str(tmp_path / "y.jsonl")]) == 3

    def test_plot_outputs(self, tmp_path, rng):
        pytest.importorskip("matplotlib")
        data = make_toy_dataset(default_toy_template(), 6, 0.01, rng)
        ref = tmp_path / "ref.jsonl"
        write_jsonl(data, str(ref))
        report = tmp_path / "r.json"
        plots = tmp_path / "plots"
        assert main(["evaluate", "--task", "dng", "--pred", str(ref),
                     "--ref", str(ref), "--out", str(report),
                     "--plot", str(plots)]) == 0
        assert (plots / "density.png").exists()
        assert (plots / "n_el.png").exists()

    def test_env_seed_default(self, monkeypatch):
        monkeypatch.setenv("DCFLOW_SEED", "7")
        from dcflow.cli import build_parser
        args = build_parser().parse_args(["split", "--in", "x", "--out", "y"])
        assert args.seed == 7

    def test_selftest_passes(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 3
