import io
import json

import numpy as np
import pytest

from abba.adapters import init_abba
from abba.checkpoint import save_adapter
from abba.cli import cmd_gradcheck, load_config, build_parser, main
from abba.gradients import AdapterGradients, abba_backward, random_abba
from abba.linalg import read_matrix_csv, write_matrix_csv


def run(argv):
    out = io.StringIO()
    code = main(argv, out=out)
    return code, out.getvalue()


RECON_MIN = [
    "--set", 'reconstruct.families=[{"tag": "gaussian"}]',
    "--set", "reconstruct.dims=[16,16]",
    "--set", "reconstruct.budgets=[4]",
    "--set", "reconstruct.seeds=[0]",
    "--set", "reconstruct.optimizer.steps=30",
]


class TestConfig:
    def test_set_and_overrides(self, tmp_path):
        args = build_parser().parse_args(
            ["train", "--set", "train.alpha=32", "--set", "train.data.source=synthetic", "--seed", "7",
             "--output-dir", str(tmp_path)]
        )
        cfg = load_config(args)
        assert cfg["train"]["alpha"] == 32 and cfg["train"]["data"]["source"] == "synthetic"
        assert cfg["seed"] == 7 and cfg["output_dir"] == str(tmp_path)

    def test_malformed_json_names_byte_offset(self, tmp_path, capsys):
        bad = tmp_path / "c.json"
        bad.write_text('{"seed": 1, "output_dir": "é",}', encoding="utf-8")
        code, _ = run(["gradcheck", "--config", str(bad)])
        assert code == 2
        assert "byte offset 31" in capsys.readouterr().err

    def test_unknown_key(self, capsys):
        assert run(["gradcheck", "--set", "gradcheck.nope=1"])[0] == 2
        assert "gradcheck.nope" in capsys.readouterr().err

    def test_config_file_unknown_section(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"bogus": {}}))
        assert run(["gradcheck", "--config", str(p)])[0] == 2

    def test_missing_config(self, tmp_path):
        assert run(["gradcheck", "--config", str(tmp_path / "none.json")])[0] == 2

    def test_argparse_usage(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestReconstruct:
    def test_minimal(self, tmp_path):
        code, out = run(["reconstruct", "--output-dir", str(tmp_path)] + RECON_MIN)
        assert code == 0
        lines = (tmp_path / "recon.csv").read_text().splitlines()
        assert len(lines) == 3 and lines[1].split(",")[4] == "abba" and lines[2].split(",")[4] == "lora"
        assert "gaussian" in out and "abba_win_fraction" in out

    def test_rerun_byte_identical(self, tmp_path):
        run(["reconstruct", "--output-dir", str(tmp_path / "a")] + RECON_MIN)
        run(["reconstruct", "--output-dir", str(tmp_path / "b")] + RECON_MIN)
        for name in ("recon.csv", "reconstruct_config.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_odd_budget(self, tmp_path):
        assert run(["reconstruct", "--output-dir", str(tmp_path), "--set", "reconstruct.budgets=[5]"])[0] == 2

    def test_divergence_exit_1(self, tmp_path, capsys):
        argv = RECON_MIN + ["--set", "reconstruct.optimizer.kind=sgd", "--set", "reconstruct.optimizer.lr=1e6"]
        assert run(["reconstruct", "--output-dir", str(tmp_path)] + argv)[0] == 1
        assert "restart" in capsys.readouterr().err


class TestGradcheck:
    def test_default_passes(self, tmp_path):
        code, out = run(["gradcheck", "--output-dir", str(tmp_path)])
        assert code == 0
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert [r["factor"] for r in report] == ["g_b1", "g_a1", "g_b2", "g_a2", "g_x"]
        assert max(r["max_rel_error"] for r in report) < 1e-6
        assert "all gradients within" in out

    def test_fault_injection(self, tmp_path):
        def flipped(ad, g):
            good = abba_backward(ad, g)
            return AdapterGradients(good.g_b1, -good.g_a1, good.g_b2, good.g_a2)

        args = build_parser().parse_args(["gradcheck", "--output-dir", str(tmp_path), "--set", "gradcheck.trials=3"])
        out = io.StringIO()
        assert cmd_gradcheck(load_config(args), out, backward=flipped) == 1
        assert "gradient check failed: g_a1" in out.getvalue()

    @pytest.mark.parametrize("trials", ["0", "-1", '"x"'])
    def test_degenerate_trials(self, tmp_path, trials):
        assert run(["gradcheck", "--output-dir", str(tmp_path), "--set", f"gradcheck.trials={trials}"])[0] == 2

    def test_fixed_sizes(self, tmp_path):
        argv = ["gradcheck", "--output-dir", str(tmp_path), "--set", "gradcheck.sizes=[[4,5,2,1],[3,3,1,3]]",
                "--set", "gradcheck.trials=4"]
        assert run(argv)[0] == 0


TRAIN_TINY = [
    "--set", "train.data.source=synthetic",
    "--set", "train.data.synthetic_per_class=20",
    "--set", "train.data.synthetic_finetune_epochs=1",
    "--set", "train.hidden=[8,8]",
    "--set", "train.rank=4",
    "--set", "train.seeds=[0,1]",
    "--set", "train.pretrain.epochs=1",
    "--set", "train.finetune.epochs=1",
]


class TestTrain:
    def test_none_only(self, tmp_path):
        code, out = run(["train", "--output-dir", str(tmp_path), "--set", 'train.methods=["none"]'] + TRAIN_TINY)
        assert code == 0
        assert "none" in out and "lora" not in out and "abba" not in out.replace("abba-", "")
        meta = json.loads((tmp_path / "train_metadata.json").read_text())
        assert meta["parameters"]["none"]["trainable"] == 0
        assert meta["data_source"].startswith("synthetic")

    def test_parity_printed(self, tmp_path):
        code, out = run(["train", "--output-dir", str(tmp_path), "--set", 'train.methods=["lora","abba"]'] + TRAIN_TINY)
        assert code == 0
        rows = {line.split()[0]: line.split() for line in out.splitlines() if line.split()[:1] in (["lora"], ["abba"])}
        assert rows["lora"][4:6] == rows["abba"][4:6]
        assert "+/-" in out

    def test_missing_mnist(self, tmp_path, capsys):
        code, _ = run(["train", "--output-dir", str(tmp_path), "--set", f"train.data.mnist_dir={tmp_path / 'mn'}"])
        assert code == 1
        assert str(tmp_path / "mn") in capsys.readouterr().err


class TestMerge:
    def setup_files(self, tmp_path, ad, w0):
        save_adapter(tmp_path / "ckpt", ad)
        write_matrix_csv(tmp_path / "w0.csv", w0)
        return ["--set", f"merge.checkpoint={tmp_path / 'ckpt'}", "--set", f"merge.base={tmp_path / 'w0.csv'}",
                "--output-dir", str(tmp_path / "out")]

    def test_merge_and_unmerge(self, tmp_path, rng):
        w0 = rng.standard_normal((6, 5))
        ad = random_abba(rng, 6, 5, 2, 2, alpha=1.3)
        argv = self.setup_files(tmp_path, ad, w0)
        code, out = run(["merge"] + argv)
        assert code == 0 and "round-trip max abs error" in out
        merged = read_matrix_csv(tmp_path / "out" / "merged.csv")
        assert np.max(np.abs(merged - w0 - ad.delta())) <= 1e-12
        write_matrix_csv(tmp_path / "w0.csv", merged)
        assert run(["merge", "--unmerge"] + argv)[0] == 0
        assert np.max(np.abs(read_matrix_csv(tmp_path / "out" / "unmerged.csv") - w0)) <= 1e-12

    def test_fresh_init_is_identity(self, tmp_path, rng):
        w0 = rng.standard_normal((6, 5))
        argv = self.setup_files(tmp_path, init_abba(w0, 2, 2), w0)
        assert run(["merge"] + argv)[0] == 0
        assert (tmp_path / "out" / "merged.csv").read_bytes() == (tmp_path / "w0.csv").read_bytes()

    def test_shape_mismatch(self, tmp_path, rng, capsys):
        argv = self.setup_files(tmp_path, random_abba(rng, 6, 5, 1, 1), rng.standard_normal((5, 6)))
        assert run(["merge"] + argv)[0] == 1
        assert "(6, 5)" in capsys.readouterr().err

    def test_missing_inputs(self, tmp_path):
        assert run(["merge", "--output-dir", str(tmp_path)])[0] == 2
        argv = ["--set", f"merge.checkpoint={tmp_path}", "--set", f"merge.base={tmp_path / 'x.csv'}"]
        assert run(["merge", "--output-dir", str(tmp_path)] + argv)[0] == 1
