import hashlib

import numpy as np
import pytest

from lengen_se import checkpoint, gradcheck
from lengen_se import model as M
from lengen_se.cli import main
from lengen_se.evaluation import read_report, si_sdr
from lengen_se.mixer import read_manifest, synth_clean
from lengen_se.wav import read_wav, write_wav

SMALL = ["model.n_layers=1", "model.n_heads=2", "model.d_model=16", "model.d_ff=32"]
QUICK = ["train.epochs=2", "train.iters_per_epoch=100", "train.batch_size=4", "train.clip_len_s=0.5",
         "train.warmup_iters=50", "data.val_count=2", "data.val_len_s=1.0"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_make_corpus_default_counts(tmp_path):
    assert main(["make-corpus", "--out", str(tmp_path)]) == 0
    entries = read_manifest(tmp_path / "manifest.csv")
    assert sum(e.role == "clean" for e in entries) == 60
    assert sum(e.role == "noise" for e in entries) == 12
    assert len(list(tmp_path.rglob("*.wav"))) == 72
    assert all((tmp_path / e.path).exists() for e in entries)


def test_make_corpus_rerun_identical(tmp_path):
    args = ["corpus.n_clean=5", "corpus.clean_len_s=1.0", "corpus.n_noise=4", "corpus.noise_len_s=1.0"]
    assert main(["make-corpus", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["make-corpus", "--out", str(tmp_path / "b"), *args]) == 0
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert a == b and len(a) == 10
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_make_corpus_bad_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["make-corpus", "--out", str(blocker / "sub"), "corpus.n_clean=3", "corpus.n_noise=4"]) != 0
    assert not (blocker / "sub").exists()
    assert str(blocker) in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    assert main(["train", "model.depth=3"]) == 1
    assert "model.depth" in capsys.readouterr().err


def test_config_file_and_echo(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\npe.scheme = kerple\n")
    out = tmp_path / "pe.txt"
    assert main(["pe-dump", "--config", str(cfg), "--frames", "4", "--out", str(out), *SMALL]) == 0
    err = capsys.readouterr().err
    assert "pe.scheme=kerple" in err and "model.d_model=16" in err
    assert out.read_text().startswith("# scheme=kerple frames=4")


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus_dir):
    runs = {}
    for scheme in ("no_pos", "kerple"):
        out = tmp_path_factory.mktemp(scheme)
        code = main(["train", f"data.manifest={corpus_dir / 'manifest.csv'}", f"out.dir={out}",
                     f"pe.scheme={scheme}", *SMALL, *QUICK])
        assert code == 0
        runs[scheme] = out
    return runs


def test_train_outputs(trained):
    out = trained["no_pos"]
    assert (out / "loss.csv").read_text().splitlines()[0] == "iter,epoch,split,loss"
    assert len((out / "loss.csv").read_text().splitlines()) == 1 + 200 + 2
    assert "pe.scheme=no_pos" in (out / "config.txt").read_text()


def test_schemes_give_different_checkpoints(trained):
    _, a, _ = checkpoint.load_model(trained["no_pos"] / "final.ckpt")
    cfg_b, b, _ = checkpoint.load_model(trained["kerple"] / "final.ckpt")
    assert cfg_b.pe_scheme == "kerple" and "pe.rho1" in b and "pe.rho1" not in a
    assert not np.array_equal(a["head.fc.weight"], b["head.fc.weight"])


def test_train_invalid_value(corpus_dir, tmp_path, capsys):
    code = main(["train", f"data.manifest={corpus_dir / 'manifest.csv'}", f"out.dir={tmp_path}",
                 *SMALL, *QUICK, "train.eps=0"])
    assert code == 1
    assert "eps" in capsys.readouterr().err


def test_train_nan_abort(monkeypatch, corpus_dir, tmp_path, capsys):
    real = M.forward

    def poisoned(mag, params, config, keep_tape=True):
        mask, tape = real(mag, params, config, keep_tape)
        return mask * np.nan, tape

    monkeypatch.setattr(M, "forward", poisoned)
    code = main(["train", f"data.manifest={corpus_dir / 'manifest.csv'}", f"out.dir={tmp_path}", *SMALL, *QUICK])
    assert code == 2
    assert "non-finite" in capsys.readouterr().err


class TestEnhance:
    def test_length_and_determinism(self, trained, tmp_path):
        x = 0.3 * np.random.default_rng(0).normal(size=12345)
        write_wav(tmp_path / "in.wav", x)
        ckpt = trained["no_pos"] / "best.ckpt"
        assert main(["enhance", "--checkpoint", str(ckpt), str(tmp_path / "in.wav"), str(tmp_path / "a.wav")]) == 0
        assert main(["enhance", "--checkpoint", str(ckpt), str(tmp_path / "in.wav"), str(tmp_path / "b.wav")]) == 0
        assert read_wav(tmp_path / "a.wav").shape == (12345,)
        assert digest(tmp_path / "a.wav") == digest(tmp_path / "b.wav")

    def test_long_input_rpe(self, trained, tmp_path):
        write_wav(tmp_path / "in.wav", synth_clean(4, 20.0), fmt="float32")
        assert main(["enhance", "--checkpoint", str(trained["kerple"] / "best.ckpt"), "--format", "float32",
                     str(tmp_path / "in.wav"), str(tmp_path / "out.wav")]) == 0
        assert read_wav(tmp_path / "out.wav").size == 20 * 16000

    def test_clean_input_mostly_preserved(self, trained, tmp_path):
        clean = synth_clean(8, 3.0)
        write_wav(tmp_path / "in.wav", clean, fmt="float32")
        assert main(["enhance", "--checkpoint", str(trained["no_pos"] / "best.ckpt"), "--format", "float32",
                     str(tmp_path / "in.wav"), str(tmp_path / "out.wav")]) == 0
        inp, out = read_wav(tmp_path / "in.wav"), read_wav(tmp_path / "out.wav")
        assert si_sdr(out, inp) > 10.0

    def test_rate_mismatch(self, trained, tmp_path, capsys):
        from scipy.io import wavfile
        wavfile.write(tmp_path / "in.wav", 22050, np.zeros(1000, dtype=np.int16))
        code = main(["enhance", "--checkpoint", str(trained["no_pos"] / "best.ckpt"),
                     str(tmp_path / "in.wav"), str(tmp_path / "out.wav")])
        assert code == 1
        assert "22050" in capsys.readouterr().err
        assert not (tmp_path / "out.wav").exists()


def test_eval_sweep(trained, corpus_dir, tmp_path, capsys):
    report = tmp_path / "sweep.csv"
    code = main(["eval-sweep", "--model", f"no_pos={trained['no_pos'] / 'best.ckpt'}",
                 "--model", f"kerple={trained['kerple'] / 'best.ckpt'}", "--report", str(report),
                 f"data.manifest={corpus_dir / 'manifest.csv'}", "eval.test_lengths=0.5,1",
                 "eval.snrs=0,10", "eval.mixtures_per_length=4"])
    assert code == 0
    rows = read_report(report)
    assert len(rows) == 4 * 2 * 2 * 3
    assert {r[1] for r in rows if r[0] == "kerple"} == {0.5}
    assert "report written" in capsys.readouterr().out


def test_eval_sweep_mismatched_models(trained, corpus_dir, tmp_path):
    other = tmp_path / "other.ckpt"
    config = M.ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16)
    checkpoint.save_model(other, config, M.init_params(config, 0))
    code = main(["eval-sweep", "--model", f"a={trained['no_pos'] / 'best.ckpt'}", "--model", f"b={other}",
                 f"data.manifest={corpus_dir / 'manifest.csv'}"])
    assert code == 1


class TestGradCheck:
    def test_pass_lists_groups(self, capsys):
        assert main(["grad-check"]) == 0
        out = capsys.readouterr().out
        for scheme in ("no_pos", "sinusoidal", "learned_ape", "t5_rpe", "kerple"):
            config = M.ModelConfig(**{**gradcheck.TINY.to_dict(), "pe_scheme": scheme})
            for name in M.param_shapes(config):
                assert f"{scheme:<12} {name} " in out
        assert out.strip().splitlines()[-1].startswith("PASS")

    def test_corrupted_backward_fails(self, monkeypatch, capsys):
        real = M.backward

        def corrupted(tape, dmask, params, config=None):
            grads = real(tape, dmask, params, config)
            grads["head.fc.bias"] = grads["head.fc.bias"] * 1.01
            return grads

        monkeypatch.setattr(M, "backward", corrupted)
        assert main(["grad-check", "--schemes", "no_pos"]) == 2
        assert "FAIL no_pos       head.fc.bias" in capsys.readouterr().out


class TestPeDump:
    def dump(self, tmp_path, *args):
        out = tmp_path / "dump.txt"
        assert main(["pe-dump", "--out", str(out), *args]) == 0
        blocks, current = [], []
        for line in out.read_text().splitlines():
            if line.startswith("#"):
                if current:
                    blocks.append(np.array(current))
                current = []
            else:
                current.append([float(v) for v in line.split(",")])
        if current:
            blocks.append(np.array(current))
        return blocks

    def test_kerple_diagonal(self, tmp_path):
        blocks = self.dump(tmp_path, "--scheme", "kerple", "--frames", "20", *SMALL)
        assert len(blocks) == 2
        for b in blocks:
            assert b.shape == (20, 20) and np.all(np.diag(b) == 0.0)

    def test_t5_distinct_values(self, tmp_path):
        config = M.ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, pe_scheme="t5_rpe")
        params = M.init_params(config, 0)
        params["pe.buckets"] = np.random.default_rng(0).normal(size=params["pe.buckets"].shape)
        checkpoint.save_model(tmp_path / "t5.ckpt", config, params)
        blocks = self.dump(tmp_path, "--checkpoint", str(tmp_path / "t5.ckpt"), "--frames", "300")
        for h, b in enumerate(blocks):
            # bucket 16 cannot be produced by the bucketing rule, so 31 of the 32 entries appear
            assert len(np.unique(b)) == 31
            assert set(np.unique(b)) == set(np.delete(params["pe.buckets"][h], 16))

    def test_sinusoidal_bounded(self, tmp_path):
        (table,) = self.dump(tmp_path, "--scheme", "sinusoidal", "--frames", "50", *SMALL)
        assert table.shape == (50, 16) and np.all(np.abs(table) <= 1.0)

    def test_no_pos_empty(self, tmp_path):
        assert self.dump(tmp_path, "--scheme", "no_pos", "--frames", "5") == []

    def test_matches_forward_bias(self, tmp_path):
        config = M.ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, pe_scheme="kerple")
        params = M.init_params(config, 0)
        params["pe.rho1"] = np.array([0.3, -0.2])
        checkpoint.save_model(tmp_path / "k.ckpt", config, params)
        blocks = self.dump(tmp_path, "--checkpoint", str(tmp_path / "k.ckpt"), "--frames", "7")
        np.testing.assert_array_equal(np.stack(blocks), config.scheme.rpe(params, 7))
