import numpy as np
import pytest

from stegolab import cli
from stegolab.storage import (FormatError, file_digest, fnv1a64, format_kv, load_checkpoint, parse_kv, read_kv,
                              save_checkpoint)

TINY = {
    "gen-data": "corpus.height=8\ncorpus.width=8\ncorpus.n=24\n",
    "train-codec": "codec.epochs=1\ncodec.g_width=4\ncodec.dec_width=4\ncodec.batch_size=8\neval.count=4\n",
    "train-ddpm": "ddpm.epochs=1\nddpm.width=4\nddpm.steps=10\nddpm.batch_size=8\neval.count=4\n",
    "train-gan": "gan.epochs=1\ngan.base=4\ngan.disc_width=4\ngan.latent_dim=4\ngan.batch_size=8\n",
    "select-ddim": "select.epochs=2\nselect.steps=2\nselect.count=3\nselect.chunk=2\n",
    "select-gan": "select.epochs=2\nselect.count=3\n",
    "analyze": "analysis.count=6\n",
    "payload-sweep": ("sweep.payloads=1,2\nselect.epochs=1\nselect.steps=2\nselect.count=2\n"
                      "codec.epochs=1\ncodec.g_width=4\ncodec.dec_width=4\ncodec.batch_size=8\n"),
    "robustness": "robust.levels=0.01\nselect.epochs=1\nselect.steps=2\nselect.count=2\n",
    "steganalyze": ("stegan.payloads=1\nstegan.count=4\ncodec.epochs=1\ncodec.g_width=4\ncodec.dec_width=4\n"
                    "codec.batch_size=8\ndetector.epochs=1\ndetector.width=2\n"),
    "report": "report.count=4\n",
}

QUICKSTART = ["gen-data", "train-codec", "train-ddpm", "select-ddim", "analyze"]


def write_configs(root):
    root.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in TINY.items():
        p = root / f"{name}.txt"
        p.write_text(text)
        paths[name] = p
    return paths


def run_chain(root, names, seed=3):
    cfgs = write_configs(root)
    out = root / "out"
    codes = [cli.main([n, "--config", str(cfgs[n]), "--seed", str(seed), "--out", str(out)]) for n in names]
    return out, codes


class TestStorage:
    def test_fnv_reference_vectors(self):
        assert fnv1a64(b"") == "cbf29ce484222325"
        assert fnv1a64(b"a") == "af63dc4c8601ec8c"
        assert fnv1a64(b"foobar") == "85944171f73967e8"

    def test_checkpoint_round_trip(self, tmp_path):
        params = {"w": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)}
        save_checkpoint(tmp_path / "m.ckpt", params, {"kind": "x", "lr": 0.1})
        back, meta = load_checkpoint(tmp_path / "m.ckpt")
        np.testing.assert_array_equal(back["w"], params["w"])
        assert back["s"].shape == () and meta == {"kind": "x", "lr": "0.1"}
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw.startswith(b"STEGOLAB")

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOTMAGIC" + b"\0" * 20)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "bad.ckpt")
        save_checkpoint(tmp_path / "ok.ckpt", {"w": np.ones(2)})
        (tmp_path / "trail.ckpt").write_bytes((tmp_path / "ok.ckpt").read_bytes() + b"x")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "trail.ckpt")

    def test_kv(self, tmp_path):
        text = "# comment\na = 1\n\nb=x,y  # trailing\n"
        assert parse_kv(text) == {"a": "1", "b": "x,y"}
        with pytest.raises(ValueError):
            parse_kv("a=1\na=2\n")
        with pytest.raises(ValueError):
            parse_kv("novalue\n")
        assert format_kv({"a": 0.1, "b": [1, 2]}) == "a=0.1\nb=1,2\n"
        (tmp_path / "f.txt").write_text("k=v\n")
        assert read_kv(tmp_path / "f.txt") == {"k": "v"}


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("corpus.height=8\ncorpus.colour=red\n")
        assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path)]) == 1

    def test_bad_value_rejected(self, tmp_path, capsys):
        p = tmp_path / "c.txt"
        p.write_text("corpus.height=eight\n")
        assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path)]) == 1
        assert "corpus.height" in capsys.readouterr().err

    def test_invalid_spec_is_config_error(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("corpus.height=12\n")
        assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path)]) == 1

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["gen-data", "--config", str(tmp_path / "nope.txt")]) == 1

    def test_unknown_subcommand(self):
        assert cli.main(["train-vae", "--config", "x"]) == 1

    def test_missing_prerequisite(self, tmp_path, capsys):
        p = tmp_path / "c.txt"
        p.write_text("codec.epochs=1\n")
        assert cli.main(["train-codec", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "corpus" in err and "gen-data" in err


class TestReport:
    def test_empty_results(self, tmp_path):
        res = cli.Results(csvs={"empty": (["a", "b"], [])})
        inv = cli.write_report(res, tmp_path)
        assert (tmp_path / "empty.csv").read_text() == "a,b\n"
        assert {rel for rel, _ in inv} == {"empty.csv", "summary.txt"}
        for rel, dig in inv:
            assert file_digest(tmp_path / rel) == dig

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(RuntimeError):
            cli.write_report(cli.Results(), tmp_path / "file" / "sub")


def test_quickstart_deterministic(tmp_path):
    out_a, codes_a = run_chain(tmp_path / "a", QUICKSTART)
    out_b, codes_b = run_chain(tmp_path / "b", QUICKSTART)
    assert codes_a == codes_b == [0] * len(QUICKSTART)
    for stage in QUICKSTART:
        ma = read_kv(out_a / stage / "manifest.txt")
        mb = read_kv(out_b / stage / "manifest.txt")
        assert ma == mb
        assert any(k.startswith("output.") for k in ma)
    analyze = (out_a / "analyze" / "overlap.csv").read_text().splitlines()
    assert analyze[0].startswith("batch,overlap_fraction")
    assert [row.split(",")[0] for row in analyze[1:]] == ["corpus", "baseline", "selected"]
    assert (out_a / "analyze" / "variance_map_selected.png").exists()
    summary = (out_a / "select-ddim" / "summary.txt").read_text()
    assert "run 0: baseline_error=" in summary
    assert (out_a / "select-ddim" / "timing.txt").exists()


def test_other_stages(tmp_path):
    names = ["gen-data", "train-codec", "train-ddpm", "train-gan", "select-gan", "payload-sweep", "robustness",
             "steganalyze", "report"]
    out, codes = run_chain(tmp_path, names)
    assert codes == [0] * len(names)
    sweep = (out / "payload-sweep" / "payload_sweep.csv").read_text().splitlines()
    assert sweep[0] == ",".join(cli.SWEEP_HEADER) and len(sweep) == 3
    assert "unavailable" in sweep[1]
    det = (out / "steganalyze" / "detection.csv").read_text().splitlines()
    assert det[0] == "payload,scenario,detection_pct,error_pct" and len(det) == 3
    corr = (out / "report" / "correlations.csv").read_text()
    assert "brisque" in corr
    assert (out / "robustness" / "robustness.csv").exists()
