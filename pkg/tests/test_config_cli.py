import subprocess
import sys

import pytest

from pidiff.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_ORDER, main
from pidiff.config import SCHEMA, ConfigError, config_from_dict, load_config, parse_lines
from pidiff.data import load_dataset, read_pgm16
from pidiff.tensor import load_tensor

TINY = {
    "image_size": "16", "n_train": "8", "n_test": "4", "tevnet_widths": "2,4,4", "tevnet_epochs": "2",
    "tevnet_batch": "4", "denoiser_widths": "4,4", "T_steps": "10", "iterations": "3", "batch_size": "2",
    "log_every": "1", "checkpoint_every": "2", "steps": "2,4", "n_samples": "4", "sample_batch": "4",
    "macs_steps": "2,4,5,10", "n_images": "2",
}


def write_cfg(path, **settings):
    merged = dict(TINY, **settings)
    path.write_text("".join(f"{k}={v}\n" for k, v in merged.items()), encoding="utf-8")
    return path


def run(tmp_path, command, **settings):
    cfg = write_cfg(tmp_path / f"{command}.in.cfg", dataset_dir=tmp_path / "data", output_dir=tmp_path / "out",
                    **settings)
    return main([command, "--config", str(cfg)])


def files_bytes(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


# -- config parsing ---------------------------------------------------------------------

def test_defaults():
    cfg = load_config()
    assert cfg.n_train == 500 and cfg.n_test == 100 and cfg.image_size == 64 and cfg.m == 4
    assert cfg.k1 == 50 and cfg.k2 == 5 and cfg.sampler == "ddim" and cfg.eta == 0


def test_comments_and_overrides(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# comment\n\nseed = 7  # trailing\nsteps=2,4\n", encoding="utf-8")
    cfg = load_config(p, ["seed=9"])
    assert cfg.seed == 9 and cfg.steps == (2, 4)


def test_unknown_key_names_file_and_line(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("seed=1\nlearning_rate=3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=r"bad.cfg:2.*learning_rate"):
        load_config(p)
    with pytest.raises(ConfigError, match="expected key=value"):
        parse_lines(["seed"])
    with pytest.raises(ConfigError, match="sampler"):
        config_from_dict({"sampler": "euler"})


def test_dump_roundtrip():
    cfg = config_from_dict({"seed": 3, "steps": "5,10", "k1": 0})
    again = load_config(None, [line for line in cfg.dump().splitlines() if line and not line.startswith("#")])
    assert again.values == cfg.values
    assert set(again.values) == set(SCHEMA)


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("PID_OUTPUT_ROOT", str(tmp_path))
    cfg = config_from_dict({"output_dir": "runs/a"})
    assert cfg.output_path("x") == tmp_path / "runs" / "a" / "x"
    absolute = config_from_dict({"output_dir": str(tmp_path / "abs")})
    assert absolute.output_path() == tmp_path / "abs"


# -- exit codes -------------------------------------------------------------------------

def test_unknown_key_exit_code(tmp_path, capsys):
    assert run(tmp_path, "data-gen", bogus_key="1") == EXIT_CONFIG
    assert "bogus_key" in capsys.readouterr().err


def test_stage_mismatch(tmp_path):
    assert run(tmp_path, "data-gen", stage="sample") == EXIT_CONFIG


def test_physics_without_tevnet_is_order_error(tmp_path):
    assert run(tmp_path, "data-gen") == EXIT_OK
    assert run(tmp_path, "pid-train", k1="50", k2="5") == EXIT_ORDER


def test_missing_artifacts(tmp_path):
    assert run(tmp_path, "tevnet-train") == EXIT_MISSING
    assert run(tmp_path, "sample", pid_checkpoint=tmp_path / "nope.ckpt") == EXIT_MISSING
    assert run(tmp_path, "decompose", tevnet_checkpoint=tmp_path / "nope.ckpt") == EXIT_MISSING


def test_codec_train_needs_learned_kind(tmp_path):
    assert run(tmp_path, "codec-train") == EXIT_CONFIG


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "pidiff.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "data-gen" in out.stdout


# -- full pipeline ------------------------------------------------------------------------

def pipeline(root):
    data, out = root / "data", root / "out"
    common = dict(dataset_dir=data, output_dir=out)
    codes = [main(["data-gen", "--config", str(write_cfg(root / "d.cfg", **common))])]
    codes.append(main(["tevnet-train", "--config", str(write_cfg(root / "t.cfg", **common))]))
    tev = out / "tevnet.ckpt"
    codes.append(main(["pid-train", "--config", str(write_cfg(root / "p.cfg", tevnet_checkpoint=tev, **common))]))
    pid = out / "pid_0000003.ckpt"
    codes.append(main(["sample", "--config", str(write_cfg(root / "s.cfg", pid_checkpoint=pid, **common))]))
    codes.append(main(["evaluate", "--config",
                       str(write_cfg(root / "e.cfg", pid_checkpoint=pid, tevnet_checkpoint=tev, **common))]))
    codes.append(main(["decompose", "--config", str(write_cfg(root / "x.cfg", tevnet_checkpoint=tev, **common))]))
    return codes


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    return a, b, pipeline(a), pipeline(b)


def test_pipeline_succeeds(runs):
    _, _, codes_a, codes_b = runs
    assert codes_a == [EXIT_OK] * 6 and codes_b == codes_a


def test_pipeline_is_byte_identical(runs):
    a, b, _, _ = runs
    fa, fb = files_bytes(a / "data"), files_bytes(b / "data")
    assert fa.keys() == fb.keys() and all(fa[k] == fb[k] for k in fa if not k.endswith(".cfg"))
    oa, ob = files_bytes(a / "out"), files_bytes(b / "out")
    assert oa.keys() == ob.keys()
    # configs echo absolute paths, which differ between the two roots
    differing = [k for k in oa if oa[k] != ob[k] and not k.endswith(".cfg")]
    assert differing == []


def test_dataset_split(runs):
    a = runs[0]
    assert len(load_dataset(a / "data" / "train")) == 8
    assert len(load_dataset(a / "data" / "test")) == 4
    assert (a / "data" / "data-gen.cfg").exists()


def test_training_artifacts(runs):
    out = runs[0] / "out"
    for name in ("tevnet.ckpt", "tevnet_metrics.tsv", "pid_0000002.ckpt", "pid_0000003.ckpt", "metrics.tsv",
                 "tevnet-train.cfg", "pid-train.cfg"):
        assert (out / name).exists(), name
    assert (out / "tevnet_metrics.tsv").read_text(encoding="utf-8").splitlines()[-1].startswith("heldout\t")
    log = (out / "metrics.tsv").read_text(encoding="utf-8").splitlines()
    assert log[0] == "iteration\tl_noise\tl_rec\tl_tev\ttotal" and len(log) == 4


def test_sample_sweep_directories(runs):
    out = runs[0] / "out"
    for s in (2, 4):
        d = out / f"samples_s{s:03d}"
        assert sorted(p.name for p in d.glob("*.tsr")) == [f"{i:05d}.tsr" for i in range(4)]
        assert len(list(d.glob("*.pgm"))) == 4
        img = load_tensor(d / "00000.tsr")
        assert img.shape == (16, 16) and img.min() >= -1 and img.max() <= 1


def test_evaluation_outputs(runs):
    ev = runs[0] / "out" / "evaluation"
    assert (ev / "report.txt").exists() and (ev / "report.csv").read_text(encoding="utf-8").startswith("image,")
    emd = [ln.split("\t") for ln in (ev / "emd.tsv").read_text(encoding="utf-8").splitlines()[1:]]
    self_rows = [r for r in emd if r[0] == r[1]]
    assert len(self_rows) == 3 and all(float(r[2]) == 0.0 for r in self_rows)
    lrec = (ev / "lrec.tsv").read_text(encoding="utf-8").splitlines()
    assert lrec[0] == "index\tvisible\tinfrared\tgenerated" and len(lrec) == 5
    rows = [ln.split("\t") for ln in (ev / "macs.tsv").read_text(encoding="utf-8").splitlines()[1:]]
    for s, c, u, d, total in rows:
        assert int(total) == int(c) + int(u) * int(s) + int(d)
    assert [int(r[0]) for r in rows] == [2, 4, 5, 10]


def test_evaluate_reference_against_itself(runs, tmp_path):
    a = runs[0]
    ref = tmp_path / "ref"
    ref.mkdir()
    from pidiff.tensor import save_tensor
    for i, pair in enumerate(load_dataset(a / "data" / "test")):
        save_tensor(ref / f"{i:05d}.tsr", pair.infrared)
    cfg = write_cfg(tmp_path / "e.cfg", dataset_dir=a / "data", output_dir=tmp_path / "o", generated_dir=ref)
    assert main(["evaluate", "--config", str(cfg)]) == EXIT_OK
    csv = (tmp_path / "o" / "evaluation" / "report.csv").read_text(encoding="utf-8").splitlines()
    for line in csv[1:5]:
        name, p, s, capped = line.split(",")
        assert float(p) == 99.0 and capped == "1" and abs(float(s) - 1.0) < 1e-9


def test_evaluate_lists_missing_indices(runs, tmp_path, capsys):
    a = runs[0]
    gen = tmp_path / "gen"
    gen.mkdir()
    src = a / "out" / "samples_s002"
    for i in (0, 2):
        (gen / f"{i:05d}.tsr").write_bytes((src / f"{i:05d}.tsr").read_bytes())
    cfg = write_cfg(tmp_path / "e.cfg", dataset_dir=a / "data", output_dir=tmp_path / "o", generated_dir=gen)
    assert main(["evaluate", "--config", str(cfg)]) == EXIT_MISSING
    assert "[1, 3]" in capsys.readouterr().err


def test_decompose_outputs(runs):
    d = runs[0] / "out" / "decompose"
    names = sorted(p.name for p in d.iterdir() if not p.name.endswith(".cfg"))
    expected = sorted(f"{i:05d}{suffix}" for i in range(2)
                      for suffix in ("_e.pgm", "_T.pgm", "_env.pgm", "_err.pgm", ".range"))
    assert names == expected
    rows = dict((ln.split("\t")[0], ln.split("\t")[1:]) for ln in
                (d / "00000.range").read_text(encoding="utf-8").splitlines()[1:])
    lo, hi = (float(v) for v in rows["e"])
    raw = read_pgm16(d / "00000_e.pgm")
    e = lo + raw / 65535.0 * (hi - lo)
    assert e.min() >= 0 and e.max() <= 1


def test_resolved_config_reproduces_run(runs, tmp_path):
    a = runs[0]
    echoed = a / "out" / "pid-train.cfg"
    out2 = tmp_path / "again"
    assert main(["pid-train", "--config", str(echoed), "--set", f"output_dir={out2}"]) == EXIT_OK
    assert (out2 / "pid_0000003.ckpt").read_bytes() == (a / "out" / "pid_0000003.ckpt").read_bytes()


def test_resume_continues_numbering(runs, tmp_path):
    a = runs[0]
    out = tmp_path / "res"
    base = dict(dataset_dir=a / "data", output_dir=out, tevnet_checkpoint=a / "out" / "tevnet.ckpt")
    assert main(["pid-train", "--config", str(write_cfg(tmp_path / "1.cfg", **base))]) == EXIT_OK
    cfg = write_cfg(tmp_path / "2.cfg", resume=out / "pid_0000003.ckpt", iterations="2", **base)
    assert main(["pid-train", "--config", str(cfg)]) == EXIT_OK
    assert (out / "pid_0000005.ckpt").exists()
    iters = [ln.split("\t")[0] for ln in (out / "metrics.tsv").read_text(encoding="utf-8").splitlines()[1:]]
    assert iters == ["1", "2", "3", "4", "5"]


def test_baseline_runs_without_tevnet(runs, tmp_path):
    a = runs[0]
    cfg = write_cfg(tmp_path / "b.cfg", dataset_dir=a / "data", output_dir=tmp_path / "b", k1="0", k2="0",
                    iterations="1")
    assert main(["pid-train", "--config", str(cfg)]) == EXIT_OK


def test_sample_trace_goes_to_stderr(runs, tmp_path, capsys):
    a = runs[0]
    cfg = write_cfg(tmp_path / "s.cfg", dataset_dir=a / "data", output_dir=tmp_path / "s", steps="2", trace="1",
                    pid_checkpoint=a / "out" / "pid_0000003.ckpt")
    assert main(["sample", "--config", str(cfg)]) == EXIT_OK
    err = capsys.readouterr().err.splitlines()
    assert len(err) == 2 and err[0].startswith("s=2\tbatch=0\tt=10")


def test_output_root_env_for_commands(tmp_path, monkeypatch):
    monkeypatch.setenv("PID_OUTPUT_ROOT", str(tmp_path))
    cfg = write_cfg(tmp_path / "d.cfg", dataset_dir="rel_data", output_dir="rel_out", n_train="2", n_test="1")
    assert main(["data-gen", "--config", str(cfg)]) == EXIT_OK
    assert (tmp_path / "rel_data" / "train" / "manifest.tsv").exists()


@pytest.mark.slow
def test_decompose_error_map_of_trained_tevnet(tmp_path):
    common = dict(TINY, image_size="32", n_train="64", n_test="4", tevnet_widths="16,32,64", tevnet_epochs="200",
                  tevnet_batch="16", n_images="4", dataset_dir=tmp_path / "data", output_dir=tmp_path / "out",
                  tevnet_checkpoint=tmp_path / "out" / "tevnet.ckpt")
    cfg = tmp_path / "run.cfg"
    cfg.write_text("".join(f"{k}={v}\n" for k, v in common.items()), encoding="utf-8")
    for command in ("data-gen", "tevnet-train", "decompose"):
        assert main([command, "--config", str(cfg)]) == EXIT_OK
    worst = []
    for i in range(4):
        rows = dict((ln.split("\t")[0], ln.split("\t")[1:]) for ln in
                    (tmp_path / "out" / "decompose" / f"{i:05d}.range").read_text(encoding="utf-8").splitlines()[1:])
        worst.append(float(rows["err"][1]))
    assert max(worst) < 1e-3, worst
