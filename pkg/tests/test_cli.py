import numpy as np
import pytest

from qsep import dsp, latent
from qsep.cli import build_parser, main

TINY = ["--model", "window=64", "--model", "hop=16", "--model", "segment_seconds=0.016",
        "--model", "latent_dim=3", "--model", "query_channels=2,2,3,3", "--model", "query_time_strides=1,2,1,2",
        "--model", "gru_units=3", "--model", "sep_channels=3,4,5"]
DATA = ["--tracks", "1", "--track-seconds", "0.1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "stems"), "--seed", "2"] + DATA) == 0
    assert main(["train", "--data-dir", str(root / "stems"), "--iterations", "3", "--out", str(root / "run"),
                 "--log-every", "0"] + TINY) == 0
    return root


def test_gen_data_classes_and_manifest(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "a")] + DATA) == 0
    assert sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir()) == ["bass", "drums", "other", "vocals"]
    assert main(["gen-data", "--out", str(tmp_path / "b")] + DATA) == 0
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--classes", "6"] + DATA) == 0
    assert len([p for p in (tmp_path / "c").iterdir() if p.is_dir()]) == 6


def test_train_is_reproducible(tmp_path):
    args = ["train", "--iterations", "2", "--log-every", "0", "--seed", "4"] + TINY + DATA
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("checkpoint.qsep", "loss.log"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "loss.log").read_text().splitlines()) == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# tiny run\niterations = 3\nlr = 0.001\nlog_every = 0\n")
    args = build_parser()
    from qsep.cli import _apply_config
    argv = ["train", "--config", str(cfg), "--iterations", "1"]
    _apply_config(args, argv)
    ns = args.parse_args(argv)
    assert ns.iterations == 1 and ns.lr == 0.001 and ns.log_every == 0
    cfg.write_text("bogus = 1\n")
    assert main(["train", "--config", str(cfg)]) == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--iterations", "--seed", "--preset", "--data-dir", "--config", "--out"):
        assert flag in out
    assert "(default: 5000)" in out


def test_unknown_flag_is_an_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--iterationz", "3"])
    assert exc.value.code == 2


def test_missing_checkpoint_one_line_diagnostic(tmp_path, capsys):
    code = main(["encode", "--checkpoint", str(tmp_path / "none.qsep"), "--query", "q.wav"])
    err = capsys.readouterr().err
    assert code == 2 and err.startswith("qsep: error:") and err.count("\n") == 1


def test_encode_separate_interpolate(trained, tmp_path, capsys):
    run, stems = trained / "run", trained / "stems"
    query = stems / "vocals" / "track000.wav"
    mixture = tmp_path / "mix.wav"
    x = sum(dsp.read_wav(stems / c / "track000.wav").samples for c in ("bass", "drums", "other", "vocals"))
    dsp.write_wav(mixture, dsp.Waveform(x, 8000))

    assert main(["encode", "--checkpoint", str(run), "--query", str(query), "--out", str(tmp_path / "q.csv")]) == 0
    rows = latent.read_latents(tmp_path / "q.csv")
    assert len(rows) == 1 and rows[0][1].shape == (3,)

    assert main(["separate", "--checkpoint", str(run), "--mixture", str(mixture), "--query", str(query),
                 "--out", str(tmp_path / "s.wav")]) == 0
    assert len(dsp.read_wav(tmp_path / "s.wav").samples) == len(x)

    assert main(["export-latents", "--checkpoint", str(run), "--stems", str(stems),
                 "--out", str(tmp_path / "lib.csv")]) == 0
    for extra in (["--class", "drums"], ["--class", "bass", "--rounds", "2"], ["--retrieve", str(query)]):
        assert main(["separate", "--checkpoint", str(run), "--mixture", str(mixture), "--library",
                     str(tmp_path / "lib.csv"), "--out", str(tmp_path / "t.wav")] + extra) == 0
    assert main(["separate", "--checkpoint", str(run), "--mixture", str(mixture), "--library",
                 str(tmp_path / "lib.csv"), "--class", "piano"]) == 2

    assert main(["interpolate", "--checkpoint", str(run), "--mixture", str(mixture), "--query-a", str(query),
                 "--query-b", str(stems / "bass" / "track000.wav"), "--steps", "5", "--out", str(tmp_path / "i")]) == 0
    outs = sorted(p.name for p in (tmp_path / "i").iterdir())
    assert len(outs) == 5
    assert [o.split("alpha")[1][:-4] for o in outs] == ["0.000", "0.250", "0.500", "0.750", "1.000"]


def test_separate_is_byte_reproducible(trained, tmp_path):
    run, stems = trained / "run", trained / "stems"
    args = ["separate", "--checkpoint", str(run), "--mixture", str(stems / "other" / "track000.wav"),
            "--query", str(stems / "drums" / "track000.wav")]
    assert main(args + ["--out", str(tmp_path / "a.wav")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.wav")]) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_eval_command(trained, tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(trained / "run"), "--data-dir", str(trained / "stems"), "--mixtures", "2",
                 "--out", str(tmp_path / "r.tsv"), "--test-seed", "5"] + DATA)
    assert code == 0
    assert "median SDR" in capsys.readouterr().out
    assert len((tmp_path / "r.tsv").read_text().splitlines()) == 1 + 8


def test_wrong_rate_wav_is_rejected(trained, tmp_path):
    bad = tmp_path / "bad.wav"
    dsp.write_wav(bad, dsp.Waveform(np.zeros(400), 22050))
    assert main(["encode", "--checkpoint", str(trained / "run"), "--query", str(bad)]) == 2
