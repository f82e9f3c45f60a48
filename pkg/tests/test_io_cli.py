import numpy as np
import pytest

from ttalab import cli, io as tio
from ttalab import datagen as dg
from ttalab import tensorcore as tc
from ttalab.nsp import PrototypeBank, Projector
from ttalab.swr import PenaltyVector, SwrVariant

TINY = """\
# a quick configuration for the cli tests
num_classes = 3
image_size = 8
n_per_class = 10
hidden = 4
pretrain_epochs = 2
n_samples = 8
projector_epochs = 1
projector_width = 8
target_n_per_class = 4
stream_batch_size = 4
seed = 1
"""


# ---------------------------------------------------------------------------
# binary formats
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("build", [
    lambda: tc.build_cnn(3, image_size=8, channels=(2, 3), hidden=4, seed=2),
    lambda: tc.build_mlp(4, 12, hidden=(5, 3), seed=1, batchnorm=True),
])
def test_checkpoint_round_trip(build):
    model = build()
    model.batchnorm_units()[0].running_mean += 0.125
    data = tio.dumps_checkpoint(model)
    assert data[:4] == b"TTA1"
    again = tio.loads_checkpoint(data)
    assert tio.dumps_checkpoint(again) == data
    x = np.random.default_rng(0).uniform(size=(3,) + (model.input_shape or (12,)))
    np.testing.assert_array_equal(again.forward(x).data, model.forward(x).data)


def test_checkpoint_flipped_byte_detected():
    data = bytearray(tio.dumps_checkpoint(tc.build_mlp(3, 4, hidden=(5, 3))))
    data[40] ^= 0x01
    with pytest.raises(tio.HashMismatch):
        tio.loads_checkpoint(bytes(data))


@pytest.mark.parametrize("data", [b"", b"TTA1", b"XXXX" + b"\0" * 40])
def test_garbage_is_a_format_error(data):
    with pytest.raises(tio.FormatError):
        tio.loads_checkpoint(data)


def test_artifact_round_trips(rng):
    h = bytes(range(32))
    pv = PenaltyVector(rng.uniform(size=4), rng.uniform(size=4), ["a", "b", "c", "d"], SwrVariant(3), 17)
    data = tio.dumps_penalty(pv, h)
    back, hh = tio.loads_penalty(data)
    assert hh == h and tio.dumps_penalty(back, h) == data
    assert back.unit_names == pv.unit_names and back.n_samples == 17

    bank = PrototypeBank(rng.normal(size=(3, 5)), alpha=0.97, tau=0.2, source_kind="representation_h")
    data = tio.dumps_prototypes(bank, h)
    back, hh = tio.loads_prototypes(data)
    assert hh == h and tio.dumps_prototypes(back, h) == data
    assert back.alpha == 0.97 and back.tau == 0.2

    proj = Projector(6, depth=2, width=7, hidden=5, seed=3)
    data = tio.dumps_projector(proj, h)
    back, hh = tio.loads_projector(data)
    assert hh == h and tio.dumps_projector(back, h) == data
    z = rng.normal(size=(4, 6))
    np.testing.assert_array_equal(back(z).data, proj(z).data)

    ds = dg.generate_source_dataset(0, 2, 3, 8)
    data = tio.dumps_dataset(ds)
    back = tio.loads_dataset(data)
    assert tio.dumps_dataset(back) == data
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_wrong_magic_is_refused(rng):
    data = tio.dumps_penalty(PenaltyVector([1.0], [1.0], ["u"]), b"\0" * 32)
    with pytest.raises(tio.FormatError, match="magic"):
        tio.loads_prototypes(data)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_parse_config_text():
    vals = cli.parse_config_text("mode = main_only  # trailing comment\n\nlr=0.5\nprojector-depth=0\n")
    assert vals == {"mode": "main_only", "lr": 0.5, "projector_depth": 0}


@pytest.mark.parametrize("text", ["modee = full", "lr", "lr = fast", "projector_finetune = maybe"])
def test_parse_config_rejects(text):
    with pytest.raises(cli.UsageError):
        cli.parse_config_text(text)


def test_resolve_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("seed = 3\nlr = 0.5\n")
    assert cli.resolve_config(cfg, {"lr": "0.25"}, env={}).lr == 0.25
    assert cli.resolve_config(cfg, {}, env={"TTA_SEED": "9"}).seed == 3
    assert cli.resolve_config(None, {}, env={"TTA_SEED": "9"}).seed == 9
    assert cli.resolve_config(None, {}, env={}).seed == 0


def test_run_config_lr_sentinel():
    assert cli.RunConfig().adapt().lr is None
    assert cli.RunConfig(lr=0.0).adapt().step_size == 0.0


# ---------------------------------------------------------------------------
# commands end to end
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.txt").write_text(TINY)
    return d


def _run(workdir, *args):
    return cli.main([args[0], "--config", str(workdir / "cfg.txt"), *args[1:]])


@pytest.fixture(scope="module")
def prepared(workdir):
    p = lambda name: str(workdir / name)  # noqa: E731
    assert _run(workdir, "pretrain", "--out", p("src.ckpt")) == 0
    assert _run(workdir, "prepare", "--checkpoint", p("src.ckpt"), "--penalty", p("pen.bin"),
                "--prototypes", p("proto.bin"), "--projector", p("proj.bin")) == 0
    return p


def _adapt(workdir, p, out, *extra):
    return _run(workdir, "adapt", "--checkpoint", p("src.ckpt"), "--penalty", p("pen.bin"),
                "--prototypes", p("proto.bin"), "--projector", p("proj.bin"), "--out", p(out), *extra)


def test_pretrain_is_byte_identical(workdir, prepared):
    assert _run(workdir, "pretrain", "--out", prepared("again.ckpt")) == 0
    a = (workdir / "src.ckpt").read_bytes()
    assert (workdir / "again.ckpt").read_bytes() == a
    model, h = tio.load_checkpoint(prepared("src.ckpt"))
    assert h == tio.checkpoint_hash(a)


def test_prepare_embeds_source_hash(workdir, prepared):
    h = tio.checkpoint_hash((workdir / "src.ckpt").read_bytes())
    assert tio.loads_penalty((workdir / "pen.bin").read_bytes())[1] == h
    assert tio.loads_prototypes((workdir / "proto.bin").read_bytes())[1] == h
    assert tio.loads_projector((workdir / "proj.bin").read_bytes())[1] == h


def test_adapt_writes_metrics_with_footer(workdir, prepared, capsys):
    assert _adapt(workdir, prepared, "m1.csv", "--mode", "full", "--lr", "1e-2",
                  "--corruption", "gaussian_noise", "--severity", "5") == 0
    assert "error" in capsys.readouterr().out
    lines = (workdir / "m1.csv").read_text().splitlines()
    assert "# mode=full" in lines and "# resolved_lr=0.01" in lines
    header = lines.index(",".join(cli.METRIC_COLUMNS))
    rows = lines[header + 1:]
    assert len(rows) == 3 + 1  # 12 examples in batches of 4, then the summary
    assert rows[-1].split(",")[4] == cli.SUMMARY_TAG
    summary = cli.read_metrics(workdir / "m1.csv")
    assert summary.runs[0][3] == 12


def test_adapt_metrics_byte_identical(workdir, prepared):
    assert _adapt(workdir, prepared, "m2.csv", "--mode", "full", "--lr", "1e-2",
                  "--corruption", "gaussian_noise", "--severity", "5") == 0
    assert (workdir / "m2.csv").read_bytes() == (workdir / "m1.csv").read_bytes()


def test_source_only_ignores_lr(workdir, prepared):
    assert _adapt(workdir, prepared, "s1.csv", "--mode", "source_only", "--lr", "5") == 0
    assert _adapt(workdir, prepared, "s2.csv", "--mode", "main_only", "--lr", "0") == 0
    a, b = cli.read_metrics(workdir / "s1.csv"), cli.read_metrics(workdir / "s2.csv")
    assert a.runs[0][4] == b.runs[0][4]
    assert a.config["resolved_lr"] == "0.0"


def test_adapt_offline_epochs(workdir, prepared):
    assert _adapt(workdir, prepared, "e2.csv", "--epochs", "2") == 0
    assert cli.read_metrics(workdir / "e2.csv").runs[0][3] == 12


def test_adapt_refuses_other_checkpoint(workdir, prepared, capsys):
    cfg = cli.resolve_config(workdir / "cfg.txt", {"seed": "2"}, env={})
    model = tc.build_cnn(3, image_size=8, hidden=4, seed=2)
    tio.save_checkpoint(model, workdir / "other.ckpt")
    code = _run(workdir, "adapt", "--checkpoint", prepared("other.ckpt"), "--penalty", prepared("pen.bin"),
                "--prototypes", prepared("proto.bin"), "--projector", prepared("proj.bin"),
                "--out", prepared("x.csv"))
    assert code == 1
    assert "HashMismatch" in capsys.readouterr().err
    assert cfg.seed == 2


def test_corrupted_checkpoint_fails(workdir, prepared):
    data = bytearray((workdir / "src.ckpt").read_bytes())
    data[100] ^= 0xFF
    (workdir / "bad.ckpt").write_bytes(bytes(data))
    assert _run(workdir, "prepare", "--checkpoint", prepared("bad.ckpt"), "--penalty", prepared("p.bin")) == 1


def test_prepare_exponents_differ(workdir, prepared):
    outs = []
    for e in (1, 3):
        name = f"pen{e}.bin"
        assert _run(workdir, "prepare", "--checkpoint", prepared("src.ckpt"), "--swr-variant", f"exponent={e}",
                    "--penalty", prepared(name), "--prototypes", prepared(f"q{e}.bin"),
                    "--projector", prepared(f"j{e}.bin")) == 0
        outs.append((workdir / name).read_bytes())
    assert outs[0] != outs[1]


def test_prepare_depth_zero_prototypes_in_h(workdir, prepared):
    assert _run(workdir, "prepare", "--checkpoint", prepared("src.ckpt"), "--projector-depth", "0",
                "--penalty", prepared("pen0.bin"), "--prototypes", prepared("q0.bin"),
                "--projector", prepared("j0.bin")) == 0
    bank, _ = tio.loads_prototypes((workdir / "q0.bin").read_bytes())
    model, _ = tio.load_checkpoint(prepared("src.ckpt"))
    assert bank.prototypes.shape[1] == model.encode(np.zeros((2,) + model.input_shape)).shape[1] == 4
    assert not (workdir / "j0.bin").exists()


def test_report_groups(workdir, prepared, capsys):
    paths = [prepared("m1.csv"), prepared("m2.csv"), prepared("s1.csv")]
    assert cli.main(["report", *paths, "--out", prepared("table.csv")]) == 0
    rows = (workdir / "table.csv").read_text().splitlines()
    assert rows[0] == "mode,lr,corruption,severity,runs,mean_error,std_error"
    assert [r.split(",")[0] for r in rows[1:]] == ["source_only", "full"]
    assert rows[2].split(",")[4] == "2"


def test_report_schema_mismatch(workdir, prepared):
    (workdir / "junk.csv").write_text("a,b,c\n1,2,3\n")
    assert cli.main(["report", prepared("junk.csv")]) == 1


@pytest.mark.parametrize("argv", [[], ["report"], ["adapt", "--no-such-flag", "1"], ["frobnicate"],
                                  ["adapt", "--mode", "tent"], ["adapt", "--lr", "fast"]])
def test_usage_errors_exit_2(argv):
    assert cli.main(argv) == 2


def test_unknown_config_key_exit_2(tmp_path):
    (tmp_path / "c.txt").write_text("learning_rate = 0.1\n")
    assert cli.main(["pretrain", "--config", str(tmp_path / "c.txt")]) == 2


def test_tta_seed_fallback(monkeypatch, tmp_path):
    monkeypatch.setenv("TTA_SEED", "7")
    assert cli.resolve_config().seed == 7
    monkeypatch.setenv("TTA_SEED", "seven")
    with pytest.raises(cli.UsageError):
        cli.resolve_config()
