import struct

import numpy as np
import pytest

from vqseg.autodiff import Tensor, no_grad
from vqseg.checkpoint import (
    checkpoint_bytes,
    checkpoint_from_bytes,
    decode_tensors,
    encode_tensors,
    rng_from_array,
    rng_to_array,
)
from vqseg.cli import main
from vqseg.errors import ConfigError, FormatError
from vqseg.runconfig import RunConfig
from vqseg.segnet import Adam, AdamConfig, ModelConfig, build_model, train_epoch
from vqseg.synthdata import CorpusSpec, generate_split

SMALL_DATA = ["data.n_train=8", "data.n_val=4", "data.n_test=2", "data.image_size=32"]


@pytest.fixture(scope="module")
def trained_state():
    m = build_model(ModelConfig(levels=3, base_channels=8, D=32, seed=5))
    opt = Adam(m.parameters(), AdamConfig(lr=1e-3))
    rng = np.random.default_rng(3)
    train_epoch(m, generate_split(CorpusSpec(n_train=8, image_size=32), "train"), opt, rng)
    return m, opt, rng


def test_checkpoint_roundtrip_bytes_and_logits(trained_state):
    m, opt, rng = trained_state
    raw = checkpoint_bytes(m, opt, epoch=7, rng=rng)
    ck = checkpoint_from_bytes(raw)
    assert checkpoint_bytes(ck.model, ck.optimiser, ck.epoch, ck.rng) == raw
    assert ck.epoch == 7 and ck.optimiser.step_count == opt.step_count
    xs = np.random.default_rng(0).random((10, 1, 1, 32, 32)).astype(np.float32)
    with no_grad():
        for x in xs:
            assert m(Tensor(x)).logits.data.tobytes() == ck.model(Tensor(x)).logits.data.tobytes()


def test_checkpoint_restores_rng_and_optimiser(trained_state):
    m, opt, rng = trained_state
    ck = checkpoint_from_bytes(checkpoint_bytes(m, opt, rng=rng))
    state = rng.bit_generator.state
    assert ck.rng.random(5).tobytes() == np.random.Generator(_clone(state)).random(5).tobytes()
    for k in opt.m:
        assert ck.optimiser.m[k].tobytes() == opt.m[k].tobytes()
        assert ck.optimiser.v[k].tobytes() == opt.v[k].tobytes()


def _clone(state):
    bg = np.random.PCG64()
    bg.state = state
    return bg


def test_rng_word_roundtrip():
    rng = np.random.default_rng(123)
    rng.integers(0, 10, size=3)
    rng.random()
    back = rng_from_array(rng_to_array(rng))
    assert back.bit_generator.state == rng.bit_generator.state


def test_checkpoint_fails_closed(trained_state):
    m, opt, _ = trained_state
    raw = checkpoint_bytes(m, opt)
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"VQSX" + raw[4:])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(raw[:4] + struct.pack("<H", 2) + raw[6:])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(raw[:-3])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(raw + b"\x00")


def test_tensor_table_layout():
    raw = encode_tensors({"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    assert raw[:4] == b"VQSG"
    meta, t = decode_tensors(raw)
    assert meta == {"a": 1}
    # name, dtype code 0, rank 2, dims, payload
    tail = raw[-(2 + 1 + 2 + 8 + 24):]
    assert tail[:3] == b"\x01\x00w" and tail[3:5] == b"\x00\x02"
    assert struct.unpack("<2I", tail[5:13]) == (2, 3)
    np.testing.assert_array_equal(np.frombuffer(tail[13:], "<f4"), np.arange(6))
    with pytest.raises(FormatError):
        encode_tensors({}, {"x": np.zeros(2, dtype=np.float64)})


# ---------------------------------------------------------------- run config
def test_runconfig_rejects_unknown_and_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(overrides=["model.depth=3"])
    with pytest.raises(ConfigError):
        RunConfig.load(overrides=["model.skip_connections=maybe"])
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 4\nmodel.K=16  # trailing\n")
    cfg = RunConfig.load(p, ["seed=9"])
    assert cfg["seed"] == 9 and cfg["model.K"] == 16
    assert cfg.model_config().D == 32
    again = tmp_path / "again.cfg"
    again.write_text(cfg.dump())
    assert RunConfig.load(again).dump() == cfg.dump()


# ---------------------------------------------------------------- commands
@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    common = SMALL_DATA + [f"data.dir={root / 'data'}", f"out_dir={root / 'out'}"]
    assert main(["gen-data"] + common) == 0
    assert main(["train", "train.epochs=2"] + common) == 0
    return root, common + [f"checkpoint={root / 'out' / 'model.vqsg'}"]


def test_every_report_has_provenance_header(run_dir):
    root, common = run_dir
    for cmd in ("eval", "codebook-stats"):
        assert main([cmd] + common) == 0
    for name in ("train_log.csv", "eval_summary.csv", "codebook_stats.csv", "data_manifest.csv"):
        lines = (root / "out" / name).read_text().splitlines()
        assert lines[0].startswith("# vqseg v")
        assert lines[1] == "# seed=0"
        assert lines[2].startswith("# noise_calibration=gaussian: std=level")
    assert (root / "out" / "resolved_config.txt").read_text() == RunConfig.load(overrides=common).dump()


def test_eval_twice_identical(run_dir):
    root, common = run_dir
    main(["eval"] + common)
    first = (root / "out" / "eval_model_val_A.csv").read_bytes()
    main(["eval"] + common)
    assert (root / "out" / "eval_model_val_A.csv").read_bytes() == first


def test_perturb_level_zero_equals_eval(run_dir):
    root, common = run_dir
    assert main(["eval"] + common) == 0
    assert main(["perturb-study", "perturb.levels=0"] + common) == 0
    ev = (root / "out" / "eval_summary.csv").read_text().splitlines()[-1].split(",")
    ps = (root / "out" / "perturb_study.csv").read_text().splitlines()[-1].split(",")
    assert ps[4] == ev[5]


def test_analysis_commands(run_dir):
    root, common = run_dir
    assert main(["latent-variance", "perturb.draws=3", "perturb.n_images=2", "perturb.levels=0,0.1"] + common) == 0
    assert main(["bound-check", "bound.n_images=1"] + common) == 0
    out = root / "out"
    pgm = (out / "latent_variance_model_vq_post_gaussian_0.1.pgm").read_text().splitlines()
    assert pgm[0] == "P2" and pgm[2].split()[1] == "2"
    summary = (out / "latent_variance.csv").read_text().splitlines()
    zero_rows = [ln for ln in summary if ",gaussian,0," in ln]
    assert zero_rows and all("0.000000e+00" in ln for ln in zero_rows)
    assert (out / "bound_check_model.csv").read_text().count("\n") == 3 + 1 + 64


def test_exit_codes(run_dir, tmp_path):
    root, common = run_dir
    assert main(["eval", "nonsense.key=1"]) == 2
    assert main(["train", f"data.dir={tmp_path / 'empty'}", f"out_dir={tmp_path}"]) == 3
    bad = tmp_path / "bad.vqsg"
    raw = (root / "out" / "model.vqsg").read_bytes()
    bad.write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    assert main(["eval", f"checkpoint={bad}"] + common[:-1]) == 5
    assert main(["codebook-stats", f"checkpoint={tmp_path / 'missing.vqsg'}"] + common[:-1]) == 3


def test_nan_abort_exit_code(run_dir, tmp_path):
    root, common = run_dir
    from vqseg.checkpoint import load_checkpoint, save_checkpoint

    ck = load_checkpoint(root / "out" / "model.vqsg")
    ck.model.stem.weight.data[...] = np.nan
    broken = save_checkpoint(tmp_path / "nan.vqsg", ck.model, ck.optimiser, 0, ck.rng)
    code = main(["train", "train.epochs=1", f"train.resume={broken}", f"out_dir={tmp_path / 'o'}"] + common[:-2])
    assert code == 4
