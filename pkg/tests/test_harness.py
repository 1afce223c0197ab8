"""Checkpoint format, JSON config, training loop and the command-line surface."""
import dataclasses
import json
import os
import struct

import numpy as np
import pytest

from stairnet import checkpoint
from stairnet.cli import main
from stairnet.config import RunConfig, TrainConfig, dump, load, parse
from stairnet.net import ConfigError, ModelConfig
from stairnet.tensor import Tensor
from stairnet.train import (
    Adam,
    Trainer,
    TrainingDiverged,
    batch_indices,
    evaluate,
    load_model,
    make_dataset,
    new_trainer,
    resume,
)

TINY_MODEL = ModelConfig(stages=2, trunk_width=8, input_size=(64, 64), stem_width=8, stem_blocks=1)
TINY_TRAIN = TrainConfig(batch_size=4, iterations=3, num_samples=6, log_every=2)


def tiny_run(dtype="f64", **train):
    return RunConfig(TINY_MODEL, dataclasses.replace(TINY_TRAIN, **train), dtype)


# --- checkpoint ----------------------------------------------------------------------

def test_checkpoint_bitwise_round_trip(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal((2, 1, 5)),
        "c": np.arange(7, dtype=np.int64),
        "d": np.array([1, 2], dtype=np.int32),
        "e": np.array([[255, 0]], dtype=np.uint8),
        "scalar": np.array(np.pi),
        "ünïcode": np.zeros((0, 3), np.float32),
    }
    path = tmp_path / "x.stnt"
    checkpoint.save(str(path), tensors, {"k": [1, 2]})
    back, meta = checkpoint.load(str(path))
    assert list(back) == list(tensors) and meta == {"k": [1, 2]}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert [p.name for p in tmp_path.iterdir()] == ["x.stnt"]  # no temp files left


def test_checkpoint_layout():
    blob = checkpoint.encode({"w": np.array([1.0, 2.0], np.float32)})
    assert blob[:6] == b"STNT1\0"
    (n,) = struct.unpack("<I", blob[6:10])
    manifest = json.loads(blob[10:10 + n])
    assert manifest["tensors"] == [{"name": "w", "dtype": "f32", "shape": [2]}]
    assert blob[10 + n:10 + n + 8] == np.array([1.0, 2.0], "<f4").tobytes()
    assert len(blob) == 10 + n + 8 + 4


@pytest.mark.parametrize("damage", ["flip", "truncate", "magic"])
def test_checkpoint_corruption_detected(damage):
    blob = bytearray(checkpoint.encode({"w": np.ones(8)}))
    if damage == "flip":
        blob[-10] ^= 0x40
    elif damage == "truncate":
        blob = blob[:-7]
    else:
        blob[:5] = b"XXXXX"
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(bytes(blob))


def test_unsupported_dtype_rejected():
    with pytest.raises(checkpoint.CheckpointError, match="dtype"):
        checkpoint.encode({"z": np.ones(2, np.complex64)})


# --- config ----------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = tiny_run("f32", lr=2e-3)
    path = tmp_path / "c.json"
    dump(cfg, str(path))
    assert load(str(path)) == cfg


@pytest.mark.parametrize("raw, field", [
    ({"schema_version": 1, "model": {"trunk_widht": 8}}, "model.trunk_widht"),
    ({"schema_version": 1, "model": {"input_size": [250, 192]}}, "model.input_size[0]"),
    ({"schema_version": 1, "model": {"stages": "two"}}, "model.stages"),
    ({"schema_version": 1, "model": {"attention": 1}}, "model.attention"),
    ({"schema_version": 1, "train": {"lr": -1}}, "train.lr"),
    ({"schema_version": 1, "train": {"beta1": 1.0}}, "train.beta1"),
    ({"schema_version": 2}, "schema_version"),
    ({"schema_version": 1, "dtype": "f16"}, "dtype"),
    ({"schema_version": 1, "extra": {}}, "extra"),
])
def test_config_errors_name_the_field(raw, field):
    with pytest.raises(ConfigError) as e:
        parse(raw)
    assert e.value.field == field


def test_invalid_json_is_a_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load(str(p))


# --- training --------------------------------------------------------------------------

def test_adam_matches_reference_update(rng):
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
    ref, m, v = w.data.copy(), np.zeros(5), np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        w.grad = g.copy()
        opt.step()
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        ref = ref - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-6)
    np.testing.assert_allclose(w.data, ref, rtol=1e-13)


def test_batch_indices_are_a_pure_function_of_step():
    a = batch_indices(16, 4, seed=3, step=10)
    assert np.array_equal(a, batch_indices(16, 4, seed=3, step=10))
    assert len(set(a.tolist())) == 4
    assert sorted(batch_indices(5, 8, 0, 0).tolist()) == [0, 1, 2, 3, 4]


def test_zero_learning_rate_leaves_parameters_bitwise_unchanged():
    tr = new_trainer(tiny_run(lr=0.0, iterations=3))
    before = {k: p.data.copy() for k, p in tr.params.items()}
    tr.run()
    assert all(np.array_equal(before[k], p.data) for k, p in tr.params.items())


def test_training_is_deterministic():
    a = new_trainer(tiny_run(iterations=3)).run()
    b = new_trainer(tiny_run(iterations=3)).run()
    assert [e["loss"] for e in a] == [e["loss"] for e in b]


def test_resume_matches_uninterrupted(tmp_path):
    full = new_trainer(tiny_run(iterations=4))
    full.run()
    part = new_trainer(tiny_run(iterations=2))
    part.run()
    part.save(str(tmp_path / "mid.stnt"))
    cont = resume(str(tmp_path / "mid.stnt"))
    cont.cfg = dataclasses.replace(cont.cfg, iterations=4)
    cont.run()
    assert [e["loss"] for e in cont.history] == [e["loss"] for e in full.history[2:]]
    for k, p in full.params.items():
        assert np.array_equal(p.data, cont.params[k].data)


def test_divergence_dumps_the_batch(tmp_path):
    tr = new_trainer(tiny_run(iterations=1))
    tr.data.images[:, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="dumped"):
        tr.run(dump_dir=str(tmp_path))
    dumps = list(tmp_path.glob("diverged_step0.npz"))
    assert len(dumps) == 1 and "indices" in np.load(dumps[0])


def test_untrained_model_pck_is_low():
    cfg = ModelConfig(stages=1, trunk_width=16, input_size=(96, 96))
    from stairnet.net import build_model
    model = build_model(cfg, seed=0)
    res = evaluate(model, make_dataset(16, (96, 96), seed=0))
    assert res["pck@0.05"] < 0.2


def test_load_model_rejects_mismatched_config(tmp_path):
    tr = new_trainer(tiny_run(iterations=0))
    tr.save(str(tmp_path / "m.stnt"))
    with pytest.raises(ValueError, match="does not match"):
        load_model(str(tmp_path / "m.stnt"), expect=dataclasses.replace(TINY_MODEL, num_joints=5))


# --- command line ----------------------------------------------------------------------

def write_cfg(tmp_path, cfg):
    p = tmp_path / "run.json"
    dump(cfg, str(p))
    return str(p)


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_profile_json(capsys):
    code, out, _ = run_cli(capsys, "--json", "profile")
    assert code == 0
    d = json.loads(out)
    assert d["input_size"] == [256, 192] and d["ratios"]["halving_ratio"] == "43/64"


def test_cli_profile_input_size_keeps_params(capsys):
    _, a, _ = run_cli(capsys, "profile", "--json")
    _, b, _ = run_cli(capsys, "profile", "--json", "--input-size", "384x288")
    assert json.loads(a)["totals"]["params"] == json.loads(b)["totals"]["params"]


def test_cli_malformed_config_exits_2_with_field(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"schema_version": 1, "model": {"input_size": [256, 190]}}))
    code, _, err = run_cli(capsys, "--config", str(p), "profile")
    assert code == 2 and "model.input_size[1]" in err
    code, out, _ = run_cli(capsys, "--json", "--config", str(p), "profile")
    assert code == 2 and json.loads(out)["field"] == "model.input_size[1]"


def test_cli_usage_error_exits_2(capsys):
    assert run_cli(capsys, "profile", "--input-size", "big")[0] == 2
    assert run_cli(capsys, "frobnicate")[0] == 2
    assert run_cli(capsys, "--config", "no-such-config", "profile")[0] == 2


def test_cli_gradcheck_primitive(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--scope", "primitive", "--json")
    d = json.loads(out)
    assert code == 0 and d["passed"]
    names = {i["name"] for i in d["items"]}
    assert {"relu", "sigmoid", "conv2d depthwise", "conv_transpose2d", "pool2d max",
            "resize_bilinear", "batchnorm2d train"} <= names


def test_cli_train_eval_correlate(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tiny_run("f32", iterations=4, log_every=2))
    out_dir = str(tmp_path / "run")
    code, out, _ = run_cli(capsys, "--json", "--config", cfg, "train", "--out", out_dir)
    assert code == 0
    trained = json.loads(out)
    assert trained["steps"] == 4
    ckpt = trained["checkpoint"]
    history = [json.loads(line) for line in open(os.path.join(out_dir, "history.jsonl"))]
    assert history[-1]["step"] == 4

    code, out, _ = run_cli(capsys, "eval", "--checkpoint", ckpt, "--json")
    assert code == 0
    evaluated = json.loads(out)
    assert evaluated["pck@0.1"] == history[-1]["pck@0.1"] == trained["eval"]["pck@0.1"]

    code, out, _ = run_cli(capsys, "correlate", "--checkpoint", ckpt, "--json")
    mats = json.loads(out)
    assert code == 0 and len(mats) == 2 * (4 + 3 + 2 + 1)
    for m in mats.values():
        m = np.array(m, dtype=float)
        assert np.max(np.abs(np.nan_to_num(m - m.T))) <= 1e-12

    code, out, _ = run_cli(capsys, "correlate", "--checkpoint", ckpt)
    assert code == 0 and "units.0.cells.0.0" in out and "C4" in out

    code, _, err = run_cli(capsys, "eval", "--checkpoint", ckpt, "--samples", "0")
    assert code == 1 and "no samples" in err


def test_cli_train_resume(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tiny_run("f64", iterations=2))
    a = str(tmp_path / "a")
    assert run_cli(capsys, "--config", cfg, "train", "--out", a)[0] == 0
    code, out, _ = run_cli(capsys, "train", "--json", "--out", str(tmp_path / "b"),
                           "--resume", os.path.join(a, "model.stnt"), "--iterations", "3")
    assert code == 0 and json.loads(out)["steps"] == 3


def test_cli_synth(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "synth", "--out", str(tmp_path), "-n", "2",
                           "--image-size", "64x64", "--json")
    assert code == 0
    assert sorted(os.listdir(json.loads(out)["directory"])) == [
        "000000.ppm", "000001.ppm", "annotations.jsonl"]


def test_cli_missing_checkpoint(tmp_path, capsys):
    code, _, err = run_cli(capsys, "eval", "--checkpoint", str(tmp_path / "none.stnt"))
    assert code != 0 and "none.stnt" in err


def test_trainer_dataclass_fields():
    assert {f.name for f in dataclasses.fields(Trainer)} >= {"model", "cfg", "data", "step"}
