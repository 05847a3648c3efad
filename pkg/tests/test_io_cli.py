import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from darcot import io as fio
from darcot.cli import load_transport, main
from darcot.errors import ContractViolation, FormatError
from darcot.metrics import evaluate
from darcot.trainer import TrainConfig, init_state

TINY = {"base": 4, "emb_channels": [8, 4, 4], "blocks": 0, "potential_base": 4, "batch_size": 3}


def encode_oracle(arr):
    """Byte layout written out field by field."""
    code = {np.dtype("float32"): 0, np.dtype("float64"): 1}[arr.dtype]
    out = b"FRTN" + (1).to_bytes(4, "little") + bytes([code]) + arr.ndim.to_bytes(4, "little")
    for d in arr.shape:
        out += d.to_bytes(8, "little")
    return out + arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")


# ------------------------------------------------------------ tensor files


@settings(max_examples=50, deadline=None)
@given(
    arr=st.one_of(
        arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(allow_nan=True)),
        arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(width=32)),
    )
)
def test_tensor_roundtrip_is_bitwise(arr, tmp_path_factory):
    path = tmp_path_factory.mktemp("t") / "a.frtn"
    back = fio.tensor_roundtrip(arr, path)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    assert path.read_bytes() == encode_oracle(arr)


def test_scalar_and_empty_tensors(tmp_path):
    for arr in (np.array(3.5), np.zeros((0, 4), np.float32)):
        back = fio.tensor_roundtrip(arr, tmp_path / "s.frtn")
        assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_big_endian_input_is_stored_little_endian(tmp_path):
    arr = np.arange(4, dtype=">f8")
    back = fio.tensor_roundtrip(arr, tmp_path / "b.frtn")
    np.testing.assert_array_equal(back, arr)


def test_tensor_object_roundtrip(tmp_path):
    from darcot.autodiff import Tensor

    t = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
    assert fio.tensor_roundtrip(t, tmp_path / "t.frtn").tobytes() == t.data.tobytes()


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:3], "magic"),
        (lambda b: b[:10], "version/dtype/rank"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:8] + bytes([7]) + b[9:], "dtype"),
        (lambda b: b[:20], "dims"),
        (lambda b: b[:-1], "payload"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_corrupt_tensor_files_name_the_field(tmp_path, mutate, field):
    good = fio.encode_tensor(np.ones((2, 3)))
    path = tmp_path / "bad.frtn"
    path.write_bytes(mutate(good))
    with pytest.raises(FormatError, match=field):
        fio.load_tensor(path)


def test_unsupported_dtype_rejected():
    with pytest.raises(ContractViolation):
        fio.encode_tensor(np.arange(3))


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip(tmp_path):
    r = np.random.default_rng(0)
    ck = fio.Checkpoint(7, "abc", {"b": r.random((2, 2)), "a": r.random(3).astype(np.float32)}, {"k": [1, 2]})
    fio.save_checkpoint(ck, tmp_path / "c.bin")
    back = fio.load_checkpoint(tmp_path / "c.bin")
    assert (back.step, back.config_hash, back.meta) == (7, "abc", {"k": [1, 2]})
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
        assert back.tensors[k].dtype == ck.tensors[k].dtype


def test_checkpoint_header_layout():
    buf = fio.encode_checkpoint(fio.Checkpoint(1, "h", {"x": np.zeros(2)}))
    assert buf[:4] == b"FRCK"
    (n,) = struct.unpack("<Q", buf[4:12])
    header = json.loads(buf[12 : 12 + n])
    assert header["format_version"] == 1 and header["step"] == 1 and header["config_hash"] == "h"
    ent = header["tensors"]["x"]
    assert buf[12 + n + ent["offset"] : 12 + n + ent["offset"] + ent["length"]] == fio.encode_tensor(np.zeros(2))


@pytest.mark.parametrize("cut", [5, 20, -3])
def test_truncated_checkpoints_rejected(cut):
    buf = fio.encode_checkpoint(fio.Checkpoint(1, "h", {"x": np.zeros(4)}))
    with pytest.raises(FormatError):
        fio.decode_checkpoint(buf[:cut])


def test_bad_checkpoint_magic_and_header():
    buf = fio.encode_checkpoint(fio.Checkpoint(1, "h", {}))
    with pytest.raises(FormatError, match="magic"):
        fio.decode_checkpoint(b"NOPE" + buf[4:])
    with pytest.raises(FormatError, match="header"):
        fio.decode_checkpoint(buf[:12] + b"[" + buf[13:])


# ------------------------------------------------------------ atomic writes / configs


def test_atomic_write_leaves_no_temp_files(tmp_path):
    fio.atomic_write_text(tmp_path / "a.txt", "one")
    fio.atomic_write_text(tmp_path / "a.txt", "two")
    assert (tmp_path / "a.txt").read_text() == "two"
    assert os.listdir(tmp_path) == ["a.txt"]


def test_failed_write_keeps_previous_file(tmp_path, monkeypatch):
    fio.atomic_write_text(tmp_path / "a.txt", "old")

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        fio.atomic_write_text(tmp_path / "a.txt", "new")
    assert (tmp_path / "a.txt").read_text() == "old"
    assert os.listdir(tmp_path) == ["a.txt"]


def test_config_hash_is_key_order_independent():
    assert fio.config_hash({"a": 1, "b": [1, 2]}) == fio.config_hash({"b": [1, 2], "a": 1})
    assert fio.config_hash({"a": 1}) != fio.config_hash({"a": 2})


def test_invalid_json_config(tmp_path):
    (tmp_path / "c.json").write_text("{lr_T: 1}")
    with pytest.raises(ContractViolation):
        fio.load_config(tmp_path / "c.json", TrainConfig)


# ------------------------------------------------------------ cli


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_data_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth-data", "--tasks", "noise", "--count", 4, "--seed", 7, "--out", tmp_path / name) == 0
    for f in ("clean.frtn", "degraded.frtn", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(doc["items"]) == 4
    assert set(doc["items"][0]) >= {"id", "task", "spec", "seed", "files"}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    assert run("synth-data", "--tasks", "noise,rain,haze", "--count", 24, "--size", 16, "--seed", 1, "--out", root / "data") == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    return root


def test_train_zero_steps_checkpoint_equals_initialization(workspace):
    out = workspace / "t0"
    assert run("train", "--config", workspace / "cfg.json", "--data", workspace / "data", "--steps", 0, "--out", out) == 0
    ck = fio.load_checkpoint(out / "checkpoint.bin")
    cfg = fio.config_from_dict({**TINY, "steps": 0}, TrainConfig)
    init = init_state(cfg).arrays()
    assert set(ck.tensors) == set(init)
    assert all(ck.tensors[k].tobytes() == init[k].tobytes() for k in init)
    assert ck.config_hash == cfg.hash()


def test_eval_matches_in_process_evaluation(workspace):
    out = workspace / "t2"
    assert run("train", "--config", workspace / "cfg.json", "--data", workspace / "data", "--steps", 2, "--out", out, "--no-timing") == 0
    assert run("eval", "--checkpoint", out / "checkpoint.bin", "--test-data", workspace / "data", "--out", out) == 0
    from darcot.degradations import load_bundle

    transport, cfg, ck = load_transport(out / "checkpoint.bin")
    data = load_bundle(workspace / "data")
    meta = {"config_hash": ck.config_hash, "step": ck.step, "seed": cfg.seed, "data_digest": data.digest()}
    want = evaluate(transport, data, probe_seed=cfg.seed, meta=meta).to_json()
    assert json.loads((out / "eval.json").read_text()) == json.loads(json.dumps(want))
    assert (out / "eval.csv").read_text().startswith("task,psnr")


def test_train_logs_are_reproducible(workspace):
    for name in ("r1", "r2"):
        assert run("train", "--config", workspace / "cfg.json", "--data", workspace / "data", "--steps", 2, "--out", workspace / name, "--no-timing") == 0
    assert (workspace / "r1" / "metrics.jsonl").read_bytes() == (workspace / "r2" / "metrics.jsonl").read_bytes()


def test_analyze_residual_writes_stats_and_plot(tmp_path):
    from PIL import Image

    assert run("analyze-residual", "--count", 4, "--size", 16, "--out", tmp_path, "--plot", tmp_path / "h.png") == 0
    doc = json.loads((tmp_path / "residual_stats.json").read_text())
    assert set(doc["tasks"]) == {"noise", "rain", "haze", "blur", "lowlight"}
    assert doc["sparsity_ranking"][-1] == "noise"
    with Image.open(tmp_path / "h.png") as im:
        assert im.size == (640, 360)


def test_ot_sanity_writes_report(tmp_path):
    assert run("ot-sanity", "--steps", 20, "--samples", 500, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "ot_sanity.json").read_text())
    assert doc["oracle_cost"] == pytest.approx(2.01698, abs=1e-4)
    assert {"primal_cost", "dual_value", "gap", "max_map_deviation", "pushforward_energy"} <= set(doc)


def test_ablate_writes_json_and_csv(workspace):
    cfg = workspace / "ab.json"
    cfg.write_text(json.dumps({**TINY, "steps": 1}))
    out = workspace / "ab"
    assert run("ablate", "--suite", "residual_reg", "--config", cfg, "--data", workspace / "data", "--test-data", workspace / "data", "--seeds", "0", "--out", out) == 0
    assert (out / "ablation_residual_reg.csv").read_text().splitlines()[0] == "arm,psnr,ssim,delta_psnr"
    assert set(json.loads((out / "ablation_residual_reg.json").read_text())["arms"]) == {"with g", "without g"}


@pytest.mark.parametrize(
    "argv",
    [
        ["frobnicate"],
        ["train", "--bogus"],
        ["synth-data", "--tasks", "snow"],
        ["synth-data", "--mode", "semi"],
        [],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_contract_violation_exits_1(tmp_path, capsys):
    assert run("synth-data", "--count", 0, "--out", tmp_path) == 1
    (tmp_path / "c.json").write_text(json.dumps({"lr": 1}))
    assert run("train", "--config", tmp_path / "c.json", "--out", tmp_path) == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_format_error_exits_1(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"garbage")
    assert run("eval", "--checkpoint", tmp_path / "bad.bin", "--out", tmp_path) == 1


def test_numeric_error_exits_2(tmp_path, monkeypatch, capsys):
    import darcot.gradcheck as gc

    row = {"kind": "op", "name": "fake", "max_rel_error": 0.5, "seconds": 0.0, "passed": False}
    monkeypatch.setattr(gc, "gradient_table", lambda seed, tolerance: [row])
    assert run("grad-check", "--out", tmp_path) == 2
    assert "fake" in capsys.readouterr().err


def test_help_exits_0():
    assert main(["--help"]) == 0
