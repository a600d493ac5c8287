"""Checkpoint format: byte-identical round trips, exact weight restoration."""

import json
import struct

import numpy as np
import pytest
import torch

from sipl_kit.checkpoint import FORMAT_VERSION, Checkpoint
from sipl_kit.errors import ConfigError, DataError
from sipl_kit.train import TrainConfig, build_model, build_optimizer, train_step

from conftest import make_pair, tiny_model


def tiny_train_config(**kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("base_channels", 8)
    kw.setdefault("n_scales", 2)
    kw.setdefault("blocks_per_scale", 1)
    kw.setdefault("n_dict_entries", 8)
    return TrainConfig(**kw)


def checkpoint_of(model, cfg=None, optimizer=None, epoch=3):
    cfg = cfg or tiny_train_config()
    config = {"train": cfg.to_dict(), "model": model.build_config()}
    return Checkpoint.from_model(model, config, epoch=epoch, optimizer=optimizer,
                                 rng_state={"sampler": {"state": 1}})


def read_header(path):
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode())


# ---------------------------------------------------------------------------

def test_tensor_namespaces():
    model = tiny_model()
    ckpt = checkpoint_of(model)
    names = set(ckpt.tensors)
    assert any(n.startswith("backbone.") for n in names)
    assert any(n.startswith("pd.") for n in names)
    assert "pd.matrix" in names and "pd.wo" in names
    assert not any(n.startswith("fusion.") for n in names)
    assert not any(n.startswith("opt.") for n in names)


def test_save_load_save_is_byte_identical(tmp_path):
    model = tiny_model(seed=5)
    ckpt = checkpoint_of(model)
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    ckpt.save(p1)
    Checkpoint.load(p1).save(p2)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_roundtrip_forward_is_bitwise_identical(tmp_path, rng):
    model = tiny_model(seed=9)
    # move off the identity init so the check is not vacuous
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.tensor(rng.standard_normal(tuple(p.shape)) * 0.01,
                                dtype=torch.float32))
    path = str(tmp_path / "m.ckpt")
    checkpoint_of(model).save(path)
    rebuilt = Checkpoint.load(path).build_model()

    x = torch.tensor(rng.random((1, 3, 16, 16)), dtype=torch.float32)
    with torch.no_grad():
        a = model.forward_batch(x, x)
        b = rebuilt.forward_batch(x, x)
    assert torch.equal(a, b)


def test_header_is_sorted_compact_json(tmp_path):
    path = str(tmp_path / "m.ckpt")
    checkpoint_of(tiny_model()).save(path)
    header = read_header(path)
    assert header["format_version"] == FORMAT_VERSION
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "rb") as fh:
        fh.read(8)
        assert fh.read(len(blob)) == blob
    names = [e["name"] for e in header["tensors"]]
    assert names == sorted(names)


def test_optimizer_state_roundtrip(tmp_path):
    cfg = tiny_train_config(regime="baseline", seed=2)
    model = build_model(cfg)
    opt = build_optimizer(model, cfg)
    pair = make_pair(0, hw=16)
    batch = [pair]
    for _ in range(3):
        train_step(model, batch, cfg, epoch=0, optimizer=opt)
    path = str(tmp_path / "opt.ckpt")
    ckpt = Checkpoint.from_model(model, {"model": model.build_config()}, epoch=0,
                                 optimizer=opt)
    ckpt.save(path)

    loaded = Checkpoint.load(path)
    model2 = loaded.build_model()
    opt2 = build_optimizer(model2, cfg)
    loaded.restore_optimizer(opt2, model2)

    # one more identical step on both must produce identical weights
    train_step(model, batch, cfg, epoch=0, optimizer=opt)
    train_step(model2, batch, cfg, epoch=0, optimizer=opt2)
    for (na, pa), (nb, pb) in zip(model.named_parameters(), model2.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb), na


def test_opt_moment_names_and_steps(tmp_path):
    cfg = tiny_train_config(regime="baseline", seed=2)
    model = build_model(cfg)
    opt = build_optimizer(model, cfg)
    train_step(model, [make_pair(0, hw=16)], cfg, epoch=0, optimizer=opt)
    ckpt = Checkpoint.from_model(model, {"model": model.build_config()}, epoch=0,
                                 optimizer=opt)
    moment_names = [n for n in ckpt.tensors if n.startswith("opt.")]
    assert moment_names
    assert all(n.endswith(".m") or n.endswith(".v") for n in moment_names)
    assert all(step == 1 for step in ckpt.opt_steps.values())
    assert ckpt.model_tensors().keys().isdisjoint(moment_names)


def test_weights_restored_exactly(tmp_path):
    model = tiny_model(seed=3)
    with torch.no_grad():
        model.fusion.wo.fill_(0.125)
    path = str(tmp_path / "w.ckpt")
    checkpoint_of(model).save(path)
    target = tiny_model(seed=4)
    Checkpoint.load(path).apply_to_model(target)
    for (na, pa), (nb, pb) in zip(model.named_parameters(), target.named_parameters()):
        assert torch.equal(pa, pb), na


def test_load_errors(tmp_path):
    p = tmp_path / "bad.ckpt"

    p.write_bytes(b"\x01\x02\x03")
    with pytest.raises(DataError, match="truncated header"):
        Checkpoint.load(str(p))

    junk = b"this is not json"
    p.write_bytes(struct.pack("<Q", len(junk)) + junk)
    with pytest.raises(DataError, match="bad checkpoint header"):
        Checkpoint.load(str(p))

    hdr = json.dumps({"config": {}, "epoch": 0, "tensors": []}).encode()
    p.write_bytes(struct.pack("<Q", len(hdr)) + hdr)
    with pytest.raises(DataError, match="format_version"):
        Checkpoint.load(str(p))

    hdr = json.dumps({"format_version": 99, "config": {}, "epoch": 0,
                      "tensors": []}).encode()
    p.write_bytes(struct.pack("<Q", len(hdr)) + hdr)
    with pytest.raises(DataError, match="unsupported"):
        Checkpoint.load(str(p))

    hdr = json.dumps({"format_version": 1, "config": {}, "epoch": 0,
                      "tensors": [{"name": "x", "shape": [4]}]}).encode()
    p.write_bytes(struct.pack("<Q", len(hdr)) + hdr + b"\x00" * 7)
    with pytest.raises(DataError, match="truncated payload"):
        Checkpoint.load(str(p))


def test_build_model_requires_model_config():
    ckpt = Checkpoint(config={}, epoch=0, tensors={})
    with pytest.raises(ConfigError):
        ckpt.build_model()


def test_restore_optimizer_requires_state():
    model = tiny_model()
    ckpt = checkpoint_of(model)  # no optimizer captured
    with pytest.raises(ConfigError):
        ckpt.restore_optimizer(build_optimizer(model, tiny_train_config()), model)


def test_rng_state_survives_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    state = {"sampler": rng.bit_generator.state}
    model = tiny_model()
    ckpt = Checkpoint.from_model(model, {"model": model.build_config()}, epoch=1,
                                 rng_state=state)
    path = str(tmp_path / "rng.ckpt")
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    restored = np.random.default_rng()
    restored.bit_generator.state = loaded.rng_state["sampler"]
    assert restored.integers(0, 2**31) == np.random.default_rng(7).integers(0, 2**31)
    assert loaded.epoch == 1
