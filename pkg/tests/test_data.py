import os
import struct

import numpy as np
import pytest

from drwkv.backbone import DiffusionRWKV, ModelConfig
from drwkv.checkpoint import (BadMagicError, CheckpointError, ShapeMismatchError, TruncatedCheckpointError,
                              UnsupportedVersionError, checkpoint_load, checkpoint_save, decode, encode,
                              load_model)
from drwkv.data import (CIFAR_RECORD, Dataset, DatasetError, atomic_write, cifar10_load, encode_pixmap, hflip,
                        image_write, make_grid, synth_two_blobs)
from drwkv.diffusion import EmaState
from drwkv.rng import Rng
from drwkv.train import AdamW
from drwkv.verify import resume_equivalence


def tiny(**kw):
    base = dict(L=3, D=16, E=2, p=2, H=8, W=8, C=1, num_classes=2)
    base.update(kw)
    return ModelConfig(**base)


def test_two_blobs_construction():
    ds = synth_two_blobs(1000, 8, 8, seed=0)
    assert ds.images.shape == (1000, 1, 8, 8) and ds.num_classes == 2
    assert (ds.labels == 0).sum() == 500 and (ds.labels == 1).sum() == 500
    assert ds.images[ds.labels == 0].mean() > ds.images[ds.labels == 1].mean()
    assert ds.images.min() >= -1 and ds.images.max() <= 1
    assert synth_two_blobs(50, seed=3).images.tobytes() == synth_two_blobs(50, seed=3).images.tobytes()
    assert synth_two_blobs(50, seed=3).images.tobytes() != synth_two_blobs(50, seed=4).images.tobytes()
    assert synth_two_blobs(4, 16, 8, channels=3).images.shape == (4, 3, 16, 8)


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.full((2, 1, 4, 4), 1.5), None)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 2]), num_classes=2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 4, 4)), None)


def write_records(path, labels, pixels):
    rec = np.zeros((len(labels), CIFAR_RECORD), np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = pixels
    rec.tofile(path)


def test_cifar_two_record_fixture(tmp_path):
    assert CIFAR_RECORD == 1 + 32 * 32 * 3
    pix = np.zeros((2, 3072), np.uint8)
    pix[0] = np.arange(3072) % 256
    pix[1, :1024] = 255  # red plane only
    write_records(tmp_path / "data_batch_1.bin", [3, 9], pix)
    ds = cifar10_load(str(tmp_path / "data_batch_1.bin"))
    assert ds.labels.tolist() == [3, 9] and ds.num_classes == 10
    expect0 = (np.arange(3072) % 256).reshape(3, 32, 32).astype(np.float32) / np.float32(127.5) - 1
    assert np.array_equal(ds.images[0], expect0)
    assert ds.images[0, 0, 0, 0] == -1.0
    assert np.all(ds.images[1, 0] == np.float32(255) / np.float32(127.5) - 1)
    assert abs(ds.images[1, 0, 0, 0] - 1.0) <= 1e-6
    assert np.all(ds.images[1, 1:] == -1.0)
    # directory form concatenates batches in order
    write_records(tmp_path / "data_batch_2.bin", [1], np.zeros((1, 3072), np.uint8))
    both = cifar10_load(str(tmp_path))
    assert both.labels.tolist() == [3, 9, 1]
    assert cifar10_load(str(tmp_path), limit=2).labels.tolist() == [3, 9]


def test_cifar_errors(tmp_path):
    bad = tmp_path / "data_batch_1.bin"
    bad.write_bytes(b"\x00" * (CIFAR_RECORD + 5))
    with pytest.raises(DatasetError):
        cifar10_load(str(bad))
    write_records(bad, [10], np.zeros((1, 3072), np.uint8))
    with pytest.raises(DatasetError):
        cifar10_load(str(bad))


def test_hflip():
    x = np.arange(8, dtype=np.float32).reshape(2, 1, 1, 4)
    assert np.array_equal(hflip(x)[0, 0, 0], [3, 2, 1, 0])
    out = hflip(x, np.array([False, True]))
    assert np.array_equal(out[0], x[0]) and np.array_equal(out[1, 0, 0], [7, 6, 5, 4])


def test_pixmap_constant_images():
    assert encode_pixmap(np.full((1, 3, 2), -1.0)).endswith(bytes(6))
    body = encode_pixmap(np.full((3, 2, 2), 1.0))
    assert body.startswith(b"P6\n2 2\n255\n") and body.endswith(b"\xff" * 12)


def test_pixmap_fixtures(tmp_path):
    img = np.array([[[-1.0, 1.0], [0.0, 0.5]]])
    path = tmp_path / "a.pgm"
    image_write(str(path), img)
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 191])
    rgb = np.zeros((3, 1, 2))
    rgb[0] = 1.0
    rgb[2, 0, 1] = -1.0
    assert encode_pixmap(rgb) == b"P6\n2 1\n255\n" + bytes([255, 128, 128, 255, 128, 0])
    # out-of-range values clamp
    assert encode_pixmap(np.array([[[-3.0, 7.0]]])).endswith(bytes([0, 255]))
    with pytest.raises(ValueError):
        encode_pixmap(np.zeros((2, 2, 2)))


def test_make_grid_layout():
    imgs = np.ones((3, 1, 2, 2))
    g = make_grid(imgs, ncol=2, pad=1)
    assert g.shape == (1, 2 * 2 + 3, 2 * 2 + 3)


def test_atomic_write_leaves_no_temp(tmp_path):
    p = tmp_path / "x.bin"
    atomic_write(str(p), b"abc")
    atomic_write(str(p), b"defg")
    assert p.read_bytes() == b"defg" and os.listdir(tmp_path) == ["x.bin"]


def trained_pieces(seed=0):
    m = DiffusionRWKV(tiny(), seed=seed)
    m.randomize_(seed + 1)
    params = m.parameters()
    ema = EmaState.from_params(params, 0.99)
    opt = AdamW(params, 1e-3)
    rng = Rng(seed, 5)
    for n in opt.m:
        opt.m[n] = rng.normal(opt.m[n].shape)
        opt.v[n] = np.abs(rng.normal(opt.v[n].shape))
        ema.shadow[n] = rng.normal(ema.shadow[n].shape)
    opt.t = 17
    return m, ema, opt


def test_checkpoint_round_trip_bitwise(tmp_path):
    m, ema, opt = trained_pieces()
    p1, p2 = tmp_path / "a.drwk", tmp_path / "b.drwk"
    checkpoint_save(str(p1), m, ema, opt, step=17, extra={"schedule.beta_start": 1e-4})
    ck = checkpoint_load(str(p1))
    assert ck.config == m.config and ck.step == 17 and ck.header["opt.t"] == "17"
    for n, t in m.named_parameters():
        assert ck.model[n].tobytes() == t.data.tobytes()
        assert ck.ema[n].tobytes() == ema.shadow[n].tobytes()
        assert ck.opt_m[n].tobytes() == opt.m[n].tobytes()
        assert ck.opt_v[n].tobytes() == opt.v[n].tobytes()
    m2 = load_model(str(p1))
    opt2 = AdamW(m2.parameters())
    opt2.m, opt2.v, opt2.t = ck.opt_m, ck.opt_v, int(ck.header["opt.t"])
    checkpoint_save(str(p2), m2, EmaState(ck.ema, 0.99), opt2, step=17, extra={"schedule.beta_start": 1e-4})
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(load_model(str(p1), use_ema=True).parameters()["pos_embed"].data, ema.shadow["pos_embed"])


def test_checkpoint_layout_and_errors(tmp_path):
    m, ema, opt = trained_pieces()
    p = tmp_path / "a.drwk"
    checkpoint_save(str(p), m, ema, opt, step=3)
    buf = p.read_bytes()
    assert buf[:4] == b"DRWK" and struct.unpack("<I", buf[4:8])[0] == 1
    bad = tmp_path / "bad.drwk"
    bad.write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(BadMagicError):
        checkpoint_load(str(bad))
    bad.write_bytes(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(UnsupportedVersionError):
        checkpoint_load(str(bad))
    for cut in (6, 100, len(buf) // 2, len(buf) - 1):
        bad.write_bytes(buf[:cut])
        with pytest.raises(TruncatedCheckpointError):
            checkpoint_load(str(bad))
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0xFF
    bad.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        checkpoint_load(str(bad))
    # payload written for one width, header claiming another
    header, entries = decode(buf)
    header["model.D"] = "32"
    bad.write_bytes(encode(header, entries))
    with pytest.raises(ShapeMismatchError):
        checkpoint_load(str(bad))
    for cls in (BadMagicError, UnsupportedVersionError, TruncatedCheckpointError, ShapeMismatchError):
        assert issubclass(cls, CheckpointError)
    assert len({BadMagicError, UnsupportedVersionError, TruncatedCheckpointError, ShapeMismatchError}) == 4


def test_resume_equals_straight_run():
    resumed, straight = resume_equivalence(k=5, extra=10)
    assert abs(resumed - straight) <= 1e-6
