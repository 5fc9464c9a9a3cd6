import struct

import numpy as np
import pytest

from drowsy3d import data as D


def rand_record(rng, f=None, h=None, w=None):
    f = f or int(rng.integers(1, 12))
    h = h or int(rng.integers(1, 9))
    w = w or int(rng.integers(1, 9))
    return D.VideoRecord(rng.integers(0, 256, (f, h, w, 1), dtype=np.uint8),
                         int(rng.integers(0, 2)))


def test_fps_upsample():
    a, b = np.zeros((2, 2)), np.ones((2, 2))
    out = D.fps_upsample(np.stack([a, b]))
    assert len(out) == 4
    assert np.array_equal(out, np.stack([a, a, b, b]))
    with pytest.raises(ValueError):
        D.fps_upsample(np.zeros((0, 2, 2)))


def test_resize_and_gray():
    gray = np.full((8, 6, 3), 0.4, np.float32)
    assert np.allclose(D.resize_and_gray(gray), 0.4)
    assert D.resize_and_gray(np.zeros((480, 640, 3), np.uint8)).shape == (240, 320)
    rows = np.zeros((2, 2, 3), np.float32)
    rows[1] = 1.0
    assert D.resize_and_gray(rows)[0, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        D.resize_and_gray(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        D.resize_and_gray(np.zeros((5, 4, 3)))


@pytest.mark.parametrize("n,mode,count", [(250, "train", 2), (100, "train", 1),
                                          (250, "eval", 25), (99, "train", 0)])
def test_split_video(n, mode, count):
    frames = np.random.default_rng(n).integers(0, 256, (n, 3, 4), dtype=np.uint8)
    recs = D.split_video(frames, 1, mode)
    assert len(recs) == count
    chunk = 100 if mode == "train" else 10
    assert all(r.geometry == (chunk, 3, 4) for r in recs)
    if recs:
        joined = np.concatenate([r.frames[..., 0] for r in recs])
        assert np.array_equal(joined, frames[:len(joined)])


def test_record_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for trial in range(50):
        recs = [rand_record(rng) for _ in range(int(rng.integers(0, 5)))]
        p = tmp_path / f"r{trial}.ddr"
        D.write_records(recs, p)
        assert D.read_records(p) == recs


def test_record_header_layout(tmp_path):
    rec = D.VideoRecord(np.zeros((10, 240, 320, 1), np.uint8), 1)
    p = tmp_path / "one.ddr"
    D.write_records([rec], p)
    raw = p.read_bytes()
    assert raw[:4] == b"DDR1"
    assert struct.unpack("<IQ", raw[4:16]) == (1, 1)
    assert struct.unpack("<IIIB", raw[16:29]) == (10, 240, 320, 1)
    assert len(raw) - 29 == 768000


def test_record_errors(tmp_path):
    rng = np.random.default_rng(1)
    recs = [rand_record(rng, 4, 5, 6) for _ in range(3)]
    p = tmp_path / "a.ddr"
    D.write_records(recs, p)
    raw = p.read_bytes()
    q = tmp_path / "b.ddr"

    q.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(D.BadMagicError):
        D.read_records(q)
    q.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(D.VersionMismatchError):
        D.read_records(q)
    rec_size = 13 + 4 * 5 * 6
    q.write_bytes(raw[:16 + rec_size + 20])
    with pytest.raises(D.TruncatedRecordError) as exc:
        D.read_records(q)
    assert exc.value.index == 1
    bad = bytearray(raw)
    bad[16 + 12] = 7
    q.write_bytes(bytes(bad))
    with pytest.raises(D.LabelError):
        D.read_records(q)
    q.write_bytes(raw + b"\0")
    with pytest.raises(D.RecordFormatError):
        D.read_records(q)


def test_record_validation():
    with pytest.raises(D.LabelError):
        D.VideoRecord(np.zeros((1, 2, 2, 1), np.uint8), 2)
    with pytest.raises(TypeError):
        D.VideoRecord(np.zeros((1, 2, 2, 1)), 0)
    r = D.VideoRecord.from_float(np.array([[[0.0, 0.5, 1.0]]]), 0)
    assert r.frames[..., 0].tolist() == [[[0, 128, 255]]]
    assert r.clip.max() == 1.0


def test_manifest(tmp_path):
    recs = D.generate_synthetic(6, 0, 10, 24, 32)
    m = D.write_dataset(recs, tmp_path / "s.ddr", "eval")
    m.write(tmp_path / "s.manifest")
    text = (tmp_path / "s.manifest").read_text()
    assert text.strip().split("\t")[1:] == ["6", "10", "24", "32"]
    back = D.DatasetManifest.read(tmp_path / "s.manifest", "eval")
    assert back.load() == recs
    (tmp_path / "bad.manifest").write_text(f"{tmp_path / 's.ddr'}\t7\t10\t24\t32\n")
    with pytest.raises(D.RecordFormatError):
        D.DatasetManifest.read(tmp_path / "bad.manifest").load()


def test_load_frame_directory(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (3, 6, 8), dtype=np.uint8)
    for i, a in enumerate(imgs):
        Image.fromarray(a).save(tmp_path / f"f{i:03d}.png")
    out = D.load_frame_directory(tmp_path)
    assert out.shape == (3, 6, 8)
    assert np.allclose(out * 255, imgs)
    npy = tmp_path / "npy"
    npy.mkdir()
    np.save(npy / "a.npy", np.full((4, 4), 0.25, np.float32))
    assert D.load_frame_directory(npy)[0, 0, 0] == 0.25


def test_synthetic_balance_and_determinism():
    a = D.generate_synthetic(100, 7, 10, 24, 32)
    b = D.generate_synthetic(100, 7, 10, 24, 32)
    assert sum(r.label for r in a) == 50
    assert a == b
    assert a != D.generate_synthetic(100, 8, 10, 24, 32)


def test_synthetic_closure_counts():
    rng = np.random.default_rng(0)
    for _ in range(300):
        _, closed, rows = D.render_clip("alert", rng, 10, 24, 32)
        assert closed.sum() <= 3 and np.ptp(rows) == 0
        _, closed, _ = D.render_clip("closure", rng, 10, 24, 32)
        assert closed.sum() >= 8
        _, closed, rows = D.render_clip("nod", rng, 10, 24, 32)
        assert closed.sum() <= 3 and np.all(np.diff(rows) > 0)


def test_synthetic_eye_darkness_tracks_closure():
    rng = np.random.default_rng(3)
    clip, closed, rows = D.render_clip("closure", rng, 10, 240, 320, noise=0.0)
    col = 160 - int(0.09 * 240)
    for t in range(10):
        ey = int(round(rows[t] - 0.07 * 240))
        assert (clip[t, ey, col] < 0.2) == bool(closed[t])


def test_single_frame_rules_stay_near_chance():
    # every frame index is equally likely to be closed in both classes, so a
    # per-frame majority vote and a last-frame rule both stay near chance
    rng = np.random.default_rng(0)
    n = 4000
    kinds = ["alert"] * n + ["closure" if rng.random() < D.CLOSURE_SHARE else "nod"
                             for _ in range(n)]
    labels = np.array([0] * n + [1] * n)
    flags = np.array([D._closed_run(rng, 10, k) for k in kinds])
    for t in range(10):
        assert abs(flags[labels == 0, t].mean() - flags[labels == 1, t].mean()) < 0.04
    majority = (flags.mean(axis=1) > 0.5).astype(int)
    assert np.mean(majority == labels) <= 0.65
    last = flags[:, -1].astype(int)
    assert abs(np.mean(last == labels) - 0.5) < 0.05


def test_synthetic_stream_is_endless_and_seeded():
    import itertools

    a = list(itertools.islice(D.synthetic_stream(0, 16, 16), 25))
    b = list(itertools.islice(D.synthetic_stream(0, 16, 16), 25))
    assert len(a) == 25 and a[0].shape == (16, 16)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
