import json

import numpy as np
import pytest

from mrigen.errors import ManifestError
from mrigen.imageio import (
    ingest_manifest, manifest_record, read_image, read_raw, to_u8, write_image, write_manifest,
)
from mrigen.phantom import SliceMeta


def test_to_u8_rounds_half_up():
    assert to_u8(np.array([0.0, 0.5, 1.0, 2.0, -1.0])).tolist() == [0, 128, 255, 255, 0]


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_write_read_round_trip(tmp_path, suffix):
    img = np.random.default_rng(0).uniform(size=(5, 7))
    path = tmp_path / f"x{suffix}"
    write_image(path, img)
    back = read_image(path)
    assert back.shape == (5, 7)
    assert np.array_equal(np.round(back * 255), to_u8(img))


def test_pgm_with_comment_and_16_bit(tmp_path):
    path = tmp_path / "c.pgm"
    data = np.array([[0, 1000], [65535, 7]], dtype=">u2")
    path.write_bytes(b"P5\n# comment line\n2 2\n65535\n" + data.tobytes())
    assert read_raw(path).tolist() == [[0, 1000], [65535, 7]]


def _entries(tmp_path, n=3, size=6):
    recs = []
    for i in range(n):
        write_image(tmp_path / f"s{i}.png", np.full((size, size), i / 4))
        recs.append(manifest_record(f"s{i}.png", SliceMeta("0.3T", "T1", i + 1, "a")))
    return recs


def test_ingest_in_order(tmp_path):
    write_manifest(tmp_path / "m.jsonl", _entries(tmp_path))
    out = ingest_manifest(tmp_path / "m.jsonl")
    assert [m.slice_index for _, m in out] == [1, 2, 3]
    assert out[2][0][0, 0] == pytest.approx(128 / 255)


def test_bad_modality_names_line(tmp_path):
    recs = _entries(tmp_path)
    recs[1]["modality"] = "T3"
    write_manifest(tmp_path / "m.jsonl", recs)
    with pytest.raises(ManifestError) as info:
        ingest_manifest(tmp_path / "m.jsonl")
    assert info.value.line == 2 and "line 2" in str(info.value)


def test_skip_errors(tmp_path):
    recs = _entries(tmp_path)
    recs[0]["path"] = "missing.png"
    write_manifest(tmp_path / "m.jsonl", recs)
    with pytest.raises(ManifestError):
        ingest_manifest(tmp_path / "m.jsonl")
    assert len(ingest_manifest(tmp_path / "m.jsonl", skip_errors=True)) == 2


def test_dimension_mismatch(tmp_path):
    recs = _entries(tmp_path)
    write_image(tmp_path / "big.png", np.zeros((8, 8)))
    recs.append(manifest_record("big.png", SliceMeta("3T", "T2", 1)))
    write_manifest(tmp_path / "m.jsonl", recs)
    with pytest.raises(ManifestError) as info:
        ingest_manifest(tmp_path / "m.jsonl")
    assert info.value.line == 4


def test_crop_and_normalize(tmp_path):
    raw = np.random.default_rng(1).uniform(10, 3000, size=(320, 320))
    np.save(tmp_path / "vol.npy", raw)
    rec = manifest_record("vol.npy", SliceMeta("3T", "FLAIR", 1), normalize=True, crop_to=(256, 256))
    (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
    [(img, meta)] = ingest_manifest(tmp_path / "m.jsonl")
    assert img.shape == (256, 256)
    assert 0.0 <= img.min() and img.max() <= 1.0
    assert meta.modality.value == "FLAIR"


def test_unnormalized_out_of_range_rejected(tmp_path):
    np.save(tmp_path / "v.npy", np.full((4, 4), 300.0))
    rec = manifest_record("v.npy", SliceMeta("3T", "T1", 1))
    (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(ManifestError):
        ingest_manifest(tmp_path / "m.jsonl")
