from __future__ import annotations

import json
import math
import struct

import numpy as np
import pytest

from attrcert.model import forward, init_weights, train
from attrcert.store import (FORMAT_NAME, IdxParseError, ModelLoadError, RESULT_FIELDS, ResultRow,
                            emit_results, load_idx, load_model, model_digest, model_from_text,
                            model_to_text, parse_idx, read_results, save_model, synth_dataset,
                            write_table)


@pytest.fixture
def model():
    return init_weights([6, 9, 5, 3], "softplus", seed=12, softplus_beta=0.7)


def test_roundtrip_is_bit_exact(model, tmp_path):
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    X = np.random.default_rng(0).random((100, 6))
    assert forward(back, X)[0].tobytes() == forward(model, X)[0].tobytes()
    assert back.softplus_beta == 0.7
    assert [layer.activation for layer in back.layers] == [layer.activation for layer in model.layers]
    assert model_digest(back) == model_digest(model)
    assert path.read_text() == model_to_text(model)


def test_container_fields(model):
    doc = json.loads(model_to_text(model))
    assert doc["format"] == FORMAT_NAME and doc["version"] == 1
    assert doc["digest"].startswith("sha256:")
    assert [(layer["in"], layer["out"]) for layer in doc["layers"]] == [(6, 9), (9, 5), (5, 3)]


@pytest.mark.parametrize("cut", [0, 1, 40, -200, -2])
def test_truncated_file_is_rejected(model, tmp_path, cut):
    text = model_to_text(model)
    path = tmp_path / "t.json"
    path.write_text(text[:cut] if cut >= 0 else text[:len(text) + cut])
    with pytest.raises(ModelLoadError):
        load_model(path)


def test_digest_tamper_is_rejected(model):
    doc = json.loads(model_to_text(model))
    doc["layers"][0]["activation"] = "relu"
    with pytest.raises(ModelLoadError) as err:
        model_from_text(json.dumps(doc))
    assert err.value.field == "digest"


@pytest.mark.parametrize("field, value", [("format", "other"), ("version", 2), ("softplus_beta", -1.0)])
def test_header_errors_name_the_field(model, field, value):
    doc = json.loads(model_to_text(model))
    doc[field] = value
    with pytest.raises(ModelLoadError) as err:
        model_from_text(json.dumps(doc))
    assert err.value.field in (field, "digest")


def test_weight_byte_count_checked_before_digest_bypass(model):
    doc = json.loads(model_to_text(model))
    doc["layers"][1]["out"] = 4
    doc.pop("digest")
    from attrcert.store import _canonical
    import hashlib
    doc["digest"] = "sha256:" + hashlib.sha256(_canonical(doc)).hexdigest()
    with pytest.raises(ModelLoadError) as err:
        model_from_text(json.dumps(doc))
    assert "layers[1]" in err.value.field


def _idx_pair(images: list[list[int]], labels: list[int], rows=2, cols=2):
    img = struct.pack(">IIII", 0x803, len(images), rows, cols) + bytes(v for im in images for v in im)
    lab = struct.pack(">II", 0x801, len(labels)) + bytes(labels)
    return img, lab


def test_idx_fixture_pixels():
    img, lab = _idx_pair([[0, 1, 128, 255], [255, 128, 1, 0]], [3, 7])
    data = parse_idx(img, lab)
    assert data.X.shape == (2, 4)
    assert np.array_equal(data.X[0], [0.0, 1 / 255, 128 / 255, 1.0])
    assert list(data.y) == [3, 7]


def test_idx_limit_and_files(tmp_path):
    img, lab = _idx_pair([[0, 1, 2, 3]] * 5, [0, 1, 2, 3, 4])
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    assert len(load_idx(tmp_path / "i", tmp_path / "l", limit=0)) == 0
    assert len(load_idx(tmp_path / "i", tmp_path / "l", limit=3)) == 3
    assert len(load_idx(tmp_path / "i", tmp_path / "l")) == 5


def test_idx_errors():
    img, lab = _idx_pair([[0, 1, 2, 3]], [1])
    with pytest.raises(IdxParseError, match="expected label magic"):
        parse_idx(img, img)
    with pytest.raises(IdxParseError, match="truncated"):
        parse_idx(img[:-1], lab)
    with pytest.raises(IdxParseError, match="truncated"):
        parse_idx(img, lab[:-1])
    img2, lab2 = _idx_pair([[0, 1, 2, 3]] * 2, [1])
    with pytest.raises(IdxParseError, match="does not match"):
        parse_idx(img2, lab2)
    with pytest.raises(IdxParseError, match="outside"):
        parse_idx(*_idx_pair([[0, 0, 0, 0]], [12]))
    try:
        parse_idx(img[:-1], lab)
    except IdxParseError as exc:
        assert exc.offset == len(img) - 1


def test_blobs_balanced_and_deterministic():
    a = synth_dataset("blobs", 8, 2, 100, 0.05, seed=7)
    assert len(a) == 200 and np.bincount(a.y).tolist() == [100, 100]
    b = synth_dataset("blobs", 8, 2, 100, 0.05, seed=7)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_noise_free_blobs_are_linearly_separable():
    data = synth_dataset("blobs", 8, 2, 50, 0.0, seed=3)
    w = train(data, [8, 2], "identity", lr=0.5, epochs=100, seed=0)
    logits = forward(w, data.X)[0]
    assert np.all(np.argmax(logits, 1) == data.y)


def test_bars_patterns():
    data = synth_dataset("bars", 16, 4, 1, 0.0, seed=0)
    imgs = data.X.reshape(4, 4, 4)
    assert set(np.unique(imgs)) == {0.2, 0.8}
    assert np.all(imgs[0][0] == 0.8) and np.all(imgs[1][:, 0] == 0.8)
    with pytest.raises(ValueError):
        synth_dataset("bars", 10, 2, 1)


def _rows():
    return [
        ResultRow(run_id="abc", sample_index=0, kind="bound_T", r=0.5, epsilon=0.25, value=0.123456789012345678,
                  norm_h=2.0, M=4.0, m_strategy="lipschitz(sm,wrt=logit)", feasible=True, vU_over_vS=1.9,
                  n_samples=100, smooth_seed=0),
        ResultRow(run_id="abc", sample_index=1, kind="bound_T", r=0.4, epsilon=1.0, value=None,
                  norm_h=1.5, M=4.0, m_strategy="user(4.0)", feasible=False, reason="epsilon > 2r, \"quoted\""),
        ResultRow(run_id="abc", sample_index=2, repeat=3, kind="attack", cosine=math.nan,
                  prediction_preserved=False, attack_seed=2**40),
    ]


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_results_roundtrip(tmp_path, fmt):
    path = tmp_path / f"r.{fmt}"
    emit_results(_rows(), fmt, path)
    back = read_results(path, fmt)
    expected = _rows()
    expected[2].cosine = None  # non-finite values are written as missing
    assert back == expected


def test_empty_rows_give_header_only(tmp_path):
    emit_results([], "csv", tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(RESULT_FIELDS) + "\n"
    emit_results([], "jsonl", tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == ""


def test_infeasible_rendering(tmp_path):
    emit_results(_rows()[1:2], "csv", tmp_path / "x.csv")
    line = (tmp_path / "x.csv").read_text().splitlines()[1].split(",")
    assert line[RESULT_FIELDS.index("value")] == ""
    emit_results(_rows()[1:2], "jsonl", tmp_path / "x.jsonl")
    assert json.loads((tmp_path / "x.jsonl").read_text())["value"] is None


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_results([], "xml", tmp_path / "x")


def test_pivot_table(tmp_path):
    write_table(tmp_path / "p.csv", "eps\\r", [0.5, 1.0], [0.5, 1.0], {(0.5, 0.5): 0.3, (1.0, 1.0): None})
    assert (tmp_path / "p.csv").read_text().splitlines() == ["eps\\r,0.5,1.0", "0.5,0.3,", "1.0,,"]
