import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from sprkit import dataset as ds
from sprkit import optics
from sprkit.dataset import SourceImage, SynthesisConfig

DESK = dict(ds.DESK_SYNTHESIS)


@pytest.fixture(scope="module")
def desk_corpus():
    return ds.synthetic_corpus(4, extent=32, seed=3)


# -- preprocess ---------------------------------------------------------------

def test_preprocess_passthrough():
    a = np.random.default_rng(0).uniform(size=(128, 128))
    np.testing.assert_array_equal(ds.preprocess(a).values, a)


def test_preprocess_8bit_constant():
    s = ds.preprocess(np.full((40, 60), 255, dtype=np.uint8))
    assert s.values.shape == (128, 128)
    np.testing.assert_allclose(s.values, 1.0, atol=1e-6)


def test_preprocess_checkerboard_mean():
    board = ((np.indices((256, 256)).sum(axis=0) // 8) % 2).astype(np.float64)
    out = ds.preprocess(board)
    assert abs(out.values.mean() - board.mean()) < 0.01


def test_preprocess_rgb_luminance():
    rgb = np.zeros((128, 128, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    np.testing.assert_allclose(ds.preprocess(rgb).values, 0.299, atol=1e-12)


def test_preprocess_rejects_empty():
    with pytest.raises(ValueError):
        ds.preprocess(np.zeros((0, 4)))


def test_load_raster_png_pgm_raw(tmp_path):
    img = (np.arange(64, dtype=np.uint8).reshape(8, 8) * 4)
    Image.fromarray(img).save(tmp_path / "a.png")
    Image.fromarray(img).save(tmp_path / "b.pgm")
    vals = np.random.default_rng(1).uniform(size=(5, 7)).astype("<f4")
    vals.tofile(tmp_path / "c.f32")
    (tmp_path / "c.f32.shape").write_text("5 7\n")
    np.testing.assert_allclose(ds.load_raster(tmp_path / "a.png"), img / 255.0)
    np.testing.assert_allclose(ds.load_raster(tmp_path / "b.pgm"), img / 255.0)
    np.testing.assert_array_equal(ds.load_raster(tmp_path / "c.f32"), vals.astype(np.float64))
    srcs = ds.load_sources(tmp_path, extent=16)
    assert [sid for sid, _ in srcs] == ["a", "b", "c"]


def test_load_raster_unreadable(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ds.DatasetFormatError):
        ds.load_raster(tmp_path / "bad.png")


# -- encodings ----------------------------------------------------------------

@pytest.mark.parametrize("x,expected", [(0.0, 1 + 0j), (0.5, -1 + 0j), (0.25, 1j)])
def test_phase_only_values(x, expected):
    assert ds.encode_phase_only(np.array([[x]])).data[0, 0] == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x,expected", [(0.0, 0j), (1.0, 1 + 0j), (0.5, -0.5 + 0j)])
def test_magnitude_phase_values(x, expected):
    assert ds.encode_magnitude_phase(np.array([[x]])).data[0, 0] == pytest.approx(expected, abs=1e-15)


def test_encoding_rejects_out_of_range():
    with pytest.raises(ValueError):
        ds.encode_phase_only(np.array([[1.5]]))
    with pytest.raises(ValueError):
        ds.encode_magnitude_phase(np.array([[-0.1]]))


# -- synthesis ----------------------------------------------------------------

def test_constant_source_dc_dominant():
    cfg = SynthesisConfig(**DESK, defocus_distance=0)
    s, _ = ds.synthesize_sample(SourceImage(np.zeros((32, 32))), cfg)
    np.testing.assert_array_equal(s.target_re, 1.0)
    np.testing.assert_array_equal(s.target_im, 0.0)
    assert s.input[16, 16] == s.input.max()


def test_constant_phase_offset_same_input():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 0.7, size=(32, 32))
    cfg = SynthesisConfig(**DESK, scale=1e-3)
    s1, _ = ds.synthesize_sample(SourceImage(a), cfg)
    s2, _ = ds.synthesize_sample(SourceImage(a + 0.25), cfg)
    # float32 storage of the target perturbs the spectrum a little
    assert np.abs(s1.input - s2.input).max() <= 1
    assert np.abs(s1.target - s2.target).max() > 0.5


def test_synthesis_deterministic(desk_corpus):
    cfg = SynthesisConfig(**DESK)
    a = ds.build_dataset(desk_corpus, cfg)
    b = ds.build_dataset(desk_corpus, cfg)
    for x, y in zip(a.samples, b.samples):
        assert x.input.tobytes() == y.input.tobytes()
        assert x.target_re.tobytes() == y.target_re.tobytes()


def test_phase_only_unit_magnitude(desk_corpus):
    d = ds.build_dataset(desk_corpus, SynthesisConfig(**DESK))
    for s in d.samples:
        assert np.abs(np.abs(s.target) - 1).max() <= 1e-6
        assert 0 <= s.input.min() and s.input.max() <= 4095


def test_resynthesis_reproduces_input(desk_corpus):
    for enc in ds.ENCODINGS:
        d = ds.build_dataset(desk_corpus, SynthesisConfig(**DESK, encoding=enc))
        for s in d.samples:
            m = d.measurement(s)
            np.testing.assert_array_equal(optics.center_crop(m, 32).astype(np.float32), s.input)


def test_source_extent_mismatch():
    with pytest.raises(ValueError):
        ds.synthesize_sample(SourceImage(np.zeros((16, 16))), SynthesisConfig(**DESK))


def test_config_oversampling_rule():
    with pytest.raises(optics.OversamplingError):
        SynthesisConfig(object_extent=128, dft_size=200, crop=128)


def test_defocus_reduces_saturation(desk_corpus):
    focused = ds.build_dataset(desk_corpus, SynthesisConfig(**DESK, defocus_distance=0))
    defocused = ds.build_dataset(desk_corpus, SynthesisConfig(**DESK, defocus_distance=30e-3))
    assert ds.saturation_fraction(focused) > ds.saturation_fraction(defocused)


# -- container format ---------------------------------------------------------

def _same(a, b):
    assert [s.id for s in a] == [s.id for s in b]
    for x, y in zip(a, b):
        assert x.encoding == y.encoding
        for f in ("input", "target_re", "target_im"):
            assert getattr(x, f).tobytes() == getattr(y, f).tobytes()


def test_round_trip_fixed_extent(tmp_path):
    rng = np.random.default_rng(0)
    samples = [ds.Sample(f"s{i}", rng.integers(0, 4096, (128, 128)), rng.standard_normal((128, 128)),
                         rng.standard_normal((128, 128)), ds.ENCODINGS[i % 2]) for i in range(3)]
    ds.write_dataset(samples, tmp_path / "a.spr1")
    raw = (tmp_path / "a.spr1").read_bytes()
    assert raw[:4] == b"SPR1" and raw[4:6] == b"\x01\x00" and raw[6:10] == b"\x03\x00\x00\x00"
    assert len(raw) == 10 + 3 * (2 + 2 + 1 + 3 * 4 * 128 * 128)
    _same(samples, ds.read_dataset(tmp_path / "a.spr1").samples)


def test_round_trip_with_metadata(tmp_path, desk_corpus):
    d = ds.build_dataset(desk_corpus, SynthesisConfig(**DESK))
    ds.write_dataset(d, tmp_path / "d.spr1")
    back = ds.read_dataset(tmp_path / "d.spr1")
    _same(d.samples, back.samples)
    assert back.config == d.config and back.scales == d.scales
    ds.write_dataset(back, tmp_path / "e.spr1")
    assert (tmp_path / "d.spr1").read_bytes() == (tmp_path / "e.spr1").read_bytes()
    assert (tmp_path / "d.spr1.json").read_bytes() == (tmp_path / "e.spr1.json").read_bytes()


def test_empty_dataset(tmp_path):
    ds.write_dataset([], tmp_path / "empty.spr1")
    assert (tmp_path / "empty.spr1").read_bytes() == b"SPR1\x01\x00\x00\x00\x00\x00"
    assert len(ds.read_dataset(tmp_path / "empty.spr1")) == 0


def test_format_errors(tmp_path, desk_corpus):
    d = ds.build_dataset(desk_corpus[:1], SynthesisConfig(**DESK))
    ds.write_dataset(d, tmp_path / "ok.spr1")
    good = (tmp_path / "ok.spr1").read_bytes()
    cases = {
        "magic": b"SPR0" + good[4:],
        "truncated": good[:-7],
        "version": good[:4] + b"\x09\x00" + good[6:],
        "trailing": good + b"\x00",
    }
    for name, blob in cases.items():
        p = tmp_path / f"{name}.spr1"
        p.write_bytes(blob)
        with pytest.raises(ds.DatasetFormatError):
            ds.read_dataset(p)


def test_non_integral_input_rejected(tmp_path):
    s = ds.Sample("x", np.full((128, 128), 0.5), np.zeros((128, 128)), np.zeros((128, 128)))
    ds.write_dataset([s], tmp_path / "x.spr1")
    with pytest.raises(ds.DatasetFormatError):
        ds.read_dataset(tmp_path / "x.spr1")


def test_missing_metadata(tmp_path):
    s = ds.Sample("x", np.zeros((128, 128)), np.ones((128, 128)), np.zeros((128, 128)))
    ds.write_dataset([s], tmp_path / "x.spr1")
    d = ds.read_dataset(tmp_path / "x.spr1")
    with pytest.raises(ds.DatasetFormatError):
        d.measurement(d.samples[0])


# -- k-fold -------------------------------------------------------------------

def test_kfold_100_5():
    ids = [f"id{i}" for i in range(100)]
    plan = ds.split_kfold(ids, 5, seed=0)
    assert [len(t) for t in plan.test] == [20] * 5
    assert [len(t) for t in plan.train] == [80] * 5
    assert sorted(sum(plan.test, [])) == sorted(ids)


def test_kfold_determinism():
    ids = [str(i) for i in range(30)]
    assert ds.split_kfold(ids, 3, 1) == ds.split_kfold(ids, 3, 1)
    other = ds.split_kfold(ids, 3, 2)
    assert other.test != ds.split_kfold(ids, 3, 1).test
    assert [len(t) for t in other.test] == [10, 10, 10]


def test_kfold_errors():
    with pytest.raises(ValueError):
        ds.split_kfold(["a", "b"], 3)
    with pytest.raises(ValueError):
        ds.split_kfold(["a", "b"], 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.data())
def test_kfold_is_partition(n, data):
    K = data.draw(st.integers(2, n))
    seed = data.draw(st.integers(0, 2 ** 31))
    ids = [f"s{i}" for i in range(n)]
    plan = ds.split_kfold(ids, K, seed)
    flat = sum(plan.test, [])
    assert sorted(flat) == sorted(ids) and len(flat) == n
    for f in range(K):
        assert set(plan.train[f]) | set(plan.test[f]) == set(ids)
        assert not set(plan.train[f]) & set(plan.test[f])
        assert len(plan.test[f]) in (n // K, -(-n // K))
