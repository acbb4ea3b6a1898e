import numpy as np
import pytest
import torch

from seaice.ice_net import InitKind, InitStrategy, ModelSpec, build_model, initialize
from seaice.patch_sampler import NormalizationStats
from seaice.scene_inference import (
    SINGLE_PASS,
    ClassMap,
    InferenceMemoryError,
    Tiled,
    _keep_bounds,
    _tile_spans,
    error_map,
    error_mask_rgba,
    mode_disagreement,
    parse_mode,
    predict_logits,
    predict_scene,
    write_error_png,
    write_geotiff,
)

UNIT = NormalizationStats((0.0,) * 3, (1.0,) * 3)


def _model(**kw):
    spec = ModelSpec(aspp_channels=16, **kw)
    return initialize(build_model(spec), InitStrategy(InitKind.RANDOM, 0)).eval()


@pytest.fixture(scope="module")
def small_model():
    return _model()


# ---------------------------------------------------------------- tiling geometry


@pytest.mark.parametrize("length,tile,overlap", [(100, 64, 16), (1000, 256, 64), (5000, 1024, 256), (64, 64, 16), (1025, 1024, 256)])
def test_tiles_cover_and_kept_parts_partition(length, tile, overlap):
    spans = _tile_spans(length, tile, overlap, 16)
    assert spans[0][0] == 0 and spans[-1][1] == length
    assert all(s % 16 == 0 for s, _ in spans)
    assert all(e - s < tile + 16 for s, e in spans)  # last tile may grow to keep its start aligned
    keep = _keep_bounds(spans)
    assert keep[0][0] == 0 and keep[-1][1] == length
    assert all(a[1] == b[0] for a, b in zip(keep, keep[1:]))
    assert all(s <= lo < hi <= e for (s, e), (lo, hi) in zip(spans, keep))


def test_invalid_tiling_rejected():
    with pytest.raises(ValueError, match="twice"):
        Tiled(512, 256)
    with pytest.raises(ValueError):
        Tiled(100, -1)


def test_parse_mode():
    assert parse_mode("single") is SINGLE_PASS
    assert parse_mode("tiled") == Tiled(1024, 256)
    assert parse_mode("tiled:512:128") == Tiled(512, 128)
    with pytest.raises(ValueError):
        parse_mode("strided")


# ---------------------------------------------------------------- predictions


def test_classmap_shape_and_dtype(small_model, feb_scene):
    cmap = predict_scene(small_model, feb_scene, UNIT)
    assert isinstance(cmap, ClassMap)
    assert cmap.classes.shape == feb_scene.shape and cmap.classes.dtype == np.uint8
    assert set(np.unique(cmap.classes)) <= {0, 1}
    assert cmap.provenance["inference_config"]


def test_single_tile_scene_matches_single_pass_exactly(small_model, feb_scene):
    a = predict_scene(small_model, feb_scene, UNIT, SINGLE_PASS).classes
    b = predict_scene(small_model, feb_scene, UNIT, Tiled(1024, 256)).classes
    np.testing.assert_array_equal(a, b)
    assert mode_disagreement(small_model, feb_scene, UNIT, Tiled(1024, 256)) == 0.0


def test_tiled_matches_single_pass_when_margin_covers_receptive_field():
    # rates (1, 2, 3) and no global pooling: the receptive field radius is ~170 px
    model = _model(aspp_rates=(1, 2, 3), include_image_pooling_branch=False)
    x = np.random.default_rng(0).normal(size=(3, 1200, 64)).astype(np.float32)
    a = predict_logits(model, x, SINGLE_PASS)
    b = predict_logits(model, x, Tiled(768, 352))
    torch.testing.assert_close(a, b, rtol=1e-4, atol=1e-4)


def test_constant_input_gives_constant_interior():
    model = _model(aspp_rates=(1, 2, 3))
    logits = predict_logits(model, np.zeros((3, 512, 512), np.float32), SINGLE_PASS)
    centre = logits[:, 224:288, 224:288]
    assert torch.allclose(centre, centre[:, :1, :1].expand_as(centre), atol=1e-5)


def test_training_mode_model_rejected(feb_scene):
    model = _model().train()
    with pytest.raises(RuntimeError, match="evaluation"):
        predict_scene(model, feb_scene, UNIT)


def test_oom_is_reported_with_hint(monkeypatch, feb_scene):
    model = _model()

    def boom(x):
        raise RuntimeError("CUDA out of memory. Tried to allocate 20 GiB")

    monkeypatch.setattr(model, "forward", boom)
    with pytest.raises(InferenceMemoryError, match="tiled"):
        predict_scene(model, feb_scene, UNIT)


# ---------------------------------------------------------------- error maps


def test_error_map_all_correct():
    lab = np.array([[0, 1], [1, 0]])
    assert error_map(lab, lab, np.ones((2, 2), bool)).counts == {"correct": 4, "error": 0, "ignore": 0}


def test_error_map_all_wrong():
    lab = np.array([[0, 1], [1, 0]])
    assert error_map(1 - lab, lab, np.ones((2, 2), bool)).counts == {"correct": 0, "error": 4, "ignore": 0}


def test_error_map_ignores_invalid():
    lab = np.zeros((3, 3), int)
    pred = np.ones((3, 3), int)
    valid = np.zeros((3, 3), bool)
    valid[1, 1] = True
    assert error_map(pred, lab, valid).counts == {"correct": 0, "error": 1, "ignore": 8}


def test_error_map_from_classmap(feb_scene):
    cmap = ClassMap(feb_scene.id, np.array(feb_scene.labels == 1, np.uint8), np.array(feb_scene.valid))
    assert error_map(cmap, feb_scene.labels).counts["error"] == 0


def test_error_map_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        error_map(np.zeros((2, 2)), np.zeros((2, 3)), np.ones((2, 2), bool))


def test_error_rgba_colours():
    codes = np.array([[0, 1, 2]], np.uint8)
    from seaice.scene_inference import ErrorMask

    rgba = error_mask_rgba(ErrorMask(codes), classes=np.array([[1, 0, 0]]))
    assert tuple(rgba[0, 1]) == (128, 0, 160, 255)
    assert rgba[0, 2, 3] == 0
    assert rgba[0, 0, 3] == 255
    gray = error_mask_rgba(ErrorMask(codes), backdrop=np.array([[5.0, 1.0, np.nan]]))
    assert gray[0, 0, 0] == gray[0, 0, 1] == gray[0, 0, 2]


def test_writers(tmp_path, feb_scene):
    import rasterio
    from PIL import Image

    mask = error_map(np.zeros(feb_scene.shape, np.uint8), feb_scene.labels, feb_scene.valid)
    write_error_png(mask, tmp_path / "e.png", backdrop=feb_scene.channels[0])
    img = np.asarray(Image.open(tmp_path / "e.png"))
    assert img.shape == (*feb_scene.shape, 4)
    write_geotiff(mask.codes, tmp_path / "e.tif", feb_scene.geotransform, feb_scene.crs)
    with rasterio.open(tmp_path / "e.tif") as src:
        np.testing.assert_array_equal(src.read(1), mask.codes)
        assert tuple(src.transform)[:6] == tuple(feb_scene.geotransform)
